//! Temporally correlated exploration noise.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::env::SimRng;

pub const DEFAULT_PINK_BLOCK: usize = 4096;

/// 1/f noise generated in blocks by shaping white Gaussian noise in the
/// frequency domain. Each block has zero mean and unit sample variance before
/// scaling by `sigma`; consecutive blocks are independent.
pub struct PinkNoise {
    dim: usize,
    pub sigma: f64,
    block_len: usize,
    fft: Arc<dyn Fft<f64>>,
    rng: SimRng,
    /// `block[d][t]`
    block: Vec<Vec<f64>>,
    cursor: usize,
}

impl std::fmt::Debug for PinkNoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PinkNoise")
            .field("dim", &self.dim)
            .field("sigma", &self.sigma)
            .field("block_len", &self.block_len)
            .field("cursor", &self.cursor)
            .finish()
    }
}

impl PinkNoise {
    pub fn new(dim: usize, sigma: f64, seed: u64) -> Self {
        Self::with_block_len(dim, sigma, DEFAULT_PINK_BLOCK, seed)
    }

    pub fn with_block_len(dim: usize, sigma: f64, block_len: usize, seed: u64) -> Self {
        let block_len = block_len.max(4);
        let fft = FftPlanner::new().plan_fft_inverse(block_len);
        let mut p = Self {
            dim,
            sigma,
            block_len,
            fft,
            rng: SimRng::seed_from_u64(seed),
            block: Vec::new(),
            cursor: 0,
        };
        p.refill();
        p
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Start a fresh, independent noise sequence (episode boundary).
    pub fn reset(&mut self) {
        self.refill();
    }

    pub fn sample(&mut self) -> Vec<f64> {
        if self.cursor >= self.block_len {
            self.refill();
        }
        let t = self.cursor;
        self.cursor += 1;
        self.block.iter().map(|b| self.sigma * b[t]).collect()
    }

    fn refill(&mut self) {
        let n = self.block_len;
        self.block = (0..self.dim).map(|_| pink_block(n, &*self.fft, &mut self.rng)).collect();
        self.cursor = 0;
    }
}

fn pink_block(n: usize, fft: &dyn Fft<f64>, rng: &mut SimRng) -> Vec<f64> {
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    let half = n / 2;
    for k in 1..=half {
        let amp = (k as f64).powf(-0.5);
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = if 2 * k == n { 0.0 } else { StandardNormal.sample(rng) };
        spec[k] = Complex::new(re * amp, im * amp);
        if 2 * k != n {
            spec[n - k] = spec[k].conj();
        }
    }
    fft.process(&mut spec);
    let mut x: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-300);
    for v in &mut x {
        *v = (*v - mean) / sd;
    }
    x
}

/// Per-rollout exploration scale `σ ~ U[σ_min, σ_max]`.
pub fn sample_noise_scale(sigma_min: f64, sigma_max: f64, rng: &mut impl Rng) -> f64 {
    if sigma_max <= sigma_min {
        return sigma_min;
    }
    rng.random_range(sigma_min..=sigma_max)
}
