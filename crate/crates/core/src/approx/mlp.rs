//! Fully-connected networks with a recorded forward pass and analytic
//! reverse-mode gradients.
//!
//! Layers compute `y = act(x · Wᵀ + b)` on row-major batches, so a batch of
//! `B` inputs is a `B × in` matrix and the weight matrix is `out × in`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

/// Elementwise nonlinearity applied after a layer's affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    /// `z · sigmoid(z)`, used by the dynamics ensemble.
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative with respect to the pre-activation `z`, given `y = apply(z)`.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "silu" => Some(Activation::Silu),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Intermediate values of one batched forward pass, consumed by [`gradient`].
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input fed to each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

/// Parameter-shaped gradient (or moment) storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }

    /// Iterate over `(weights, biases)` pairs per layer as flat slices.
    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
    }

    pub(crate) fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_slice_mut().unwrap(), b.as_slice_mut().unwrap()])
    }
}

impl MlpParams {
    /// Build from explicit layers, checking that dimensions chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for l in &layers {
            shape("layer bias", l.out_dim(), l.bias.len())?;
        }
        for pair in layers.windows(2) {
            shape("layer chain", pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(Self { layers })
    }

    /// Scaled uniform fan-in initialization: every weight and bias of a
    /// layer with fan-in `k` is drawn from `U(-1/√k, 1/√k)`.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
                Layer {
                    weight,
                    bias,
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    /// Multiply the last layer's weights and bias by `factor` (small output
    /// initialization for actors).
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.last_mut().unwrap();
        last.weight.mapv_inplace(|v| v * factor);
        last.bias.mapv_inplace(|v| v * factor);
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim())
    }

    /// Batched forward pass.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        shape("network input", self.input_dim(), input.ncols())?;
        let mut x = affine(&self.layers[0], input);
        x.mapv_inplace(|z| self.layers[0].activation.apply(z));
        for layer in &self.layers[1..] {
            let mut z = affine(layer, x.view());
            z.mapv_inplace(|v| layer.activation.apply(v));
            x = z;
        }
        Ok(x)
    }

    /// Forward pass for a single input vector.
    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that records what [`gradient`] needs.
    pub fn forward_tape(&self, input: ArrayView2<'_, f64>) -> Result<Tape> {
        shape("network input", self.input_dim(), input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let z = affine(layer, x.view());
            let y = z.mapv(|v| layer.activation.apply(v));
            inputs.push(x);
            pre.push(z);
            x = y;
        }
        Ok(Tape {
            inputs,
            pre,
            output: x,
        })
    }

    /// Reverse pass. `adjoint` is ∂L/∂output (`B × out`); returns the
    /// parameter gradient and ∂L/∂input (`B × in`).
    pub fn backward(
        &self,
        tape: &Tape,
        adjoint: ArrayView2<'_, f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        shape("adjoint rows", tape.batch_size(), adjoint.nrows())?;
        shape("adjoint cols", self.output_dim(), adjoint.ncols())?;
        shape("tape depth", self.layers.len(), tape.pre.len())?;
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut upstream = adjoint.to_owned();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let z = &tape.pre[i];
            let y = if i + 1 == n {
                &tape.output
            } else {
                &tape.inputs[i + 1]
            };
            let act = layer.activation;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut upstream)
                    .and(z)
                    .and(y)
                    .for_each(|d, &zv, &yv| *d *= act.derivative(zv, yv));
            }
            let dw = upstream.t().dot(&tape.inputs[i]).as_standard_layout().into_owned();
            let db = upstream.sum_axis(Axis(0));
            let dx = upstream.dot(&layer.weight);
            weights.push(dw);
            biases.push(db);
            upstream = dx;
        }
        weights.reverse();
        biases.reverse();
        Ok((Gradients { weights, biases }, upstream))
    }

    pub(crate) fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    /// All parameters flattened layer by layer (weights then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn max_abs_diff(&self, other: &MlpParams) -> f64 {
        self.slices()
            .zip(other.slices())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

fn affine(layer: &Layer, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

/// Parameter gradient of a loss whose adjoint at the network output is
/// `adjoint`, for the forward pass recorded in `tape`.
pub fn gradient(params: &MlpParams, tape: &Tape, adjoint: ArrayView2<'_, f64>) -> Result<Gradients> {
    params.backward(tape, adjoint).map(|(g, _)| g)
}

/// `target ← tau·online + (1 − tau)·target`, elementwise.
pub fn polyak_update(target: &mut MlpParams, online: &MlpParams, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("polyak factor {tau} outside [0, 1]")));
    }
    shape("polyak layers", target.layers.len(), online.layers.len())?;
    for (t, o) in target.layers.iter().zip(&online.layers) {
        shape("polyak weights", t.weight.len(), o.weight.len())?;
        shape("polyak bias", t.bias.len(), o.bias.len())?;
    }
    for (t, o) in target.slices_mut().zip(online.slices()) {
        for (tv, ov) in t.iter_mut().zip(o) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: Array2<f64>, b: Array1<f64>) -> MlpParams {
        MlpParams::new(vec![Layer {
            weight: w,
            bias: b,
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn zero_weights_return_bias() {
        let net = linear(Array2::zeros((2, 3)), array![0.5, -1.5]);
        let y = net.forward_one(&[3.0, -7.0, 11.0]).unwrap();
        assert_eq!(y, vec![0.5, -1.5]);
    }

    #[test]
    fn single_affine_layer() {
        let net = linear(array![[2.0]], array![1.0]);
        assert_eq!(net.forward_one(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let net = linear(array![[2.0, 1.0]], array![1.0]);
        assert!(matches!(net.forward_one(&[3.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn broken_chain_rejected() {
        let layers = vec![
            Layer {
                weight: Array2::zeros((3, 2)),
                bias: Array1::zeros(3),
                activation: Activation::Tanh,
            },
            Layer {
                weight: Array2::zeros((1, 4)),
                bias: Array1::zeros(1),
                activation: Activation::Identity,
            },
        ];
        assert!(MlpParams::new(layers).is_err());
    }

    #[test]
    fn squared_loss_at_minimum_has_zero_gradient() {
        let net = linear(array![[0.3, -0.2]], array![0.1]);
        let x = array![[1.0, 2.0]];
        let tape = net.forward_tape(x.view()).unwrap();
        let target = tape.output().clone();
        let adjoint = 2.0 * (tape.output() - &target);
        let g = gradient(&net, &tape, adjoint.view()).unwrap();
        assert!(g.weights[0].iter().all(|&v| v == 0.0));
        assert!(g.biases[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tanh_slope_at_origin() {
        let net = MlpParams::new(vec![Layer {
            weight: array![[0.0]],
            bias: array![0.0],
            activation: Activation::Tanh,
        }])
        .unwrap();
        let tape = net.forward_tape(array![[1.0]].view()).unwrap();
        let g = gradient(&net, &tape, array![[1.0]].view()).unwrap();
        assert_eq!(g.weights[0][[0, 0]], 1.0);
    }

    #[test]
    fn polyak_endpoints_and_midpoint() {
        let online = linear(array![[2.0]], array![2.0]);
        let zero = linear(array![[0.0]], array![0.0]);

        let mut t = zero.clone();
        polyak_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);

        let mut t = zero.clone();
        polyak_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, zero);

        let mut t = zero.clone();
        polyak_update(&mut t, &online, 0.5).unwrap();
        assert_eq!(t.layers[0].weight[[0, 0]], 1.0);
        assert_eq!(t.layers[0].bias[0], 1.0);
    }

    #[test]
    fn polyak_rejects_bad_tau_and_shapes() {
        let a = linear(array![[2.0]], array![2.0]);
        let mut b = a.clone();
        assert!(polyak_update(&mut b, &a, 1.5).is_err());
        let wide = linear(array![[2.0, 1.0]], array![2.0]);
        assert!(polyak_update(&mut b, &wide, 0.5).is_err());
    }

    #[test]
    fn polyak_contracts_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let online = MlpParams::init(&[3, 8, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let mut target =
            MlpParams::init(&[3, 8, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let tau = 0.001;
        let mut dist = target.max_abs_diff(&online);
        for _ in 0..50 {
            polyak_update(&mut target, &online, tau).unwrap();
            let next = target.max_abs_diff(&online);
            assert!((next - (1.0 - tau) * dist).abs() <= 1e-12 * dist.max(1.0));
            dist = next;
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = MlpParams::init(&[4, 16, 16, 3], Activation::Relu, Activation::Tanh, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let a = net.forward(x.view()).unwrap();
        let b = net.forward(x.view()).unwrap();
        assert_eq!(a, b);
    }
}
