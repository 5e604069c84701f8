//! Ring-buffer replay memory holding n-step aggregated transitions.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};

/// One stored sample: `y = ret + discount · min Q̄(s_boot, ·)`.
///
/// For 1-step entries `ret` is the reward and `discount` is `γ` (or 0 on
/// termination).
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTransition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub ret: f64,
    pub s_boot: Vec<f64>,
    pub discount: f64,
}

/// A sampled mini-batch, rows aligned.
#[derive(Clone, Debug)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub ret: Array1<f64>,
    pub s_boot: Array2<f64>,
    pub discount: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    state_dim: usize,
    action_dim: usize,
    capacity: usize,
    len: usize,
    cursor: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    ret: Vec<f64>,
    s_boot: Vec<f64>,
    discount: Vec<f64>,
}

impl ReplayBuffer {
    pub fn new(state_dim: usize, action_dim: usize, capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            state_dim,
            action_dim,
            capacity,
            len: 0,
            cursor: 0,
            s: Vec::new(),
            a: Vec::new(),
            ret: Vec::new(),
            s_boot: Vec::new(),
            discount: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn push(&mut self, t: &StoredTransition) -> Result<()> {
        if t.s.len() != self.state_dim || t.s_boot.len() != self.state_dim {
            return Err(Error::Shape {
                context: "replay state",
                expected: self.state_dim,
                got: t.s.len(),
            });
        }
        if t.a.len() != self.action_dim {
            return Err(Error::Shape {
                context: "replay action",
                expected: self.action_dim,
                got: t.a.len(),
            });
        }
        let (ns, na) = (self.state_dim, self.action_dim);
        if self.len < self.capacity {
            self.s.extend_from_slice(&t.s);
            self.a.extend_from_slice(&t.a);
            self.ret.push(t.ret);
            self.s_boot.extend_from_slice(&t.s_boot);
            self.discount.push(t.discount);
            self.len += 1;
        } else {
            let i = self.cursor;
            self.s[i * ns..(i + 1) * ns].copy_from_slice(&t.s);
            self.a[i * na..(i + 1) * na].copy_from_slice(&t.a);
            self.ret[i] = t.ret;
            self.s_boot[i * ns..(i + 1) * ns].copy_from_slice(&t.s_boot);
            self.discount[i] = t.discount;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<StoredTransition> {
        if i >= self.len {
            return None;
        }
        let (ns, na) = (self.state_dim, self.action_dim);
        Some(StoredTransition {
            s: self.s[i * ns..(i + 1) * ns].to_vec(),
            a: self.a[i * na..(i + 1) * na].to_vec(),
            ret: self.ret[i],
            s_boot: self.s_boot[i * ns..(i + 1) * ns].to_vec(),
            discount: self.discount[i],
        })
    }

    /// Most recently written entry.
    pub fn last(&self) -> Option<StoredTransition> {
        if self.len == 0 {
            return None;
        }
        self.get((self.cursor + self.capacity - 1) % self.capacity)
    }

    /// Uniform sampling with replacement over the filled region.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Batch> {
        sample_union(&[self], n, rng)
    }

    pub fn iter(&self) -> impl Iterator<Item = StoredTransition> + '_ {
        (0..self.len).filter_map(|i| self.get(i))
    }

    fn write_row(&self, i: usize, row: usize, out: &mut Batch) {
        let (ns, na) = (self.state_dim, self.action_dim);
        out.s.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.s[i * ns..(i + 1) * ns]);
        out.a.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.a[i * na..(i + 1) * na]);
        out.ret[row] = self.ret[i];
        out.s_boot
            .row_mut(row)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&self.s_boot[i * ns..(i + 1) * ns]);
        out.discount[row] = self.discount[i];
    }
}

/// Uniform sampling over the concatenation of several buffers, so each source
/// contributes in proportion to its fill level.
pub fn sample_union(buffers: &[&ReplayBuffer], n: usize, rng: &mut impl Rng) -> Result<Batch> {
    let total: usize = buffers.iter().map(|b| b.len()).sum();
    if total == 0 {
        return Err(Error::Training("cannot sample from empty replay buffers".into()));
    }
    let (ns, na) = (buffers[0].state_dim, buffers[0].action_dim);
    if buffers.iter().any(|b| b.state_dim != ns || b.action_dim != na) {
        return Err(Error::Config("replay buffers in a union must share dimensions".into()));
    }
    let mut out = Batch {
        s: Array2::zeros((n, ns)),
        a: Array2::zeros((n, na)),
        ret: Array1::zeros(n),
        s_boot: Array2::zeros((n, ns)),
        discount: Array1::zeros(n),
    };
    for row in 0..n {
        let mut k = rng.random_range(0..total);
        for b in buffers {
            if k < b.len() {
                b.write_row(k, row, &mut out);
                break;
            }
            k -= b.len();
        }
    }
    Ok(out)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn fifo_keeps_the_newest_entries(capacity in 1usize..20, pushes in 0usize..60) {
            let mut buf = ReplayBuffer::new(1, 1, capacity);
            for i in 0..pushes {
                let x = i as f64;
                buf.push(&StoredTransition { s: vec![x], a: vec![0.0], ret: x, s_boot: vec![x], discount: 1.0 }).unwrap();
            }
            prop_assert_eq!(buf.len(), pushes.min(capacity));
            let mut kept: Vec<f64> = buf.iter().map(|t| t.ret).collect();
            kept.sort_by(f64::total_cmp);
            let want: Vec<f64> = (pushes.saturating_sub(capacity)..pushes).map(|i| i as f64).collect();
            prop_assert_eq!(kept, want);
        }
    }
}
