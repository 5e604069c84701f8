//! Control policies and safety filters as seen by the rollout loops.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::filter::{hyperplane_from_raw, hyperplane_from_u, project_action, Hyperplane, HyperplaneAction};
use crate::rl::{ActionHead, AgentBundle};

/// Deterministic state-to-action map.
pub trait Policy {
    fn act_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

impl Policy for AgentBundle {
    fn act_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        AgentBundle::act_batch(self, states)
    }
}

/// The same action everywhere.
#[derive(Clone, Debug)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn act_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((states.nrows(), self.0.len()), |(_, j)| self.0[j]))
    }
}

/// State-dependent halfspace of admissible actions. `None` lets every
/// action through.
pub trait SafetyFilter {
    fn hyperplanes(&self, states: ArrayView2<'_, f64>) -> Result<Vec<Option<Hyperplane>>>;
}

/// No filtering.
#[derive(Clone, Copy, Debug, Default)]
pub struct PassThrough;

impl SafetyFilter for PassThrough {
    fn hyperplanes(&self, states: ArrayView2<'_, f64>) -> Result<Vec<Option<Hyperplane>>> {
        Ok(vec![None; states.nrows()])
    }
}

/// One hyperplane for every state.
#[derive(Clone, Debug)]
pub struct FixedHyperplane(pub Hyperplane);

impl SafetyFilter for FixedHyperplane {
    fn hyperplanes(&self, states: ArrayView2<'_, f64>) -> Result<Vec<Option<Hyperplane>>> {
        Ok(vec![Some(self.0.clone()); states.nrows()])
    }
}

/// Greedy filter policy `μ`.
#[derive(Clone, Copy, Debug)]
pub struct LearnedFilter<'a>(pub &'a AgentBundle);

/// Hyperplane encoded by one actor output in the given head.
pub fn decode_hyperplane(head: ActionHead, repr: &[f64]) -> Result<Hyperplane> {
    match head {
        ActionHead::Ball => Ok(hyperplane_from_u(&HyperplaneAction::new(repr.to_vec())?)),
        ActionHead::Raw => Ok(hyperplane_from_raw(repr)),
        ActionHead::Box => Err(Error::Config("a box-headed actor does not encode a hyperplane".into())),
    }
}

impl SafetyFilter for LearnedFilter<'_> {
    fn hyperplanes(&self, states: ArrayView2<'_, f64>) -> Result<Vec<Option<Hyperplane>>> {
        let out = self.0.act_batch(states)?;
        out.rows()
            .into_iter()
            .map(|r| decode_hyperplane(self.0.config.head, r.as_slice().unwrap_or(&r.to_vec())).map(Some))
            .collect()
    }
}

/// Project `a` onto the admissible set of `h` (identity without a filter).
pub fn apply_filter(a: &[f64], h: Option<&Hyperplane>) -> Result<Vec<f64>> {
    match h {
        Some(h) => project_action(a, h),
        None => Ok(a.to_vec()),
    }
}

/// `‖a^V − a‖₂`.
pub fn filter_penalty(a: &[f64], a_v: &[f64]) -> f64 {
    a.iter().zip(a_v).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Restrictiveness `‖u‖₂` of a hyperplane action; for raw outputs the
/// equivalent ball norm of the decoded hyperplane.
pub fn restrictiveness(head: ActionHead, repr: &[f64]) -> f64 {
    match head {
        ActionHead::Raw => crate::filter::raw_restrictiveness(repr).0,
        _ => repr.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_arithmetic() {
        assert_eq!(filter_penalty(&[1.0], &[0.25]), 0.75);
        assert_eq!(filter_penalty(&[0.3, 0.4], &[0.3, 0.4]), 0.0);
        assert!((filter_penalty(&[0.0, 0.0], &[0.3, 0.4]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pass_through_and_fixed_filters() {
        let s = Array2::zeros((3, 2));
        assert!(PassThrough.hyperplanes(s.view()).unwrap().iter().all(Option::is_none));
        let h = Hyperplane::new(vec![1.0], 0.0).unwrap();
        let hs = FixedHyperplane(h.clone()).hyperplanes(s.view()).unwrap();
        assert_eq!(hs.len(), 3);
        assert_eq!(apply_filter(&[-0.7], hs[0].as_ref()).unwrap(), vec![0.0]);
        assert_eq!(apply_filter(&[-0.7], None).unwrap(), vec![-0.7]);
    }

    #[test]
    fn ball_and_raw_decoding_agree_on_restrictiveness() {
        let u = [0.3, 0.4];
        let h = decode_hyperplane(ActionHead::Ball, &u).unwrap();
        assert!(h.b.abs() < 1e-12);
        assert!((restrictiveness(ActionHead::Ball, &u) - 0.5).abs() < 1e-15);
        // raw (w̃, b̃) = (0.6, 0.8, 0) decodes to the same hyperplane
        let raw = [0.6, 0.8, 0.0];
        let hr = decode_hyperplane(ActionHead::Raw, &raw).unwrap();
        assert!((hr.w[0] - h.w[0]).abs() < 1e-12 && (hr.b - h.b).abs() < 1e-12);
        assert!((restrictiveness(ActionHead::Raw, &raw) - 0.5).abs() < 1e-12);
        assert!(decode_hyperplane(ActionHead::Box, &u).is_err());
    }
}
