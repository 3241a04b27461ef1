//! Response-timing gate: a two-layer MLP, parallel to the LM head, that
//! maps a learned convex mixture of the top-K layer hidden states to a
//! per-unit probability of responding. Also defines the training losses.

use rand_chacha::ChaCha8Rng;

use crate::backbone::LinearParams;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, sigmoid, softmax_in_place, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct GateHeadParams<T> {
    /// Aggregation logits over the last K layers; softmax-normalized into
    /// mixing weights.
    pub alpha: Mat<T>,
    pub w1: LinearParams<T>,
    pub w2: LinearParams<T>,
}

impl<T: Scalar> GateHeadParams<T> {
    pub fn init(rng: &mut ChaCha8Rng, k: usize, d_model: usize, hidden: usize) -> Self {
        GateHeadParams {
            alpha: Mat::zeros(1, k),
            w1: LinearParams::init(rng, d_model, hidden),
            w2: LinearParams::init(rng, hidden, 1),
        }
    }

    pub fn k(&self) -> usize {
        self.alpha.cols
    }

    pub fn mixing_weights(&self) -> Vec<T> {
        let mut w = self.alpha.data.clone();
        softmax_in_place(&mut w);
        w
    }
}

/// Hidden vectors from the last K layers at one readout position.
#[derive(Debug, Clone)]
pub struct LayerStates<T> {
    pub states: Vec<Vec<T>>,
}

impl<T: Scalar> LayerStates<T> {
    /// Readout at `row` from the last K of the per-layer hidden matrices.
    pub fn from_hiddens(layer_hiddens: &[Mat<T>], k: usize, row: usize) -> Self {
        let n = layer_hiddens.len();
        let states = layer_hiddens[n - k..].iter().map(|h| h.row(row).to_vec()).collect();
        LayerStates { states }
    }
}

/// Softmax(alpha)-weighted combination of the K states.
pub fn aggregate_layers<T: Scalar>(states: &LayerStates<T>, alpha: &Mat<T>) -> Result<Vec<T>> {
    if states.states.len() != alpha.cols {
        return Err(CoreError::shape(format!(
            "got {} layer states for {} aggregation weights",
            states.states.len(),
            alpha.cols
        )));
    }
    let mut weights = alpha.data.clone();
    softmax_in_place(&mut weights);
    let d = states.states[0].len();
    let mut out = vec![T::zero(); d];
    for (w, s) in weights.iter().zip(&states.states) {
        tensor::axpy(*w, s, &mut out);
    }
    Ok(out)
}

/// Gate probability: sigmoid of the two-layer MLP over the aggregated
/// state.
pub fn gate_prob<T: Scalar>(aggregated: &[T], params: &GateHeadParams<T>) -> T {
    sigmoid(gate_logit(aggregated, params))
}

pub fn gate_logit<T: Scalar>(aggregated: &[T], params: &GateHeadParams<T>) -> T {
    let x = Mat::from_vec(1, aggregated.len(), aggregated.to_vec());
    let mut h = params.w1.apply(&x);
    for v in h.data.iter_mut() {
        *v = tensor::gelu(*v);
    }
    let out = params.w2.apply(&h);
    out.data[0]
}

/// Convenience: readout -> aggregate -> probability.
pub fn gate_prob_from_hiddens<T: Scalar>(
    layer_hiddens: &[Mat<T>],
    row: usize,
    params: &GateHeadParams<T>,
) -> Result<T> {
    let states = LayerStates::from_hiddens(layer_hiddens, params.k(), row);
    let agg = aggregate_layers(&states, &params.alpha)?;
    Ok(gate_prob(&agg, params))
}

/// Positive-weighted binary cross-entropy over one stream's per-unit
/// probabilities: -(1/T) sum of w·z_t·ln p_t + (1-z_t)·ln(1-p_t).
pub fn timing_loss<T: Scalar>(probs: &[T], labels: &[u8], pos_weight: T) -> Result<T> {
    if probs.len() != labels.len() {
        return Err(CoreError::shape(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(CoreError::data("timing loss over an empty stream"));
    }
    let one = T::one();
    let mut total = T::zero();
    for (&p, &z) in probs.iter().zip(labels) {
        if p <= T::zero() || p >= one {
            return Err(CoreError::numerical(format!("probability {p} outside (0,1)")));
        }
        total += if z == 1 { pos_weight * p.ln() } else { (one - p).ln() };
    }
    Ok(-total / T::of_usize(probs.len()))
}

/// Autoregressive loss over the response tokens: the sum of
/// -ln P(y_i | y_<i, X) over the selected rows.
pub fn lm_loss<T: Scalar>(logits: &Mat<T>, targets: &[usize]) -> Result<T> {
    if targets.is_empty() {
        return Err(CoreError::data("lm loss needs at least one target token"));
    }
    if logits.rows != targets.len() {
        return Err(CoreError::shape(format!(
            "{} logit rows vs {} targets",
            logits.rows,
            targets.len()
        )));
    }
    let mut total = T::zero();
    let mut probs = vec![T::zero(); logits.cols];
    for (r, &t) in targets.iter().enumerate() {
        probs.copy_from_slice(logits.row(r));
        softmax_in_place(&mut probs);
        total -= probs[t].ln();
    }
    Ok(total)
}

/// Joint objective: timing plus lambda-weighted LM term; the LM term is
/// present only when the batch carried QA samples.
pub fn total_loss<T: Scalar>(l_time: T, l_lm: Option<T>, lambda: T) -> T {
    match l_lm {
        Some(lm) => l_time + lambda * lm,
        None => l_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn states(k: usize, d: usize) -> LayerStates<f64> {
        LayerStates {
            states: (0..k)
                .map(|i| (0..d).map(|j| (i * d + j) as f64 * 0.1).collect())
                .collect(),
        }
    }

    #[test]
    fn degenerate_softmax_selects_one_state() {
        let s = states(4, 3);
        let alpha = Mat::from_vec(1, 4, vec![0.0, -1e9, -1e9, -1e9]);
        let out = aggregate_layers(&s, &alpha).unwrap();
        assert_eq!(out, s.states[0]);
    }

    #[test]
    fn uniform_alpha_is_arithmetic_mean() {
        let s = states(4, 3);
        let alpha = Mat::from_vec(1, 4, vec![0.7; 4]);
        let out = aggregate_layers(&s, &alpha).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..4).map(|i| s.states[i][j]).sum::<f64>() / 4.0;
            assert!((out[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_states_ignore_alpha() {
        let s = LayerStates { states: vec![vec![1.0f64, -2.0]; 3] };
        let alpha = Mat::from_vec(1, 3, vec![5.0, -3.0, 0.2]);
        let out = aggregate_layers(&s, &alpha).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-14);
        assert!((out[1] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn aggregation_stays_in_convex_hull() {
        let s = states(4, 3);
        let alpha = Mat::from_vec(1, 4, vec![0.3, -0.9, 2.0, 0.01]);
        let out = aggregate_layers(&s, &alpha).unwrap();
        for j in 0..3 {
            let lo = (0..4).map(|i| s.states[i][j]).fold(f64::INFINITY, f64::min);
            let hi = (0..4).map(|i| s.states[i][j]).fold(f64::NEG_INFINITY, f64::max);
            assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn k_mismatch_errors() {
        let s = states(3, 2);
        let alpha = Mat::from_vec(1, 4, vec![0.0; 4]);
        assert!(aggregate_layers(&s, &alpha).is_err());
    }

    #[test]
    fn zero_gate_head_outputs_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params: GateHeadParams<f64> = GateHeadParams::init(&mut rng, 4, 8, 8);
        params.w1.w.fill(0.0);
        params.w2.w.fill(0.0);
        let p = gate_prob(&vec![0.5; 8], &params);
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn raising_final_bias_raises_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params: GateHeadParams<f64> = GateHeadParams::init(&mut rng, 4, 8, 8);
        let x: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let p0 = gate_prob(&x, &params);
        params.w2.b.data[0] += 1.0;
        let p1 = gate_prob(&x, &params);
        assert!(p1 > p0);
        assert!(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0);
    }

    #[test]
    fn timing_loss_fixtures() {
        // T=1, z=1, p=0.5, w=3 -> 3 ln 2
        let l = timing_loss(&[0.5f64], &[1], 3.0).unwrap();
        assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        // T=2, all negative at 0.5 -> ln 2
        let l = timing_loss(&[0.5f64, 0.5], &[0, 0], 3.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // near-perfect predictions: loss near zero
        let l = timing_loss(&[1.0 - 1e-12, 1e-12f64], &[1, 0], 3.0).unwrap();
        assert!(l < 1e-10);
        // w = 1 equals unweighted BCE
        let p = [0.3f64, 0.8, 0.6];
        let z = [1u8, 0, 1];
        let weighted = timing_loss(&p, &z, 1.0).unwrap();
        let manual: f64 = -(p[0].ln() + (1.0 - p[1]).ln() + p[2].ln()) / 3.0;
        assert!((weighted - manual).abs() < 1e-12);
    }

    #[test]
    fn timing_loss_rejects_bad_inputs() {
        assert!(timing_loss(&[0.5f64], &[1, 0], 3.0).is_err());
        assert!(timing_loss(&[1.0f64], &[1], 3.0).is_err());
        assert!(timing_loss::<f64>(&[], &[], 3.0).is_err());
    }

    #[test]
    fn lm_loss_fixtures() {
        // uniform logits over 64 classes, one target -> ln 64
        let logits = Mat::from_vec(1, 64, vec![0.25f64; 64]);
        let l = lm_loss(&logits, &[17]).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-12);
        // strongly peaked correct logit -> ~0
        let mut peaked = Mat::from_vec(1, 8, vec![0.0f64; 8]);
        peaked.data[3] = 50.0;
        let l = lm_loss(&peaked, &[3]).unwrap();
        assert!(l < 1e-12);
        // empty targets -> error
        assert!(lm_loss::<f64>(&Mat::zeros(0, 8), &[]).is_err());
    }

    #[test]
    fn total_loss_mixing() {
        assert_eq!(total_loss(2.0f64, Some(3.0), 0.0), 2.0);
        assert_eq!(total_loss(2.0f64, Some(3.0), 1.0), 5.0);
        assert_eq!(total_loss(2.0f64, None, 0.7), 2.0);
    }
}
