//! Two-stage training curriculum over synthetic streams.
//!
//! Stage 1 adapts the backbone to the streaming sequence format with the
//! LM objective on reactive QA data; the gate head stays untouched. Stage
//! 2 activates the gate head on proactive streams with the weighted timing
//! loss, mixing a fraction of QA samples back in to keep the LM competent.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_full, ModelParams};
use crate::error::{CoreError, Result};
use crate::gate_head::{self, timing_loss};
use crate::graph::{build_sample_graph, LossKind};
use crate::scalar::Scalar;
use crate::stream_sim::{compute_pos_weight, label_timing, StreamSample, TaskKind};
use crate::tensor::Mat;
use crate::unit_builder::build_stream_sequence;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Positive-class weight; None derives N_neg/N_pos from the dataset.
    pub w_pos: Option<f64>,
    /// Per-batch fraction of QA samples mixed into stage 2.
    pub qa_mix_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Save an intermediate checkpoint every N steps (0 = final only).
    pub checkpoint_every: usize,
    /// Keep the modality projections at their current values.
    pub freeze_projections: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            steps: 100,
            batch_size: 4,
            lambda: 0.5,
            w_pos: Some(3.0),
            qa_mix_ratio: 0.2,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every: 0,
            freeze_projections: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CoreError::config("learning_rate must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(CoreError::config("steps and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.qa_mix_ratio) {
            return Err(CoreError::config("qa_mix_ratio must lie in [0, 1]"));
        }
        if self.lambda < 0.0 {
            return Err(CoreError::config("lambda must be non-negative"));
        }
        if let Some(w) = self.w_pos {
            if w < 0.0 {
                return Err(CoreError::config("w_pos must be non-negative"));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_time: Option<f64>,
    pub l_lm: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

/// Adam with decoupled weight decay over the flat parameter-slot list.
struct AdamW<T> {
    m: Vec<Option<Mat<T>>>,
    v: Vec<Option<Mat<T>>>,
    t: usize,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
}

impl<T: Scalar> AdamW<T> {
    fn new(n_slots: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            m: (0..n_slots).map(|_| None).collect(),
            v: (0..n_slots).map(|_| None).collect(),
            t: 0,
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay: T::of(weight_decay),
        }
    }

    fn step(
        &mut self,
        params: Vec<&mut Mat<T>>,
        grads: &[Option<Mat<T>>],
        trainable: &[bool],
    ) {
        self.t += 1;
        let t = self.t as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(p.rows, p.cols));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(p.rows, p.cols));
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (one - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (one - self.beta2) * gj * gj;
                let m_hat = m.data[j] / bc1;
                let v_hat = v.data[j] / bc2;
                p.data[j] = p.data[j]
                    - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.data[j]);
            }
        }
    }
}

fn trainable_mask<T: Scalar>(params: &ModelParams<T>, stage: u8, freeze_proj: bool) -> Vec<bool> {
    params
        .named_params()
        .iter()
        .map(|(name, _)| {
            if stage == 1 && name.starts_with("gate.") {
                return false;
            }
            if freeze_proj && name.starts_with("proj_") {
                return false;
            }
            true
        })
        .collect()
}

fn accumulate_grads<T: Scalar>(
    batch: &mut [Option<Mat<T>>],
    sample: Vec<Option<Mat<T>>>,
    weight: T,
) {
    for (dst, src) in batch.iter_mut().zip(sample) {
        if let Some(g) = src {
            match dst {
                Some(acc) => crate::tensor::axpy(weight, &g.data, &mut acc.data),
                None => {
                    let mut g = g;
                    for v in g.data.iter_mut() {
                        *v *= weight;
                    }
                    *dst = Some(g);
                }
            }
        }
    }
}

fn grad_norm<T: Scalar>(grads: &[Option<Mat<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data.iter())
        .map(|&x| {
            let v = x.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Deterministic epoch-shuffled index stream.
struct IndexCycle {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl IndexCycle {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        IndexCycle { order, cursor: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(CoreError::numerical(format!("loss became {loss} at step {step}")));
    }
    Ok(())
}

/// Stage 1: LM objective only, on reactive QA streams. The gate head is
/// excluded from every update.
pub fn train_stage1<T: Scalar>(
    mut params: ModelParams<T>,
    qa_dataset: &[StreamSample],
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<ModelParams<T>> {
    config.validate()?;
    if qa_dataset.is_empty() {
        return Err(CoreError::data("stage 1 needs a non-empty QA dataset"));
    }
    if qa_dataset.iter().any(|s| s.task != TaskKind::ReactiveQa) {
        return Err(CoreError::data("stage 1 dataset must be reactive QA streams"));
    }
    let n_slots = params.n_param_slots();
    let mask = trainable_mask(&params, 1, config.freeze_projections);
    let mut opt: AdamW<T> = AdamW::new(n_slots, config.learning_rate, config.weight_decay);
    let mut cycle = IndexCycle::new(qa_dataset.len(), config.seed);

    for step in 0..config.steps {
        let mut batch_grads: Vec<Option<Mat<T>>> = (0..n_slots).map(|_| None).collect();
        let mut loss_sum = 0.0f64;
        let weight = T::of(1.0 / config.batch_size as f64);
        for _ in 0..config.batch_size {
            let sample = &qa_dataset[cycle.next()];
            let segments = build_stream_sequence::<T>(sample)?;
            let graph = build_sample_graph(&params, &segments, &LossKind::Lm)?;
            loss_sum += graph.loss_value().as_f64();
            accumulate_grads(&mut batch_grads, graph.backward(), weight);
        }
        let mean_loss = loss_sum / config.batch_size as f64;
        check_finite(mean_loss, step)?;
        let norm = grad_norm(&batch_grads);
        opt.step(params.params_mut(), &batch_grads, &mask);
        let metrics = StepMetrics {
            step,
            l_time: None,
            l_lm: Some(mean_loss),
            total: mean_loss,
            grad_norm: norm,
        };
        on_step(&metrics);
        maybe_checkpoint(&params, 1, config, step, ckpt_dir)?;
    }
    if !params.all_finite() {
        return Err(CoreError::numerical("non-finite parameters after stage 1"));
    }
    Ok(params)
}

/// Stage 2: weighted timing loss on proactive streams, joint with the LM
/// objective on a mixed-in fraction of QA samples.
///
/// `from_stage` is the curriculum tag of the incoming checkpoint; anything
/// before stage 1 is refused.
pub fn train_stage2<T: Scalar>(
    mut params: ModelParams<T>,
    from_stage: u8,
    proactive_dataset: &[StreamSample],
    qa_dataset: &[StreamSample],
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<ModelParams<T>> {
    config.validate()?;
    if from_stage < 1 {
        return Err(CoreError::config(
            "stage 2 requires a stage-1-complete checkpoint",
        ));
    }
    if proactive_dataset.is_empty() {
        return Err(CoreError::data("stage 2 needs a non-empty proactive dataset"));
    }
    let w_pos = match config.w_pos {
        Some(w) => w,
        None => compute_pos_weight(proactive_dataset)?,
    };
    // An all-negative proactive set cannot teach timing.
    if proactive_dataset
        .iter()
        .map(|s| label_timing(s).map(|l| l.positives()))
        .sum::<Result<usize>>()?
        == 0
    {
        return Err(CoreError::data("proactive dataset has no positive labels"));
    }

    let n_qa_per_batch = if qa_dataset.is_empty() || config.lambda == 0.0 {
        0
    } else {
        ((config.qa_mix_ratio * config.batch_size as f64).round() as usize)
            .min(config.batch_size.saturating_sub(1))
    };
    let n_pro_per_batch = config.batch_size - n_qa_per_batch;

    let n_slots = params.n_param_slots();
    let mask = trainable_mask(&params, 2, config.freeze_projections);
    let mut opt: AdamW<T> = AdamW::new(n_slots, config.learning_rate, config.weight_decay);
    let mut pro_cycle = IndexCycle::new(proactive_dataset.len(), config.seed);
    let mut qa_cycle =
        if n_qa_per_batch > 0 { Some(IndexCycle::new(qa_dataset.len(), config.seed ^ 0x9e37)) } else { None };

    for step in 0..config.steps {
        let mut batch_grads: Vec<Option<Mat<T>>> = (0..n_slots).map(|_| None).collect();
        let mut time_sum = 0.0f64;
        let mut lm_sum = 0.0f64;

        let pro_weight = T::of(1.0 / n_pro_per_batch as f64);
        for _ in 0..n_pro_per_batch {
            let sample = &proactive_dataset[pro_cycle.next()];
            let labels = label_timing(sample)?.z;
            let segments = build_stream_sequence::<T>(sample)?;
            let graph =
                build_sample_graph(&params, &segments, &LossKind::Timing { labels, pos_weight: w_pos })?;
            time_sum += graph.loss_value().as_f64();
            accumulate_grads(&mut batch_grads, graph.backward(), pro_weight);
        }

        if let Some(qa_cycle) = qa_cycle.as_mut() {
            let qa_weight = T::of(config.lambda / n_qa_per_batch as f64);
            for _ in 0..n_qa_per_batch {
                let sample = &qa_dataset[qa_cycle.next()];
                let segments = build_stream_sequence::<T>(sample)?;
                let graph = build_sample_graph(&params, &segments, &LossKind::Lm)?;
                lm_sum += graph.loss_value().as_f64();
                accumulate_grads(&mut batch_grads, graph.backward(), qa_weight);
            }
        }

        let l_time = time_sum / n_pro_per_batch as f64;
        let l_lm = (n_qa_per_batch > 0).then(|| lm_sum / n_qa_per_batch as f64);
        let total = gate_head::total_loss(l_time, l_lm, config.lambda);
        check_finite(total, step)?;
        let norm = grad_norm(&batch_grads);
        opt.step(params.params_mut(), &batch_grads, &mask);
        let metrics = StepMetrics { step, l_time: Some(l_time), l_lm, total, grad_norm: norm };
        on_step(&metrics);
        maybe_checkpoint(&params, 2, config, step, ckpt_dir)?;
    }
    if !params.all_finite() {
        return Err(CoreError::numerical("non-finite parameters after stage 2"));
    }
    Ok(params)
}

fn maybe_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    stage: u8,
    config: &TrainConfig,
    step: usize,
    ckpt_dir: Option<&Path>,
) -> Result<()> {
    if config.checkpoint_every == 0 {
        return Ok(());
    }
    if (step + 1) % config.checkpoint_every != 0 {
        return Ok(());
    }
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir)?;
        params.save(&dir.join(format!("stage{stage}-step{:05}.ckpt", step + 1)), stage)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// No-grad evaluation helpers (held-out losses, prediction rates)
// ---------------------------------------------------------------------------

/// Gate probabilities per unit under the training layout (reference
/// responses included).
pub fn gate_probs<T: Scalar>(params: &ModelParams<T>, sample: &StreamSample) -> Result<Vec<f64>> {
    let segments = build_stream_sequence::<T>(sample)?;
    let (out, asm) = forward_full(params, &segments)?;
    asm.unit_eos_rows
        .iter()
        .map(|&r| {
            gate_head::gate_prob_from_hiddens(&out.layer_hiddens, r, &params.gate)
                .map(|p| p.as_f64())
        })
        .collect()
}

/// Mean per-sample timing loss over a dataset, without gradients.
pub fn eval_timing_loss<T: Scalar>(
    params: &ModelParams<T>,
    samples: &[StreamSample],
    w_pos: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::data("empty evaluation set"));
    }
    let mut total = 0.0;
    for sample in samples {
        let probs: Vec<f64> = gate_probs(params, sample)?;
        let labels = label_timing(sample)?.z;
        total += timing_loss(&probs, &labels, w_pos)?;
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of units predicted positive at the probability threshold.
pub fn positive_prediction_rate<T: Scalar>(
    params: &ModelParams<T>,
    samples: &[StreamSample],
    threshold: f64,
) -> Result<f64> {
    let mut positive = 0usize;
    let mut total = 0usize;
    for sample in samples {
        for p in gate_probs(params, sample)? {
            total += 1;
            if p >= threshold {
                positive += 1;
            }
        }
    }
    if total == 0 {
        return Err(CoreError::data("no units in evaluation set"));
    }
    Ok(positive as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::stream_sim::{generate_alert_stream, generate_qa_stream, FeatureDims};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            k_layers: 2,
            d_ff: 32,
            gate_hidden: 16,
            ..Default::default()
        }
    }

    fn small_qa(n: usize) -> Vec<StreamSample> {
        (0..n)
            .map(|i| generate_qa_stream(8, FeatureDims::default(), 100 + i as u64).unwrap())
            .collect()
    }

    fn small_alerts(n: usize) -> Vec<StreamSample> {
        (0..n)
            .map(|i| generate_alert_stream(8, 1, FeatureDims::default(), 200 + i as u64).unwrap())
            .collect()
    }

    fn quick_config(steps: usize) -> TrainConfig {
        TrainConfig { steps, batch_size: 2, learning_rate: 1e-3, ..Default::default() }
    }

    #[test]
    fn stage1_reduces_lm_loss_and_freezes_gate() {
        let params: ModelParams<f64> = ModelParams::init(tiny(), 1).unwrap();
        let gate_before = params.gate.clone();
        let qa = small_qa(6);
        let mut first = None;
        let mut last = None;
        let out = train_stage1(params, &qa, &quick_config(12), None, |m| {
            if first.is_none() {
                first = Some(m.total);
            }
            last = Some(m.total);
        })
        .unwrap();
        assert!(last.unwrap() < first.unwrap(), "{last:?} !< {first:?}");
        assert_eq!(out.gate, gate_before, "gate head must stay untouched in stage 1");
    }

    #[test]
    fn stage1_rejects_empty_or_wrong_task() {
        let params: ModelParams<f64> = ModelParams::init(tiny(), 1).unwrap();
        assert!(train_stage1(params.clone(), &[], &quick_config(1), None, |_| {}).is_err());
        let alerts = small_alerts(2);
        assert!(train_stage1(params, &alerts, &quick_config(1), None, |_| {}).is_err());
    }

    #[test]
    fn identical_seeds_identical_checkpoints() {
        let run = || {
            let params: ModelParams<f64> = ModelParams::init(tiny(), 1).unwrap();
            let qa = small_qa(4);
            let out = train_stage1(params, &qa, &quick_config(4), None, |_| {}).unwrap();
            let mut bytes = Vec::new();
            out.to_container(1).write_to(&mut bytes).unwrap();
            bytes
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage2_requires_stage1_checkpoint() {
        let params: ModelParams<f64> = ModelParams::init(tiny(), 1).unwrap();
        let alerts = small_alerts(2);
        let qa = small_qa(2);
        let err =
            train_stage2(params, 0, &alerts, &qa, &quick_config(1), None, |_| {}).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
    }

    #[test]
    fn stage2_mix_ratio_zero_has_no_lm_term() {
        let params: ModelParams<f64> = ModelParams::init(tiny(), 1).unwrap();
        let alerts = small_alerts(3);
        let qa = small_qa(2);
        let cfg = TrainConfig { qa_mix_ratio: 0.0, ..quick_config(2) };
        let mut saw_lm = false;
        train_stage2(params, 1, &alerts, &qa, &cfg, None, |m| {
            saw_lm |= m.l_lm.is_some();
            assert_eq!(m.total, m.l_time.unwrap());
        })
        .unwrap();
        assert!(!saw_lm);
    }

    #[test]
    fn stage2_rejects_all_negative_proactive_data() {
        let params: ModelParams<f64> = ModelParams::init(tiny(), 1).unwrap();
        let mut alerts = small_alerts(2);
        for a in alerts.iter_mut() {
            a.annotations.event_windows.clear();
        }
        let qa = small_qa(2);
        let err =
            train_stage2(params, 1, &alerts, &qa, &quick_config(1), None, |_| {}).unwrap_err();
        assert!(matches!(err, CoreError::Data(_)));
    }

    #[test]
    fn frozen_projections_stay_fixed() {
        let params: ModelParams<f64> = ModelParams::init(tiny(), 1).unwrap();
        let before_v = params.proj_v.clone();
        let before_a = params.proj_a.clone();
        let qa = small_qa(3);
        let cfg = TrainConfig { freeze_projections: true, ..quick_config(3) };
        let out = train_stage1(params, &qa, &cfg, None, |_| {}).unwrap();
        assert_eq!(out.proj_v, before_v);
        assert_eq!(out.proj_a, before_a);
    }
}
