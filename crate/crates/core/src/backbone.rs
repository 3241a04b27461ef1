//! Small causal transformer over unit streams: parameters, the
//! full-sequence forward, and the incremental cached forward.
//!
//! Blocks are pre-normalization residuals (rms-norm scales only) with a
//! GELU feed-forward; rotary phases come from the time-aligned position
//! triples. Per-layer residual-stream outputs are exposed so the gate head
//! can aggregate the last K layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{CoreError, Result};
use crate::gate_head::GateHeadParams;
use crate::kv_cache::KvCache;
use crate::rope::{self, PositionAssignment, PositionTriple, RopePartition};
use crate::scalar::Scalar;
use crate::tensor::{self, causal_attention, Mat};
use crate::unit_builder::{MultimodalUnit, SequenceSegment, UnitToken};
use crate::vocab::{TokenId, VOCAB_TOTAL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// How many of the top layers feed the gate head.
    pub k_layers: usize,
    pub d_ff: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub vocab: usize,
    pub gate_hidden: usize,
    pub theta_base: f64,
    pub rope_partition: Option<RopePartition>,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            k_layers: 4,
            d_ff: 256,
            d_v: 16,
            d_a: 16,
            vocab: VOCAB_TOTAL,
            gate_hidden: 64,
            theta_base: 10_000.0,
            rope_partition: None,
            rms_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn partition(&self) -> RopePartition {
        self.rope_partition
            .unwrap_or_else(|| RopePartition::default_for(self.head_dim()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(CoreError::config("d_model, n_layers, n_heads must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(CoreError::config(format!(
                "head_dim {} must be even",
                self.head_dim()
            )));
        }
        if self.k_layers == 0 || self.k_layers > self.n_layers {
            return Err(CoreError::config(format!(
                "k_layers {} must satisfy 1 <= k_layers <= n_layers {}",
                self.k_layers, self.n_layers
            )));
        }
        if self.vocab < VOCAB_TOTAL {
            return Err(CoreError::config(format!(
                "vocab {} smaller than the closed vocabulary {}",
                self.vocab, VOCAB_TOTAL
            )));
        }
        self.partition().validate(self.head_dim())
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        // FNV-1a, enough to tag checkpoints with their config.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub w: Mat<T>,
    pub b: Mat<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub(crate) fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        LinearParams { w: randn(rng, d_in, d_out, std), b: Mat::zeros(1, d_out) }
    }

    pub fn apply(&self, x: &Mat<T>) -> Mat<T> {
        tensor::linear(x, &self.w, &self.b.data)
    }
}

fn randn<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::of(x * std)
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_q: LinearParams<T>,
    pub attn_k: LinearParams<T>,
    pub attn_v: LinearParams<T>,
    pub attn_o: LinearParams<T>,
    pub norm1: Mat<T>,
    pub norm2: Mat<T>,
    pub ff1: LinearParams<T>,
    pub ff2: LinearParams<T>,
}

/// All learnable parameters of the model, gate head included (trained
/// jointly, frozen in stage 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embed: Mat<T>,
    pub proj_v: LinearParams<T>,
    pub proj_a: LinearParams<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Mat<T>,
    pub lm_head: LinearParams<T>,
    pub gate: GateHeadParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embed = randn(&mut rng, config.vocab, d, 0.5);
        let proj_v = LinearParams::init(&mut rng, config.d_v, d);
        let proj_a = LinearParams::init(&mut rng, config.d_a, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_q: LinearParams::init(&mut rng, d, d),
                attn_k: LinearParams::init(&mut rng, d, d),
                attn_v: LinearParams::init(&mut rng, d, d),
                attn_o: LinearParams::init(&mut rng, d, d),
                norm1: ones(d),
                norm2: ones(d),
                ff1: LinearParams::init(&mut rng, d, config.d_ff),
                ff2: LinearParams::init(&mut rng, config.d_ff, d),
            })
            .collect();
        let final_norm = ones(d);
        let lm_head = LinearParams::init(&mut rng, d, config.vocab);
        let gate = GateHeadParams::init(&mut rng, config.k_layers, d, config.gate_hidden);
        Ok(ModelParams {
            config,
            embed,
            proj_v,
            proj_a,
            layers,
            final_norm,
            lm_head,
            gate,
        })
    }

    /// Fixed parameter enumeration order shared by the trainer, the tape
    /// builder and checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Mat<T>)> {
        let mut out: Vec<(String, &Mat<T>)> = vec![
            ("embed".into(), &self.embed),
            ("proj_v.w".into(), &self.proj_v.w),
            ("proj_v.b".into(), &self.proj_v.b),
            ("proj_a.w".into(), &self.proj_a.w),
            ("proj_a.b".into(), &self.proj_a.b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_q.w"), &layer.attn_q.w));
            out.push((format!("layers.{l}.attn_q.b"), &layer.attn_q.b));
            out.push((format!("layers.{l}.attn_k.w"), &layer.attn_k.w));
            out.push((format!("layers.{l}.attn_k.b"), &layer.attn_k.b));
            out.push((format!("layers.{l}.attn_v.w"), &layer.attn_v.w));
            out.push((format!("layers.{l}.attn_v.b"), &layer.attn_v.b));
            out.push((format!("layers.{l}.attn_o.w"), &layer.attn_o.w));
            out.push((format!("layers.{l}.attn_o.b"), &layer.attn_o.b));
            out.push((format!("layers.{l}.norm1"), &layer.norm1));
            out.push((format!("layers.{l}.norm2"), &layer.norm2));
            out.push((format!("layers.{l}.ff1.w"), &layer.ff1.w));
            out.push((format!("layers.{l}.ff1.b"), &layer.ff1.b));
            out.push((format!("layers.{l}.ff2.w"), &layer.ff2.w));
            out.push((format!("layers.{l}.ff2.b"), &layer.ff2.b));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head.w".into(), &self.lm_head.w));
        out.push(("lm_head.b".into(), &self.lm_head.b));
        out.push(("gate.alpha".into(), &self.gate.alpha));
        out.push(("gate.w1.w".into(), &self.gate.w1.w));
        out.push(("gate.w1.b".into(), &self.gate.w1.b));
        out.push(("gate.w2.w".into(), &self.gate.w2.w));
        out.push(("gate.w2.b".into(), &self.gate.w2.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut out: Vec<&mut Mat<T>> = vec![
            &mut self.embed,
            &mut self.proj_v.w,
            &mut self.proj_v.b,
            &mut self.proj_a.w,
            &mut self.proj_a.b,
        ];
        for layer in self.layers.iter_mut() {
            out.push(&mut layer.attn_q.w);
            out.push(&mut layer.attn_q.b);
            out.push(&mut layer.attn_k.w);
            out.push(&mut layer.attn_k.b);
            out.push(&mut layer.attn_v.w);
            out.push(&mut layer.attn_v.b);
            out.push(&mut layer.attn_o.w);
            out.push(&mut layer.attn_o.b);
            out.push(&mut layer.norm1);
            out.push(&mut layer.norm2);
            out.push(&mut layer.ff1.w);
            out.push(&mut layer.ff1.b);
            out.push(&mut layer.ff2.w);
            out.push(&mut layer.ff2.b);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head.w);
        out.push(&mut self.lm_head.b);
        out.push(&mut self.gate.alpha);
        out.push(&mut self.gate.w1.w);
        out.push(&mut self.gate.w1.b);
        out.push(&mut self.gate.w2.w);
        out.push(&mut self.gate.w2.b);
        out
    }

    pub fn n_param_slots(&self) -> usize {
        5 + 14 * self.layers.len() + 8
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, m)| m.is_finite())
    }

    pub fn to_container(&self, stage: u8) -> Container {
        let meta = serde_json::json!({
            "kind": "model",
            "stage": stage,
            "config": self.config,
            "config_hash": self.config.hash(),
        });
        let mut c = Container::new(T::DTYPE, meta);
        for (name, m) in self.named_params() {
            c.push(&name, m);
        }
        c
    }

    /// Load parameters plus the curriculum stage recorded in the container.
    pub fn from_container(c: &Container) -> Result<(Self, u8)> {
        let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| CoreError::data(format!("checkpoint missing model config: {e}")))?;
        let stage = c.meta["stage"].as_u64().unwrap_or(0) as u8;
        let mut params = ModelParams::init(config, 0)?;
        let expected: Vec<String> =
            params.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, dst) in expected.iter().zip(params.params_mut()) {
            let src = c.require(name)?;
            if (src.rows, src.cols) != (dst.rows, dst.cols) {
                return Err(CoreError::shape(format!(
                    "checkpoint tensor '{name}' is {}x{}, expected {}x{}",
                    src.rows, src.cols, dst.rows, dst.cols
                )));
            }
            *dst = src.cast();
        }
        Ok((params, stage))
    }

    pub fn save(&self, path: &std::path::Path, stage: u8) -> Result<()> {
        self.to_container(stage).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, u8)> {
        let c = Container::load(path)?;
        Self::from_container(&c)
    }
}

fn ones<T: Scalar>(d: usize) -> Mat<T> {
    Mat::from_vec(1, d, vec![T::one(); d])
}

// ---------------------------------------------------------------------------
// Sequence assembly
// ---------------------------------------------------------------------------

/// Token-level view of a segment sequence: global positions, per-unit
/// gate-readout rows (at each unit's closing marker), and language-model
/// target rows (response tokens predicted from their preceding position).
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    pub triples: Vec<PositionTriple>,
    /// Sequence row of vision_eos for each unit, in unit order.
    pub unit_eos_rows: Vec<usize>,
    pub unit_indices: Vec<usize>,
    /// (row predicting the target, target token).
    pub lm_rows: Vec<usize>,
    pub lm_targets: Vec<TokenId>,
    pub len: usize,
}

pub fn assemble_sequence<T: Scalar>(segments: &[SequenceSegment<T>]) -> Result<AssembledSequence> {
    let mut triples = Vec::new();
    let mut unit_eos_rows = Vec::new();
    let mut unit_indices = Vec::new();
    let mut lm_rows = Vec::new();
    let mut lm_targets = Vec::new();
    let mut base = 0usize;
    let mut row = 0usize;
    for seg in segments {
        match seg {
            SequenceSegment::Unit(unit) => {
                let asn = rope::assign_positions(unit, base)?;
                base = asn.base_out;
                let n = asn.triples.len();
                triples.extend(asn.triples);
                unit_eos_rows.push(row + n - 1);
                unit_indices.push(unit.unit_index);
                row += n;
            }
            SequenceSegment::Query { tokens, .. } => {
                let asn = rope::assign_text_positions(tokens.len(), base);
                base = asn.base_out;
                triples.extend(asn.triples);
                row += tokens.len();
            }
            SequenceSegment::Response { tokens, .. } => {
                let asn = rope::assign_text_positions(tokens.len(), base);
                base = asn.base_out;
                triples.extend(asn.triples);
                // Every token after the opening marker is a target,
                // predicted from the preceding position.
                for (i, &tok) in tokens.iter().enumerate().skip(1) {
                    lm_rows.push(row + i - 1);
                    lm_targets.push(tok);
                }
                row += tokens.len();
            }
        }
    }
    Ok(AssembledSequence { triples, unit_eos_rows, unit_indices, lm_rows, lm_targets, len: row })
}

// ---------------------------------------------------------------------------
// Embedding (no-grad path)
// ---------------------------------------------------------------------------

pub fn embed_tokens<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId]) -> Result<Mat<T>> {
    let d = params.config.d_model;
    let mut out = Mat::zeros(tokens.len(), d);
    for (i, &tok) in tokens.iter().enumerate() {
        if tok >= params.config.vocab {
            return Err(CoreError::data(format!("unknown token id {tok}")));
        }
        out.row_mut(i).copy_from_slice(params.embed.row(tok));
    }
    Ok(out)
}

/// Markers through the embedding table, features through the modality
/// projections, order preserved.
pub fn embed_unit<T: Scalar>(params: &ModelParams<T>, unit: &MultimodalUnit<T>) -> Result<Mat<T>> {
    let d = params.config.d_model;
    let mut out = Mat::zeros(unit.tokens.len(), d);
    for (i, tok) in unit.tokens.iter().enumerate() {
        match tok {
            UnitToken::Marker(m) => {
                if *m >= params.config.vocab {
                    return Err(CoreError::data(format!("unknown marker id {m}")));
                }
                out.row_mut(i).copy_from_slice(params.embed.row(*m));
            }
            UnitToken::Video { feat, .. } => {
                if feat.len() != params.config.d_v {
                    return Err(CoreError::shape(format!(
                        "video feature dim {} != d_v {}",
                        feat.len(),
                        params.config.d_v
                    )));
                }
                project_into(&params.proj_v, feat, out.row_mut(i));
            }
            UnitToken::Audio { feat, .. } => {
                if feat.len() != params.config.d_a {
                    return Err(CoreError::shape(format!(
                        "audio feature dim {} != d_a {}",
                        feat.len(),
                        params.config.d_a
                    )));
                }
                project_into(&params.proj_a, feat, out.row_mut(i));
            }
        }
    }
    Ok(out)
}

fn project_into<T: Scalar>(lin: &LinearParams<T>, feat: &[T], out: &mut [T]) {
    out.copy_from_slice(&lin.b.data);
    for (j, &f) in feat.iter().enumerate() {
        tensor::axpy(f, lin.w.row(j), out);
    }
}

pub fn embed_segments<T: Scalar>(
    params: &ModelParams<T>,
    segments: &[SequenceSegment<T>],
) -> Result<Mat<T>> {
    let mut parts: Vec<Mat<T>> = Vec::with_capacity(segments.len());
    for seg in segments {
        match seg {
            SequenceSegment::Unit(u) => parts.push(embed_unit(params, u)?),
            SequenceSegment::Query { tokens, .. } | SequenceSegment::Response { tokens, .. } => {
                parts.push(embed_tokens(params, tokens)?)
            }
        }
    }
    let d = params.config.d_model;
    let rows = parts.iter().map(|p| p.rows).sum();
    let mut out = Mat::zeros(rows, d);
    let mut cursor = 0usize;
    for p in parts {
        out.data[cursor * d..(cursor + p.rows) * d].copy_from_slice(&p.data);
        cursor += p.rows;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Forward passes (no-grad)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Residual-stream output of every layer for the processed tokens.
    pub layer_hiddens: Vec<Mat<T>>,
    /// LM logits for every processed token.
    pub logits: Mat<T>,
}

/// Single-pass causal attention over a whole assembled sequence.
pub fn forward_full<T: Scalar>(
    params: &ModelParams<T>,
    segments: &[SequenceSegment<T>],
) -> Result<(ForwardOutput<T>, AssembledSequence)> {
    let assembled = assemble_sequence(segments)?;
    let mut x = embed_segments(params, segments)?;
    let cfg = &params.config;
    let angles = rope::angles_for::<T>(
        &assembled.triples,
        cfg.head_dim(),
        &cfg.partition(),
        cfg.theta_base,
    )?;
    let eps = T::of(cfg.rms_eps);
    let mut layer_hiddens = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let normed = rms_norm_mat(&x, &layer.norm1, eps);
        let mut q = layer.attn_q.apply(&normed);
        let mut k = layer.attn_k.apply(&normed);
        let v = layer.attn_v.apply(&normed);
        tensor::rotate_rows(&mut q, &angles, cfg.n_heads);
        tensor::rotate_rows(&mut k, &angles, cfg.n_heads);
        let attn = causal_attention(&q, &k, &v, cfg.n_heads, 0);
        let attn_out = layer.attn_o.apply(&attn);
        add_in_place(&mut x, &attn_out);
        let normed2 = rms_norm_mat(&x, &layer.norm2, eps);
        let mut hidden = layer.ff1.apply(&normed2);
        for vv in hidden.data.iter_mut() {
            *vv = tensor::gelu(*vv);
        }
        let ff_out = layer.ff2.apply(&hidden);
        add_in_place(&mut x, &ff_out);
        layer_hiddens.push(x.clone());
    }
    let final_normed = rms_norm_mat(&x, &params.final_norm, eps);
    let logits = params.lm_head.apply(&final_normed);
    Ok((ForwardOutput { layer_hiddens, logits }, assembled))
}

fn rms_norm_mat<T: Scalar>(x: &Mat<T>, scale: &Mat<T>, eps: T) -> Mat<T> {
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        tensor::rms_norm_row(x.row(i), &scale.data, eps, out.row_mut(i));
    }
    out
}

fn add_in_place<T: Scalar>(x: &mut Mat<T>, y: &Mat<T>) {
    tensor::axpy(T::one(), &y.data, &mut x.data);
}

/// Encode one block of already-embedded tokens against the persistent
/// cache; the cache is extended in place.
pub fn forward_step<T: Scalar>(
    params: &ModelParams<T>,
    embedded: &Mat<T>,
    triples: &[PositionTriple],
    cache: &mut KvCache<T>,
) -> Result<ForwardOutput<T>> {
    if embedded.rows != triples.len() {
        return Err(CoreError::shape("one position triple per embedded token"));
    }
    cache.check_positions(triples)?;
    let cfg = &params.config;
    let angles =
        rope::angles_for::<T>(triples, cfg.head_dim(), &cfg.partition(), cfg.theta_base)?;
    let eps = T::of(cfg.rms_eps);
    let key_offset = cache.len();
    let mut x = embedded.clone();
    let mut layer_hiddens = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let normed = rms_norm_mat(&x, &layer.norm1, eps);
        let mut q = layer.attn_q.apply(&normed);
        let mut k = layer.attn_k.apply(&normed);
        let v = layer.attn_v.apply(&normed);
        tensor::rotate_rows(&mut q, &angles, cfg.n_heads);
        tensor::rotate_rows(&mut k, &angles, cfg.n_heads);
        cache.append_layer(l, &k, &v);
        let attn =
            causal_attention(&q, &cache.keys[l], &cache.values[l], cfg.n_heads, key_offset);
        let attn_out = layer.attn_o.apply(&attn);
        add_in_place(&mut x, &attn_out);
        let normed2 = rms_norm_mat(&x, &layer.norm2, eps);
        let mut hidden = layer.ff1.apply(&normed2);
        for vv in hidden.data.iter_mut() {
            *vv = tensor::gelu(*vv);
        }
        let ff_out = layer.ff2.apply(&hidden);
        add_in_place(&mut x, &ff_out);
        layer_hiddens.push(x.clone());
    }
    cache.append_positions(triples);
    cache.assert_consistent();
    let final_normed = rms_norm_mat(&x, &params.final_norm, eps);
    let logits = params.lm_head.apply(&final_normed);
    Ok(ForwardOutput { layer_hiddens, logits })
}

/// A single-threaded streaming session: persistent cache plus the position
/// cursor. Each call encodes only the newly fed tokens.
pub struct StreamSession<'a, T> {
    pub params: &'a ModelParams<T>,
    pub cache: KvCache<T>,
    base: usize,
}

impl<'a, T: Scalar> StreamSession<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        let cache = KvCache::new(params.config.n_layers, params.config.d_model);
        StreamSession { params, cache, base: 0 }
    }

    /// Resume from a serialized cache; `base` continues from the cached
    /// maximum position.
    pub fn resume(params: &'a ModelParams<T>, cache: KvCache<T>) -> Self {
        let base = cache.max_position().unwrap_or(0);
        StreamSession { params, cache, base }
    }

    pub fn position_base(&self) -> usize {
        self.base
    }

    pub fn feed_unit(&mut self, unit: &MultimodalUnit<T>) -> Result<ForwardOutput<T>> {
        let asn: PositionAssignment = rope::assign_positions(unit, self.base)?;
        let embedded = embed_unit(self.params, unit)?;
        let out = forward_step(self.params, &embedded, &asn.triples, &mut self.cache)?;
        self.base = asn.base_out;
        Ok(out)
    }

    pub fn feed_tokens(&mut self, tokens: &[TokenId]) -> Result<ForwardOutput<T>> {
        let asn = rope::assign_text_positions(tokens.len(), self.base);
        let embedded = embed_tokens(self.params, tokens)?;
        let out = forward_step(self.params, &embedded, &asn.triples, &mut self.cache)?;
        self.base = asn.base_out;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_sim::{generate_alert_stream, generate_qa_stream, FeatureDims};
    use crate::unit_builder::{build_stream_sequence, unit_from_sample};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            k_layers: 2,
            d_ff: 32,
            d_v: 16,
            d_a: 16,
            gate_hidden: 16,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut c = tiny_config();
        c.k_layers = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn embed_unit_shapes_and_zero_features() {
        let params: ModelParams<f64> = ModelParams::init(tiny_config(), 1).unwrap();
        let s = generate_alert_stream(6, 1, FeatureDims::default(), 2).unwrap();
        let unit = unit_from_sample::<f64>(&s, 0).unwrap();
        let e = embed_unit(&params, &unit).unwrap();
        assert_eq!(e.rows, 33);
        assert_eq!(e.cols, 16);

        // zero feature vectors map to exactly the projection bias
        let mut zeroed = unit.clone();
        for tok in zeroed.tokens.iter_mut() {
            if let UnitToken::Audio { feat, .. } = tok {
                feat.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let ez = embed_unit(&params, &zeroed).unwrap();
        // first audio token is row 6 (2 markers + 4 video cells)
        assert_eq!(ez.row(6), &params.proj_a.b.data[..]);
    }

    #[test]
    fn unknown_marker_errors() {
        let params: ModelParams<f64> = ModelParams::init(tiny_config(), 1).unwrap();
        let s = generate_alert_stream(6, 1, FeatureDims::default(), 2).unwrap();
        let mut unit = unit_from_sample::<f64>(&s, 0).unwrap();
        unit.tokens[0] = UnitToken::Marker(10_000);
        assert!(embed_unit(&params, &unit).is_err());
    }

    #[test]
    fn streaming_matches_full_forward() {
        let params: ModelParams<f64> = ModelParams::init(tiny_config(), 3).unwrap();
        let s = generate_alert_stream(5, 1, FeatureDims::default(), 4).unwrap();
        let segments = build_stream_sequence::<f64>(&s).unwrap();
        let (full, _) = forward_full(&params, &segments).unwrap();

        let mut session = StreamSession::new(&params);
        let mut streamed_logits: Vec<f64> = Vec::new();
        for seg in &segments {
            let out = match seg {
                SequenceSegment::Unit(u) => session.feed_unit(u).unwrap(),
                SequenceSegment::Query { tokens, .. }
                | SequenceSegment::Response { tokens, .. } => {
                    session.feed_tokens(tokens).unwrap()
                }
            };
            streamed_logits.extend_from_slice(&out.logits.data);
        }
        assert_eq!(streamed_logits.len(), full.logits.data.len());
        let max_diff = streamed_logits
            .iter()
            .zip(&full.logits.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-10, "streaming vs full drifted by {max_diff}");
    }

    #[test]
    fn cache_length_is_sum_of_token_counts() {
        let params: ModelParams<f64> = ModelParams::init(tiny_config(), 3).unwrap();
        let s = generate_alert_stream(4, 1, FeatureDims::default(), 9).unwrap();
        let mut session = StreamSession::new(&params);
        let mut expected = 0usize;
        for t in 0..s.duration_s {
            let unit = unit_from_sample::<f64>(&s, t).unwrap();
            expected += unit.token_count();
            session.feed_unit(&unit).unwrap();
            assert_eq!(session.cache.len(), expected);
        }
    }

    #[test]
    fn causality_prefix_is_bit_identical_under_suffix_perturbation() {
        let params: ModelParams<f64> = ModelParams::init(tiny_config(), 5).unwrap();
        let a = generate_qa_stream(8, FeatureDims::default(), 11).unwrap();
        let mut b = a.clone();
        // perturb the last second's features
        for v in b.audio_features[7].iter_mut() {
            v.iter_mut().for_each(|x| *x += 10.0);
        }
        let seg_a = build_stream_sequence::<f64>(&a).unwrap();
        let seg_b = build_stream_sequence::<f64>(&b).unwrap();
        let (out_a, asm) = forward_full(&params, &seg_a).unwrap();
        let (out_b, _) = forward_full(&params, &seg_b).unwrap();
        // all rows before the final unit's first token must match exactly
        let last_unit_first_row = asm.unit_eos_rows[6] + 1;
        for l in 0..params.config.n_layers {
            let (ha, hb) = (&out_a.layer_hiddens[l], &out_b.layer_hiddens[l]);
            for r in 0..last_unit_first_row {
                assert_eq!(ha.row(r), hb.row(r), "layer {l} row {r} changed");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let params: ModelParams<f32> = ModelParams::init(tiny_config(), 8).unwrap();
        let c = params.to_container(1);
        let (back, stage) = ModelParams::<f32>::from_container(&c).unwrap();
        assert_eq!(stage, 1);
        assert_eq!(back, params);
    }

    #[test]
    fn position_regression_rejected() {
        let params: ModelParams<f64> = ModelParams::init(tiny_config(), 3).unwrap();
        let s = generate_alert_stream(4, 1, FeatureDims::default(), 9).unwrap();
        let unit = unit_from_sample::<f64>(&s, 0).unwrap();
        let mut session = StreamSession::new(&params);
        session.feed_unit(&unit).unwrap();
        // re-feeding the same unit at base 0 moves the timeline backward
        let asn = rope::assign_positions(&unit, 0).unwrap();
        let embedded = embed_unit(&params, &unit).unwrap();
        let err = forward_step(&params, &embedded, &asn.triples, &mut session.cache);
        assert!(err.is_err());
    }
}
