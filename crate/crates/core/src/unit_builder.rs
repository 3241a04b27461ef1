//! Packs one second of features into the multimodal-unit token layout and
//! assembles full streaming sequences (units plus query/response segments).
//!
//! Unit layout, in order: vision_bos, audio_bos, fused video grid tokens,
//! audio tokens (by 40 ms offset), audio_eos, vision_eos.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::stream_sim::{label_timing, StreamSample, TaskKind};
use crate::vocab::{self, TokenId};

#[derive(Debug, Clone, PartialEq)]
pub enum UnitToken<T> {
    Marker(TokenId),
    /// One cell of the fused frame grid, with its grid coordinates.
    Video { row: usize, col: usize, feat: Vec<T> },
    /// One 40 ms audio vector; `slot` is the offset within the second.
    Audio { slot: usize, feat: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalUnit<T> {
    pub unit_index: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_audio: usize,
    pub tokens: Vec<UnitToken<T>>,
}

impl<T> MultimodalUnit<T> {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

/// Build one unit from 1-2 frames (each a grid of feature cells) and 1-25
/// audio vectors. Frames are averaged element-wise into a single fused grid
/// sharing one temporal position.
pub fn build_unit<T: Scalar>(
    second_index: usize,
    frames: &[Vec<Vec<f64>>],
    grid_h: usize,
    grid_w: usize,
    audio: &[Vec<f64>],
) -> Result<MultimodalUnit<T>> {
    if frames.is_empty() || frames.len() > 2 {
        return Err(CoreError::data(format!(
            "unit {second_index}: expected 1-2 frames, got {}",
            frames.len()
        )));
    }
    if audio.is_empty() || audio.len() > 25 {
        return Err(CoreError::data(format!(
            "unit {second_index}: expected 1-25 audio vectors, got {}",
            audio.len()
        )));
    }
    let cells = grid_h * grid_w;
    let d_v = frames[0].first().map_or(0, |c| c.len());
    for f in frames {
        if f.len() != cells || f.iter().any(|c| c.len() != d_v) || d_v == 0 {
            return Err(CoreError::data(format!(
                "unit {second_index}: mismatched frame grid shapes"
            )));
        }
    }
    let d_a = audio[0].len();
    if d_a == 0 || audio.iter().any(|a| a.len() != d_a) {
        return Err(CoreError::data(format!(
            "unit {second_index}: mismatched audio dimensions"
        )));
    }

    let inv = 1.0 / frames.len() as f64;
    let mut tokens = Vec::with_capacity(4 + cells + audio.len());
    tokens.push(UnitToken::Marker(vocab::VISION_BOS));
    tokens.push(UnitToken::Marker(vocab::AUDIO_BOS));
    for r in 0..grid_h {
        for c in 0..grid_w {
            let idx = r * grid_w + c;
            let mut fused = vec![T::zero(); d_v];
            for f in frames {
                for (out, &x) in fused.iter_mut().zip(&f[idx]) {
                    *out += T::of(x * inv);
                }
            }
            tokens.push(UnitToken::Video { row: r, col: c, feat: fused });
        }
    }
    for (slot, a) in audio.iter().enumerate() {
        tokens.push(UnitToken::Audio {
            slot,
            feat: a.iter().map(|&x| T::of(x)).collect(),
        });
    }
    tokens.push(UnitToken::Marker(vocab::AUDIO_EOS));
    tokens.push(UnitToken::Marker(vocab::VISION_EOS));

    Ok(MultimodalUnit {
        unit_index: second_index,
        grid_h,
        grid_w,
        n_audio: audio.len(),
        tokens,
    })
}

/// Build the unit for second `t` of a sample.
pub fn unit_from_sample<T: Scalar>(sample: &StreamSample, t: usize) -> Result<MultimodalUnit<T>> {
    build_unit(
        t,
        &sample.video_frames[t],
        sample.dims.grid_h,
        sample.dims.grid_w,
        &sample.audio_features[t],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum SequenceSegment<T> {
    Unit(MultimodalUnit<T>),
    /// Query tokens wrapped in query markers; `time_s` is the unit after
    /// which the query was inserted.
    Query { tokens: Vec<TokenId>, time_s: usize },
    /// Reference response wrapped in response/terminal markers.
    Response { tokens: Vec<TokenId>, time_s: usize },
}

impl<T> SequenceSegment<T> {
    pub fn token_count(&self) -> usize {
        match self {
            SequenceSegment::Unit(u) => u.token_count(),
            SequenceSegment::Query { tokens, .. } | SequenceSegment::Response { tokens, .. } => {
                tokens.len()
            }
        }
    }
}

pub fn wrap_query(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(tokens.len() + 2);
    v.push(vocab::QUERY_BOS);
    v.extend_from_slice(tokens);
    v.push(vocab::QUERY_EOS);
    v
}

pub fn wrap_response(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(tokens.len() + 2);
    v.push(vocab::RESPONSE_BOS);
    v.extend_from_slice(tokens);
    v.push(vocab::END_MARK);
    v
}

/// Restructure a sample into the streaming training layout.
///
/// Units appear in temporal order. Reactive QA inserts the query right
/// after the unit covering the query time, followed by the reference
/// response. Proactive tasks insert the reference response after every
/// positive-labeled unit (multi-turn layout).
pub fn build_stream_sequence<T: Scalar>(sample: &StreamSample) -> Result<Vec<SequenceSegment<T>>> {
    sample.validate()?;
    let mut segments: Vec<SequenceSegment<T>> = Vec::new();
    match sample.task {
        TaskKind::ReactiveQa => {
            let q = sample
                .annotations
                .query_time_s
                .ok_or_else(|| CoreError::data("reactive sample missing query time"))?;
            if q >= sample.duration_s {
                return Err(CoreError::data(format!(
                    "query time {q} beyond duration {}",
                    sample.duration_s
                )));
            }
            for t in 0..sample.duration_s {
                segments.push(SequenceSegment::Unit(unit_from_sample(sample, t)?));
                if t == q {
                    segments.push(SequenceSegment::Query {
                        tokens: wrap_query(&sample.annotations.query_tokens),
                        time_s: t,
                    });
                    segments.push(SequenceSegment::Response {
                        tokens: wrap_response(&sample.annotations.answer_tokens),
                        time_s: t,
                    });
                }
            }
        }
        TaskKind::Alert | TaskKind::Narration => {
            let labels = label_timing(sample)?;
            for t in 0..sample.duration_s {
                segments.push(SequenceSegment::Unit(unit_from_sample(sample, t)?));
                if labels.z[t] == 1 {
                    segments.push(SequenceSegment::Response {
                        tokens: wrap_response(&reference_response(sample, t)?),
                        time_s: t,
                    });
                }
            }
        }
    }
    Ok(segments)
}

/// Reference response content for a positive unit of a proactive sample.
pub fn reference_response(sample: &StreamSample, t: usize) -> Result<Vec<TokenId>> {
    match sample.task {
        TaskKind::Alert => Ok(vocab::alert_phrase()),
        TaskKind::Narration => {
            let idx = sample
                .annotations
                .segment_boundaries
                .iter()
                .position(|&b| b == t)
                .ok_or_else(|| {
                    CoreError::data(format!("second {t} is not a segment boundary"))
                })?;
            sample
                .annotations
                .segment_captions
                .get(idx + 1)
                .cloned()
                .ok_or_else(|| CoreError::data(format!("missing caption for segment {}", idx + 1)))
        }
        TaskKind::ReactiveQa => Ok(sample.annotations.answer_tokens.clone()),
    }
}
