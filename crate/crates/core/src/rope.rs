//! Time-aligned 3D rotary positions for chunked unit streams.
//!
//! Every token gets a (temporal, height, width) triple on a shared global
//! timeline measured in 40 ms ticks. Within a unit: the two bos markers
//! share the base ID; all fused video tokens share the constant temporal ID
//! base+1 (coinciding with the first audio tick); audio token k gets
//! base+1+k; the eos markers close the unit at max+1. The next unit
//! continues from the maximum ID assigned so far, so the timeline never
//! moves backward across units.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::unit_builder::{MultimodalUnit, UnitToken};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionTriple {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl PositionTriple {
    pub fn temporal(t: usize) -> Self {
        PositionTriple { t, h: 0, w: 0 }
    }

    pub fn max_component(&self) -> usize {
        self.t.max(self.h).max(self.w)
    }
}

/// Per-token triples for one unit (or text segment), plus the base the
/// assignment started from and the continuation point for the next one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionAssignment {
    pub triples: Vec<PositionTriple>,
    pub base_in: usize,
    pub base_out: usize,
}

/// Assign triples to every token of a unit, continuing from `base`.
pub fn assign_positions<T: Scalar>(
    unit: &MultimodalUnit<T>,
    base: usize,
) -> Result<PositionAssignment> {
    let n = unit.tokens.len();
    if n < 5 {
        return Err(CoreError::shape("unit too short for the marker layout"));
    }
    let expect_marker = |idx: usize, id: usize| -> Result<()> {
        match &unit.tokens[idx] {
            UnitToken::Marker(m) if *m == id => Ok(()),
            other => Err(CoreError::shape(format!(
                "unit {}: token {idx} is {other:?}, expected marker {id}",
                unit.unit_index
            ))),
        }
    };
    expect_marker(0, crate::vocab::VISION_BOS)?;
    expect_marker(1, crate::vocab::AUDIO_BOS)?;
    expect_marker(n - 2, crate::vocab::AUDIO_EOS)?;
    expect_marker(n - 1, crate::vocab::VISION_EOS)?;

    let mut triples = Vec::with_capacity(n);
    triples.push(PositionTriple::temporal(base));
    triples.push(PositionTriple::temporal(base));
    let mut max_t = base;
    let mut audio_seen = 0usize;
    for tok in &unit.tokens[2..n - 2] {
        match tok {
            UnitToken::Video { row, col, .. } => {
                if audio_seen > 0 {
                    return Err(CoreError::shape("video token after audio tokens"));
                }
                triples.push(PositionTriple { t: base + 1, h: *row, w: *col });
                max_t = max_t.max(base + 1);
            }
            UnitToken::Audio { slot, .. } => {
                if *slot != audio_seen {
                    return Err(CoreError::shape("audio slots out of order"));
                }
                let t = base + 1 + slot;
                triples.push(PositionTriple::temporal(t));
                max_t = max_t.max(t);
                audio_seen += 1;
            }
            UnitToken::Marker(m) => {
                return Err(CoreError::shape(format!("unexpected interior marker {m}")));
            }
        }
    }
    let eos_t = max_t + 1;
    triples.push(PositionTriple::temporal(eos_t));
    triples.push(PositionTriple::temporal(eos_t));

    let base_out = triples
        .iter()
        .map(PositionTriple::max_component)
        .max()
        .unwrap_or(base);
    Ok(PositionAssignment { triples, base_in: base, base_out })
}

/// Sequential temporal IDs for a text segment (query/response tokens),
/// continuing from `base`.
pub fn assign_text_positions(n_tokens: usize, base: usize) -> PositionAssignment {
    let triples: Vec<PositionTriple> =
        (0..n_tokens).map(|i| PositionTriple::temporal(base + 1 + i)).collect();
    let base_out = if n_tokens == 0 { base } else { base + n_tokens };
    PositionAssignment { triples, base_in: base, base_out }
}

/// How the head's rotary channel pairs split across (temporal, height,
/// width); the three counts sum to head_dim/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopePartition {
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl RopePartition {
    /// Default split, proportional to (2, 1, 1) in favor of temporal
    /// resolution.
    pub fn default_for(head_dim: usize) -> Self {
        let half = head_dim / 2;
        let n_t = half / 2;
        let n_h = (half - n_t) / 2;
        let n_w = half - n_t - n_h;
        RopePartition { n_t, n_h, n_w }
    }

    pub fn total(&self) -> usize {
        self.n_t + self.n_h + self.n_w
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if head_dim % 2 != 0 {
            return Err(CoreError::config(format!("head_dim {head_dim} must be even")));
        }
        if self.total() != head_dim / 2 {
            return Err(CoreError::config(format!(
                "rope partition {:?} must sum to head_dim/2 = {}",
                self, head_dim / 2
            )));
        }
        Ok(())
    }
}

/// Rotary phase angles for one triple: the first n_t slots rotate by the
/// temporal ID, the next n_h by height, the last n_w by width; slot j
/// within its group scales by theta_base^(-2j/head_dim).
pub fn rotary_angles<T: Scalar>(
    triple: &PositionTriple,
    head_dim: usize,
    partition: &RopePartition,
    theta_base: f64,
) -> Result<Vec<T>> {
    partition.validate(head_dim)?;
    let mut angles = Vec::with_capacity(head_dim / 2);
    let group = [
        (partition.n_t, triple.t),
        (partition.n_h, triple.h),
        (partition.n_w, triple.w),
    ];
    for (count, component) in group {
        for j in 0..count {
            let freq = theta_base.powf(-2.0 * j as f64 / head_dim as f64);
            angles.push(T::of(component as f64 * freq));
        }
    }
    Ok(angles)
}

/// Angle rows for a whole assignment, [n_tokens x head_dim/2].
pub fn angles_for<T: Scalar>(
    triples: &[PositionTriple],
    head_dim: usize,
    partition: &RopePartition,
    theta_base: f64,
) -> Result<Mat<T>> {
    let mut m = Mat::zeros(triples.len(), head_dim / 2);
    for (i, tr) in triples.iter().enumerate() {
        let a = rotary_angles::<T>(tr, head_dim, partition, theta_base)?;
        m.row_mut(i).copy_from_slice(&a);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unit_builder::build_unit;

    fn unit(n_frames: usize, n_audio: usize) -> MultimodalUnit<f64> {
        let frames: Vec<Vec<Vec<f64>>> =
            (0..n_frames).map(|_| (0..4).map(|_| vec![0.0; 3]).collect()).collect();
        let audio: Vec<Vec<f64>> = (0..n_audio).map(|_| vec![0.0; 3]).collect();
        build_unit(0, &frames, 2, 2, &audio).unwrap()
    }

    #[test]
    fn first_unit_layout() {
        let u = unit(2, 25);
        let asn = assign_positions(&u, 0).unwrap();
        // markers at t=0
        assert_eq!(asn.triples[0], PositionTriple::temporal(0));
        assert_eq!(asn.triples[1], PositionTriple::temporal(0));
        // video at t=1 with grid coords
        for (i, tr) in asn.triples[2..6].iter().enumerate() {
            assert_eq!(tr.t, 1);
            assert_eq!((tr.h, tr.w), (i / 2, i % 2));
        }
        // audio t = 1..=25
        for (k, tr) in asn.triples[6..31].iter().enumerate() {
            assert_eq!(*tr, PositionTriple::temporal(1 + k));
        }
        // eos markers at 26
        assert_eq!(asn.triples[31], PositionTriple::temporal(26));
        assert_eq!(asn.triples[32], PositionTriple::temporal(26));
        assert_eq!(asn.base_out, 26);
    }

    #[test]
    fn second_unit_continues_from_base() {
        let u = unit(2, 25);
        let asn = assign_positions(&u, 26).unwrap();
        assert_eq!(asn.triples[0].t, 26);
        assert_eq!(asn.triples[2].t, 27);
        assert_eq!(asn.triples[6].t, 27);
        assert_eq!(asn.triples[30].t, 51);
        assert_eq!(asn.triples[32].t, 52);
        assert_eq!(asn.base_out, 52);
    }

    #[test]
    fn trailing_partial_unit() {
        let u = unit(1, 10);
        let asn = assign_positions(&u, 0).unwrap();
        let n = asn.triples.len();
        assert_eq!(asn.triples[6].t, 1);
        assert_eq!(asn.triples[n - 3].t, 10);
        assert_eq!(asn.triples[n - 1].t, 11);
        assert_eq!(asn.base_out, 11);
    }

    #[test]
    fn base_shift_equivariance() {
        let u = unit(2, 17);
        let a = assign_positions(&u, 0).unwrap();
        let b = assign_positions(&u, 13).unwrap();
        for (x, y) in a.triples.iter().zip(&b.triples) {
            assert_eq!(x.t + 13, y.t);
            assert_eq!(x.h, y.h);
            assert_eq!(x.w, y.w);
        }
        assert_eq!(a.base_out + 13, b.base_out);
    }

    #[test]
    fn zero_triple_gives_zero_angles() {
        let p = RopePartition::default_for(8);
        let a: Vec<f64> =
            rotary_angles(&PositionTriple::temporal(0), 8, &p, 10_000.0).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn partition_routes_components() {
        let p = RopePartition { n_t: 2, n_h: 1, n_w: 1 };
        let a: Vec<f64> =
            rotary_angles(&PositionTriple { t: 1, h: 0, w: 0 }, 8, &p, 10_000.0).unwrap();
        assert!(a[0] != 0.0 && a[1] != 0.0);
        assert_eq!(&a[2..], &[0.0, 0.0]);
        // height-only triple hits only the h slot
        let b: Vec<f64> =
            rotary_angles(&PositionTriple { t: 0, h: 2, w: 0 }, 8, &p, 10_000.0).unwrap();
        assert_eq!(b[0], 0.0);
        assert_eq!(b[1], 0.0);
        assert!(b[2] != 0.0);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn partition_mismatch_errors() {
        let p = RopePartition { n_t: 2, n_h: 2, n_w: 2 };
        assert!(rotary_angles::<f64>(&PositionTriple::temporal(1), 8, &p, 10_000.0).is_err());
        assert!(p.validate(7).is_err());
    }

    #[test]
    fn equal_triples_equal_angles() {
        let p = RopePartition::default_for(16);
        let t = PositionTriple { t: 9, h: 1, w: 1 };
        let a: Vec<f64> = rotary_angles(&t, 16, &p, 10_000.0).unwrap();
        let b: Vec<f64> = rotary_angles(&t, 16, &p, 10_000.0).unwrap();
        assert_eq!(a, b);
    }
}
