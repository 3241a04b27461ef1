//! Persistent per-layer key/value cache for streaming sessions.
//!
//! Strictly append-only within a session: each step encodes only the
//! newest unit and extends the cache. Keys are stored already rotated, so
//! later steps never revisit earlier positions.

use crate::checkpoint::Container;
use crate::error::{CoreError, Result};
use crate::rope::PositionTriple;
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Debug, Clone)]
pub struct KvCache<T> {
    /// Per layer: rotated keys and values, [len x d_model].
    pub keys: Vec<Mat<T>>,
    pub values: Vec<Mat<T>>,
    /// Position triples of every cached token, shared across layers.
    pub positions: Vec<PositionTriple>,
    d_model: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        KvCache {
            keys: (0..n_layers).map(|_| Mat::zeros(0, d_model)).collect(),
            values: (0..n_layers).map(|_| Mat::zeros(0, d_model)).collect(),
            positions: Vec::new(),
            d_model,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Largest temporal component cached so far.
    pub fn max_position(&self) -> Option<usize> {
        self.positions.iter().map(PositionTriple::max_component).max()
    }

    /// Reject tokens whose positions move the timeline backward. A new
    /// unit's bos base may equal the cached maximum (the continuation
    /// rule); anything earlier is a regression.
    pub fn check_positions(&self, incoming: &[PositionTriple]) -> Result<()> {
        if let (Some(max), Some(first)) = (self.max_position(), incoming.first()) {
            if first.t < max {
                return Err(CoreError::data(format!(
                    "position regression: incoming t={} behind cached max {}",
                    first.t, max
                )));
            }
        }
        Ok(())
    }

    pub fn append_layer(&mut self, layer: usize, k: &Mat<T>, v: &Mat<T>) {
        debug_assert_eq!(k.cols, self.d_model);
        debug_assert_eq!(v.cols, self.d_model);
        debug_assert_eq!(k.rows, v.rows);
        let dst_k = &mut self.keys[layer];
        dst_k.data.extend_from_slice(&k.data);
        dst_k.rows += k.rows;
        let dst_v = &mut self.values[layer];
        dst_v.data.extend_from_slice(&v.data);
        dst_v.rows += v.rows;
    }

    pub fn append_positions(&mut self, triples: &[PositionTriple]) {
        self.positions.extend_from_slice(triples);
    }

    /// Lengths must stay equal across layers after every step.
    pub fn assert_consistent(&self) {
        let len = self.len();
        debug_assert!(self.keys.iter().all(|k| k.rows == len));
        debug_assert!(self.values.iter().all(|v| v.rows == len));
    }

    /// Serialize for session resume.
    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "kind": "kv_cache",
            "n_layers": self.n_layers(),
            "d_model": self.d_model,
            "len": self.len(),
        });
        let mut c = Container::new(T::DTYPE, meta);
        for (l, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            c.push(&format!("k{l}"), k);
            c.push(&format!("v{l}"), v);
        }
        let mut pos = Mat::<f64>::zeros(self.len(), 3);
        for (i, p) in self.positions.iter().enumerate() {
            pos.set(i, 0, p.t as f64);
            pos.set(i, 1, p.h as f64);
            pos.set(i, 2, p.w as f64);
        }
        c.push("positions", &pos);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.dtype != T::DTYPE {
            return Err(CoreError::data(format!(
                "cache dtype {} does not match run precision {}",
                c.dtype,
                T::DTYPE
            )));
        }
        let n_layers = c.meta["n_layers"]
            .as_u64()
            .ok_or_else(|| CoreError::data("cache container missing n_layers"))?
            as usize;
        let d_model = c.meta["d_model"]
            .as_u64()
            .ok_or_else(|| CoreError::data("cache container missing d_model"))?
            as usize;
        let mut cache = KvCache::new(n_layers, d_model);
        for l in 0..n_layers {
            cache.keys[l] = c.require(&format!("k{l}"))?.cast();
            cache.values[l] = c.require(&format!("v{l}"))?.cast();
        }
        let pos = c.require("positions")?;
        cache.positions = (0..pos.rows)
            .map(|i| PositionTriple {
                t: pos.get(i, 0) as usize,
                h: pos.get(i, 1) as usize,
                w: pos.get(i, 2) as usize,
            })
            .collect();
        cache.assert_consistent();
        Ok(cache)
    }
}
