//! Dense row-major matrices and the numeric kernels shared by the
//! no-grad inference engine and the recorded training graph.
//!
//! Keeping a single set of kernels means the streaming path, the
//! full-sequence path and the differentiable path cannot drift apart
//! numerically except through their own assembly logic.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert element type; exact for f32 -> f64.
    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// c = a · b, with a [m×k], b [k×n].
pub fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut c = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (p, &av) in a_row.iter().enumerate() {
            axpy(av, b.row(p), c_row);
        }
    }
    c
}

/// c += a · bᵀ, with a [m×k], b [n×k]; result [m×n].
pub fn matmul_nt_acc<T: Scalar>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for j in 0..b.rows {
            c_row[j] += dot(a_row, b.row(j));
        }
    }
}

/// c += aᵀ · b, with a [k×m], b [k×n]; result [m×n].
pub fn matmul_tn_acc<T: Scalar>(a: &Mat<T>, b: &Mat<T>, c: &mut Mat<T>) {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dims");
    assert_eq!(c.rows, a.cols);
    assert_eq!(c.cols, b.cols);
    for p in 0..a.rows {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &av) in a_row.iter().enumerate() {
            axpy(av, b_row, c.row_mut(i));
        }
    }
}

/// y = x · w + bias broadcast over rows; w [in×out], bias len out.
pub fn linear<T: Scalar>(x: &Mat<T>, w: &Mat<T>, bias: &[T]) -> Mat<T> {
    let mut y = matmul(x, w);
    assert_eq!(bias.len(), w.cols);
    for i in 0..y.rows {
        let row = y.row_mut(i);
        for j in 0..bias.len() {
            row[j] += bias[j];
        }
    }
    y
}

// GELU, tanh approximation. The backward in the tape mirrors this form
// exactly so finite differences validate the pair.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::of(0.044_715);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let three = T::of(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let dinner = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * sech2 * dinner
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// log(1 + exp(x)), overflow-safe.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Root-mean-square normalization of one row: y = x * scale / rms(x).
pub fn rms_norm_row<T: Scalar>(x: &[T], scale: &[T], eps: T, out: &mut [T]) {
    let d = x.len();
    let mut ms = T::zero();
    for &v in x {
        ms += v * v;
    }
    ms = ms / T::of_usize(d);
    let inv = (ms + eps).sqrt().recip();
    for j in 0..d {
        out[j] = x[j] * inv * scale[j];
    }
}

/// In-place softmax with max subtraction.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut m = T::neg_infinity();
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Rotate row pairs within each head block by the per-position angles.
///
/// `x` is [n × d] with `n_heads` head blocks of `head_dim = d / n_heads`;
/// `angles` is [n × head_dim/2] and is shared across heads. Pair
/// (2s, 2s+1) inside a head block rotates by angles[row][s].
pub fn rotate_rows<T: Scalar>(x: &mut Mat<T>, angles: &Mat<T>, n_heads: usize) {
    let d = x.cols;
    assert_eq!(d % n_heads, 0);
    let head_dim = d / n_heads;
    assert_eq!(head_dim % 2, 0, "head_dim must be even");
    assert_eq!(angles.cols, head_dim / 2, "angle width != head_dim/2");
    assert_eq!(angles.rows, x.rows);
    for i in 0..x.rows {
        let ang = angles.row(i);
        let row = x.row_mut(i);
        for h in 0..n_heads {
            let base = h * head_dim;
            for s in 0..head_dim / 2 {
                let (sin, cos) = ang[s].sin_cos();
                let a = row[base + 2 * s];
                let b = row[base + 2 * s + 1];
                row[base + 2 * s] = a * cos - b * sin;
                row[base + 2 * s + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Multi-head causal attention of `q` (current block) against `k`/`v`
/// (full history including the block itself).
///
/// Query row `i` sits at global position `key_offset + i` and attends keys
/// `0..=key_offset + i`. q and k are already rotated. Returns [n × d].
pub fn causal_attention<T: Scalar>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    n_heads: usize,
    key_offset: usize,
) -> Mat<T> {
    let n = q.rows;
    let d = q.cols;
    assert_eq!(k.cols, d);
    assert_eq!(v.cols, d);
    assert_eq!(k.rows, v.rows);
    assert!(key_offset + n <= k.rows, "queries extend past key history");
    let head_dim = d / n_heads;
    let scale = T::of_usize(head_dim).sqrt().recip();

    let mut out = Mat::zeros(n, d);
    let mut scores = vec![T::zero(); k.rows];
    for i in 0..n {
        let visible = key_offset + i + 1;
        let q_row = q.row(i);
        for h in 0..n_heads {
            let hb = h * head_dim;
            let q_h = &q_row[hb..hb + head_dim];
            for j in 0..visible {
                scores[j] = dot(q_h, &k.row(j)[hb..hb + head_dim]) * scale;
            }
            softmax_in_place(&mut scores[..visible]);
            let out_row = out.row_mut(i);
            for j in 0..visible {
                axpy(scores[j], &v.row(j)[hb..hb + head_dim], &mut out_row[hb..hb + head_dim]);
            }
        }
    }
    out
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}
