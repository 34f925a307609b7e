//! Elementwise and row-wise building blocks shared by encoder and decoder,
//! with the backward rules the trainer needs.

use crate::error::{IntraError, Result};

/// Scale-free RMS normalization: `x / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(IntraError::NonFinite("rms_norm input".into()));
    }
    let inv = inv_rms(x, eps);
    let out: Vec<f64> = x.iter().map(|v| v * inv).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(IntraError::NonFinite("rms_norm output".into()));
    }
    Ok(out)
}

#[inline]
pub(crate) fn inv_rms(x: &[f64], eps: f64) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        // all-zero row with eps = 0
        0.0
    } else {
        1.0 / denom
    }
}

/// `out = weight ⊙ x / rms(x)`; returns `1 / rms(x)` for the backward pass.
#[inline]
pub(crate) fn rms_norm_scaled_into(x: &[f64], weight: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let inv = inv_rms(x, eps);
    for ((o, xi), wi) in out.iter_mut().zip(x).zip(weight) {
        *o = xi * inv * wi;
    }
    inv
}

/// Gradient of `weight ⊙ x · inv` with respect to `x`, accumulated into `gx`.
pub(crate) fn rms_norm_scaled_backward(
    x: &[f64],
    weight: &[f64],
    inv: f64,
    gy: &[f64],
    gx: &mut [f64],
) {
    let n = x.len() as f64;
    let proj: f64 = x
        .iter()
        .zip(weight)
        .zip(gy)
        .map(|((xi, wi), gi)| xi * wi * gi)
        .sum();
    let c = proj * inv * inv * inv / n;
    for (((g, xi), wi), gi) in gx.iter_mut().zip(x).zip(weight).zip(gy) {
        *g += wi * gi * inv - xi * c;
    }
}

/// Precomputed rotary angles for every position up to `max_positions`.
#[derive(Debug, Clone)]
pub struct Rope {
    d_h: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    pub fn new(d_h: usize, max_positions: usize, theta: f64) -> Result<Self> {
        if !d_h.is_multiple_of(2) {
            return Err(IntraError::Config(format!(
                "rotary embeddings need an even head dimension, got {d_h}"
            )));
        }
        let half = d_h / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for i in 0..half {
                let freq = theta.powf(-(2.0 * i as f64) / d_h as f64);
                let (s, c) = (p as f64 * freq).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(Self { d_h, cos, sin })
    }

    pub fn max_positions(&self) -> usize {
        self.cos.len() / (self.d_h / 2).max(1)
    }

    /// Rotate every head of `row` (laid out head-major, `d_h` per head) in place.
    #[inline]
    pub fn apply(&self, row: &mut [f64], position: usize) {
        self.rotate(row, position, 1.0);
    }

    /// Inverse rotation; this is also the backward rule of [`Rope::apply`].
    #[inline]
    pub fn apply_inverse(&self, row: &mut [f64], position: usize) {
        self.rotate(row, position, -1.0);
    }

    #[inline]
    fn rotate(&self, row: &mut [f64], position: usize, sign: f64) {
        let half = self.d_h / 2;
        let cos = &self.cos[position * half..(position + 1) * half];
        let sin = &self.sin[position * half..(position + 1) * half];
        for head in row.chunks_exact_mut(self.d_h) {
            for i in 0..half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (cos[i], sign * sin[i]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// Rotate each head of `q` (`n_heads × d_h`, row-major) for `position`.
pub fn rope_apply(q: &[f64], d_h: usize, position: usize, theta: f64) -> Result<Vec<f64>> {
    if !d_h.is_multiple_of(2) {
        return Err(IntraError::Config(format!(
            "rotary embeddings need an even head dimension, got {d_h}"
        )));
    }
    let angles: Vec<f64> = (0..d_h / 2)
        .map(|i| position as f64 * theta.powf(-(2.0 * i as f64) / d_h as f64))
        .collect();
    rotate_heads(q, d_h, &angles)
}

/// Rotate the `(2i, 2i+1)` pair of every `d_h`-wide head by `angles[i]`.
pub fn rotate_heads(q: &[f64], d_h: usize, angles: &[f64]) -> Result<Vec<f64>> {
    if !q.len().is_multiple_of(d_h) || angles.len() != d_h / 2 {
        return Err(IntraError::Shape(format!(
            "query of length {} with {} angles does not fit {d_h}-wide heads",
            q.len(),
            angles.len()
        )));
    }
    let mut out = q.to_vec();
    for head in out.chunks_exact_mut(d_h) {
        for (i, angle) in angles.iter().enumerate() {
            let (s, c) = angle.sin_cos();
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place numerically stable softmax. Entries equal to `-inf` get weight zero.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// Stable `log(sum(exp(x)))`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn rms_norm_examples() {
        assert_eq!(rms_norm(&[1.0; 4], 0.0).unwrap(), vec![1.0; 4]);
        assert_eq!(rms_norm(&[0.0, 0.0], 1e-6).unwrap(), vec![0.0, 0.0]);
        let y = rms_norm(&[3.0, 4.0], 0.0).unwrap();
        assert_abs_diff_eq!(y[0], 0.848_528, epsilon = 1e-6);
        assert_abs_diff_eq!(y[1], 1.131_371, epsilon = 1e-6);
    }

    #[test]
    fn rms_norm_rejects_nan() {
        let err = rms_norm(&[1.0, f64::NAN], 1e-6).unwrap_err();
        assert!(err.to_string().contains("non-finite activation"));
    }

    #[test]
    fn rope_examples() {
        let q = [0.3, -1.2, 0.5, 2.0];
        assert_eq!(rope_apply(&q, 4, 0, 10_000.0).unwrap(), q.to_vec());
        let r = rotate_heads(&[1.0, 0.0], 2, &[std::f64::consts::FRAC_PI_2]).unwrap();
        assert_abs_diff_eq!(r[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], 1.0, epsilon = 1e-15);
        assert!(matches!(
            rope_apply(&q, 3, 1, 10_000.0),
            Err(IntraError::Config(_))
        ));
    }

    #[test]
    fn rope_table_matches_free_function() {
        let rope = Rope::new(8, 64, 10_000.0).unwrap();
        let q: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        for p in [0, 1, 7, 63] {
            let mut row = q.clone();
            rope.apply(&mut row, p);
            let expect = rope_apply(&q, 8, p, 10_000.0).unwrap();
            for (a, b) in row.iter().zip(&expect) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
            rope.apply_inverse(&mut row, p);
            for (a, b) in row.iter().zip(&q) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn softmax_masks_neg_inf() {
        let mut x = [1.0, f64::NEG_INFINITY, 1.0];
        softmax_in_place(&mut x);
        assert_eq!(x, [0.5, 0.0, 0.5]);
        let mut single = [-123.0];
        softmax_in_place(&mut single);
        assert_eq!(single, [1.0]);
    }

    proptest! {
        #[test]
        fn rope_preserves_head_norms(
            q in proptest::collection::vec(-3.0f64..3.0, 16),
            p in 0usize..2048,
        ) {
            let out = rope_apply(&q, 8, p, 10_000.0).unwrap();
            for (a, b) in q.chunks(8).zip(out.chunks(8)) {
                let na: f64 = a.iter().map(|v| v * v).sum();
                let nb: f64 = b.iter().map(|v| v * v).sum();
                prop_assert!((na - nb).abs() <= 1e-12 * na.max(1.0));
            }
        }

        #[test]
        fn rms_norm_backward_matches_fd(
            x in proptest::collection::vec(-2.0f64..2.0, 6),
            w in proptest::collection::vec(0.5f64..1.5, 6),
            gy in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let eps = 1e-6;
            let f = |x: &[f64]| {
                let mut out = vec![0.0; x.len()];
                rms_norm_scaled_into(x, &w, eps, &mut out);
                out.iter().zip(&gy).map(|(a, b)| a * b).sum::<f64>()
            };
            let inv = inv_rms(&x, eps);
            let mut gx = vec![0.0; 6];
            rms_norm_scaled_backward(&x, &w, inv, &gy, &mut gx);
            for i in 0..6 {
                let h = 1e-6;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                prop_assert!((fd - gx[i]).abs() <= 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
