//! Reverse query-key projection.
//!
//! Standard cross-attention scores a decoder query against layer-specific keys
//! `k = (k̄ W_K^(g)) ⊙ γ_K`. Moving `γ_K` and `W_K^(g)` onto the query,
//!
//! ```text
//! q̃ = (q ⊙ γ_K) · W_K^(g)ᵀ ∈ R^d
//! ```
//!
//! gives the same logit as a plain dot product `q̃ · k̄` against the shared,
//! head-agnostic normalized pool. Everything here is generic over the float
//! type so the identity can be checked in both single and double precision.

use num_traits::Float;

use crate::error::{IntraError, Result};

/// Lift a per-head query `q ∈ R^{d_h}` into the pool space `R^d`.
///
/// `w_block` is the `d × d_h` key projection block (row-major) of the KV group
/// that serves this head.
pub fn reverse_qwk_transform<T: Float>(
    q_head: &[T],
    gamma: &[T],
    w_block: &[T],
    d: usize,
) -> Result<Vec<T>> {
    let d_h = q_head.len();
    if gamma.len() != d_h || w_block.len() != d * d_h {
        return Err(IntraError::Shape(format!(
            "reverse_qwk_transform: q has {d_h} entries, gamma {}, W_K block {} (expected {d}x{d_h})",
            gamma.len(),
            w_block.len()
        )));
    }
    let mut out = vec![T::zero(); d];
    reverse_qwk_into(q_head, gamma, w_block, &mut out);
    Ok(out)
}

/// Unchecked core of [`reverse_qwk_transform`].
#[inline]
pub(crate) fn reverse_qwk_into<T: Float>(q_head: &[T], gamma: &[T], w_block: &[T], out: &mut [T]) {
    let d_h = q_head.len();
    for (i, o) in out.iter_mut().enumerate() {
        let w = &w_block[i * d_h..(i + 1) * d_h];
        let mut acc = T::zero();
        for j in 0..d_h {
            acc = acc + w[j] * (q_head[j] * gamma[j]);
        }
        *o = acc;
    }
}

/// Layer keys of the standard path, `k_j^(g) = (k̄_j W_K^(g)) ⊙ γ_K`.
///
/// `kbar` is `L × d` row-major; each entry of `w_blocks` is a `d × d_h` block.
/// Output is indexed `[g][j][c]`, flattened as `n_kv × L × d_h`.
pub fn standard_keys<T: Float>(
    kbar: &[T],
    gamma: &[T],
    w_blocks: &[&[T]],
    d: usize,
) -> Result<Vec<T>> {
    let d_h = gamma.len();
    if d == 0 || !kbar.len().is_multiple_of(d) {
        return Err(IntraError::Shape(format!(
            "standard_keys: {} pool values are not whole rows of width {d}",
            kbar.len()
        )));
    }
    if let Some(bad) = w_blocks.iter().find(|b| b.len() != d * d_h) {
        return Err(IntraError::Shape(format!(
            "standard_keys: W_K block has {} entries, expected {d}x{d_h}",
            bad.len()
        )));
    }
    let l = kbar.len() / d;
    let mut out = vec![T::zero(); w_blocks.len() * l * d_h];
    for (g, block) in w_blocks.iter().enumerate() {
        for j in 0..l {
            let row = &kbar[j * d..(j + 1) * d];
            let key = &mut out[(g * l + j) * d_h..(g * l + j + 1) * d_h];
            for (i, &x) in row.iter().enumerate() {
                let w = &block[i * d_h..(i + 1) * d_h];
                for c in 0..d_h {
                    key[c] = key[c] + x * w[c];
                }
            }
            for c in 0..d_h {
                key[c] = key[c] * gamma[c];
            }
        }
    }
    Ok(out)
}

/// Dot product in the working precision.
#[inline]
pub fn dot_t<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Sum of absolute values of every product term in `q · ((k̄ W) ⊙ γ)`.
///
/// This is the conditioning scale of the logit: rounding error of either path
/// is bounded by a small multiple of it, so relative comparisons use it as the
/// denominator instead of the (possibly cancelling) logit itself.
pub fn logit_magnitude(q_head: &[f64], gamma: &[f64], w_block: &[f64], kbar_row: &[f64]) -> f64 {
    let d_h = q_head.len();
    let mut total = 0.0;
    for (i, &k) in kbar_row.iter().enumerate() {
        let w = &w_block[i * d_h..(i + 1) * d_h];
        for c in 0..d_h {
            total += (k * w[c] * gamma[c] * q_head[c]).abs();
        }
    }
    total
}
