//! Late-interaction scoring: `Σ_a max_b (u_a · v_b) · scale`.

use crate::error::{IntraError, Result};
use crate::tensor::dot;

fn check(u: &[f64], v: &[f64], d: usize) -> Result<()> {
    if d == 0 || !u.len().is_multiple_of(d) || !v.len().is_multiple_of(d) {
        return Err(IntraError::Shape(format!(
            "maxsim operands of length {} and {} are not rows of width {d}",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() || v.is_empty() {
        return Err(IntraError::EmptyInput("maxsim operand".into()));
    }
    Ok(())
}

/// MaxSim of row-major `u` (`L_u × d`) against `v` (`L_v × d`).
pub fn maxsim(u: &[f64], v: &[f64], d: usize, scale: f64) -> Result<f64> {
    check(u, v, d)?;
    Ok(maxsim_unchecked(u, v, d, scale))
}

#[inline]
pub(crate) fn maxsim_unchecked(u: &[f64], v: &[f64], d: usize, scale: f64) -> f64 {
    let mut total = 0.0;
    for ua in u.chunks_exact(d) {
        let mut best = f64::NEG_INFINITY;
        for vb in v.chunks_exact(d) {
            let s = dot(ua, vb);
            if s > best {
                best = s;
            }
        }
        total += best * scale;
    }
    total
}

/// MaxSim that also records, per query row, the index of the winning `v` row.
/// Ties go to the lowest index.
#[inline]
pub(crate) fn maxsim_argmax(
    u: &[f64],
    v: &[f64],
    d: usize,
    scale: f64,
    argmax: &mut [usize],
) -> f64 {
    let mut total = 0.0;
    for (a, ua) in u.chunks_exact(d).enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (b, vb) in v.chunks_exact(d).enumerate() {
            let s = dot(ua, vb);
            if s > best {
                best = s;
                arg = b;
            }
        }
        argmax[a] = arg;
        total += best * scale;
    }
    total
}

/// The same sum with the matching fixed in advance.
#[inline]
pub(crate) fn maxsim_routed(u: &[f64], v: &[f64], d: usize, scale: f64, argmax: &[usize]) -> f64 {
    u.chunks_exact(d)
        .zip(argmax)
        .map(|(ua, &b)| dot(ua, &v[b * d..(b + 1) * d]) * scale)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(
            maxsim(&[1.0, 0.0, 0.0, 1.0], &[2.0, 0.0, 0.0, 3.0], 2, 1.0).unwrap(),
            5.0
        );
        assert_eq!(
            maxsim(&[0.0, 0.0], &[2.0, -7.0, 0.5, 3.0], 2, 1.0).unwrap(),
            0.0
        );
        assert_eq!(maxsim(&[1.0], &[-2.0, -3.0], 1, 1.0).unwrap(), -2.0);
    }

    #[test]
    fn empty_operands_rejected() {
        assert!(matches!(
            maxsim(&[], &[1.0], 1, 1.0),
            Err(IntraError::EmptyInput(_))
        ));
        assert!(matches!(
            maxsim(&[1.0], &[], 1, 1.0),
            Err(IntraError::EmptyInput(_))
        ));
        assert!(matches!(
            maxsim(&[1.0, 2.0, 3.0], &[1.0, 2.0], 2, 1.0),
            Err(IntraError::Shape(_))
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        let mut arg = [9];
        let s = maxsim_argmax(&[1.0], &[3.0, 3.0, 1.0], 1, 1.0, &mut arg);
        assert_eq!((s, arg[0]), (3.0, 0));
        assert_eq!(maxsim_routed(&[1.0], &[3.0, 3.0, 1.0], 1, 1.0, &arg), 3.0);
    }

    proptest! {
        #[test]
        fn scale_is_linear(
            u in prop::collection::vec(-3.0f64..3.0, 6),
            v in prop::collection::vec(-3.0f64..3.0, 9),
            c in 0.01f64..50.0,
        ) {
            let a = maxsim(&u, &v, 3, 1.0).unwrap() * c;
            let b = maxsim(&u, &v, 3, c).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn brute_force_agreement(
            u in prop::collection::vec(-3.0f64..3.0, 8),
            v in prop::collection::vec(-3.0f64..3.0, 12),
        ) {
            let mut expect = 0.0;
            for a in 0..2 {
                let best = (0..3)
                    .map(|b| (0..4).map(|k| u[a * 4 + k] * v[b * 4 + k]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max);
                expect += best;
            }
            let got = maxsim(&u, &v, 4, 1.0).unwrap();
            prop_assert!((got - expect).abs() <= 1e-12);
            let mut arg = [0; 2];
            let s = maxsim_argmax(&u, &v, 4, 1.0, &mut arg);
            prop_assert_eq!(s, got);
            prop_assert_eq!(maxsim_routed(&u, &v, 4, 1.0, &arg), got);
        }
    }
}
