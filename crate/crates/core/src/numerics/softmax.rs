//! Streaming (tiled) log-sum-exp and log-softmax.
//!
//! The reduction keeps a running maximum and a running sum rescaled whenever
//! the maximum grows, so a row of any length is normalized by visiting it in
//! fixed-size tiles without holding more than one tile of intermediates.

use super::Real;
use crate::error::{Error, Result};

/// Running `(max, Σ exp(x − max))` pair.
#[derive(Clone, Copy, Debug)]
pub struct OnlineLse<T> {
    max: T,
    sum: T,
}

impl<T: Real> Default for OnlineLse<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> OnlineLse<T> {
    pub fn new() -> Self {
        Self {
            max: T::neg_infinity(),
            sum: T::zero(),
        }
    }

    /// Folds one tile into the running reduction.
    #[inline]
    pub fn update(&mut self, tile: &[T]) {
        let tile_max = tile.iter().copied().fold(T::neg_infinity(), T::max);
        if tile_max == T::neg_infinity() {
            return;
        }
        let new_max = self.max.max(tile_max);
        let mut s = if self.sum == T::zero() {
            T::zero()
        } else {
            self.sum * (self.max - new_max).exp()
        };
        for &x in tile {
            s += (x - new_max).exp();
        }
        self.max = new_max;
        self.sum = s;
    }

    pub fn value(&self) -> T {
        self.max + self.sum.ln()
    }
}

/// `log Σ exp(x)` by tiles of `tile` elements.
pub fn logsumexp_tiled<T: Real>(x: &[T], tile: usize) -> T {
    let mut acc = OnlineLse::new();
    for chunk in x.chunks(tile.max(1)) {
        acc.update(chunk);
    }
    acc.value()
}

/// Two-pass tiled log-softmax: pass one reduces `logsumexp` tile by tile,
/// pass two writes `x − lse` into the output.
pub fn log_softmax_online<T: Real>(x: &[T], tile: usize) -> Result<Vec<T>> {
    if tile == 0 {
        return Err(Error::Shape("tile must be >= 1".into()));
    }
    if x.is_empty() {
        return Err(Error::Shape("log_softmax of an empty vector".into()));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("logit {i} is not finite")));
    }
    let lse = logsumexp_tiled(x, tile);
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(tile) {
        out.extend(chunk.iter().map(|&v| v - lse));
    }
    Ok(out)
}

/// Single-pass reference log-softmax (materializes `exp` of the whole row).
pub fn log_softmax_naive<T: Real>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let lse = m + exps.iter().copied().sum::<T>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// In-place softmax of a row (used by attention).
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::one() / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_row_is_minus_log_v() {
        let out = log_softmax_online(&[0.0f64; 4], 2).unwrap();
        for v in out {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
        assert!((-(4f64.ln()) - -1.386294).abs() < 1e-6);
    }

    #[test]
    fn large_gap_does_not_overflow() {
        let out = log_softmax_online(&[1000.0f64, 0.0], 1).unwrap();
        // lse = 1000 + ln(1 + e^-1000) = 1000 exactly in f64
        assert!(out[0].abs() < 1e-300);
        assert_eq!(out[1], -1000.0);
        let out32 = log_softmax_online(&[1000.0f32, 0.0], 1).unwrap();
        assert!(out32.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let err = log_softmax_online(&[0.0f64, f64::NAN], 2).unwrap_err();
        assert!(err.to_string().starts_with("NonFiniteInput"));
        assert!(log_softmax_online(&[f64::INFINITY], 1).is_err());
    }

    #[test]
    fn v17_tile5_matches_naive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..17).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let a = log_softmax_online(&x, 5).unwrap();
        let b = log_softmax_naive(&x);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn exponentiates_to_distribution(x in prop::collection::vec(-30.0f64..30.0, 1..64), tile in 1usize..20) {
            let out = log_softmax_online(&x, tile).unwrap();
            let s: f64 = out.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn tile_size_independent(x in prop::collection::vec(-30.0f64..30.0, 1..64)) {
            let v = x.len();
            let base = log_softmax_online(&x, 1).unwrap();
            for tile in [2, v, v + 7] {
                let other = log_softmax_online(&x, tile).unwrap();
                for (a, b) in base.iter().zip(&other) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}
