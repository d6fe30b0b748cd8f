//! Transducer loss over the `T × (U+1)` alignment lattice.
//!
//! `rnnt_loss` runs the log-space forward (alpha) and backward (beta)
//! recursions and returns the exact gradient with respect to the raw joint
//! logits. `rnnt_bruteforce_oracle` enumerates every alignment explicitly and
//! exists to check the recursion on small lattices.

use crate::error::{Error, Result};
use crate::numerics::Real;

pub const BLANK_ID: usize = 0;

/// Joint logits `z[B, T_max, U_max+1, V]` with per-utterance valid lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLogits<T> {
    pub z: Vec<T>,
    pub batch: usize,
    pub t_max: usize,
    /// `U_max + 1`
    pub u_max1: usize,
    pub vocab: usize,
    pub t_len: Vec<usize>,
    pub u_len: Vec<usize>,
    pub blank_id: usize,
}

impl<T: Real> JointLogits<T> {
    pub fn new(
        z: Vec<T>,
        dims: [usize; 4],
        t_len: Vec<usize>,
        u_len: Vec<usize>,
    ) -> Result<Self> {
        let [batch, t_max, u_max1, vocab] = dims;
        if z.len() != batch * t_max * u_max1 * vocab {
            return Err(Error::Shape(format!(
                "joint buffer of {} values for dims {dims:?}",
                z.len()
            )));
        }
        if t_len.len() != batch || u_len.len() != batch {
            return Err(Error::Shape("length vectors must have one entry per utterance".into()));
        }
        for b in 0..batch {
            if t_len[b] > t_max || u_len[b] + 1 > u_max1 {
                return Err(Error::Shape(format!(
                    "utterance {b}: lengths ({}, {}) exceed lattice ({t_max}, {})",
                    t_len[b],
                    u_len[b],
                    u_max1 - 1
                )));
            }
        }
        Ok(Self {
            z,
            batch,
            t_max,
            u_max1,
            vocab,
            t_len,
            u_len,
            blank_id: BLANK_ID,
        })
    }

    /// Single-utterance lattice `[1, T, U+1, V]` with every cell valid.
    pub fn single(z: Vec<T>, t: usize, u: usize, vocab: usize) -> Result<Self> {
        Self::new(z, [1, t, u + 1, vocab], vec![t], vec![u])
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.t_max, self.u_max1, self.vocab]
    }

    #[inline]
    pub fn offset(&self, b: usize, t: usize, u: usize) -> usize {
        ((b * self.t_max + t) * self.u_max1 + u) * self.vocab
    }

    #[inline]
    pub fn cell(&self, b: usize, t: usize, u: usize) -> &[T] {
        let o = self.offset(b, t, u);
        &self.z[o..o + self.vocab]
    }

    pub fn is_valid(&self, b: usize, t: usize, u: usize) -> bool {
        t < self.t_len[b] && u <= self.u_len[b]
    }

    /// Number of valid `(t, u)` cells of utterance `b`.
    pub fn valid_cells(&self, b: usize) -> usize {
        self.t_len[b] * (self.u_len[b] + 1)
    }
}

/// Per-utterance losses and the gradient of their sum w.r.t. `z`.
#[derive(Clone, Debug)]
pub struct RnntOutput<T> {
    pub loss: Vec<T>,
    pub grad: Vec<T>,
}

fn log_add<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_targets<T: Real>(logits: &JointLogits<T>, targets: &[Vec<usize>]) -> Result<()> {
    if targets.len() != logits.batch {
        return Err(Error::Shape(format!(
            "{} target sequences for batch of {}",
            targets.len(),
            logits.batch
        )));
    }
    for (b, y) in targets.iter().enumerate() {
        if y.len() != logits.u_len[b] {
            return Err(Error::Shape(format!(
                "utterance {b}: {} targets but u_len {}",
                y.len(),
                logits.u_len[b]
            )));
        }
        for (position, &tok) in y.iter().enumerate() {
            if tok == logits.blank_id {
                return Err(Error::BlankInTarget {
                    utterance: b,
                    position,
                });
            }
            if tok >= logits.vocab {
                return Err(Error::BadToken {
                    token: tok,
                    vocab: logits.vocab,
                });
            }
        }
        if logits.t_len[b] == 0 {
            return Err(Error::ImpossibleLattice(format!(
                "utterance {b} has zero frames and {} targets",
                y.len()
            )));
        }
    }
    Ok(())
}

/// Log-space forward variables of one utterance, `[T, U+1]` row-major.
pub struct LatticeAlphas<T> {
    pub log_alpha: Vec<T>,
    pub t: usize,
    pub u1: usize,
}

struct CellLogProbs<T> {
    lse: Vec<T>,
    blank: Vec<T>,
    label: Vec<T>,
}

fn cell_log_probs<T: Real>(logits: &JointLogits<T>, b: usize, y: &[usize]) -> CellLogProbs<T> {
    let (tl, u1) = (logits.t_len[b], logits.u_len[b] + 1);
    let mut lse = vec![T::zero(); tl * u1];
    let mut blank = vec![T::zero(); tl * u1];
    let mut label = vec![T::neg_infinity(); tl * u1];
    for t in 0..tl {
        for u in 0..u1 {
            let cell = logits.cell(b, t, u);
            let m = cell.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = cell.iter().map(|&x| (x - m).exp()).sum();
            let l = m + s.ln();
            let i = t * u1 + u;
            lse[i] = l;
            blank[i] = cell[logits.blank_id] - l;
            if u + 1 < u1 {
                label[i] = cell[y[u]] - l;
            }
        }
    }
    CellLogProbs { lse, blank, label }
}

fn forward_alphas<T: Real>(lp: &CellLogProbs<T>, tl: usize, u1: usize) -> LatticeAlphas<T> {
    let mut a = vec![T::neg_infinity(); tl * u1];
    a[0] = T::zero();
    for t in 0..tl {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut v = T::neg_infinity();
            if t > 0 {
                v = a[(t - 1) * u1 + u] + lp.blank[(t - 1) * u1 + u];
            }
            if u > 0 {
                v = log_add(v, a[t * u1 + u - 1] + lp.label[t * u1 + u - 1]);
            }
            a[t * u1 + u] = v;
        }
    }
    LatticeAlphas {
        log_alpha: a,
        t: tl,
        u1,
    }
}

/// Forward variables of utterance `b` (exposed for inspection and tests).
pub fn lattice_alphas<T: Real>(
    logits: &JointLogits<T>,
    b: usize,
    targets: &[usize],
) -> LatticeAlphas<T> {
    let lp = cell_log_probs(logits, b, targets);
    forward_alphas(&lp, logits.t_len[b], logits.u_len[b] + 1)
}

/// Transducer negative log-likelihood per utterance with its gradient.
pub fn rnnt_loss<T: Real>(logits: &JointLogits<T>, targets: &[Vec<usize>]) -> Result<RnntOutput<T>> {
    check_targets(logits, targets)?;
    let mut losses = Vec::with_capacity(logits.batch);
    let mut grad = vec![T::zero(); logits.z.len()];
    for (b, y) in targets.iter().enumerate() {
        let (tl, u1) = (logits.t_len[b], logits.u_len[b] + 1);
        let lp = cell_log_probs(logits, b, y);
        let alphas = forward_alphas(&lp, tl, u1);
        let a = &alphas.log_alpha;
        let mut beta = vec![T::neg_infinity(); tl * u1];
        for t in (0..tl).rev() {
            for u in (0..u1).rev() {
                let i = t * u1 + u;
                beta[i] = if t == tl - 1 && u == u1 - 1 {
                    lp.blank[i]
                } else {
                    let mut v = T::neg_infinity();
                    if t + 1 < tl {
                        v = beta[i + u1] + lp.blank[i];
                    }
                    if u + 1 < u1 {
                        v = log_add(v, beta[i + 1] + lp.label[i]);
                    }
                    v
                };
            }
        }
        let log_p = a[(tl - 1) * u1 + u1 - 1] + lp.blank[(tl - 1) * u1 + u1 - 1];
        losses.push(-log_p);

        // dL/dz_v = p_v·occ − flow_v, where occ = Σ_v flow_v is the node occupancy.
        for t in 0..tl {
            for u in 0..u1 {
                let i = t * u1 + u;
                let occ = (a[i] + beta[i] - log_p).exp();
                let off = logits.offset(b, t, u);
                let cell = &logits.z[off..off + logits.vocab];
                let g = &mut grad[off..off + logits.vocab];
                for (gv, &zv) in g.iter_mut().zip(cell) {
                    *gv = (zv - lp.lse[i]).exp() * occ;
                }
                let blank_next = if t + 1 < tl {
                    beta[i + u1]
                } else if u == u1 - 1 {
                    T::zero()
                } else {
                    T::neg_infinity()
                };
                g[logits.blank_id] -= (a[i] + lp.blank[i] + blank_next - log_p).exp();
                if u + 1 < u1 {
                    g[y[u]] -= (a[i] + lp.label[i] + beta[i + 1] - log_p).exp();
                }
            }
        }
    }
    Ok(RnntOutput { loss: losses, grad })
}

/// Explicit enumeration of every monotonic alignment (T ≤ 6, U ≤ 4).
pub fn rnnt_bruteforce_oracle<T: Real>(
    logits: &JointLogits<T>,
    targets: &[Vec<usize>],
) -> Result<Vec<T>> {
    check_targets(logits, targets)?;
    let mut out = Vec::with_capacity(logits.batch);
    for (b, y) in targets.iter().enumerate() {
        let (tl, ul) = (logits.t_len[b], logits.u_len[b]);
        if tl > 6 || ul > 4 {
            return Err(Error::OracleTooLarge { t: tl, u: ul });
        }
        let prob = |t: usize, u: usize, v: usize| -> f64 {
            let cell = logits.cell(b, t, u);
            let m = cell.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = cell.iter().map(|x| (x.as_f64() - m).exp()).sum();
            (cell[v].as_f64() - m).exp() / s
        };
        // Each alignment is a string of T blanks and U labels whose last symbol
        // is a blank; walk all of them and add up the path products.
        let mut total = 0.0f64;
        let mut stack = vec![(0usize, 0usize, 1.0f64)];
        while let Some((t, u, p)) = stack.pop() {
            if t == tl {
                if u == ul {
                    total += p;
                }
                continue;
            }
            stack.push((t + 1, u, p * prob(t, u, logits.blank_id)));
            if u < ul {
                stack.push((t, u + 1, p * prob(t, u, y[u])));
            }
        }
        out.push(T::of(-total.ln()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(t: usize, u: usize, v: usize) -> JointLogits<f64> {
        JointLogits::single(vec![0.0; t * (u + 1) * v], t, u, v).unwrap()
    }

    // All three all-zero instances have total alignment probability 0.25.
    #[test]
    fn zero_logit_examples() {
        let want = -(0.25f64).ln();
        assert!((want - 1.386294).abs() < 1e-6);
        for (t, u, y) in [(1, 1, vec![1]), (2, 0, vec![]), (2, 1, vec![1])] {
            let l = zeros(t, u, 2);
            let out = rnnt_loss(&l, &[y.clone()]).unwrap();
            assert!((out.loss[0] - want).abs() < 1e-12, "T={t} U={u}");
            let oracle = rnnt_bruteforce_oracle(&l, &[y]).unwrap();
            assert!((oracle[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn blank_only_path() {
        let z: Vec<f64> = vec![0.3, -0.2, 1.0, 0.1, 0.5, -0.7];
        let l = JointLogits::single(z.clone(), 3, 0, 2).unwrap();
        let want: f64 = (0..3)
            .map(|t| {
                let c = &z[t * 2..t * 2 + 2];
                let lse = (c[0].exp() + c[1].exp()).ln();
                -(c[0] - lse)
            })
            .sum();
        let o = rnnt_bruteforce_oracle(&l, &[vec![]]).unwrap();
        assert!((o[0] - want).abs() < 1e-12);
        let r = rnnt_loss(&l, &[vec![]]).unwrap();
        assert!((r.loss[0] - want).abs() < 1e-12);
    }

    #[test]
    fn alpha_origin_is_zero() {
        let l = zeros(3, 2, 3);
        let a = lattice_alphas(&l, 0, &[1, 2]);
        assert_eq!(a.log_alpha[0], 0.0);
    }

    #[test]
    fn error_contracts() {
        let l = zeros(2, 1, 3);
        assert!(matches!(
            rnnt_loss(&l, &[vec![0]]),
            Err(Error::BlankInTarget { .. })
        ));
        let l0 = JointLogits::new(vec![0.0; 2 * 3], [1, 1, 2, 3], vec![0], vec![1]).unwrap();
        assert!(matches!(
            rnnt_loss(&l0, &[vec![1]]),
            Err(Error::ImpossibleLattice(_))
        ));
        let big = zeros(7, 1, 2);
        assert!(matches!(
            rnnt_bruteforce_oracle(&big, &[vec![1]]),
            Err(Error::OracleTooLarge { .. })
        ));
    }
}
