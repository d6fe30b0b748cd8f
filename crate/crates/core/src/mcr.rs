//! Mode-consistency regularization between offline and streaming joint lattices.
//!
//! For every valid lattice cell `(t, u)` the teacher and student logits are
//! normalized on the fly, tile by tile, and reduced into a KL divergence.
//! No softmax or log-softmax buffer of lattice size is ever allocated: the
//! forward keeps two running log-sum-exp pairs per cell, and the backward
//! recomputes them from the raw logits before writing gradients.
//!
//! Reduction order is fixed (batch, then `t`, then `u`), so results are
//! deterministic.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc_probe::measure_peak;
use crate::error::{Error, Result};
use crate::lattice::JointLogits;
use crate::numerics::{OnlineLse, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `KL(p_off ‖ q_str)`, gradient only into the streaming logits.
    OfflineTeacher,
    /// `KL(p_str ‖ q_off)`, gradient only into the offline logits.
    StreamingTeacher,
    /// `½[KL(p‖q) + KL(q‖p)]`, each term detaching its own teacher.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FullJoint,
    ThreeClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MCRConfig {
    pub direction: Direction,
    pub lambda: f64,
    pub variant: Variant,
    pub tile: usize,
    /// Differentiate through the teacher distribution as well.
    pub full_grad: bool,
}

impl Default for MCRConfig {
    fn default() -> Self {
        Self {
            direction: Direction::Symmetric,
            lambda: 0.3,
            variant: Variant::FullJoint,
            tile: 64,
            full_grad: false,
        }
    }
}

impl MCRConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("mcr lambda must be >= 0, got {}", self.lambda)));
        }
        if self.tile == 0 {
            return Err(Error::Config("mcr tile must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MCRResult<T> {
    /// Batch mean of per-utterance valid-cell means.
    pub loss: T,
    pub grad_offline: Vec<T>,
    pub grad_streaming: Vec<T>,
    /// Valid `(t, u)` cells used in the normalization, summed over the batch.
    pub cells: usize,
}

fn check_pair<T: Real>(a: &JointLogits<T>, b: &JointLogits<T>) -> Result<()> {
    if a.dims() != b.dims() || a.t_len != b.t_len || a.u_len != b.u_len || a.blank_id != b.blank_id
    {
        return Err(Error::ModeShapeMismatch(format!(
            "offline {:?} t{:?} u{:?} vs streaming {:?} t{:?} u{:?}",
            a.dims(),
            a.t_len,
            a.u_len,
            b.dims(),
            b.t_len,
            b.u_len
        )));
    }
    for (name, z) in [("offline", a), ("streaming", b)] {
        for bi in 0..z.batch {
            for t in 0..z.t_len[bi] {
                for u in 0..=z.u_len[bi] {
                    if z.cell(bi, t, u).iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFiniteInput(format!(
                            "{name} logits at (b={bi}, t={t}, u={u})"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// `(scale applied to cells of utterance b)` = 1 / (T_b (U_b+1) · B)
fn cell_weights<T: Real>(z: &JointLogits<T>) -> Vec<T> {
    let bsz = z.batch as f64;
    (0..z.batch)
        .map(|b| T::of(1.0 / (z.valid_cells(b) as f64 * bsz)))
        .collect()
}

fn tiled_lse<T: Real>(row: &[T], tile: usize) -> T {
    let mut acc = OnlineLse::new();
    for c in row.chunks(tile) {
        acc.update(c);
    }
    acc.value()
}

/// Per-cell KL pair `(KL(p‖q), KL(q‖p))` with `p = softmax(a)`, `q = softmax(b)`,
/// using `tile`-sized scratch buffers.
fn cell_kl_pair<T: Real>(
    a: &[T],
    b: &[T],
    lse_a: T,
    lse_b: T,
    tile: usize,
    la: &mut [T],
    lb: &mut [T],
) -> (T, T) {
    let mut kl_ab = T::zero();
    let mut kl_ba = T::zero();
    for (ca, cb) in a.chunks(tile).zip(b.chunks(tile)) {
        let n = ca.len();
        for i in 0..n {
            la[i] = ca[i] - lse_a;
            lb[i] = cb[i] - lse_b;
        }
        for i in 0..n {
            let (p, q) = (la[i].exp(), lb[i].exp());
            let d = la[i] - lb[i];
            // Bregman form: every term is nonnegative
            kl_ab += p * d - p + q;
            kl_ba += -q * d - q + p;
        }
    }
    (kl_ab.max(T::zero()), kl_ba.max(T::zero()))
}

fn combine<T: Real>(direction: Direction, kl_off_str: T, kl_str_off: T) -> T {
    match direction {
        Direction::OfflineTeacher => kl_off_str,
        Direction::StreamingTeacher => kl_str_off,
        Direction::Symmetric => T::of(0.5) * (kl_off_str + kl_str_off),
    }
}

/// Forward pass of the fused path. Returns the batch loss and the cell count.
pub fn mcr_forward<T: Real>(
    z_off: &JointLogits<T>,
    z_str: &JointLogits<T>,
    cfg: &MCRConfig,
) -> Result<(T, usize)> {
    check_pair(z_off, z_str)?;
    cfg.validate()?;
    let tile = cfg.tile.min(z_off.vocab).max(1);
    let mut la = vec![T::zero(); tile];
    let mut lb = vec![T::zero(); tile];
    let weights = cell_weights(z_off);
    let mut loss = T::zero();
    let mut cells = 0;
    for b in 0..z_off.batch {
        let mut utt = T::zero();
        for t in 0..z_off.t_len[b] {
            for u in 0..=z_off.u_len[b] {
                let (zo, zs) = (z_off.cell(b, t, u), z_str.cell(b, t, u));
                let (lo, ls) = (tiled_lse(zo, tile), tiled_lse(zs, tile));
                let (kl_os, kl_so) = cell_kl_pair(zo, zs, lo, ls, tile, &mut la, &mut lb);
                utt += combine(cfg.direction, kl_os, kl_so);
            }
        }
        cells += z_off.valid_cells(b);
        loss += utt * weights[b];
    }
    Ok((loss, cells))
}

/// Backward pass of the fused path: recomputes the per-cell normalizers from
/// the raw logits and adds `scale · ∂loss/∂z` into the gradient buffers.
/// Padded cells are left untouched.
pub fn mcr_backward_into<T: Real>(
    z_off: &JointLogits<T>,
    z_str: &JointLogits<T>,
    cfg: &MCRConfig,
    scale: T,
    grad_off: &mut [T],
    grad_str: &mut [T],
) -> Result<()> {
    check_pair(z_off, z_str)?;
    cfg.validate()?;
    if grad_off.len() != z_off.z.len() || grad_str.len() != z_str.z.len() {
        return Err(Error::Shape("gradient buffers must match the logits".into()));
    }
    let tile = cfg.tile.min(z_off.vocab).max(1);
    let mut la = vec![T::zero(); tile];
    let mut lb = vec![T::zero(); tile];
    let weights = cell_weights(z_off);
    let half = T::of(0.5);
    let (want_off, want_str) = match (cfg.direction, cfg.full_grad) {
        (_, true) | (Direction::Symmetric, false) => (true, true),
        (Direction::OfflineTeacher, false) => (false, true),
        (Direction::StreamingTeacher, false) => (true, false),
    };
    for b in 0..z_off.batch {
        let w = weights[b] * scale;
        for t in 0..z_off.t_len[b] {
            for u in 0..=z_off.u_len[b] {
                let off = z_off.offset(b, t, u);
                let (zo, zs) = (z_off.cell(b, t, u), z_str.cell(b, t, u));
                let (lo, ls) = (tiled_lse(zo, tile), tiled_lse(zs, tile));
                let (kl_os, kl_so) = if cfg.full_grad {
                    cell_kl_pair(zo, zs, lo, ls, tile, &mut la, &mut lb)
                } else {
                    (T::zero(), T::zero())
                };
                for (start, (co, cs)) in zo.chunks(tile).zip(zs.chunks(tile)).enumerate() {
                    let base = off + start * tile;
                    for i in 0..co.len() {
                        let (lp, lq) = (co[i] - lo, cs[i] - ls);
                        let (p, q) = (lp.exp(), lq.exp());
                        // d KL(p‖q)/dz_q = q − p ; d KL(p‖q)/dz_p = p (lp − lq − KL)
                        let (g_o, g_s) = match cfg.direction {
                            Direction::OfflineTeacher => {
                                let teacher = if cfg.full_grad {
                                    p * (lp - lq - kl_os)
                                } else {
                                    T::zero()
                                };
                                (teacher, q - p)
                            }
                            Direction::StreamingTeacher => {
                                let teacher = if cfg.full_grad {
                                    q * (lq - lp - kl_so)
                                } else {
                                    T::zero()
                                };
                                (p - q, teacher)
                            }
                            Direction::Symmetric => {
                                let (mut go, mut gs) = (p - q, q - p);
                                if cfg.full_grad {
                                    go += p * (lp - lq - kl_os);
                                    gs += q * (lq - lp - kl_so);
                                }
                                (half * go, half * gs)
                            }
                        };
                        if want_off {
                            grad_off[base + i] += w * g_o;
                        }
                        if want_str {
                            grad_str[base + i] += w * g_s;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Full-joint MCR loss with gradients for both lattices.
pub fn mcr_loss<T: Real>(
    z_off: &JointLogits<T>,
    z_str: &JointLogits<T>,
    cfg: &MCRConfig,
) -> Result<MCRResult<T>> {
    if cfg.variant != Variant::FullJoint {
        return Err(Error::Config(
            "mcr_loss handles the full_joint variant; use mcr_three_class".into(),
        ));
    }
    let (loss, cells) = mcr_forward(z_off, z_str, cfg)?;
    let mut grad_offline = vec![T::zero(); z_off.z.len()];
    let mut grad_streaming = vec![T::zero(); z_str.z.len()];
    mcr_backward_into(z_off, z_str, cfg, T::one(), &mut grad_offline, &mut grad_streaming)?;
    Ok(MCRResult {
        loss,
        grad_offline,
        grad_streaming,
        cells,
    })
}

fn lse_excluding<T: Real>(row: &[T], skip_a: usize, skip_b: Option<usize>) -> T {
    let m = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != skip_a && Some(*i) != skip_b)
        .map(|(_, &x)| x)
        .fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != skip_a && Some(*i) != skip_b)
        .map(|(_, &x)| (x - m).exp())
        .sum();
    m + s.ln()
}

/// Log-probabilities of the collapsed classes `[blank, target?, rest]` and
/// the class index of every vocabulary entry.
fn collapse<T: Real>(row: &[T], blank: usize, target: Option<usize>) -> ([T; 3], usize) {
    let lse = tiled_lse(row, row.len());
    let lb = row[blank] - lse;
    match target {
        Some(y) => {
            let ly = row[y] - lse;
            let lr = lse_excluding(row, blank, Some(y)) - lse;
            ([lb, ly, lr], 3)
        }
        None => {
            let lr = lse_excluding(row, blank, None) - lse;
            ([lb, lr, T::neg_infinity()], 2)
        }
    }
}

fn class_of(v: usize, blank: usize, target: Option<usize>) -> usize {
    if v == blank {
        0
    } else if Some(v) == target {
        1
    } else if target.is_some() {
        2
    } else {
        1
    }
}

/// KL over the collapsed distributions, skipping classes empty in both.
fn class_kl<T: Real>(lp: &[T], lq: &[T]) -> T {
    let mut kl = T::zero();
    for c in 0..lp.len() {
        if lp[c] == T::neg_infinity() {
            continue;
        }
        kl += lp[c].exp() * (lp[c] - lq[c]);
    }
    kl.max(T::zero())
}

/// MCR over the collapsed `{blank, next target, rest}` distribution
/// (`{blank, rest}` at the last label position).
pub fn mcr_three_class<T: Real>(
    z_off: &JointLogits<T>,
    z_str: &JointLogits<T>,
    targets: &[Vec<usize>],
    cfg: &MCRConfig,
) -> Result<MCRResult<T>> {
    if cfg.variant != Variant::ThreeClass {
        return Err(Error::Config("mcr_three_class requires variant three_class".into()));
    }
    check_pair(z_off, z_str)?;
    cfg.validate()?;
    if targets.len() != z_off.batch {
        return Err(Error::Shape("one target sequence per utterance".into()));
    }
    for (b, y) in targets.iter().enumerate() {
        if y.len() != z_off.u_len[b] {
            return Err(Error::Shape(format!("utterance {b}: target length mismatch")));
        }
        if let Some(position) = y.iter().position(|&v| v == z_off.blank_id) {
            return Err(Error::BlankInTarget {
                utterance: b,
                position,
            });
        }
        if let Some(&tok) = y.iter().find(|&&v| v >= z_off.vocab) {
            return Err(Error::BadToken {
                token: tok,
                vocab: z_off.vocab,
            });
        }
    }
    let weights = cell_weights(z_off);
    let blank = z_off.blank_id;
    let half = T::of(0.5);
    let mut grad_offline = vec![T::zero(); z_off.z.len()];
    let mut grad_streaming = vec![T::zero(); z_str.z.len()];
    let mut loss = T::zero();
    let mut cells = 0;
    for b in 0..z_off.batch {
        let w = weights[b];
        let mut utt = T::zero();
        for t in 0..z_off.t_len[b] {
            for u in 0..=z_off.u_len[b] {
                let target = targets[b].get(u).copied();
                let (zo, zs) = (z_off.cell(b, t, u), z_str.cell(b, t, u));
                let (lp3, n) = collapse(zo, blank, target);
                let (lq3, _) = collapse(zs, blank, target);
                let (lp, lq) = (&lp3[..n], &lq3[..n]);
                let kl_pq = class_kl(lp, lq);
                let kl_qp = class_kl(lq, lp);
                utt += combine(cfg.direction, kl_pq, kl_qp);

                let off = z_off.offset(b, t, u);
                let lse_o = tiled_lse(zo, zo.len());
                let lse_s = tiled_lse(zs, zs.len());
                for v in 0..z_off.vocab {
                    let c = class_of(v, blank, target);
                    let (pv, qv) = ((zo[v] - lse_o).exp(), (zs[v] - lse_s).exp());
                    // student grad: q_v (1 − P_c/Q_c); teacher (full grad): p_v (LP_c − LQ_c − KL)
                    let ratio_pq = if lq[c] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (lp[c] - lq[c]).exp()
                    };
                    let ratio_qp = if lp[c] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (lq[c] - lp[c]).exp()
                    };
                    let stu_str = qv * (T::one() - ratio_pq);
                    let stu_off = pv * (T::one() - ratio_qp);
                    let dlog = if lp[c] == T::neg_infinity() || lq[c] == T::neg_infinity() {
                        T::zero()
                    } else {
                        lp[c] - lq[c]
                    };
                    let tea_off = pv * (dlog - kl_pq);
                    let tea_str = qv * (-dlog - kl_qp);
                    let full = if cfg.full_grad { T::one() } else { T::zero() };
                    let (g_o, g_s) = match cfg.direction {
                        Direction::OfflineTeacher => (full * tea_off, stu_str),
                        Direction::StreamingTeacher => (stu_off, full * tea_str),
                        Direction::Symmetric => (
                            half * (stu_off + full * tea_off),
                            half * (stu_str + full * tea_str),
                        ),
                    };
                    grad_offline[off + v] += w * g_o;
                    grad_streaming[off + v] += w * g_s;
                }
            }
        }
        cells += z_off.valid_cells(b);
        loss += utt * w;
    }
    Ok(MCRResult {
        loss,
        grad_offline,
        grad_streaming,
        cells,
    })
}

/// Reference path: materializes the full log-softmax of both lattices.
/// Only the full-joint variant is supported.
pub fn mcr_naive_oracle<T: Real>(
    z_off: &JointLogits<T>,
    z_str: &JointLogits<T>,
    cfg: &MCRConfig,
) -> Result<MCRResult<T>> {
    let mut grad_offline = vec![T::zero(); z_off.z.len()];
    let mut grad_streaming = vec![T::zero(); z_str.z.len()];
    let (loss, cells) = mcr_naive_into(z_off, z_str, cfg, &mut grad_offline, &mut grad_streaming)?;
    Ok(MCRResult {
        loss,
        grad_offline,
        grad_streaming,
        cells,
    })
}

fn mcr_naive_into<T: Real>(
    z_off: &JointLogits<T>,
    z_str: &JointLogits<T>,
    cfg: &MCRConfig,
    grad_offline: &mut [T],
    grad_streaming: &mut [T],
) -> Result<(T, usize)> {
    check_pair(z_off, z_str)?;
    cfg.validate()?;
    let v = z_off.vocab;
    let log_softmax_all = |z: &JointLogits<T>| -> Vec<T> {
        let mut out = vec![T::zero(); z.z.len()];
        for (src, dst) in z.z.chunks(v).zip(out.chunks_mut(v)) {
            let m = src.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = src.iter().map(|&x| (x - m).exp()).sum();
            let l = m + s.ln();
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = x - l;
            }
        }
        out
    };
    let lp_all = log_softmax_all(z_off);
    let lq_all = log_softmax_all(z_str);
    let weights = cell_weights(z_off);
    let half = T::of(0.5);
    let mut loss = T::zero();
    let mut cells = 0;
    for b in 0..z_off.batch {
        let w = weights[b];
        let mut utt = T::zero();
        for t in 0..z_off.t_len[b] {
            for u in 0..=z_off.u_len[b] {
                let off = z_off.offset(b, t, u);
                let lp = &lp_all[off..off + v];
                let lq = &lq_all[off..off + v];
                let mut kl_pq = T::zero();
                let mut kl_qp = T::zero();
                for i in 0..v {
                    let (p, q) = (lp[i].exp(), lq[i].exp());
                    kl_pq += p * (lp[i] - lq[i]) - p + q;
                    kl_qp += q * (lq[i] - lp[i]) - q + p;
                }
                let (kl_pq, kl_qp) = (kl_pq.max(T::zero()), kl_qp.max(T::zero()));
                utt += combine(cfg.direction, kl_pq, kl_qp);
                let full = if cfg.full_grad { T::one() } else { T::zero() };
                for i in 0..v {
                    let (p, q) = (lp[i].exp(), lq[i].exp());
                    let tea_off = full * p * (lp[i] - lq[i] - kl_pq);
                    let tea_str = full * q * (lq[i] - lp[i] - kl_qp);
                    let (g_o, g_s) = match cfg.direction {
                        Direction::OfflineTeacher => (tea_off, q - p),
                        Direction::StreamingTeacher => (p - q, tea_str),
                        Direction::Symmetric => (half * (p - q + tea_off), half * (q - p + tea_str)),
                    };
                    grad_offline[off + i] += w * g_o;
                    grad_streaming[off + i] += w * g_s;
                }
            }
        }
        cells += z_off.valid_cells(b);
        loss += utt * w;
    }
    Ok((loss, cells))
}

#[derive(Clone, Debug, Serialize)]
pub struct MemoryReport {
    pub shape: [usize; 4],
    pub tile: usize,
    pub aux_bytes_fused: usize,
    pub aux_bytes_naive: usize,
    pub ratio: f64,
    pub wall_ms_fused: f64,
    pub wall_ms_naive: f64,
    pub loss_fused: f64,
    pub loss_naive: f64,
}

/// Runs the fused and naive paths (64-bit) on random logits of shape
/// `[B, T, U, V]` (lattice `U+1`) and reports peak auxiliary heap use:
/// everything allocated beyond the inputs and the gradient outputs.
pub fn mcr_memory_probe(shape: [usize; 4], tile: usize, seed: u64) -> Result<MemoryReport> {
    let [bsz, t, u, v] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = bsz * t * (u + 1) * v;
    let mut gen = || -> Vec<f64> { (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect() };
    let z_off = JointLogits::new(gen(), [bsz, t, u + 1, v], vec![t; bsz], vec![u; bsz])?;
    let z_str = JointLogits::new(gen(), [bsz, t, u + 1, v], vec![t; bsz], vec![u; bsz])?;
    let cfg = MCRConfig {
        tile,
        ..MCRConfig::default()
    };
    let mut g_off = vec![0f64; n];
    let mut g_str = vec![0f64; n];

    let start = Instant::now();
    let (fused, aux_fused) = measure_peak(|| -> Result<f64> {
        let (loss, _) = mcr_forward(&z_off, &z_str, &cfg)?;
        mcr_backward_into(&z_off, &z_str, &cfg, 1.0, &mut g_off, &mut g_str)?;
        Ok(loss)
    });
    let wall_fused = start.elapsed().as_secs_f64() * 1e3;
    let loss_fused = fused?;

    g_off.iter_mut().for_each(|x| *x = 0.0);
    g_str.iter_mut().for_each(|x| *x = 0.0);
    let start = Instant::now();
    let (naive, aux_naive) = measure_peak(|| mcr_naive_into(&z_off, &z_str, &cfg, &mut g_off, &mut g_str));
    let wall_naive = start.elapsed().as_secs_f64() * 1e3;
    let (loss_naive, _) = naive?;

    Ok(MemoryReport {
        shape,
        tile,
        aux_bytes_fused: aux_fused,
        aux_bytes_naive: aux_naive,
        ratio: if aux_naive == 0 {
            0.0
        } else {
            aux_fused as f64 / aux_naive as f64
        },
        wall_ms_fused: wall_fused,
        wall_ms_naive: wall_naive,
        loss_fused,
        loss_naive,
    })
}
