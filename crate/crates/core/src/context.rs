//! Context restriction for streaming: `(L, C, R)` specs, chunked attention
//! masks, training-time context sampling, and dynamic chunk convolution plans.
//!
//! All frame counts are encoder frames (after subsampling). Chunk boundaries
//! sit at absolute multiples of `C`; functions taking an `offset` operate on
//! a window whose first frame is absolute frame `offset`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{depthwise_conv1d, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextSpec {
    pub left: usize,
    pub chunk: usize,
    pub right: usize,
}

impl ContextSpec {
    pub fn new(left: usize, chunk: usize, right: usize) -> Result<Self> {
        let s = Self { left, chunk, right };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(Error::InvalidContext("chunk size must be >= 1".into()));
        }
        Ok(())
    }

    /// Spec that sees the whole of any sequence up to `t` frames.
    pub fn full(t: usize) -> Self {
        Self {
            left: t,
            chunk: t.max(1),
            right: t,
        }
    }

    /// Absolute chunk `[start, end)` containing frame `t` (end not clipped).
    pub fn chunk_bounds(&self, t: usize) -> (usize, usize) {
        let s = (t / self.chunk) * self.chunk;
        (s, s + self.chunk)
    }
}

impl fmt::Display for ContextSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{}]", self.left, self.chunk, self.right)
    }
}

/// Candidate left/chunk/right sizes; written as `[[L...],[C...],[R...]]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct ContextSets {
    pub left_set: Vec<usize>,
    pub chunk_set: Vec<usize>,
    pub right_set: Vec<usize>,
}

impl Default for ContextSets {
    fn default() -> Self {
        Self {
            left_set: vec![70],
            chunk_set: vec![1, 2, 7, 13],
            right_set: vec![0, 1, 2, 3, 5, 7, 13, 26],
        }
    }
}

impl TryFrom<Vec<Vec<usize>>> for ContextSets {
    type Error = Error;

    fn try_from(v: Vec<Vec<usize>>) -> Result<Self> {
        let [l, c, r]: [Vec<usize>; 3] = v.try_into().map_err(|v: Vec<Vec<usize>>| {
            Error::Config(format!("context sets need exactly 3 lists, got {}", v.len()))
        })?;
        let sets = Self {
            left_set: l,
            chunk_set: c,
            right_set: r,
        };
        sets.validate()?;
        Ok(sets)
    }
}

impl From<ContextSets> for Vec<Vec<usize>> {
    fn from(s: ContextSets) -> Self {
        vec![s.left_set, s.chunk_set, s.right_set]
    }
}

impl ContextSets {
    pub fn validate(&self) -> Result<()> {
        if self.left_set.is_empty() {
            return Err(Error::EmptyContextSet("left"));
        }
        if self.chunk_set.is_empty() {
            return Err(Error::EmptyContextSet("chunk"));
        }
        if self.right_set.is_empty() {
            return Err(Error::EmptyContextSet("right"));
        }
        if self.chunk_set.contains(&0) {
            return Err(Error::InvalidContext("chunk candidates must be >= 1".into()));
        }
        Ok(())
    }
}

/// Independent uniform draw of `L`, `C` and `R` from their candidate sets.
pub fn sample_context<R: Rng + ?Sized>(sets: &ContextSets, rng: &mut R) -> Result<ContextSpec> {
    sets.validate()?;
    let left = *sets.left_set.choose(rng).expect("validated");
    let chunk = *sets.chunk_set.choose(rng).expect("validated");
    let right = *sets.right_set.choose(rng).expect("validated");
    ContextSpec::new(left, chunk, right)
}

/// Visible key range `[lo, hi)` (window-local) for every query frame of a
/// window of `t` frames starting at absolute frame `offset`.
pub fn attention_ranges(t: usize, spec: &ContextSpec, offset: usize) -> Vec<(usize, usize)> {
    (0..t)
        .map(|i| {
            let (s, e) = spec.chunk_bounds(offset + i);
            let lo = s.saturating_sub(spec.left).max(offset) - offset;
            let hi = (e + spec.right).min(offset + t) - offset;
            (lo, hi)
        })
        .collect()
}

/// Boolean `[T, T]` mask: frame `t` in chunk `[s, e)` sees `[s − L, e + R)`.
pub fn build_attention_mask(t: usize, spec: &ContextSpec) -> Vec<bool> {
    build_attention_mask_at(t, spec, 0)
}

pub fn build_attention_mask_at(t: usize, spec: &ContextSpec, offset: usize) -> Vec<bool> {
    let mut mask = vec![false; t * t];
    for (i, (lo, hi)) in attention_ranges(t, spec, offset).into_iter().enumerate() {
        mask[i * t + lo..i * t + hi].fill(true);
    }
    mask
}

pub fn full_mask(t: usize) -> Vec<bool> {
    vec![true; t * t]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRightMode {
    /// Right halo reads real frames past the chunk end.
    Real,
    /// Right halo is zeroed at the chunk end.
    Zero,
    /// Right halo reads real frames up to the right-context boundary
    /// `chunk_end + R` and zeros beyond, so the convolution sees exactly what
    /// a chunked decoder has buffered.
    Lookahead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvWindow {
    pub window_start: isize,
    pub window_end: isize,
    pub keep_start: usize,
    pub keep_end: usize,
    pub right_mode: ConvRightMode,
    /// Exclusive bound of input frames the window may read.
    pub read_end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvChunkPlan {
    pub frames: usize,
    pub kernel: usize,
    pub windows: Vec<ConvWindow>,
}

pub fn plan_conv_chunks(
    t: usize,
    spec: &ContextSpec,
    kernel: usize,
    right_mode: ConvRightMode,
) -> Result<ConvChunkPlan> {
    plan_conv_chunks_at(t, spec, kernel, right_mode, 0)
}

/// Chunks of `spec.chunk` frames (aligned to absolute frame indices) covering
/// a window of `t` frames, each with a `(k−1)/2` halo on both sides.
pub fn plan_conv_chunks_at(
    t: usize,
    spec: &ContextSpec,
    kernel: usize,
    right_mode: ConvRightMode,
    offset: usize,
) -> Result<ConvChunkPlan> {
    if kernel % 2 == 0 {
        return Err(Error::EvenKernel(kernel));
    }
    spec.validate()?;
    let half = (kernel - 1) / 2;
    let mut windows = Vec::new();
    let mut start = 0;
    while start < t {
        let (_, abs_end) = spec.chunk_bounds(offset + start);
        let end = (abs_end - offset).min(t);
        let read_end = match right_mode {
            ConvRightMode::Real => end + half,
            ConvRightMode::Zero => end,
            ConvRightMode::Lookahead => end + half.min(spec.right),
        }
        .min(t);
        windows.push(ConvWindow {
            window_start: start as isize - half as isize,
            window_end: (end + half) as isize,
            keep_start: start,
            keep_end: end,
            right_mode,
            read_end,
        });
        start = end;
    }
    Ok(ConvChunkPlan {
        frames: t,
        kernel,
        windows,
    })
}

impl ConvChunkPlan {
    /// Per-output-frame visible input range for the depthwise conv kernel.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.frames);
        for w in &self.windows {
            let lo = w.window_start.max(0) as usize;
            out.extend(std::iter::repeat((lo, w.read_end)).take(w.keep_end - w.keep_start));
        }
        out
    }
}

/// Literal reading of a plan: cut each window out of `x` (zero rows outside
/// `[0, T)` and past the window's readable bound), convolve it with
/// same-padding, and keep the chunk's rows.
pub fn apply_conv_plan_windowed<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    plan: &ConvChunkPlan,
) -> Result<Tensor<T>> {
    let d = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for w in &plan.windows {
        let len = (w.window_end - w.window_start) as usize;
        let mut buf = vec![T::zero(); len * d];
        for (row, src) in (w.window_start..w.window_end).enumerate() {
            let readable = src >= 0 && (src as usize) < w.read_end;
            if readable {
                buf[row * d..(row + 1) * d].copy_from_slice(x.row(src as usize));
            }
        }
        let y = depthwise_conv1d(&Tensor::new(vec![len, d], buf), kernel)?;
        let first = (w.keep_start as isize - w.window_start) as usize;
        let n = w.keep_end - w.keep_start;
        out.extend_from_slice(&y.data[first * d..(first + n) * d]);
    }
    Ok(Tensor::new(vec![x.rows(), d], out))
}

/// For each encoder frame of a streaming forward through `blocks` stacked
/// attention+convolution blocks, the exclusive upper bound of encoder input
/// frames that can influence it. Right reach compounds across blocks, so this
/// equals `chunk_end + R` only for a single block in `zero` mode.
pub fn receptive_frontier(
    t: usize,
    spec: &ContextSpec,
    kernel: usize,
    right_mode: ConvRightMode,
    blocks: usize,
    offset: usize,
) -> Result<Vec<usize>> {
    let attn = attention_ranges(t, spec, offset);
    let conv = plan_conv_chunks_at(t, spec, kernel, right_mode, offset)?.ranges();
    let half = (kernel - 1) / 2;
    let mut reach: Vec<usize> = (1..=t).collect();
    let widest = |r: &[usize], lo: usize, hi: usize| r[lo..hi].iter().copied().max().unwrap_or(0);
    for _ in 0..blocks {
        let after_attn: Vec<usize> = attn
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| reach[i].max(widest(&reach, lo, hi)))
            .collect();
        reach = conv
            .iter()
            .enumerate()
            .map(|(i, &(lo, hi))| {
                let lo = lo.max(i.saturating_sub(half));
                let hi = hi.min(i + half + 1);
                after_attn[i].max(widest(&after_attn, lo, hi.max(lo)))
            })
            .collect();
    }
    Ok(reach)
}

/// Worst-case look-ahead latency `(C + R) · frame duration`, in seconds.
pub fn latency_of(spec: &ContextSpec, frame_ms: f64) -> f64 {
    (spec.chunk + spec.right) as f64 * frame_ms / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn visible(mask: &[bool], t: usize, row: usize) -> Vec<usize> {
        (0..t).filter(|&j| mask[row * t + j]).collect()
    }

    #[test]
    fn mask_example_t6_l2_c2_r1() {
        let m = build_attention_mask(6, &ContextSpec::new(2, 2, 1).unwrap());
        assert_eq!(visible(&m, 6, 3), vec![0, 1, 2, 3, 4]);
        assert_eq!(visible(&m, 6, 0), vec![0, 1, 2]);
    }

    #[test]
    fn full_and_identity_masks() {
        let t = 7;
        assert!(build_attention_mask(t, &ContextSpec::new(7, 7, 7).unwrap())
            .iter()
            .all(|&b| b));
        let id = build_attention_mask(t, &ContextSpec::new(0, 1, 0).unwrap());
        for i in 0..t {
            assert_eq!(visible(&id, t, i), vec![i]);
        }
    }

    #[test]
    fn conv_plan_example() {
        let p = plan_conv_chunks(6, &ContextSpec::new(0, 2, 0).unwrap(), 3, ConvRightMode::Real)
            .unwrap();
        let got: Vec<_> = p
            .windows
            .iter()
            .map(|w| (w.window_start, w.window_end, w.keep_start, w.keep_end))
            .collect();
        assert_eq!(got, vec![(-1, 3, 0, 2), (1, 5, 2, 4), (3, 7, 4, 6)]);
        assert!(matches!(
            plan_conv_chunks(6, &ContextSpec::new(0, 2, 0).unwrap(), 4, ConvRightMode::Real),
            Err(Error::EvenKernel(4))
        ));
    }

    #[test]
    fn zero_mode_differs_only_at_chunk_ends() {
        let x = Tensor::new(vec![4, 1], vec![1.0f64, 2.0, 3.0, 4.0]);
        let k = Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]);
        let plan =
            plan_conv_chunks(4, &ContextSpec::new(0, 2, 0).unwrap(), 3, ConvRightMode::Zero)
                .unwrap();
        let stream = apply_conv_plan_windowed(&x, &k, &plan).unwrap();
        let offline = depthwise_conv1d(&x, &k).unwrap();
        // offline (3, 6, 9, 7); chunk-final frames lose their right neighbour
        assert_eq!(offline.data, vec![3.0, 6.0, 9.0, 7.0]);
        assert_eq!(stream.data, vec![3.0, 3.0, 9.0, 7.0]);
    }

    #[test]
    fn latency_examples() {
        let l = |c, r| latency_of(&ContextSpec::new(70, c, r).unwrap(), 80.0);
        assert!((l(1, 4) - 0.40).abs() < 1e-12);
        assert!((l(13, 13) - 2.08).abs() < 1e-12);
        assert!((l(1, 0) - 0.08).abs() < 1e-12);
    }

    #[test]
    fn sampling_contracts() {
        let single = ContextSets {
            left_set: vec![70],
            chunk_set: vec![13],
            right_set: vec![13],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(
                sample_context(&single, &mut rng).unwrap(),
                ContextSpec::new(70, 13, 13).unwrap()
            );
        }
        let sets = ContextSets::default();
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_context(&sets, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        let empty = ContextSets {
            right_set: vec![],
            ..ContextSets::default()
        };
        assert!(matches!(
            sample_context(&empty, &mut rng),
            Err(Error::EmptyContextSet("right"))
        ));
    }

    #[test]
    fn default_sets_chunk_frequencies() {
        // binomial(10000, 1/4): mean 2500, sd ≈ 43.3, 5σ ≈ 217 > 200
        let sets = ContextSets::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..10_000 {
            *counts
                .entry(sample_context(&sets, &mut rng).unwrap().chunk)
                .or_insert(0usize) += 1;
        }
        for c in [1, 2, 7, 13] {
            let n = counts[&c] as i64;
            assert!((n - 2500).abs() <= 200, "chunk {c}: {n}");
        }
    }

    #[test]
    fn sets_parse_from_nested_arrays() {
        #[derive(Deserialize)]
        struct W {
            sets: ContextSets,
        }
        let w: W = toml::from_str("sets = [[70],[1,2,7,13],[0,1,2,3,5,7,13,26]]").unwrap();
        assert_eq!(w.sets, ContextSets::default());
        assert!(toml::from_str::<W>("sets = [[70],[1]]").is_err());
    }
}
