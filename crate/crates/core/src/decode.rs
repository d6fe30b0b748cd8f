//! Greedy transducer decoding (offline and chunked streaming) and token
//! error rate.

use std::ops::Range;

use serde::Serialize;

use crate::context::{latency_of, ContextSpec, ConvRightMode};
use crate::error::{Error, Result};
use crate::lattice::BLANK_ID;
use crate::model::{ModeSelector, Model};
use crate::numerics::{Real, Tensor};

pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Encoder frame at which each token was emitted.
    pub emit_frame: Vec<usize>,
    pub worst_case_latency_s: f64,
    /// Encoder invocations (1 offline, one per chunk when streaming).
    pub steps: usize,
    /// Encoder-frame windows `[start, end)` re-encoded at each step.
    pub windows: Vec<(usize, usize)>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Decoder state carried across frames and chunks.
#[derive(Clone, Debug)]
pub struct Greedy<S> {
    pub state: S,
    pub tokens: Vec<usize>,
    pub emit_frame: Vec<usize>,
    pub max_symbols_per_frame: usize,
}

impl<S> Greedy<S> {
    pub fn new(state: S) -> Self {
        Self {
            state,
            tokens: Vec::new(),
            emit_frame: Vec::new(),
            max_symbols_per_frame: MAX_SYMBOLS_PER_FRAME,
        }
    }

    /// Runs the greedy rule over `frames`. `score(t, state)` returns the
    /// joint logits at frame `t`; `advance(token, state)` feeds a non-blank
    /// token to the predictor.
    pub fn run<T: Real>(
        &mut self,
        frames: Range<usize>,
        mut score: impl FnMut(usize, &S) -> Result<Vec<T>>,
        mut advance: impl FnMut(usize, &S) -> Result<S>,
    ) -> Result<()> {
        for t in frames {
            let mut emitted = 0;
            while emitted < self.max_symbols_per_frame {
                let k = argmax(&score(t, &self.state)?);
                if k == BLANK_ID {
                    break;
                }
                self.state = advance(k, &self.state)?;
                self.tokens.push(k);
                self.emit_frame.push(t);
                emitted += 1;
            }
        }
        Ok(())
    }
}

/// Predictor state paired with its joint projection.
#[derive(Clone, Debug)]
struct PredState<T: Real> {
    h: Tensor<T>,
    proj: Tensor<T>,
}

impl<T: Real> PredState<T> {
    fn new(model: &Model<T>, h: Tensor<T>) -> Self {
        let proj = model.joint_pred_proj(&h);
        Self { h, proj }
    }
}

fn model_greedy<T: Real>(model: &Model<T>, max_symbols: usize) -> Greedy<PredState<T>> {
    let mut g = Greedy::new(PredState::new(model, model.start_state()));
    g.max_symbols_per_frame = max_symbols;
    g
}

fn run_frames<T: Real>(
    model: &Model<T>,
    g: &mut Greedy<PredState<T>>,
    enc_proj: &Tensor<T>,
    first_frame: usize,
) -> Result<()> {
    let n = enc_proj.rows();
    g.run(
        first_frame..first_frame + n,
        |t, s| Ok(model.joint_cell(enc_proj.row(t - first_frame), &s.proj.data)),
        |k, s| Ok(PredState::new(model, model.predict(k, &s.h)?)),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamingOptions {
    pub conv_right_mode: ConvRightMode,
    /// Extra encoder frames re-encoded left of `s − L`.
    pub extra_left_margin: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for StreamingOptions {
    fn default() -> Self {
        Self {
            conv_right_mode: ConvRightMode::Real,
            extra_left_margin: 0,
            max_symbols_per_frame: MAX_SYMBOLS_PER_FRAME,
        }
    }
}

pub fn greedy_decode_offline<T: Real>(
    model: &Model<T>,
    features: &Tensor<T>,
    frame_ms: f64,
) -> Result<DecodeResult> {
    let enc = model.encode(features, &ModeSelector::Offline)?;
    let mut g = model_greedy(model, MAX_SYMBOLS_PER_FRAME);
    run_frames(model, &mut g, &model.joint_enc_proj(&enc), 0)?;
    let t = enc.rows();
    Ok(DecodeResult {
        tokens: g.tokens,
        emit_frame: g.emit_frame,
        worst_case_latency_s: t as f64 * frame_ms / 1000.0,
        steps: 1,
        windows: vec![(0, t)],
    })
}

pub fn greedy_decode_streaming<T: Real>(
    model: &Model<T>,
    features: &Tensor<T>,
    spec: &ContextSpec,
    frame_ms: f64,
) -> Result<DecodeResult> {
    greedy_decode_streaming_with(model, features, spec, frame_ms, &StreamingOptions::default())
}

/// Encoder-frame windows `(window, kept)` visited by chunked decoding.
pub fn streaming_windows(
    t: usize,
    spec: &ContextSpec,
    extra_left_margin: usize,
) -> Vec<(Range<usize>, Range<usize>)> {
    (0..t)
        .step_by(spec.chunk)
        .map(|s| {
            let a = s.saturating_sub(spec.left + extra_left_margin);
            let b = (s + spec.chunk + spec.right).min(t);
            (a..b, s..(s + spec.chunk).min(t))
        })
        .collect()
}

/// Re-encodes each chunk's window from a buffer truncated at the window end
/// (no cache between steps) and continues the greedy loop on the kept frames.
pub fn greedy_decode_streaming_with<T: Real>(
    model: &Model<T>,
    features: &Tensor<T>,
    spec: &ContextSpec,
    frame_ms: f64,
    opts: &StreamingOptions,
) -> Result<DecodeResult> {
    spec.validate()?;
    let sub = model.cfg.subsample_factor;
    let f = model.cfg.feat_dim;
    let t_in = features.rows();
    if t_in < sub {
        return Err(Error::InputTooShort {
            frames: t_in,
            needed: sub,
        });
    }
    let t = t_in / sub;
    let mode = ModeSelector::streaming(*spec, opts.conv_right_mode);
    let mut g = model_greedy(model, opts.max_symbols_per_frame);
    let mut windows = Vec::new();
    for (win, keep) in streaming_windows(t, spec, opts.extra_left_margin) {
        let buf = Tensor::new(
            vec![(win.end - win.start) * sub, f],
            features.data[win.start * sub * f..win.end * sub * f].to_vec(),
        );
        let enc = model.encode_at(&buf, &mode, win.start)?;
        let rows = keep.start - win.start..keep.end - win.start;
        let kept = Tensor::new(
            vec![rows.len(), enc.cols()],
            enc.data[rows.start * enc.cols()..rows.end * enc.cols()].to_vec(),
        );
        run_frames(model, &mut g, &model.joint_enc_proj(&kept), keep.start)?;
        windows.push((win.start, win.end));
    }
    Ok(DecodeResult {
        tokens: g.tokens,
        emit_frame: g.emit_frame,
        worst_case_latency_s: latency_of(spec, frame_ms),
        steps: windows.len(),
        windows,
    })
}

/// Unit-cost edit distance.
pub fn levenshtein<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(hyp, ref) / max(1, |ref|)`.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    levenshtein(hyp, reference) as f64 / reference.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rigged(
        frames: usize,
        score: impl Fn(usize, usize) -> Vec<f64>,
    ) -> Greedy<usize> {
        // state = number of tokens emitted so far
        let mut g = Greedy::new(0usize);
        g.run(0..frames, |t, s| Ok(score(t, *s)), |_, s| Ok(s + 1)).unwrap();
        g
    }

    #[test]
    fn always_blank_emits_nothing() {
        let g = rigged(5, |_, _| vec![2.0, 1.0, 1.0]);
        assert!(g.tokens.is_empty() && g.emit_frame.is_empty());
    }

    #[test]
    fn single_token_then_blank() {
        let g = rigged(4, |t, s| {
            if t == 0 && s == 0 {
                vec![0.0, 0.0, 3.0]
            } else {
                vec![1.0, 0.0, 0.0]
            }
        });
        assert_eq!(g.tokens, vec![2]);
        assert_eq!(g.emit_frame, vec![0]);
    }

    #[test]
    fn symbol_cap_fires_every_frame() {
        let g = rigged(3, |_, _| vec![0.0, 5.0]);
        assert_eq!(g.tokens.len(), 3 * MAX_SYMBOLS_PER_FRAME);
        for t in 0..3 {
            assert_eq!(g.emit_frame.iter().filter(|&&f| f == t).count(), MAX_SYMBOLS_PER_FRAME);
        }
    }

    #[test]
    fn ties_break_to_lowest_id() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        let g = rigged(1, |_, s| if s == 0 { vec![0.0, 1.0, 1.0] } else { vec![1.0, 0.0, 0.0] });
        assert_eq!(g.tokens, vec![1]);
    }

    #[test]
    fn window_arithmetic() {
        let w = streaming_windows(6, &ContextSpec::new(2, 2, 1).unwrap(), 0);
        let wins: Vec<_> = w.iter().map(|(a, _)| (a.start, a.end)).collect();
        assert_eq!(wins, vec![(0, 3), (0, 5), (2, 6)]);
        let kept: Vec<_> = w.iter().map(|(_, k)| (k.start, k.end)).collect();
        assert_eq!(kept, vec![(0, 2), (2, 4), (4, 6)]);
    }

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]), 0.0);
        assert!((token_error_rate(&[1, 3], &[1, 2, 3]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_error_rate(&[4], &[]), 1.0);
        assert_eq!(levenshtein(&[1, 2, 3, 4], &[2, 3, 5]), 2);
    }
}
