//! Unified training: single-mode (one sampled mode per step) and dual-mode
//! (both modes on the same batch, optionally with mode-consistency
//! regularization), AdamW, cosine schedule, and gradient clipping.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{sample_context, ContextSets, ContextSpec, ConvRightMode};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::lattice::{rnnt_loss, JointLogits, RnntOutput};
use crate::mcr::{mcr_backward_into, mcr_forward, mcr_three_class, MCRConfig, Variant};
use crate::model::{Bound, ModeSelector, Model};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SingleMode,
    DualMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeWeights {
    /// Offline weight in dual-mode.
    pub alpha: f64,
    /// Offline probability in single-mode.
    pub p_off: f64,
}

impl Default for ModeWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            p_off: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub mode_weights: ModeWeights,
    pub mcr: MCRConfig,
    pub context_sets: ContextSets,
    pub conv_right_mode: ConvRightMode,
    pub steps: u64,
    pub warmup_steps: u64,
    pub max_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::DualMode,
            mode_weights: ModeWeights::default(),
            mcr: MCRConfig::default(),
            context_sets: ContextSets::default(),
            conv_right_mode: ConvRightMode::Real,
            steps: 2000,
            warmup_steps: 200,
            max_lr: 3e-3,
            min_lr: 1e-4,
            batch_size: 8,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.mode_weights.alpha) || !unit(self.mode_weights.p_off) {
            return bad("alpha and p_off must lie in [0, 1]".into());
        }
        if self.warmup_steps > self.steps {
            return bad(format!("warmup_steps {} > steps {}", self.warmup_steps, self.steps));
        }
        if !(self.max_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.max_lr {
            return bad("need max_lr > 0 and 0 <= min_lr <= max_lr".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0".into());
        }
        self.mcr.validate()?;
        self.context_sets.validate()
    }
}

/// Warmup then cosine decay; steps count from 1.
pub fn cosine_lr(step: u64, cfg: &TrainConfig) -> f64 {
    if step > cfg.steps {
        return cfg.min_lr;
    }
    if step <= cfg.warmup_steps {
        return cfg.max_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-tensor: whether weight decay applies.
    pub decay: Vec<bool>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &[Tensor<T>], decay: Vec<bool>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        assert_eq!(decay.len(), params.len());
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Matrices decay, vectors (biases, norms) do not.
    pub fn for_model(model: &Model<T>, cfg: &TrainConfig) -> Self {
        let decay = model.params().iter().map(|p| p.shape.len() >= 2 && p.shape[0] > 1).collect();
        Self::new(model.params(), decay, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t, eps, lrt) = (T::of(b1), T::of(b2), T::of(self.eps), T::of(lr));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if self.decay[i] {
                T::of(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1t * m[j] + (T::one() - b1t) * gj;
                v[j] = b2t * v[j] + (T::one() - b2t) * gj * gj;
                let mhat = m[j] / T::of(c1);
                let vhat = v[j] / T::of(c2);
                p.data[j] = p.data[j] * shrink - lrt * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` in place to global norm `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in &mut g.data {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// `offline`, `streaming` or `dual`.
    pub mode: String,
    pub spec: Option<ContextSpec>,
    pub loss: f64,
    pub loss_off: Option<f64>,
    pub loss_str: Option<f64>,
    pub loss_mcr: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Per-step random stream; resuming at step `s` replays the same draws.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

struct UttOut<T> {
    off: Option<f64>,
    str_: Option<f64>,
    mcr: Option<f64>,
    grads: Vec<Tensor<T>>,
}

/// What one step computes for each utterance.
#[derive(Clone, Copy, Debug)]
enum Plan {
    Single(ModeSelector),
    Dual { streaming: ModeSelector, alpha: f64 },
}

type ModeOut<T> = (Var, JointLogits<T>, RnntOutput<T>);

#[allow(clippy::too_many_arguments)]
fn mode_lattice<'a, T: Real>(
    model: &'a Model<T>,
    tape: &mut Tape<'a, T>,
    p: &Bound,
    feats: Var,
    pred: Var,
    mode: &ModeSelector,
    targets: &[Vec<usize>],
) -> Result<ModeOut<T>> {
    let enc = model.encode_on(tape, p, feats, mode, 0)?;
    let z = model.joint_on(tape, p, enc, pred);
    let t = tape.value(enc).rows();
    let lat = JointLogits::single(tape.value(z).data.clone(), t, targets[0].len(), model.cfg.vocab_size)?;
    let out = rnnt_loss(&lat, targets)?;
    Ok((z, lat, out))
}

fn scaled<T: Real>(g: Vec<T>, w: f64) -> Vec<T> {
    let s = T::of(w);
    g.into_iter().map(|x| x * s).collect()
}

fn utterance_grads<T: Real>(
    model: &Model<T>,
    utt: &Utterance,
    plan: Plan,
    mcr: &MCRConfig,
    inv_batch: f64,
) -> Result<UttOut<T>> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let feats = tape.leaf(utt.features.cast::<T>());
    let pred = model.predict_on(&mut tape, &p, &utt.tokens)?;
    let targets = [utt.tokens.clone()];
    let mut out = UttOut {
        off: None,
        str_: None,
        mcr: None,
        grads: Vec::new(),
    };
    let seeds: Vec<(Var, Vec<T>)> = match plan {
        Plan::Single(mode) => {
            let (z, _, r) = mode_lattice(model, &mut tape, &p, feats, pred, &mode, &targets)?;
            let loss = r.loss[0].as_f64();
            match mode {
                ModeSelector::Offline => out.off = Some(loss),
                ModeSelector::Streaming { .. } => out.str_ = Some(loss),
            }
            vec![(z, scaled(r.grad, inv_batch))]
        }
        Plan::Dual { streaming, alpha } => {
            let (z_off, lat_off, r_off) =
                mode_lattice(model, &mut tape, &p, feats, pred, &ModeSelector::Offline, &targets)?;
            let (z_str, lat_str, r_str) =
                mode_lattice(model, &mut tape, &p, feats, pred, &streaming, &targets)?;
            out.off = Some(r_off.loss[0].as_f64());
            out.str_ = Some(r_str.loss[0].as_f64());
            let mut g_off = scaled(r_off.grad, alpha * inv_batch);
            let mut g_str = scaled(r_str.grad, (1.0 - alpha) * inv_batch);
            let scale = T::of(mcr.lambda * inv_batch);
            match mcr.variant {
                Variant::FullJoint => {
                    out.mcr = Some(mcr_forward(&lat_off, &lat_str, mcr)?.0.as_f64());
                    if mcr.lambda > 0.0 {
                        mcr_backward_into(&lat_off, &lat_str, mcr, scale, &mut g_off, &mut g_str)?;
                    }
                }
                Variant::ThreeClass => {
                    let r = mcr_three_class(&lat_off, &lat_str, &targets, mcr)?;
                    out.mcr = Some(r.loss.as_f64());
                    for (a, b) in g_off.iter_mut().zip(&r.grad_offline) {
                        *a += scale * *b;
                    }
                    for (a, b) in g_str.iter_mut().zip(&r.grad_streaming) {
                        *a += scale * *b;
                    }
                }
            }
            vec![(z_off, g_off), (z_str, g_str)]
        }
    };
    let seeds = seeds
        .into_iter()
        .map(|(z, g)| (z, Tensor::new(tape.value(z).shape.clone(), g)))
        .collect();
    let grads = tape.backward(seeds);
    out.grads = model.collect_grads(&p, &grads);
    Ok(out)
}

/// Gradients of one step's objective, summed over the batch in a fixed order.
pub struct StepGrads<T> {
    pub report: StepReport,
    pub grads: Vec<Tensor<T>>,
}

fn mean(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    (v.len() == xs.len() && !v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn run_plan<T: Real>(
    model: &Model<T>,
    batch: &[&Utterance],
    plan: Plan,
    cfg: &TrainConfig,
) -> Result<StepGrads<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / batch.len() as f64;
    let outs: Vec<UttOut<T>> = batch
        .par_iter()
        .map(|u| utterance_grads(model, u, plan, &cfg.mcr, inv))
        .collect::<Result<_>>()?;
    let mut grads: Vec<Tensor<T>> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape.clone()))
        .collect();
    for o in &outs {
        for (acc, g) in grads.iter_mut().zip(&o.grads) {
            for (a, &b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
    }
    let off = mean(&outs.iter().map(|o| o.off).collect::<Vec<_>>());
    let str_ = mean(&outs.iter().map(|o| o.str_).collect::<Vec<_>>());
    let mcr = mean(&outs.iter().map(|o| o.mcr).collect::<Vec<_>>());
    let (mode, spec, loss) = match plan {
        Plan::Single(ModeSelector::Offline) => ("offline", None, off.unwrap_or(f64::NAN)),
        Plan::Single(ModeSelector::Streaming { spec, .. }) => {
            ("streaming", Some(spec), str_.unwrap_or(f64::NAN))
        }
        Plan::Dual { streaming, alpha } => {
            let spec = match streaming {
                ModeSelector::Streaming { spec, .. } => Some(spec),
                ModeSelector::Offline => None,
            };
            let total = alpha * off.unwrap_or(f64::NAN)
                + (1.0 - alpha) * str_.unwrap_or(f64::NAN)
                + cfg.mcr.lambda * mcr.unwrap_or(f64::NAN);
            ("dual", spec, total)
        }
    };
    Ok(StepGrads {
        report: StepReport {
            step: 0,
            lr: 0.0,
            mode: mode.into(),
            spec,
            loss,
            loss_off: off,
            loss_str: str_,
            loss_mcr: mcr,
            grad_norm: 0.0,
            wall_ms: 0.0,
        },
        grads,
    })
}

fn streaming_mode<R: Rng + ?Sized>(rng: &mut R, cfg: &TrainConfig) -> Result<ModeSelector> {
    Ok(ModeSelector::streaming(sample_context(&cfg.context_sets, rng)?, cfg.conv_right_mode))
}

/// Draws the single-mode mode: offline with probability `p_off`.
pub fn draw_mode<R: Rng + ?Sized>(rng: &mut R, cfg: &TrainConfig) -> Result<ModeSelector> {
    if rng.gen::<f64>() < cfg.mode_weights.p_off {
        Ok(ModeSelector::Offline)
    } else {
        streaming_mode(rng, cfg)
    }
}

/// Single-mode objective gradients (no update).
pub fn sm_gradients<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    batch: &[&Utterance],
    rng: &mut R,
    cfg: &TrainConfig,
) -> Result<StepGrads<T>> {
    let mode = draw_mode(rng, cfg)?;
    run_plan(model, batch, Plan::Single(mode), cfg)
}

/// Dual-mode objective gradients (no update). `streaming` overrides the
/// sampled streaming context.
pub fn dm_gradients<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    batch: &[&Utterance],
    rng: &mut R,
    cfg: &TrainConfig,
    streaming: Option<ModeSelector>,
) -> Result<StepGrads<T>> {
    let streaming = match streaming {
        Some(m) => m,
        None => streaming_mode(rng, cfg)?,
    };
    run_plan(
        model,
        batch,
        Plan::Dual {
            streaming,
            alpha: cfg.mode_weights.alpha,
        },
        cfg,
    )
}

fn apply<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    mut sg: StepGrads<T>,
    cfg: &TrainConfig,
    step: u64,
    started: Instant,
) -> Result<StepReport> {
    let r = &sg.report;
    for (name, v) in [("loss", Some(r.loss)), ("offline", r.loss_off), ("streaming", r.loss_str), ("mcr", r.loss_mcr)] {
        if let Some(x) = v {
            if !x.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    detail: format!("{name} loss is {x}"),
                });
            }
        }
    }
    let norm = clip_global_norm(&mut sg.grads, cfg.clip_norm);
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: step as usize,
            detail: format!("gradient norm is {norm}"),
        });
    }
    let lr = cosine_lr(step, cfg);
    opt.step(model.params_mut(), &sg.grads, lr);
    let mut report = sg.report;
    report.step = step;
    report.lr = lr;
    report.grad_norm = norm;
    report.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

pub fn train_step_sm<T: Real, R: Rng + ?Sized>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &[&Utterance],
    rng: &mut R,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    if cfg.strategy != Strategy::SingleMode {
        return Err(Error::Config("train_step_sm needs strategy single_mode".into()));
    }
    let started = Instant::now();
    let sg = sm_gradients(model, batch, rng, cfg)?;
    apply(model, opt, sg, cfg, step, started)
}

pub fn train_step_dm<T: Real, R: Rng + ?Sized>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &[&Utterance],
    rng: &mut R,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    if cfg.strategy != Strategy::DualMode {
        return Err(Error::Config("train_step_dm needs strategy dual_mode".into()));
    }
    let started = Instant::now();
    let sg = dm_gradients(model, batch, rng, cfg, None)?;
    apply(model, opt, sg, cfg, step, started)
}

/// Owns the model, optimizer and step counter of one run.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    /// Steps completed so far.
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::for_model(&model, &cfg);
        Ok(Self {
            model,
            opt,
            cfg,
            step: 0,
        })
    }

    /// Runs step `self.step + 1` on a batch drawn from `data`.
    pub fn step_once(&mut self, data: &[Utterance]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let step = self.step + 1;
        let mut rng = step_rng(self.cfg.seed, step);
        let batch: Vec<&Utterance> = (0..self.cfg.batch_size)
            .map(|_| &data[rng.gen_range(0..data.len())])
            .collect();
        let report = match self.cfg.strategy {
            Strategy::SingleMode => {
                train_step_sm(&mut self.model, &mut self.opt, &batch, &mut rng, &self.cfg, step)?
            }
            Strategy::DualMode => {
                train_step_dm(&mut self.model, &mut self.opt, &batch, &mut rng, &self.cfg, step)?
            }
        };
        self.step = step;
        Ok(report)
    }

    /// Trains until `cfg.steps`, writing one JSON line per step to `log`.
    pub fn run(
        &mut self,
        data: &[Utterance],
        mut log: Option<&mut dyn Write>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            let r = self.step_once(data)?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&r).expect("reports serialize");
                writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
            }
            on_step(&r);
        }
        Ok(())
    }
}

const OPT_MAGIC: &[u8; 8] = b"URNNTOP\x01";

/// Optimizer moments and step count as little-endian f32 / u64.
pub fn save_optimizer<T: Real>(opt: &AdamW<T>, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(OPT_MAGIC);
    buf.extend_from_slice(&opt.t.to_le_bytes());
    for t in opt.m.iter().chain(&opt.v) {
        for &x in &t.data {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_optimizer<T: Real>(opt: &mut AdamW<T>, path: &std::path::Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = opt.m.iter().map(Tensor::len).sum();
    if bytes.len() != 16 + 8 * n || &bytes[..8] != OPT_MAGIC {
        return Err(Error::CorruptCheckpoint(format!("{}: optimizer state", path.display())));
    }
    opt.t = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let mut it = bytes[16..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64));
    for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        for x in &mut t.data {
            *x = it.next().expect("length checked");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_examples() {
        let cfg = TrainConfig {
            steps: 1000,
            warmup_steps: 100,
            max_lr: 1e-3,
            min_lr: 1e-5,
            ..TrainConfig::default()
        };
        assert!((cosine_lr(1, &cfg) - 1e-5).abs() < 1e-18);
        assert_eq!(cosine_lr(100, &cfg), 1e-3);
        assert!((cosine_lr(1000, &cfg) - 1e-5).abs() < 1e-15);
        assert!((cosine_lr(550, &cfg) - (1e-3 + 1e-5) / 2.0).abs() < 1e-12);
        assert_eq!(cosine_lr(5000, &cfg), 1e-5);
    }

    #[test]
    fn adamw_matches_hand_rolled_reference() {
        let mut p = vec![Tensor::new(vec![3], vec![0.5f64, -1.0, 2.0])];
        let mut opt = AdamW::new(&p, vec![true], 0.9, 0.999, 1e-8, 0.01);
        let (mut x, mut m, mut v) = ([0.5f64, -1.0, 2.0], [0.0f64; 3], [0.0f64; 3]);
        for t in 1..=5 {
            // gradient of Σ x_i² + x_0 x_1
            let g = [2.0 * x[0] + x[1], 2.0 * x[1] + x[0], 2.0 * x[2]];
            let lr = 0.1 / t as f64;
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                x[i] = x[i] * (1.0 - lr * 0.01) - lr * mh / (vh.sqrt() + 1e-8);
            }
            let d = &p[0].data;
            let gt = Tensor::new(vec![3], vec![2.0 * d[0] + d[1], 2.0 * d[1] + d[0], 2.0 * d[2]]);
            opt.step(&mut p, &[gt], lr);
            for i in 0..3 {
                assert!((p[0].data[i] - x[i]).abs() <= 1e-12, "step {t} coord {i}");
            }
        }
    }

    #[test]
    fn clipping_rescales_to_the_bound() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f64, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data[0] - 0.6).abs() < 1e-15 && (g[0].data[1] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::new(vec![1], vec![0.5f64])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data, vec![0.5]);
    }

    #[test]
    fn mode_draws() {
        let only_off = TrainConfig {
            mode_weights: ModeWeights { alpha: 0.5, p_off: 1.0 },
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            assert_eq!(draw_mode(&mut rng, &only_off).unwrap(), ModeSelector::Offline);
        }
        let half = TrainConfig::default();
        let seq = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| draw_mode(&mut r, &half).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(seq(3), seq(3));
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let off = (0..10_000)
            .filter(|_| draw_mode(&mut r, &half).unwrap() == ModeSelector::Offline)
            .count() as i64;
        assert!((off - 5000).abs() <= 350, "{off}");
    }
}
