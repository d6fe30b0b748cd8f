//! Toy unified transducer: attention/convolution encoder blocks that accept
//! either an offline or a chunk-restricted context, a gated recurrent
//! predictor, and an additive joint network. One parameter set serves both
//! modes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{
    build_attention_mask_at, full_mask, plan_conv_chunks_at, ContextSpec, ConvRightMode,
};
use crate::error::{Error, Result};
use crate::lattice::JointLogits;
use crate::numerics::{Grads, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub conv_kernel: usize,
    pub subsample_factor: usize,
    /// Output vocabulary including blank (id 0).
    pub vocab_size: usize,
    pub predictor_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            model_dim: 64,
            heads: 4,
            blocks: 2,
            conv_kernel: 9,
            subsample_factor: 2,
            vocab_size: 17,
            predictor_dim: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_kernel % 2 == 0 {
            return Err(Error::EvenKernel(self.conv_kernel));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.blocks < 1 {
            return bad("blocks must be >= 1".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.feat_dim == 0 || self.subsample_factor == 0 || self.predictor_dim == 0 {
            return bad("feat_dim, subsample_factor and predictor_dim must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeSelector {
    Offline,
    Streaming {
        spec: ContextSpec,
        conv_right_mode: ConvRightMode,
    },
}

impl ModeSelector {
    pub fn streaming(spec: ContextSpec, conv_right_mode: ConvRightMode) -> Self {
        Self::Streaming {
            spec,
            conv_right_mode,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockIx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    conv: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
}

#[derive(Clone, Debug)]
struct Index {
    sub_w: usize,
    sub_b: usize,
    blocks: Vec<BlockIx>,
    out_g: usize,
    out_b: usize,
    embed: usize,
    h0: usize,
    wx: [usize; 3],
    wh: [usize; 3],
    bh: [usize; 3],
    je_w: usize,
    je_b: usize,
    jp_w: usize,
    jo_w: usize,
    jo_b: usize,
}

/// Parameters in declaration order (the checkpoint blob order).
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    ix: Index,
}

/// Parameters bound to one tape, in declaration order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

enum Init {
    Zeros,
    Ones,
    /// Uniform with variance `gain² / fan_in`.
    Fan(usize, f64),
}

struct Builder<T: Real> {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Builder<T> {
    fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Fan(fan_in, gain) => {
                let a = gain * (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::of(self.rng.gen_range(-a..a))).collect()
            }
        };
        self.names.push(name.into());
        self.params.push(Tensor::new(shape, data));
        self.params.len() - 1
    }
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            names: Vec::new(),
            params: Vec::new(),
        };
        let (d, f, p, v) = (cfg.model_dim, cfg.feat_dim, cfg.predictor_dim, cfg.vocab_size);
        let fs = f * cfg.subsample_factor;
        let ff = 2 * d;
        let sub_w = b.add("sub.w", vec![fs, d], Init::Fan(fs, 1.0));
        let sub_b = b.add("sub.b", vec![d], Init::Zeros);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let n = |s: &str| format!("block{i}.{s}");
            blocks.push(BlockIx {
                ln1_g: b.add(n("ln1.g"), vec![d], Init::Ones),
                ln1_b: b.add(n("ln1.b"), vec![d], Init::Zeros),
                wq: b.add(n("attn.wq"), vec![d, d], Init::Fan(d, 1.0)),
                wk: b.add(n("attn.wk"), vec![d, d], Init::Fan(d, 1.0)),
                wv: b.add(n("attn.wv"), vec![d, d], Init::Fan(d, 1.0)),
                wo: b.add(n("attn.wo"), vec![d, d], Init::Fan(d, 0.5)),
                bo: b.add(n("attn.bo"), vec![d], Init::Zeros),
                ln2_g: b.add(n("ln2.g"), vec![d], Init::Ones),
                ln2_b: b.add(n("ln2.b"), vec![d], Init::Zeros),
                conv: b.add(n("conv.k"), vec![cfg.conv_kernel, d], Init::Fan(cfg.conv_kernel, 1.0)),
                ff1_w: b.add(n("ff1.w"), vec![d, ff], Init::Fan(d, 1.0)),
                ff1_b: b.add(n("ff1.b"), vec![ff], Init::Zeros),
                ff2_w: b.add(n("ff2.w"), vec![ff, d], Init::Fan(ff, 0.5)),
                ff2_b: b.add(n("ff2.b"), vec![d], Init::Zeros),
            });
        }
        let out_g = b.add("enc_out.g", vec![d], Init::Ones);
        let out_b = b.add("enc_out.b", vec![d], Init::Zeros);
        let embed = b.add("pred.embed", vec![v, p], Init::Fan(1, 0.5));
        let h0 = b.add("pred.h0", vec![1, p], Init::Zeros);
        let gate = ["z", "r", "n"];
        let wx = gate.map(|g| b.add(format!("pred.wx_{g}"), vec![p, p], Init::Fan(p, 1.0)));
        let wh = gate.map(|g| b.add(format!("pred.wh_{g}"), vec![p, p], Init::Fan(p, 1.0)));
        let bh = gate.map(|g| b.add(format!("pred.b_{g}"), vec![p], Init::Zeros));
        let je_w = b.add("joint.enc_w", vec![d, p], Init::Fan(d, 1.0));
        let je_b = b.add("joint.b", vec![p], Init::Zeros);
        let jp_w = b.add("joint.pred_w", vec![p, p], Init::Fan(p, 1.0));
        let jo_w = b.add("joint.out_w", vec![p, v], Init::Fan(p, 1.0));
        let jo_b = b.add("joint.out_b", vec![v], Init::Zeros);
        Ok(Self {
            cfg,
            names: b.names,
            params: b.params,
            ix: Index {
                sub_w,
                sub_b,
                blocks,
                out_g,
                out_b,
                embed,
                h0,
                wx,
                wh,
                bh,
                je_w,
                je_b,
                jp_w,
                jo_w,
                jo_b,
            },
        })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            ix: self.ix.clone(),
        }
    }

    /// Binds every parameter to `tape` by reference; `trainable` controls
    /// whether they collect gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.param(p)
                    } else {
                        tape.constant_ref(p)
                    }
                })
                .collect(),
        )
    }

    /// Parameter gradients in declaration order (zeros where untouched).
    pub fn collect_grads(&self, bound: &Bound, grads: &Grads<T>) -> Vec<Tensor<T>> {
        bound
            .0
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape.clone()))
            })
            .collect()
    }

    /// Encoder frames produced from `t_in` input frames.
    pub fn encoder_frames(&self, t_in: usize) -> usize {
        t_in / self.cfg.subsample_factor
    }

    /// Encoder forward on a tape. `offset` is the absolute encoder frame of
    /// the first row, so streaming chunk boundaries stay aligned when a
    /// window of a longer sequence is encoded.
    pub fn encode_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &Bound,
        feats: Var,
        mode: &ModeSelector,
        offset: usize,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let fv = tape.value(feats);
        if fv.shape.len() != 2 || fv.cols() != cfg.feat_dim {
            return Err(Error::Shape(format!(
                "features {:?}, expected [T, {}]",
                fv.shape, cfg.feat_dim
            )));
        }
        let t_in = fv.rows();
        if t_in < cfg.subsample_factor {
            return Err(Error::InputTooShort {
                frames: t_in,
                needed: cfg.subsample_factor,
            });
        }
        let t = t_in / cfg.subsample_factor;
        let (mask, ranges) = match mode {
            ModeSelector::Offline => (full_mask(t), vec![(0, t); t]),
            ModeSelector::Streaming {
                spec,
                conv_right_mode,
            } => {
                spec.validate()?;
                let plan = plan_conv_chunks_at(t, spec, cfg.conv_kernel, *conv_right_mode, offset)?;
                (build_attention_mask_at(t, spec, offset), plan.ranges())
            }
        };
        let v = &p.0;
        let ix = &self.ix;
        let stacked = tape.reshape_prefix(feats, vec![t, cfg.feat_dim * cfg.subsample_factor]);
        let mut x = tape.linear(stacked, v[ix.sub_w], v[ix.sub_b]);
        for bi in &ix.blocks {
            let n = tape.layer_norm(x, v[bi.ln1_g], v[bi.ln1_b]);
            let q = tape.matmul(n, v[bi.wq]);
            let k = tape.matmul(n, v[bi.wk]);
            let vv = tape.matmul(n, v[bi.wv]);
            let a = tape.masked_attention(q, k, vv, &mask, cfg.heads)?;
            let a = tape.linear(a, v[bi.wo], v[bi.bo]);
            x = tape.add(x, a);
            let n = tape.layer_norm(x, v[bi.ln2_g], v[bi.ln2_b]);
            let c = tape.conv(n, v[bi.conv], ranges.clone())?;
            let h = tape.linear(c, v[bi.ff1_w], v[bi.ff1_b]);
            let h = tape.silu(h);
            let h = tape.linear(h, v[bi.ff2_w], v[bi.ff2_b]);
            x = tape.add(x, h);
        }
        Ok(tape.layer_norm(x, v[ix.out_g], v[ix.out_b]))
    }

    /// One gated recurrent step: `x` is `[1, P]` token embedding, `h` is `[1, P]`.
    fn gru_step<'a>(&'a self, tape: &mut Tape<'a, T>, p: &Bound, x: Var, h: Var) -> Var {
        let v = &p.0;
        let ix = &self.ix;
        let pre = |g: usize, h_in: Var, tape: &mut Tape<'a, T>| {
            let a = tape.matmul(x, v[ix.wx[g]]);
            let b = tape.matmul(h_in, v[ix.wh[g]]);
            let s = tape.add(a, b);
            tape.add_bias(s, v[ix.bh[g]])
        };
        let z = pre(0, h, tape);
        let z = tape.sigmoid(z);
        let r = pre(1, h, tape);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let n = pre(2, rh, tape);
        let n = tape.tanh(n);
        let keep = tape.mul(z, h);
        let zc = tape.one_minus(z);
        let upd = tape.mul(zc, n);
        tape.add(upd, keep)
    }

    /// Predictor outputs for label positions `0..=U`: row 0 is the learned
    /// start state, row `u` the state after consuming `tokens[..u]`.
    pub fn predict_on<'a>(&'a self, tape: &mut Tape<'a, T>, p: &Bound, tokens: &[usize]) -> Result<Var> {
        let emb = tape.gather(p.0[self.ix.embed], tokens)?;
        let mut h = p.0[self.ix.h0];
        let mut rows = vec![h];
        for u in 0..tokens.len() {
            let x = tape.slice_rows(emb, u, u + 1);
            h = self.gru_step(tape, p, x, h);
            rows.push(h);
        }
        Ok(tape.concat_rows(&rows))
    }

    /// Joint logits `[T·(U+1), V]` for `enc: [T, D]` and `pred: [U+1, P]`.
    pub fn joint_on<'a>(&'a self, tape: &mut Tape<'a, T>, p: &Bound, enc: Var, pred: Var) -> Var {
        let v = &p.0;
        let ix = &self.ix;
        let a = tape.linear(enc, v[ix.je_w], v[ix.je_b]);
        let b = tape.matmul(pred, v[ix.jp_w]);
        let h = tape.joint_combine(a, b);
        tape.linear(h, v[ix.jo_w], v[ix.jo_b])
    }

    pub fn encode(&self, features: &Tensor<T>, mode: &ModeSelector) -> Result<Tensor<T>> {
        self.encode_at(features, mode, 0)
    }

    pub fn encode_at(&self, features: &Tensor<T>, mode: &ModeSelector, offset: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let f = tape.constant_ref(features);
        let out = self.encode_on(&mut tape, &p, f, mode, offset)?;
        Ok(tape.value(out).clone())
    }

    pub fn start_state(&self) -> Tensor<T> {
        self.params[self.ix.h0].clone()
    }

    /// Advances the predictor by one non-blank token; the returned state is
    /// also the predictor output vector.
    pub fn predict(&self, token: usize, state: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.gather(p.0[self.ix.embed], &[token])?;
        let h = tape.constant_ref(state);
        let out = self.gru_step(&mut tape, &p, x, h);
        Ok(tape.value(out).clone())
    }

    /// `[T, U+1, V]` joint lattice for one utterance.
    pub fn joint(&self, enc: &Tensor<T>, pred: &Tensor<T>) -> Result<JointLogits<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let (e, q) = (tape.constant_ref(enc), tape.constant_ref(pred));
        let z = self.joint_on(&mut tape, &p, e, q);
        JointLogits::single(tape.value(z).data.clone(), enc.rows(), pred.rows() - 1, self.cfg.vocab_size)
    }

    /// Encoder half of the joint: `enc · W_e + b`, one row per frame.
    pub fn joint_enc_proj(&self, enc: &Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let e = tape.constant_ref(enc);
        let a = tape.linear(e, p.0[self.ix.je_w], p.0[self.ix.je_b]);
        tape.value(a).clone()
    }

    /// Predictor half of the joint: `state · W_p`.
    pub fn joint_pred_proj(&self, state: &Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let s = tape.constant_ref(state);
        let b = tape.matmul(s, p.0[self.ix.jp_w]);
        tape.value(b).clone()
    }

    /// Logits for one lattice cell from the two projected halves.
    pub fn joint_cell(&self, enc_proj: &[T], pred_proj: &[T]) -> Vec<T> {
        let w = &self.params[self.ix.jo_w];
        let mut out = self.params[self.ix.jo_b].data.clone();
        let v = self.cfg.vocab_size;
        for (c, (&a, &b)) in enc_proj.iter().zip(pred_proj).enumerate() {
            let h = (a + b).tanh();
            for (o, &wv) in out.iter_mut().zip(&w.data[c * v..(c + 1) * v]) {
                *o += h * wv;
            }
        }
        out
    }
}

const MAGIC: &[u8; 8] = b"URNNTCK\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    model: ModelConfig,
}

/// Writes `MAGIC | u32 version | u32 header length | TOML header | f32 blobs`.
pub fn save_checkpoint<T: Real>(model: &Model<T>, step: u64, path: &Path) -> Result<()> {
    let header = toml::to_string(&Header {
        version: CHECKPOINT_VERSION,
        step,
        model: model.cfg.clone(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * model.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for p in model.params() {
        for &x in &p.data {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(path, e);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Loads a checkpoint; `expect` (if given) must match the stored config.
pub fn load_checkpoint<T: Real>(path: &Path, expect: Option<&ModelConfig>) -> Result<(Model<T>, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::CorruptCheckpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "checkpoint format {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = 16 + hlen;
    if bytes.len() < body {
        return Err(corrupt("truncated header"));
    }
    let text = std::str::from_utf8(&bytes[16..body]).map_err(|_| corrupt("header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| corrupt(&format!("header: {e}")))?;
    if let Some(want) = expect {
        if *want != header.model {
            return Err(Error::VersionMismatch(format!(
                "checkpoint config {:?} differs from requested {:?}",
                header.model, want
            )));
        }
    }
    let mut model = Model::<T>::new(header.model)?;
    let need = 4 * model.num_params();
    if bytes.len() != body + need {
        return Err(corrupt(&format!(
            "expected {} parameter bytes, found {}",
            need,
            bytes.len() - body
        )));
    }
    let mut floats = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for p in model.params_mut() {
        for x in p.data.iter_mut() {
            *x = T::of(floats.next().expect("length checked") as f64);
        }
    }
    Ok((model, header.step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            model_dim: 8,
            heads: 2,
            blocks: 2,
            conv_kernel: 3,
            subsample_factor: 2,
            vocab_size: 5,
            predictor_dim: 6,
            seed: 4,
        }
    }

    fn feats(t: usize, f: usize, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, f], (0..t * f).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn shapes_and_errors() {
        let m = Model::<f64>::new(small()).unwrap();
        let e = m.encode(&feats(9, 3, 1), &ModeSelector::Offline).unwrap();
        assert_eq!(e.shape, vec![4, 8]);
        assert!(matches!(
            m.encode(&feats(1, 3, 1), &ModeSelector::Offline),
            Err(Error::InputTooShort { frames: 1, needed: 2 })
        ));
        let pred = {
            let mut tape = Tape::new();
            let p = m.bind(&mut tape, false);
            let y = m.predict_on(&mut tape, &p, &[1, 2]).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(pred.shape, vec![3, 6]);
        assert_eq!(m.joint(&e, &pred).unwrap().dims(), [1, 4, 3, 5]);
        assert!(matches!(m.predict(5, &m.start_state()), Err(Error::BadToken { token: 5, vocab: 5 })));
        let even = ModelConfig {
            conv_kernel: 4,
            ..small()
        };
        assert!(matches!(Model::<f64>::new(even), Err(Error::EvenKernel(4))));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut m = Model::<f64>::new(small()).unwrap();
        for p in m.params_mut() {
            p.data.fill(0.0);
        }
        let e = Tensor::filled(vec![3, 8], 0.7);
        let z = m.joint(&e, &Tensor::filled(vec![2, 6], -0.3)).unwrap();
        assert!(z.z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn predictor_sequence_folds_single_steps() {
        let m = Model::<f64>::new(small()).unwrap();
        let s1 = m.predict(3, &m.start_state()).unwrap();
        let s2 = m.predict(1, &s1).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let seq = m.predict_on(&mut tape, &p, &[3, 1]).unwrap();
        let seq = tape.value(seq);
        assert_eq!(seq.row(1), &s1.data[..]);
        assert_eq!(seq.row(2), &s2.data[..]);
        assert_eq!(m.predict(3, &m.start_state()).unwrap(), s1);
    }

    #[test]
    fn joint_cell_matches_lattice() {
        let m = Model::<f64>::new(small()).unwrap();
        let e = m.encode(&feats(8, 3, 2), &ModeSelector::Offline).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let pv = m.predict_on(&mut tape, &p, &[2, 4]).unwrap();
        let pred = tape.value(pv).clone();
        let z = m.joint(&e, &pred).unwrap();
        let a = m.joint_enc_proj(&e);
        for u in 0..3 {
            let row = Tensor::new(vec![1, 6], pred.row(u).to_vec());
            let b = m.joint_pred_proj(&row);
            for t in 0..4 {
                let cell = m.joint_cell(a.row(t), &b.data);
                for (x, y) in cell.iter().zip(z.cell(0, t, u)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(small()).unwrap();
        save_checkpoint(&m, 17, &path).unwrap();
        let (back, step) = load_checkpoint::<f32>(&path, Some(&m.cfg)).unwrap();
        assert_eq!(step, 17);
        for (a, b) in m.params().iter().zip(back.params()) {
            let bits = |t: &Tensor<f32>| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let other = ModelConfig {
            vocab_size: 7,
            ..small()
        };
        assert!(matches!(
            load_checkpoint::<f32>(&path, Some(&other)),
            Err(Error::VersionMismatch(_))
        ));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path, None), Err(Error::CorruptCheckpoint(_))));
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path, None), Err(Error::CorruptCheckpoint(_))));
        let mut newer = bytes;
        newer[8] = 9;
        fs::write(&path, &newer).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path, None), Err(Error::VersionMismatch(_))));
    }
}
