use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unirnnt::context::{receptive_frontier, ContextSpec, ConvRightMode};
use unirnnt::lattice::{rnnt_loss, JointLogits};
use unirnnt::model::{ModeSelector, Model, ModelConfig};
use unirnnt::numerics::gradcheck::{max_rel_error, FD_FLOOR};
use unirnnt::numerics::{Tape, Tensor};

fn cfg(blocks: usize, kernel: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        feat_dim: 4,
        model_dim: 8,
        heads: 2,
        blocks,
        conv_kernel: kernel,
        subsample_factor: 2,
        vocab_size: 5,
        predictor_dim: 6,
        seed,
    }
}

fn feats(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Tensor<f64> {
    Tensor::new(vec![t, f], (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn streaming_with_full_context_equals_offline() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let m = Model::<f64>::new(cfg(2, 5, case)).unwrap();
        let t_in = rng.gen_range(4..30);
        let x = feats(&mut rng, t_in, 4);
        let t = t_in / 2;
        let big = t + rng.gen_range(0..3);
        let spec = ContextSpec::new(big, big, big).unwrap();
        let off = m.encode(&x, &ModeSelector::Offline).unwrap();
        let st = m
            .encode(&x, &ModeSelector::streaming(spec, ConvRightMode::Real))
            .unwrap();
        assert!(off.max_abs_diff(&st) <= 1e-10, "case {case}");
    }
    let m32 = Model::<f32>::new(cfg(2, 5, 3)).unwrap();
    let x32 = feats(&mut rng, 20, 4).cast::<f32>();
    let spec = ContextSpec::new(10, 10, 10).unwrap();
    let a = m32.encode(&x32, &ModeSelector::Offline).unwrap();
    let b = m32
        .encode(&x32, &ModeSelector::streaming(spec, ConvRightMode::Real))
        .unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-5);
}

#[test]
fn both_modes_read_the_same_parameter_storage() {
    let m = Model::<f64>::new(cfg(2, 3, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = feats(&mut rng, 12, 4);
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, true);
    let f = tape.constant_ref(&x);
    let spec = ContextSpec::new(1, 2, 1).unwrap();
    m.encode_on(&mut tape, &p, f, &ModeSelector::Offline, 0).unwrap();
    m.encode_on(&mut tape, &p, f, &ModeSelector::streaming(spec, ConvRightMode::Zero), 0)
        .unwrap();
    for (v, param) in p.vars().iter().zip(m.params()) {
        assert!(std::ptr::eq(tape.storage_ptr(*v), param.data.as_ptr()));
    }
}

#[test]
fn encode_is_bitwise_deterministic() {
    let x = feats(&mut ChaCha8Rng::seed_from_u64(5), 17, 4);
    let run = || {
        let m = Model::<f32>::new(cfg(2, 3, 9)).unwrap();
        m.encode(&x.cast(), &ModeSelector::Offline)
            .unwrap()
            .data
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn single_block_zero_mode_frontier_is_chunk_end_plus_right() {
    for (t, l, c, r) in [(9, 2, 2, 1), (10, 0, 3, 0), (7, 5, 1, 2), (12, 1, 4, 3)] {
        let spec = ContextSpec::new(l, c, r).unwrap();
        let f = receptive_frontier(t, &spec, 5, ConvRightMode::Zero, 1, 0).unwrap();
        for (i, &got) in f.iter().enumerate() {
            let (_, e) = spec.chunk_bounds(i);
            assert_eq!(got, (e + r).min(t), "t={t} spec={spec} frame {i}");
        }
    }
}

#[test]
fn lookahead_mode_spans_zero_and_real() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Model::<f64>::new(cfg(2, 5, 1)).unwrap();
    let x = feats(&mut rng, 20, 4);
    let enc = |spec: ContextSpec, mode| m.encode(&x, &ModeSelector::streaming(spec, mode)).unwrap();
    let no_right = ContextSpec::new(3, 2, 0).unwrap();
    assert_eq!(enc(no_right, ConvRightMode::Lookahead), enc(no_right, ConvRightMode::Zero));
    // right context at least the conv halo
    let wide = ContextSpec::new(3, 2, 2).unwrap();
    assert_eq!(enc(wide, ConvRightMode::Lookahead), enc(wide, ConvRightMode::Real));
    let narrow = ContextSpec::new(3, 2, 1).unwrap();
    let la = enc(narrow, ConvRightMode::Lookahead);
    assert_ne!(la, enc(narrow, ConvRightMode::Real));
    assert_ne!(la, enc(narrow, ConvRightMode::Zero));
}

fn causality_case(
    seed: u64,
    blocks: usize,
    mode: ConvRightMode,
    spec: ContextSpec,
    t: usize,
) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Model::<f64>::new(cfg(blocks, 3, seed)).unwrap();
    let sub = m.cfg.subsample_factor;
    let x = feats(&mut rng, t * sub, 4);
    let sel = ModeSelector::streaming(spec, mode);
    let base = m.encode(&x, &sel).unwrap();
    let frontier = receptive_frontier(t, &spec, 3, mode, blocks, 0).unwrap();
    let cut = rng.gen_range(0..t);
    let mut y = x.clone();
    for v in &mut y.data[cut * sub * 4..] {
        *v += rng.gen_range(-2.0..2.0);
    }
    let pert = m.encode(&y, &sel).unwrap();
    for i in 0..t {
        if frontier[i] <= cut {
            prop_assert_eq!(base.row(i), pert.row(i), "frame {} cut {}", i, cut);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbing_beyond_the_frontier_never_changes_outputs(
        seed in 0u64..1000,
        blocks in 1usize..3,
        mode in 0usize..3,
        l in 0usize..4,
        c in 1usize..4,
        r in 0usize..3,
        t in 3usize..12,
    ) {
        let mode = [ConvRightMode::Real, ConvRightMode::Zero, ConvRightMode::Lookahead][mode];
        causality_case(seed, blocks, mode, ContextSpec::new(l, c, r).unwrap(), t)?;
    }
}

#[test]
fn predictor_gradient_through_three_steps() {
    let m = Model::<f64>::new(cfg(1, 3, 2)).unwrap();
    let tokens = [3usize, 1, 4];
    let w: Vec<f64> = {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        (0..4 * 6).map(|_| r.gen_range(-1.0..1.0)).collect()
    };
    // differentiate w.r.t. the learned start state and the recurrent weights
    let names = m.param_names().to_vec();
    for target in ["pred.h0", "pred.wh_n", "pred.wx_z", "pred.embed"] {
        let pi = names.iter().position(|n| n == target).unwrap();
        let eval = |vals: &[f64]| -> (f64, Vec<f64>) {
            let mut mm = m.clone();
            mm.params_mut()[pi].data.copy_from_slice(vals);
            let mut tape = Tape::new();
            let p = mm.bind(&mut tape, true);
            let y = mm.predict_on(&mut tape, &p, &tokens).unwrap();
            let s = tape.weighted_sum(y, w.clone());
            let l = tape.value(s).data[0];
            let g = mm.collect_grads(&p, &tape.backward_scalar(s));
            (l, g[pi].data.clone())
        };
        let x0 = m.params()[pi].data.clone();
        let (_, analytic) = eval(&x0);
        let err = max_rel_error(&mut |x| eval(x).0, &x0, &analytic, 1e-6, FD_FLOOR);
        assert!(err <= 1e-5, "{target}: rel err {err}");
    }
}

fn e2e_loss(m: &Model<f64>, x: &Tensor<f64>, tokens: &[usize]) -> (f64, Vec<f64>, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, true);
    let f = tape.leaf(x.clone().with_grad());
    let enc = m.encode_on(&mut tape, &p, f, &ModeSelector::Offline, 0).unwrap();
    let pred = m.predict_on(&mut tape, &p, tokens).unwrap();
    let z = m.joint_on(&mut tape, &p, enc, pred);
    let t = tape.value(enc).rows();
    let lat = JointLogits::single(tape.value(z).data.clone(), t, tokens.len(), m.cfg.vocab_size)
        .unwrap();
    let out = rnnt_loss(&lat, &[tokens.to_vec()]).unwrap();
    let seed = Tensor::new(tape.value(z).shape.clone(), out.grad);
    let grads = tape.backward(vec![(z, seed)]);
    let gx = grads.get(f).unwrap().data.clone();
    (out.loss[0], gx, m.collect_grads(&p, &grads))
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let m = Model::<f64>::new(cfg(2, 3, 6)).unwrap();
    let x = feats(&mut ChaCha8Rng::seed_from_u64(1), 6, 4);
    let tokens = [2usize, 4];
    let (_, gx, gp) = e2e_loss(&m, &x, &tokens);
    let err = max_rel_error(
        &mut |v| e2e_loss(&m, &Tensor::new(x.shape.clone(), v.to_vec()), &tokens).0,
        &x.data,
        &gx,
        1e-6,
        FD_FLOOR,
    );
    assert!(err <= 1e-4, "features: rel err {err}");
    for (pi, name) in m.param_names().iter().enumerate() {
        let x0 = m.params()[pi].data.clone();
        let err = max_rel_error(
            &mut |v| {
                let mut mm = m.clone();
                mm.params_mut()[pi].data.copy_from_slice(v);
                e2e_loss(&mm, &x, &tokens).0
            },
            &x0,
            &gp[pi].data,
            1e-6,
            FD_FLOOR,
        );
        assert!(err <= 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn frontier_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (blocks, mode) in [
        (1, ConvRightMode::Zero),
        (1, ConvRightMode::Lookahead),
        (2, ConvRightMode::Zero),
        (2, ConvRightMode::Real),
        (2, ConvRightMode::Lookahead),
    ] {
        let spec = ContextSpec::new(2, 2, 1).unwrap();
        let t = 10;
        let m = Model::<f64>::new(cfg(blocks, 3, 4)).unwrap();
        let x = feats(&mut rng, 2 * t, 4);
        let sel = ModeSelector::streaming(spec, mode);
        let base = m.encode(&x, &sel).unwrap();
        let frontier = receptive_frontier(t, &spec, 3, mode, blocks, 0).unwrap();
        for i in 0..t {
            let last = frontier[i] - 1;
            let mut y = x.clone();
            for v in &mut y.data[last * 8..(last + 1) * 8] {
                *v += 0.5;
            }
            let pert = m.encode(&y, &sel).unwrap();
            assert_ne!(base.row(i), pert.row(i), "blocks {blocks} frame {i}");
        }
    }
}
