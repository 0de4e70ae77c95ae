use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
use rand::Rng;

use super::*;
use crate::numeric::rng::seeded;
use crate::numeric::{grad_check, GradCheckOptions};

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str) {
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        let shape = store.value(store.id(&n).unwrap()).shape().to_vec();
        store.set_value(&n, rand_tensor(rng, &shape)).unwrap();
    }
}

fn linear_loop(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|r| b.data()[r] + (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>())
        .collect()
}

/// Explicit-loop multi-head attention with projections and residual, for one
/// image: `t [n, d]` over `f [l, d]`.
fn attend_loop(blk: &CrossAttentionBlock, store: &ParamStore, t: &[Vec<f64>], f: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = |l: &Linear| (store.value(l.weight).clone(), store.value(l.bias.unwrap()).clone());
    let ((qw, qb), (kw, kb), (vw, vb), (ow, ob)) = (p(&blk.q), p(&blk.k), p(&blk.v), p(&blk.o));
    let d = t[0].len();
    let dh = d / blk.heads;
    let q: Vec<Vec<f64>> = t.iter().map(|x| linear_loop(x, &qw, &qb)).collect();
    let k: Vec<Vec<f64>> = f.iter().map(|x| linear_loop(x, &kw, &kb)).collect();
    let v: Vec<Vec<f64>> = f.iter().map(|x| linear_loop(x, &vw, &vb)).collect();
    let mut out = Vec::new();
    for (qi, ti) in q.iter().zip(t) {
        let mut concat = vec![0.0; d];
        for h in 0..blk.heads {
            let r = h * dh..(h + 1) * dh;
            let s: Vec<f64> = k
                .iter()
                .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for c in r.clone() {
                    concat[c] += e[j] / z * vj[c];
                }
            }
        }
        let o = linear_loop(&concat, &ow, &ob);
        out.push(o.iter().zip(ti).map(|(a, b)| a + b).collect());
    }
    out
}

fn rows_of(t: &Tensor, from: usize, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| t.data()[(from + i) * d..(from + i + 1) * d].to_vec()).collect()
}

#[test]
fn head_defaults() {
    assert_eq!(default_heads(24), 12);
    assert_eq!(default_heads(32), 8);
    assert_eq!(default_heads(64), 8);
    assert_eq!(default_heads(7), 7);
    assert_eq!(default_heads(13), 1);
    let mut store = ParamStore::new();
    let r = CrossAttentionBlock::new(&mut store, &mut seeded(0, 0), "x", 10, 3, 0.0);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn single_key_passes_value_path() {
    let mut rng = seeded(1, 0);
    let mut store = ParamStore::new();
    let blk = CrossAttentionBlock::new(&mut store, &mut rng, "x", 6, 2, 0.1).unwrap();
    randomize(&mut store, &mut rng, "x");
    let t = rand_tensor(&mut rng, &[3, 6]);
    let f = rand_tensor(&mut rng, &[1, 1, 6]);
    let mut tape = Tape::eval();
    let (tv, fv) = (tape.constant(t.clone()), tape.constant(f.clone()));
    let y = blk.cross_attend(&mut tape, &store, tv, fv, KeyScope::Image).unwrap();
    let p = |l: &Linear| (store.value(l.weight).clone(), store.value(l.bias.unwrap()).clone());
    let ((vw, vb), (ow, ob)) = (p(&blk.v), p(&blk.o));
    let path = linear_loop(&linear_loop(f.data(), &vw, &vb), &ow, &ob);
    for i in 0..3 {
        for c in 0..6 {
            let want = path[c] + t.data()[i * 6 + c];
            assert!((tape.value(y).data()[i * 6 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_output_projection_is_residual_identity() {
    let mut rng = seeded(2, 0);
    let mut store = ParamStore::new();
    let blk = CrossAttentionBlock::new(&mut store, &mut rng, "x", 8, 4, 0.1).unwrap();
    store.set_value("x.o.weight", Tensor::zeros(&[8, 8])).unwrap();
    let mut tape = Tape::eval();
    let t = tape.constant(rand_tensor(&mut rng, &[5, 8]));
    let f = tape.constant(rand_tensor(&mut rng, &[2, 3, 8]));
    let y = blk.cross_attend(&mut tape, &store, t, f, KeyScope::Image).unwrap();
    let tb = tape.broadcast_batch(t, 2).unwrap();
    assert_eq!(tape.value(y), tape.value(tb));
}

#[test]
fn attention_weights_sum_to_one_per_head() {
    // Constant unit values make each head's output equal its weight sum.
    let mut rng = seeded(3, 0);
    let mut store = ParamStore::new();
    let blk = CrossAttentionBlock::new(&mut store, &mut rng, "x", 12, 3, 0.0).unwrap();
    randomize(&mut store, &mut rng, "x.q");
    randomize(&mut store, &mut rng, "x.k");
    store.set_value("x.v.weight", Tensor::zeros(&[12, 12])).unwrap();
    store.set_value("x.v.bias", Tensor::full(&[12], 1.0)).unwrap();
    store.set_value("x.o.weight", Tensor::eye(12)).unwrap();
    let mut tape = Tape::eval();
    let t = tape.constant(Tensor::zeros(&[4, 12]));
    let f = tape.constant(Tensor::from_fn(&[2, 7, 12], |_| rng.random_range(-5.0..5.0)));
    let y = blk.cross_attend(&mut tape, &store, t, f, KeyScope::Image).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn stage_double_residual_identity() {
    let mut rng = seeded(4, 0);
    let mut store = ParamStore::new();
    let cfg = InteractionConfig { heads: Some(2), ..Default::default() };
    let st = InteractionStage::new(&mut store, &mut rng, "s", 6, &cfg).unwrap();
    store.set_value("s.attn.o.weight", Tensor::zeros(&[6, 6])).unwrap();
    store.set_value("s.ffn.fc2.weight", Tensor::zeros(&[6, 24])).unwrap();
    let mut tape = Tape::eval();
    let t = tape.constant(rand_tensor(&mut rng, &[3, 6]));
    let f = tape.constant(rand_tensor(&mut rng, &[2, 4, 6]));
    let y = st.forward(&mut tape, &store, t, f, KeyScope::Image).unwrap();
    let tb = tape.broadcast_batch(t, 2).unwrap();
    assert_eq!(tape.value(y), tape.value(tb));
}

#[test]
fn second_stage_queries_with_first_stage_output() {
    let mut rng = seeded(5, 0);
    let mut store = ParamStore::new();
    let cfg = InteractionConfig { heads: Some(2), lambda_init: 0.4, ..Default::default() };
    let br = BranchInteraction::new(&mut store, &mut rng, "b", 4, &cfg, StageLayout::default()).unwrap();
    let mut tape = Tape::eval();
    let t = tape.constant(rand_tensor(&mut rng, &[3, 4]));
    let lo = tape.constant(rand_tensor(&mut rng, &[2, 5, 4]));
    let hi = tape.constant(rand_tensor(&mut rng, &[2, 5, 4]));
    let out = br.forward(&mut tape, &store, t, lo, hi).unwrap();
    let s1 = br.stage1.as_ref().unwrap();
    let s2 = br.stage2.as_ref().unwrap();
    let t1 = s1.forward(&mut tape, &store, t, lo, KeyScope::Image).unwrap();
    let t2 = s2.forward(&mut tape, &store, t1, hi, KeyScope::Image).unwrap();
    let tb = tape.broadcast_batch(t, 2).unwrap();
    let (v, v1, v2) = (tape.value(tb).clone(), tape.value(t1).clone(), tape.value(t2).clone());
    for i in 0..v.numel() {
        let want = v.data()[i] + 0.4 * v1.data()[i] + 0.4 * v2.data()[i];
        assert!((tape.value(out).data()[i] - want).abs() < 1e-14);
    }
}

#[test]
fn zero_lambdas_make_the_interaction_the_identity() {
    let mut rng = seeded(6, 0);
    let mut store = ParamStore::new();
    let cfg = InteractionConfig { heads: Some(4), lambda_init: 0.0, ..Default::default() };
    let br = BranchInteraction::new(&mut store, &mut rng, "b", 8, &cfg, StageLayout::default()).unwrap();
    randomize(&mut store, &mut rng, "b.stage");
    let mut tape = Tape::eval();
    let t = tape.constant(rand_tensor(&mut rng, &[5, 8]));
    let lo = tape.constant(rand_tensor(&mut rng, &[3, 4, 8]));
    let hi = tape.constant(rand_tensor(&mut rng, &[3, 4, 8]));
    let out = br.forward(&mut tape, &store, t, lo, hi).unwrap();
    let tb = tape.broadcast_batch(t, 3).unwrap();
    assert_eq!(tape.value(out), tape.value(tb));
}

#[test]
fn fuse_examples() {
    let mut rng = seeded(7, 0);
    let mut tape = Tape::eval();
    let (a, b, c) = (rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 3, 4]), rand_tensor(&mut rng, &[2, 3, 4]));
    let (t, t1, t2) = (tape.constant(a.clone()), tape.constant(b.clone()), tape.constant(c.clone()));
    let zero = tape.constant(Tensor::scalar(0.0));
    let one = tape.constant(Tensor::scalar(1.0));
    let y = fuse(&mut tape, t, Some((t1, zero)), Some((t2, zero))).unwrap();
    assert_eq!(tape.value(y), &a);
    let tz = tape.constant(Tensor::zeros(&[2, 3, 4]));
    let y = fuse(&mut tape, tz, Some((t1, one)), Some((t2, zero))).unwrap();
    assert_eq!(tape.value(y), &b);
    let (l1, l2) = (tape.constant(Tensor::scalar(0.3)), tape.constant(Tensor::scalar(0.7)));
    let y = fuse(&mut tape, t, Some((t1, l1)), Some((t2, l2))).unwrap();
    for i in 0..24 {
        assert_eq!(tape.value(y).data()[i], a.data()[i] + 0.3 * b.data()[i] + 0.7 * c.data()[i]);
    }
    let bad = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(fuse(&mut tape, t, Some((bad, l1)), None), Err(Error::Dimension(_))));
}

#[test]
fn dropped_first_term_has_zero_lambda_gradient() {
    let mut rng = seeded(8, 0);
    let mut store = ParamStore::new();
    let layout = StageLayout { fuse_first: false, ..Default::default() };
    let cfg = InteractionConfig { heads: Some(2), ..Default::default() };
    let br = BranchInteraction::new(&mut store, &mut rng, "b", 4, &cfg, layout).unwrap();
    let mut tape = Tape::train(1, 0);
    let t = tape.constant(rand_tensor(&mut rng, &[3, 4]));
    let lo = tape.constant(rand_tensor(&mut rng, &[2, 5, 4]));
    let hi = tape.constant(rand_tensor(&mut rng, &[2, 5, 4]));
    let out = br.forward(&mut tape, &store, t, lo, hi).unwrap();
    let sq = tape.gelu(out);
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    tape.accumulate_into(&mut store);
    let g1 = store.get(br.fusion.lambda1).grad.clone();
    assert!(g1.is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    let g2 = store.get(br.fusion.lambda2).grad.clone().unwrap();
    assert!(g2[0] != 0.0);
    assert!(store.get(store.id("b.stage1.attn.q.weight").unwrap()).grad.is_some());
}

#[test]
fn batch_scope_shares_prompts_across_images() {
    let mut rng = seeded(9, 0);
    let mut store = ParamStore::new();
    let cfg = InteractionConfig { heads: Some(2), key_scope: KeyScope::Batch, ..Default::default() };
    let br = BranchInteraction::new(&mut store, &mut rng, "b", 4, &cfg, StageLayout::default()).unwrap();
    let mut tape = Tape::eval();
    let t = tape.constant(rand_tensor(&mut rng, &[3, 4]));
    let lo = tape.constant(rand_tensor(&mut rng, &[2, 5, 4]));
    let hi = tape.constant(rand_tensor(&mut rng, &[2, 5, 4]));
    let out = br.forward(&mut tape, &store, t, lo, hi).unwrap();
    assert_eq!(tape.shape(out), &[2, 3, 4]);
    let v = tape.value(out).data();
    assert_eq!(&v[..12], &v[12..]);
}

#[test]
fn two_stage_gradcheck() {
    let mut rng = seeded(10, 0);
    let mut store = ParamStore::new();
    let cfg = InteractionConfig { heads: Some(2), lambda_init: 0.5, ..Default::default() };
    let br = BranchInteraction::new(&mut store, &mut rng, "b", 4, &cfg, StageLayout::default()).unwrap();
    let t = rand_tensor(&mut rng, &[3, 4]);
    let lo = rand_tensor(&mut rng, &[2, 3, 4]);
    let hi = rand_tensor(&mut rng, &[2, 3, 4]);
    let mix = rand_tensor(&mut rng, &[6, 4]);
    let leaves: Vec<ParamId> = store.trainable().collect();
    let report = grad_check(
        &mut store,
        &leaves,
        |tape, store| {
            let (tv, lv, hv) = (tape.constant(t.clone()), tape.constant(lo.clone()), tape.constant(hi.clone()));
            let out = br.forward(tape, store, tv, lv, hv)?;
            let flat = tape.reshape(out, &[6, 4])?;
            let m = tape.constant(mix.clone());
            let p = tape.matmul_nt(flat, m)?;
            let g = tape.gelu(p);
            Ok(tape.sum(g))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]
    #[test]
    fn cross_attend_matches_loop_oracle(
        seed in any::<u64>(), b in 1usize..3, n in 1usize..5, l in 1usize..6, hsel in 0usize..3, dh in 1usize..4
    ) {
        let heads = [1, 2, 3][hsel];
        let d = heads * dh;
        let mut rng = seeded(seed, 1);
        let mut store = ParamStore::new();
        let blk = CrossAttentionBlock::new(&mut store, &mut rng, "x", d, heads, 0.1).unwrap();
        randomize(&mut store, &mut rng, "x");
        let t = rand_tensor(&mut rng, &[n, d]);
        let f = rand_tensor(&mut rng, &[b, l, d]);
        let mut tape = Tape::eval();
        let (tv, fv) = (tape.constant(t.clone()), tape.constant(f.clone()));
        let y = blk.cross_attend(&mut tape, &store, tv, fv, KeyScope::Image).unwrap();
        let tr = rows_of(&t, 0, n, d);
        for img in 0..b {
            let want = attend_loop(&blk, &store, &tr, &rows_of(&f, img * l, l, d));
            let got = rows_of(tape.value(y), img * n, n, d);
            for (gw, ww) in got.iter().zip(&want) {
                for (g, w) in gw.iter().zip(ww) {
                    prop_assert!((g - w).abs() < 1e-10);
                }
            }
        }
    }
}
