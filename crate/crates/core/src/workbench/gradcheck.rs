//! Finite-difference checks of every differentiable operation and of the
//! full three-branch loss on a 2-state x 2-object micro-instance.

use rand::Rng;

use crate::aggregation::AggregationConfig;
use crate::encoders::EncoderConfig;
use crate::error::Result;
use crate::evaluation::Pair;
use crate::interaction::InteractionConfig;
use crate::model::{Architecture, CompositionModel, ModelConfig, Variant, VisualInput};
use crate::numeric::rng::seeded;
use crate::numeric::{grad_check, GradCheckOptions, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var};
use crate::objective::LossConfig;

/// Smallest architecture that still exercises every component.
pub fn micro_architecture(variant: Variant) -> Architecture {
    Architecture {
        model: ModelConfig { variant, head_hidden_ratio: 2 },
        encoder: EncoderConfig {
            input_dim: 8,
            patches: 4,
            width: 8,
            blocks: 4,
            heads: 2,
            mlp_ratio: 2,
            branch_gain: 1.0,
            lora_rank: 2,
            lora_scale: 1.0,
        },
        aggregation: AggregationConfig { n_low: 2, m_high: 2, dropout: 0.1 },
        interaction: InteractionConfig { heads: Some(2), ffn_expansion: 2, ..Default::default() },
        loss: LossConfig::default(),
    }
}

/// Four inputs over three seen pairs of a 2 x 2 space.
pub fn micro_batch(seed: u64) -> (Tensor, Vec<Pair>, Vec<Pair>) {
    let mut rng = seeded(seed, 99);
    let x = Tensor::from_fn(&[4, 8], |_| rng.random_range(-1.0..1.0));
    let seen = vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0)];
    let labels = vec![seen[0], seen[1], seen[2], seen[0]];
    (x, labels, seen)
}

/// Gradient check of the total loss over every trainable parameter,
/// including the adapter `B` matrices after a random perturbation so that
/// the adapter path carries gradient into `A`.
pub fn full_loss_check(variant: Variant, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = CompositionModel::new(&micro_architecture(variant), 2, 2, seed)?;
    let mut rng = seeded(seed, 98);
    let b_ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.requires_grad && p.name.ends_with(".lora_b"))
        .map(|(id, _)| id)
        .collect();
    for id in b_ids {
        let v = model.store.get_mut(id);
        v.value.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
    }
    let (x, labels, seen) = micro_batch(seed);
    let leaves: Vec<ParamId> = model.store.trainable().collect();
    let probe = model.clone();
    grad_check(
        &mut model.store,
        &leaves,
        |tape, store| Ok(probe.loss_with(store, tape, VisualInput::Raw(&x), &labels, &seen)?.total),
        opts,
    )
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn op_suite() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum(y))
        }),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        }),
        ("linear", vec![vec![2, 3, 4], vec![5, 4], vec![5]], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        }),
        ("softmax", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0], 1)?;
            let w = t.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin()));
            let y = t.add(y, w)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        }),
        ("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |t, v| {
            let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        }),
        ("l2_normalize", vec![vec![3, 4]], |t, v| {
            let y = t.l2_normalize(v[0]);
            let y = t.gelu(y);
            Ok(t.sum(y))
        }),
        ("attention", vec![vec![2, 3, 4], vec![2, 5, 4], vec![2, 5, 4]], |t, v| {
            let y = t.attention(v[0], v[1], v[2], 2, 0.0)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        }),
        ("concat_slice", vec![vec![2, 3], vec![2, 2]], |t, v| {
            let y = t.concat_last(&[v[0], v[1]])?;
            let y = t.gelu(y);
            let y = t.slice_last(y, 1, 3)?;
            Ok(t.sum(y))
        }),
        ("scale_by_relu", vec![vec![3, 3], vec![1]], |t, v| {
            let y = t.scale_by(v[0], v[1])?;
            let y = t.relu(y);
            Ok(t.sum(y))
        }),
        ("row_dot", vec![vec![2, 4], vec![2, 3, 4]], |t, v| {
            let y = t.row_dot(v[0], v[1])?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        }),
        ("cross_entropy", vec![vec![3, 4]], |t, v| {
            let p = t.softmax(v[0], 1)?;
            t.cross_entropy_from_probs(p, &[0, 3, 1], 1e-12)
        }),
    ]
}

/// Named check reports: one per operation, then the full loss.
pub fn run_all(opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in op_suite().into_iter().enumerate() {
        let mut rng = seeded(opts.seed, 200 + i as u64);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(k, s)| store.add(format!("x{k}"), Tensor::from_fn(s, |_| rng.random_range(-1.5..1.5)), true))
            .collect();
        let report = grad_check(
            &mut store,
            &ids,
            |tape, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
                f(tape, &vars)
            },
            opts,
        )?;
        out.push((name.to_string(), report));
    }
    out.push(("full_loss".to_string(), full_loss_check(Variant::Full, opts.seed.wrapping_add(3), opts)?));
    Ok(out)
}
