use super::*;
use crate::numeric::{grad_check, GradCheckOptions, ParamId};

pub(crate) use crate::workbench::gradcheck::{micro_architecture as micro_arch, micro_batch};

#[test]
fn full_loss_gradcheck_on_micro_instance() {
    let mut model = CompositionModel::new(&micro_arch(Variant::Full), 2, 2, 3).unwrap();
    let (x, labels, seen) = micro_batch(3);
    let leaves: Vec<ParamId> = model.store.trainable().collect();
    let probe = model.clone();
    let t0 = std::time::Instant::now();
    let report = grad_check(
        &mut model.store,
        &leaves,
        |tape, store| {
            Ok(probe.loss_with(store, tape, VisualInput::Raw(&x), &labels, &seen)?.total)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    eprintln!("{report:?} in {:?}", t0.elapsed());
    assert!(report.passed(), "{report:?}");
}
