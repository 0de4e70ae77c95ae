use proptest::prelude::*;

use super::*;

/// Literal biased-argmax evaluation at one bias inside every interval
/// between distinct per-item gaps.
fn brute_force(rows: &[Vec<f64>], truth: &[Truth], seen: &[bool]) -> CurveSummary {
    let mut gaps = Vec::new();
    for row in rows {
        let ms = row.iter().zip(seen).filter(|(_, &s)| s).map(|(&v, _)| v).reduce(f64::max);
        let mu = row.iter().zip(seen).filter(|(_, &s)| !s).map(|(&v, _)| v).reduce(f64::max);
        if let (Some(a), Some(b)) = (ms, mu) {
            gaps.push(a - b);
        }
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    gaps.dedup();
    let mut biases = Vec::new();
    if gaps.is_empty() {
        biases.push(0.0);
    } else {
        biases.push(gaps[0] - 2.0 * (1.0 + gaps[0].abs()));
        for w in gaps.windows(2) {
            biases.push((w[0] + w[1]) / 2.0);
        }
        let last = *gaps.last().unwrap();
        biases.push(last + 2.0 * (1.0 + last.abs()));
    }
    let n_seen = truth.iter().filter(|t| t.seen).count() as f64;
    let n_unseen = truth.iter().filter(|t| !t.seen).count() as f64;
    let mut pts = Vec::new();
    for b in biases {
        let (mut cs, mut cu) = (0.0, 0.0);
        for (row, t) in rows.iter().zip(truth) {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                let v = if seen[c] { v } else { v + b };
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            if t.column == Some(best) {
                if t.seen {
                    cs += 1.0;
                } else {
                    cu += 1.0;
                }
            }
        }
        pts.push((cs / n_seen, cu / n_unseen));
    }
    let mut auc = 0.0;
    for w in pts.windows(2) {
        auc += (w[1].1 - w[0].1) * (w[0].0 + w[1].0) / 2.0;
    }
    let hm = |s: f64, u: f64| if s + u == 0.0 { 0.0 } else { 2.0 * s * u / (s + u) };
    CurveSummary {
        seen: pts.iter().map(|p| p.0).fold(0.0, f64::max),
        unseen: pts.iter().map(|p| p.1).fold(0.0, f64::max),
        hm: pts.iter().map(|p| hm(p.0, p.1)).fold(0.0, f64::max),
        auc,
    }
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Truth>, Vec<bool>)> {
    (2usize..=8, 2usize..=6).prop_flat_map(|(n, p)| {
        let seen = proptest::collection::vec(any::<bool>(), p);
        let value = prop_oneof![(0u8..5).prop_map(|k| k as f64 * 0.25), -1.0f64..1.0];
        let rows = proptest::collection::vec(proptest::collection::vec(value, p), n);
        let truth = proptest::collection::vec(
            (proptest::option::weighted(0.9, 0..p), any::<bool>()),
            n,
        );
        (rows, truth, seen)
    })
    .prop_map(|(rows, truth, mut seen)| {
        // Labels follow the seen flag of the true column when it is a candidate.
        let mut truth: Vec<Truth> = truth
            .into_iter()
            .map(|(column, s)| Truth { column, seen: column.map_or(s, |c| seen[c]) })
            .collect();
        if !truth.iter().any(|t| t.seen) {
            seen[0] = true;
            truth[0] = Truth { column: Some(0), seen: true };
        }
        if !truth.iter().any(|t| !t.seen) {
            let last = seen.len() - 1;
            if last == 0 || seen[..last].iter().all(|s| !s) {
                truth[1] = Truth { column: None, seen: false };
            } else {
                seen[last] = false;
                for t in truth.iter_mut() {
                    if t.column == Some(last) {
                        t.seen = false;
                    }
                }
                truth[1] = Truth { column: Some(last), seen: false };
            }
        }
        // Keep labels consistent after flag edits.
        for t in truth.iter_mut() {
            if let Some(c) = t.column {
                t.seen = seen[c];
            }
        }
        (rows, truth, seen)
    })
    .prop_filter("both subsets present", |(_, t, _)| {
        t.iter().any(|t| t.seen) && t.iter().any(|t| !t.seen)
    })
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let w = rows[0].len();
    Tensor::new(vec![rows.len(), w], rows.concat()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1500))]

    #[test]
    fn sweep_equals_brute_force((rows, truth, seen) in instance()) {
        let curve = bias_sweep(&to_tensor(&rows), &truth, &seen).unwrap();
        prop_assert_eq!(curve.summary, brute_force(&rows, &truth, &seen));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].seen_acc <= w[0].seen_acc);
            prop_assert!(w[1].unseen_acc >= w[0].unseen_acc);
        }
        for p in &curve.points {
            prop_assert!(curve.summary.hm >= harmonic_mean(p.seen_acc, p.unseen_acc));
        }
        prop_assert!((0.0..=1.0).contains(&curve.summary.auc));
    }

    #[test]
    fn shifting_an_item_leaves_the_curve((rows, truth, seen) in instance(), shift in -3i32..3) {
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift as f64).collect()).collect();
        let a = bias_sweep(&to_tensor(&rows), &truth, &seen).unwrap();
        let b = bias_sweep(&to_tensor(&shifted), &truth, &seen).unwrap();
        prop_assert_eq!(a.summary, b.summary);
    }
}

#[test]
fn perfect_classifier_scores_one() {
    let seen = vec![true, true, false, false];
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..8 {
        let c = i % 4;
        let mut row = vec![0.1; 4];
        row[c] = 0.9;
        rows.push(row);
        truth.push(Truth { column: Some(c), seen: seen[c] });
    }
    let s = bias_sweep(&to_tensor(&rows), &truth, &seen).unwrap().summary;
    for v in [s.seen, s.unseen, s.hm, s.auc] {
        assert!((v - 1.0).abs() < 1e-9);
    }
}

#[test]
fn always_wrong_classifier_has_zero_auc() {
    let seen = vec![true, true, false, false];
    let rows = vec![
        vec![0.1, 0.9, 0.5, 0.6],
        vec![0.9, 0.1, 0.2, 0.3],
        vec![0.5, 0.4, 0.1, 0.8],
        vec![0.2, 0.3, 0.7, 0.1],
    ];
    let truth = vec![
        Truth { column: Some(0), seen: true },
        Truth { column: Some(1), seen: true },
        Truth { column: Some(2), seen: false },
        Truth { column: Some(3), seen: false },
    ];
    assert_eq!(bias_sweep(&to_tensor(&rows), &truth, &seen).unwrap().summary.auc, 0.0);
}

#[test]
fn empty_subsets_are_undefined() {
    let t = to_tensor(&[vec![0.5, 0.2]]);
    let r = bias_sweep(&t, &[Truth { column: Some(0), seen: true }], &[true, false]);
    match r {
        Err(Error::UndefinedMetric(m)) => assert!(m.contains("unseen")),
        other => panic!("{other:?}"),
    }
    let r = bias_sweep(&t, &[Truth { column: Some(1), seen: false }], &[true, false]);
    assert!(matches!(r, Err(Error::UndefinedMetric(m)) if m.contains("seen")));
}

#[test]
fn summary_csv_round_trips() {
    let rows = vec![SummaryRow {
        dataset: "synthetic".into(),
        world: World::Open,
        seed: 3,
        summary: CurveSummary { seen: 0.1 + 0.2, unseen: 1.0 / 3.0, hm: 0.4, auc: 1e-17 },
    }];
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("dataset,world,seed,S,U,HM,AUC\n"));
    assert_eq!(read_summary_csv(&text).unwrap(), rows);
}

#[test]
fn closed_and_open_candidate_counts() {
    let space = CompositionSpace::indexed(3, 4, [Pair::new(0, 0), Pair::new(1, 1), Pair::new(2, 2)], [Pair::new(0, 3)], World::Closed).unwrap();
    assert_eq!(space.candidates().len(), 4);
    assert_eq!(space.with_world(World::Open).candidates().len(), 12);
}

#[test]
fn evaluate_logits_normalizes_over_active_set() {
    let space = CompositionSpace::indexed(2, 2, [Pair::new(0, 0), Pair::new(1, 1)], [Pair::new(0, 1)], World::Open).unwrap();
    let all = space.candidates();
    let logits = BranchLogits {
        com: Tensor::new(vec![2, 4], vec![3.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap(),
        state: Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
        obj: Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
        candidates: all.clone(),
    };
    let truth = [Pair::new(0, 0), Pair::new(0, 1)];
    let rep = evaluate_logits(&logits, &all, &truth, &space, 1.0).unwrap();
    assert_eq!(rep.active_candidates, 4);
    assert_eq!(rep.seen_acc_at_zero, 1.0);
    assert_eq!(rep.unseen_acc_at_zero, 1.0);
    assert_eq!(rep.state_acc, 1.0);
    assert_eq!(rep.object_acc, 0.5);
    let missing = CandidateSet { pairs: vec![Pair::new(1, 0)], seen: vec![false] };
    let partial = BranchLogits { candidates: missing, ..logits.clone() };
    assert!(matches!(evaluate_logits(&partial, &all, &truth, &space, 1.0), Err(Error::Integrity(_))));
}
