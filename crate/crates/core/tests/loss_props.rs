use dogma_core::anchor::{AnchorSet, LabelTensors, SpatialWeightMap};
use dogma_core::loss::{dynamic_loss_term, loss_gradient, total_loss, LossConfig};
use dogma_core::GridGeometry;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    preds: LabelTensors,
    labels: LabelTensors,
    a_map: SpatialWeightMap,
    cfg: LossConfig,
}

fn random_tensors(rng: &mut ChaCha8Rng, g: &GridGeometry, anchors: &AnchorSet) -> LabelTensors {
    let mut t = LabelTensors::zeros(g, anchors);
    for head in t.heads_mut() {
        for v in head.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    t
}

fn instance(seed: u64, cells: usize, ns: usize, no: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GridGeometry::centered(cells, 0.15).unwrap();
    let anchors = AnchorSet {
        sizes: (0..ns).map(|i| (0.6 + i as f64, 1.2 + i as f64)).collect(),
        orientations: (0..no).map(|k| k as f64 * std::f64::consts::PI / no as f64).collect(),
    };
    let preds = random_tensors(&mut rng, &g, &anchors);
    let labels = random_tensors(&mut rng, &g, &anchors);
    let a = (0..g.cell_count())
        .map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..=1.0) })
        .collect();
    let mut w = || rng.random_range(0.0..2.0);
    let cfg = LossConfig {
        lambda_static: w(),
        lambda_iou: w(),
        lambda_dw: w(),
        lambda_dl: w(),
        lambda_dphi: w(),
        foreground_gain: rng.random_range(0.0..500.0),
        focus_iou: rng.random_range(0.0..5.0),
        focus_dw: rng.random_range(0.0..5.0),
        focus_dl: rng.random_range(0.0..5.0),
        focus_dphi: rng.random_range(0.0..5.0),
    };
    Instance {
        preds,
        labels,
        a_map: SpatialWeightMap { a },
        cfg,
    }
}

/// Straightforward triple loop, no shared helpers.
fn naive_loss(x: &Instance) -> f64 {
    let c = &x.cfg;
    let per_head = [
        (c.lambda_iou, c.focus_iou),
        (c.lambda_dw, c.focus_dw),
        (c.lambda_dl, c.focus_dl),
        (c.lambda_dphi, c.focus_dphi),
    ];
    let p = x.preds.heads();
    let y = x.labels.heads();
    let mut total = 0.0;
    for (h, &(lambda, f)) in per_head.iter().enumerate() {
        for cell in 0..p[h].cell_count() {
            let a: f64 = x.a_map.a[cell];
            let weight = 1.0 + c.foreground_gain * if f == 0.0 { 1.0 } else { a.powf(f) };
            for k in 0..p[h].channels() {
                let r = p[h].get(cell, k) - y[h].get(cell, k);
                total += lambda / 2.0 * weight * r * r;
            }
        }
    }
    for cell in 0..p[4].cell_count() {
        let r = p[4].get(cell, 0) - y[4].get(cell, 0);
        total += c.lambda_static / 2.0 * r * r;
    }
    total
}

fn loss_of(x: &Instance) -> f64 {
    total_loss(&x.preds, &x.labels, &x.a_map, &x.cfg).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_naive_reference(seed in any::<u64>(), cells in 1usize..8, ns in 1usize..4, no in 1usize..5) {
        let x = instance(seed, cells, ns, no);
        let (l, parts) = total_loss(&x.preds, &x.labels, &x.a_map, &x.cfg).unwrap();
        let reference = naive_loss(&x);
        prop_assert!((l - reference).abs() <= 1e-9 * reference.abs().max(f64::MIN_POSITIVE));
        prop_assert!((l - parts.total()).abs() <= 1e-12 * l.max(1.0));
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>(), cells in 1usize..5, ns in 1usize..3, no in 1usize..4) {
        let mut x = instance(seed, cells, ns, no);
        let grad = loss_gradient(&x.preds, &x.labels, &x.a_map, &x.cfg).unwrap();
        let h = 1e-4;
        for head in 0..5 {
            for i in 0..grad.heads()[head].as_slice().len() {
                let orig = x.preds.heads()[head].as_slice()[i];
                x.preds.heads_mut()[head].as_mut_slice()[i] = orig + h;
                let up = loss_of(&x);
                x.preds.heads_mut()[head].as_mut_slice()[i] = orig - h;
                let down = loss_of(&x);
                x.preds.heads_mut()[head].as_mut_slice()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grad.heads()[head].as_slice()[i];
                let scale = g.abs().max(fd.abs()).max(1e-3);
                prop_assert!((fd - g).abs() / scale < 1e-4, "head {head} elem {i}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn larger_residual_never_lowers_loss(seed in any::<u64>(), head in 0usize..5, grow in 0.0..3.0f64) {
        let mut x = instance(seed, 4, 2, 3);
        let before = loss_of(&x);
        let n = x.preds.heads()[head].as_slice().len();
        let i = (seed as usize) % n;
        let y = x.labels.heads()[head].as_slice()[i];
        let p = &mut x.preds.heads_mut()[head].as_mut_slice()[i];
        *p = y + (*p - y) * (1.0 + grow);
        prop_assert!(loss_of(&x) >= before);
    }

    #[test]
    fn zero_gain_is_plain_euclidean(seed in any::<u64>(), lambda in 0.0..3.0f64, focus in 0.0..6.0f64) {
        let x = instance(seed, 5, 2, 3);
        let got = dynamic_loss_term(&x.preds.iou, &x.labels.iou, &x.a_map, lambda, 0.0, focus).unwrap();
        let sq: f64 = x.preds.iou.as_slice().iter().zip(x.labels.iou.as_slice()).map(|(p, y)| (p - y).powi(2)).sum();
        prop_assert!((got - lambda / 2.0 * sq).abs() <= 1e-12 * sq.max(1.0));
    }

    #[test]
    fn perfect_prediction_costs_nothing(seed in any::<u64>()) {
        let x = instance(seed, 4, 2, 3);
        let (l, _) = total_loss(&x.labels, &x.labels, &x.a_map, &x.cfg).unwrap();
        prop_assert_eq!(l, 0.0);
        let g = loss_gradient(&x.labels, &x.labels, &x.a_map, &x.cfg).unwrap();
        prop_assert!(g.heads().iter().all(|h| h.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn background_gradient_ignores_gain(seed in any::<u64>(), gain in 0.0..1000.0f64) {
        let mut x = instance(seed, 4, 2, 3);
        x.a_map.a.iter_mut().step_by(2).for_each(|a| *a = 0.0);
        let g1 = loss_gradient(&x.preds, &x.labels, &x.a_map, &x.cfg).unwrap();
        x.cfg.foreground_gain = gain;
        let g2 = loss_gradient(&x.preds, &x.labels, &x.a_map, &x.cfg).unwrap();
        for c in (0..x.a_map.a.len()).step_by(2) {
            prop_assert_eq!(g1.iou.cell(c), g2.iou.cell(c));
        }
    }
}

#[test]
fn foreground_cell_outweighs_background_401_to_1() {
    let x = instance(7, 1, 1, 1);
    let cfg = LossConfig::default();
    let g = |a: f64| {
        let map = SpatialWeightMap { a: vec![a] };
        loss_gradient(&x.preds, &x.labels, &map, &cfg).unwrap().iou.get(0, 0)
    };
    assert!((g(1.0) / g(0.0) - 401.0).abs() < 1e-12);
}
