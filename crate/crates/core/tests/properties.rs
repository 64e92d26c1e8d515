use gemfi::autodiff::{Tape, Tensor};
use gemfi::metrics::{aupr, auroc, brier, ece, uncertainty_scores, ScoreKind, ScoredEvalSet};
use gemfi::model::{GemConfig, GemModel, Variant};
use gemfi::networks::{ArchConfig, Graph, GemNetworks};
use gemfi::run::heatmap_grid;
use gemfi::trainer::AdamW;
use proptest::prelude::*;

fn norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Largest observed `‖f(x) − f(x')‖ / ‖x − x'‖` of the backbone over random pairs.
fn lipschitz_probe(coeff: f64, weight_scale: f64, seed: u64, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let arch = ArchConfig {
        sn_coeff: coeff,
        ..ArchConfig::toy2d()
    };
    let mut nets = GemNetworks::new(&arch, 1, true, seed).unwrap();
    for l in &nets.backbone.layers {
        let w = nets.store.get_mut(l.weight);
        *w = w.map(|v| v * weight_scale);
    }
    nets.power_iterate(300);
    let xs: Vec<Vec<f64>> = pairs.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &nets.store, false, None);
    let x = g.tape.constant(Tensor::from_rows(&xs).unwrap());
    let z = nets.backbone_forward(&mut g, x).unwrap();
    let z = g.tape.value(z).clone();
    (0..pairs.len())
        .map(|i| norm(z.row(2 * i), z.row(2 * i + 1)) / norm(&xs[2 * i], &xs[2 * i + 1]).max(1e-12))
        .fold(0.0, f64::max)
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 2)
}

fn pairs() -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>)>> {
    prop::collection::vec(
        (point(), prop::collection::vec(-0.05..0.05f64, 2)).prop_map(|(a, d)| {
            let b = vec![a[0] + d[0], a[1] + d[1]];
            (a, b)
        }),
        32,
    )
}

fn features(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, n * 17)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn unit_coefficient_backbone_is_lipschitz(seed in 0u64..1000, scale in 0.2..20.0f64, p in pairs()) {
        // three tanh layers, each 1-Lipschitz after normalization
        let bound = 1.05f64.powi(3);
        prop_assert!(lipschitz_probe(1.0, scale, seed, &p) <= bound);
    }

    #[test]
    fn default_coefficient_scales_the_bound(seed in 0u64..1000, scale in 0.2..20.0f64, p in pairs()) {
        let c = ArchConfig::toy2d().sn_coeff;
        prop_assert!(lipschitz_probe(c, scale, seed, &p) <= (1.05 * c).powi(3));
    }

    #[test]
    fn gate_stays_within_bounds(seed in 0u64..1000, zs in features(8), lo in 0.0..0.4f64, width in 0.1..0.6f64) {
        let nets = GemNetworks::new(&ArchConfig::toy2d(), 1, false, seed).unwrap();
        let hi = lo + width;
        let rows: Vec<Vec<f64>> = zs.chunks(17).map(<[f64]>::to_vec).collect();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &nets.store, false, None);
        let z = g.tape.constant(Tensor::from_rows(&rows.iter().map(|r| r[..16].to_vec()).collect::<Vec<_>>()).unwrap());
        let s = g.tape.constant(Tensor::col_vector(&rows.iter().map(|r| r[16]).collect::<Vec<_>>()));
        let gate = nets.gate_forward(&mut g, z, s, (lo, hi)).unwrap();
        let gate = g.tape.value(gate);
        prop_assert_eq!(gate.cols(), 2);
        prop_assert!(gate.data().iter().all(|v| (lo..=hi).contains(v)));
    }

    #[test]
    fn router_rows_lie_on_the_simplex(seed in 0u64..1000, heads in 1usize..6, zs in features(8)) {
        let nets = GemNetworks::new(&ArchConfig::toy2d(), heads, false, seed).unwrap();
        let rows: Vec<Vec<f64>> = zs.chunks(17).map(<[f64]>::to_vec).collect();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &nets.store, false, None);
        let z = g.tape.constant(Tensor::from_rows(&rows.iter().map(|r| r[..16].to_vec()).collect::<Vec<_>>()).unwrap());
        let s = g.tape.constant(Tensor::col_vector(&rows.iter().map(|r| r[16]).collect::<Vec<_>>()));
        let pi = nets.router_forward(&mut g, z, s).unwrap();
        let pi = g.tape.value(pi);
        prop_assert_eq!(pi.cols(), heads);
        for r in pi.iter_rows() {
            prop_assert!(r.iter().all(|v| *v >= 0.0 && *v <= 1.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_without_decay_ignores_zero_gradients(seed in 0u64..1000, steps in 1usize..5, lr in 1e-5..1e-1f64) {
        let mut nets = GemNetworks::new(&ArchConfig::toy2d(), 2, true, seed).unwrap();
        let before = nets.store.clone();
        let zeros: Vec<Tensor> = nets.store.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        let mut opt = AdamW::new(&nets.store, 0.0);
        for _ in 0..steps {
            opt.update(&mut nets.store, &zeros, lr).unwrap();
        }
        prop_assert_eq!(before, nets.store);
    }

    #[test]
    fn auroc_is_a_bounded_rank_statistic(
        neg in prop::collection::vec(0u8..20, 1..40),
        pos in prop::collection::vec(0u8..20, 1..40),
    ) {
        let n: Vec<f64> = neg.iter().map(|v| *v as f64).collect();
        let p: Vec<f64> = pos.iter().map(|v| *v as f64).collect();
        let set = ScoredEvalSet::from_groups(&n, &p).unwrap();
        let a = auroc(&set).unwrap();
        let pr = aupr(&set).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&pr));
        // negating scores mirrors the curve
        let flipped = ScoredEvalSet::from_groups(&n.iter().map(|v| -v).collect::<Vec<_>>(), &p.iter().map(|v| -v).collect::<Vec<_>>()).unwrap();
        prop_assert!((auroc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        // strictly increasing transforms change nothing
        let warp = |v: &f64| (v / 7.0).exp() + v;
        let warped = ScoredEvalSet::from_groups(&n.iter().map(warp).collect::<Vec<_>>(), &p.iter().map(warp).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(auroc(&warped).unwrap(), a);
        prop_assert_eq!(aupr(&warped).unwrap(), pr);
    }

    #[test]
    fn ece_and_brier_are_bounded(
        rows in prop::collection::vec((prop::collection::vec(0.01..1.0f64, 3), 0usize..3), 1..60),
        bins in 1usize..30,
    ) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|(r, _)| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        }).collect();
        let labels: Vec<usize> = rows.iter().map(|(_, y)| *y).collect();
        let p = Tensor::from_rows(&probs).unwrap();
        let pred = p.argmax_rows();
        let conf: Vec<f64> = probs.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
        let correct: Vec<bool> = pred.iter().zip(&labels).map(|(a, b)| a == b).collect();
        let e = ece(&conf, &correct, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let b = brier(&p, &labels).unwrap();
        prop_assert!((0.0..=2.0).contains(&b));
    }
}

#[test]
fn zero_network_gives_uniform_entropy_everywhere() {
    let mut model = GemModel::new(GemConfig::preset(Variant::EdlBaseline, ArchConfig::toy2d()), 0).unwrap();
    for p in model.nets.store.iter_mut() {
        p.value = p.value.map(|_| 0.0);
    }
    let grid = heatmap_grid(&model, ScoreKind::Entropy, (-3.0, 3.0), (-2.0, 2.0), 16).unwrap();
    assert_eq!(grid.values.len(), 256);
    assert!(grid.values.iter().all(|v| (v - 2f64.ln()).abs() < 1e-12));
    let d = model.predict(&Tensor::from_rows(&[vec![0.0, 0.0], vec![100.0, -100.0]]).unwrap()).unwrap();
    let s = uncertainty_scores(&d, None);
    assert!(s.get(ScoreKind::Maxp).iter().all(|v| (v + 0.5).abs() < 1e-12));
    assert!(s.mi_single_head && s.mi.iter().all(|v| *v == 0.0));
}
