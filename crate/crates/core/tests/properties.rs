use ipf::ipf::IpfField;
use ipf::metrics;
use ipf::net::{self, SnMlp, TrainConfig};
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(max_rows: usize, min_cols: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, min_cols..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

/// Reference set and a query of matching width.
fn field_case() -> impl Strategy<Value = (Array2<f64>, Vec<f64>, f64)> {
    matrix(40, 1, 6).prop_flat_map(|m| {
        let d = m.ncols();
        (Just(m), prop::collection::vec(-3.0f64..3.0, d), 0.05f64..3.0)
    })
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-300
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn psi_in_unit_interval((refs, q, h) in field_case()) {
        let field = IpfField::new(refs.clone(), h).unwrap();
        let psi = field.evaluate_one(&q).unwrap();
        prop_assert!((0.0..=1.0).contains(&psi));
        // a reference row always collects at least its own term
        let at_row = field.evaluate_one(refs.row(0).as_slice().unwrap()).unwrap();
        prop_assert!(at_row >= 1.0 / refs.nrows() as f64 * (1.0 - 1e-12));
    }

    #[test]
    fn translation_invariant((refs, q, h) in field_case(), shift in -5.0f64..5.0) {
        let a = IpfField::new(refs.clone(), h).unwrap().evaluate_one(&q).unwrap();
        let moved: Vec<f64> = q.iter().map(|v| v + shift).collect();
        let b = IpfField::new(refs + shift, h).unwrap().evaluate_one(&moved).unwrap();
        prop_assert!(close(a, b, 1e-9) || (a < 1e-250 && b < 1e-250), "{} vs {}", a, b);
    }

    #[test]
    fn reference_order_irrelevant((refs, q, h) in field_case(), seed in any::<u64>()) {
        let n = refs.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled = refs.select(ndarray::Axis(0), &order);
        let a = IpfField::new(refs, h).unwrap().evaluate_one(&q).unwrap();
        let b = IpfField::new(shuffled, h).unwrap().evaluate_one(&q).unwrap();
        prop_assert!(close(a, b, 1e-12), "{} vs {}", a, b);
    }

    #[test]
    fn psi_nondecreasing_in_bandwidth((refs, q, h) in field_case(), grow in 1.0f64..3.0) {
        let a = IpfField::new(refs.clone(), h).unwrap().evaluate_one(&q).unwrap();
        let b = IpfField::new(refs, h * grow).unwrap().evaluate_one(&q).unwrap();
        prop_assert!(b >= a * (1.0 - 1e-12));
    }

    #[test]
    fn log_mode_agrees((refs, q, h) in field_case()) {
        let field = IpfField::new(refs, h).unwrap();
        let psi = field.evaluate_one(&q).unwrap();
        let q2 = Array2::from_shape_vec((1, q.len()), q).unwrap();
        let log = field.evaluate_log(q2.view()).unwrap()[0];
        if psi > 1e-300 {
            prop_assert!((psi.ln() - log).abs() <= 1e-9 * log.abs().max(1.0));
        }
    }

    #[test]
    fn auroc_complement(
        a in prop::collection::vec(0u8..10, 1..60),
        b in prop::collection::vec(0u8..10, 1..60),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let x = metrics::auroc(&a, &b).unwrap();
        let y = metrics::auroc(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x + y - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ece_bounded_and_order_free(
        rows in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..80),
        bins in 1usize..25,
    ) {
        let conf: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let correct: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let e = metrics::ece(&conf, &correct, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let rc: Vec<f64> = conf.iter().rev().copied().collect();
        let rk: Vec<bool> = correct.iter().rev().copied().collect();
        prop_assert!((metrics::ece(&rc, &rk, bins).unwrap() - e).abs() <= 1e-12);
    }

    #[test]
    fn entropy_invariants(logits in matrix(10, 2, 8), shift in -50.0f64..50.0) {
        let c = logits.ncols() as f64;
        let h = metrics::softmax_entropy(logits.view()).unwrap();
        let shifted = metrics::softmax_entropy((&logits + shift).view()).unwrap();
        let reversed = logits.slice(ndarray::s![.., ..;-1]).to_owned();
        let rev = metrics::softmax_entropy(reversed.view()).unwrap();
        for (i, row) in logits.rows().into_iter().enumerate() {
            prop_assert!(h[i] >= -1e-12 && h[i] <= c.ln() + 1e-12);
            prop_assert!((h[i] - shifted[i]).abs() <= 1e-9);
            prop_assert!((h[i] - rev[i]).abs() <= 1e-12);
            prop_assert!((h[i] - entropy_oracle(row.as_slice().unwrap())).abs() <= 1e-12);
        }
    }
}

/// Entropy with the probabilities summed smallest first after normalizing
/// against the largest logit.
fn entropy_oracle(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    w.sort_by(f64::total_cmp);
    let z: f64 = w.iter().sum();
    let mut terms: Vec<f64> = w.iter().map(|x| x / z).filter(|&p| p > 0.0).map(|p| -p * p.ln()).collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn spectral_norm(w: &Array2<f64>) -> f64 {
    DMatrix::from_row_slice(w.nrows(), w.ncols(), w.as_slice().unwrap()).singular_values().max()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    /// The observed feature-map Lipschitz ratio never exceeds the product
    /// bound built from exact spectral norms.
    #[test]
    fn lipschitz_probe_under_bound(
        seed in any::<u64>(),
        sn in any::<bool>(),
        pairs in prop::collection::vec(((-4.0f64..4.0, -4.0f64..4.0), (-4.0f64..4.0, -4.0f64..4.0)), 1..40),
    ) {
        let cfg = TrainConfig { hidden_dim: 16, num_blocks: 3, seed, sn_enabled: sn, ..TrainConfig::default() };
        let mut model = SnMlp::new(2, 2, &cfg).unwrap();
        // scale the blocks up so normalization has something to do
        for layer in model.layers_mut()[1..=3].iter_mut() {
            layer.weight *= 4.0;
        }
        if sn {
            model.apply_spectral_norm();
        }
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = pairs
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|((a0, a1), (b0, b1))| (vec![a0, a1], vec![b0, b1]))
            .collect();
        prop_assume!(!pairs.is_empty());
        let s_in = spectral_norm(&model.layers()[0].weight);
        let blocks: Vec<f64> = model.normalized_layers().iter().map(|l| spectral_norm(&l.weight)).collect();
        let bound = net::residual_lipschitz_bound(s_in, &blocks);
        let observed = model.lipschitz_probe(&pairs).unwrap();
        prop_assert!(observed <= bound * (1.0 + 1e-9), "{} > {}", observed, bound);
    }
}
