use proptest::prelude::*;

use wla::griddata::{GridField, LatWeights, PvsMeta};
use wla::metrics::{bpsp, mae_map, sedi, sedi_score, weighted_rmse, weighted_rmse_pooled, SEDI_QUANTILES as QUANTILES};

fn field(h: usize, w: usize, values: Vec<f32>) -> GridField {
    GridField::on_default_grid(PvsMeta::parse_list("t850,tp1h").unwrap(), h, w, values).unwrap()
}

fn grid() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>)> {
    (2usize..8, 2usize..8).prop_flat_map(|(h, w)| {
        let n = 2 * h * w;
        (Just(h), Just(w), prop::collection::vec(-50f32..50.0, n), prop::collection::vec(-50f32..50.0, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rmse_is_a_symmetric_scaled_norm((h, w, a, b) in grid(), k in 0.1f32..4.0) {
        let (x, y) = (field(h, w, a.clone()), field(h, w, b.clone()));
        let lw = LatWeights::from_lats(x.lats()).unwrap();
        let r = weighted_rmse(&x, &y, &lw).unwrap();
        let r2 = weighted_rmse(&y, &x, &lw).unwrap();
        prop_assert!(r.iter().all(|v| *v >= 0.0));
        for (u, v) in r.iter().zip(&r2) {
            prop_assert!((u - v).abs() <= 1e-9 * u.max(1.0));
        }
        let xs = field(h, w, a.iter().map(|v| v * k).collect());
        let ys = field(h, w, b.iter().map(|v| v * k).collect());
        let rs = weighted_rmse(&xs, &ys, &lw).unwrap();
        for (u, v) in r.iter().zip(&rs) {
            prop_assert!((v - u * k as f64).abs() <= 1e-4 * v.max(1.0));
        }
        prop_assert!(weighted_rmse(&x, &x, &lw).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pooling_one_pair_is_the_plain_rmse((h, w, a, b) in grid()) {
        let (x, y) = (field(h, w, a), field(h, w, b));
        let lw = LatWeights::from_lats(x.lats()).unwrap();
        let one = weighted_rmse(&x, &y, &lw).unwrap();
        let pooled = weighted_rmse_pooled(&[(x.clone(), y.clone()), (x, y)], &lw).unwrap();
        for (u, v) in one.iter().zip(&pooled) {
            prop_assert!((u - v).abs() <= 1e-9 * u.max(1.0));
        }
    }

    #[test]
    fn mae_map_is_pointwise((h, w, a, b) in grid()) {
        let m = mae_map(&field(h, w, a.clone()), &field(h, w, b.clone())).unwrap();
        for ((v, x), y) in m.values().iter().zip(&a).zip(&b) {
            prop_assert!((v - (x - y).abs()).abs() <= 1e-5);
        }
    }

    #[test]
    fn sedi_is_bounded(h in 0f64..1.0, f in 0f64..1.0) {
        let s = sedi_score(h, f, 1e-6);
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((sedi_score(f, h, 1e-6) + s).abs() < 1e-12);
    }

    #[test]
    fn perfect_forecast_scores_near_one((h, w, a, _) in grid()) {
        let mut a = a;
        // Distinct values so every threshold separates events from non-events.
        for (i, v) in a.iter_mut().enumerate() {
            *v += i as f32 * 1e-3;
        }
        let x = field(h, w, a);
        let r = sedi(&x, &x, &QUANTILES, 1e-6).unwrap();
        for c in 0..2 {
            for q in QUANTILES {
                if let Some(s) = r.score(c, q).unwrap().sedi {
                    prop_assert!(s > 0.99, "channel {} q {} sedi {}", c, q, s);
                }
            }
        }
    }

    #[test]
    fn bpsp_times_ratio_is_32(bits in 1u64..1_000_000, c in 1usize..30, h in 1usize..100, w in 1usize..100) {
        let b = bpsp(bits, c, h, w);
        let ratio = (c * h * w) as f64 * 32.0 / bits as f64;
        prop_assert!((b * ratio - 32.0).abs() < 1e-9);
    }
}

#[test]
fn equal_rates_give_zero() {
    for p in [0.01, 0.2, 0.5, 0.77] {
        assert!(sedi_score(p, p, 1e-6).abs() < 1e-12);
    }
    assert!((sedi_score(0.9, 0.1, 1e-6) - 0.9125).abs() < 1e-4);
}
