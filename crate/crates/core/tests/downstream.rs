mod support;

use support::models::{tiny_config, tiny_meta};
use wla::bqm::LatentBits;
use wla::downstream::{
    advective_sequence, bce_loss, evaluate_forecast, pairs_from_sequence, pixel_baseline, train_forecaster,
    DynamicsParams, FitConfig, ForecastModel, ForecastPair, Forecaster, ForecasterConfig, LatentModel, Persistence,
    PixelConfig, WindowConfig, REPORT_HEADER,
};
use wla::griddata::{GridField, LatWeights, NormStats};
use wla::metrics::{weighted_rmse, weighted_rmse_pooled};
use wla::model::Wla;
use wla::numerics::{Graph, Tensor};

const SMALL: WindowConfig = WindowConfig { window: 3, depth: 1, d_model: 16, heads: 2, mlp_ratio: 2 };

fn quick_fit(steps: u64) -> FitConfig {
    FitConfig { steps, batch: 4, warmup: 2, ..FitConfig::desk() }
}

struct Toy {
    wla: Wla,
    seq: Vec<GridField>,
    bits: Vec<LatentBits>,
}

fn toy(steps: usize, seed: u64) -> Toy {
    let meta = tiny_meta();
    let seq = advective_sequence(&meta, 16, 16, steps, seed, &DynamicsParams::default()).unwrap();
    let wla = Wla::new(tiny_config(meta, 1), NormStats::fit(&seq).unwrap()).unwrap();
    let bits = seq.iter().map(|f| wla.encode(f).unwrap()).collect();
    Toy { wla, seq, bits }
}

#[test]
fn lead_zero_is_the_autoencoder_round_trip() {
    let t = toy(12, 3);
    let f = Forecaster::new(ForecasterConfig { window: SMALL, ..ForecasterConfig::desk((3, 3), 8) }).unwrap();
    let latent = LatentModel { name: "latent".into(), model: &f };
    let inits = [0, 3, 6];
    let report = evaluate_forecast(&[&latent, &Persistence], &t.wla, &t.bits, &t.seq, &inits, 2).unwrap();
    let pairs: Vec<(GridField, GridField)> =
        inits.iter().map(|&i| (t.wla.round_trip(&t.seq[i]).unwrap(), t.seq[i].clone())).collect();
    let expected = weighted_rmse_pooled(&pairs, &t.wla.lat_weights()).unwrap();
    for name in ["latent", "persistence"] {
        let got = report.rmse(name, 0);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{name}: {a} vs {b}");
        }
        assert!(report.rows_for(name, 0).all(|r| r.bit_accuracy == 1.0 && r.finite));
    }
    assert_eq!(report.rows.len(), 2 * 3 * 3);
}

/// Periodic advection recurs once the accumulated shift passes half the
/// width (about five steps on 64 columns), so leads stop short of that and the
/// error is pooled over an ensemble of sequences.
#[test]
fn persistence_error_grows_with_lead_on_the_dynamics() {
    let seqs: Vec<Vec<GridField>> =
        (0..8).map(|s| advective_sequence(&tiny_meta(), 64, 64, 34, s, &DynamicsParams::default()).unwrap()).collect();
    let w = LatWeights::from_lats(seqs[0][0].lats()).unwrap();
    let mut prev = vec![0.0; 3];
    for lead in 1..=4 {
        let pairs: Vec<_> =
            seqs.iter().flat_map(|q| (0..30).step_by(3).map(move |i| (q[i].clone(), q[i + lead].clone()))).collect();
        let r = weighted_rmse_pooled(&pairs, &w).unwrap();
        for (c, (now, before)) in r.iter().zip(&prev).enumerate() {
            assert!(now >= before, "channel {c}, lead {lead}: {now} < {before}");
        }
        prev = r;
    }
}

#[test]
fn dynamics_shift_is_visible_at_full_memory() {
    let p = DynamicsParams { memory: 1.0, ..DynamicsParams::default() };
    let seq = advective_sequence(&tiny_meta(), 16, 16, 2, 4, &p).unwrap();
    let (a, b) = (&seq[0], &seq[1]);
    for c in 0..3 {
        for i in 0..16 {
            for j in 0..16 {
                let want = a.channel(c)[i * 16 + (j + 16 - 6) % 16];
                assert!((b.channel(c)[i * 16 + j] - want).abs() <= want.abs() * 1e-6);
            }
        }
    }
    assert!(weighted_rmse(a, b, &LatWeights::from_lats(a.lats()).unwrap()).unwrap().iter().all(|&v| v > 0.0));
}

#[test]
fn forecaster_output_shape_and_persistence_head() {
    let t = toy(3, 1);
    let f = Forecaster::new(ForecasterConfig { window: SMALL, ..ForecasterConfig::desk((3, 3), 8) }).unwrap();
    assert_eq!(f.forward(&t.bits[0]).unwrap().shape(), &[9, 8]);
    let p = Forecaster::persistence((3, 3), 8).unwrap();
    for b in &t.bits {
        assert_eq!(&p.predict(b).unwrap(), b);
    }
    let rollout = Persistence.rollout(&t.bits[0], &t.seq[0], &t.wla, 2).unwrap();
    assert!(rollout.iter().all(|r| r.bits == t.bits[0]));
}

#[test]
fn saturated_logits_drive_bce_to_zero() {
    let t = toy(2, 2);
    let target = &t.bits[0];
    let targets: Tensor<f64> = target.targets();
    let mut g = Graph::<f64>::new();
    let logits = g.constant(targets.map(|y| if y > 0.5 { 40.0 } else { -40.0 }));
    let l = bce_loss(&mut g, logits, target).unwrap();
    assert!(g.value(l).data()[0] < 1e-15);
}

#[test]
fn training_on_tokens_lowers_the_loss() {
    let t = toy(24, 5);
    let pairs = pairs_from_sequence(&t.bits).unwrap();
    let mut f = Forecaster::new(ForecasterConfig { window: SMALL, ..ForecasterConfig::desk((3, 3), 8) }).unwrap();
    let curve = train_forecaster(&mut f, &quick_fit(60), &pairs).unwrap();
    let head: f64 = curve[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = curve[curve.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.wckp");
    f.save(&path).unwrap();
    let back = Forecaster::load(&path).unwrap();
    assert_eq!(back.forward(&t.bits[0]).unwrap(), f.forward(&t.bits[0]).unwrap());
}

#[test]
fn mismatched_pairs_are_refused() {
    let a = LatentBits::new(3, 3, 8, vec![0; 9]).unwrap();
    let b = LatentBits::new(3, 4, 8, vec![0; 12]).unwrap();
    assert!(ForecastPair::new(a.clone(), b.clone()).is_err());
    assert!(pairs_from_sequence(&[a.clone(), b]).is_err());
    let f = Forecaster::persistence((3, 3), 16).unwrap();
    assert!(f.forward(&a).is_err());
}

#[test]
fn rollouts_past_the_sequence_are_refused() {
    let t = toy(5, 6);
    assert!(evaluate_forecast(&[&Persistence], &t.wla, &t.bits, &t.seq, &[2], 3).is_err());
    assert!(evaluate_forecast(&[&Persistence], &t.wla, &t.bits, &t.seq, &[], 1).is_err());
    assert!(evaluate_forecast(&[&Persistence], &t.wla, &t.bits[..4], &t.seq, &[0], 1).is_err());
}

#[test]
fn pixel_report_has_the_latent_schema() {
    let train = toy(20, 7);
    let test = toy(10, 8);
    let bits: Vec<LatentBits> = test.seq.iter().map(|f| train.wla.encode(f).unwrap()).collect();
    let cfg = PixelConfig { window: SMALL, ..PixelConfig::desk(tiny_meta(), 16, 16) };
    let (_, pixel) = pixel_baseline(cfg, &quick_fit(10), &train.seq, &train.wla, &bits, &test.seq, &[0, 4], 3).unwrap();
    let lf = Forecaster::persistence((3, 3), 8).unwrap();
    let latent = evaluate_forecast(
        &[&LatentModel { name: "latent".into(), model: &lf }],
        &train.wla,
        &bits,
        &test.seq,
        &[0, 4],
        3,
    )
    .unwrap();
    let header = |csv: String| csv.lines().next().unwrap().to_string();
    assert_eq!(header(pixel.to_csv()), REPORT_HEADER);
    assert_eq!(header(latent.to_csv()), REPORT_HEADER);
    assert_eq!(REPORT_HEADER.split(',').filter(|c| c.starts_with("sedi@")).count(), 4);
    for r in pixel.rows.iter().chain(&latent.rows) {
        assert_eq!(r.sedi.len(), 4);
    }
    let models: std::collections::BTreeSet<&str> = pixel.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(models.into_iter().collect::<Vec<_>>(), ["persistence", "pixel"]);
    // The pixel rollout starts from the true field.
    assert!(pixel.rmse("pixel", 0).iter().all(|&v| v == 0.0));
}
