//! Acceptance criteria, one test per criterion. Each prints a single
//! `[n] PASS|FAIL ...` line; run with `--nocapture` to see them:
//!
//! ```text
//! cargo test --release -p wla-core --test acceptance -- --nocapture
//! ```
//!
//! Criteria 7 to 9 share one trained toy autoencoder (about 11 minutes on a
//! single core); criterion 8 trains two more.

mod support;

use std::sync::OnceLock;
use std::time::Instant;

use wla::bqm::{compression_ratio, geometry_sweep, pack_bits, unpack_signs};
use wla::codec::{compress, decompress};
use wla::downstream::{
    advective_sequence, evaluate_forecast, pairs_from_sequence, pixel_baseline, train_forecaster, DynamicsParams,
    FitConfig, Forecaster, ForecasterConfig, LatentModel, Persistence, PixelConfig, REPORT_HEADER,
};
use wla::griddata::{synth_generate, GridField, NormStats, PvsMeta, SynthParams};
use wla::latentds::{account_published, PublishedTotals};
use wla::metrics::{sedi, sedi_score, SEDI_EPS, SEDI_QUANTILES};
use wla::model::{Wla, WlaConfig};
use wla::train::{evaluate, smoothed_recon, train, EvalTable, LossRecord, RunOutputs, TrainConfig};
use wla::vaeformer::PatchConfig;

fn verdict(n: u8, ok: bool, detail: String) {
    println!("[{n}] {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n}: {detail}");
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn criterion_1_compression_ratio() {
    let era5 = PatchConfig::era5();
    // (C, nb, lowest accepted, highest accepted)
    let cases = [
        (25, 128, 625.9, 625.9),
        (13, 128, 325.4, 325.5),
        (6, 128, 150.2, 150.2),
        (8, 128, 200.3, 200.3),
        (6, 32, 600.8, 600.9),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (c, nb, lo, hi) in cases {
        let r = compression_ratio(c, 721, 1440, &era5, nb).unwrap();
        let hit = r.ratio_exact >= lo - 0.1 && r.ratio_exact <= hi + 0.1;
        ok &= hit;
        parts.push(format!("C={c},nb={nb}:{:.2}", r.ratio_exact));
    }
    verdict(1, ok, parts.join(" "));
}

#[test]
fn criterion_2_bpsp_identity() {
    let era5 = PatchConfig::era5();
    // Upper-air, surface and precipitation rows.
    let rows = [(25, 128, 0.051, 0.051), (8, 128, 0.159, 0.160), (6, 32, 0.053, 0.053)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (c, nb, lo, hi) in rows {
        let r = compression_ratio(c, 721, 1440, &era5, nb).unwrap();
        let identity = close(r.bpsp, 32.0 / r.ratio_exact, 1e-12)
            && close(wla::metrics::bpsp(r.payload_bits(), c, 721, 1440), r.bpsp, 1e-12);
        let hit = r.bpsp >= lo - 0.001 && r.bpsp <= hi + 0.001;
        ok &= identity && hit;
        parts.push(format!("C={c},nb={nb}:{:.4}", r.bpsp));
    }
    verdict(2, ok, parts.join(" "));
}

#[test]
fn criterion_3_storage_accounting() {
    let r = account_published(&PublishedTotals::ERA5_LATENT).unwrap();
    let text = r.render();
    let rounded = close(r.latent_tb(), 0.43, 0.01) && format!("{:.2}", r.latent_tb()) == "0.43";
    let flagged = r.notes.iter().any(|n| n.contains("568.2") && n.contains("566.3")) && text.contains("rounding discrepancy");
    verdict(
        3,
        rounded && flagged && close(r.ratio, 566.3, 1e-9),
        format!("244.34 TB / 566.3 = {:.4} TB; discrepancy flagged: {flagged}", r.latent_tb()),
    );
}

#[test]
fn criterion_4_codec_round_trip() {
    let (h, w, nb) = (72, 144, 128);
    let signs: Vec<i8> = (0..h * w * nb).map(|i| if (i * 2_654_435_761usize) >> 7 & 1 == 1 { 1 } else { -1 }).collect();
    let bits = pack_bits(h, w, nb, &signs).unwrap();
    let packed = unpack_signs(&bits) == signs && bits.payload.len() == h * w * nb / 8;

    let (model, phys, _) = support::models::tiny_model(1, 2);
    let a = compress(&phys[1], &model).unwrap();
    let b = compress(&phys[1], &model).unwrap();
    let identical = a.to_bytes().unwrap() == b.to_bytes().unwrap();
    let d1 = decompress(&a, &model).unwrap();
    let d2 = decompress(&b, &model).unwrap();
    let deterministic = d1.values() == d2.values();
    let recompressed = compress(&d1, &model).unwrap().bits == compress(&d2, &model).unwrap().bits;
    verdict(
        4,
        packed && identical && deterministic && recompressed,
        format!("pack/unpack 72x144x128: {packed}; .wlat identical: {identical}; decompress deterministic: {deterministic}"),
    );
}

#[test]
fn criterion_5_gradient_suite() {
    let checks = support::grad::all();
    let worst = checks.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<&str> = checks.iter().filter(|(_, e)| *e >= support::grad::TOL).map(|(n, _)| *n).collect();
    verdict(
        5,
        failing.is_empty(),
        format!("{} checks, worst {} at {:.2e}; failing {:?}", checks.len(), worst.0, worst.1, failing),
    );
}

#[test]
fn criterion_6_pvum_properties() {
    let checks = support::pvum::all();
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let failing: Vec<&str> = checks.iter().filter(|(_, d)| *d >= support::pvum::TOL).map(|(n, _)| *n).collect();
    verdict(6, failing.is_empty(), format!("{} checks, max abs diff {worst:.2e}; failing {failing:?}", checks.len()));
}

const TOY_CHANNELS: &str = "z500,t850,u850,v850,t2m,msl";

struct Trained {
    model: Wla,
    records: Vec<LossRecord>,
    eval: EvalTable,
}

fn toy_meta() -> PvsMeta {
    PvsMeta::parse_list(TOY_CHANNELS).unwrap()
}

fn synth_set(seeds: std::ops::Range<u64>) -> Vec<GridField> {
    let meta = toy_meta();
    seeds.map(|s| synth_generate(&meta, 64, 64, s, SynthParams::default()).unwrap()).collect()
}

fn train_toy(nb: usize) -> Trained {
    let data = synth_set(0..64);
    let mut cfg = WlaConfig::toy(toy_meta());
    cfg.nb = nb;
    let model = Wla::new(cfg, NormStats::fit(&data).unwrap()).unwrap();
    let normalized: Vec<GridField> = data.iter().map(|f| model.norm.normalize(f).unwrap()).collect();
    let t = Instant::now();
    let (ckpt, records) = train(model, &TrainConfig::desk(), &normalized, &RunOutputs::default()).unwrap();
    let eval = evaluate(&ckpt.model, &synth_set(1000..1008)).unwrap();
    eprintln!("trained toy nb={nb} in {:.0?}", t.elapsed());
    Trained { model: ckpt.model, records, eval }
}

fn toy32() -> &'static Trained {
    static TOY: OnceLock<Trained> = OnceLock::new();
    TOY.get_or_init(|| train_toy(32))
}

/// Channel-mean of RMSE over the climatology reference.
fn normalized_error(t: &EvalTable) -> f64 {
    t.rmse.iter().zip(&t.std_ref).map(|(r, s)| r / s).sum::<f64>() / t.rmse.len() as f64
}

#[test]
fn criterion_7_desk_training() {
    let t = toy32();
    let (first, last) = smoothed_recon(&t.records, 50).unwrap();
    let descent = last < 0.5 * first;
    let beats = t.eval.beats_reference();
    let per: Vec<String> = t
        .eval
        .channels
        .iter()
        .zip(t.eval.rmse.iter().zip(&t.eval.std_ref))
        .map(|(c, (r, s))| format!("{c}:{r:.3}/{s:.3}"))
        .collect();
    verdict(
        7,
        beats && descent,
        format!("rmse/std {}; recon {first:.3} -> {last:.3}; ratio {:.1}", per.join(" "), t.eval.ratio),
    );
}

#[test]
fn criterion_8_ablation_monotonicity() {
    let levels = [6, 13, 25];
    let nbs = [16, 32, 64, 96, 128];
    let rows = geometry_sweep(&levels, &nbs, 721, 1440, &PatchConfig::era5()).unwrap();
    let at = |li: usize, ni: usize| rows[li * nbs.len() + ni].ratio_exact;
    let mut geometry = rows.len() == 15;
    for li in 0..levels.len() {
        for ni in 0..nbs.len() {
            if ni + 1 < nbs.len() {
                geometry &= at(li, ni + 1) < at(li, ni);
            }
            if li + 1 < levels.len() {
                geometry &= at(li + 1, ni) > at(li, ni);
            }
        }
    }

    let errs: Vec<(usize, f64)> = [8, 16]
        .into_iter()
        .map(|nb| (nb, normalized_error(&train_toy(nb).eval)))
        .chain(std::iter::once((32, normalized_error(&toy32().eval))))
        .collect();
    let trained = errs.windows(2).all(|p| p[1].1 <= p[0].1);
    let shown: Vec<String> = errs.iter().map(|(nb, e)| format!("nb={nb}:{e:.3}")).collect();
    verdict(
        8,
        geometry && trained,
        format!("15-row geometry sweep monotone: {geometry}; normalized error {}", shown.join(" ")),
    );
}

#[test]
fn criterion_9_downstream_framework() {
    let wla = &toy32().model;
    let meta = toy_meta();
    let dynamics = DynamicsParams::default();
    let train_seq = advective_sequence(&meta, 64, 64, 200, 11, &dynamics).unwrap();
    let test_seq = advective_sequence(&meta, 64, 64, 40, 12, &dynamics).unwrap();
    let train_bits: Vec<_> = train_seq.iter().map(|f| wla.encode(f).unwrap()).collect();
    let test_bits: Vec<_> = test_seq.iter().map(|f| wla.encode(f).unwrap()).collect();

    let mut forecaster = Forecaster::new(ForecasterConfig::desk(wla.token_grid(), wla.config.nb)).unwrap();
    let pairs = pairs_from_sequence(&train_bits).unwrap();
    train_forecaster(&mut forecaster, &FitConfig::desk(), &pairs).unwrap();

    let inits: Vec<usize> = (0..30).step_by(3).collect();
    let latent = LatentModel { name: "latent".into(), model: &forecaster };
    let report = evaluate_forecast(&[&latent, &Persistence], wla, &test_bits, &test_seq, &inits, 4).unwrap();
    let l1 = report.rmse("latent", 1);
    let p1 = report.rmse("persistence", 1);
    let beats = l1.iter().zip(&p1).all(|(l, p)| l < p);

    let csv = report.to_csv();
    let sedi_cols = csv.lines().next() == Some(REPORT_HEADER)
        && REPORT_HEADER.split(',').filter(|c| c.starts_with("sedi@")).count() == 4
        && report.rows.iter().all(|r| r.sedi.len() == SEDI_QUANTILES.len())
        && report.rows.iter().any(|r| r.sedi.iter().all(Option::is_some));

    let perfect = sedi(&test_seq[0], &test_seq[0], &SEDI_QUANTILES, SEDI_EPS).unwrap();
    let near_one = perfect.channels.iter().flatten().filter_map(|s| s.sedi).all(|s| s > 0.99);
    let equal_rates = sedi_score(0.3, 0.3, SEDI_EPS).abs() < 1e-12;

    let pixel_fit = FitConfig { steps: 600, warmup: 30, ..FitConfig::desk() };
    let (_, pixel) = pixel_baseline(
        PixelConfig::desk(meta.clone(), 64, 64),
        &pixel_fit,
        &train_seq,
        wla,
        &test_bits,
        &test_seq,
        &inits,
        1,
    )
    .unwrap();
    let px1 = pixel.rmse("pixel", 1);
    let pixel_beats = px1.iter().zip(&p1).all(|(x, p)| x < p);

    let ratio: Vec<String> = l1.iter().zip(&p1).map(|(l, p)| format!("{:.2}", l / p)).collect();
    verdict(
        9,
        beats && sedi_cols && near_one && equal_rates && pixel_beats,
        format!(
            "lead-1 latent/persistence rmse [{}]; pixel beats persistence: {pixel_beats}; SEDI columns: {sedi_cols}; \
             SEDI(truth,truth)~1: {near_one}; SEDI(H=F)=0: {equal_rates}",
            ratio.join(" ")
        ),
    );
}
