mod support;

use std::fs;

use support::models::tiny_config;
use wla::griddata::{select_subset, synth_generate, MemoryArchive, NormStats, PvsMeta, SynthParams};
use wla::latentds::{
    account, attach_sidecar, build, pixel_sidecar, read_sidecar, shard_path, Family, Manifest, Splits,
};
use wla::model::Wla;
use wla::Error;

const STEPS: u64 = 100;

fn archive(full: &PvsMeta) -> MemoryArchive {
    let mut a = MemoryArchive::new();
    for t in 0..STEPS {
        a.insert(t, synth_generate(full, 16, 16, 500 + t, SynthParams::default()).unwrap());
    }
    a
}

struct Setup {
    archive: MemoryArchive,
    families: Vec<(Family, Wla)>,
    splits: Splits,
}

fn setup() -> Setup {
    let full = PvsMeta::parse_list("t500,t850,z500,t2m,msl,10u,tp1h,tp6h").unwrap();
    let archive = archive(&full);
    let subsets = [("temperature", "t500,t850", 8), ("surface", "t2m,msl,10u", 16), ("precip", "tp1h,tp6h", 24)];
    let families = subsets
        .iter()
        .enumerate()
        .map(|(i, (name, list, nb))| {
            let meta = PvsMeta::parse_list(list).unwrap();
            let fields: Vec<_> = (0..4).map(|t| select_subset(&archive, &meta, t).unwrap()).collect();
            let norm = NormStats::fit(&fields).unwrap();
            let mut cfg = tiny_config(meta.clone(), i as u64);
            cfg.nb = *nb;
            (Family::new(*name, meta).unwrap(), Wla::new(cfg, norm).unwrap())
        })
        .collect();
    Setup { archive, families, splits: Splits::consecutive(0, 70, 15, 15) }
}

impl Setup {
    fn refs(&self) -> Vec<(Family, &Wla)> {
        self.families.iter().map(|(f, m)| (f.clone(), m)).collect()
    }
}

#[test]
fn build_covers_every_step_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let s = setup();
    let (m, stats) = build(&s.archive, &s.refs(), &s.splits, dir.path()).unwrap();
    assert_eq!(m.shards.len(), 300);
    assert_eq!(stats.written, 300);
    for (fam, _) in &s.families {
        let mut times: Vec<u64> = m.shards.iter().filter(|e| e.family == fam.name).map(|e| e.time).collect();
        times.sort_unstable();
        assert_eq!(times, (0..STEPS).collect::<Vec<_>>(), "{}", fam.name);
    }
    assert_eq!(m.totals.latent_bytes, m.shards.iter().map(|e| e.payload_bytes).sum::<u64>());
    assert!(m.shards.iter().all(|e| shard_path(dir.path(), e).exists()));
    assert_eq!(m.shards.iter().filter(|e| e.split == "val").count(), 45);

    let (again, stats) = build(&s.archive, &s.refs(), &s.splits, dir.path()).unwrap();
    assert_eq!((stats.written, stats.skipped), (0, 300));
    assert_eq!(again.totals, m.totals);
    assert_eq!(Manifest::load(dir.path()).unwrap(), again);
}

#[test]
fn partial_and_stale_shards_are_rewritten() {
    let dir = tempfile::tempdir().unwrap();
    let s = setup();
    let (m, _) = build(&s.archive, &s.refs(), &s.splits, dir.path()).unwrap();
    let victim = shard_path(dir.path(), &m.shards[17]);
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let (_, stats) = build(&s.archive, &s.refs(), &s.splits, dir.path()).unwrap();
    assert_eq!(stats.written, 1);
    assert_eq!(fs::read(&victim).unwrap(), bytes);

    // A retrained model for one family invalidates only that family's shards.
    let mut refs = s.refs();
    let (fam, old) = &s.families[1];
    let mut cfg = old.config.clone();
    cfg.seed = 77;
    let retrained = Wla::new(cfg, old.norm.clone()).unwrap();
    refs[1] = (fam.clone(), &retrained);
    let (_, stats) = build(&s.archive, &refs, &s.splits, dir.path()).unwrap();
    assert_eq!((stats.written, stats.skipped), (100, 200));
}

#[test]
fn missing_model_or_steps_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let s = setup();
    let mut refs = s.refs();
    refs[0].1 = &s.families[2].1;
    assert!(matches!(build(&s.archive, &refs, &s.splits, dir.path()), Err(Error::Missing(_))));
    let long = Splits::consecutive(0, 70, 15, 16);
    assert!(matches!(build(&s.archive, &s.refs(), &long, dir.path()), Err(Error::Missing(_))));
}

#[test]
fn account_matches_bit_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let s = setup();
    let (m, _) = build(&s.archive, &s.refs(), &s.splits, dir.path()).unwrap();
    let r = account(&m).unwrap();
    assert_eq!(r.latent_total, m.totals.latent_bytes as f64);
    // Latent-byte-weighted mean of each family's exact ratio.
    let total = m.totals.latent_bytes as f64;
    let weighted: f64 = m
        .families
        .iter()
        .map(|f| {
            let bytes: u64 = m.shards.iter().filter(|e| e.family == f.name).map(|e| e.payload_bytes).sum();
            bytes as f64 / total * f.ratio_exact
        })
        .sum();
    assert!((r.ratio / weighted - 1.0).abs() < 0.01, "ratio {} vs {}", r.ratio, weighted);

    let mut shuffled = m.clone();
    shuffled.shards.reverse();
    assert_eq!(account(&shuffled).unwrap().ratio, r.ratio);
}

#[test]
fn sidecar_is_lossless_and_smaller() {
    let dir = tempfile::tempdir().unwrap();
    let s = setup();
    let (_, _) = build(&s.archive, &s.refs(), &s.splits, dir.path()).unwrap();
    let path = dir.path().join("test.xz");
    let rep = pixel_sidecar(&s.archive, s.splits.test.clone(), &path).unwrap();
    assert_eq!(rep.fields, 15);
    assert!(rep.stored_bytes < rep.raw_bytes, "{} >= {}", rep.stored_bytes, rep.raw_bytes);
    let back = read_sidecar(&path).unwrap();
    assert_eq!(back.len(), 15);
    for (t, f) in back {
        let orig = wla::griddata::Archive::field(&s.archive, t).unwrap();
        assert_eq!(f, orig);
        let a: Vec<u32> = f.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = orig.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
    let m = attach_sidecar(dir.path(), &rep).unwrap();
    assert_eq!(m.totals.sidecar_bytes, rep.stored_bytes);
    assert_eq!(account(&m).unwrap().sidecar_total, rep.stored_bytes as f64);

    let empty = dir.path().join("empty.xz");
    let rep = pixel_sidecar(&s.archive, 40..40, &empty).unwrap();
    assert_eq!((rep.fields, rep.stored_bytes), (0, 0));
    assert_eq!(fs::metadata(&empty).unwrap().len(), 0);
    assert!(read_sidecar(&empty).unwrap().is_empty());

    assert!(matches!(pixel_sidecar(&s.archive, 90..110, dir.path().join("x.xz")), Err(Error::Range(_))));
}

#[test]
fn splits_must_be_ordered() {
    let bad = Splits { train: 0..10, val: 5..15, test: 15..20 };
    assert!(bad.validate().is_err());
    let ok = Splits::consecutive(3, 5, 2, 2);
    assert_eq!(ok.timeline(), 3..12);
    assert_eq!(ok.split_of(8), Some("val"));
    assert_eq!(ok.split_of(12), None);
}
