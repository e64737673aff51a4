use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;

use wla::bqm::{compression_ratio, geometry_sweep, LatentBits, RatioReport};
use wla::codec::{compress, decompress, measure, WlatFile};
use wla::downstream::{
    advective_sequence, evaluate_forecast, pairs_from_sequence, pixel_baseline, train_forecaster, DynamicsParams,
    FitConfig, Forecaster, ForecasterConfig, LatentModel, Persistence, PixelConfig, WindowConfig,
};
use wla::griddata::{
    synth_generate, GridField, wgrid, Archive, DirArchive, NormStats, PvsMeta, SynthParams, VariableId, VariableKind, LEVELS_13,
    LEVELS_25, LEVELS_6,
};
use wla::latentds::{account, attach_sidecar, build, pixel_sidecar, shard_path, Family, Manifest, Splits};
use wla::metrics::mae_map;
use wla::model::Wla;
use wla::train::{evaluate, smoothed_recon, train, Checkpoint, EvalTable, RunOutputs, TrainConfig};

use crate::args::*;
use crate::run::*;

pub fn gen_data(a: &GenData) -> CliResult<()> {
    start_run(&a.out, "gen-data", a)?;
    let meta = PvsMeta::parse_list(&a.subset)?;
    let fields = match a.dynamics {
        Dynamics::Independent => (0..a.steps)
            .into_par_iter()
            .map(|t| synth_generate(&meta, a.height, a.width, a.seed + t, SynthParams::default()))
            .collect::<Result<Vec<_>, _>>()?,
        Dynamics::Advective => {
            let p = DynamicsParams { shift_px: a.shift, memory: a.memory, synth: SynthParams::default() };
            advective_sequence(&meta, a.height, a.width, a.steps as usize, a.seed, &p)?
        }
    };
    for (t, f) in fields.iter().enumerate() {
        wgrid::save(f, DirArchive::path_for(&a.out, t as u64))?;
    }
    println!("wrote {} fields of {} ({}x{}) to {}", fields.len(), meta, a.height, a.width, a.out.display());
    Ok(())
}

fn first_field(archive: &DirArchive) -> CliResult<wla::griddata::GridField> {
    let t = *archive
        .times()
        .first()
        .ok_or_else(|| usage(format!("no .wgrid fields in {}", archive.root().display())))?;
    Ok(archive.field(t)?)
}

fn print_eval(t: &EvalTable) {
    print!("{}", t.to_csv());
}

pub fn train_wla(a: &TrainWla) -> CliResult<()> {
    start_run(&a.out, "train-wla", a)?;
    let archive = DirArchive::new(&a.data);
    let first = first_field(&archive)?;
    let model = match &a.resume {
        Some(p) => Checkpoint::load(p)?.model,
        None => {
            let meta = match &a.subset {
                Some(s) => PvsMeta::parse_list(s)?,
                None => first.meta().clone(),
            };
            let fields = load_fields(&archive, &meta, a.train.as_ref())?;
            let cfg = model_config(a.preset, meta, first.height(), first.width(), a.nb, a.seed);
            Wla::new(cfg, NormStats::fit(&fields)?)?
        }
    };
    let fields = load_fields(&archive, &model.config.meta, a.train.as_ref())?;
    let data = normalize_all(&model.norm, &fields)?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        warmup: a.warmup.unwrap_or_else(|| default_warmup(a.steps)),
        lr_floor: a.lr_floor,
        lr_peak: a.lr_peak,
        lambda_entropy: a.lambda_entropy,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::desk()
    };
    info!("training {} parameters on {} fields", model.params.num_scalars(), data.len());
    let out = RunOutputs { loss_log: Some(a.out.join("loss.csv")), checkpoint_dir: Some(a.out.clone()) };
    let (ckpt, records) = train(model, &cfg, &data, &out)?;
    let window = (records.len() / 10).clamp(1, 50);
    if let Some((first, last)) = smoothed_recon(&records, window) {
        println!("reconstruction loss {first:.4} -> {last:.4} over {} steps", records.len());
    }
    if let Some(test) = &a.test {
        let fields = load_fields(&archive, &ckpt.model.config.meta, Some(test))?;
        let table = evaluate(&ckpt.model, &fields)?;
        write_csv_text(&a.out.join("eval.csv"), &table.to_csv())?;
        wgrid::save(&mean_mae_map(&ckpt.model, &fields)?, a.out.join("mae.wgrid"))?;
        print_eval(&table);
    }
    println!("checkpoint {}", a.out.join("final.wckp").display());
    Ok(())
}

/// Round-trip absolute error per pixel, averaged over `fields`.
fn mean_mae_map(model: &Wla, fields: &[GridField]) -> CliResult<GridField> {
    let maps = fields
        .par_iter()
        .map(|x| mae_map(&model.round_trip(x)?, x))
        .collect::<Result<Vec<_>, _>>()?;
    let n = maps.len() as f32;
    let mut sum = vec![0f32; maps[0].values().len()];
    for m in &maps {
        sum.iter_mut().zip(m.values()).for_each(|(s, v)| *s += v);
    }
    Ok(maps[0].with_values(maps[0].meta().clone(), sum.into_iter().map(|v| v / n).collect())?)
}

pub fn compress_cmd(a: &Compress) -> CliResult<()> {
    let model = Checkpoint::load(&a.model)?.model;
    let x = wgrid::load(&a.input)?.select(&model.config.meta)?;
    let f = compress(&x, &model)?;
    f.save(&a.output)?;
    println!("{} payload bytes, ratio {:.2}", f.bits.payload.len(), measure(&f, &x, None)?.ratio);
    Ok(())
}

pub fn decompress_cmd(a: &Decompress) -> CliResult<()> {
    let model = Checkpoint::load(&a.model)?.model;
    let f = WlatFile::load(&a.input)?;
    let x = decompress(&f, &model)?;
    wgrid::save(&x, &a.output)?;
    println!("decoded {} ({}x{})", x.meta(), x.height(), x.width());
    Ok(())
}

const RATIO_HEADER: &str = "channels,nb,h_tokens,w_tokens,ratio,ratio_ideal,bpsp";

fn ratio_row(r: &RatioReport) -> String {
    format!("{},{},{},{},{:.4},{:.4},{:.6}", r.c, r.nb, r.h_tokens, r.w_tokens, r.ratio_exact, r.ratio_ideal, r.bpsp)
}

pub fn measure_cmd(a: &Measure) -> CliResult<()> {
    if let Some(dir) = &a.out {
        start_run(dir, "measure", a)?;
    }
    let text = if a.dry_run {
        let patch = patch_config(a.patch);
        let mut s = format!("{RATIO_HEADER}\n");
        for &c in &a.channels {
            for &nb in &a.nb {
                let r = compression_ratio(c, a.height, a.width, &patch, nb)?;
                writeln!(s, "{}", ratio_row(&r)).expect("string write");
            }
        }
        s
    } else {
        let input = a.input.as_ref().ok_or_else(|| usage("--input is required without --dry-run"))?;
        let original = a.original.as_ref().ok_or_else(|| usage("--original is required with --input"))?;
        let f = WlatFile::load(input)?;
        let x = wgrid::load(original)?.select(&f.header.meta)?;
        let rec = match &a.model {
            Some(p) => Some(decompress(&f, &Checkpoint::load(p)?.model)?),
            None => None,
        };
        let m = measure(&f, &x, rec.as_ref())?;
        serde_json::to_string_pretty(&m)? + "\n"
    };
    print!("{text}");
    if let Some(dir) = &a.out {
        let name = if a.dry_run { "measure.csv" } else { "measure.json" };
        fs::write(dir.join(name), &text)?;
    }
    Ok(())
}

/// The standard level sets for 6, 13 and 25 levels; other counts take the
/// first entries of the 25-level set.
fn levels_for(n: usize) -> CliResult<Vec<u16>> {
    Ok(match n {
        6 => LEVELS_6.to_vec(),
        13 => LEVELS_13.to_vec(),
        25 => LEVELS_25.to_vec(),
        n if (1..25).contains(&n) => LEVELS_25[..n].to_vec(),
        n => return Err(usage(format!("{n} pressure levels not supported"))),
    })
}

fn upper_air_variable(name: &str) -> CliResult<VariableId> {
    VariableId::ALL
        .into_iter()
        .find(|v| v.kind() == VariableKind::UpperAir && v.short_name() == name)
        .ok_or_else(|| usage(format!("{name:?} is not an upper-air variable")))
}

pub fn sweep_cmd(a: &Sweep) -> CliResult<()> {
    if let Some(dir) = &a.out {
        start_run(dir, "sweep", a)?;
    }
    let mut header = String::from(RATIO_HEADER);
    let mut errors: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let rows = match &a.data {
        None => geometry_sweep(&a.levels, &a.nb, a.height, a.width, &patch_config(a.patch))?,
        Some(data) => {
            header.push_str(",norm_error");
            let archive = DirArchive::new(data);
            let first = first_field(&archive)?;
            let var = upper_air_variable(&a.variable)?;
            let mut rows = Vec::new();
            for &l in &a.levels {
                let meta = PvsMeta::upper_air(var, &levels_for(l)?)?;
                let train_fields = load_fields(&archive, &meta, a.train.as_ref())?;
                let test_fields = match &a.test {
                    Some(r) => load_fields(&archive, &meta, Some(r))?,
                    None => train_fields.clone(),
                };
                let norm = NormStats::fit(&train_fields)?;
                let data = normalize_all(&norm, &train_fields)?;
                for &nb in &a.nb {
                    let cfg = model_config(a.preset, meta.clone(), first.height(), first.width(), nb, a.seed);
                    rows.push(compression_ratio(l, cfg.height, cfg.width, &cfg.patch, nb)?);
                    let model = Wla::new(cfg, norm.clone())?;
                    let tc = TrainConfig {
                        steps: a.steps,
                        warmup: default_warmup(a.steps),
                        seed: a.seed,
                        ..TrainConfig::desk()
                    };
                    let (ckpt, _) = train(model, &tc, &data, &RunOutputs::default())?;
                    let t = evaluate(&ckpt.model, &test_fields)?;
                    let e = t.rmse.iter().zip(&t.std_ref).map(|(r, s)| r / s).sum::<f64>() / t.rmse.len() as f64;
                    info!("levels {l} nb {nb}: normalized error {e:.4}");
                    errors.insert((l, nb), e);
                }
            }
            rows
        }
    };
    let mut text = format!("{header}\n");
    for r in &rows {
        text.push_str(&ratio_row(r));
        if let Some(e) = errors.get(&(r.c, r.nb)) {
            write!(text, ",{e:.6}").expect("string write");
        }
        text.push('\n');
    }
    print!("{text}");
    if let Some(dir) = &a.out {
        fs::write(dir.join("sweep.csv"), &text)?;
    }
    Ok(())
}

fn split_range(splits: &Splits, name: &str) -> CliResult<std::ops::Range<u64>> {
    match name {
        "train" => Ok(splits.train.clone()),
        "val" => Ok(splits.val.clone()),
        "test" => Ok(splits.test.clone()),
        other => Err(usage(format!("unknown split {other:?} (train, val or test)"))),
    }
}

pub fn build_latent_ds(a: &BuildLatentDs) -> CliResult<()> {
    let [train_n, val_n, test_n] = a.splits[..] else {
        return Err(usage("--splits takes three lengths: train,val,test"));
    };
    start_run(&a.out, "build-latent-ds", a)?;
    let splits = Splits::consecutive(a.start, train_n, val_n, test_n);
    let mut loaded = Vec::new();
    for spec in &a.families {
        let (name, path) = spec.split_once('=').ok_or_else(|| usage(format!("--family {spec:?}: expected name=checkpoint")))?;
        let model = Checkpoint::load(path)?.model;
        loaded.push((Family::new(name, model.config.meta.clone())?, model));
    }
    let refs: Vec<(Family, &Wla)> = loaded.iter().map(|(f, m)| (f.clone(), m)).collect();
    let archive = DirArchive::new(&a.data);
    let (mut manifest, stats) = build(&archive, &refs, &splits, &a.out)?;
    println!("{} shards written, {} already complete", stats.written, stats.skipped);
    if let Some(split) = &a.sidecar {
        let range = split_range(&splits, split)?;
        let report = pixel_sidecar(&archive, range, a.out.join(format!("sidecar_{split}.xz")))?;
        manifest = attach_sidecar(&a.out, &report)?;
    }
    let text = account(&manifest)?.render();
    fs::write(a.out.join("account.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Token grids of one family and split, in timeline order.
fn family_tokens(root: &Path, manifest: &Manifest, family: &str, split: &str) -> CliResult<Vec<(u64, LatentBits)>> {
    let mut shards: Vec<_> = manifest.shards.iter().filter(|s| s.family == family && s.split == split).collect();
    if shards.is_empty() {
        return Err(usage(format!("no {split} shards for family {family:?}")));
    }
    shards.sort_by_key(|s| s.time);
    shards.iter().map(|s| Ok((s.time, WlatFile::load(shard_path(root, s))?.bits))).collect()
}

pub fn train_forecaster_cmd(a: &TrainForecaster) -> CliResult<()> {
    start_run(&a.out, "train-forecaster", a)?;
    let manifest = Manifest::load(&a.dataset)?;
    let tokens: Vec<LatentBits> =
        family_tokens(&a.dataset, &manifest, &a.family, "train")?.into_iter().map(|(_, b)| b).collect();
    let pairs = pairs_from_sequence(&tokens)?;
    let first = &tokens[0];
    let window = WindowConfig { window: a.window, depth: a.depth, d_model: a.d_model, heads: a.heads, mlp_ratio: 2 };
    let cfg = ForecasterConfig { window, seed: a.seed, ..ForecasterConfig::desk((first.h, first.w), first.nb) };
    let mut model = Forecaster::new(cfg)?;
    let fit = FitConfig { steps: a.steps, batch: a.batch, warmup: default_warmup(a.steps), seed: a.seed, ..FitConfig::desk() };
    info!("training on {} token pairs", pairs.len());
    let curve = train_forecaster(&mut model, &fit, &pairs)?;
    let mut log = String::from("step,bce\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(log, "{i},{l:.8}").expect("string write");
    }
    fs::write(a.out.join("loss.csv"), log)?;
    model.save(a.out.join("forecaster.wckp"))?;
    if let (Some(f), Some(l)) = (curve.first(), curve.last()) {
        println!("binary cross-entropy {f:.4} -> {l:.4}");
    }
    println!("checkpoint {}", a.out.join("forecaster.wckp").display());
    Ok(())
}

pub fn eval_forecast(a: &EvalForecast) -> CliResult<()> {
    if a.init_every == 0 {
        return Err(usage("--init-every must be positive"));
    }
    start_run(&a.out, "eval-forecast", a)?;
    let manifest = Manifest::load(&a.dataset)?;
    let record = manifest
        .families
        .iter()
        .find(|f| f.name == a.family)
        .ok_or_else(|| usage(format!("family {:?} not in the dataset", a.family)))?;
    let wla = Checkpoint::load(&a.model)?.model;
    if hex_fingerprint(&wla) != record.fingerprint {
        return Err(wla::Error::Mismatch(format!("{} did not write family {}", a.model.display(), a.family)).into());
    }
    let forecaster = Forecaster::load(&a.forecaster)?;
    let archive = DirArchive::new(&a.data);
    let meta = &wla.config.meta;

    let test = family_tokens(&a.dataset, &manifest, &a.family, "test")?;
    let truth = test
        .iter()
        .map(|(t, _)| wla::griddata::select_subset(&archive, meta, *t))
        .collect::<Result<Vec<_>, _>>()?;
    let bits: Vec<LatentBits> = test.into_iter().map(|(_, b)| b).collect();
    let inits: Vec<usize> = (0..bits.len()).step_by(a.init_every).filter(|&t| t + a.leads < bits.len()).collect();
    if inits.is_empty() {
        return Err(usage(format!("test split of {} steps is too short for {} leads", bits.len(), a.leads)));
    }

    let latent = LatentModel { name: "latent".into(), model: &forecaster };
    let mut report = evaluate_forecast(&[&latent, &Persistence], &wla, &bits, &truth, &inits, a.leads)?;
    if let Some(steps) = a.pixel_steps {
        let train_fields = load_fields(&archive, meta, Some(&manifest.splits.train))?;
        let cfg = PixelConfig { seed: a.seed, ..PixelConfig::desk(meta.clone(), wla.config.height, wla.config.width) };
        let fit = FitConfig { steps, warmup: default_warmup(steps), seed: a.seed, ..FitConfig::desk() };
        let (_, mut pixel) = pixel_baseline(cfg, &fit, &train_fields, &wla, &bits, &truth, &inits, a.leads)?;
        pixel.rows.retain(|r| r.model != "persistence");
        report.merge(pixel);
    }
    fs::write(a.out.join("forecast.csv"), report.to_csv())?;
    let models: Vec<String> = {
        let mut m: Vec<String> = report.rows.iter().map(|r| r.model.clone()).collect();
        m.dedup();
        m
    };
    for m in &models {
        let r: Vec<String> = report.rmse(m, 1.min(a.leads)).iter().map(|v| format!("{v:.4}")).collect();
        println!("{m:>12} lead {} rmse {}", 1.min(a.leads), r.join(" "));
    }
    println!("report {}", a.out.join("forecast.csv").display());
    Ok(())
}

fn hex_fingerprint(m: &Wla) -> String {
    m.fingerprint().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn report_cmd(a: &Report) -> CliResult<()> {
    start_run(&a.out, "report", a)?;
    let mut tables = String::new();
    let mut written = 0usize;
    for dir in &a.inputs {
        let tag = dir.file_name().and_then(|s| s.to_str()).unwrap_or("run").to_string();
        for (file, kind) in [("forecast.csv", 0), ("sweep.csv", 1), ("eval.csv", 2), ("loss.csv", 3)] {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            let table = crate::plot::read_table(&path)?;
            writeln!(tables, "## {tag}/{file}\n\n{}", table.to_markdown()).expect("string write");
            written += match kind {
                0 => crate::plot::forecast_plots(&table, &a.out, &tag)?,
                1 => crate::plot::sweep_plot(&table, &a.out, &tag)?,
                3 => crate::plot::loss_plot(&table, &a.out, &tag)?,
                _ => 0,
            };
        }
        let mae = dir.join("mae.wgrid");
        if mae.exists() {
            written += crate::plot::mae_plots(&wgrid::load(&mae)?, &a.out, &tag)?;
        }
    }
    if tables.is_empty() && written == 0 {
        return Err(usage("no forecast.csv, sweep.csv, eval.csv, loss.csv or mae.wgrid in the inputs"));
    }
    fs::write(a.out.join("tables.md"), tables)?;
    println!("{written} plots and tables.md in {}", a.out.display());
    Ok(())
}
