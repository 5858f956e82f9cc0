use std::path::{Path, PathBuf};

use serde::Serialize;

use pedloc::dataio::{
    read_annotations, read_checkpoint, read_predictions, write_annotations, write_checkpoint,
    write_csv, write_predictions, AnnotationRecord, Checkpoint, PredictionRecord,
    PREDICTION_VERSION,
};
use pedloc::evalkit::{
    fit_segments_from_records, run_ablation, AblationCell, AblationData, DISTANCE_BIN_NAMES,
};
use pedloc::geo_baseline::estimate_location;
use pedloc::geometry::{localize, normalize_keypoints_with, NormalizedInput};
use pedloc::height_model::{task_error_curve, teen_extended_mixture, HeightMixture};
use pedloc::net::{train_with_progress, EpochRecord, TrainConfig, TrainingSet};
use pedloc::synthgen::{
    generate_dataset, generate_samples, make_lying_variant, split_counts, split_seed, SPLIT_NAMES,
};
use pedloc::uncertainty::{mc_predict_batch, point_predict, DistanceEstimate};

use crate::check::prediction_checks;
use crate::config::{
    announce, AblateConfig, ConfigFile, GenConfig, InferConfig, Method, Pose, ReportConfig,
    TaskErrorConfig, TrainCmdConfig,
};
use crate::error::{CliError, Result};
use crate::report::{
    bin_rows, calibration, error_points, match_predictions, metric_rows, metrics,
    reliability_curve, spread_rows, Matched,
};
use crate::{AblateArgs, CalibArgs, EvalArgs, GenArgs, InferArgs, NetArgs, ReportArgs, TaskErrorArgs, TrainArgs};

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn apply_net(net: &mut TrainConfig, a: NetArgs) {
    set(&mut net.epochs, a.epochs);
    set(&mut net.lr, a.lr);
    set(&mut net.batch, a.batch);
    set(&mut net.p_drop, a.p_drop);
    set(&mut net.weight_decay_scale, a.weight_decay);
    set(&mut net.arch.hidden, a.hidden);
    set(&mut net.arch.blocks, a.blocks);
}

#[derive(Serialize)]
struct SampleRow<'a> {
    split: &'a str,
    id: &'a str,
    d_gt: Option<f64>,
    h_gt: Option<f64>,
}

pub fn gen(file: &ConfigFile, a: GenArgs, plots: bool) -> Result<()> {
    let mut cfg: GenConfig = file.section("gen")?;
    set(&mut cfg.n, a.n);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.out, a.out);
    if let Some(s) = a.splits {
        cfg.splits = s.try_into().map_err(|s: Vec<f64>| {
            CliError::Invalid(format!("--splits needs 3 fractions, got {}", s.len()))
        })?;
    }
    set(&mut cfg.pose, a.pose);
    set(&mut cfg.synth.pixel_noise_std, a.noise);
    set(&mut cfg.synth.d_range.0, a.d_min);
    set(&mut cfg.synth.d_range.1, a.d_max);
    set(&mut cfg.synth.joint_dropout, a.joint_dropout);
    cfg.synth.validate()?;
    announce("gen", &cfg, &cfg.seed.to_string())?;

    let paths = match cfg.pose {
        Pose::Standing => generate_dataset(cfg.n, cfg.splits, &cfg.synth, cfg.seed, &cfg.out)?,
        Pose::Lying => generate_lying(&cfg)?,
    };
    let mut rows = Vec::new();
    for (name, path) in SPLIT_NAMES.iter().zip(&paths) {
        let records = read_annotations(path)?;
        println!("wrote {} records to {}", records.len(), path.display());
        if plots {
            rows.extend(records.into_iter().map(|r| (name, r)));
        }
    }
    if plots {
        let table: Vec<SampleRow> = rows
            .iter()
            .map(|(split, r)| SampleRow {
                split,
                id: &r.id,
                d_gt: r.distance(),
                h_gt: r.gt.as_ref().and_then(|g| g.h_gt),
            })
            .collect();
        let path = cfg.out.join("plot_samples.csv");
        write_csv(&path, "samples", &table)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Same draws as the standing dataset, each turned into its lying variant.
fn generate_lying(cfg: &GenConfig) -> Result<Vec<PathBuf>> {
    if cfg.n == 0 {
        return Err(CliError::Invalid("dataset size must be at least 1".into()));
    }
    let counts = split_counts(cfg.n, cfg.splits)?;
    create_dir(&cfg.out)?;
    let mut paths = Vec::new();
    for (i, (name, count)) in SPLIT_NAMES.iter().zip(counts).enumerate() {
        let samples = generate_samples(count, split_seed(cfg.seed, i), &cfg.synth)?;
        let records = samples
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let l = make_lying_variant(s)?;
                Ok(AnnotationRecord::from_scene(format!("{name}-{j:06}"), &l))
            })
            .collect::<Result<Vec<_>>>()?;
        let path = cfg.out.join(format!("{name}.jsonl"));
        write_annotations(&path, &records)?;
        paths.push(path);
    }
    Ok(paths)
}

fn read_split(dir: &Path, name: &str, required: bool) -> Result<Vec<AnnotationRecord>> {
    let path = dir.join(format!("{name}.jsonl"));
    if !required && !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_annotations(&path)?)
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.csv")
}

pub fn train(file: &ConfigFile, a: TrainArgs, plots: bool) -> Result<()> {
    let mut cfg: TrainCmdConfig = file.section("train")?;
    set(&mut cfg.data, a.data);
    set(&mut cfg.out, a.out);
    set(&mut cfg.net.loss, a.loss);
    set(&mut cfg.net.seed, a.seed);
    apply_net(&mut cfg.net, a.net);
    cfg.net.validate()?;
    announce("train", &cfg, &cfg.net.seed.to_string())?;

    let train_records = read_split(&cfg.data, "train", true)?;
    let val_records = read_split(&cfg.data, "val", false)?;
    let train_set = TrainingSet::from_records(&train_records, cfg.net.centering)?;
    let val_set = if val_records.is_empty() {
        None
    } else {
        Some(TrainingSet::from_records(&val_records, cfg.net.centering)?)
    };
    println!(
        "training on {} samples, validating on {}",
        train_set.len(),
        val_set.as_ref().map_or(train_set.len(), TrainingSet::len)
    );
    let outcome = train_with_progress(&train_set, val_set.as_ref(), &cfg.net, |r| {
        if r.epoch == 1 || r.epoch % 10 == 0 {
            println!(
                "epoch {:>4}  train {:>9.5}  val {:>9.5}  val ALE {:.4} m",
                r.epoch, r.train_loss, r.val_loss, r.val_ale
            );
        }
    })?;
    println!("best epoch {}", outcome.best_epoch);

    let mut ckpt = Checkpoint::new(outcome.model, cfg.net.clone());
    ckpt.segment_stats = fit_segments_from_records(&train_records).ok();
    write_checkpoint(&cfg.out, &ckpt)?;
    println!("wrote {}", cfg.out.display());
    let history = history_path(&cfg.out);
    write_csv(&history, "history", &outcome.history)?;
    println!("wrote {}", history.display());
    if plots {
        let path = cfg.out.with_extension("plot_history.csv");
        write_csv::<EpochRecord>(&path, "history", &outcome.history)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn normalized(records: &[AnnotationRecord], ckpt: &Checkpoint) -> Result<Vec<NormalizedInput>> {
    let mut problems = Vec::new();
    let mut inputs = Vec::with_capacity(records.len());
    for r in records {
        match (|| normalize_keypoints_with(&r.camera()?, &r.keypoints()?, ckpt.model.centering))() {
            Ok(i) => inputs.push(i),
            Err(e) => problems.push(format!("{}: {e}", r.id)),
        }
    }
    if problems.is_empty() {
        Ok(inputs)
    } else {
        Err(pedloc::Error::Schema(problems).into())
    }
}

/// Estimates for every record with the configured method.
pub fn predict(
    records: &[AnnotationRecord],
    ckpt: &Checkpoint,
    cfg: &InferConfig,
) -> Result<Vec<DistanceEstimate>> {
    match cfg.method {
        Method::Network => {
            let inputs = normalized(records, ckpt)?;
            Ok(mc_predict_batch(&ckpt.model, &inputs, &cfg.mc)?)
        }
        Method::Point => {
            let inputs = normalized(records, ckpt)?;
            point_predict(&ckpt.model, &inputs)?
                .iter()
                .zip(&inputs)
                .map(|(h, i)| {
                    let b = h.spread();
                    Ok(DistanceEstimate::new(h.mu, b, std::f64::consts::SQRT_2 * b, localize(h.mu, &i.center_ray)?))
                })
                .collect()
        }
        Method::Geometric => {
            let stats = ckpt.segment_stats.as_ref().ok_or_else(|| {
                CliError::Invalid("checkpoint carries no segment statistics".into())
            })?;
            records
                .iter()
                .map(|r| {
                    let p = estimate_location(&r.keypoints()?, &r.camera()?, stats)?;
                    Ok(DistanceEstimate::new(p.norm(), 0.0, 0.0, p))
                })
                .collect()
        }
    }
}

pub fn prediction_record(r: &AnnotationRecord, e: &DistanceEstimate) -> PredictionRecord {
    PredictionRecord {
        version: PREDICTION_VERSION,
        id: r.id.clone(),
        bbox: r.bbox,
        mu: e.mu,
        b: e.b,
        sigma: e.sigma,
        interval: e.interval,
        aleatoric_interval: e.aleatoric_interval,
        point: e.point.to_array(),
    }
}

pub fn infer(file: &ConfigFile, a: InferArgs) -> Result<()> {
    let mut cfg: InferConfig = file.section("infer")?;
    set(&mut cfg.checkpoint, a.checkpoint);
    set(&mut cfg.input, a.input);
    set(&mut cfg.out, a.out);
    set(&mut cfg.method, a.method);
    set(&mut cfg.mc.passes, a.passes);
    set(&mut cfg.mc.samples, a.samples);
    set(&mut cfg.mc.seed, a.seed);
    if a.p_drop.is_some() {
        cfg.mc.p_drop = a.p_drop;
    }
    cfg.mc.validate()?;
    announce("infer", &cfg, &cfg.mc.seed.to_string())?;

    let ckpt = read_checkpoint(&cfg.checkpoint)?;
    let records = read_annotations(&cfg.input)?;
    let estimates = predict(&records, &ckpt, &cfg)?;
    let preds: Vec<PredictionRecord> = records
        .iter()
        .zip(&estimates)
        .map(|(r, e)| prediction_record(r, e))
        .collect();
    write_predictions(&cfg.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), cfg.out.display());
    Ok(())
}

fn resolve_report(file: &ConfigFile, section: &str, a: ReportArgs) -> Result<ReportConfig> {
    let mut cfg: ReportConfig = file.section(section)?;
    set(&mut cfg.predictions, a.predictions);
    set(&mut cfg.gt, a.gt);
    set(&mut cfg.out_dir, a.out_dir);
    set(&mut cfg.iou_threshold, a.iou);
    set(&mut cfg.bin_width, a.bin_width);
    cfg.mix.validate()?;
    Ok(cfg)
}

fn load_matched(cfg: &ReportConfig) -> Result<Matched> {
    let preds = read_predictions(&cfg.predictions)?;
    let records = read_annotations(&cfg.gt)?;
    let matched = match_predictions(&preds, &records, cfg.iou_threshold)?;
    if matched.pairs.is_empty() {
        return Err(CliError::Invalid("no prediction matched a ground-truth box".into()));
    }
    println!(
        "{} matched pairs, {} unmatched predictions, {} missed ground truths",
        matched.pairs.len(),
        matched.false_positives,
        matched.missed
    );
    Ok(matched)
}

fn emit<T: Serialize>(dir: &Path, name: &str, kind: &str, rows: &[T]) -> Result<()> {
    let path = dir.join(name);
    write_csv(&path, kind, rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn emit_calibration_plots(dir: &Path, matched: &Matched, mix: &HeightMixture, width: f64) -> Result<()> {
    emit(dir, "plot_reliability.csv", "reliability", &reliability_curve(matched))?;
    emit(dir, "plot_errors.csv", "errors", &error_points(matched, mix))?;
    emit(dir, "plot_spread.csv", "spread", &spread_rows(matched, mix, width)?)
}

pub fn eval(file: &ConfigFile, a: EvalArgs, plots: bool) -> Result<()> {
    let cfg = resolve_report(file, "eval", a.report)?;
    announce("eval", &cfg, "none (deterministic command)")?;
    let matched = load_matched(&cfg)?;
    create_dir(&cfg.out_dir)?;

    let report = metrics(&matched);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!("ALE {} m", fmt(report.ale));
    for (t, v) in &report.alp {
        println!("ALP <{t} m  {}%", fmt(*v));
    }
    for (name, g) in DISTANCE_BIN_NAMES.iter().zip(&report.by_distance) {
        println!("ALE {name:>6}  {} m (n = {})", fmt(g.ale), g.n);
    }
    emit(&cfg.out_dir, "metrics.csv", "metrics", &metric_rows(&report, &matched))?;
    emit(&cfg.out_dir, "bins.csv", "bins", &bin_rows(&matched, &cfg.mix, cfg.bin_width)?)?;
    let cal = calibration(&matched, &cfg.mix)?;
    emit(&cfg.out_dir, "calibration.csv", "calibration", &cal.rows())?;
    if plots {
        emit_calibration_plots(&cfg.out_dir, &matched, &cfg.mix, cfg.bin_width)?;
    }

    if a.check {
        let lines = prediction_checks(&matched, &cfg.mix)?;
        for l in &lines {
            println!("{l}");
        }
        let failed = lines.iter().filter(|l| !l.passed).count();
        #[derive(Serialize)]
        struct Row<'a> {
            check: &'a str,
            passed: bool,
            detail: &'a str,
        }
        let rows: Vec<Row> = lines
            .iter()
            .map(|l| Row {
                check: &l.name,
                passed: l.passed,
                detail: &l.detail,
            })
            .collect();
        emit(&cfg.out_dir, "check.csv", "check", &rows)?;
        if failed > 0 {
            return Err(CliError::CheckFailed {
                failed,
                total: lines.len(),
            });
        }
    }
    Ok(())
}

pub fn calib(file: &ConfigFile, a: CalibArgs, plots: bool) -> Result<()> {
    let cfg = resolve_report(file, "calib", a.report)?;
    announce("calib", &cfg, "none (deterministic command)")?;
    let matched = load_matched(&cfg)?;
    create_dir(&cfg.out_dir)?;
    let cal = calibration(&matched, &cfg.mix)?;
    for c in [cal.aleatoric, cal.combined] {
        println!(
            "{:?}: {:.1}% inside, mean width {:.3} m",
            c.kind, c.recall, c.mean_interval
        );
    }
    println!(
        "high risk: {:.1}% of instances closer than predicted, {} covered by μ ± σ",
        cal.high_risk.high_risk_fraction,
        cal.high_risk
            .covered_high_risk
            .map_or("n/a".to_string(), |c| format!("{c:.1}%"))
    );
    emit(&cfg.out_dir, "calibration.csv", "calibration", &cal.rows())?;
    emit(&cfg.out_dir, "spread.csv", "spread", &spread_rows(&matched, &cfg.mix, cfg.bin_width)?)?;
    if plots {
        emit_calibration_plots(&cfg.out_dir, &matched, &cfg.mix, cfg.bin_width)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RunRow<'a> {
    method: &'a str,
    seed: Option<u64>,
    n: Option<usize>,
    ale: Option<f64>,
    ale_0_10: Option<f64>,
    ale_10_20: Option<f64>,
    ale_20_30: Option<f64>,
    ale_30_plus: Option<f64>,
    error: Option<&'a str>,
}

fn run_row(c: &AblationCell) -> RunRow<'_> {
    let r = c.report.as_ref();
    let bin = |k: usize| r.and_then(|r| r.distance_ale(k));
    RunRow {
        method: &c.method,
        seed: c.seed,
        n: r.map(|r| r.n),
        ale: r.and_then(|r| r.ale),
        ale_0_10: bin(0),
        ale_10_20: bin(1),
        ale_20_30: bin(2),
        ale_30_plus: bin(3),
        error: c.error.as_deref(),
    }
}

pub fn ablate(file: &ConfigFile, a: AblateArgs) -> Result<()> {
    let mut cfg: AblateConfig = file.section("ablate")?;
    set(&mut cfg.data, a.data);
    set(&mut cfg.out_dir, a.out_dir);
    set(&mut cfg.seeds, a.seeds);
    set(&mut cfg.losses, a.losses);
    apply_net(&mut cfg.net, a.net);
    cfg.net.validate()?;
    if cfg.seeds.is_empty() || cfg.losses.is_empty() {
        return Err(CliError::Invalid("ablation needs at least one seed and one loss".into()));
    }
    announce("ablate", &cfg, &format!("{:?}", cfg.seeds))?;

    let train = read_split(&cfg.data, "train", true)?;
    let val = read_split(&cfg.data, "val", false)?;
    let test = read_split(&cfg.data, "test", true)?;
    let result = run_ablation(
        AblationData {
            train: &train,
            val: &val,
            test: &test,
        },
        &cfg.losses,
        &cfg.seeds,
        &cfg.net,
        |loss, seed, _| println!("trained {loss} with seed {seed}"),
    )?;
    create_dir(&cfg.out_dir)?;
    emit(&cfg.out_dir, "ablation.csv", "ablation", &result.rows)?;
    let runs: Vec<RunRow> = result.cells.iter().map(run_row).collect();
    emit(&cfg.out_dir, "ablation_runs.csv", "ablation_runs", &runs)?;
    let fmt = |v: Option<f64>| v.map_or("   n/a".to_string(), |x| format!("{x:6.3}"));
    println!("{:<10} {:>6} {:>6} {:>6} {:>6} {:>6}", "method", "0-10", "10-20", "20-30", "30+", "all");
    for r in &result.rows {
        println!(
            "{:<10} {} {} {} {} {}",
            r.method,
            fmt(r.ale_0_10),
            fmt(r.ale_10_20),
            fmt(r.ale_20_30),
            fmt(r.ale_30_plus),
            fmt(r.ale_overall)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    d: f64,
    e_hat: f64,
    e_hat_with_teens: f64,
}

pub fn taskerror(file: &ConfigFile, a: TaskErrorArgs) -> Result<()> {
    let mut cfg: TaskErrorConfig = file.section("taskerror")?;
    set(&mut cfg.d_max, a.d_max);
    set(&mut cfg.points, a.points);
    set(&mut cfg.out, a.out);
    if let Some(h) = a.h_mean {
        cfg.mix = cfg.mix.with_h_mean(h)?;
    }
    cfg.mix.validate()?;
    announce("taskerror", &cfg, "none (deterministic command)")?;

    let adults = task_error_curve(&cfg.mix, cfg.d_max, cfg.points)?;
    let teens = task_error_curve(&teen_extended_mixture(&cfg.mix), cfg.d_max, cfg.points)?;
    let rows: Vec<CurveRow> = adults
        .distances
        .iter()
        .zip(&adults.e_hat)
        .zip(&teens.e_hat)
        .map(|((&d, &e), &t)| CurveRow {
            d,
            e_hat: e,
            e_hat_with_teens: t,
        })
        .collect();
    println!(
        "task error slope {:.5} m/m (with teenagers {:.5} m/m)",
        cfg.mix.task_error_slope(),
        teen_extended_mixture(&cfg.mix).task_error_slope()
    );
    if let Some(dir) = cfg.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_csv(&cfg.out, "taskerror", &rows)?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}
