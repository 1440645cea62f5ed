//! Stage implementations shared by the standalone subcommands and the
//! pipeline runner.

use anyhow::{anyhow, bail, Context, Result};
use herdcast_core::analysis::{herding_measures, inter_target_times, movement_time_histogram};
use herdcast_core::dataset::{
    assemble_from_trials, draw_samples, read_hxs, write_hxs, Balance, Sample, SplitConfig,
    Standardization,
};
use herdcast_core::eval::{
    evaluate_with_confusion, ConfusionMatrix, CrossTable, MetricsReport,
};
use herdcast_core::explain::{explain_samples, GlobalImportance, ShapReport};
use herdcast_core::features::{feature_names, write_hxf, FeatureExtractor, StateVector};
use herdcast_core::ingest::{read_trials, write_trials, Expertise, Trial};
use herdcast_core::nn::{LossMode, LstmModel, N_CLASSES};
use herdcast_core::rng;
use herdcast_core::sim::{run_trial, PolicyKind, WorldConfig};
use herdcast_core::train::{fit, load_checkpoint, save_checkpoint, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn parse_expertise(s: &str) -> Result<Expertise> {
    match s {
        "expert" => Ok(Expertise::Expert),
        "novice" => Ok(Expertise::Novice),
        other => bail!("expertise must be 'expert' or 'novice', got '{other}'"),
    }
}

/// Simulate `pairs x trials_per_pair` trials of one policy and write them
/// as a trial file. Returns (total, successes).
pub fn simulate(
    expertise: Expertise,
    pairs: usize,
    trials_per_pair: usize,
    seed: u64,
    out: &Path,
) -> Result<(usize, usize)> {
    let cfg = WorldConfig::for_expertise(expertise);
    let policy = PolicyKind::for_expertise(expertise);
    let total = pairs * trials_per_pair;
    let trials: Result<Vec<Trial>, _> = (0..total)
        .into_par_iter()
        .map(|k| {
            let pair = k / trials_per_pair;
            let t = k % trials_per_pair;
            run_trial(
                &cfg,
                [policy, policy],
                rng::derive_seed(seed, "simulate", k as u64),
                format!("{expertise}-s{seed}-p{pair:03}-t{t:03}"),
            )
        })
        .collect();
    let trials = trials?;
    let successes = trials.iter().filter(|t| t.success).count();
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    write_trials(out, &trials)?;
    Ok((total, successes))
}

/// Export the state-vector matrix of every frame of every trial for one
/// focal herder.
pub fn featurize(trials_path: &Path, focal: usize, out: &Path) -> Result<usize> {
    let trials = read_trials(trials_path)?;
    let mut rows: Vec<StateVector> = Vec::new();
    for trial in &trials {
        if trial.n_frames() < 3 {
            continue;
        }
        let extractor = FeatureExtractor::new(trial)?;
        for frame in 0..trial.n_frames() {
            rows.push(extractor.state_vector(frame, focal)?);
        }
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    write_hxf(out, &rows)?;
    Ok(rows.len())
}

pub struct SampleParams {
    pub t_hor: u16,
    pub stride: u8,
    pub balance: Balance,
    pub n_train: usize,
    pub n_test: usize,
    pub n_test_sets: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

/// Window, tag, and split trials into raw (unstandardized) sample files:
/// `train.hxs`, `val.hxs`, `test_00.hxs`, ... under `out_dir`.
/// Standardization happens at training time and lives in the checkpoint.
pub fn build_samples(trials_path: &Path, params: &SampleParams, out_dir: &Path) -> Result<()> {
    let trials = read_trials(trials_path)?;
    let cfg = SplitConfig {
        n_train: params.n_train,
        n_test: params.n_test,
        n_test_sets: params.n_test_sets,
        balance: params.balance,
        validation_fraction: params.validation_fraction,
        standardize: false,
        seed: params.seed,
    };
    let split = assemble_from_trials(&trials, params.stride, params.t_hor, &cfg)?;
    fs::create_dir_all(out_dir)?;
    write_hxs(out_dir.join("train.hxs"), &split.train)?;
    write_hxs(out_dir.join("val.hxs"), &split.validation)?;
    for (i, set) in split.test_sets.iter().enumerate() {
        write_hxs(out_dir.join(format!("test_{i:02}.hxs")), set)?;
    }
    Ok(())
}

pub struct TrainParams {
    pub scale: f64,
    pub seed: u64,
    pub alpha: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub standardize: bool,
    pub loss_mode: LossMode,
    pub expertise: Option<Expertise>,
    pub config_hash: u64,
    /// When set, the sample files must carry this horizon.
    pub expected_horizon: Option<u16>,
}

fn infer_expertise(samples: &[Sample]) -> Option<Expertise> {
    let id = &samples.first()?.trial_id;
    if id.starts_with("expert") {
        Some(Expertise::Expert)
    } else if id.starts_with("novice") {
        Some(Expertise::Novice)
    } else {
        None
    }
}

/// Train a scaled model on raw sample files and write a checkpoint.
/// Returns (epochs run, best validation accuracy).
pub fn train(
    train_path: &Path,
    val_path: &Path,
    params: &TrainParams,
    out: &Path,
) -> Result<(usize, f64)> {
    let mut train_set = read_hxs(train_path)?;
    let mut val_set = read_hxs(val_path)?;
    if train_set.is_empty() || val_set.is_empty() {
        bail!("training or validation set is empty");
    }
    if let (Some(expect), Some(first)) = (params.expected_horizon, train_set.first()) {
        if first.horizon != expect {
            bail!(
                "sample file has horizon {}, --t-hor requested {expect}",
                first.horizon
            );
        }
    }
    let stats = if params.standardize {
        let stats = Standardization::fit(&train_set);
        stats.apply(&mut train_set);
        stats.apply(&mut val_set);
        Some(stats)
    } else {
        None
    };
    let hidden = LstmModel::scaled_hidden(params.scale);
    let mut model = LstmModel::new(
        herdcast_core::features::N_FEATURES,
        &hidden,
        N_CLASSES,
        params.seed,
    );
    model.standardization = stats;
    model.meta.scale = params.scale;
    model.meta.expertise = params.expertise.or_else(|| infer_expertise(&train_set));
    model.meta.config_hash = params.config_hash;
    let cfg = TrainConfig {
        alpha: params.alpha,
        batch_size: params.batch_size,
        max_epochs: params.max_epochs,
        patience: params.patience,
        min_delta: params.min_delta,
        seed: params.seed,
        loss_mode: params.loss_mode,
        ..Default::default()
    };
    let (trained, history) = fit(model, &train_set, &val_set, &cfg)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&trained, out)?;
    let best_acc = history
        .epochs
        .get(history.best_epoch.saturating_sub(1))
        .map(|e| e.val_accuracy)
        .unwrap_or(0.0);
    Ok((history.epochs.len(), best_acc))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub test_set: String,
    pub n_samples: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellJson {
    pub mean: f64,
    pub sd: f64,
    pub per_set: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalJson {
    pub rows: Vec<MetricsRow>,
    /// `cells[model][data]`, 0 = first model / its data, 1 = cross.
    pub cross: Option<Vec<Vec<CellJson>>>,
    pub model_names: Vec<String>,
}

fn metrics_row(model: &str, set: &str, report: &MetricsReport) -> MetricsRow {
    MetricsRow {
        model: model.to_string(),
        test_set: set.to_string(),
        n_samples: report.n_samples,
        accuracy: report.accuracy,
        macro_precision: report.macro_precision,
        macro_recall: report.macro_recall,
        macro_f1: report.macro_f1,
    }
}

fn write_confusion_csv(path: &Path, cm: &ConfusionMatrix) -> Result<()> {
    let mut lines = Vec::new();
    let header: Vec<String> = (0..cm.n_classes()).map(|c| format!("pred_{c}")).collect();
    lines.push(format!("label,{}", header.join(",")));
    for (t, row) in cm.rows().iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        lines.push(format!("true_{t},{}", cells.join(",")));
    }
    write_lines(path, &lines)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "set".into())
}

/// Evaluate a model on test sets, optionally cross-evaluating against a
/// second model with its own test sets. Writes `metrics.csv`, per-pair
/// confusion matrices, `cross_table.csv` when crossing, and `eval.json`.
pub fn eval(
    model_path: &Path,
    test_paths: &[PathBuf],
    cross: Option<(&Path, &[PathBuf])>,
    out_dir: &Path,
) -> Result<EvalJson> {
    fs::create_dir_all(out_dir)?;
    let model = load_checkpoint(model_path)
        .with_context(|| format!("loading checkpoint {}", model_path.display()))?;
    let model_name = stem(model_path);
    let mut rows = Vec::new();
    let mut primary_sets = Vec::new();
    for path in test_paths {
        let samples =
            read_hxs(path).with_context(|| format!("loading samples {}", path.display()))?;
        let (cm, report) = evaluate_with_confusion(&model, &samples)?;
        write_confusion_csv(
            &out_dir.join(format!("confusion_{}_{}.csv", model_name, stem(path))),
            &cm,
        )?;
        rows.push(metrics_row(&model_name, &stem(path), &report));
        primary_sets.push(samples);
    }
    let mut cross_json = None;
    let mut model_names = vec![model_name.clone()];
    if let Some((other_path, other_test_paths)) = cross {
        let other = load_checkpoint(other_path)
            .with_context(|| format!("loading checkpoint {}", other_path.display()))?;
        let other_name = stem(other_path);
        model_names.push(other_name.clone());
        let mut other_sets = Vec::new();
        for path in other_test_paths {
            let samples =
                read_hxs(path).with_context(|| format!("loading samples {}", path.display()))?;
            let (cm, report) = evaluate_with_confusion(&other, &samples)?;
            write_confusion_csv(
                &out_dir.join(format!("confusion_{}_{}.csv", other_name, stem(path))),
                &cm,
            )?;
            rows.push(metrics_row(&other_name, &stem(path), &report));
            other_sets.push(samples);
        }
        let table = herdcast_core::eval::cross_evaluate(&model, &other, &primary_sets, &other_sets)?;
        write_cross_csv(
            &out_dir.join("cross_table.csv"),
            &table,
            &model_name,
            &other_name,
        )?;
        cross_json = Some(
            table
                .cells
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|c| CellJson {
                            mean: c.mean,
                            sd: c.sd,
                            per_set: c.per_set.clone(),
                        })
                        .collect()
                })
                .collect(),
        );
    }
    let mut lines = vec![
        "model,test_set,n_samples,accuracy,macro_precision,macro_recall,macro_f1".to_string(),
    ];
    for r in &rows {
        lines.push(format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.model, r.test_set, r.n_samples, r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1
        ));
    }
    write_lines(&out_dir.join("metrics.csv"), &lines)?;
    let json = EvalJson {
        rows,
        cross: cross_json,
        model_names,
    };
    write_json(&out_dir.join("eval.json"), &json)?;
    Ok(json)
}

fn write_cross_csv(path: &Path, table: &CrossTable, name_a: &str, name_b: &str) -> Result<()> {
    let mut lines = vec!["model,data,mean_accuracy,sd,per_set".to_string()];
    let names = [name_a, name_b];
    for (mi, row) in table.cells.iter().enumerate() {
        for (di, cell) in row.iter().enumerate() {
            let per_set: Vec<String> = cell.per_set.iter().map(|a| format!("{a:.6}")).collect();
            lines.push(format!(
                "{},{},{:.6},{:.6},{}",
                names[mi],
                names[di],
                cell.mean,
                cell.sd,
                per_set.join(";")
            ));
        }
    }
    write_lines(path, &lines)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassRankingJson {
    pub ranking: Vec<usize>,
    pub mean_abs: Vec<f64>,
    pub mean_signed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankingsJson {
    pub model: String,
    pub per_class: Vec<ClassRankingJson>,
}

pub struct ExplainParams {
    pub n_samples: usize,
    pub n_perms: usize,
    pub background_size: usize,
    pub seed: u64,
}

/// Shapley-explain a seeded draw of test samples against a seeded
/// background draw from the training file. Writes `shap_values.csv`,
/// `global_importance.csv`, `top10.csv`, and `rankings.json`.
pub fn explain(
    model_path: &Path,
    test_path: &Path,
    background_path: &Path,
    params: &ExplainParams,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let model = load_checkpoint(model_path)?;
    let test = read_hxs(test_path)?;
    let background_pool = read_hxs(background_path)?;
    if background_pool.is_empty() {
        bail!("background file {} is empty", background_path.display());
    }
    let background = draw_samples(
        &background_pool,
        params.background_size.min(background_pool.len()),
        params.seed,
        "background",
    );
    let explained = draw_samples(
        &test,
        params.n_samples.min(test.len()),
        params.seed,
        "explained",
    );
    if explained.is_empty() {
        bail!("test file {} is empty", test_path.display());
    }
    let report = explain_samples(
        &model,
        &explained,
        &background,
        params.n_perms,
        params.seed,
        stem(background_path),
    )?;
    write_shap_outputs(&report, &stem(model_path), out_dir)
}

fn write_shap_outputs(report: &ShapReport, model_name: &str, out_dir: &Path) -> Result<()> {
    let names = feature_names();
    let mut lines = vec!["sample_id,class,channel,channel_name,phi,stderr".to_string()];
    for (si, id) in report.sample_ids.iter().enumerate() {
        for class in 0..N_CLASSES {
            for ch in 0..names.len() {
                lines.push(format!(
                    "{id},{class},{ch},{},{:.9e},{:.9e}",
                    names[ch],
                    report.values[si][[class, ch]],
                    report.stderr[si][[class, ch]],
                ));
            }
        }
    }
    write_lines(&out_dir.join("shap_values.csv"), &lines)?;

    let mut lines = vec!["class,rank,channel,channel_name,mean_abs,mean_signed".to_string()];
    for (class, g) in report.global.iter().enumerate() {
        for (rank, &ch) in g.ranking.iter().enumerate() {
            lines.push(format!(
                "{class},{rank},{ch},{},{:.9e},{:.9e}",
                names[ch], g.mean_abs[ch], g.mean_signed[ch]
            ));
        }
    }
    write_lines(&out_dir.join("global_importance.csv"), &lines)?;

    let mut lines = vec!["class,rank,channel,channel_name,mean_abs".to_string()];
    for (class, g) in report.global.iter().enumerate() {
        for (rank, &ch) in g.ranking.iter().take(10).enumerate() {
            lines.push(format!(
                "{class},{},{ch},{},{:.6}",
                rank + 1,
                names[ch],
                g.mean_abs[ch]
            ));
        }
    }
    write_lines(&out_dir.join("top10.csv"), &lines)?;

    let json = RankingsJson {
        model: model_name.to_string(),
        per_class: report
            .global
            .iter()
            .map(|g: &GlobalImportance| ClassRankingJson {
                ranking: g.ranking.clone(),
                mean_abs: g.mean_abs.clone(),
                mean_signed: g.mean_signed.clone(),
            })
            .collect(),
    };
    write_json(&out_dir.join("rankings.json"), &json)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyzeParts {
    Both,
    MovementTimes,
    Measures,
}

/// Per-trial herding measures and inter-target movement-time tables.
pub fn analyze(trials_path: &Path, bin_ms: f64, out_dir: &Path) -> Result<()> {
    analyze_parts(trials_path, bin_ms, AnalyzeParts::Both, out_dir)
}

pub fn analyze_parts(
    trials_path: &Path,
    bin_ms: f64,
    parts: AnalyzeParts,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let trials = read_trials(trials_path)?;
    let repulsion = WorldConfig::default().repulsion_radius;
    let r_star = WorldConfig::default().containment_radius;

    let mut measure_lines = vec![
        "trial_id,expertise,success,gathering_time_s,herder_distance_m,herd_distance_m,herd_spread_m2,herd_spread_pct,containment_rate_pct"
            .to_string(),
    ];
    let mut times_by_expertise: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let mut skipped = 0usize;
    let want_measures = parts != AnalyzeParts::MovementTimes;
    let want_times = parts != AnalyzeParts::Measures;
    for trial in &trials {
        if want_measures {
            let m = herding_measures(trial, r_star)?;
            measure_lines.push(format!(
                "{},{},{},{:.4},{:.4},{:.4},{:.6},{:.4},{:.4}",
                trial.trial_id,
                trial.expertise,
                trial.success,
                m.gathering_time,
                m.herder_distance,
                m.herd_distance,
                m.herd_spread,
                m.herd_spread_pct,
                m.containment_rate_pct
            ));
        }
        if !want_times || !trial.success {
            continue;
        }
        // too short to label or to hold a switch
        if trial.n_frames() < 3 {
            continue;
        }
        let labeled;
        let labeled_ref = if trial.is_labeled() {
            trial
        } else {
            labeled = herdcast_core::ingest::auto_label(trial, repulsion)?;
            &labeled
        };
        let times = inter_target_times(labeled_ref, repulsion)?;
        skipped += times.skipped;
        times_by_expertise
            .entry(trial.expertise.to_string())
            .or_default()
            .extend(times.all());
    }
    if want_measures {
        write_lines(&out_dir.join("measures.csv"), &measure_lines)?;
    }
    if want_times {
        let mut hist_lines = vec!["expertise,bin_lo_ms,bin_hi_ms,count".to_string()];
        let mut summary_lines =
            vec!["expertise,n_events,mean_ms,pct_under_600ms,skipped_events".to_string()];
        for (expertise, times) in &times_by_expertise {
            for (lo, hi, count) in movement_time_histogram(times, bin_ms) {
                hist_lines.push(format!("{expertise},{lo:.0},{hi:.0},{count}"));
            }
            let n = times.len();
            let mean = times.iter().sum::<f64>() / n.max(1) as f64;
            let under = times.iter().filter(|&&t| t < 600.0).count();
            summary_lines.push(format!(
                "{expertise},{n},{mean:.1},{:.1},{skipped}",
                100.0 * under as f64 / n.max(1) as f64
            ));
        }
        write_lines(&out_dir.join("movement_times.csv"), &hist_lines)?;
        write_lines(&out_dir.join("movement_summary.csv"), &summary_lines)?;
    }
    Ok(())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!("parsing {}: {e}", path.display()))
}
