//! Pipeline orchestration: stage sequencing, content-hash resumability,
//! and report assembly.

use crate::config::PipelineConfig;
use crate::stages::{
    self, read_json, write_lines, EvalJson, ExplainParams, RankingsJson, SampleParams, TrainParams,
};
use anyhow::{bail, Context, Result};
use herdcast_core::dataset::Balance;
use herdcast_core::explain::{kendall_tau, ranking_to_ranks, RankDepth};
use herdcast_core::features::feature_names;
use herdcast_core::ingest::Expertise;
use herdcast_core::nn::LossMode;
use herdcast_core::rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

const EXPERTISES: [Expertise; 2] = [Expertise::Expert, Expertise::Novice];

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StageRecord {
    /// Relative output path -> content hash.
    outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    fn load(dir: &Path) -> Manifest {
        read_json(&dir.join("manifest.json")).unwrap_or_default()
    }

    fn save(&self, dir: &Path) -> Result<()> {
        stages::write_json(&dir.join("manifest.json"), self)
    }

    /// A stage is current when it ran under this config and all recorded
    /// outputs still hash the same.
    fn stage_current(&self, name: &str, dir: &Path) -> bool {
        let Some(record) = self.stages.get(name) else {
            return false;
        };
        record.outputs.iter().all(|(rel, expect)| {
            let path = dir.join(rel);
            path.exists() && hash_file(&path).map(|h| &h == expect).unwrap_or(false)
        })
    }

    fn record_stage(&mut self, name: &str, dir: &Path, outputs: &[PathBuf]) -> Result<()> {
        let mut map = BTreeMap::new();
        for out in outputs {
            let rel = out
                .strip_prefix(dir)
                .unwrap_or(out)
                .to_string_lossy()
                .into_owned();
            map.insert(rel, hash_file(out)?);
        }
        self.stages.insert(name.to_string(), StageRecord { outputs: map });
        Ok(())
    }
}

fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn trials(&self, e: Expertise) -> PathBuf {
        self.root.join("trials").join(format!("{e}.jsonl"))
    }

    pub fn samples_dir(&self, e: Expertise) -> PathBuf {
        self.root.join("samples").join(e.to_string())
    }

    pub fn model(&self, e: Expertise) -> PathBuf {
        self.root.join("models").join(format!("{e}.hxm"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn explain_dir(&self, e: Expertise) -> PathBuf {
        self.root.join("explain").join(e.to_string())
    }

    pub fn analyze_dir(&self) -> PathBuf {
        self.root.join("analyze")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Execute the configured stages in order, skipping stages whose recorded
/// outputs are already up to date for this exact config.
pub fn run_pipeline(config: &PipelineConfig) -> Result<()> {
    config.validate().map_err(crate::config_error)?;
    let canonical = config.canonical();
    let config_hash = sha256_hex(canonical.as_bytes());
    let paths = RunPaths {
        root: config.pipeline.out_dir.clone(),
    };
    fs::create_dir_all(&paths.root)?;
    fs::write(paths.root.join("config.toml"), &canonical)?;

    let mut manifest = Manifest::load(&paths.root);
    if manifest.config_hash != config_hash {
        // config changed: all stages are stale
        manifest = Manifest::default();
        manifest.config_hash = config_hash.clone();
    }
    let seed = config.pipeline.seed;

    for stage in &config.pipeline.stages {
        if manifest.stage_current(stage, &paths.root) {
            println!("[skip] {stage} (up to date)");
            continue;
        }
        println!("[run ] {stage}");
        let outputs: Vec<PathBuf> = match stage.as_str() {
            "simulate" => {
                let mut outs = Vec::new();
                for (i, e) in EXPERTISES.iter().enumerate() {
                    let out = paths.trials(*e);
                    let (total, ok) = stages::simulate(
                        *e,
                        config.simulate.pairs,
                        config.simulate.trials_per_pair,
                        rng::derive_seed(seed, "stage-simulate", i as u64),
                        &out,
                    )?;
                    println!("       {e}: {ok}/{total} successful trials -> {}", out.display());
                    outs.push(out);
                }
                outs
            }
            "build-samples" => {
                let mut outs = Vec::new();
                for (i, e) in EXPERTISES.iter().enumerate() {
                    let params = SampleParams {
                        t_hor: config.samples.t_hor,
                        stride: config.samples.stride,
                        balance: match config.samples.balance.as_str() {
                            "balanced" => Balance::Balanced,
                            _ => Balance::Representative,
                        },
                        n_train: config.samples.n_train,
                        n_test: config.samples.n_test,
                        n_test_sets: config.samples.n_test_sets,
                        validation_fraction: config.samples.validation_fraction,
                        seed: rng::derive_seed(seed, "stage-samples", i as u64),
                    };
                    let dir = paths.samples_dir(*e);
                    stages::build_samples(&paths.trials(*e), &params, &dir)?;
                    outs.extend(list_files(&dir)?);
                }
                outs
            }
            "train" => {
                let mut outs = Vec::new();
                for (i, e) in EXPERTISES.iter().enumerate() {
                    let params = TrainParams {
                        scale: config.pipeline.scale,
                        seed: rng::derive_seed(seed, "stage-train", i as u64),
                        alpha: config.train.alpha,
                        batch_size: config.train.batch_size,
                        max_epochs: config.train.max_epochs,
                        patience: config.train.patience,
                        min_delta: config.train.min_delta,
                        standardize: config.train.standardize,
                        loss_mode: match config.train.loss.as_str() {
                            "all" => LossMode::AllSteps,
                            _ => LossMode::FinalStep,
                        },
                        expertise: Some(*e),
                        config_hash: u64::from_le_bytes(
                            hex_prefix(&config_hash)
                                .try_into()
                                .expect("8-byte prefix"),
                        ),
                        expected_horizon: Some(config.samples.t_hor),
                    };
                    let dir = paths.samples_dir(*e);
                    let out = paths.model(*e);
                    let (epochs, acc) = stages::train(
                        &dir.join("train.hxs"),
                        &dir.join("val.hxs"),
                        &params,
                        &out,
                    )?;
                    println!("       {e}: {epochs} epochs, best val accuracy {acc:.3}");
                    outs.push(out);
                }
                outs
            }
            "eval" => {
                let expert_tests = test_files(&paths.samples_dir(Expertise::Expert))?;
                let novice_tests = test_files(&paths.samples_dir(Expertise::Novice))?;
                stages::eval(
                    &paths.model(Expertise::Expert),
                    &expert_tests,
                    Some((paths.model(Expertise::Novice).as_path(), novice_tests.as_slice())),
                    &paths.eval_dir(),
                )?;
                list_files(&paths.eval_dir())?
            }
            "explain" => {
                let mut outs = Vec::new();
                for (i, e) in EXPERTISES.iter().enumerate() {
                    let dir = paths.explain_dir(*e);
                    let samples_dir = paths.samples_dir(*e);
                    let params = ExplainParams {
                        n_samples: config.explain.n_samples,
                        n_perms: config.explain.n_perms,
                        background_size: config.explain.background_size,
                        seed: rng::derive_seed(seed, "stage-explain", i as u64),
                    };
                    stages::explain(
                        &paths.model(*e),
                        &samples_dir.join("test_00.hxs"),
                        &samples_dir.join("train.hxs"),
                        &params,
                        &dir,
                    )?;
                    outs.extend(list_files(&dir)?);
                }
                outs
            }
            "analyze" => {
                let dir = paths.analyze_dir();
                // both expertises into one set of tables
                let mut all = Vec::new();
                for e in EXPERTISES {
                    all.push(paths.trials(e));
                }
                analyze_many(&all, config.analyze.bin_ms, &dir)?;
                list_files(&dir)?
            }
            "report" => {
                assemble_report(&paths, &config_hash, seed)?;
                list_files(&paths.report_dir())?
            }
            other => bail!("unknown stage '{other}'"),
        };
        manifest.record_stage(stage, &paths.root, &outputs)?;
        manifest.save(&paths.root)?;
    }
    Ok(())
}

fn hex_prefix(hex: &str) -> Vec<u8> {
    (0..8)
        .map(|i| u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).unwrap_or(0))
        .collect()
}

fn test_files(samples_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = list_files(samples_dir)?
        .into_iter()
        .filter(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().starts_with("test_"))
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Concatenate several trial files into combined analytics tables.
fn analyze_many(trial_files: &[PathBuf], bin_ms: f64, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    // run the single-file analyzer into scratch dirs, then merge
    let scratch = out_dir.join(".parts");
    let mut measure_lines: Vec<String> = Vec::new();
    let mut hist_lines: Vec<String> = Vec::new();
    let mut summary_lines: Vec<String> = Vec::new();
    for (i, file) in trial_files.iter().enumerate() {
        let part = scratch.join(i.to_string());
        stages::analyze(file, bin_ms, &part)?;
        append_csv(&part.join("measures.csv"), &mut measure_lines, i == 0)?;
        append_csv(&part.join("movement_times.csv"), &mut hist_lines, i == 0)?;
        append_csv(&part.join("movement_summary.csv"), &mut summary_lines, i == 0)?;
    }
    fs::remove_dir_all(&scratch).ok();
    write_lines(&out_dir.join("measures.csv"), &measure_lines)?;
    write_lines(&out_dir.join("movement_times.csv"), &hist_lines)?;
    write_lines(&out_dir.join("movement_summary.csv"), &summary_lines)?;
    Ok(())
}

fn append_csv(path: &Path, into: &mut Vec<String>, keep_header: bool) -> Result<()> {
    let text = fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate() {
        if i == 0 && !keep_header {
            continue;
        }
        into.push(line.to_string());
    }
    Ok(())
}

/// Assemble the final report directory: metrics, confusion matrices, the
/// cross-expertise table, per-class attribution rankings, the Kendall
/// rank-agreement table, and the behavioral analytics tables.
pub fn assemble_report(paths: &RunPaths, config_hash: &str, seed: u64) -> Result<()> {
    let dir = paths.report_dir();
    fs::create_dir_all(&dir)?;
    let tag = format!("# config={} seed={seed}", &config_hash[..12]);

    // evaluation tables
    let eval_dir = paths.eval_dir();
    copy_with_tag(&eval_dir.join("metrics.csv"), &dir.join("metrics.csv"), &tag)?;
    if eval_dir.join("cross_table.csv").exists() {
        copy_with_tag(
            &eval_dir.join("cross_table.csv"),
            &dir.join("cross_table.csv"),
            &tag,
        )?;
    }
    for file in list_files(&eval_dir)? {
        let name = file.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("confusion_") {
            fs::copy(&file, dir.join(&name))?;
        }
    }

    // attribution rankings and the Kendall table
    let expert: RankingsJson = read_json(&paths.explain_dir(Expertise::Expert).join("rankings.json"))?;
    let novice: RankingsJson = read_json(&paths.explain_dir(Expertise::Novice).join("rankings.json"))?;
    let names = feature_names();
    for (expertise, rankings) in [("expert", &expert), ("novice", &novice)] {
        let mut lines = vec![format!("{tag}"), "class,rank,channel,channel_name,mean_abs".to_string()];
        for (class, cr) in rankings.per_class.iter().enumerate() {
            for (rank, &ch) in cr.ranking.iter().take(10).enumerate() {
                lines.push(format!(
                    "{class},{},{ch},{},{:.6}",
                    rank + 1,
                    names[ch],
                    cr.mean_abs[ch]
                ));
            }
        }
        write_lines(&dir.join(format!("shap_top10_{expertise}.csv")), &lines)?;
    }
    let mut kendall_lines = vec![
        tag.clone(),
        "class,depth,n_items,tau,p_value".to_string(),
    ];
    for class in 0..expert.per_class.len().min(novice.per_class.len()) {
        let ra = ranking_to_ranks(&expert.per_class[class].ranking);
        let rb = ranking_to_ranks(&novice.per_class[class].ranking);
        for depth in [RankDepth::All, RankDepth::Top(10), RankDepth::Top(5)] {
            let r = kendall_tau(&ra, &rb, depth)?;
            kendall_lines.push(format!(
                "{class},{depth},{},{:.4},{:.4}",
                r.n_items, r.tau, r.p_value
            ));
        }
    }
    write_lines(&dir.join("kendall.csv"), &kendall_lines)?;

    // behavioral analytics
    let analyze_dir = paths.analyze_dir();
    for name in ["measures.csv", "movement_times.csv", "movement_summary.csv"] {
        let src = analyze_dir.join(name);
        if src.exists() {
            copy_with_tag(&src, &dir.join(name), &tag)?;
        }
    }

    // run summary
    let eval_json: EvalJson = read_json(&eval_dir.join("eval.json"))?;
    let mut summary = vec![tag, "model,test_set,accuracy".to_string()];
    for row in &eval_json.rows {
        summary.push(format!("{},{},{:.6}", row.model, row.test_set, row.accuracy));
    }
    write_lines(&dir.join("summary.csv"), &summary)?;
    Ok(())
}

fn copy_with_tag(src: &Path, dst: &Path, tag: &str) -> Result<()> {
    let body = fs::read_to_string(src).with_context(|| format!("reading {}", src.display()))?;
    fs::write(dst, format!("{tag}\n{body}"))?;
    Ok(())
}
