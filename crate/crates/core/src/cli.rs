//! Command-line pipeline: synth, ingest, stats, train, score, calibrate,
//! detect, inject-delay and report.
//!
//! Every command writes into `--out` (or `out_dir` from the config file)
//! through a staging directory, so a failing command leaves no partial
//! files behind. Each output directory gets a `run.json` manifest holding
//! the seed, the model and the resolved configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::detect::{self, MetricsRow, NoveltyScore, ThresholdModel};
use crate::error::{Error, Result};
use crate::lm::{self, AnyModel};
use crate::synth;
use crate::trace::{self, Request};

#[derive(Debug, Parser)]
#[command(name = "syscall-novelty", version, about = "Novelty detection in system-call request traces")]
pub struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["ngram", "lstm", "transformer", "longformer"])]
    pub model: Option<String>,
    /// Requests are truncated to this many events before training and scoring.
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with one directory per split.
    Synth,
    /// Delimit a raw JSON-lines event stream into a request split.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "train_id")]
        split: String,
        #[arg(long, default_value = "id")]
        label: String,
    },
    /// Print per-split length and duration statistics as CSV.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the selected model on train_id, validating on val_id.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score every split except train_id with a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Pick per-behavior and pooled thresholds from validation scores.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Apply calibrated thresholds to test scores.
    Detect {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
    },
    /// Perplexity of one request under injected delays.
    InjectDelay {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val_id")]
        split: String,
        /// Index of the request within the split.
        #[arg(long, default_value_t = 0)]
        request: usize,
    },
    /// Collect the metrics of several detect runs into one table.
    Report {
        /// Output directories of detect runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Stats { .. } => "stats",
            Command::Train { .. } => "train",
            Command::Score { .. } => "score",
            Command::Calibrate { .. } => "calibrate",
            Command::Detect { .. } => "detect",
            Command::InjectDelay { .. } => "inject-delay",
            Command::Report { .. } => "report",
        }
    }
}

/// The manifest written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub model: String,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("run.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }
}

/// Per-behavior and pooled thresholds, as written by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub model: String,
    pub seed: u64,
    pub per_behavior: BTreeMap<String, ThresholdModel>,
    pub pooled: ThresholdModel,
}

/// Summary of one split, as printed by `stats`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: String,
    pub count: usize,
    pub len_min: usize,
    pub len_mean: f64,
    pub len_std: f64,
    pub len_max: usize,
    pub duration_ms_min: f64,
    pub duration_ms_mean: f64,
    pub duration_ms_std: f64,
    pub duration_ms_max: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn split_stats(split: &str, requests: &[Request]) -> Result<SplitStats> {
    if requests.is_empty() {
        return Err(Error::EmptyDataset(format!("split `{split}` has no requests")));
    }
    let lens: Vec<f64> = requests.iter().map(|r| r.len() as f64).collect();
    let durs: Vec<f64> = requests.iter().map(|r| r.duration_ns as f64 / 1e6).collect();
    let (len_mean, len_std) = mean_std(&lens);
    let (dur_mean, dur_std) = mean_std(&durs);
    Ok(SplitStats {
        split: split.into(),
        count: requests.len(),
        len_min: requests.iter().map(Request::len).min().unwrap_or(0),
        len_mean,
        len_std,
        len_max: requests.iter().map(Request::len).max().unwrap_or(0),
        duration_ms_min: durs.iter().copied().fold(f64::INFINITY, f64::min),
        duration_ms_mean: dur_mean,
        duration_ms_std: dur_std,
        duration_ms_max: durs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Row of the cross-run table written by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub behavior: String,
    pub auroc: f64,
    pub f_score: f64,
    pub f_score_pooled: f64,
}

/// Output directory whose files only appear once the command succeeds.
struct Staging {
    out: PathBuf,
    dir: PathBuf,
    created_out: bool,
    outputs: Vec<String>,
    committed: bool,
}

impl Staging {
    fn new(out: &Path) -> Result<Self> {
        let created_out = !out.exists();
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let dir = out.join(format!(".partial-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Staging {
            out: out.to_path_buf(),
            dir,
            created_out,
            outputs: Vec::new(),
            committed: false,
        })
    }

    /// Staged location of `rel`, with parent directories created.
    fn file(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    fn commit(mut self, cfg: &RunConfig, command: &str, model: &str) -> Result<Vec<PathBuf>> {
        let manifest = RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            model: model.into(),
            outputs: self.outputs.clone(),
            config: cfg.clone(),
        };
        let path = self.file("run.json")?;
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        let mut finals = Vec::new();
        for rel in &self.outputs {
            let from = self.dir.join(rel);
            let to = self.out.join(rel);
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
            finals.push(to);
        }
        fs::remove_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        self.committed = true;
        Ok(finals)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
            if self.created_out {
                let _ = fs::remove_dir(&self.out);
            }
        }
    }
}

/// Loads `--config` (or the defaults) and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(model) = &cli.model {
        cfg.model = model.clone();
    }
    if let Some(max_len) = cli.max_len {
        cfg.max_len = max_len;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Invalid(e.to_string()))?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth => synth_cmd(&cfg),
        Command::Ingest { input, split, label } => ingest_cmd(&cfg, input, split, label),
        Command::Stats { data } => stats_cmd(data),
        Command::Train { data } => train_cmd(&cfg, data),
        Command::Score { checkpoint, data } => score_cmd(&cfg, checkpoint, data),
        Command::Calibrate { scores } => calibrate_cmd(&cfg, scores),
        Command::Detect { scores, thresholds } => detect_cmd(&cfg, scores, thresholds),
        Command::InjectDelay {
            checkpoint,
            data,
            split,
            request,
        } => inject_delay_cmd(&cfg, checkpoint, data, split, *request),
        Command::Report { runs } => report_cmd(&cfg, runs),
    }
}

fn truncated(requests: Vec<Request>, max_len: usize) -> Vec<Request> {
    requests.into_iter().map(|r| r.truncate(max_len)).collect()
}

fn synth_cmd(cfg: &RunConfig) -> Result<()> {
    let workload = cfg.workload()?;
    workload.validate()?;
    let mut stage = Staging::new(&cfg.out_dir)?;
    for (split, spec, count) in workload.splits() {
        let requests = synth::generate_split(spec, count, workload.seed, &split)?;
        let rel = format!("{split}/{}", trace::SPLIT_FILE);
        trace::write_requests(&stage.file(&rel)?, &requests)?;
        log::info!("{split}: {count} requests");
    }
    stage.commit(cfg, "synth", &cfg.model)?;
    Ok(())
}

fn ingest_cmd(cfg: &RunConfig, input: &Path, split: &str, label: &str) -> Result<()> {
    let events = trace::read_event_file(input)?;
    let delimited = trace::delimit_requests(&events, label)?;
    let mut stage = Staging::new(&cfg.out_dir)?;
    let path = stage.file(&format!("{split}/{}", trace::SPLIT_FILE))?;
    trace::write_requests(&path, &delimited.requests)?;
    stage.commit(cfg, "ingest", &cfg.model)?;
    println!(
        "{} requests written to {split}, {} unmatched enter marker(s) dropped",
        delimited.requests.len(),
        delimited.dropped_unmatched
    );
    Ok(())
}

fn stats_cmd(data: &Path) -> Result<()> {
    let splits: Vec<(String, Vec<Request>)> = if data.is_file() {
        vec![(data.display().to_string(), trace::read_requests(data)?)]
    } else {
        trace::list_splits(data)?
            .into_iter()
            .map(|s| trace::read_split(data, &s).map(|r| (s, r)))
            .collect::<Result<_>>()?
    };
    if splits.is_empty() {
        return Err(Error::EmptyDataset(format!("no splits under {}", data.display())));
    }
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for (name, requests) in &splits {
        w.serialize(split_stats(name, requests)?)
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<stdout>", e))
}

fn train_cmd(cfg: &RunConfig, data: &Path) -> Result<()> {
    let train = truncated(trace::read_split(data, "train_id")?, cfg.max_len);
    let mut stage = Staging::new(&cfg.out_dir)?;
    let model = match cfg.architecture() {
        None => {
            let m = lm::ngram_fit(&train, cfg.ngram_order, cfg.ngram_alpha)?;
            log::info!("fitted {}-gram with {} contexts", m.n, m.contexts().count());
            AnyModel::Ngram(m)
        }
        Some(arch) => {
            let val = truncated(trace::read_split(data, "val_id")?, cfg.max_len);
            let outcome = lm::train(&cfg.neural_config(arch), &train, &val, &cfg.train_config())?;
            lm::train::write_progress_csv(&stage.file("progress.csv")?, &outcome.progress)?;
            if let Some(groups) = &outcome.gradient_check {
                write_gradcheck_csv(&stage.file("gradcheck.csv")?, groups)?;
            }
            log::info!("best validation cross-entropy {:.4} nats", outcome.best_val_ce);
            AnyModel::Neural(outcome.model)
        }
    };
    model.save(&stage.file("model.ckpt")?, cfg.seed)?;
    stage.commit(cfg, "train", model.architecture())?;
    Ok(())
}

fn write_gradcheck_csv(path: &Path, groups: &[lm::gradcheck::GroupError]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("group,analytic_norm,relative_error,vanishing\n");
    for g in groups {
        text += &format!("{},{},{},{}\n", g.name, g.analytic_norm, g.relative_error, g.vanishing);
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn score_cmd(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<()> {
    let (model, _) = AnyModel::load(checkpoint)?;
    let splits: Vec<String> = trace::list_splits(data)?
        .into_iter()
        .filter(|s| s != "train_id")
        .collect();
    if splits.is_empty() {
        return Err(Error::EmptyDataset(format!("no splits to score under {}", data.display())));
    }
    let mut stage = Staging::new(&cfg.out_dir)?;
    for split in &splits {
        let requests = truncated(trace::read_split(data, split)?, cfg.max_len);
        let scores = detect::score_requests(&model, &requests)?;
        detect::write_scores_csv(&stage.file(&format!("{split}.csv"))?, &scores)?;
        log::info!("scored {split}: {} requests", scores.len());
    }
    stage.commit(cfg, "score", model.architecture())?;
    Ok(())
}

fn read_pp(dir: &Path, split: &str) -> Result<Vec<f64>> {
    let scores: Vec<NoveltyScore> = detect::read_scores_csv(&dir.join(format!("{split}.csv")))?;
    Ok(detect::perplexities(&scores))
}

/// Behaviors with a `<prefix>_<behavior>.csv` score file, excluding `id`.
fn scored_behaviors(dir: &Path, prefix: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name().to_string_lossy().into_owned();
        if let Some(b) = name.strip_prefix(prefix).and_then(|n| n.strip_suffix(".csv")) {
            if b != "id" {
                out.push(b.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn model_of(dir: &Path, fallback: &str) -> String {
    RunManifest::load(dir).map(|m| m.model).unwrap_or_else(|_| fallback.to_string())
}

fn calibrate_cmd(cfg: &RunConfig, scores: &Path) -> Result<()> {
    let id = read_pp(scores, "val_id")?;
    let behaviors = scored_behaviors(scores, "val_")?;
    if behaviors.is_empty() {
        return Err(Error::EmptyDataset("no val_<behavior>.csv score files".into()));
    }
    let mut per_behavior = BTreeMap::new();
    let mut oods = Vec::new();
    for b in &behaviors {
        let ood = read_pp(scores, &format!("val_{b}"))?;
        per_behavior.insert(b.clone(), detect::calibrate_threshold(&id, &ood, b)?);
        oods.push(ood);
    }
    let refs: Vec<&[f64]> = oods.iter().map(Vec::as_slice).collect();
    let file = ThresholdFile {
        model: model_of(scores, &cfg.model),
        seed: cfg.seed,
        per_behavior,
        pooled: detect::calibrate_pooled(&id, &refs)?,
    };
    let mut stage = Staging::new(&cfg.out_dir)?;
    let path = stage.file("thresholds.json")?;
    let json = serde_json::to_string_pretty(&file).expect("thresholds serialize");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    stage.commit(cfg, "calibrate", &file.model)?;
    Ok(())
}

fn detect_cmd(cfg: &RunConfig, scores: &Path, thresholds: &Path) -> Result<()> {
    let text = fs::read_to_string(thresholds).map_err(|e| Error::io(thresholds, e))?;
    let tf: ThresholdFile =
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", thresholds.display())))?;
    let id = read_pp(scores, "test_id")?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut stage = Staging::new(&cfg.out_dir)?;
    for (b, tm) in &tf.per_behavior {
        let ood = read_pp(scores, &format!("test_{b}"))?;
        let per = detect::metrics_from_scores(&id, &ood, tm, b)?;
        let pooled = detect::metrics_from_scores(&id, &ood, &tf.pooled, b)?;
        detect::write_roc_csv(&stage.file(&format!("roc_{b}.csv"))?, &per.roc)?;
        rows.push(per.row(&tf.model, "per_behavior"));
        rows.push(pooled.row(&tf.model, "pooled"));
    }
    detect::write_metrics_csv(&stage.file("metrics.csv")?, &rows)?;
    stage.commit(cfg, "detect", &tf.model)?;
    println!("model,policy,behavior,auroc,f_score");
    for r in &rows {
        println!("{},{},{},{:.4},{:.4}", r.model, r.policy, r.behavior, r.auroc, r.f_score);
    }
    Ok(())
}

fn inject_delay_cmd(cfg: &RunConfig, checkpoint: &Path, data: &Path, split: &str, index: usize) -> Result<()> {
    let (model, _) = AnyModel::load(checkpoint)?;
    let requests = trace::read_split(data, split)?;
    let request = requests
        .into_iter()
        .nth(index)
        .ok_or_else(|| Error::Invalid(format!("split `{split}` has no request {index}")))?
        .truncate(cfg.max_len);
    if request.is_empty() {
        return Err(Error::EmptyDataset(format!("request {index} of `{split}` has no events")));
    }
    let delays = detect::log_grid(cfg.delay_min_ns, cfg.delay_max_ns, cfg.delay_count);
    let positions = detect::delay_positions(request.len(), cfg.delay_positions, cfg.seed);
    let points = detect::inject_delays(&model, &request, &delays, &positions)?;
    let mut stage = Staging::new(&cfg.out_dir)?;
    detect::write_delay_csv(&stage.file("delay_curve.csv")?, &points)?;
    stage.commit(cfg, "inject-delay", model.architecture())?;
    let d: Vec<f64> = points.iter().map(|p| p.delay_ns).collect();
    let m: Vec<f64> = points.iter().map(|p| p.mean_pp).collect();
    println!(
        "baseline perplexity {:.4}, Spearman(delay, mean perplexity) = {:.4}",
        points[0].baseline_pp,
        detect::spearman(&d, &m)
    );
    Ok(())
}

/// Reads `metrics.csv` from each run directory into one row per model and
/// behavior.
pub fn collect_report(runs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut table: BTreeMap<(String, String), ReportRow> = BTreeMap::new();
    for dir in runs {
        for r in detect::read_metrics_csv(&dir.join("metrics.csv"))? {
            let row = table
                .entry((r.model.clone(), r.behavior.clone()))
                .or_insert_with(|| ReportRow {
                    model: r.model.clone(),
                    behavior: r.behavior.clone(),
                    auroc: r.auroc,
                    f_score: f64::NAN,
                    f_score_pooled: f64::NAN,
                });
            match r.policy.as_str() {
                "pooled" => row.f_score_pooled = r.f_score,
                _ => row.f_score = r.f_score,
            }
        }
    }
    Ok(table.into_values().collect())
}

fn report_cmd(cfg: &RunConfig, runs: &[PathBuf]) -> Result<()> {
    let rows = collect_report(runs)?;
    let mut stage = Staging::new(&cfg.out_dir)?;
    let path = stage.file("report.csv")?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Invalid(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    drop(w);
    stage.commit(cfg, "report", "all")?;
    println!("{:<12} {:<10} {:>7} {:>7} {:>8}", "model", "behavior", "AuROC", "F", "F_pooled");
    for r in &rows {
        println!(
            "{:<12} {:<10} {:>7.4} {:>7.4} {:>8.4}",
            r.model, r.behavior, r.auroc, r.f_score, r.f_score_pooled
        );
    }
    Ok(())
}
