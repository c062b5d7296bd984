//! The experiment pipeline: source training, caching, adaptation,
//! fine-tuning and reporting.
//!
//! The in-memory functions ([`train_sources`], [`adapt`], ...) do no IO; the
//! `cmd_*` functions wrap them with checkpoints, metrics files and manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dine_core::bank::MemoryBank;
use dine_core::distill::run_distillation;
use dine_core::finetune::run_finetune;
use dine_core::models::{SourceNet, TargetNet};
use dine_core::predictor::{init_teacher, no_adapt_predictions, DisclosureMode, LocalPredictor, Predictor};
use dine_core::scenario::{evaluate, evaluate_predictions, generate, DomainData, HiddenLabels, Scenario, TargetDomain};
use dine_core::training::{train_source, EpochRecord};
use serde::{Deserialize, Serialize};

use crate::cache::{write_cache, CachedPredictor};
use crate::checkpoint::{Checkpoint, SavedNet};
use crate::config::{ExperimentConfig, Manifest, PredictorSource};
use crate::error::{io_at, Error, Result};
use crate::service::{RemotePredictor, Server};

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run: String,
    pub seed: u64,
    #[serde(flatten)]
    pub record: EpochRecord,
    /// Target accuracy (source test accuracy for source training), percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// After distillation, before fine-tuning.
    pub before_ft: f64,
    pub accuracy: f64,
    pub per_class_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub no_adapt: f64,
    pub seeds: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
    pub before_ft_mean: f64,
    pub before_ft_std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trained source models with their held-out accuracy.
#[derive(Debug, Clone)]
pub struct SourceModels {
    pub nets: Vec<SourceNet>,
    pub test_accuracy: Vec<f64>,
}

impl SourceModels {
    pub fn predictors(&self, mode: DisclosureMode) -> Result<Vec<LocalPredictor>> {
        Ok(self
            .nets
            .iter()
            .map(|n| LocalPredictor::new(n.clone(), mode))
            .collect::<dine_core::Result<_>>()?)
    }
}

fn as_target(d: &DomainData) -> TargetDomain {
    TargetDomain {
        features: d.features.clone(),
        labels: HiddenLabels::new(d.labels.clone()),
    }
}

/// Trains one source model per source domain on its training split.
pub fn train_sources(cfg: &ExperimentConfig, scenario: &Scenario, metrics: &mut Vec<MetricRecord>) -> Result<SourceModels> {
    let mut nets = Vec::new();
    let mut test_accuracy = Vec::new();
    for (m, domain) in scenario.sources.iter().enumerate() {
        let seed = cfg.source.seed + m as u64;
        let (train, test) = domain.split(cfg.source_train_fraction, seed)?;
        let test = as_target(&test);
        let scfg = dine_core::training::SourceTrainConfig { seed, ..cfg.source.clone() };
        let mut err = None;
        let net = train_source(&scfg, &train, |rec, net| match evaluate(net, &test) {
            Ok(e) => metrics.push(MetricRecord {
                run: format!("source-{m}"),
                seed,
                record: rec.clone(),
                accuracy: e.accuracy,
            }),
            Err(e) => err = Some(e),
        })?;
        if let Some(e) = err {
            return Err(e.into());
        }
        test_accuracy.push(evaluate(&net, &test)?.accuracy);
        nets.push(net);
    }
    Ok(SourceModels { nets, test_accuracy })
}

/// Accuracy of the averaged source predictions, no training.
pub fn no_adapt_accuracy(cfg: &ExperimentConfig, predictors: &[&dyn Predictor], target: &TargetDomain) -> Result<f64> {
    let preds = no_adapt_predictions(predictors, &target.features, cfg.adapt.teacher)?;
    Ok(evaluate_predictions(&preds, &target.labels, cfg.scenario.num_classes)?.accuracy)
}

/// Outcome of one seed: the adapted network, final bank and scores.
pub struct SeedRun {
    pub result: SeedResult,
    pub net: TargetNet,
    pub initial_bank: MemoryBank,
    pub bank: MemoryBank,
}

/// Distils and fine-tunes one target network. Target labels are touched only
/// by the per-epoch evaluation.
pub fn adapt_seed(
    cfg: &ExperimentConfig,
    predictors: &[&dyn Predictor],
    target: &TargetDomain,
    seed: u64,
    metrics: &mut Vec<MetricRecord>,
) -> Result<SeedRun> {
    let x = &target.features;
    let acfg = dine_core::distill::AdaptConfig { seed, ..cfg.adapt.clone() };
    let fcfg = dine_core::finetune::FinetuneConfig { seed, ..cfg.finetune.clone() };
    let mut bank = init_teacher(predictors, x, acfg.teacher)?;
    let initial_bank = bank.clone();
    let mut net = TargetNet::new(&cfg.target_architecture(x.cols()), seed)?;
    run_distillation(&acfg, &mut bank, &mut net, x, |rec, net, _| {
        metrics.push(MetricRecord {
            run: cfg.name.clone(),
            seed,
            record: rec.clone(),
            accuracy: evaluate(net, target)?.accuracy,
        });
        Ok(())
    })?;
    let before_ft = evaluate(&net, target)?.accuracy;
    run_finetune(&fcfg, &mut net, x, |rec, net| {
        metrics.push(MetricRecord {
            run: cfg.name.clone(),
            seed,
            record: rec.clone(),
            accuracy: evaluate(net, target)?.accuracy,
        });
        Ok(())
    })?;
    let eval = evaluate(&net, target)?;
    Ok(SeedRun {
        result: SeedResult {
            seed,
            before_ft,
            accuracy: eval.accuracy,
            per_class_mean: eval.per_class_mean,
        },
        net,
        initial_bank,
        bank,
    })
}

/// Runs every configured seed and aggregates the report.
pub fn adapt(
    cfg: &ExperimentConfig,
    predictors: &[&dyn Predictor],
    target: &TargetDomain,
    metrics: &mut Vec<MetricRecord>,
) -> Result<(RunReport, Vec<SeedRun>)> {
    cfg.validate()?;
    let no_adapt = no_adapt_accuracy(cfg, predictors, target)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        runs.push(adapt_seed(cfg, predictors, target, seed, metrics)?);
    }
    let finals: Vec<f64> = runs.iter().map(|r| r.result.accuracy).collect();
    let befores: Vec<f64> = runs.iter().map(|r| r.result.before_ft).collect();
    let (mean, std) = mean_std(&finals);
    let (before_ft_mean, before_ft_std) = mean_std(&befores);
    let report = RunReport {
        name: cfg.name.clone(),
        no_adapt,
        seeds: runs.iter().map(|r| r.result.clone()).collect(),
        mean,
        std,
        before_ft_mean,
        before_ft_std,
    };
    Ok((report, runs))
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_at(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes features and labels as comma-separated text with a header.
pub fn export_domain(path: &Path, features: &dine_core::Tensor, labels: &[usize]) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..features.cols()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for (i, y) in labels.iter().enumerate() {
        for v in features.row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{y}\n"));
    }
    fs::write(path, out).map_err(io_at(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

pub fn source_checkpoint_path(dir: &Path, m: usize) -> PathBuf {
    dir.join(format!("source-{m}.ckpt.json"))
}

pub fn cache_path(dir: &Path, m: usize) -> PathBuf {
    dir.join(format!("cache-{m}.ndjson"))
}

/// Trains source models, saves checkpoints, metrics, a manifest and the
/// generated datasets. Returns held-out source accuracies.
pub fn cmd_train_source(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<f64>> {
    cfg.validate()?;
    create_dir(out)?;
    let scenario = generate(&cfg.scenario)?;
    let mut metrics = Vec::new();
    let models = train_sources(cfg, &scenario, &mut metrics)?;
    let mut paths = Vec::new();
    for (m, net) in models.nets.iter().enumerate() {
        let path = source_checkpoint_path(out, m);
        Checkpoint::new(SavedNet::Source(net.clone()), cfg.source.seed + m as u64).save(&path)?;
        paths.push(path);
    }
    write_metrics(&out.join("metrics.ndjson"), &metrics)?;
    let data = out.join("data");
    create_dir(&data)?;
    for (m, d) in scenario.sources.iter().enumerate() {
        export_domain(&data.join(format!("source-{m}.csv")), &d.features, &d.labels)?;
    }
    export_domain(&data.join("target.csv"), &scenario.target.features, scenario.target.labels.reveal())?;
    Manifest::new("train-source", PredictorSource::Checkpoints(paths), cfg.clone()).save(&out.join("manifest.toml"))?;
    Ok(models.test_accuracy)
}

/// Opens every predictor of `source`. Checkpoints are disclosed with `mode`.
pub fn open_predictors(source: &PredictorSource, mode: DisclosureMode, input_dim: usize) -> Result<Vec<Box<dyn Predictor>>> {
    let mut out: Vec<Box<dyn Predictor>> = Vec::new();
    match source {
        PredictorSource::Checkpoints(paths) => {
            for p in paths {
                let net = Checkpoint::load(p)?.into_source()?;
                out.push(Box::new(LocalPredictor::new(net, mode)?));
            }
        }
        PredictorSource::Caches(paths) => {
            for p in paths {
                out.push(Box::new(CachedPredictor::open(p, input_dim)?));
            }
        }
        PredictorSource::Endpoints(addrs) => {
            for a in addrs {
                out.push(Box::new(RemotePredictor::connect(a.as_str())?));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no source predictors given".into()));
    }
    Ok(out)
}

/// Queries each predictor once per target sample and writes one cache per predictor.
pub fn cmd_cache_predictions(cfg: &ExperimentConfig, source: &PredictorSource, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let scenario = generate(&cfg.scenario)?;
    let x = &scenario.target.features;
    let predictors = open_predictors(source, cfg.disclosure, x.cols())?;
    let mut paths = Vec::new();
    for (m, p) in predictors.iter().enumerate() {
        let path = cache_path(out, m);
        write_cache(&path, &format!("source-{m}"), p.as_ref(), x)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Full adaptation run; writes `manifest.toml`, `metrics.ndjson`,
/// `report.json` and one target checkpoint per seed.
pub fn cmd_adapt(manifest: &Manifest, out: &Path) -> Result<RunReport> {
    let cfg = &manifest.config;
    cfg.validate()?;
    create_dir(out)?;
    let scenario = generate(&cfg.scenario)?;
    let predictors = open_predictors(&manifest.predictors, cfg.disclosure, scenario.target.features.cols())?;
    let refs: Vec<&dyn Predictor> = predictors.iter().map(|p| p.as_ref()).collect();
    let mut metrics = Vec::new();
    let (report, runs) = adapt(cfg, &refs, &scenario.target, &mut metrics)?;
    for run in &runs {
        Checkpoint::new(SavedNet::Target(run.net.clone()), run.result.seed)
            .save(&out.join(format!("target-{}.ckpt.json", run.result.seed)))?;
    }
    write_metrics(&out.join("metrics.ndjson"), &metrics)?;
    let report_path = out.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(io_at(&report_path))?;
    Manifest { command: "adapt".into(), ..manifest.clone() }.save(&out.join("manifest.toml"))?;
    Ok(report)
}

/// Fine-tunes a distilled target checkpoint only. Returns `(before, after)` accuracy.
pub fn cmd_finetune_only(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<(f64, f64)> {
    create_dir(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    let seed = ck.seed;
    let mut net = ck.into_target()?;
    let scenario = generate(&cfg.scenario)?;
    let target = &scenario.target;
    let before = evaluate(&net, target)?.accuracy;
    let fcfg = dine_core::finetune::FinetuneConfig { seed, ..cfg.finetune.clone() };
    let mut metrics = Vec::new();
    run_finetune(&fcfg, &mut net, &target.features, |rec, net| {
        metrics.push(MetricRecord {
            run: cfg.name.clone(),
            seed,
            record: rec.clone(),
            accuracy: evaluate(net, target)?.accuracy,
        });
        Ok(())
    })?;
    let after = evaluate(&net, target)?.accuracy;
    write_metrics(&out.join("metrics.ndjson"), &metrics)?;
    Checkpoint::new(SavedNet::Target(net), seed).save(&out.join(format!("target-{seed}.ckpt.json")))?;
    Ok((before, after))
}

/// Serves a source checkpoint until the process ends.
pub fn cmd_serve(checkpoint: &Path, mode: DisclosureMode, addr: &str) -> Result<Server> {
    let net = Checkpoint::load(checkpoint)?.into_source()?;
    let predictor = Arc::new(LocalPredictor::new(net, mode)?);
    Server::spawn(addr, predictor, mode)
}

/// Loads `report.json` from each directory; missing or unreadable runs are
/// reported as absent.
pub fn collect_reports(dirs: &[PathBuf]) -> Vec<(PathBuf, Option<RunReport>)> {
    dirs.iter()
        .map(|d| {
            let rep = fs::read_to_string(d.join("report.json"))
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok());
            (d.clone(), rep)
        })
        .collect()
}

/// Comparison table: one row per run, accuracies as `mean±std` over seeds.
pub fn render_table(reports: &[(PathBuf, Option<RunReport>)]) -> String {
    let mut out = format!(
        "{:<24} {:>6} {:>10} {:>12} {:>12}\n",
        "run", "seeds", "no-adapt", "w/o FT", "final"
    );
    for (dir, rep) in reports {
        match rep {
            Some(r) => out.push_str(&format!(
                "{:<24} {:>6} {:>10.1} {:>12} {:>12}\n",
                r.name,
                r.seeds.len(),
                r.no_adapt,
                format!("{:.1}±{:.1}", r.before_ft_mean, r.before_ft_std),
                format!("{:.1}±{:.1}", r.mean, r.std),
            )),
            None => out.push_str(&format!("{:<24} absent\n", dir.display())),
        }
    }
    out
}

/// Loss and accuracy curves of every run as comma-separated text.
pub fn render_curves(dirs: &[PathBuf]) -> String {
    let mut out = String::from("run,seed,phase,epoch,loss,kd,mix,mi,entropy,accuracy\n");
    for d in dirs {
        let Ok(records) = read_metrics(&d.join("metrics.ndjson")) else { continue };
        for r in records {
            let e = &r.record;
            let phase = serde_json::to_value(e.phase).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.run, r.seed, phase, e.epoch, e.loss, e.kd, e.mix, e.mi, e.entropy, r.accuracy
            ));
        }
    }
    out
}

/// Prints the comparison table and, if asked, writes the curves.
pub fn cmd_report(dirs: &[PathBuf], curves: Option<&Path>, mut sink: impl Write) -> Result<()> {
    let reports = collect_reports(dirs);
    sink.write_all(render_table(&reports).as_bytes())?;
    if let Some(path) = curves {
        fs::write(path, render_curves(dirs)).map_err(io_at(path))?;
    }
    Ok(())
}
