//! Runs one configured experiment and writes its artefacts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use super::config::{DatasetSource, ExperimentConfig, Mode, BENCHMARK_SEED_OFFSET};
use crate::audit::{feature_ablation, AblationScore, MiaAudit, MiaConfig};
use crate::data::{generate_synthetic, load_csv, make_batch_plan, Dataset, SampleId, VerticalSplit};
use crate::metrics::{read_metrics_csv, write_atomic, write_metrics_csv, MetricsRecord, Phase};
use crate::nn::DenseMatrix;
use crate::runtime::{Exclusion, Federation, PartyId, VflSession};
use crate::unlearn::{
    exclusion_for, resolve_samples, RequestKind, SampleTarget, UnlearnRequest, UnlearningReport,
};
use crate::{Error, Result};

/// Share of test rows that train the attack model; the rest are probes.
pub const MIA_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Serialize)]
pub struct Scores {
    pub loss: f64,
    pub f1: f64,
    pub auc: f64,
}

impl From<&MetricsRecord> for Scores {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            loss: r.test_loss,
            f1: r.f1,
            auc: r.auc,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UnlearnSummary {
    pub engine: String,
    pub request: String,
    pub unlearn_epochs: usize,
    pub terminal_kl: f64,
    pub target_loss_before: Option<f64>,
    pub target_losses: Vec<f64>,
    pub messages_during_unlearn: u64,
    pub wall_time_ms: f64,
}

impl UnlearnSummary {
    fn new(report: &UnlearningReport, request: &UnlearnRequest) -> Self {
        Self {
            engine: report.engine.to_string(),
            request: describe(request),
            unlearn_epochs: report.epochs.len(),
            terminal_kl: report.terminal_kl,
            target_loss_before: report.target_loss_before,
            target_losses: report.epochs.iter().filter_map(|e| e.target_loss).collect(),
            messages_during_unlearn: report.messages_during_unlearn,
            wall_time_ms: report.wall_time.as_secs_f64() * 1e3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MiaSummary {
    pub holdout_accuracy: f64,
    pub present_before: f64,
    pub present_after: f64,
    pub shuffled_label_accuracy: f64,
}

/// One compared quantity.
#[derive(Debug, Clone, Serialize)]
pub struct MetricGap {
    pub metric: String,
    pub method: f64,
    pub benchmark: f64,
    pub gap: f64,
    pub pass: bool,
}

/// Method run against its benchmark: terminal F1 and AUC, and mean test loss
/// over post-unlearning epochs when both runs have them.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub tolerance: f64,
    pub metrics: Vec<MetricGap>,
    pub within_tolerance: bool,
}

impl Comparison {
    pub fn gap(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == metric).map(|m| m.gap)
    }
}

fn mean_post_unlearn_loss(records: &[MetricsRecord], after: usize) -> Option<f64> {
    let losses: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch > after)
        .map(|r| r.test_loss)
        .collect();
    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Compares two runs over the same epochs. Each metric passes iff its
/// absolute gap is at most `tolerance`.
pub fn compare_runs(
    method: &[MetricsRecord],
    benchmark: &[MetricsRecord],
    tolerance: f64,
) -> Result<Comparison> {
    let epochs = |r: &[MetricsRecord]| r.iter().map(|x| x.epoch).collect::<Vec<_>>();
    let (m, b) = match (method.last(), benchmark.last()) {
        (Some(m), Some(b)) => (m, b),
        _ => return Err(Error::Comparison("a run has no records".into())),
    };
    if epochs(method) != epochs(benchmark) {
        return Err(Error::Comparison(format!(
            "runs cover different epochs: method ends at {}, benchmark at {}",
            m.epoch, b.epoch
        )));
    }
    if let Some(missing) = epochs(method)
        .iter()
        .enumerate()
        .find(|&(i, &e)| e != i + 1)
    {
        return Err(Error::Comparison(format!("epoch {} is missing", missing.0 + 1)));
    }
    let gap = |metric: &str, method: f64, benchmark: f64| {
        let gap = (method - benchmark).abs();
        MetricGap {
            metric: metric.to_string(),
            method,
            benchmark,
            gap,
            pass: gap <= tolerance,
        }
    };
    let mut metrics = vec![gap("f1", m.f1, b.f1), gap("auc", m.auc, b.auc)];
    let unlearn_epoch = method
        .iter()
        .find(|r| r.phase == Phase::Unlearn)
        .map(|r| r.epoch);
    if let Some(u) = unlearn_epoch {
        if let (Some(lm), Some(lb)) = (
            mean_post_unlearn_loss(method, u),
            mean_post_unlearn_loss(benchmark, u),
        ) {
            metrics.push(gap("post_unlearn_loss", lm, lb));
        }
    }
    Ok(Comparison {
        tolerance,
        within_tolerance: metrics.iter().all(|g| g.pass),
        metrics,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationEntry {
    pub feature: usize,
    pub party: String,
    pub importance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub terminal: Option<Scores>,
    pub benchmark_terminal: Option<Scores>,
    pub unlearning: Option<UnlearnSummary>,
    pub mia: Option<MiaSummary>,
    pub comparison: Option<Comparison>,
    pub ablation: Option<Vec<AblationEntry>>,
    pub training_messages: u64,
    pub store_records: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub dir: PathBuf,
    pub method: Vec<MetricsRecord>,
    pub benchmark: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

fn describe(request: &UnlearnRequest) -> String {
    match &request.kind {
        RequestKind::Party(p) => format!("party {p}"),
        RequestKind::Features { party, features } => {
            let list: Vec<String> = features.iter().map(|f| f.to_string()).collect();
            format!("features {} of party {party}", list.join(","))
        }
        RequestKind::Samples(SampleTarget::Batches(b)) => {
            let list: Vec<String> = b.iter().map(|f| f.to_string()).collect();
            format!("batches {}", list.join(","))
        }
        RequestKind::Samples(SampleTarget::Ids(ids)) => format!("{} samples", ids.len()),
    }
}

pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic { n, d, classes } => generate_synthetic(*n, *d, *classes, seed),
        DatasetSource::Csv(path) => {
            let label = cfg
                .label_col
                .as_deref()
                .ok_or_else(|| Error::config("label_col", "required for CSV datasets"))?;
            load_csv(path, Some(label))
        }
    }
}

/// Builds the request for the configured mode. `audit` and `retrain` pick
/// the kind from whichever target is set: batches, then features, then party.
pub fn build_request(cfg: &ExperimentConfig, split: &VerticalSplit) -> Result<UnlearnRequest> {
    let kind = match cfg.mode {
        Mode::UnlearnParty => RequestKind::Party(party_target(cfg)?),
        Mode::UnlearnFeature => feature_request(cfg, split)?,
        Mode::UnlearnSample => RequestKind::Samples(SampleTarget::Batches(cfg.target_batches.clone())),
        Mode::Audit | Mode::Retrain => {
            if !cfg.target_batches.is_empty() {
                RequestKind::Samples(SampleTarget::Batches(cfg.target_batches.clone()))
            } else if !cfg.target_features.is_empty() {
                feature_request(cfg, split)?
            } else {
                RequestKind::Party(party_target(cfg)?)
            }
        }
        other => {
            return Err(Error::config("mode", format!("{other} does not unlearn anything")))
        }
    };
    Ok(UnlearnRequest {
        kind,
        issued_at_epoch: cfg.unlearn_at,
    })
}

fn party_target(cfg: &ExperimentConfig) -> Result<PartyId> {
    cfg.target_party
        .ok_or_else(|| Error::config("target_party", "no target party given"))
}

fn feature_request(cfg: &ExperimentConfig, split: &VerticalSplit) -> Result<RequestKind> {
    let features = cfg.target_feature_set();
    let owners: BTreeSet<Option<usize>> = features.iter().map(|&f| split.owner_of(f)).collect();
    let owner = match owners.into_iter().collect::<Vec<_>>().as_slice() {
        [Some(k)] => PartyId(*k as u32),
        [None] => return Err(Error::config("target_features", "feature index out of range")),
        _ => {
            return Err(Error::config(
                "target_features",
                "features must belong to a single party",
            ))
        }
    };
    if let Some(p) = cfg.target_party {
        if p != owner {
            return Err(Error::config(
                "target_party",
                format!("the target features belong to party {owner}, not {p}"),
            ));
        }
    }
    Ok(RequestKind::Features {
        party: owner,
        features,
    })
}

fn current_logits(session: &VflSession) -> Result<DenseMatrix> {
    let probe = session
        .last_probe()
        .ok_or_else(|| Error::State("no evaluation has run yet".into()))?;
    session.federation.active.model.predict(&probe.concat)
}

/// A session stepped epoch by epoch, keeping test logits per epoch.
struct Tracked {
    session: VflSession,
    logits: Vec<DenseMatrix>,
}

impl Tracked {
    fn new(session: VflSession) -> Self {
        Self {
            session,
            logits: Vec::new(),
        }
    }

    fn train_until(&mut self, last_epoch: usize, phase: Phase) -> Result<()> {
        while self.session.epoch() < last_epoch {
            self.session.run_epoch(phase)?;
            self.logits.push(current_logits(&self.session)?);
        }
        Ok(())
    }
}

/// Resolves batch indices of epoch `epoch` to sample ids from the batch plan
/// alone, without training. Matches the store lookup of a run that has not
/// excluded any samples yet.
pub fn samples_of_batches(
    federation: &Federation,
    batch_size: usize,
    epoch: usize,
    seed: u64,
    batches: &[u32],
) -> Result<BTreeSet<SampleId>> {
    let ids = federation.active.train_ids();
    let plan = make_batch_plan(ids.len(), batch_size, epoch, seed)?;
    let mut out = BTreeSet::new();
    for &b in batches {
        let rows = plan
            .batches
            .get(b as usize)
            .ok_or_else(|| Error::Request(format!("epoch {epoch} has no batch {b}")))?;
        out.extend(rows.iter().map(|&r| ids[r]));
    }
    Ok(out)
}

fn fill_mia(records: &mut [MetricsRecord], logits: &[DenseMatrix], audit: &MiaAudit, from: usize) -> Result<()> {
    for (r, l) in records.iter_mut().zip(logits) {
        if r.epoch >= from {
            r.mia_accuracy = Some(audit.present_accuracy(l)?);
        }
    }
    Ok(())
}

/// Runs one seed of the configured experiment and writes its files to `dir`.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(dir)?;
    if cfg.mode == Mode::Compare {
        return run_compare(cfg, seed, dir);
    }
    let dataset = load_dataset(cfg, seed)?;
    let split = cfg.split(dataset.num_features())?;
    let vfl = cfg.vfl_config(seed);
    let bench_cfg = cfg.vfl_config(seed.wrapping_add(BENCHMARK_SEED_OFFSET));
    let mut summary = RunSummary {
        mode: cfg.mode.to_string(),
        seed,
        epochs: cfg.epochs,
        terminal: None,
        benchmark_terminal: None,
        unlearning: None,
        mia: None,
        comparison: None,
        ablation: None,
        training_messages: 0,
        store_records: 0,
    };
    let mut method = Vec::new();
    let mut benchmark = Vec::new();

    match cfg.mode {
        Mode::Train | Mode::Ablation => {
            let federation = Federation::build(&dataset, &split, &vfl, &Exclusion::none())?;
            let mut run = Tracked::new(VflSession::new(federation, vfl.clone())?);
            run.train_until(cfg.epochs, Phase::Train)?;
            if cfg.mode == Mode::Ablation {
                let scores = feature_ablation(&run.session.federation, cfg.ablation_metric)?;
                write_ablation_csv(&dir.join("ablation.csv"), &scores)?;
                summary.ablation = Some(
                    scores
                        .scores
                        .iter()
                        .map(|&(feature, p, importance)| AblationEntry {
                            feature,
                            party: p.to_string(),
                            importance,
                        })
                        .collect(),
                );
            }
            method = run.session.history().to_vec();
            finish_method(cfg, dir, &run.session, &mut summary)?;
        }
        Mode::Retrain => {
            let request = build_request(cfg, &split)?;
            let samples = match &request.kind {
                RequestKind::Samples(SampleTarget::Batches(b)) => {
                    let full = Federation::build(&dataset, &split, &vfl, &Exclusion::none())?;
                    samples_of_batches(&full, cfg.batch_size, cfg.unlearn_at, seed, b)?
                }
                _ => BTreeSet::new(),
            };
            let exclusion = exclusion_for(&request, &samples);
            let federation = Federation::build(&dataset, &split, &bench_cfg, &exclusion)?;
            let mut run = Tracked::new(VflSession::new(federation, bench_cfg)?);
            run.train_until(cfg.epochs, Phase::Train)?;
            benchmark = run.session.history().to_vec();
            write_metrics_csv(dir.join("benchmark.csv"), &benchmark)?;
            summary.benchmark_terminal = benchmark.last().map(Scores::from);
        }
        Mode::UnlearnParty | Mode::UnlearnFeature | Mode::UnlearnSample | Mode::Audit => {
            let request = build_request(cfg, &split)?;
            let federation = Federation::build(&dataset, &split, &vfl, &Exclusion::none())?;
            let mut run = Tracked::new(VflSession::new(federation, vfl.clone())?);
            run.train_until(cfg.unlearn_at, Phase::Train)?;
            let present = run.logits.last().expect("at least one epoch").clone();

            let samples = match &request.kind {
                RequestKind::Samples(target) => resolve_samples(&run.session.store, target)?,
                _ => BTreeSet::new(),
            };
            let params = cfg.unlearn_params(seed);
            let report = run.session.unlearn(&request, &params)?;
            info!(
                "unlearned {} with {} in {:?}, {} messages",
                describe(&request),
                report.engine,
                report.wall_time,
                report.messages_during_unlearn
            );
            let eval = run.session.evaluate()?;
            let after = current_logits(&run.session)?;
            {
                let history = run.session.history_mut();
                let rec = history.last_mut().expect("unlearning epoch recorded");
                rec.phase = Phase::Unlearn;
                rec.test_loss = eval.loss;
                rec.f1 = eval.f1;
                rec.auc = eval.auc;
            }
            *run.logits.last_mut().expect("at least one epoch") = after.clone();
            run.train_until(cfg.epochs, Phase::PostUnlearn)?;
            summary.unlearning = Some(UnlearnSummary::new(&report, &request));

            let exclusion = exclusion_for(&request, &samples);
            let federation = Federation::build(&dataset, &split, &bench_cfg, &exclusion)?;
            let mut bench = Tracked::new(VflSession::new(federation, bench_cfg)?);
            bench.train_until(cfg.epochs, Phase::Train)?;
            let absent = &bench.logits[cfg.unlearn_at - 1];

            let mia_cfg = MiaConfig {
                hidden: cfg.mia_hidden,
                epochs: cfg.mia_epochs,
                seed,
                ..MiaConfig::default()
            };
            let audit = MiaAudit::fit(&present, absent, MIA_TRAIN_FRACTION, &mia_cfg)?;
            summary.mia = Some(MiaSummary {
                holdout_accuracy: audit.holdout_accuracy,
                present_before: audit.present_accuracy(&present)?,
                present_after: audit.present_accuracy(&after)?,
                shuffled_label_accuracy: audit.shuffled_label_accuracy(&present, absent, seed)?,
            });

            method = run.session.history().to_vec();
            benchmark = bench.session.history().to_vec();
            fill_mia(&mut method, &run.logits, &audit, cfg.mia_from_epoch)?;
            fill_mia(&mut benchmark, &bench.logits, &audit, cfg.mia_from_epoch)?;
            *run.session.history_mut() = method.clone();
            write_metrics_csv(dir.join("benchmark.csv"), &benchmark)?;
            summary.benchmark_terminal = benchmark.last().map(Scores::from);
            summary.comparison = Some(compare_runs(&method, &benchmark, cfg.tolerance)?);
            finish_method(cfg, dir, &run.session, &mut summary)?;
        }
        Mode::Compare => unreachable!("handled above"),
    }

    write_summary(dir, &summary)?;
    Ok(RunOutput {
        seed,
        dir: dir.to_path_buf(),
        method,
        benchmark,
        summary,
    })
}

fn finish_method(
    cfg: &ExperimentConfig,
    dir: &Path,
    session: &VflSession,
    summary: &mut RunSummary,
) -> Result<()> {
    write_metrics_csv(dir.join("metrics.csv"), session.history())?;
    let store_path = cfg
        .store_path
        .clone()
        .unwrap_or_else(|| dir.join("store.bin"));
    session.store.save(&store_path)?;
    summary.terminal = session.history().last().map(Scores::from);
    summary.training_messages = session.bus.tally().total();
    summary.store_records = session.store.len();
    Ok(())
}

fn run_compare(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunOutput> {
    let method_path = cfg.method_csv.as_ref().expect("validated");
    let bench_path = cfg.benchmark_csv.as_ref().expect("validated");
    let method = read_metrics_csv(method_path)?;
    let benchmark = read_metrics_csv(bench_path)?;
    let comparison = compare_runs(&method, &benchmark, cfg.tolerance)?;
    let summary = RunSummary {
        mode: cfg.mode.to_string(),
        seed,
        epochs: method.len(),
        terminal: method.last().map(Scores::from),
        benchmark_terminal: benchmark.last().map(Scores::from),
        unlearning: None,
        mia: None,
        comparison: Some(comparison),
        ablation: None,
        training_messages: 0,
        store_records: 0,
    };
    write_summary(dir, &summary)?;
    Ok(RunOutput {
        seed,
        dir: dir.to_path_buf(),
        method,
        benchmark,
        summary,
    })
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Validation(format!("cannot serialise summary: {e}")))?;
    write_atomic(&dir.join("summary.json"), format!("{json}\n").as_bytes())
}

fn write_ablation_csv(path: &Path, scores: &AblationScore) -> Result<()> {
    let mut text = format!("feature,party,{}_importance\n", scores.metric);
    for (f, p, s) in &scores.scores {
        text.push_str(&format!("{f},{p},{s}\n"));
    }
    write_atomic(path, text.as_bytes())
}

/// Per-epoch mean and sample standard deviation across seeds.
pub fn aggregate_runs(runs: &[Vec<MetricsRecord>]) -> Result<String> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Comparison("no runs to aggregate".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Comparison("runs have different lengths".into()));
    }
    let mut text = String::from(
        "epoch,phase,train_loss_mean,train_loss_std,test_loss_mean,test_loss_std,\
         f1_mean,f1_std,auc_mean,auc_std,mia_accuracy_mean,mia_accuracy_std\n",
    );
    for (i, rec) in first.iter().enumerate() {
        let column = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Vec<f64> {
            runs.iter().filter_map(|r| f(&r[i])).collect()
        };
        let mut fields = vec![rec.epoch.to_string(), rec.phase.to_string()];
        let cols: [Vec<f64>; 5] = [
            column(&|r| Some(r.train_loss)),
            column(&|r| Some(r.test_loss)),
            column(&|r| Some(r.f1)),
            column(&|r| Some(r.auc)),
            column(&|r| r.mia_accuracy),
        ];
        for values in &cols {
            match mean_std(values) {
                Some((m, s)) => {
                    fields.push(m.to_string());
                    fields.push(s.to_string());
                }
                None => fields.extend([String::new(), String::new()]),
            }
        }
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    Ok(text)
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

/// Runs every repeat. One repeat writes straight into the output directory;
/// several write `seed-<s>/` subdirectories plus summary CSVs across seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    if cfg.repeats == 1 {
        return Ok(vec![run_single(cfg, cfg.seed, out)?]);
    }
    let mut runs = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats as u64 {
        let seed = cfg.seed + r;
        info!("repeat {} of {} (seed {seed})", r + 1, cfg.repeats);
        let mut single = cfg.clone();
        single.store_path = None;
        runs.push(run_single(&single, seed, &out.join(format!("seed-{seed}")))?);
    }
    if cfg.mode != Mode::Compare {
        let method: Vec<Vec<MetricsRecord>> = runs.iter().map(|r| r.method.clone()).collect();
        if method.iter().all(|m| !m.is_empty()) {
            write_atomic(&out.join("metrics_summary.csv"), aggregate_runs(&method)?.as_bytes())?;
        }
        let bench: Vec<Vec<MetricsRecord>> = runs.iter().map(|r| r.benchmark.clone()).collect();
        if bench.iter().all(|b| !b.is_empty()) {
            write_atomic(&out.join("benchmark_summary.csv"), aggregate_runs(&bench)?.as_bytes())?;
        }
    }
    Ok(runs)
}
