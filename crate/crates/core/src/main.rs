use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::error;

use vfu_core::harness::{read_config_pairs, run_experiment, ExperimentConfig, Mode};
use vfu_core::Error;

/// Vertical federated learning simulator with communication-free unlearning.
///
/// Settings come from defaults, then `--config`, then `--set`, then the
/// named flags below.
#[derive(Debug, Parser)]
#[command(name = "vfu", version)]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// train, unlearn-party, unlearn-feature, unlearn-sample, retrain, audit,
    /// ablation or compare.
    #[arg(long)]
    mode: Option<String>,
    /// `synthetic` or a CSV path.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    label_col: Option<String>,
    #[arg(long)]
    parties: Option<String>,
    /// Groups of global column indices, e.g. `0,1,2;3,4;5`.
    #[arg(long)]
    feature_split: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    unlearn_at: Option<String>,
    /// Party letter (A, B, ...) or index.
    #[arg(long)]
    target_party: Option<String>,
    #[arg(long)]
    target_features: Option<String>,
    #[arg(long)]
    target_batches: Option<String>,
    #[arg(long)]
    lr_active: Option<String>,
    #[arg(long)]
    lr_passive: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    u_ep: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// sgd or newton.
    #[arg(long)]
    update_rule: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
    /// f1 or auc, for ablation.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    method_csv: Option<String>,
    #[arg(long)]
    benchmark_csv: Option<String>,
    #[arg(long)]
    store_path: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Any other setting as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Cli {
    fn flag_pairs(&self) -> Vec<(String, String)> {
        let named = [
            ("mode", &self.mode),
            ("dataset", &self.dataset),
            ("label_col", &self.label_col),
            ("parties", &self.parties),
            ("feature_split", &self.feature_split),
            ("epochs", &self.epochs),
            ("unlearn_at", &self.unlearn_at),
            ("target_party", &self.target_party),
            ("target_features", &self.target_features),
            ("target_batches", &self.target_batches),
            ("lr_active", &self.lr_active),
            ("lr_passive", &self.lr_passive),
            ("alpha", &self.alpha),
            ("lambda", &self.lambda),
            ("u_ep", &self.u_ep),
            ("batch_size", &self.batch_size),
            ("seed", &self.seed),
            ("update_rule", &self.update_rule),
            ("repeats", &self.repeats),
            ("metric", &self.metric),
            ("method_csv", &self.method_csv),
            ("benchmark_csv", &self.benchmark_csv),
            ("store_path", &self.store_path),
            ("out", &self.out),
        ];
        named
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

fn config_from(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut pairs = match &cli.config {
        Some(path) => read_config_pairs(path)?,
        None => Vec::new(),
    };
    for item in &cli.set {
        let (k, v) = item.split_once('=').ok_or_else(|| Error::Config {
            field: "set".into(),
            message: format!("expected KEY=VALUE, got {item:?}"),
        })?;
        pairs.push((k.to_string(), v.to_string()));
    }
    pairs.extend(cli.flag_pairs());
    ExperimentConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let cfg = match config_from(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(1);
        }
    };
    let runs = match run_experiment(&cfg) {
        Ok(runs) => runs,
        Err(e @ Error::Config { .. }) => {
            error!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            error!("{e}");
            return ExitCode::from(2);
        }
    };
    let mut failed = false;
    for run in &runs {
        let s = &run.summary;
        if let Some(t) = &s.terminal {
            println!(
                "seed {}: test loss {:.4} f1 {:.4} auc {:.4}",
                run.seed, t.loss, t.f1, t.auc
            );
        }
        if let Some(b) = &s.benchmark_terminal {
            println!(
                "seed {}: benchmark loss {:.4} f1 {:.4} auc {:.4}",
                run.seed, b.loss, b.f1, b.auc
            );
        }
        if let Some(u) = &s.unlearning {
            println!(
                "seed {}: unlearned {} with {} ({} epochs, {:.1} ms, {} messages)",
                run.seed,
                u.request,
                u.engine,
                u.unlearn_epochs,
                u.wall_time_ms,
                u.messages_during_unlearn
            );
        }
        if let Some(m) = &s.mia {
            println!(
                "seed {}: attack holdout {:.3}, present before {:.3}, after {:.3}",
                run.seed, m.holdout_accuracy, m.present_before, m.present_after
            );
        }
        if let Some(c) = &s.comparison {
            for g in &c.metrics {
                println!(
                    "seed {}: {} method {:.4} benchmark {:.4} gap {:.4} -> {}",
                    run.seed,
                    g.metric,
                    g.method,
                    g.benchmark,
                    g.gap,
                    if g.pass { "pass" } else { "fail" }
                );
            }
            failed |= cfg.mode == Mode::Compare && !c.within_tolerance;
        }
        println!("seed {}: artefacts in {}", run.seed, run.dir.display());
    }
    if failed {
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}
