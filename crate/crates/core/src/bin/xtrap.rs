//! Command-line front end: data generation, pretraining, augmentation,
//! training, evaluation, verification and curve export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use xtrap::bridge::{pretrain_bridge_generator, BridgeConfig, BridgeGenerator};
use xtrap::dataset::{read_dataset, write_dataset, ShiftDomain, Split};
use xtrap::extract::{pretrain_extractor, Extractor, ExtractorConfig, ExtractorKind};
use xtrap::harness::{
    emit_curves, evaluate, load_model, read_report, save_model, train, verify, write_report, Method, RunConfig, Suite,
    VerifyOptions,
};
use xtrap::nn::GnnKind;
use xtrap::splice::{run_gsplice, BridgeMode, SpliceConfig, SpliceModels, SpliceOptions};
use xtrap::synth::{generate, GenConfig, GenTask};

#[derive(Parser)]
#[command(name = "xtrap", version, about = "Graph OOD augmentation by structural and feature extrapolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark bundle.
    Gen(GenArgs),
    /// Pretrain an extractor or the bridge generator.
    #[command(subcommand)]
    Pretrain(Pretrain),
    /// Append spliced training samples to a bundle.
    Augment(AugmentArgs),
    /// Train a classifier and write report.json, curves.csv and ckpt.bin.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Run oracle suites; exits nonzero if any fails.
    Verify(VerifyArgs),
    /// Write curves.csv from a report.json.
    Curves(CurvesArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: GenTask,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-split counts: train,id_val,id_test,ood_val,ood_test.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Pretrain {
    /// Causal or environmental subgraph extractor.
    Extractor(ExtractorArgs),
    /// Conditional VAE bridge generator.
    Bridge(BridgeArgs),
}

#[derive(Args)]
struct ExtractorArgs {
    #[arg(long)]
    kind: ExtractorKind,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BridgeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Causal extractor used to cut graphs when the bundle has no meta.
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    data: PathBuf,
    /// Bit string over options 1..3 (e.g. 101) or a list such as 1,3.
    #[arg(long)]
    options: String,
    #[arg(long, default_value_t = 2)]
    f: usize,
    #[arg(long, default_value_t = 1.0)]
    pct: f64,
    #[arg(long, default_value = "vae")]
    bridge: BridgeMode,
    #[arg(long)]
    domain: Option<ShiftDomain>,
    /// Causal extractor checkpoint (default: <data>/causal.bin).
    #[arg(long)]
    causal: Option<PathBuf>,
    /// Environmental extractor checkpoint (default: <data>/env.bin).
    #[arg(long)]
    env: Option<PathBuf>,
    /// Bridge generator checkpoint (default: <data>/bridge.bin).
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "erm")]
    method: Method,
    #[arg(long)]
    backbone: Option<GnnKind>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Variance penalty weight (gsplice-r).
    #[arg(long)]
    gamma: Option<f64>,
    /// FeatX gamma shape.
    #[arg(long)]
    gamma_a: Option<f64>,
    /// FeatX gamma scale.
    #[arg(long)]
    gamma_b: Option<f64>,
    /// FeatX replaced fraction per epoch.
    #[arg(long)]
    featx_pct: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ood_test")]
    split: String,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite name or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the machine-readable report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|k| k.as_str() == s)
        .with_context(|| format!("unknown split {s}"))
}

fn checkpoint(flag: Option<PathBuf>, data: &Path, name: &str) -> PathBuf {
    flag.unwrap_or_else(|| data.join(name))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => {
            let mut cfg = GenConfig::new(a.task, a.seed);
            if let Some(n) = a.n {
                cfg.counts = n
                    .try_into()
                    .map_err(|n: Vec<usize>| anyhow::anyhow!("--n needs 5 counts, got {}", n.len()))?;
            }
            let bundle = generate(&cfg)?;
            let path = write_dataset(&bundle, &a.out)?;
            println!("wrote {} samples to {}", bundle.samples.len(), path.display());
        }
        Command::Pretrain(Pretrain::Extractor(a)) => {
            let bundle = read_dataset(&a.data)?;
            let mut cfg = ExtractorConfig::new(a.kind, a.seed);
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            cfg.rho = a.rho.unwrap_or(cfg.rho);
            let run = pretrain_extractor(&bundle, &cfg)?;
            run.extractor.save(&a.out)?;
            let last = run.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!("trained {:?} extractor, final loss {last:.4}, saved {}", a.kind, a.out.display());
        }
        Command::Pretrain(Pretrain::Bridge(a)) => {
            let bundle = read_dataset(&a.data)?;
            let extractor = a.extractor.as_deref().map(Extractor::load).transpose()?;
            let mut cfg = BridgeConfig::new(a.seed);
            cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
            cfg.beta = a.beta.unwrap_or(cfg.beta);
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            let run = pretrain_bridge_generator(&bundle, extractor.as_ref(), &cfg)?;
            run.generator.save(&a.out)?;
            let first = run.epoch_losses.first().copied().unwrap_or(f64::NAN);
            let last = run.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!("trained bridge generator, loss {first:.4} -> {last:.4}, saved {}", a.out.display());
        }
        Command::Augment(a) => {
            let bundle = read_dataset(&a.data)?;
            let mut cfg = SpliceConfig::new(SpliceOptions::parse(&a.options)?);
            cfg.f = a.f;
            cfg.pct = a.pct;
            cfg.bridge_mode = a.bridge;
            cfg.shift_domain = a.domain;
            let opts = cfg.options;
            let load_extractor = |p: PathBuf| Extractor::load(&p).with_context(|| format!("loading {}", p.display()));
            let causal = (opts.causal || opts.causal_env)
                .then(|| load_extractor(checkpoint(a.causal.clone(), &a.data, "causal.bin")))
                .transpose()?;
            let env = opts
                .causal_env
                .then(|| load_extractor(checkpoint(a.env.clone(), &a.data, "env.bin")))
                .transpose()?;
            let generator_path = checkpoint(a.generator.clone(), &a.data, "bridge.bin");
            let generator = if (opts.causal_env || opts.whole) && (a.bridge == BridgeMode::Vae || generator_path.exists()) {
                Some(
                    BridgeGenerator::load(&generator_path)
                        .with_context(|| format!("loading {}", generator_path.display()))?,
                )
            } else {
                None
            };
            let models = SpliceModels {
                causal: causal.as_ref(),
                env: env.as_ref(),
                bridge: generator.as_ref(),
            };
            let out = run_gsplice(&bundle, &cfg, models, a.seed)?;
            let added = out.samples.len() - bundle.samples.len();
            let path = write_dataset(&out, &a.out)?;
            println!("added {added} samples, wrote {}", path.display());
        }
        Command::Train(a) => {
            let bundle = read_dataset(&a.data)?;
            let mut cfg = RunConfig::new(a.method, a.seed);
            cfg.kind = a.backbone.or(cfg.kind);
            cfg.num_layers = a.layers.unwrap_or(cfg.num_layers);
            cfg.hidden_dim = a.hidden.unwrap_or(cfg.hidden_dim);
            cfg.dropout = a.dropout.unwrap_or(cfg.dropout);
            cfg.lr = a.lr.unwrap_or(cfg.lr);
            cfg.weight_decay = a.weight_decay.unwrap_or(cfg.weight_decay);
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
            cfg.gamma = a.gamma.unwrap_or(cfg.gamma);
            cfg.featx.a = a.gamma_a.unwrap_or(cfg.featx.a);
            cfg.featx.b = a.gamma_b.unwrap_or(cfg.featx.b);
            cfg.featx.pct = a.featx_pct.unwrap_or(cfg.featx.pct);
            let outcome = train(&bundle, &cfg)?;
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            write_report(&outcome.report, &a.out.join("report.json"))?;
            emit_curves(&outcome.report, &a.out.join("curves.csv"))?;
            save_model(&outcome.model, outcome.featx.as_ref().map(|f| f.mask.as_slice()), &a.out.join("ckpt.bin"))?;
            let r = &outcome.report;
            println!(
                "OOD_OOD {:.4} (epoch {}), ID_ID {:.4} (epoch {}); wrote {}",
                r.ood_ood,
                r.selected_epoch,
                r.id_id,
                r.id_id_epoch,
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let bundle = read_dataset(&a.data)?;
            let (model, _) = load_model(&a.ckpt)?;
            let acc = evaluate(&model, &bundle, parse_split(&a.split)?)?;
            println!("{acc:.6}");
        }
        Command::Verify(a) => {
            let suites = if a.suite == "all" {
                Suite::ALL.to_vec()
            } else {
                vec![a.suite.parse()?]
            };
            let opts = VerifyOptions {
                seed: a.seed,
                ..VerifyOptions::default()
            };
            let mut reports = Vec::new();
            for suite in suites {
                let report = verify(suite, &opts);
                println!("{} {}", if report.passed { "PASS" } else { "FAIL" }, suite.name());
                for c in &report.checks {
                    println!("  {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
                }
                reports.push(report);
            }
            if let Some(out) = a.out {
                let text = serde_json::to_string_pretty(&reports)?;
                std::fs::write(&out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
            }
            return Ok(reports.iter().all(|r| r.passed));
        }
        Command::Curves(a) => {
            let report = read_report(&a.report)?;
            emit_curves(&report, &a.out)?;
            println!("wrote {} rows to {}", report.rows.len(), a.out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
