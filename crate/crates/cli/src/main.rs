//! `hyperprune`: pretrain, prune, finetune and evaluate hyperprior codecs.
//!
//! Exit codes: 0 on success, 1 when the arguments, config or inputs are
//! invalid, 2 when a run fails after its inputs were accepted.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyperprune::checkpoint;
use hyperprune::config::Config;
use hyperprune::metrics::{compare_models, evaluate, ratio_report, reports_to_csv, RDReport};
use hyperprune::network::{Network, Scope};
use hyperprune::pipeline::{self, Dataset};
use hyperprune::verify::verify_all;

/// Largest merged-vs-unmerged relative error `merge-verify` accepts.
const MERGE_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "hyperprune", version, about = "Structured pruning of hyperprior image codecs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; defaults are used for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Rate-distortion training of a freshly initialised network.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Image directory (`train/` and `val/`, or a flat directory).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compactor-based structured pruning of the hyper path, then finetuning.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keeps the first `ratio` of channels in every prunable layer, then finetunes.
    ManualPrune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hyper-path finetuning with the main path frozen.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rate-distortion report on the validation images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for `report.csv`; the report is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Model name used in the report.
        #[arg(long, default_value = "model")]
        tag: String,
    },
    /// Randomised exactness checks of every compactor merge.
    MergeVerify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Comparison table of report CSVs; the first model is the baseline.
    Report {
        #[arg(required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a synthetic image dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        train: usize,
        #[arg(long, default_value_t = 8)]
        val: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 96)]
        val_size: usize,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(common: &Common) -> Outcome<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p).map_err(invalid)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> Outcome<Dataset<f64>> {
    if !dir.is_dir() {
        return Err(invalid(format!("data directory {} does not exist", dir.display())));
    }
    let ds = pipeline::load_dataset(dir).map_err(invalid)?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(invalid(format!("{} has no training or no validation images", dir.display())));
    }
    Ok(ds)
}

fn load_net(path: &Path, cfg: &Config) -> Outcome<Network<f64>> {
    checkpoint::load(path, cfg).map_err(invalid)
}

fn create_out(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(|e| invalid(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn save_report(net: &Network<f64>, ds: &Dataset<f64>, tag: &str, out: &Path) -> Outcome<RDReport> {
    let report = evaluate(net, &ds.val, tag).map_err(runtime)?;
    write(&out.join("report.csv"), report.to_csv())?;
    Ok(report)
}

fn summary(report: &RDReport, net: &Network<f64>) {
    let r = ratio_report(net, report);
    println!(
        "{}: psnr {:.4} dB, bpp {:.6} (z {:.6}), params {} (hyper {}), hyper param ratio {:.4}, z-rate ratio {:.4}",
        report.model,
        report.mean_psnr(),
        report.mean_bpp(),
        report.mean_bpp_z(),
        report.params_total,
        report.params_hyper,
        r.hyper_param_ratio,
        r.z_rate_ratio
    );
}

fn run(command: Command) -> Outcome<()> {
    match command {
        Command::Pretrain { common, data, out } => {
            let cfg = load_config(&common)?;
            let ds = load_data(&data)?;
            create_out(&out)?;
            let (patches, _) = pipeline::training_patches(&ds, &cfg).map_err(invalid)?;
            let mut log = String::from("step,rate_bpp,lambda_d\n");
            let (net, _) = pipeline::pretrain_model::<f64>(&cfg, &patches, |l| {
                log.push_str(&format!("{},{:.6},{:.6}\n", l.step, l.loss.rate, l.loss.distortion));
                eprintln!("step {:>6}  rate {:.4}  lambda*D {:.4}", l.step, l.loss.rate, l.loss.distortion);
            })
            .map_err(runtime)?;
            write(&out.join("train_log.csv"), log)?;
            checkpoint::save(&net, &out.join("model.hpck")).map_err(runtime)?;
            summary(&save_report(&net, &ds, "pretrained", &out)?, &net);
        }
        Command::Prune { common, checkpoint: ck, data, out } => {
            let cfg = load_config(&common)?;
            let mut net = load_net(&ck, &cfg)?;
            let ds = load_data(&data)?;
            create_out(&out)?;
            let (patches, monitor) = pipeline::training_patches(&ds, &cfg).map_err(invalid)?;
            let before = net.count_parameters(Scope::HyperPath);
            let (state, ft) = pipeline::prune_model(&mut net, &cfg, &patches, &monitor).map_err(runtime)?;
            write(&out.join("prune_history.csv"), state.history_csv())?;
            checkpoint::save(&net, &out.join("model.hpck")).map_err(runtime)?;
            let after = net.count_parameters(Scope::HyperPath);
            println!(
                "hyper path {before} -> {after} parameters ({:.2}% removed), finetune loss {:.6} -> {:.6} (best step {})",
                100.0 * (1.0 - after as f64 / before.max(1) as f64),
                ft.initial_loss,
                ft.best_loss,
                ft.best_step
            );
            summary(&save_report(&net, &ds, "erhp", &out)?, &net);
        }
        Command::ManualPrune { common, ratio, checkpoint: ck, data, out } => {
            let cfg = load_config(&common)?;
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(invalid(format!("--ratio {ratio} must lie in (0, 1]")));
            }
            let mut net = load_net(&ck, &cfg)?;
            let ds = load_data(&data)?;
            create_out(&out)?;
            let (patches, monitor) = pipeline::training_patches(&ds, &cfg).map_err(invalid)?;
            pipeline::manual_prune_model(&mut net, &cfg, ratio, &patches, &monitor).map_err(runtime)?;
            checkpoint::save(&net, &out.join("model.hpck")).map_err(runtime)?;
            summary(&save_report(&net, &ds, "manual", &out)?, &net);
        }
        Command::Finetune { common, checkpoint: ck, data, out } => {
            let cfg = load_config(&common)?;
            let mut net = load_net(&ck, &cfg)?;
            let ds = load_data(&data)?;
            create_out(&out)?;
            let (patches, monitor) = pipeline::training_patches(&ds, &cfg).map_err(invalid)?;
            pipeline::finetune_model(&mut net, &cfg, &patches, &monitor).map_err(runtime)?;
            checkpoint::save(&net, &out.join("model.hpck")).map_err(runtime)?;
            summary(&save_report(&net, &ds, "finetuned", &out)?, &net);
        }
        Command::Eval { common, checkpoint: ck, data, out, tag } => {
            let cfg = load_config(&common)?;
            let net = load_net(&ck, &cfg)?;
            let ds = load_data(&data)?;
            let report = evaluate(&net, &ds.val, &tag).map_err(runtime)?;
            print!("{}", report.to_csv());
            if let Some(out) = out {
                create_out(&out)?;
                write(&out.join("report.csv"), report.to_csv())?;
            }
            summary(&report, &net);
        }
        Command::MergeVerify { seed, trials } => {
            if trials == 0 {
                return Err(invalid("--trials must be positive"));
            }
            let mut ok = true;
            for s in verify_all::<f64>(trials, seed).map_err(runtime)? {
                let pass = s.max_rel_err <= MERGE_TOLERANCE;
                ok &= pass;
                println!("{:<28} trials {:>4}  max rel err {:.3e}  {}", s.kind.to_string(), s.trials, s.max_rel_err, if pass { "ok" } else { "FAIL" });
            }
            if !ok {
                return Err(runtime(format!("a merge exceeded the {MERGE_TOLERANCE:e} tolerance")));
            }
        }
        Command::Report { reports, out } => {
            let mut all = Vec::new();
            for p in &reports {
                let text = fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
                all.extend(RDReport::from_csv(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?);
            }
            let table = compare_models(&all).map_err(invalid)?;
            print!("{}", table.to_text());
            if let Some(out) = out {
                create_out(&out)?;
                write(&out.join("comparison.csv"), table.to_csv())?;
                write(&out.join("comparison.txt"), table.to_text())?;
                write(&out.join("reports.csv"), reports_to_csv(&all))?;
            }
        }
        Command::Synth { out, seed, train, val, size, val_size } => {
            if train == 0 || val == 0 || size < 8 || val_size < 8 {
                return Err(invalid("need at least one image per split and sizes of at least 8"));
            }
            pipeline::write_synthetic_split(&out, train, val, size, val_size, seed).map_err(runtime)?;
            println!("wrote {train} training and {val} validation images to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
