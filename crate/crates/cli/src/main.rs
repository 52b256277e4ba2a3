//! Command-line front end: data generation, both training stages, pseudo
//! labeling, evaluation, ablation plans and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memreg::config::{load_config, render_config};
use memreg::data::{export_dataset, Domain, DomainSpec, CLASS_NAMES};
use memreg::experiment::{ablate, emit_report, render_text, ExperimentPlan, ReportTable};
use memreg::models::ModelCheckpoint;
use memreg::pipeline::{
    evaluate, generate_pseudo_labels, split, train_stage1, train_stage2, PseudoDataset, RunMetrics, TrainConfig,
};
use memreg::rng::derive_seed;
use memreg::Error;

#[derive(Parser)]
#[command(name = "memreg", version, about = "Two-stage scene adaptation with memory regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key=value training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig, Error> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a dataset container of one domain.
    GenData {
        #[arg(long, default_value = "source")]
        domain: String,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-I training; writes checkpoint, trace and resolved config to --out.
    TrainStage1 {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Labels the target training pool with a Stage-I checkpoint.
    PseudoLabel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images to label; defaults to the config's train_pool.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-II fine-tuning on pseudo labels.
    TrainStage2 {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stage-I checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output of `pseudo-label`; generated from the checkpoint when omitted.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a checkpoint on held-out labeled data.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target")]
        domain: String,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Runs every arm of a plan for every seed, then writes the report.
    Ablate {
        /// Plan file; the default Table-2/Table-3 plan when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuilds the report tables of an ablation directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_metrics(label: &str, m: &RunMetrics) {
    println!(
        "{label}: fused mIoU {:.2}  aux {:.2}  primary {:.2}  disagreement {:.4}",
        100.0 * m.fused_miou,
        100.0 * m.aux_miou,
        100.0 * m.primary_miou,
        m.disagreement_rate
    );
}

fn write_stage(out: &Path, config: &TrainConfig, ck: &ModelCheckpoint, m: &RunMetrics) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    std::fs::write(out.join("config.cfg"), render_config(config)).map_err(|e| Error::Io {
        path: out.join("config.cfg"),
        source: e,
    })?;
    ck.save(&out.join("checkpoint.bin"))?;
    m.write_trace(&out.join("trace.csv"))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData {
            domain,
            count,
            seed,
            out,
        } => {
            let spec = match Domain::parse(&domain).map_err(|e| Error::Config(e.to_string()))? {
                Domain::Source => DomainSpec::source(seed),
                Domain::Target => DomainSpec::target(seed),
            };
            let data = export_dataset(&spec, count, &out)?;
            println!("wrote {} {} samples to {}", data.len(), domain, out.display());
        }
        Command::TrainStage1 { cfg, out } => {
            let c = cfg.load()?;
            let (ck, m) = train_stage1(&c, &c.source_spec(), &c.target_spec())?;
            write_stage(&out, &c, &ck, &m)?;
            print_metrics(&format!("stage1 (kept iter {})", m.best_iter), &m);
        }
        Command::PseudoLabel {
            cfg,
            checkpoint,
            count,
            out,
        } => {
            let c = cfg.load()?;
            let ck = ModelCheckpoint::load(&checkpoint)?;
            let pseudo = generate_pseudo_labels(&ck, &c.target_spec(), count.unwrap_or(c.train_pool))?;
            pseudo.save(&out)?;
            println!(
                "labeled {} target images; class weights {:?}",
                pseudo.maps.len(),
                pseudo.weights.as_slice()
            );
        }
        Command::TrainStage2 {
            cfg,
            checkpoint,
            pseudo,
            out,
        } => {
            let c = cfg.load()?;
            let ck = ModelCheckpoint::load(&checkpoint)?;
            let pseudo = match pseudo {
                Some(dir) => PseudoDataset::load(&dir)?,
                None => generate_pseudo_labels(&ck, &c.target_spec(), c.train_pool)?,
            };
            let (ck2, m) = train_stage2(&c, &ck, &pseudo)?;
            write_stage(&out, &c, &ck2, &m)?;
            print_metrics(&format!("stage2 (kept iter {})", m.best_iter), &m);
        }
        Command::Eval {
            cfg,
            checkpoint,
            domain,
            count,
        } => {
            let c = cfg.load()?;
            let ck = ModelCheckpoint::load(&checkpoint)?;
            let spec = match Domain::parse(&domain).map_err(|e| Error::Config(e.to_string()))? {
                Domain::Target => c.eval_spec(),
                Domain::Source => DomainSpec::source(derive_seed(c.seed, split::TARGET_EVAL)),
            };
            let m = evaluate(&ck, &spec, count.unwrap_or(c.eval_count))?;
            println!("{:<12} {:>8} {:>8} {:>8}", "class", "fused", "aux", "primary");
            for (i, name) in CLASS_NAMES.iter().enumerate().take(m.per_class_iou.len()) {
                println!(
                    "{name:<12} {:>8.2} {:>8.2} {:>8.2}",
                    100.0 * m.per_class_iou[i],
                    100.0 * m.aux_iou[i],
                    100.0 * m.primary_iou[i]
                );
            }
            println!(
                "{:<12} {:>8.2} {:>8.2} {:>8.2}",
                "mIoU",
                100.0 * m.fused_miou,
                100.0 * m.aux_miou,
                100.0 * m.primary_miou
            );
            println!("disagreement_rate {:.4}", m.disagreement_rate);
        }
        Command::Ablate { plan, out } => {
            let plan = match plan {
                Some(p) => ExperimentPlan::load(&p)?,
                None => ExperimentPlan::default_plan(TrainConfig::default(), vec![0, 1, 2]),
            };
            ablate(&plan, &out)?;
            print!("{}", std::fs::read_to_string(out.join(ReportTable::TEXT_FILE)).unwrap_or_default());
        }
        Command::Report { out } => {
            let table = emit_report(&out)?;
            print!("{}", render_text(&table.to_csv()));
        }
    }
    Ok(())
}

fn exit_code(err: &Error, cli_config: bool) -> u8 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Io { .. } if cli_config => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let config_path = match &cli.command {
        Command::TrainStage1 { cfg, .. }
        | Command::PseudoLabel { cfg, .. }
        | Command::TrainStage2 { cfg, .. }
        | Command::Eval { cfg, .. } => cfg.config.clone(),
        Command::Ablate { plan, .. } => plan.clone(),
        _ => None,
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let is_config = matches!(&e, Error::Io { path, .. } if Some(path) == config_path.as_ref());
            ExitCode::from(exit_code(&e, is_config))
        }
    }
}
