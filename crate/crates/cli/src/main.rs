use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sleepstage::data::write_cohort;
use sleepstage::experiment::{
    build_plans, build_report, check_report, emit_tables, load_checkpoints, load_dataset, load_runs, run_experiment, run_finetune,
    run_id, run_pretrain, save_checkpoints, save_runs, start_run, verify_plan_files, write_report, ExperimentConfig,
    ExperimentError, OutputLayout, PlanSet, ReportFormat,
};
use sleepstage::train::{evaluate, Checkpoint};

const EXIT_LEAKAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "sleepstage", version, about = "Stratified two-stage sleep staging experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report table format.
    #[arg(long, global = true, value_enum, default_value_t = Format::All)]
    format: Format,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
    All,
}

impl Format {
    fn formats(self) -> Vec<ReportFormat> {
        match self {
            Format::Markdown => vec![ReportFormat::Markdown],
            Format::Csv => vec![ReportFormat::Csv],
            Format::All => vec![ReportFormat::Markdown, ReportFormat::Csv],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic cohort to disk as a manifest dataset.
    Generate {
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Build and save the Phase-1 and Phase-2 fold plans.
    Plan,
    /// Check saved plan files for subject leakage.
    VerifyPlan {
        #[arg(long)]
        phase1: Option<PathBuf>,
        #[arg(long)]
        phase2: Option<PathBuf>,
    },
    /// Train one checkpoint per Phase-1 fold.
    Pretrain,
    /// Fine-tune every planned subgroup fold from its checkpoint.
    Finetune,
    /// Score a checkpoint on held-out subjects.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subject ids; defaults to the checkpoint's test fold.
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
    },
    /// Rebuild report tables from saved run files.
    Report {
        /// Compare the rebuilt report with the saved bundle instead of writing.
        #[arg(long)]
        check: bool,
    },
    /// Plan, pretrain, fine-tune and report in one go.
    Run,
}

fn config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("this command needs --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_plans(layout: &OutputLayout) -> Result<PlanSet, ExperimentError> {
    PlanSet::load(&layout.phase1_plan(), &layout.phase2_plan())
}

fn print_tables(bundle: &sleepstage::experiment::ReportBundle) {
    for (_, text) in emit_tables(bundle, ReportFormat::Markdown) {
        println!("{text}");
    }
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    match &cli.command {
        Command::Generate { data_dir } => {
            let cfg = config(cli)?;
            if cfg.dataset.synthetic.is_none() {
                return Err(ExperimentError::Config("generate needs a [dataset.synthetic] section".into()));
            }
            let (cohort, _) = load_dataset(&cfg)?;
            let manifest = write_cohort(&cohort, data_dir)?;
            println!("wrote {} subjects to {}", cohort.len(), manifest.display());
        }
        Command::Plan => {
            let cfg = config(cli)?;
            let (cohort, _) = load_dataset(&cfg)?;
            let plans = build_plans(&cfg, &cohort)?;
            plans.save(&OutputLayout::new(&cfg.out_dir))?;
            println!(
                "{} Phase-1 folds, {} subgroup plans, {} subgroups skipped",
                plans.phase1.k(),
                plans.phase2.plans.len(),
                plans.phase2.skipped.len()
            );
        }
        Command::VerifyPlan { phase1, phase2 } => {
            let (p1, p2) = match (phase1, phase2) {
                (Some(a), Some(b)) => (a.clone(), b.clone()),
                (None, None) => {
                    let layout = OutputLayout::new(config(cli)?.out_dir);
                    (layout.phase1_plan(), layout.phase2_plan())
                }
                _ => return Err(ExperimentError::Config("pass both --phase1 and --phase2, or neither".into())),
            };
            let violations = verify_plan_files(&p1, &p2)?;
            if !violations.is_empty() {
                return Err(ExperimentError::Violations(violations));
            }
            println!("no leakage found");
        }
        Command::Pretrain => {
            let cfg = config(cli)?;
            let layout = OutputLayout::new(&cfg.out_dir);
            let (cohort, _) = load_dataset(&cfg)?;
            let plans = load_plans(&layout)?;
            let (ckpts, results) = run_pretrain(&cfg, &cohort, &plans)?;
            save_checkpoints(&layout, &ckpts)?;
            save_runs(&start_run(&layout, &cfg)?, &results)?;
            for r in &results {
                println!("fold {}: kappa {:.3}", r.fold_index, r.evaluation.report.kappa);
            }
        }
        Command::Finetune => {
            let cfg = config(cli)?;
            let layout = OutputLayout::new(&cfg.out_dir);
            let (cohort, _) = load_dataset(&cfg)?;
            let plans = load_plans(&layout)?;
            let ckpts = load_checkpoints(&layout, plans.phase1.k())?;
            let results = run_finetune(&cfg, &cohort, &plans, &ckpts)?;
            save_runs(&layout.runs_dir(&run_id(&cfg)), &results)?;
            println!("{} fine-tuning folds completed", results.len());
        }
        Command::Evaluate { checkpoint, subjects } => {
            let cfg = config(cli)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let (cohort, _) = load_dataset(&cfg)?;
            let subjects: BTreeSet<String> = if subjects.is_empty() {
                let plans = load_plans(&OutputLayout::new(&cfg.out_dir))?;
                plans
                    .phase1
                    .folds
                    .get(ckpt.phase1_fold_index)
                    .map(|f| f.test.clone())
                    .ok_or_else(|| ExperimentError::Config("checkpoint fold is not in the saved plan".into()))?
            } else {
                subjects.iter().cloned().collect()
            };
            let model = ckpt.to_model()?;
            let eval = evaluate(&model, &ckpt.norm_stats, &ckpt.lineage, &cohort, &subjects)?;
            println!("{}", serde_json::to_string_pretty(&eval.report).expect("report serializes"));
        }
        Command::Report { check: true } => {
            let cfg = config(cli)?;
            let bundle = check_report(&cfg, &OutputLayout::new(&cfg.out_dir))?;
            let rows: usize = bundle.tables.iter().map(|t| t.rows.len()).sum();
            println!("report matches run files ({} tables, {rows} rows)", bundle.tables.len());
        }
        Command::Report { check: false } => {
            let cfg = config(cli)?;
            let layout = OutputLayout::new(&cfg.out_dir);
            let plans = load_plans(&layout)?;
            let id = run_id(&cfg);
            let results = load_runs(&layout.runs_dir(&id))?;
            let bundle = build_report(&cfg, &id, &plans, &results)?;
            write_report(&layout, &bundle, &cli.format.formats())?;
            print_tables(&bundle);
        }
        Command::Run => {
            let cfg = config(cli)?;
            let summary = run_experiment(&cfg, &cli.format.formats())?;
            print_tables(&summary.bundle);
            println!("run id {}", summary.run_id);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_leakage() {
                EXIT_LEAKAGE
            } else if e.is_input() {
                EXIT_INPUT
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
