use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pnlss_cli::pipeline::{self, DecoupleReport, IdentifyReport, ModelErrors};
use pnlss_cli::{evaluate, CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "pnlss", version, about = "PNLSS identification and decoupling of the Bouc-Wen benchmark")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline configuration; omitted fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Parallel sweep workers (overrides the configuration).
    #[arg(long, global = true, value_name = "INT")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training, validation and test datasets.
    Generate,
    /// Estimate the BLA, fit the linear model and train the full PNLSS model.
    Identify,
    /// Run the branch/degree sweep and keep the best decoupled model.
    Decouple,
    /// Simulate a model on a dataset and write error and branch traces.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Record index within multi-realization dataset files.
        #[arg(long, default_value_t = 0)]
        realization: usize,
    },
}

fn resolve(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn db(v: Option<f64>) -> String {
    v.map_or_else(|| "diverged".to_string(), |v| format!("{v:.2}"))
}

fn print_identify(r: &IdentifyReport) {
    let line = |name: &str, e: &ModelErrors| {
        println!(
            "{name:<8} {:>10} {:>10} {:>10} {:>10}",
            db(e.train_db),
            db(e.validation_db),
            db(e.test_multisine_db),
            db(e.test_swept_sine_db)
        );
    };
    println!("rms output error (dB)");
    println!("{:<8} {:>10} {:>10} {:>10} {:>10}", "model", "train", "valid", "test-ms", "test-ss");
    line("linear", &r.linear);
    line("pnlss", &r.pnlss);
    println!(
        "order {}, {} linear and {} nonlinear parameters; LM kept iteration {} of {} ({:?})",
        r.order, r.linear_parameter_count, r.nonlinear_parameter_count, r.selected_iteration, r.lm_iterations, r.stop
    );
}

fn print_decouple(r: &DecoupleReport) {
    println!(
        "{} candidates, {} failed; full PNLSS: {} nonlinear parameters, test-ms {} dB",
        r.rows.len(),
        r.failures,
        r.full_nonlinear_parameter_count,
        db(r.full_test_multisine_db)
    );
    println!("Pareto front (nonlinear parameters vs multisine-test error)");
    println!("{:>3} {:>3} {:>6} {:>7} {:>10}", "r", "d", "trial", "params", "test-ms");
    for p in &r.pareto {
        println!("{:>3} {:>3} {:>6} {:>7} {:>10.2}", p.r, p.d, p.trial, p.param_count, p.test_multisine_db);
    }
    match r.best_row() {
        Some(b) => println!(
            "selected on validation: r={} d={} trial={} params={} val={:.2} dB test-ms={} dB test-ss={} dB",
            b.r,
            b.d,
            b.trial,
            b.param_count,
            b.val_rms_db,
            db(b.test_ms_rms_db),
            db(b.test_ss_rms_db)
        ),
        None => println!("no candidate trained successfully"),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Generate => {
            for f in pipeline::generate(&cfg)? {
                println!(
                    "{}: {} realization(s), {} samples, input rms {:.3} N",
                    f.path.display(),
                    f.realizations,
                    f.samples,
                    f.input_rms
                );
            }
        }
        Command::Identify => print_identify(&pipeline::identify(&cfg)?),
        Command::Decouple => print_decouple(&pipeline::decouple(&cfg)?.0),
        Command::Evaluate {
            model,
            data,
            realization,
        } => {
            let s = evaluate::evaluate(&cfg, &model, &data, realization)?;
            println!(
                "{} model on {}: rms error {} dB ({} samples)",
                s.model_kind,
                s.dataset,
                s.rms_error_db.map_or_else(|| "-inf".to_string(), |v| format!("{v:.2}")),
                s.samples
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
