use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use slategen_cli::config::RunConfig;
use slategen_cli::manifest::RunManifest;
use slategen_cli::pipeline::{
    load_model, reload_data, stage_bank, stage_data, stage_environment, stage_eval, stage_train,
    StagePaths,
};
use slategen_cli::scans::{dump_latents, emit_perturbation_study, emit_reconstruction_scan};
use slategen_cli::sweep::run_beta_sweep;
use slategen_cli::CliError;

use slategen_core::models::EmbeddingBank;

/// Generative slate recommendation experiments: simulators, CVAE slate
/// models, baselines, and the accuracy/variation evaluation suite.
#[derive(Parser)]
#[command(name = "slategen", version, about)]
struct Cli {
    /// Run configuration file (key=value sections); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for sweep cells (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and save the simulator environment.
    SimBuild,
    /// Simulate slates from the environment, balance, split, and save.
    Dataset,
    /// Ingest a rated interaction log instead of simulating.
    Ingest {
        /// Tab-separated `user<TAB>item<TAB>rating<TAB>timestamp` file.
        #[arg(long)]
        log: PathBuf,
    },
    /// Train the configured models on the saved training split.
    Train,
    /// Evaluate saved models and write the metrics CSV.
    Eval,
    /// Train one model per (beta, replicate) and emit the sweep CSV.
    Sweep,
    /// Perturb dataset slates and histogram the response shift.
    PerturbStudy {
        /// Numbers of perturbed items per slate.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0usize, 1, 2, 3])]
        a: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Posterior-mean reconstruction quality of every dataset slate.
    ReconScan,
    /// Dump posterior-mean latent codes for external projection.
    DumpZ,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    std::fs::create_dir_all(&cli.out)?;
    let paths = StagePaths::new(&cli.out);

    match cli.command {
        Command::SimBuild => {
            let started = Instant::now();
            let mut manifest = RunManifest::new("sim-build", cli.seed);
            stage_environment(&config, cli.seed, &paths, &mut manifest)?;
            manifest.wall_clock_secs = started.elapsed().as_secs_f64();
            manifest.save(&paths.manifest("sim-build"))?;
        }
        Command::Dataset => {
            let started = Instant::now();
            let mut manifest = RunManifest::new("dataset", cli.seed);
            stage_data(&config, cli.seed, &paths, &mut manifest)?;
            manifest.wall_clock_secs = started.elapsed().as_secs_f64();
            manifest.save(&paths.manifest("dataset"))?;
        }
        Command::Ingest { log } => {
            let started = Instant::now();
            config.data.ingest = Some(log.display().to_string());
            let mut manifest = RunManifest::new("ingest", cli.seed);
            stage_data(&config, cli.seed, &paths, &mut manifest)?;
            manifest.wall_clock_secs = started.elapsed().as_secs_f64();
            manifest.save(&paths.manifest("ingest"))?;
        }
        Command::Train => {
            let started = Instant::now();
            let mut manifest = RunManifest::new("train", cli.seed);
            let data = reload_data(&paths)?;
            let bank = stage_bank(&config, cli.seed, &data, &paths, &mut manifest)?;
            stage_train(&config, cli.seed, &data, &bank, &paths, &mut manifest)?;
            manifest.wall_clock_secs = started.elapsed().as_secs_f64();
            manifest.save(&paths.manifest("train"))?;
        }
        Command::Eval => {
            let started = Instant::now();
            let mut manifest = RunManifest::new("eval", cli.seed);
            let data = reload_data(&paths)?;
            let bank = EmbeddingBank::load(&paths.bank()).map_err(|e| CliError::Stage {
                stage: "load-bank".into(),
                source: e,
            })?;
            let models = config
                .model
                .kinds
                .iter()
                .map(|&kind| {
                    load_model(kind, &bank, &paths).map_err(|e| CliError::Stage {
                        stage: format!("load-model.{}", kind.stem()),
                        source: e,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            stage_eval(&config, cli.seed, &data, &bank, &models, &paths, &mut manifest)?;
            manifest.wall_clock_secs = started.elapsed().as_secs_f64();
            manifest.save(&paths.manifest("eval"))?;
        }
        Command::Sweep => {
            run_beta_sweep(&config, cli.seed, &cli.out, cli.workers)?;
        }
        Command::PerturbStudy { a, bins } => {
            let started = Instant::now();
            let mut manifest = RunManifest::new("perturb-study", cli.seed);
            let data = reload_data(&paths)?;
            let bank = EmbeddingBank::load(&paths.bank()).map_err(|e| CliError::Stage {
                stage: "load-bank".into(),
                source: e,
            })?;
            let out = paths.out.join("perturb_study.csv");
            let rows = emit_perturbation_study(
                &data.full, &data.env, &bank, &a, bins, cli.seed, &out,
            )
            .map_err(|e| CliError::Stage {
                stage: "perturb-study".into(),
                source: e,
            })?;
            manifest.note(format!("{rows} histogram cells"));
            manifest.add_output(&out);
            manifest.wall_clock_secs = started.elapsed().as_secs_f64();
            manifest.save(&paths.manifest("perturb-study"))?;
        }
        Command::ReconScan => {
            let started = Instant::now();
            let mut manifest = RunManifest::new("recon-scan", cli.seed);
            let data = reload_data(&paths)?;
            let bank = EmbeddingBank::load(&paths.bank()).map_err(|e| CliError::Stage {
                stage: "load-bank".into(),
                source: e,
            })?;
            for &kind in config.model.kinds.iter().filter(|k| k.is_cvae()) {
                let model = load_model(kind, &bank, &paths).map_err(|e| CliError::Stage {
                    stage: format!("load-model.{}", kind.stem()),
                    source: e,
                })?;
                let out = paths.out.join(format!("recon_scan_{}.csv", kind.stem()));
                let rows = emit_reconstruction_scan(&model, &data.full, &data.env, &out)
                    .map_err(|e| CliError::Stage {
                        stage: "recon-scan".into(),
                        source: e,
                    })?;
                manifest.note(format!("{} rows for {}", rows, kind.label()));
                manifest.add_output(&out);
            }
            manifest.wall_clock_secs = started.elapsed().as_secs_f64();
            manifest.save(&paths.manifest("recon-scan"))?;
        }
        Command::DumpZ => {
            let started = Instant::now();
            let mut manifest = RunManifest::new("dump-z", cli.seed);
            let data = reload_data(&paths)?;
            let bank = EmbeddingBank::load(&paths.bank()).map_err(|e| CliError::Stage {
                stage: "load-bank".into(),
                source: e,
            })?;
            for &kind in config.model.kinds.iter().filter(|k| k.is_cvae()) {
                let model = load_model(kind, &bank, &paths).map_err(|e| CliError::Stage {
                    stage: format!("load-model.{}", kind.stem()),
                    source: e,
                })?;
                let out = paths.out.join(format!("zdump_{}.txt", kind.stem()));
                let rows = dump_latents(&model, &data.full, &out).map_err(|e| CliError::Stage {
                    stage: "dump-z".into(),
                    source: e,
                })?;
                manifest.note(format!("{} latent rows for {}", rows, kind.label()));
                manifest.add_output(&out);
            }
            manifest.wall_clock_secs = started.elapsed().as_secs_f64();
            manifest.save(&paths.manifest("dump-z"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code())
        }
    }
}
