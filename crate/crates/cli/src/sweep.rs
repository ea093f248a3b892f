//! The beta sweep: one trained model per (beta, replicate) cell, all metrics
//! per cell, a long-format CSV sorted by ascending beta, and per-beta latent
//! dumps. Cells are independent jobs with their own derived RNG streams and
//! run concurrently up to the configured worker count; a failed cell is
//! recorded and the sweep continues.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slategen_core::evalkit::{evaluate_generator, MetricsReport};

use crate::config::{ModelKind, RunConfig};
use crate::manifest::RunManifest;
use crate::pipeline::{
    eval_users, policy, stage_bank, stage_data, train_one_model, StagePaths,
};
use crate::scans::dump_latents;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct SweepCellResult {
    pub beta: f64,
    pub replicate: usize,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct SweepFailure {
    pub beta: f64,
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub cells: Vec<SweepCellResult>,
    pub failures: Vec<SweepFailure>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Each cell's stream comes from (master seed, beta index, replicate index).
pub fn cell_seed(master: u64, beta_index: usize, replicate: usize) -> u64 {
    splitmix64(master ^ splitmix64(((beta_index as u64) << 32) | replicate as u64))
}

const METRIC_NAMES: [&str; 9] = [
    "enc",
    "total_item_variance",
    "slate_mean_variance",
    "intra_slate_variance",
    "item_coverage",
    "ild",
    "ild_std",
    "slate_hit_rate",
    "slate_recall",
];

fn metric_values(report: &MetricsReport) -> [f64; 9] {
    [
        report.enc,
        report.total_var,
        report.slate_mean_var,
        report.intra_slate_var,
        report.coverage,
        report.ild_mean,
        report.ild_std,
        report.hit_rate,
        report.recall,
    ]
}

/// Run the configured beta grid. Builds the environment, dataset, and
/// embedding bank once (the same stages as the pipeline), then trains one
/// model per cell.
pub fn run_beta_sweep(
    config: &RunConfig,
    seed: u64,
    out: &Path,
    workers: usize,
) -> Result<SweepReport, CliError> {
    if !matches!(
        config.sweep.model,
        ModelKind::ListCvae | ModelKind::NonGreedyListCvae | ModelKind::PivotCvae(_)
    ) {
        return Err(CliError::Config(format!(
            "sweep model must be a CVAE kind, got {}",
            config.sweep.model.label()
        )));
    }
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let paths = StagePaths::new(out);
    let mut manifest = RunManifest::new("sweep", seed);
    std::fs::write(paths.config_snapshot(), config.to_text())?;
    manifest.config_snapshot_path = Some(paths.config_snapshot());

    let data = stage_data(config, seed, &paths, &mut manifest)?;
    let bank = stage_bank(config, seed, &data, &paths, &mut manifest)?;
    let personalized =
        config.model.personalized && data.full.records.iter().any(|r| r.user.is_some());
    let users = eval_users(config, &data.full);
    let k = data.full.slate_size;

    let mut betas = config.sweep.betas.clone();
    betas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    betas.dedup();

    let cells: Vec<(usize, f64, usize)> = betas
        .iter()
        .enumerate()
        .flat_map(|(bi, &beta)| (0..config.sweep.replicates).map(move |rep| (bi, beta, rep)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(if workers == 0 { 0 } else { workers })
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))?;

    let results: Vec<Result<SweepCellResult, SweepFailure>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(beta_index, beta, replicate)| {
                let train_seed = cell_seed(seed, beta_index, replicate);
                let eval_seed = splitmix64(train_seed ^ 0x00C0FFEE);
                let run = || -> slategen_core::Result<SweepCellResult> {
                    let model = train_one_model(
                        config.sweep.model,
                        config,
                        beta,
                        personalized,
                        train_seed,
                        &data,
                        &bank,
                    )?;
                    let generator = policy(config, &model, &bank, k);
                    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
                    let report = evaluate_generator(
                        &generator,
                        &data.env,
                        &bank,
                        &users,
                        &data.test,
                        config.eval.n_samples,
                        &mut rng,
                    )?;
                    if replicate == 0 && config.sweep.dump_z {
                        let z_path = paths.out.join(format!("zdump_beta_{beta:e}.txt"));
                        dump_latents(&model, &data.full, &z_path)?;
                    }
                    Ok(SweepCellResult {
                        beta,
                        replicate,
                        seed: train_seed,
                        report,
                    })
                };
                run().map_err(|e| SweepFailure {
                    beta,
                    replicate,
                    error: e.to_string(),
                })
            })
            .collect()
    });

    let mut report = SweepReport::default();
    for result in results {
        match result {
            Ok(cell) => report.cells.push(cell),
            Err(failure) => report.failures.push(failure),
        }
    }

    let sweep_csv = paths.out.join("sweep.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&sweep_csv)?);
    writeln!(w, "beta,replicate,seed,n_samples,metric,value")?;
    for cell in &report.cells {
        for (name, value) in METRIC_NAMES.iter().zip(metric_values(&cell.report)) {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                cell.beta, cell.replicate, cell.seed, config.eval.n_samples, name, value
            )?;
        }
    }
    w.flush()?;
    manifest.add_output(&sweep_csv);

    if !report.failures.is_empty() {
        let fail_path = paths.out.join("sweep_failures.txt");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&fail_path)?);
        for f in &report.failures {
            writeln!(w, "beta={} replicate={} error={}", f.beta, f.replicate, f.error)?;
        }
        w.flush()?;
        manifest.add_output(&fail_path);
        manifest.note(format!("{} sweep cells failed", report.failures.len()));
    }
    if config.sweep.dump_z {
        for &beta in &betas {
            manifest.add_output(&paths.out.join(format!("zdump_beta_{beta:e}.txt")));
        }
    }

    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.save(&paths.manifest("sweep"))?;
    Ok(report)
}
