//! Diagnostic emitters: the reconstruction scan behind the beta-tuning
//! figures, latent z dumps for external projection, and the perturbation
//! study table.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slategen_core::dataio::Dataset;
use slategen_core::evalkit::perturbation_study;
use slategen_core::models::EmbeddingBank;
use slategen_core::simenv::Environment;
use slategen_core::{Error, Result};

use crate::pipeline::{BaseModel, TrainedModel};

/// For every dataset slate: encode with the posterior mean (no noise),
/// decode, and emit `(observed clicks, ENC original, ENC reconstructed)`.
pub fn emit_reconstruction_scan(
    model: &TrainedModel,
    data: &Dataset,
    env: &Environment,
    out: &Path,
) -> Result<usize> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(w, "observed_clicks,enc_original,enc_reconstructed")?;
    let mut rows = 0usize;
    for record in &data.records {
        let reconstructed = match &model.base {
            BaseModel::List(m) => {
                let c = m.constraint_for(&record.response, record.user)?;
                m.reconstruct(&record.slate, &c)?
            }
            BaseModel::Pivot(m) => {
                let c = m.constraint_for(&record.response, record.user)?;
                m.reconstruct(&record.slate, &c)?
            }
            BaseModel::Ranker(_) => {
                return Err(Error::Contract(
                    "reconstruction scans need a CVAE model".into(),
                ))
            }
        };
        let original = env.expected_clicks(&record.slate, record.user)?;
        let recon = env.expected_clicks(&reconstructed, record.user)?;
        writeln!(w, "{},{},{}", record.response.clicks(), original, recon)?;
        rows += 1;
    }
    w.flush()?;
    Ok(rows)
}

/// Posterior-mean latent code of every record, one whitespace-separated line
/// per record, in dataset order. Pairs with the dataset file for labels.
pub fn dump_latents(model: &TrainedModel, data: &Dataset, out: &Path) -> Result<usize> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    let mut rows = 0usize;
    for record in &data.records {
        let z = match &model.base {
            BaseModel::List(m) => {
                let c = m.constraint_for(&record.response, record.user)?;
                m.posterior_params(&record.slate, &c)?.mean().to_vec()
            }
            BaseModel::Pivot(m) => {
                let c = m.constraint_for(&record.response, record.user)?;
                m.posterior_params(&record.slate, &c)?.mean().to_vec()
            }
            BaseModel::Ranker(_) => {
                return Err(Error::Contract("latent dumps need a CVAE model".into()))
            }
        };
        let fields: Vec<String> = z.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", fields.join(" "))?;
        rows += 1;
    }
    w.flush()?;
    Ok(rows)
}

/// Long-format perturbation histogram: `group,a,bin_low,bin_high,count`.
pub fn emit_perturbation_study(
    data: &Dataset,
    env: &Environment,
    bank: &EmbeddingBank,
    a_values: &[usize],
    bins: usize,
    seed: u64,
    out: &Path,
) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = perturbation_study(data, env, bank, a_values, bins, &mut rng)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(w, "group,a,bin_low,bin_high,count")?;
    for bin in &table {
        writeln!(
            w,
            "{},{},{},{},{}",
            bin.group, bin.a, bin.bin_low, bin.bin_high, bin.count
        )?;
    }
    w.flush()?;
    Ok(table.len())
}
