//! Run manifests: every command writes one, listing its inputs, derived
//! seeds, and every artifact it produced.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_snapshot_path: Option<PathBuf>,
    pub stage_seeds: Vec<(String, u64)>,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            ..Default::default()
        }
    }

    pub fn seed_for(&mut self, stage: &str, seed: u64) -> u64 {
        self.stage_seeds.push((stage.to_string(), seed));
        seed
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "command={}", self.command)?;
        writeln!(w, "version={}", self.version)?;
        writeln!(w, "seed={}", self.seed)?;
        if let Some(snapshot) = &self.config_snapshot_path {
            writeln!(w, "config_snapshot={}", snapshot.display())?;
        }
        for (stage, seed) in &self.stage_seeds {
            writeln!(w, "seed.{stage}={seed}")?;
        }
        for output in &self.outputs {
            writeln!(w, "output={}", output.display())?;
        }
        for note in &self.notes {
            writeln!(w, "note={note}")?;
        }
        writeln!(w, "wall_clock_secs={:.3}", self.wall_clock_secs)?;
        w.flush()?;
        Ok(())
    }
}
