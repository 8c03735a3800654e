use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ckequant_core::config::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Hex prefix of the SHA-256 of the config with `outputs` cleared, so the
/// same experiment hashes identically wherever it is written.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.outputs.clear();
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub hash: String,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

pub struct ArtifactWriter {
    dir: PathBuf,
    stem: String,
    written: Vec<String>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path, subcommand: &str, hash: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(ArtifactWriter { dir: dir.to_path_buf(), stem: format!("{subcommand}_{hash}"), written: Vec::new() })
    }

    pub fn csv(&mut self, body: &str) -> Result<(), CliError> {
        let name = format!("{}.csv", self.stem);
        self.write(&name, body.as_bytes())
    }

    pub fn json<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        let name = format!("{}.json", self.stem);
        let mut body = serde_json::to_string_pretty(value).expect("report serializes");
        body.push('\n');
        self.write(&name, body.as_bytes())
    }

    pub fn finish(mut self, subcommand: &str, hash: &str, cfg: &ExperimentConfig) -> Result<Vec<String>, CliError> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            hash: hash.into(),
            files: self.written.clone(),
            config: cfg.clone(),
        };
        let mut body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        body.push('\n');
        self.write("manifest.json", body.as_bytes())?;
        Ok(self.written)
    }

    /// Temp file in the target directory, then rename.
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.{}.tmp", std::process::id()));
        let res = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &target)
        })();
        if let Err(e) = res {
            let _ = fs::remove_file(&tmp);
            return Err(CliError::io(&target, e));
        }
        self.written.push(name.to_string());
        Ok(())
    }
}
