//! Run manifest: the resolved configuration, build identifier, start time and
//! checksums of the dataset files, written once when a run starts.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use visp_core::data;

use crate::config::RunConfig;
use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FINISHED_FILE: &str = "finished.txt";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub build: String,
    pub version: String,
    pub started: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset_checksums: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> Result<Self, Failure> {
        let kind = cfg.dataset_kind()?;
        let mut dataset_checksums = std::collections::BTreeMap::new();
        for path in data::dataset_files(kind, &cfg.data_dir) {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            dataset_checksums.insert(name, sha256_file(&path)?);
        }
        Ok(RunManifest {
            build: env!("VISP_BUILD_ID").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: now(),
            seed: cfg.seed,
            config: cfg.clone(),
            dataset_checksums,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        let text = toml::to_string(self).map_err(|e| Failure {
            code: 1,
            message: format!("cannot serialize manifest: {e}"),
        })?;
        std::fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let mut file = std::fs::File::open(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Records when the run ended and how; `error` is `None` on success.
pub fn write_finished(dir: &Path, error: Option<&str>) -> Result<(), Failure> {
    let status = match error {
        None => "ok".to_string(),
        Some(e) => format!("failed: {e}"),
    };
    let path = dir.join(FINISHED_FILE);
    std::fs::write(&path, format!("finished = {}\nstatus = {status}\n", now()))
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}
