//! `visp download`: fetch MNIST or CIFAR-10 into a data directory.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::Args;
use visp_core::data;
use visp_core::nn::DatasetKind;

use crate::Failure;

pub const MNIST_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";
pub const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/";
pub const CIFAR10_ARCHIVE: &str = "cifar-10-binary.tar.gz";

#[derive(Args, Debug)]
pub struct DownloadArgs {
    /// mnist or cifar10
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// Target directory (default: data/<dataset>)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Base URL the files are fetched from
    #[arg(long)]
    base_url: Option<String>,
    /// Fetch again even when the files are already present
    #[arg(long)]
    force: bool,
}

pub fn cmd_download(args: DownloadArgs) -> Result<(), Failure> {
    let kind: DatasetKind = args.dataset.parse()?;
    let dir = args
        .data_dir
        .unwrap_or_else(|| PathBuf::from("data").join(kind.as_str()));
    fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;

    if !args.force && data::dataset_files(kind, &dir).iter().all(|p| p.exists()) {
        eprintln!("{kind} already present in {}", dir.display());
        return Ok(());
    }
    match kind {
        DatasetKind::Mnist => {
            let base = args.base_url.as_deref().unwrap_or(MNIST_URL);
            for name in data::expected_files(kind) {
                let file = format!("{name}.gz");
                let bytes = fetch(&join_url(base, &file))?;
                save(&dir.join(&file), &bytes)?;
            }
        }
        DatasetKind::Cifar10 => {
            let base = args.base_url.as_deref().unwrap_or(CIFAR10_URL);
            let bytes = fetch(&join_url(base, CIFAR10_ARCHIVE))?;
            unpack_tar_gz(&bytes, &dir)?;
        }
    }
    // A parse of the result catches truncated or mislabeled downloads early.
    data::load(kind, &dir).map_err(|e| Failure::data(format!("downloaded files do not load: {e}")))?;
    println!("{kind} ready in {}", dir.display());
    Ok(())
}

fn join_url(base: &str, file: &str) -> String {
    if base.ends_with('/') {
        format!("{base}{file}")
    } else {
        format!("{base}/{file}")
    }
}

fn fetch(url: &str) -> Result<Vec<u8>, Failure> {
    eprintln!("fetching {url}");
    let mut response = ureq::get(url)
        .call()
        .map_err(|e| Failure::data(format!("{url}: {e}")))?;
    let mut bytes = Vec::new();
    response
        .body_mut()
        .as_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| Failure::data(format!("{url}: {e}")))?;
    Ok(bytes)
}

fn save(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = path.with_extension("part");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn unpack_tar_gz(bytes: &[u8], dir: &Path) -> Result<(), Failure> {
    let gz = flate2::read::GzDecoder::new(bytes);
    tar::Archive::new(gz)
        .unpack(dir)
        .map_err(|e| Failure::data(format!("cannot unpack archive into {}: {e}", dir.display())))
}
