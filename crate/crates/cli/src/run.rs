//! `run.json`: what was run, with which settings, on which bytes.

use std::io::Read;
use std::path::{Path, PathBuf};

use attnsync::pipeline::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Versions {
    attnsync: &'static str,
    config: u32,
    model_artifact: u32,
    dataset: u32,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: Vec<String>,
    versions: Versions,
    threads: usize,
    seed: u64,
    config: &'a PipelineConfig,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
}

pub fn sha256_file(path: &Path) -> Result<String, Error> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Digests of a file, or of every file below a directory in path order.
pub fn digests(path: &Path) -> Result<Vec<FileDigest>, Error> {
    let mut files = Vec::new();
    collect(path, &mut files)?;
    files.sort();
    files
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != RUN_FILE))
        .map(|p| Ok(FileDigest { sha256: sha256_file(&p)?, path: p }))
        .collect()
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            collect(&entry?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Writes `run.json` into `dir`.
pub fn write_run(
    dir: &Path,
    command: &str,
    config: &PipelineConfig,
    inputs: &[FileDigest],
    outputs: &[FileDigest],
) -> Result<PathBuf, Error> {
    let record = RunRecord {
        command,
        argv: std::env::args().collect(),
        versions: Versions {
            attnsync: env!("CARGO_PKG_VERSION"),
            config: crate::config::CONFIG_VERSION,
            model_artifact: attnsync::model::ARTIFACT_VERSION,
            dataset: attnsync::dataset::DATASET_FORMAT_VERSION,
        },
        threads: rayon::current_num_threads(),
        seed: config.seed,
        config,
        inputs,
        outputs,
    };
    std::fs::create_dir_all(dir)?;
    let path = dir.join(RUN_FILE);
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(&path, json + "\n")?;
    Ok(path)
}
