//! Run-directory plumbing: naming, manifests, and log routing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "run.log";

/// Resolves the output directory: an explicit `--out` is used as given
/// (and may already exist); otherwise a fresh `runs/<timestamp>-seed<n>`
/// directory is created, suffixed on collision.
pub fn resolve_out_dir(out: Option<&Path>, seed: u64) -> Result<PathBuf, CliError> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stamp = Utc::now().format("%Y%m%dT%H%M%SZ");
            let base = PathBuf::from("runs");
            let mut candidate = base.join(format!("{stamp}-seed{seed}"));
            let mut n = 1;
            while candidate.exists() {
                candidate = base.join(format!("{stamp}-seed{seed}-{n}"));
                n += 1;
            }
            candidate
        }
    };
    fs::create_dir_all(&dir).map_err(|e| CliError {
        module: "cli",
        message: format!("cannot create output directory {}: {e}", dir.display()),
    })?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError {
        module: "io",
        message: format!("cannot serialize {}: {e}", path.display()),
    })?;
    fs::write(path, text + "\n").map_err(|e| CliError {
        module: "io",
        message: format!("cannot write {}: {e}", path.display()),
    })
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    format_version: u32,
    command: String,
    artifacts: Vec<ManifestEntry>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` (except the manifest itself) into
/// `manifest.json`. Content is deterministic for deterministic artifacts:
/// entries are sorted by path and carry no timestamps, so two identical
/// runs produce identical manifests. Call after all artifacts are written.
pub fn write_manifest(dir: &Path, command: &str) -> Result<(), CliError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files).map_err(|e| CliError {
        module: "io",
        message: format!("cannot walk {}: {e}", dir.display()),
    })?;
    let mut artifacts = Vec::new();
    for path in files {
        let rel = path
            .strip_prefix(dir)
            .expect("walked path is under its root")
            .to_string_lossy()
            .replace('\\', "/");
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| CliError {
            module: "io",
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let mut sha256 = String::with_capacity(64);
        for b in digest {
            sha256.push_str(&format!("{b:02x}"));
        }
        artifacts.push(ManifestEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256,
        });
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    write_json(
        &Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.to_string(),
            artifacts,
        },
        &dir.join(MANIFEST_FILE),
    )
}

/// Copies every log line to both stderr and the run log file.
struct Tee {
    file: fs::File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        self.file.flush()
    }
}

/// Routes `log` output to stderr, and additionally into `<dir>/run.log`
/// when a run directory is given. Dataset-producing commands pass `None`
/// so their output directories stay byte-identical across reruns.
pub fn init_logging(run_dir: Option<&Path>) {
    let mut builder = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("info"),
    );
    if let Some(dir) = run_dir {
        match fs::File::create(dir.join(LOG_FILE)) {
            Ok(file) => {
                builder.target(env_logger::Target::Pipe(Box::new(Tee { file })));
            }
            Err(e) => eprintln!("warning: cannot create run log in {}: {e}", dir.display()),
        }
    }
    // Ignore double-init, which only happens in tests driving main directly.
    let _ = builder.try_init();
}
