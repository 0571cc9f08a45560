//! Error families, CSV emission and run manifests.

use std::fmt::{self, Display, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rotortrap::config::{Config, ConfigError};
use rotortrap::floquet::FloquetError;
use rotortrap::model::ModelError;
use rotortrap::nvspin::NvError;
use rotortrap::reconstruct::ReconstructError;
use rotortrap::rotor1d::Rotor1dError;
use rotortrap::rotor3d::Rotor3dError;
use rotortrap::signal::SignalError;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Io,
    Config,
    Numerical,
    NonConvergence,
}

impl Family {
    pub fn exit_code(self) -> u8 {
        match self {
            Family::Io => 1,
            Family::Config => 2,
            Family::Numerical => 3,
            Family::NonConvergence => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub family: Family,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(family: Family, error: impl Into<anyhow::Error>) -> Self {
        Self { family, error: error.into() }
    }

    pub fn config(message: impl Display) -> Self {
        Self::new(Family::Config, anyhow::anyhow!("{message}"))
    }

    pub fn context(self, what: impl Display) -> Self {
        Self { family: self.family, error: self.error.context(what.to_string()) }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

macro_rules! family {
    ($($ty:ty => $fam:expr),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($fam, e)
            }
        })*
    };
}

family! {
    std::io::Error => Family::Io,
    csv::Error => Family::Io,
    ConfigError => Family::Config,
    ModelError => Family::Config,
    Rotor1dError => Family::Numerical,
    Rotor3dError => Family::Numerical,
    FloquetError => Family::Numerical,
    SignalError => Family::Numerical,
}

impl From<NvError> for CliError {
    fn from(e: NvError) -> Self {
        let family = match e {
            NvError::ClampWarning { .. } => Family::Numerical,
            _ => Family::Config,
        };
        CliError::new(family, e)
    }
}

impl From<ReconstructError> for CliError {
    fn from(e: ReconstructError) -> Self {
        let family = match e {
            ReconstructError::NonConvergence { .. } => Family::NonConvergence,
            ReconstructError::InvalidArgument(_) => Family::Config,
            ReconstructError::DegenerateGeometry { .. } => Family::Numerical,
        };
        CliError::new(family, e)
    }
}

/// Shortest round-trip formatting, independent of locale.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CliError::new(Family::Io, anyhow::anyhow!("{e}")))
}

/// `key = value` lines in insertion order.
#[derive(Debug, Default)]
pub struct Report {
    text: String,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        let _ = writeln!(self.text, "{key} = {value}");
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything needed to reproduce a run, plus hashes of what it wrote.
#[derive(Debug)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    pub seed: u64,
    pub version: &'static str,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, config: Config, seed: u64) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION"),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut r = Report::new();
        r.put("command", &self.command).put("version", self.version).put("seed", self.seed);
        for (k, v) in self.config.iter() {
            r.put(&format!("config.{k}"), v);
        }
        for (name, hash) in &self.inputs {
            r.put(&format!("input.{name}"), hash);
        }
        for (name, hash) in &self.outputs {
            r.put(&format!("output.{name}"), hash);
        }
        String::from_utf8(r.into_bytes()).expect("utf-8")
    }
}

/// Collects output files and writes them, followed by the manifest, once the
/// command has finished computing.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), files: Vec::new() }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn write(self, manifest: &mut RunManifest) -> CliResult<()> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::from(e).context(format!("creating {}", self.dir.display())))?;
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            fs::write(&path, bytes).map_err(|e| CliError::from(e).context(format!("writing {}", path.display())))?;
            manifest.outputs.push((name.clone(), sha256_hex(bytes)));
        }
        let path = self.dir.join("manifest.txt");
        fs::write(&path, manifest.render()).map_err(|e| CliError::from(e).context(format!("writing {}", path.display())))?;
        Ok(())
    }
}

pub fn read_input(path: &Path, manifest: &mut RunManifest) -> CliResult<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| CliError::from(e).context(format!("reading {}", path.display())))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.inputs.push((name, sha256_hex(&bytes)));
    Ok(bytes)
}
