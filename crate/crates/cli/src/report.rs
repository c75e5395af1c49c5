use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use debias_core::regress::SeKind;
use debias_core::train::AlphaRow;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasTestRecord {
    pub gamma_hat: f64,
    pub se: f64,
    pub p: f64,
}

/// One method's downstream estimate at one labeled-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub method: String,
    #[serde(rename = "J")]
    pub j: usize,
    pub beta_hat: f64,
    pub se: f64,
    pub se_kind: SeKind,
    pub bias_test: Option<BiasTestRecord>,
    pub oof_mse: Option<f64>,
    pub accuracy: Option<f64>,
    pub alpha: Option<f64>,
    pub runtime_s: f64,
    pub seed: u64,
    pub schema_version: u32,
}

impl Record {
    pub fn new(method: &str, j: usize, beta_hat: f64, se: f64, se_kind: SeKind, seed: u64) -> Self {
        Record {
            method: method.to_string(),
            j,
            beta_hat,
            se,
            se_kind,
            bias_test: None,
            oof_mse: None,
            accuracy: None,
            alpha: None,
            runtime_s: 0.0,
            seed,
            schema_version: SCHEMA_VERSION,
        }
    }

    fn numbers(&self) -> Vec<f64> {
        let mut v = vec![self.beta_hat, self.se, self.runtime_s];
        if let Some(b) = self.bias_test {
            v.extend([b.gamma_hat, b.se, b.p]);
        }
        v.extend(self.oof_mse.iter().chain(&self.accuracy).chain(&self.alpha));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSection {
    pub power: f64,
    pub alpha: f64,
    pub draws: usize,
    #[serde(rename = "J")]
    pub sizes: Vec<usize>,
    pub mdb: Vec<f64>,
    pub true_mdb: Vec<f64>,
    /// Bias the curve was read against, and the smallest size detecting it.
    pub target_bias: Option<f64>,
    pub detectable_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSection {
    pub alpha_star: f64,
    pub rows: Vec<AlphaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub n_rows: usize,
    pub n_labeled: usize,
    pub records: Vec<Record>,
    pub power: Option<PowerSection>,
    pub alpha_grid: Option<AlphaSection>,
    pub runtime_s: f64,
}

impl ExperimentReport {
    pub fn new(command: &str, seed: u64, n_rows: usize, n_labeled: usize) -> Self {
        ExperimentReport {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            seed,
            n_rows,
            n_labeled,
            records: Vec::new(),
            power: None,
            alpha_grid: None,
            runtime_s: 0.0,
        }
    }

    /// Numeric fields that are not finite, by location.
    pub fn non_finite(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.numbers().iter().any(|v| !v.is_finite()) {
                bad.push(format!("record {i} ({})", r.method));
            }
        }
        if let Some(p) = &self.power {
            if p.mdb.iter().chain(&p.true_mdb).any(|v| !v.is_finite()) {
                bad.push("power curve".to_string());
            }
        }
        if let Some(a) = &self.alpha_grid {
            let rows = a.rows.iter().flat_map(|r| [r.oof_mse, r.accuracy, r.gamma_hat, r.gamma_se, r.p_value]);
            if rows.chain([a.alpha_star]).any(|v| !v.is_finite()) {
                bad.push("alpha grid".to_string());
            }
        }
        bad
    }

    pub fn to_json(&self) -> Result<Vec<u8>, CliError> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

/// Report bytes without the lines carrying wall-clock times.
pub fn strip_runtime(json: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(json);
    let mut out = String::with_capacity(text.len());
    for line in text.lines().filter(|l| !l.trim_start().starts_with("\"runtime_s\"")) {
        out.push_str(line.trim_end_matches(','));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub config_sha256: String,
    pub report_sha256: String,
    pub files: BTreeMap<String, String>,
    pub runtime_s: f64,
}

/// Collects output files and writes each one atomically into `dir`.
pub struct OutputDir {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &target)?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        self.write(name, &bytes)
    }

    /// Writes `report.json` and then `manifest.json` covering every file so far.
    pub fn finish(mut self, report: &ExperimentReport, config_sha256: String) -> Result<Manifest, CliError> {
        let json = report.to_json()?;
        self.write("report.json", &json)?;
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            command: report.command.clone(),
            config_sha256,
            report_sha256: sha256_hex(&strip_runtime(&json)),
            files: self.files.clone(),
            runtime_s: report.runtime_s,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        self.write("manifest.json", &bytes)?;
        Ok(manifest)
    }
}

/// Text for a CSV cell; missing values are empty.
pub fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:?}"))
}
