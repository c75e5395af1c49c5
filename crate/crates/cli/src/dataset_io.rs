use std::path::Path;

use debias_core::data::Dataset;
use debias_core::simgen::SimulatedDataset;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

const RESERVED: [&str; 4] = ["id", "y", "yhat", "labeled_flag"];

/// Generator metadata written next to a simulated dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub scenario: String,
    pub n: usize,
    pub seed: u64,
    pub params: Vec<(String, f64)>,
    pub true_beta: f64,
    pub implied_bias_sign: i8,
    pub no_greener: usize,
    pub covariates: Vec<String>,
    pub n_features: usize,
    pub n_labeled: usize,
    pub bank: Option<BankInfo>,
    pub csv_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankInfo {
    pub n: usize,
    pub seed: u64,
    pub noise_scale: f64,
    pub pilot_accuracy: f64,
}

fn is_feature(name: &str) -> bool {
    name.strip_prefix('f').is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

/// Shortest text that parses back to the same bits.
fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Dataset as CSV: `id, y, <covariates>, f1..fk, [yhat], labeled_flag`.
///
/// Unlabeled rows keep their outcome when it is known; an empty `y` marks it missing.
pub fn write_csv(data: &Dataset, yhat: Option<&DVector<f64>>) -> Result<Vec<u8>, CliError> {
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = vec!["id".into(), "y".into()];
    header.extend(data.covariate_names.iter().cloned());
    header.extend((1..=data.n_features()).map(|j| format!("f{j}")));
    if yhat.is_some() {
        header.push("yhat".into());
    }
    header.push("labeled_flag".into());
    out.write_record(&header)?;
    for i in 0..data.n_rows() {
        let mut row = vec![i.to_string()];
        let y = data.outcome[i];
        row.push(if y.is_finite() { num(y) } else { String::new() });
        row.extend(data.covariates.row(i).iter().map(|v| num(*v)));
        row.extend(data.features.row(i).iter().map(|v| num(*v)));
        if let Some(p) = yhat {
            row.push(num(p[i]));
        }
        row.push(u8::from(data.labeled[i]).to_string());
        out.write_record(&row)?;
    }
    out.into_inner().map_err(|e| CliError::Io(e.into_error()))
}

pub fn sidecar(sim: &SimulatedDataset, bank: Option<BankInfo>, csv_sha256: String) -> Sidecar {
    Sidecar {
        scenario: sim.scenario.name().to_string(),
        n: sim.n,
        seed: sim.seed,
        params: sim.params.clone(),
        true_beta: sim.true_beta,
        implied_bias_sign: sim.implied_bias_sign,
        no_greener: sim.no_greener,
        covariates: sim.data.covariate_names.clone(),
        n_features: sim.data.n_features(),
        n_labeled: sim.data.n_labeled(),
        bank,
        csv_sha256,
    }
}

fn field(value: &str, line: usize, col: &str) -> Result<f64, CliError> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| CliError::Validation(vec![format!("line {line}: `{value}` in column {col} is not a number")]))
}

/// Reads a dataset CSV. A `yhat` column becomes the dataset's proxy.
pub fn read_csv(path: &Path) -> Result<Dataset, CliError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let bad = |m: String| CliError::Validation(vec![format!("{}: {m}", path.display())]);
    let y_col = find("y").ok_or_else(|| bad("missing column y".into()))?;
    let flag_col = find("labeled_flag").ok_or_else(|| bad("missing column labeled_flag".into()))?;
    let yhat_col = find("yhat");
    let mut features: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| is_feature(h))
        .map(|(c, h)| (h[1..].parse::<usize>().unwrap_or(0), c))
        .collect();
    features.sort_unstable();
    if features.is_empty() {
        return Err(bad("no feature columns f1..fk".into()));
    }
    let covs: Vec<usize> = (0..header.len())
        .filter(|&c| !RESERVED.contains(&header[c].as_str()) && !is_feature(&header[c]))
        .collect();
    if covs.is_empty() {
        return Err(bad("no covariate columns".into()));
    }

    let (mut f, mut x, mut y, mut yhat, mut labeled) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let get = |c: usize| rec.get(c).unwrap_or("");
        labeled.push(match get(flag_col).trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(bad(format!("line {line}: labeled_flag `{other}` is not 0 or 1"))),
        });
        let yv = get(y_col);
        y.push(if yv.trim().is_empty() { f64::NAN } else { field(yv, line, "y")? });
        for &(_, c) in &features {
            f.push(field(get(c), line, &header[c])?);
        }
        for &c in &covs {
            x.push(field(get(c), line, &header[c])?);
        }
        if let Some(c) = yhat_col {
            yhat.push(field(get(c), line, "yhat")?);
        }
    }
    let n = labeled.len();
    let features = DMatrix::from_row_slice(n, features.len(), &f);
    let covariates = DMatrix::from_row_slice(n, covs.len(), &x);
    let names = covs.iter().map(|&c| header[c].clone()).collect();
    let data = Dataset::new(features, covariates, names, DVector::from_vec(y), labeled)?;
    match yhat_col {
        Some(_) => Ok(data.with_proxy(DVector::from_vec(yhat))?),
        None => Ok(data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let features = DMatrix::from_fn(5, 3, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0));
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 0 { (i % 2) as f64 } else { -1e-300 * i as f64 });
        let y = DVector::from_vec(vec![0.1, 1.0 / 3.0, f64::NAN, -0.0, 7e21]);
        let labeled = vec![true, true, false, true, true];
        let data = Dataset::new(features, x, vec!["x".into(), "x2".into()], y, labeled).unwrap();
        let yhat = DVector::from_fn(5, |i, _| i as f64 * 0.7);
        let bytes = write_csv(&data, Some(&yhat)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, &bytes).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.features, data.features);
        assert_eq!(back.covariates, data.covariates);
        assert_eq!(back.covariate_names, data.covariate_names);
        assert_eq!(back.labeled, data.labeled);
        assert_eq!(back.proxy.as_ref(), Some(&yhat));
        for i in 0..5 {
            let (a, b) = (back.outcome[i], data.outcome[i]);
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn bad_rows_are_reported_with_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "id,y,x,f1,labeled_flag\n0,1,0,0.5,1\n1,1,zz,0.2,1\n").unwrap();
        match read_csv(&path) {
            Err(CliError::Validation(m)) => assert!(m[0].contains("line 3"), "{m:?}"),
            other => panic!("{other:?}"),
        }
    }
}
