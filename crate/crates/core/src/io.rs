//! On-disk formats: dataset directories (meta.json plus per-trial CSV files)
//! and model checkpoints (model.json). All floats are printed with 17
//! significant digits so values round-trip exactly and outputs are
//! byte-stable.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PdldsError, Result};
use crate::model::{Dataset, ModelParameters, Trial, TrialTruth};

/// 17-significant-digit decimal form; round-trips any finite f64.
pub fn format_float17(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path, source: std::io::Error) -> PdldsError {
    PdldsError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, detail: impl ToString) -> PdldsError {
    PdldsError::Parse { path: path.display().to_string(), detail: detail.to_string() }
}

/// Dataset-level metadata stored in `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Observation dimension.
    pub m: usize,
    /// True latent dimension of the generator.
    pub n_true: usize,
    /// True number of regimes of the generator.
    pub k_true: usize,
    pub sample_rate: f64,
    /// Echo of the generator configuration.
    pub generator: serde_json::Value,
}

/// Writes `meta.json` and one `trial_<i>.csv` per trial into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&meta_path, meta_json + "\n").map_err(|e| io_err(&meta_path, e))?;

    for (i, trial) in data.trials.iter().enumerate() {
        let path = dir.join(format!("trial_{i}.csv"));
        let mut out = String::new();
        let m = trial.obs.ncols();
        out.push('t');
        for j in 0..m {
            out.push_str(&format!(",y_{j}"));
        }
        if let Some(truth) = &trial.truth {
            for j in 0..truth.latents.ncols() {
                out.push_str(&format!(",x_{j}"));
            }
            out.push_str(",z,tau");
        }
        out.push('\n');
        for t in 0..trial.obs.nrows() {
            out.push_str(&t.to_string());
            for j in 0..m {
                out.push(',');
                out.push_str(&format_float17(trial.obs[(t, j)]));
            }
            if let Some(truth) = &trial.truth {
                for j in 0..truth.latents.ncols() {
                    out.push(',');
                    out.push_str(&format_float17(truth.latents[(t, j)]));
                }
                out.push_str(&format!(",{}", truth.switch_labels[t]));
                out.push(',');
                out.push_str(&format_float17(truth.speeds[t]));
            }
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta_path = dir.join("meta.json");
    let meta_raw = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_raw).map_err(|e| parse_err(&meta_path, e))?;

    let mut trials = Vec::new();
    for i in 0.. {
        let path = dir.join(format!("trial_{i}.csv"));
        if !path.exists() {
            break;
        }
        trials.push(read_trial_csv(&path)?);
    }
    if trials.is_empty() {
        return Err(parse_err(dir, "no trial_<i>.csv files found"));
    }
    let data = Dataset::new(trials, meta.sample_rate)?;
    if data.obs_dim() != Some(meta.m) {
        return Err(parse_err(dir, format!("meta.m = {} but trials have M = {:?}", meta.m, data.obs_dim())));
    }
    Ok((data, meta))
}

fn read_trial_csv(path: &Path) -> Result<Trial> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = raw.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") {
        return Err(parse_err(path, "header must start with 't'"));
    }
    let m = cols.iter().filter(|c| c.starts_with("y_")).count();
    let n = cols.iter().filter(|c| c.starts_with("x_")).count();
    let has_truth = n > 0;
    if has_truth && (!cols.contains(&"z") || !cols.contains(&"tau")) {
        return Err(parse_err(path, "truth columns require z and tau"));
    }
    let expected_cols = 1 + m + if has_truth { n + 2 } else { 0 };
    if cols.len() != expected_cols {
        return Err(parse_err(path, format!("expected {expected_cols} columns, found {}", cols.len())));
    }

    let mut obs_rows: Vec<Vec<f64>> = Vec::new();
    let mut latent_rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut speeds: Vec<f64> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(parse_err(path, format!("row {lineno}: expected {expected_cols} fields")));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| parse_err(path, format!("row {lineno}: {e}")))
        };
        let mut y = Vec::with_capacity(m);
        for j in 0..m {
            y.push(parse_f(fields[1 + j])?);
        }
        obs_rows.push(y);
        if has_truth {
            let mut x = Vec::with_capacity(n);
            for j in 0..n {
                x.push(parse_f(fields[1 + m + j])?);
            }
            latent_rows.push(x);
            labels.push(
                fields[1 + m + n]
                    .parse::<i64>()
                    .map_err(|e| parse_err(path, format!("row {lineno}: z: {e}")))?,
            );
            speeds.push(parse_f(fields[1 + m + n + 1])?);
        }
    }
    let t_len = obs_rows.len();
    let obs = DMatrix::from_fn(t_len, m, |i, j| obs_rows[i][j]);
    let truth = if has_truth {
        Some(TrialTruth {
            latents: DMatrix::from_fn(t_len, n, |i, j| latent_rows[i][j]),
            switch_labels: labels,
            speeds,
        })
    } else {
        None
    };
    Ok(Trial { obs, truth })
}

/// Which model produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pdlds,
    Dlds,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Pdlds => "pdlds",
            ModelKind::Dlds => "dlds",
        }
    }
}

/// A saved model: parameters, the configuration echo, and the seed.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub params: ModelParameters,
    pub config: serde_json::Value,
    pub seed: u64,
}

fn json_matrix(m: &DMatrix<f64>) -> String {
    // Row-major nested arrays.
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let cells: Vec<String> = (0..m.ncols()).map(|j| format_float17(m[(i, j)])).collect();
            format!("[{}]", cells.join(","))
        })
        .collect();
    format!("[{}]", rows.join(","))
}

fn json_vector(v: &DVector<f64>) -> String {
    let cells: Vec<String> = v.iter().map(|x| format_float17(*x)).collect();
    format!("[{}]", cells.join(","))
}

/// Serializes a checkpoint with deterministic field order and full-precision
/// floats.
pub fn checkpoint_to_json(ck: &Checkpoint) -> String {
    let p = &ck.params;
    let ops: Vec<String> = p.dynamic_operators.iter().map(json_matrix).collect();
    format!(
        concat!(
            "{{\n",
            "  \"kind\": \"{}\",\n",
            "  \"m\": {},\n",
            "  \"n\": {},\n",
            "  \"k\": {},\n",
            "  \"dynamic_operators\": [{}],\n",
            "  \"obs_matrix\": {},\n",
            "  \"obs_offset\": {},\n",
            "  \"obs_noise_var\": {},\n",
            "  \"state_noise_var\": {},\n",
            "  \"coef_smooth_var\": {},\n",
            "  \"init_state_mean\": {},\n",
            "  \"init_state_var\": {},\n",
            "  \"config\": {},\n",
            "  \"seed\": {}\n",
            "}}\n"
        ),
        ck.kind.as_str(),
        p.n_obs(),
        p.n_latent(),
        p.n_operators(),
        ops.join(","),
        json_matrix(&p.obs_matrix),
        json_vector(&p.obs_offset),
        json_vector(&p.obs_noise_var),
        json_vector(&p.state_noise_var),
        json_vector(&p.coef_smooth_var),
        json_vector(&p.init_state_mean),
        json_vector(&p.init_state_var),
        serde_json::to_string(&ck.config).expect("config serializes"),
        ck.seed,
    )
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint_to_json(ck)).map_err(|e| io_err(path, e))
}

fn value_to_matrix(v: &serde_json::Value, path: &Path, what: &str) -> Result<DMatrix<f64>> {
    let rows = v.as_array().ok_or_else(|| parse_err(path, format!("{what}: expected array")))?;
    let nrows = rows.len();
    let ncols = rows
        .first()
        .and_then(|r| r.as_array())
        .map(|r| r.len())
        .ok_or_else(|| parse_err(path, format!("{what}: expected nested array")))?;
    let mut out = DMatrix::<f64>::zeros(nrows, ncols);
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_array().ok_or_else(|| parse_err(path, format!("{what}: ragged rows")))?;
        if row.len() != ncols {
            return Err(parse_err(path, format!("{what}: ragged rows")));
        }
        for (j, cell) in row.iter().enumerate() {
            out[(i, j)] = cell.as_f64().ok_or_else(|| parse_err(path, format!("{what}: non-numeric cell")))?;
        }
    }
    Ok(out)
}

fn value_to_vector(v: &serde_json::Value, path: &Path, what: &str) -> Result<DVector<f64>> {
    let cells = v.as_array().ok_or_else(|| parse_err(path, format!("{what}: expected array")))?;
    let mut out = DVector::<f64>::zeros(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        out[i] = cell.as_f64().ok_or_else(|| parse_err(path, format!("{what}: non-numeric cell")))?;
    }
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&raw).map_err(|e| parse_err(path, e))?;
    let kind = match v.get("kind").and_then(|k| k.as_str()) {
        Some("pdlds") => ModelKind::Pdlds,
        Some("dlds") => ModelKind::Dlds,
        other => return Err(parse_err(path, format!("unknown kind {other:?}"))),
    };
    let field = |name: &str| -> Result<&serde_json::Value> {
        v.get(name).ok_or_else(|| parse_err(path, format!("missing field {name}")))
    };
    let ops_value = field("dynamic_operators")?
        .as_array()
        .ok_or_else(|| parse_err(path, "dynamic_operators: expected array"))?;
    let dynamic_operators = ops_value
        .iter()
        .map(|m| value_to_matrix(m, path, "dynamic_operators"))
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParameters::new(
        dynamic_operators,
        value_to_matrix(field("obs_matrix")?, path, "obs_matrix")?,
        value_to_vector(field("obs_offset")?, path, "obs_offset")?,
        value_to_vector(field("obs_noise_var")?, path, "obs_noise_var")?,
        value_to_vector(field("state_noise_var")?, path, "state_noise_var")?,
        value_to_vector(field("coef_smooth_var")?, path, "coef_smooth_var")?,
        value_to_vector(field("init_state_mean")?, path, "init_state_mean")?,
        value_to_vector(field("init_state_var")?, path, "init_state_var")?,
    )?;
    let seed = field("seed")?.as_u64().ok_or_else(|| parse_err(path, "seed must be unsigned"))?;
    Ok(Checkpoint { kind, params, config: field("config")?.clone(), seed })
}
