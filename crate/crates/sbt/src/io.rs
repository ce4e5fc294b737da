//! Dataset ingestion, model persistence, and run artifacts.
//!
//! Datasets arrive as a single headed CSV whose last column is the response
//! unless a column name is given. Inputs are min-max rescaled to the unit
//! cube and the affine map is stored with the model, so prediction grids
//! pass through the same map. Grid values outside the training range map
//! outside [0,1]; tree routing still places them in the nearest edge leaf.
//!
//! The model dump is a line-oriented text format using the tree
//! serialization from [`crate::tree`]: a file header, the rescaling map,
//! then per retained sample the sharding tree (tagged `axis=u`) followed by
//! each shard's noise level and forest. Floats print in the shortest form
//! that parses back bit-exactly, so a dump round-trips the model.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bart::{BartSample, PredictionSummary};
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::sharded::{IterationDiagnostics, SbtFit, SbtSample, SbtShardSample};
use crate::tree::RegressionTree;

pub const SPEC_VERSION: u32 = 1;

/// Per-column affine map onto [0,1]. A constant column maps to 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct Rescaler {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Rescaler {
    /// Fit the map to a raw matrix; the second value lists the indices of
    /// degenerate (constant) columns.
    pub fn fit(x: &Matrix) -> (Rescaler, Vec<usize>) {
        let d = x.n_cols();
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for i in 0..x.n_rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                lower[j] = lower[j].min(v);
                upper[j] = upper[j].max(v);
            }
        }
        let degenerate = (0..d).filter(|&j| lower[j] >= upper[j]).collect();
        (Rescaler { lower, upper }, degenerate)
    }

    pub fn d(&self) -> usize {
        self.lower.len()
    }

    pub fn apply_value(&self, col: usize, v: f64) -> f64 {
        let (lo, hi) = (self.lower[col], self.upper[col]);
        if lo >= hi {
            0.5
        } else {
            (v - lo) / (hi - lo)
        }
    }

    pub fn invert_value(&self, col: usize, u: f64) -> f64 {
        let (lo, hi) = (self.lower[col], self.upper[col]);
        if lo >= hi {
            lo
        } else {
            lo + u * (hi - lo)
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.n_cols() != self.d() {
            return Err(Error::Input(format!(
                "matrix has {} columns, rescaler expects {}",
                x.n_cols(),
                self.d()
            )));
        }
        let mut values = Vec::with_capacity(x.n_rows() * x.n_cols());
        for i in 0..x.n_rows() {
            for (j, &v) in x.row(i).iter().enumerate() {
                values.push(self.apply_value(j, v));
            }
        }
        Matrix::new(values, x.n_rows(), x.n_cols())
    }
}

/// A loaded training table: rescaled inputs, raw response, and the
/// bookkeeping needed to reuse the scaling at prediction time.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub x_names: Vec<String>,
    pub y_name: String,
    pub rescaler: Rescaler,
    /// Human-readable notes, e.g. degenerate columns; callers decide where
    /// to surface them.
    pub warnings: Vec<String>,
}

fn parse_cell(cell: &str, row: usize, name: &str) -> Result<f64> {
    cell.trim().parse().map_err(|_| {
        Error::Parse(format!(
            "data row {row}, column '{name}': could not parse '{cell}' as a number"
        ))
    })
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if names.is_empty() {
        return Err(Error::Data(format!("{}: empty header", path.display())));
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            Error::Data(format!("{}: data row {}: {e}", path.display(), r + 1))
        })?;
        if record.len() != names.len() {
            return Err(Error::Data(format!(
                "{}: data row {} has {} fields, header has {}",
                path.display(),
                r + 1,
                record.len(),
                names.len()
            )));
        }
        let mut row = Vec::with_capacity(names.len());
        for (j, cell) in record.iter().enumerate() {
            row.push(parse_cell(cell, r + 1, &names[j])?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok((names, rows))
}

/// Load a combined CSV. The response is the `y_col` column when given,
/// otherwise the last column; every other column is an input.
pub fn load_dataset(path: &Path, y_col: Option<&str>) -> Result<Dataset> {
    let (names, rows) = read_table(path)?;
    let y_idx = match y_col {
        Some(name) => names.iter().position(|n| n == name).ok_or_else(|| {
            Error::Usage(format!("response column '{name}' not found in {}", path.display()))
        })?,
        None => names.len() - 1,
    };
    if names.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need at least one input column besides the response",
            path.display()
        )));
    }

    let x_cols: Vec<usize> = (0..names.len()).filter(|&j| j != y_idx).collect();
    let mut values = Vec::with_capacity(rows.len() * x_cols.len());
    let mut y = Vec::with_capacity(rows.len());
    for row in &rows {
        for &j in &x_cols {
            values.push(row[j]);
        }
        y.push(row[y_idx]);
    }
    let raw = Matrix::new(values, rows.len(), x_cols.len())?;
    let (rescaler, degenerate) = Rescaler::fit(&raw);
    let x_names: Vec<String> = x_cols.iter().map(|&j| names[j].clone()).collect();
    let warnings = degenerate
        .iter()
        .map(|&j| format!("column '{}' is constant; all values map to 0.5", x_names[j]))
        .collect();
    Ok(Dataset {
        x: rescaler.apply(&raw)?,
        y,
        x_names,
        y_name: names[y_idx].clone(),
        rescaler,
        warnings,
    })
}

/// Load a prediction grid: a headed CSV of input columns only, in raw
/// (unscaled) units.
pub fn load_grid(path: &Path) -> Result<(Matrix, Vec<String>)> {
    let (names, rows) = read_table(path)?;
    let mut values = Vec::with_capacity(rows.len() * names.len());
    for row in &rows {
        values.extend_from_slice(row);
    }
    Ok((Matrix::new(values, rows.len(), names.len())?, names))
}

fn push_kv_line(out: &mut String, pairs: &[(&str, String)]) {
    let mut first = true;
    for (k, v) in pairs {
        if !first {
            out.push(' ');
        }
        let _ = write!(out, "{k}={v}");
        first = false;
    }
    out.push('\n');
}

fn parse_kv(line: &str, what: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for part in line.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("{what}: malformed field '{part}'")))?;
        map.insert(k.to_owned(), v.to_owned());
    }
    Ok(map)
}

fn kv_field<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str, what: &str) -> Result<T> {
    map.get(key)
        .ok_or_else(|| Error::Parse(format!("{what}: missing field '{key}'")))?
        .parse()
        .map_err(|_| Error::Parse(format!("{what}: could not parse field '{key}'")))
}

/// Serialize a fitted model and its input rescaling to text.
pub fn model_to_text(fit: &SbtFit, rescaler: &Rescaler) -> Result<String> {
    if fit.samples.is_empty() {
        return Err(Error::Input("refusing to dump a model with no samples".into()));
    }
    let mut out = String::new();
    push_kv_line(
        &mut out,
        &[("model", "bart".into()), ("spec_version", SPEC_VERSION.to_string())],
    );
    push_kv_line(
        &mut out,
        &[
            ("offset", fit.offset.to_string()),
            ("tau", fit.tau.to_string()),
            ("lambda", fit.lambda.to_string()),
            ("samples", fit.samples.len().to_string()),
        ],
    );
    push_kv_line(&mut out, &[("rescale", rescaler.d().to_string())]);
    for j in 0..rescaler.d() {
        let _ = writeln!(out, "{} {}", rescaler.lower[j], rescaler.upper[j]);
    }
    for sample in &fit.samples {
        let leaves = sample.sharding.leaves();
        if leaves.len() != sample.shards.len() {
            return Err(Error::State(format!(
                "sample has {} shards for {} sharding leaves",
                sample.shards.len(),
                leaves.len()
            )));
        }
        push_kv_line(&mut out, &[("sample", "".into()), ("shards", leaves.len().to_string())]);
        out.push_str("sharding axis=u\n");
        out.push_str(&sample.sharding.to_text()?);
        for (&leaf, shard) in leaves.iter().zip(&sample.shards) {
            if shard.leaf != leaf {
                return Err(Error::State(
                    "shard order disagrees with sharding-leaf order".into(),
                ));
            }
            push_kv_line(
                &mut out,
                &[
                    ("shard", "".into()),
                    ("n", shard.n_b.to_string()),
                    ("sigma2", shard.model.sigma2.to_string()),
                    ("trees", shard.model.trees.len().to_string()),
                ],
            );
            for tree in &shard.model.trees {
                out.push_str(&tree.to_text()?);
            }
        }
    }
    Ok(out)
}

fn expect_line<'a, I: Iterator<Item = &'a str>>(lines: &mut I, what: &str) -> Result<&'a str> {
    lines
        .next()
        .ok_or_else(|| Error::Parse(format!("model text ended early, expected {what}")))
}

/// Parse a model dump produced by [`model_to_text`]. Diagnostics are not
/// persisted, so the returned fit carries none.
pub fn model_from_text(text: &str) -> Result<(SbtFit, Rescaler)> {
    let mut lines = text.lines();

    let header = parse_kv(expect_line(&mut lines, "model header")?, "model header")?;
    let model: String = kv_field(&header, "model", "model header")?;
    if model != "bart" {
        return Err(Error::Parse(format!("unsupported model tag '{model}'")));
    }
    let version: u32 = kv_field(&header, "spec_version", "model header")?;
    if version != SPEC_VERSION {
        return Err(Error::Parse(format!(
            "model spec_version {version} is not the supported {SPEC_VERSION}"
        )));
    }

    let cal = parse_kv(expect_line(&mut lines, "calibration line")?, "calibration line")?;
    let offset: f64 = kv_field(&cal, "offset", "calibration line")?;
    let tau: f64 = kv_field(&cal, "tau", "calibration line")?;
    let lambda: f64 = kv_field(&cal, "lambda", "calibration line")?;
    let n_samples: usize = kv_field(&cal, "samples", "calibration line")?;

    let res = parse_kv(expect_line(&mut lines, "rescale header")?, "rescale header")?;
    let d: usize = kv_field(&res, "rescale", "rescale header")?;
    let mut lower = Vec::with_capacity(d);
    let mut upper = Vec::with_capacity(d);
    for j in 0..d {
        let line = expect_line(&mut lines, "rescale bounds")?;
        let mut parts = line.split_whitespace();
        let (lo, hi) = (parts.next(), parts.next());
        let (Some(lo), Some(hi), None) = (lo, hi, parts.next()) else {
            return Err(Error::Parse(format!("rescale line {j} malformed: '{line}'")));
        };
        lower.push(lo.parse().map_err(|_| {
            Error::Parse(format!("rescale line {j}: bad lower bound '{lo}'"))
        })?);
        upper.push(hi.parse().map_err(|_| {
            Error::Parse(format!("rescale line {j}: bad upper bound '{hi}'"))
        })?);
    }
    let rescaler = Rescaler { lower, upper };

    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let what = format!("sample {s} header");
        let head = parse_kv(expect_line(&mut lines, &what)?, &what)?;
        if !head.contains_key("sample") {
            return Err(Error::Parse(format!("{what}: expected a sample line")));
        }
        let n_shards: usize = kv_field(&head, "shards", &what)?;

        let tag = expect_line(&mut lines, "sharding tag")?;
        if tag.trim() != "sharding axis=u" {
            return Err(Error::Parse(format!("expected sharding tag, got '{tag}'")));
        }
        let sharding = RegressionTree::parse_from_lines(&mut lines)?;
        let leaves = sharding.leaves();
        if leaves.len() != n_shards {
            return Err(Error::Parse(format!(
                "sample {s}: sharding tree has {} leaves but {} shards declared",
                leaves.len(),
                n_shards
            )));
        }

        let mut shards = Vec::with_capacity(n_shards);
        for (b, &leaf) in leaves.iter().enumerate() {
            let what = format!("sample {s} shard {b} header");
            let head = parse_kv(expect_line(&mut lines, &what)?, &what)?;
            if !head.contains_key("shard") {
                return Err(Error::Parse(format!("{what}: expected a shard line")));
            }
            let n_b: usize = kv_field(&head, "n", &what)?;
            let sigma2: f64 = kv_field(&head, "sigma2", &what)?;
            let n_trees: usize = kv_field(&head, "trees", &what)?;
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                trees.push(RegressionTree::parse_from_lines(&mut lines)?);
            }
            shards.push(SbtShardSample { leaf, n_b, model: BartSample { trees, sigma2 } });
        }
        samples.push(SbtSample { sharding, shards });
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::Parse("trailing content after the last sample".into()));
    }
    let fit = SbtFit { samples, offset, tau, lambda, diagnostics: Vec::new() };
    Ok((fit, rescaler))
}

pub fn write_model(path: &Path, fit: &SbtFit, rescaler: &Rescaler) -> Result<()> {
    std::fs::write(path, model_to_text(fit, rescaler)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<(SbtFit, Rescaler)> {
    let text = std::fs::read_to_string(path)?;
    model_from_text(&text)
}

/// Everything needed to audit or rerun a fit, stored alongside the model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub spec_version: u32,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub x_names: Vec<String>,
    pub y_name: String,
    pub ntree: usize,
    pub numcut: usize,
    pub shardepth: usize,
    pub shardpsplit: f64,
    pub n_min: usize,
    pub min_leaf: usize,
    pub randshard: bool,
    pub n_mcmc: usize,
    pub burn: usize,
    pub sigma: Option<f64>,
    pub split_alpha: f64,
    pub pbd: (f64, f64),
    pub probchv: f64,
    pub tc: usize,
    /// Shard sizes of each retained sample, in sharding-leaf order.
    pub shard_sizes_per_sample: Vec<Vec<usize>>,
    /// Accepted sharding-tree moves over iterations that proposed one.
    pub tu_accept_rate: Option<f64>,
    /// Accepted tree-structure proposals over all proposals made.
    pub tree_accept_rate: f64,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::State(format!("manifest serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))
}

/// Accept rates for the manifest, computed from per-iteration diagnostics.
pub fn accept_rates(diagnostics: &[IterationDiagnostics], m: usize) -> (Option<f64>, f64) {
    let proposed: usize = diagnostics.iter().filter(|d| d.tu_accepted.is_some()).count();
    let tu = if proposed == 0 {
        None
    } else {
        let accepted = diagnostics
            .iter()
            .filter(|d| d.tu_accepted == Some(true))
            .count();
        Some(accepted as f64 / proposed as f64)
    };
    let mut accepted = 0u64;
    let mut total = 0u64;
    for diag in diagnostics {
        accepted += diag.tree_accepts.iter().map(|&a| a as u64).sum::<u64>();
        total += (diag.tree_accepts.len() * m) as u64;
    }
    let tree = if total == 0 { 0.0 } else { accepted as f64 / total as f64 };
    (tu, tree)
}

/// Long-format CSV of per-iteration diagnostics: one row per
/// (iteration, shard).
pub fn diagnostics_to_csv(diagnostics: &[IterationDiagnostics]) -> String {
    let mut out = String::from("iteration,tu_accepted,shard,shard_size,tree_moves_accepted\n");
    for diag in diagnostics {
        let tu = match diag.tu_accepted {
            None => String::new(),
            Some(a) => u8::from(a).to_string(),
        };
        for (b, (&size, &acc)) in diag.shard_sizes.iter().zip(&diag.tree_accepts).enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", diag.iteration, tu, b, size, acc);
        }
    }
    out
}

/// CSV of per-point posterior predictive summaries.
pub fn predictions_to_csv(predictions: &[PredictionSummary]) -> String {
    let mut out = String::from("mean,lo95,hi95\n");
    for p in predictions {
        let _ = writeln!(out, "{},{},{}", p.mean, p.lo, p.hi);
    }
    out
}
