//! Core value types and the directory-based exchange formats.
//!
//! An activation set lives in a directory holding three files:
//!
//! ```text
//! manifest.json    {"model", "layer", "dim", "count", "dtype": "f32", "byte_order": "little"}
//! activations.bin  count*dim f32, row-major, little-endian, no header
//! steps.jsonl      one StepRecord per line, line i <-> row i
//! ```
//!
//! An SAE checkpoint is `sae.json` (`d`, `D`, `lambda`, `trained_steps`) plus
//! `sae.bin` holding W_enc (d x D), b_enc (D), W_dec (D x d), b_dec (d).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ACTIVATIONS_FILE: &str = "activations.bin";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const SAE_META_FILE: &str = "sae.json";
pub const SAE_BIN_FILE: &str = "sae.bin";

/// Behavior label of a reasoning step. Unlabeled steps carry an explicit tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Reflection,
    Backtracking,
    Others,
    Unlabeled,
}

impl Label {
    pub const ALL: [Label; 4] = [
        Label::Reflection,
        Label::Backtracking,
        Label::Others,
        Label::Unlabeled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Reflection => "reflection",
            Label::Backtracking => "backtracking",
            Label::Others => "others",
            Label::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::validation("label", format!("unknown label {s:?}")))
    }
}

/// One reasoning step of one sampled response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub sample_id: String,
    pub step_index: usize,
    pub text: String,
    pub label: Label,
    pub response_length_tokens: usize,
}

impl StepRecord {
    pub fn unlabeled(sample_id: impl Into<String>, step_index: usize) -> Self {
        StepRecord {
            sample_id: sample_id.into(),
            step_index,
            text: String::new(),
            label: Label::Unlabeled,
            response_length_tokens: 0,
        }
    }
}

/// Checks that every sample's step indices are exactly `0..n`.
pub fn check_step_indices(records: &[StepRecord]) -> Result<()> {
    let mut by_sample: HashMap<&str, Vec<usize>> = HashMap::new();
    for r in records {
        by_sample
            .entry(&r.sample_id)
            .or_default()
            .push(r.step_index);
    }
    for (sample, mut idx) in by_sample {
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(i, &s)| i != s) {
            return Err(Error::validation(
                "step_index",
                format!("steps of sample {sample:?} are not a contiguous range from 0"),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    model: String,
    layer: usize,
    dim: usize,
    count: usize,
    dtype: String,
    byte_order: String,
}

/// Step-level activations of one layer, aligned row-for-row with step records.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub model_name: String,
    pub layer_index: usize,
    pub dim: usize,
    pub count: usize,
    /// `count x dim`, row-major.
    pub data: Array2<f32>,
    pub records: Vec<StepRecord>,
}

impl ActivationSet {
    /// Builds a set from a matrix and its records, taking `dim`/`count` from the matrix.
    pub fn new(
        model_name: impl Into<String>,
        layer_index: usize,
        data: Array2<f32>,
        records: Vec<StepRecord>,
    ) -> Result<Self> {
        let set = ActivationSet {
            model_name: model_name.into(),
            layer_index,
            dim: data.ncols(),
            count: data.nrows(),
            data,
            records,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("dim", "must be positive"));
        }
        if self.count == 0 {
            return Err(Error::validation("count", "must be positive"));
        }
        if self.data.ncols() != self.dim {
            return Err(Error::validation(
                "dim",
                format!(
                    "manifest says {} but matrix has {} columns",
                    self.dim,
                    self.data.ncols()
                ),
            ));
        }
        if self.data.nrows() != self.count {
            return Err(Error::validation(
                "count",
                format!(
                    "count is {} but matrix has {} rows",
                    self.count,
                    self.data.nrows()
                ),
            ));
        }
        if self.records.len() != self.count {
            return Err(Error::validation(
                "records",
                format!("{} records for count {}", self.records.len(), self.count),
            ));
        }
        if let Some(row) = first_non_finite_row(&self.data) {
            return Err(Error::NonFiniteRow { row });
        }
        check_step_indices(&self.records)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Rows widened to f64.
    pub fn data_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }
}

fn first_non_finite_row(data: &Array2<f32>) -> Option<usize> {
    data.rows()
        .into_iter()
        .position(|row| row.iter().any(|v| !v.is_finite()))
}

/// Writes `manifest.json`, `activations.bin` and `steps.jsonl` into `dir`.
pub fn write_activation_set(set: &ActivationSet, dir: &Path) -> Result<()> {
    set.validate()?;
    io::ensure_dir(dir)?;
    let manifest = Manifest {
        model: set.model_name.clone(),
        layer: set.layer_index,
        dim: set.dim,
        count: set.count,
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    io::write_bytes(
        &dir.join(ACTIVATIONS_FILE),
        &io::f32_to_le_bytes(set.data.iter().copied()),
    )?;
    io::write_jsonl(&dir.join(STEPS_FILE), &set.records)
}

pub fn read_activation_set(dir: &Path) -> Result<ActivationSet> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.dtype != "f32" {
        return Err(Error::validation(
            "dtype",
            format!("unsupported {:?}", manifest.dtype),
        ));
    }
    if manifest.byte_order != "little" {
        return Err(Error::validation(
            "byte_order",
            format!("unsupported {:?}", manifest.byte_order),
        ));
    }
    let values = io::read_f32_file(&dir.join(ACTIVATIONS_FILE), manifest.count * manifest.dim)?;
    let data = Array2::from_shape_vec((manifest.count, manifest.dim), values)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let records: Vec<StepRecord> = io::read_jsonl(&dir.join(STEPS_FILE))?;
    let set = ActivationSet {
        model_name: manifest.model,
        layer_index: manifest.layer,
        dim: manifest.dim,
        count: manifest.count,
        data,
        records,
    };
    set.validate()?;
    Ok(set)
}

/// ReLU sparse autoencoder weights.
///
/// `w_enc` is `d x D`, `w_dec` is `D x d`; row `j` of `w_dec` is the dictionary
/// atom of latent `j` in activation space.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub w_enc: Array2<f32>,
    pub b_enc: Array1<f32>,
    pub w_dec: Array2<f32>,
    pub b_dec: Array1<f32>,
    pub lambda: f64,
    pub trained_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SaeMeta {
    d: usize,
    #[serde(rename = "D")]
    hidden: usize,
    lambda: f64,
    trained_steps: u64,
}

impl SaeModel {
    /// Input dimension `d`.
    pub fn input_dim(&self) -> usize {
        self.w_enc.nrows()
    }

    /// Hidden width `D`.
    pub fn hidden_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, hidden) = self.w_enc.dim();
        if d == 0 || hidden == 0 {
            return Err(Error::validation("d/D", "dimensions must be positive"));
        }
        if self.b_enc.len() != hidden {
            return Err(Error::validation(
                "b_enc",
                format!("length {} != D={hidden}", self.b_enc.len()),
            ));
        }
        if self.w_dec.dim() != (hidden, d) {
            return Err(Error::validation(
                "W_dec",
                format!("shape {:?} != ({hidden}, {d})", self.w_dec.dim()),
            ));
        }
        if self.b_dec.len() != d {
            return Err(Error::validation(
                "b_dec",
                format!("length {} != d={d}", self.b_dec.len()),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::validation(
                "lambda",
                "must be finite and nonnegative",
            ));
        }
        let tensors = [
            ("W_enc", self.w_enc.iter().all(|v| v.is_finite())),
            ("b_enc", self.b_enc.iter().all(|v| v.is_finite())),
            ("W_dec", self.w_dec.iter().all(|v| v.is_finite())),
            ("b_dec", self.b_dec.iter().all(|v| v.is_finite())),
        ];
        for (name, ok) in tensors {
            if !ok {
                return Err(Error::validation(name, "contains non-finite values"));
            }
        }
        Ok(())
    }

    /// Rescales every decoder row to unit norm and compensates in the encoder,
    /// so reconstructions are unchanged up to rounding.
    pub fn export_for_steering(&self) -> Result<SaeModel> {
        let mut out = self.clone();
        for (j, mut row) in out.w_dec.rows_mut().into_iter().enumerate() {
            let norm = row
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroColumn { index: j });
            }
            row.mapv_inplace(|v| (f64::from(v) / norm) as f32);
            out.w_enc
                .column_mut(j)
                .mapv_inplace(|v| (f64::from(v) * norm) as f32);
            out.b_enc[j] = (f64::from(out.b_enc[j]) * norm) as f32;
        }
        Ok(out)
    }
}

pub fn save_sae(model: &SaeModel, dir: &Path) -> Result<()> {
    model.validate()?;
    io::ensure_dir(dir)?;
    let meta = SaeMeta {
        d: model.input_dim(),
        hidden: model.hidden_dim(),
        lambda: model.lambda,
        trained_steps: model.trained_steps,
    };
    io::write_json(&dir.join(SAE_META_FILE), &meta)?;
    let payload = model
        .w_enc
        .iter()
        .chain(model.b_enc.iter())
        .chain(model.w_dec.iter())
        .chain(model.b_dec.iter())
        .copied();
    io::write_bytes(&dir.join(SAE_BIN_FILE), &io::f32_to_le_bytes(payload))
}

pub fn load_sae(dir: &Path) -> Result<SaeModel> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(dir.to_path_buf()));
    }
    let meta: SaeMeta = io::read_json(&dir.join(SAE_META_FILE))?;
    let (d, hidden) = (meta.d, meta.hidden);
    let total = d * hidden + hidden + hidden * d + d;
    let values = io::read_f32_file(&dir.join(SAE_BIN_FILE), total)?;
    let (w_enc, rest) = values.split_at(d * hidden);
    let (b_enc, rest) = rest.split_at(hidden);
    let (w_dec, b_dec) = rest.split_at(hidden * d);
    let shape_err = |e: ndarray::ShapeError| Error::Dimension(e.to_string());
    let model = SaeModel {
        w_enc: Array2::from_shape_vec((d, hidden), w_enc.to_vec()).map_err(shape_err)?,
        b_enc: Array1::from(b_enc.to_vec()),
        w_dec: Array2::from_shape_vec((hidden, d), w_dec.to_vec()).map_err(shape_err)?,
        b_dec: Array1::from(b_dec.to_vec()),
        lambda: meta.lambda,
        trained_steps: meta.trained_steps,
    };
    model.validate()?;
    Ok(model)
}
