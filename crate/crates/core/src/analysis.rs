//! Gradient agreement, accuracy and the JSONL metrics stream.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::ModelBundle;
use crate::optim::StepReport;
use crate::tensor::{dot, GradientMap, ParamId, ParamStore};

/// Norms below this make the cosine undefined.
pub const COSINE_NORM_FLOOR: f64 = 1e-15;

/// Inner products of two gradients over the extractor's groups.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradDot {
    pub per_group: Vec<f64>,
    /// Sum of the per-group products.
    pub total: f64,
    /// `total / (|a| |b|)`, or `None` when either norm is below
    /// [`COSINE_NORM_FLOOR`].
    pub cos: Option<f64>,
}

/// Per-group and total inner product of `a` and `b`, each group flattened in
/// the order of its ids. Both maps must cover every grouped id.
pub fn grad_dot(a: &GradientMap, b: &GradientMap, groups: &[Vec<ParamId>], store: &ParamStore) -> Result<GradDot> {
    for &id in groups.iter().flatten() {
        if !a.contains(id) || !b.contains(id) {
            return Err(Error::Contract(format!("gradient missing for `{}`", store.name(id))));
        }
    }
    let mut per_group = Vec::with_capacity(groups.len());
    let (mut na, mut nb) = (0.0, 0.0);
    for group in groups {
        let fa = a.flatten(group, store);
        let fb = b.flatten(group, store);
        per_group.push(dot(&fa, &fb));
        na += dot(&fa, &fa);
        nb += dot(&fb, &fb);
    }
    let total: f64 = per_group.iter().sum();
    let (na, nb) = (na.sqrt(), nb.sqrt());
    let cos = if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        None
    } else {
        Some((total / (na * nb)).clamp(-1.0, 1.0))
    };
    Ok(GradDot { per_group, total, cos })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &crate::tensor::Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("accuracy", format!("{} rows for {} labels", logits.rows(), labels.len())));
    }
    let hits = (0..labels.len()).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Classification accuracy of `C(G(x))` on a dataset.
pub fn evaluate(model: &ModelBundle, dataset: &Dataset) -> Result<f64> {
    accuracy(&model.logits(dataset.features())?, dataset.labels())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_dom_cls")]
    pub dom_cls: Option<f64>,
    #[serde(rename = "L_dom")]
    pub dom: f64,
    #[serde(rename = "L_beta")]
    pub beta: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub losses: Losses,
    pub grad_dot_total: f64,
    pub grad_cos: Option<f64>,
    pub grad_dot_per_group: Vec<f64>,
    pub beta: Vec<f64>,
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
    /// Wall-clock time since the run started; `None` unless requested, so
    /// that reruns produce identical files.
    pub wallclock_ms: Option<f64>,
    /// Present (and `true`) only on steps where discriminator outputs were
    /// clamped before the log.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

impl MetricsRecord {
    pub fn from_step(iteration: usize, report: &StepReport) -> Self {
        MetricsRecord {
            iteration,
            losses: Losses {
                cls: report.l_cls,
                dom_cls: report.l_dom_cls,
                dom: report.l_dom,
                beta: report.l_beta,
                total: report.l_total,
            },
            grad_dot_total: report.agreement.total,
            grad_cos: report.agreement.cos,
            grad_dot_per_group: report.agreement.per_group.clone(),
            beta: report.beta.clone(),
            source_acc: None,
            target_acc: None,
            wallclock_ms: None,
            clamped: report.clamped,
        }
    }
}

/// JSON formatter that writes every float with 17 significant digits.
#[derive(Clone, Copy, Debug, Default)]
pub struct PreciseFloats;

impl serde_json::ser::Formatter for PreciseFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Compact JSON with [`PreciseFloats`]; non-finite floats become `null`.
pub fn to_precise_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFloats);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Appends records to a JSONL file, flushing after each line.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut line = to_precise_json(record)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes one record; see [`MetricsWriter`] for streams.
pub fn record_metrics(writer: &mut MetricsWriter, record: &MetricsRecord) -> Result<()> {
    writer.write(record)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub final_target_acc: Option<f64>,
    pub mean_grad_cos: Option<f64>,
    pub steps: usize,
    pub aborted: bool,
}

/// Mean of the defined cosines in a metrics stream.
pub fn mean_grad_cos(records: &[MetricsRecord]) -> Option<f64> {
    let cos: Vec<f64> = records.iter().filter_map(|r| r.grad_cos).collect();
    (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64)
}
