//! Synthetic domain-shift datasets, CSV input and paired minibatches.
//!
//! Target-domain labels are kept on [`Dataset`] for evaluation only. The
//! batches handed to training steps ([`PairedBatch`]) carry target features
//! and nothing else.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    domain: Domain,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, domain: Domain) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape("dataset", "features must be an N x d matrix"));
        }
        if labels.len() != features.rows() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("label", format!("{bad} not in [0, {classes})")));
        }
        if !features.is_finite() {
            return Err(Error::invalid("features", "non-finite feature value"));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Ground-truth labels. For target data these exist for evaluation only.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn with_features(&self, features: Tensor) -> Result<Dataset> {
        Dataset::new(features, self.labels.clone(), self.classes, self.domain)
    }
}

/// Raw two-moons sample: `n` points, labels alternating 0/1, positions drawn
/// along the half circles with Gaussian noise.
pub fn two_moons_raw(n: usize, noise_std: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid("noise_std", e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let label = i % 2;
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        data.push(x + noise.sample(rng));
        data.push(y + noise.sample(rng));
        labels.push(label);
    }
    Ok((Tensor::matrix(n, 2, data)?, labels))
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream of the seed's generator used for the target-domain draw.
pub const TARGET_STREAM: u64 = 1;

/// Source: two moons. Target: an independent two-moons draw from the same
/// seed (stream [`TARGET_STREAM`]), rotated by `rotation_deg` about the
/// origin, then translated.
pub fn gen_two_moons(
    n_per_domain: usize,
    noise_std: f64,
    rotation_deg: f64,
    translation: [f64; 2],
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_per_domain < 2 {
        return Err(Error::invalid("n_per_domain", "need at least 2 points"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std", "must be >= 0"));
    }
    let (xs, ys) = two_moons_raw(n_per_domain, noise_std, &mut rng_stream(seed, 0))?;
    let (xt, yt) = two_moons_raw(n_per_domain, noise_std, &mut rng_stream(seed, TARGET_STREAM))?;
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let moved: Vec<f64> = xt
        .data()
        .chunks(2)
        .flat_map(|p| {
            [
                cos * p[0] - sin * p[1] + translation[0],
                sin * p[0] + cos * p[1] + translation[1],
            ]
        })
        .collect();
    let source = Dataset::new(xs, ys, 2, Domain::Source)?;
    let target = Dataset::new(Tensor::matrix(n_per_domain, 2, moved)?, yt, 2, Domain::Target)?;
    Ok((source, target))
}

/// Class means of [`gen_gaussian_shift`]: random unit directions scaled by
/// `class_sep`.
pub fn gaussian_class_means(classes: usize, dim: usize, class_sep: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_stream(seed, 2);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| class_sep * x / norm).collect()
        })
        .collect()
}

/// `classes` unit-variance Gaussian clusters of total size `n` per domain;
/// the target shifts every class mean by `mean_shift` along every axis.
/// Labels are balanced to within one.
pub fn gen_gaussian_shift(
    n: usize,
    classes: usize,
    dim: usize,
    class_sep: f64,
    mean_shift: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 || dim < 1 || n < 1 {
        return Err(Error::invalid("gaussian_shift", "need classes >= 2, dim >= 1, n >= 1"));
    }
    let means = gaussian_class_means(classes, dim, class_sep, seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |stream: u64, shift: f64, domain: Domain| -> Result<Dataset> {
        let mut rng = rng_stream(seed, 3 + stream);
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(n * dim);
        for &l in &labels {
            for m in &means[l] {
                data.push(m + shift + normal.sample(&mut rng));
            }
        }
        Dataset::new(Tensor::matrix(n, dim, data)?, labels, classes, domain)
    };
    Ok((draw(0, 0.0, Domain::Source)?, draw(1, mean_shift, Domain::Target)?))
}

fn data_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads `feature_0,...,feature_{d-1},label,domain`. All rows must belong to
/// one domain. With `classes = None` the class count is `max(label) + 1`
/// (at least 2).
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| data_err(path, format!("cannot open: {e}")))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| data_err(path, format!("bad header: {e}")))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 {
        return Err(data_err(path, "header needs feature_0, label and domain columns"));
    }
    let d = cols.len() - 2;
    for (i, name) in cols[..d].iter().enumerate() {
        if *name != format!("feature_{i}") {
            return Err(data_err(path, format!("column {i} must be `feature_{i}`, found `{name}`")));
        }
    }
    if cols[d] != "label" {
        return Err(data_err(path, format!("missing column `label` (found `{}`)", cols[d])));
    }
    if cols[d + 1] != "domain" {
        return Err(data_err(path, format!("missing column `domain` (found `{}`)", cols[d + 1])));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domain = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(path, format!("row {row}: {e}")))?;
        if record.len() != d + 2 {
            return Err(data_err(path, format!("row {row}: expected {} fields, got {}", d + 2, record.len())));
        }
        for field in record.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| data_err(path, format!("row {row}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(data_err(path, format!("row {row}: non-finite feature `{field}`")));
            }
            data.push(v);
        }
        let label: usize = record[d]
            .trim()
            .parse()
            .map_err(|_| data_err(path, format!("row {row}: label `{}` is not a nonnegative integer", &record[d])))?;
        if let Some(k) = classes {
            if label >= k {
                return Err(data_err(path, format!("row {row}: label {label} out of range [0, {k})")));
            }
        }
        labels.push(label);
        let dom = match record[d + 1].trim() {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(data_err(path, format!("row {row}: unknown domain `{other}`"))),
        };
        match domain {
            None => domain = Some(dom),
            Some(prev) if prev != dom => {
                return Err(data_err(path, format!("row {row}: mixes `{}` and `{}` rows", prev.as_str(), dom.as_str())));
            }
            _ => {}
        }
    }
    let Some(domain) = domain else {
        return Err(data_err(path, "no data rows"));
    };
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    let n = labels.len();
    Dataset::new(Tensor::matrix(n, d, data)?, labels, k, domain).map_err(|e| data_err(path, e.to_string()))
}

/// Writes a dataset in the format read by [`load_csv`]; floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = (0..dataset.dim())
        .map(|i| format!("feature_{i}"))
        .chain(["label".to_string(), "domain".to_string()])
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for (i, &label) in dataset.labels().iter().enumerate() {
        let row: Vec<String> = dataset.features().row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{},{label},{}", row.join(","), dataset.domain().as_str()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Per-feature standardization fitted on source data only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(source: &Dataset) -> Self {
        let x = source.features();
        let (n, d) = (x.rows() as f64, x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..x.rows() {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..x.rows() {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        let x = dataset.features();
        let d = x.cols();
        if d != self.mean.len() {
            return Err(Error::shape("standardize", format!("{d} features, fitted on {}", self.mean.len())));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        dataset.with_features(Tensor::matrix(x.rows(), d, data)?)
    }
}

/// One training step's inputs: labelled source rows, unlabelled target rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub src_x: Tensor,
    pub src_y: Vec<usize>,
    pub tgt_x: Tensor,
}

impl PairedBatch {
    pub fn new(src_x: Tensor, src_y: Vec<usize>, tgt_x: Tensor) -> Result<Self> {
        if src_x.rows() != src_y.len() || src_y.is_empty() || tgt_x.rows() == 0 {
            return Err(Error::shape("paired_batch", "need matching, nonempty source and target rows"));
        }
        if src_x.cols() != tgt_x.cols() {
            return Err(Error::shape("paired_batch", "source and target widths differ"));
        }
        Ok(PairedBatch { src_x, src_y, tgt_x })
    }
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut c = Cursor {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let end = (self.pos + k).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    /// Takes exactly `k` indices, reshuffling and continuing on exhaustion.
    fn take_cycling(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.extend(self.take(k - out.len()));
        }
        out
    }
}

/// Seeded stream of paired batches.
///
/// An epoch is one pass over the source set in a fresh shuffled order; its
/// last batch may be short. Target rows come from an independent shuffled
/// cursor that reshuffles whenever it runs out, so the shorter domain
/// recycles. With `epochs = None` the stream never ends.
pub struct BatchIter<'a> {
    source: &'a Dataset,
    target: &'a Dataset,
    batch_size: usize,
    src: Cursor,
    tgt: Cursor,
    epochs: Option<usize>,
    epoch: usize,
}

pub fn batch_iter<'a>(
    source: &'a Dataset,
    target: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epochs: Option<usize>,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 || batch_size > source.len().min(target.len()) {
        return Err(Error::invalid(
            "batch_size",
            format!(
                "{batch_size} must lie in [1, {}] for {} source and {} target rows",
                source.len().min(target.len()),
                source.len(),
                target.len()
            ),
        ));
    }
    if source.dim() != target.dim() {
        return Err(Error::shape("batch_iter", "source and target widths differ"));
    }
    Ok(BatchIter {
        source,
        target,
        batch_size,
        src: Cursor::new(source.len(), rng_stream(seed, 10)),
        tgt: Cursor::new(target.len(), rng_stream(seed, 11)),
        epochs,
        epoch: 0,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = PairedBatch;

    fn next(&mut self) -> Option<PairedBatch> {
        if self.src.pos == self.src.order.len() {
            self.epoch += 1;
            if self.epochs.is_some_and(|e| self.epoch >= e) {
                return None;
            }
            self.src.reshuffle();
        }
        let si = self.src.take(self.batch_size);
        let ti = self.tgt.take_cycling(si.len());
        let src_y = si.iter().map(|&i| self.source.labels()[i]).collect();
        Some(PairedBatch {
            src_x: self.source.features().select_rows(&si),
            src_y,
            tgt_x: self.target.features().select_rows(&ti),
        })
    }
}
