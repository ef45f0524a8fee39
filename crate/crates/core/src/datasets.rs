//! Synthetic Gaussian-mixture classification data, stratified splits and
//! the `f0,...,f{D-1},label` CSV format.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

/// Feature matrix with integer labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    split: SplitTag,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::contract(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::contract(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!(
                "label {bad} is not below {classes}"
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split,
        }
    }

    /// Feature rows at `indices` as a matrix tensor.
    pub fn batch_features(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), self.dim, data).expect("non-empty batch")
    }

    pub fn features_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.features.clone()).expect("non-empty dataset")
    }
}

/// Parameters of the isotropic Gaussian mixture.
///
/// `spread / radius` sets the class overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub radius: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("synthetic data needs at least 2 classes"));
        }
        if self.dim == 0 || self.n_per_class == 0 {
            return Err(Error::contract(
                "dimension and samples per class must be positive",
            ));
        }
        for (name, v) in [("spread", self.spread), ("radius", self.radius)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::contract(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Class means on the sphere of radius `spec.radius`.
pub fn class_means(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::seeded(spec.seed, stream::CLASS_MEANS);
    (0..spec.classes)
        .map(|_| {
            unit_vector(&mut rng, spec.dim)
                .into_iter()
                .map(|x| x * spec.radius)
                .collect()
        })
        .collect()
}

fn sample_around(spec: &SyntheticSpec, means: &[Vec<f64>]) -> Result<LabeledDataset> {
    let mut rng = rng::seeded(spec.seed, stream::SAMPLES);
    let n = spec.classes * spec.n_per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + spec.spread * z);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(features, spec.dim, labels, spec.classes, SplitTag::Train)
}

/// Class-major samples: `n_per_class` draws from each class in turn.
/// Deterministic in `spec`.
pub fn generate_gaussian_mixture(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    sample_around(spec, &class_means(spec))
}

/// Same generator with every class mean moved by `shift · radius` along one
/// shared random direction. `shift = 0` reproduces the in-distribution data.
pub fn generate_ood_shift(spec: &SyntheticSpec, shift: f64) -> Result<LabeledDataset> {
    spec.validate()?;
    if !(shift.is_finite() && shift >= 0.0) {
        return Err(Error::contract(format!(
            "shift must be finite and non-negative, got {shift}"
        )));
    }
    let mut rng = rng::seeded(spec.seed, stream::OOD_DIRECTION);
    let direction = unit_vector(&mut rng, spec.dim);
    let offset = shift * spec.radius;
    let means: Vec<Vec<f64>> = class_means(spec)
        .into_iter()
        .map(|m| {
            m.iter()
                .zip(&direction)
                .map(|(a, d)| a + offset * d)
                .collect()
        })
        .collect();
    sample_around(spec, &means)
}

/// Fractions for a train/val/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::contract(format!(
                "split fractions must be positive: {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "split fractions must sum to 1: {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Stratified index partition. Each returned list is sorted ascending.
pub fn split_indices(
    ds: &LabeledDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    fractions.validate()?;
    let mut rng = rng::seeded(seed, stream::SPLIT);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out: [Vec<usize>; 3] = Default::default();
    for (k, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::Stratification(format!(
                "class {k} has {} samples, fewer than the 3 splits",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let counts = stratum_counts(members.len(), fractions);
        let (train, rest) = members.split_at(counts[0]);
        let (val, test) = rest.split_at(counts[1]);
        out[0].extend_from_slice(train);
        out[1].extend_from_slice(val);
        out[2].extend_from_slice(test);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Rounded per-split counts for one class, each at least one.
fn stratum_counts(n: usize, f: SplitFractions) -> [usize; 3] {
    let nf = n as f64;
    let mut train = (nf * f.train).round() as usize;
    let mut val = (nf * f.val).round() as usize;
    train = train.clamp(1, n - 2);
    val = val.clamp(1, n - 1 - train);
    let test = n - train - val;
    if test == 0 {
        // n ≥ 3, so one of the other two can give one up.
        if train > val {
            train -= 1;
        } else {
            val -= 1;
        }
        return [train, val, 1];
    }
    [train, val, test]
}

/// Stratified, seed-deterministic train/val/test split.
pub fn split(
    ds: &LabeledDataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let [train, val, test] = split_indices(ds, fractions, seed)?;
    Ok((
        ds.subset(&train, SplitTag::Train),
        ds.subset(&val, SplitTag::Val),
        ds.subset(&test, SplitTag::Test),
    ))
}

/// Formats a float with 17 significant digits, which round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `contents` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_csv_string(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for i in 0..ds.len() {
        for v in ds.row(i) {
            out.push_str(&fmt_f64(*v));
            out.push(',');
        }
        out.push_str(&ds.labels()[i].to_string());
        out.push('\n');
    }
    out
}

pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_atomic(path, to_csv_string(ds).as_bytes())
}

/// Loads a dataset, inferring the class count as `max label + 1` (at least 2).
pub fn load_csv(path: &Path, split: SplitTag) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, None, split)
}

/// Loads a dataset whose labels must lie in `0..classes`.
pub fn load_csv_with_classes(
    path: &Path,
    classes: usize,
    split: SplitTag,
) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, Some(classes), split)
}

pub fn parse_csv(text: &str, classes: Option<usize>, split: SplitTag) -> Result<LabeledDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let dim = parse_header(header)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", dim + 1, fields.len()),
            });
        }
        for f in &fields[..dim] {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid number {f:?}"),
            })?;
            features.push(v);
        }
        let raw = fields[dim].trim();
        let label: usize = raw.parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("label {raw:?} is not a non-negative integer"),
        })?;
        if let Some(k) = classes {
            if label >= k {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("label {label} is not below the class count {k}"),
                });
            }
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    LabeledDataset::new(features, dim, labels, k, split)
}

fn parse_header(header: &str) -> Result<usize> {
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let bad = |message: String| Error::Parse { line: 1, message };
    if cols.len() < 2 || cols.last() != Some(&"label") {
        return Err(bad(format!(
            "expected header f0,...,label, found {header:?}"
        )));
    }
    for (j, c) in cols[..cols.len() - 1].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(bad(format!("column {j} should be named f{j}, found {c:?}")));
        }
    }
    Ok(cols.len() - 1)
}
