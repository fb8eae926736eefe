//! GZSL datasets: invariant-checked construction, the three-file directory
//! format, a seeded synthetic generator and epoch batching.
//!
//! Directory layout:
//!
//! * `features.csv`: one row per sample, feature values then the integer
//!   class label as the last column.
//! * `attributes.csv`: one row per class id, ascending.
//! * `splits.txt`: lines `train:`, `test_seen:`, `test_unseen:`, `seen:`
//!   and `unseen:`, each followed by space-separated integers.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ndcore::{l2_normalize_rows, Matrix, Rng};

pub const FEATURES_FILE: &str = "features.csv";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const SPLITS_FILE: &str = "splits.txt";

/// Fraction of every seen class assigned to training by the generator.
pub const SEEN_TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct GzslDataset {
    features: Matrix,
    labels: Vec<usize>,
    attributes: Matrix,
    seen: Vec<usize>,
    unseen: Vec<usize>,
    train_idx: Vec<usize>,
    test_seen_idx: Vec<usize>,
    test_unseen_idx: Vec<usize>,
}

/// Index partitions and class sets of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl GzslDataset {
    /// Builds a dataset, checking every invariant.
    pub fn new(features: Matrix, labels: Vec<usize>, attributes: Matrix, splits: Splits) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            attributes,
            seen: splits.seen,
            unseen: splits.unseen,
            train_idx: splits.train,
            test_seen_idx: splits.test_seen,
            test_unseen_idx: splits.test_unseen,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidData(msg));
        if self.features.rows() != self.labels.len() {
            return bad(format!(
                "{} feature rows but {} labels",
                self.features.rows(),
                self.labels.len()
            ));
        }
        if !self.features.all_finite() || !self.attributes.all_finite() {
            return bad("non-finite value in features or attributes".into());
        }
        let n_classes = self.attributes.rows();
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return bad(format!(
                "label {l} of sample {i} has no attribute row ({n_classes} classes)"
            ));
        }
        for (name, set) in [("seen", &self.seen), ("unseen", &self.unseen)] {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} class list must be sorted and distinct"));
            }
            if let Some(&c) = set.iter().find(|&&c| c >= n_classes) {
                return bad(format!("{name} class {c} has no attribute row"));
            }
        }
        if self.seen.is_empty() {
            return bad("no seen classes".into());
        }
        if let Some(&c) = self.seen.iter().find(|c| self.unseen.binary_search(c).is_ok()) {
            return bad(format!("class {c} is both seen and unseen"));
        }
        let n = self.labels.len();
        let mut used = HashSet::new();
        let parts: [(&str, &Vec<usize>, &Vec<usize>); 3] = [
            ("train", &self.train_idx, &self.seen),
            ("test_seen", &self.test_seen_idx, &self.seen),
            ("test_unseen", &self.test_unseen_idx, &self.unseen),
        ];
        for (name, idx, allowed) in parts {
            for &i in idx.iter() {
                if i >= n {
                    return bad(format!("{name} index {i} out of range ({n} samples)"));
                }
                if !used.insert(i) {
                    return bad(format!("sample {i} appears twice across the index splits ({name})"));
                }
                let l = self.labels[i];
                if allowed.binary_search(&l).is_err() {
                    let kind = if self.unseen.binary_search(&l).is_ok() {
                        "unseen"
                    } else if self.seen.binary_search(&l).is_ok() {
                        "seen"
                    } else {
                        "unassigned"
                    };
                    return bad(format!("label {l} of {kind} class appears in {name} (sample {i})"));
                }
            }
        }
        Ok(())
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &Matrix {
        &self.attributes
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen_classes(&self) -> &[usize] {
        &self.unseen
    }

    pub fn train_idx(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn test_seen_idx(&self) -> &[usize] {
        &self.test_seen_idx
    }

    pub fn test_unseen_idx(&self) -> &[usize] {
        &self.test_unseen_idx
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.attributes.rows()
    }

    pub fn splits(&self) -> Splits {
        Splits {
            train: self.train_idx.clone(),
            test_seen: self.test_seen_idx.clone(),
            test_unseen: self.test_unseen_idx.clone(),
            seen: self.seen.clone(),
            unseen: self.unseen.clone(),
        }
    }

    /// Features and labels of the given sample indices.
    pub fn subset(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Attribute rows of the given class ids.
    pub fn class_attributes(&self, classes: &[usize]) -> Matrix {
        self.attributes.select_rows(classes)
    }

    /// One-line summary: `classes=<S>+<U> samples=<N> dim=<d>`.
    pub fn summary(&self) -> String {
        format!(
            "classes={}+{} samples={} dim={}",
            self.seen.len(),
            self.unseen.len(),
            self.labels.len(),
            self.feature_dim()
        )
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub attr_dim: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    /// Interpolation of every attribute row toward the global mean, in `[0, 1]`.
    pub class_overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_seen: 10,
            n_unseen: 3,
            attr_dim: 20,
            feature_dim: 64,
            samples_per_class: 200,
            noise_sigma: 1.0,
            class_overlap: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_seen == 0
            || self.n_unseen == 0
            || self.attr_dim == 0
            || self.feature_dim == 0
            || self.samples_per_class < 2
        {
            return Err(Error::Contract(format!(
                "synthetic spec needs positive counts and at least 2 samples per class: {self:?}"
            )));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Contract(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.class_overlap) {
            return Err(Error::Contract(format!(
                "class_overlap must lie in [0, 1], got {}",
                self.class_overlap
            )));
        }
        Ok(())
    }
}

/// Samples a dataset whose class means are a fixed random linear image of
/// the class attributes: `x = W·a_c + σ·ε`.
///
/// Classes `0..n_seen` are seen and the rest unseen. Each seen class is
/// split 80/20 into train and test; every unseen sample is a test sample.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GzslDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let n_classes = spec.n_seen + spec.n_unseen;

    let raw = Matrix::from_fn(n_classes, spec.attr_dim, |_, _| rng.normal());
    let mut attrs = l2_normalize_rows(&raw)?;
    let mean = attrs.sum_rows().scaled(1.0 / n_classes as f64);
    for c in 0..n_classes {
        for (a, &m) in attrs.row_mut(c).iter_mut().zip(mean.data()) {
            *a = (1.0 - spec.class_overlap) * *a + spec.class_overlap * m;
        }
    }

    let w = Matrix::from_fn(spec.attr_dim, spec.feature_dim, |_, _| rng.normal());
    let means = attrs.matmul(&w)?;

    let n = n_classes * spec.samples_per_class;
    let mut features = Matrix::zeros(n, spec.feature_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_classes {
        for _ in 0..spec.samples_per_class {
            let i = labels.len();
            for (x, &m) in features.row_mut(i).iter_mut().zip(means.row(c)) {
                *x = m + spec.noise_sigma * rng.normal();
            }
            labels.push(c);
        }
    }

    let per = spec.samples_per_class;
    let n_train = ((per as f64 * SEEN_TRAIN_FRACTION).round() as usize).clamp(1, per - 1);
    let mut splits = Splits {
        seen: (0..spec.n_seen).collect(),
        unseen: (spec.n_seen..n_classes).collect(),
        ..Default::default()
    };
    for c in 0..spec.n_seen {
        let mut idx: Vec<usize> = (c * per..(c + 1) * per).collect();
        rng.shuffle(&mut idx);
        let (tr, te) = idx.split_at(n_train);
        splits.train.extend_from_slice(tr);
        splits.test_seen.extend_from_slice(te);
    }
    splits.train.sort_unstable();
    splits.test_seen.sort_unstable();
    splits.test_unseen = (spec.n_seen * per..n).collect();

    GzslDataset::new(features, labels, attrs, splits)
}

/// Shuffled mini-batches covering every index exactly once.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn write_row(out: &mut String, values: &[f64]) {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        // shortest representation that round-trips (at most 17 significant digits)
        write!(out, "{v}").unwrap();
    }
}

fn write_index_line(out: &mut String, key: &str, values: &[usize]) {
    out.push_str(key);
    out.push(':');
    for v in values {
        write!(out, " {v}").unwrap();
    }
    out.push('\n');
}

/// Writes the three dataset files into `dir`, creating it if needed.
pub fn save_dataset(ds: &GzslDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut feats = String::new();
    for (i, row) in ds.features.row_iter().enumerate() {
        write_row(&mut feats, row);
        writeln!(feats, ",{}", ds.labels[i]).unwrap();
    }
    let mut attrs = String::new();
    for row in ds.attributes.row_iter() {
        write_row(&mut attrs, row);
        attrs.push('\n');
    }
    let mut splits = String::new();
    write_index_line(&mut splits, "train", &ds.train_idx);
    write_index_line(&mut splits, "test_seen", &ds.test_seen_idx);
    write_index_line(&mut splits, "test_unseen", &ds.test_unseen_idx);
    write_index_line(&mut splits, "seen", &ds.seen);
    write_index_line(&mut splits, "unseen", &ds.unseen);

    for (name, body) in [
        (FEATURES_FILE, feats),
        (ATTRIBUTES_FILE, attrs),
        (SPLITS_FILE, splits),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, col: usize, msg: String) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        col,
        msg,
    }
}

/// Parses a numeric CSV; returns rows of values.
fn parse_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read(path)?;
    let mut rows = Vec::new();
    let mut width = None;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, tok) in line.split(',').enumerate() {
            let v: f64 = tok.trim().parse().map_err(|_| {
                parse_err(path, ln + 1, col + 1, format!("not a number: {:?}", tok.trim()))
            })?;
            row.push(v);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(
                    path,
                    ln + 1,
                    row.len(),
                    format!("expected {w} columns, found {}", row.len()),
                ))
            }
            _ => {}
        }
        rows.push(row);
    }
    Ok(rows)
}

fn parse_splits(path: &Path) -> Result<Splits> {
    let text = read(path)?;
    let mut splits = Splits::default();
    let mut found = HashSet::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| parse_err(path, ln + 1, 1, "expected `<split>: <indices>`".into()))?;
        let target = match key.trim() {
            "train" => &mut splits.train,
            "test_seen" => &mut splits.test_seen,
            "test_unseen" => &mut splits.test_unseen,
            "seen" => &mut splits.seen,
            "unseen" => &mut splits.unseen,
            other => {
                return Err(parse_err(path, ln + 1, 1, format!("unknown split {other:?}")));
            }
        };
        if !found.insert(key.trim().to_string()) {
            return Err(parse_err(path, ln + 1, 1, format!("duplicate split {key:?}")));
        }
        for (col, tok) in rest.split_whitespace().enumerate() {
            let v: usize = tok.parse().map_err(|_| {
                parse_err(path, ln + 1, col + 2, format!("not an index: {tok:?}"))
            })?;
            target.push(v);
        }
    }
    for key in ["train", "test_seen", "test_unseen", "seen", "unseen"] {
        if !found.contains(key) {
            return Err(parse_err(path, 0, 0, format!("missing `{key}:` line")));
        }
    }
    Ok(splits)
}

/// Loads and validates a dataset from its three files.
pub fn load_dataset(features_path: &Path, attributes_path: &Path, splits_path: &Path) -> Result<GzslDataset> {
    let rows = parse_csv(features_path)?;
    let mut data = Vec::new();
    let mut labels = Vec::with_capacity(rows.len());
    let mut cols = 0;
    for (ln, row) in rows.iter().enumerate() {
        if row.len() < 2 {
            return Err(parse_err(features_path, ln + 1, 1, "need features and a label".into()));
        }
        let (vals, label) = row.split_at(row.len() - 1);
        let l = label[0];
        if l < 0.0 || l.fract() != 0.0 {
            return Err(parse_err(
                features_path,
                ln + 1,
                row.len(),
                format!("label {l} is not a non-negative integer"),
            ));
        }
        cols = vals.len();
        data.extend_from_slice(vals);
        labels.push(l as usize);
    }
    let features = Matrix::new(labels.len(), cols, data)?;
    let attributes = Matrix::from_rows(&parse_csv(attributes_path)?)?;
    let splits = parse_splits(splits_path)?;
    GzslDataset::new(features, labels, attributes, splits)
}

/// Loads the three files from a dataset directory.
pub fn load_dataset_dir(dir: &Path) -> Result<GzslDataset> {
    load_dataset(
        &dir.join(FEATURES_FILE),
        &dir.join(ATTRIBUTES_FILE),
        &dir.join(SPLITS_FILE),
    )
}
