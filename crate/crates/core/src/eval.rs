//! Final softmax classifier and the GZSL / ZSL metric protocol.
//!
//! `U` and `S` are average per-class top-1 accuracies of one classifier over
//! seen ∪ unseen classes, measured on unseen and seen test samples; `H` is
//! their harmonic mean. `T` comes from a second classifier restricted to
//! unseen classes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::Models;
use crate::ndcore::{adam_step, softmax_in_place, AdamConfig, Matrix, Param, Rng};
use crate::data::GzslDataset;
use crate::pipeline::{build_classifier_trainset, synthesize_unseen, ClassifierMode, TrainConfig};

/// Child-seed offsets of the evaluation stage.
pub const SEED_OFFSET_SYNTH: u64 = 0x5000;
pub const SEED_OFFSET_GZSL_CLS: u64 = 0x6000;
pub const SEED_OFFSET_ZSL_CLS: u64 = 0x7000;

pub const METRICS_HEADER: &str = "setting,U,S,H,T";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricBlock {
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub t: f64,
}

impl MetricBlock {
    pub fn new(u: f64, s: f64, t: f64) -> Result<Self> {
        Ok(Self {
            u,
            s,
            h: harmonic_mean(u, s)?,
            t,
        })
    }

    /// `setting,U,S,H,T` row with two decimals.
    pub fn csv_row(&self, setting: &str) -> String {
        format!(
            "{setting},{:.2},{:.2},{:.2},{:.2}",
            self.u, self.s, self.h, self.t
        )
    }

    /// ZSL-only row: the GZSL columns are left empty.
    pub fn zsl_csv_row(&self, setting: &str) -> String {
        format!("{setting},,,,{:.2}", self.t)
    }
}

/// Metrics CSV text with header.
pub fn metrics_csv(rows: &[String]) -> String {
    let mut out = String::new();
    writeln!(out, "{METRICS_HEADER}").unwrap();
    for r in rows {
        writeln!(out, "{r}").unwrap();
    }
    out
}

/// `2us / (u + s)`, zero when both are zero.
pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    if u < 0.0 || s < 0.0 || u.is_nan() || s.is_nan() {
        return Err(Error::Contract(format!("harmonic mean of negative input ({u}, {s})")));
    }
    if u + s == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * u * s / (u + s))
}

/// Anything that maps embedding rows to class ids.
pub trait Classifier {
    fn predict(&self, x: &Matrix) -> Result<Vec<usize>>;
}

impl<F> Classifier for F
where
    F: Fn(&Matrix) -> Result<Vec<usize>>,
{
    fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        self(x)
    }
}

/// Linear layer with softmax over `classes` (global class ids).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    pub weight: Param,
    pub bias: Param,
    pub classes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 128,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

impl SoftmaxClassifier {
    pub fn zeros(dim: usize, classes: Vec<usize>) -> Self {
        let c = classes.len();
        Self {
            weight: Param::new(Matrix::zeros(dim, c)),
            bias: Param::new(Matrix::zeros(1, c)),
            classes,
        }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weight.value)?;
        z.add_row_broadcast(&self.bias.value)?;
        Ok(z)
    }

    /// Class probabilities per row.
    pub fn probabilities(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = self.logits(x)?;
        for i in 0..z.rows() {
            softmax_in_place(z.row_mut(i));
        }
        Ok(z)
    }

    /// Mean cross-entropy on `(x, local)` where `local` indexes `classes`;
    /// accumulates parameter gradients.
    pub fn cross_entropy_backward(&mut self, x: &Matrix, local: &[usize]) -> Result<f64> {
        let n = x.rows();
        let mut g = self.logits(x)?;
        let mut loss = 0.0;
        for (i, &y) in local.iter().enumerate() {
            let row = g.row_mut(i);
            let true_logit = row[y];
            loss += softmax_in_place(row) - true_logit;
            row[y] -= 1.0;
        }
        g.scale(1.0 / n as f64);
        self.weight.grad.add_assign(&x.matmul_tn(&g)?)?;
        self.bias.grad.add_assign(&g.sum_rows())?;
        Ok(loss / n as f64)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl Classifier for SoftmaxClassifier {
    fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(z.row_iter().map(|r| self.classes[argmax(r)]).collect())
    }
}

/// Trains a zero-initialized softmax classifier with Adam on shuffled
/// mini-batches. `labels` are global ids and must all be in `classes`.
pub fn train_softmax_classifier(
    embeddings: &Matrix,
    labels: &[usize],
    classes: &[usize],
    cfg: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<SoftmaxClassifier> {
    if embeddings.rows() == 0 {
        return Err(Error::Contract("classifier training set is empty".into()));
    }
    if labels.len() != embeddings.rows() {
        return Err(Error::Dimension {
            op: "train_softmax_classifier",
            left: embeddings.shape(),
            right: (labels.len(), 1),
        });
    }
    let local: Vec<usize> = labels
        .iter()
        .map(|l| {
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::Contract(format!("label {l} outside the classifier's classes")))
        })
        .collect::<Result<_>>()?;
    let mut clf = SoftmaxClassifier::zeros(embeddings.cols(), classes.to_vec());
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    };
    let all: Vec<usize> = (0..embeddings.rows()).collect();
    for _ in 0..cfg.epochs {
        for batch in crate::data::epoch_batches(&all, cfg.batch_size, rng) {
            let x = embeddings.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| local[i]).collect();
            clf.weight.zero_grad();
            clf.bias.zero_grad();
            clf.cross_entropy_backward(&x, &y)?;
            adam_step(&mut clf.weight, &adam);
            adam_step(&mut clf.bias, &adam);
        }
    }
    Ok(clf)
}

/// Mean over `class_set` of per-class accuracy on already computed
/// predictions, in percent.
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], class_set: &[usize]) -> Result<f64> {
    if class_set.is_empty() {
        return Err(Error::Contract("empty class set".into()));
    }
    let mut acc = 0.0;
    for &c in class_set {
        let (mut total, mut correct) = (0usize, 0usize);
        for (&p, &l) in predictions.iter().zip(labels) {
            if l == c {
                total += 1;
                correct += usize::from(p == c);
            }
        }
        if total == 0 {
            return Err(Error::Contract(format!("class {c} has no test samples")));
        }
        acc += correct as f64 / total as f64;
    }
    Ok(100.0 * acc / class_set.len() as f64)
}

/// Average per-class top-1 accuracy of `classifier` on `(embeddings, labels)`.
pub fn per_class_top1(
    classifier: &dyn Classifier,
    embeddings: &Matrix,
    labels: &[usize],
    class_set: &[usize],
) -> Result<f64> {
    let pred = classifier.predict(embeddings)?;
    per_class_accuracy(&pred, labels, class_set)
}

/// Embedded test partitions.
#[derive(Clone, Debug)]
pub struct TestEmbeddings {
    pub seen: (Matrix, Vec<usize>),
    pub unseen: (Matrix, Vec<usize>),
}

impl TestEmbeddings {
    pub fn compute(models: &Models, ds: &GzslDataset) -> Result<Self> {
        let (xs, ys) = ds.subset(ds.test_seen_idx());
        let (xu, yu) = ds.subset(ds.test_unseen_idx());
        Ok(Self {
            seen: (models.embedding.net.infer(&xs)?, ys),
            unseen: (models.embedding.net.infer(&xu)?, yu),
        })
    }
}

/// Metrics from given classifiers.
pub fn evaluate_classifiers(
    gzsl: &dyn Classifier,
    zsl: &dyn Classifier,
    test: &TestEmbeddings,
    ds: &GzslDataset,
) -> Result<MetricBlock> {
    let u = per_class_top1(gzsl, &test.unseen.0, &test.unseen.1, ds.unseen_classes())?;
    let s = per_class_top1(gzsl, &test.seen.0, &test.seen.1, ds.seen_classes())?;
    let t = per_class_top1(zsl, &test.unseen.0, &test.unseen.1, ds.unseen_classes())?;
    MetricBlock::new(u, s, t)
}

/// Everything produced by [`evaluate`].
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: MetricBlock,
    pub gzsl: SoftmaxClassifier,
    pub zsl: SoftmaxClassifier,
    pub test: TestEmbeddings,
}

/// Synthesizes unseen features, trains the GZSL and ZSL classifiers on
/// embeddings and scores both test partitions.
pub fn evaluate(models: &Models, ds: &GzslDataset, cfg: &TrainConfig) -> Result<Evaluation> {
    let mut synth_rng = Rng::child(cfg.seed, SEED_OFFSET_SYNTH);
    let synth = synthesize_unseen(&models.generator, ds, cfg.n_synth_per_unseen, &mut synth_rng)?;
    let cls_cfg = cfg.classifier;

    let (emb, labels) = build_classifier_trainset(models, ds, &synth, ClassifierMode::Gzsl)?;
    let mut all_classes: Vec<usize> = ds
        .seen_classes()
        .iter()
        .chain(ds.unseen_classes())
        .copied()
        .collect();
    all_classes.sort_unstable();
    let gzsl = train_softmax_classifier(
        &emb,
        &labels,
        &all_classes,
        &cls_cfg,
        &mut Rng::child(cfg.seed, SEED_OFFSET_GZSL_CLS),
    )?;

    let (emb, labels) = build_classifier_trainset(models, ds, &synth, ClassifierMode::Zsl)?;
    let zsl = train_softmax_classifier(
        &emb,
        &labels,
        ds.unseen_classes(),
        &cls_cfg,
        &mut Rng::child(cfg.seed, SEED_OFFSET_ZSL_CLS),
    )?;

    let test = TestEmbeddings::compute(models, ds)?;
    let metrics = evaluate_classifiers(&gzsl, &zsl, &test, ds)?;
    Ok(Evaluation {
        metrics,
        gzsl,
        zsl,
        test,
    })
}

/// ZSL accuracy `T` alone: the unseen-only classifier on synthetic features.
pub fn evaluate_zsl(models: &Models, ds: &GzslDataset, cfg: &TrainConfig) -> Result<f64> {
    let mut synth_rng = Rng::child(cfg.seed, SEED_OFFSET_SYNTH);
    let synth = synthesize_unseen(&models.generator, ds, cfg.n_synth_per_unseen, &mut synth_rng)?;
    let (emb, labels) = build_classifier_trainset(models, ds, &synth, ClassifierMode::Zsl)?;
    let zsl = train_softmax_classifier(
        &emb,
        &labels,
        ds.unseen_classes(),
        &cfg.classifier,
        &mut Rng::child(cfg.seed, SEED_OFFSET_ZSL_CLS),
    )?;
    let (xu, yu) = ds.subset(ds.test_unseen_idx());
    per_class_top1(&zsl, &models.embedding.net.infer(&xu)?, &yu, ds.unseen_classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(67.0, 74.8).unwrap() - 70.685).abs() < 1e-3);
        assert!((harmonic_mean(63.1, 78.6).unwrap() - 70.0).abs() < 0.05);
        assert_eq!(harmonic_mean(0.0, 55.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert!((harmonic_mean(50.0, 50.0).unwrap() - 50.0).abs() < 1e-12);
        assert!(harmonic_mean(-1.0, 3.0).is_err());
    }

    #[test]
    fn per_class_not_per_sample() {
        // class 0: 10 samples all right, class 1: 1 sample wrong
        let labels: Vec<usize> = [0; 10].into_iter().chain([1]).collect();
        let pred: Vec<usize> = [0; 10].into_iter().chain([0]).collect();
        assert_eq!(per_class_accuracy(&pred, &labels, &[0, 1]).unwrap(), 50.0);
        assert_eq!(per_class_accuracy(&labels, &labels, &[0, 1]).unwrap(), 100.0);
        let err = per_class_accuracy(&pred, &labels, &[0, 2]).unwrap_err();
        assert!(err.to_string().contains("class 2"));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn zero_epochs_is_uniform() {
        let x = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let clf =
            train_softmax_classifier(&x, &[0, 1, 2, 0], &[0, 1, 2], &ClassifierConfig { epochs: 0, ..Default::default() }, &mut Rng::new(0))
                .unwrap();
        let p = clf.probabilities(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn memorizes_one_sample_per_class() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.2], vec![0.0, 1.0, 0.1], vec![-1.0, -1.0, 0.3]])
            .unwrap();
        let classes = [4, 7, 9];
        let cfg = ClassifierConfig {
            lr: 0.05,
            epochs: 200,
            ..Default::default()
        };
        let clf = train_softmax_classifier(&x, &classes, &classes, &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(clf.predict(&x).unwrap(), classes.to_vec());
        assert!(train_softmax_classifier(&Matrix::zeros(0, 3), &[], &classes, &cfg, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn csv_rows() {
        let m = MetricBlock::new(67.0, 74.8, 73.9).unwrap();
        assert_eq!(m.csv_row("adaptive"), "adaptive,67.00,74.80,70.69,73.90");
        assert_eq!(m.zsl_csv_row("adaptive"), "adaptive,,,,73.90");
    }
}
