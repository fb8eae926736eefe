//! Brute-force oracles shared by integration tests. Nothing here calls the
//! library's matrix kernels or metric code.
#![allow(dead_code)]

use std::collections::BTreeMap;

use pce_gzsl::data::{GzslDataset, SyntheticSpec};
use pce_gzsl::eval::{Evaluation, SoftmaxClassifier};
use pce_gzsl::models::Mlp;
use pce_gzsl::pipeline::TrainConfig;

/// Row-by-row forward pass with explicit loops.
pub fn mlp_forward(net: &Mlp, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let last = net.layers.len() - 1;
    rows.iter()
        .map(|x| {
            let mut cur = x.clone();
            for (l, layer) in net.layers.iter().enumerate() {
                let w = &layer.weight.value;
                let mut next = vec![0.0; w.cols()];
                for (j, out) in next.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (k, &v) in cur.iter().enumerate() {
                        s += v * w.get(k, j);
                    }
                    s += layer.bias.value.get(0, j);
                    *out = if l < last && s < 0.0 { s * net.spec.leaky_slope } else if l < last && s == 0.0 { 0.0 } else { s };
                }
                cur = next;
            }
            cur
        })
        .collect()
}

pub fn rows_of(ds: &GzslDataset, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    (
        idx.iter().map(|&i| ds.features().row(i).to_vec()).collect(),
        idx.iter().map(|&i| ds.labels()[i]).collect(),
    )
}

/// Argmax of linear logits; first maximum wins.
pub fn predict(clf: &SoftmaxClassifier, rows: &[Vec<f64>]) -> Vec<usize> {
    rows.iter()
        .map(|x| {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..clf.classes.len() {
                let mut s = 0.0;
                for (k, &v) in x.iter().enumerate() {
                    s += v * clf.weight.value.get(k, j);
                }
                s += clf.bias.value.get(0, j);
                if s > best.0 {
                    best = (s, j);
                }
            }
            clf.classes[best.1]
        })
        .collect()
}

/// Mean over `classes` of per-class hit rate, in percent.
pub fn tally(pred: &[usize], labels: &[usize], classes: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in pred.iter().zip(labels) {
        let e = counts.entry(l).or_default();
        e.0 += 1;
        if p == l {
            e.1 += 1;
        }
    }
    let mut sum = 0.0;
    for c in classes {
        let (n, hit) = counts[c];
        sum += hit as f64 / n as f64;
    }
    100.0 * sum / classes.len() as f64
}

/// `(U, S, H, T)` recomputed from the trained classifiers of an evaluation.
pub fn metrics(ev: &Evaluation, embed: &Mlp, ds: &GzslDataset) -> (f64, f64, f64, f64) {
    let (xs, ys) = rows_of(ds, ds.test_seen_idx());
    let (xu, yu) = rows_of(ds, ds.test_unseen_idx());
    let (hs, hu) = (mlp_forward(embed, &xs), mlp_forward(embed, &xu));
    let u = tally(&predict(&ev.gzsl, &hu), &yu, ds.unseen_classes());
    let s = tally(&predict(&ev.gzsl, &hs), &ys, ds.seen_classes());
    let t = tally(&predict(&ev.zsl, &hu), &yu, ds.unseen_classes());
    let h = if u + s == 0.0 { 0.0 } else { 2.0 * u * s / (u + s) };
    (u, s, h, t)
}

/// Small dataset and a matching quick config.
pub fn toy(seed: u64, n_seen: usize, n_unseen: usize) -> (SyntheticSpec, TrainConfig) {
    let spec = SyntheticSpec {
        n_seen,
        n_unseen,
        attr_dim: 4,
        feature_dim: 6,
        samples_per_class: 10,
        noise_sigma: 0.5,
        class_overlap: 0.2,
        seed,
    };
    let mut cfg = TrainConfig {
        batch_size: 8,
        epochs: 1,
        n_critic: 1,
        d_h: 5,
        d_z: 4,
        noise_dim: 3,
        gan_hidden: 8,
        embed_hidden: 8,
        n_synth_per_unseen: 6,
        seed,
        ..TrainConfig::default()
    };
    cfg.classifier.epochs = 5;
    cfg.classifier.batch_size = 16;
    cfg.classifier.lr = 0.05;
    (spec, cfg)
}
