use crate::error::{Error, Result};
use crate::models::{relation_scores, relation_scores_backward, RelationNet};
use crate::ndcore::{softmax_in_place, Matrix};

/// Mean over rows of `−log softmax(γ·scores)[label]`.
/// Returns the loss and its gradient with respect to `scores`.
pub fn semantic_loss(scores: &Matrix, labels: &[usize], gamma: f64) -> Result<(f64, Matrix)> {
    if labels.len() != scores.rows() {
        return Err(Error::Dimension {
            op: "semantic_loss",
            left: scores.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= scores.cols()) {
        return Err(Error::Contract(format!(
            "label column {bad} out of range for {} classes",
            scores.cols()
        )));
    }
    let n = scores.rows();
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, scores.cols())));
    }
    let mut grad = scores.scaled(gamma);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        let true_logit = row[y];
        let lse = softmax_in_place(row);
        total += lse - true_logit;
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= gamma / n as f64);
    }
    Ok((total / n as f64, grad))
}

/// Semantic loss of embeddings `h` scored by RN against every attribute
/// row. Accumulates RN gradients scaled by `weight` and returns the loss
/// together with `weight · ∂loss/∂h`.
pub fn relation_semantic_loss(
    rn: &mut RelationNet,
    h: &Matrix,
    labels: &[usize],
    attrs: &Matrix,
    gamma: f64,
    weight: f64,
) -> Result<(f64, Matrix)> {
    let (scores, cache) = relation_scores(rn, h, attrs)?;
    let (loss, mut g) = semantic_loss(&scores, labels, gamma)?;
    g.scale(weight);
    let gh = relation_scores_backward(rn, &cache, &g)?;
    Ok((loss, gh))
}

/// Semantic loss applied to class centers: `ĥ_k` is the mean embedding of
/// the batch rows labelled `k`, and the loss averages over present classes.
/// `labels` index rows of `attrs`. Accumulates RN gradients scaled by
/// `weight`; returns the loss and `weight · ∂loss/∂h`.
pub fn center_semantic_loss(
    rn: &mut RelationNet,
    h: &Matrix,
    labels: &[usize],
    attrs: &Matrix,
    gamma: f64,
    weight: f64,
) -> Result<(f64, Matrix)> {
    if labels.len() != h.rows() {
        return Err(Error::Dimension {
            op: "center_semantic_loss",
            left: h.shape(),
            right: (labels.len(), 1),
        });
    }
    if h.rows() == 0 {
        return Err(Error::Contract("center semantic loss on an empty batch".into()));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let slot = |l: usize| present.binary_search(&l).unwrap();

    let mut centers = Matrix::zeros(present.len(), h.cols());
    let mut counts = vec![0usize; present.len()];
    for (i, &l) in labels.iter().enumerate() {
        let k = slot(l);
        counts[k] += 1;
        for (c, &v) in centers.row_mut(k).iter_mut().zip(h.row(i)) {
            *c += v;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        centers.row_mut(k).iter_mut().for_each(|v| *v /= n as f64);
    }
    let (loss, g_centers) = relation_semantic_loss(rn, &centers, &present, attrs, gamma, weight)?;
    let mut gh = Matrix::zeros(h.rows(), h.cols());
    for (i, &l) in labels.iter().enumerate() {
        let k = slot(l);
        let inv = 1.0 / counts[k] as f64;
        for (o, &v) in gh.row_mut(i).iter_mut().zip(g_centers.row(k)) {
            *o = v * inv;
        }
    }
    Ok((loss, gh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelDims;
    use crate::ndcore::Rng;

    fn rn(seed: u64) -> RelationNet {
        let dims = ModelDims {
            feature_dim: 4,
            attr_dim: 3,
            noise_dim: 2,
            gan_hidden: 4,
            embed_hidden: 4,
            d_h: 5,
            d_z: 3,
            leaky_slope: 0.2,
        };
        let mut net = RelationNet::init(&dims, &mut Rng::new(seed)).unwrap();
        // larger weights so scores are not all near zero
        net.net.params_mut().for_each(|p| p.value.scale(20.0));
        net
    }

    #[test]
    fn uniform_scores_give_ln_s() {
        let (l, _) = semantic_loss(&Matrix::filled(3, 4, 0.7), &[0, 3, 2], 10.0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l1, g1) = semantic_loss(&Matrix::filled(2, 1, -3.0), &[0, 0], 10.0).unwrap();
        assert_eq!(l1, 0.0);
        assert_eq!(g1.max_abs(), 0.0);
    }

    #[test]
    fn two_class_value() {
        let (l, _) = semantic_loss(&Matrix::row_vector(&[2.0, 0.0]), &[0], 1.0).unwrap();
        assert!((l - 0.126928).abs() < 1e-6);
        assert!((l - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance_and_gamma_monotonicity() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let s = Matrix::from_fn(3, 5, |_, _| rng.normal());
            let labels: Vec<usize> = (0..3).map(|_| rng.below(5)).collect();
            let shifted = s.map(|v| v + 12.5);
            let (a, _) = semantic_loss(&s, &labels, 3.0).unwrap();
            let (b, _) = semantic_loss(&shifted, &labels, 3.0).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        let s = Matrix::row_vector(&[1.0, 0.2, -0.5]);
        let (lo, _) = semantic_loss(&s, &[0], 1.0).unwrap();
        let (hi, _) = semantic_loss(&s, &[0], 2.0).unwrap();
        assert!(hi < lo);
        assert!(semantic_loss(&s, &[3], 1.0).is_err());
    }

    #[test]
    fn center_of_one_sample_is_the_sample() {
        let mut rng = Rng::new(1);
        let attrs = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let h = Matrix::from_fn(1, 5, |_, _| rng.normal());
        let (a, ga) = center_semantic_loss(&mut rn(2), &h, &[2], &attrs, 10.0, 1.0).unwrap();
        let (b, gb) = relation_semantic_loss(&mut rn(2), &h, &[2], &attrs, 10.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn duplicated_rows_keep_centers() {
        let mut rng = Rng::new(4);
        let attrs = Matrix::from_fn(3, 3, |_, _| rng.normal());
        let h = Matrix::from_fn(3, 5, |_, _| rng.normal());
        let labels = [0, 2, 0];
        let (a, _) = center_semantic_loss(&mut rn(5), &h, &labels, &attrs, 10.0, 1.0).unwrap();
        let dup = h.vconcat(&h).unwrap();
        let dup_labels = [0, 2, 0, 0, 2, 0];
        let (b, _) = center_semantic_loss(&mut rn(5), &dup, &dup_labels, &attrs, 10.0, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
