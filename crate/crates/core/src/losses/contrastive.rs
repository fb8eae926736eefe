use crate::error::{Error, Result};
use crate::ndcore::{logsumexp_stable, Matrix};

/// Between-class margin `delta_n` and intra-class margin `delta_m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginPair {
    pub delta_n: f64,
    pub delta_m: f64,
}

impl MarginPair {
    /// `delta_n = m`, `delta_m = 1 − m`.
    pub fn from_margin(m: f64) -> Self {
        Self {
            delta_n: m,
            delta_m: 1.0 - m,
        }
    }

    pub const ZERO: MarginPair = MarginPair {
        delta_n: 0.0,
        delta_m: 0.0,
    };
}

/// Which prototype-to-instance loss to optimize.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ContrastiveVariant {
    /// Constant scaling, no margin.
    Plain,
    /// Constant scaling with margins.
    Margin(MarginPair),
    /// Instance-adaptive re-scaling with margins; the re-scaling factors use
    /// `m = delta_n`.
    AdaptiveMargin(MarginPair),
}

impl ContrastiveVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ContrastiveVariant::Plain => "plain",
            ContrastiveVariant::Margin(_) => "margin",
            ContrastiveVariant::AdaptiveMargin(_) => "adaptive",
        }
    }

    /// Parses `plain | margin | adaptive`, deriving margins from `m`.
    pub fn parse(name: &str, m: f64) -> Option<Self> {
        let pair = MarginPair::from_margin(m);
        match name {
            "plain" => Some(ContrastiveVariant::Plain),
            "margin" => Some(ContrastiveVariant::Margin(pair)),
            "adaptive" => Some(ContrastiveVariant::AdaptiveMargin(pair)),
            _ => None,
        }
    }

    fn margins(&self) -> MarginPair {
        match *self {
            ContrastiveVariant::Plain => MarginPair::ZERO,
            ContrastiveVariant::Margin(p) | ContrastiveVariant::AdaptiveMargin(p) => p,
        }
    }
}

/// Re-scaling factor for a positive pair: `max(1 + m − s, 0)`.
pub fn alpha_pos(s: f64, m: f64) -> f64 {
    (1.0 + m - s).max(0.0)
}

/// Re-scaling factor for a negative pair: `max(s + m, 0)`.
pub fn alpha_neg(s: f64, m: f64) -> f64 {
    (s + m).max(0.0)
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient with respect to the unit prototype rows.
    pub grad_protos: Matrix,
    /// Gradient with respect to the unit projection rows.
    pub grad_z: Matrix,
    /// Prototypes with at least one positive and one negative in the batch.
    pub n_valid: usize,
}

enum Alpha<'a> {
    Const(f64),
    Adaptive(f64),
    Given(&'a Matrix),
}

fn check_inputs(protos: &Matrix, z: &Matrix, rows: &[usize], gamma: f64) -> Result<()> {
    if z.rows() == 0 {
        return Err(Error::Contract("contrastive loss on an empty batch".into()));
    }
    if protos.cols() != z.cols() || rows.len() != z.rows() {
        return Err(Error::Dimension {
            op: "proto_contrastive_loss",
            left: protos.shape(),
            right: z.shape(),
        });
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= protos.rows()) {
        return Err(Error::Contract(format!(
            "label row {bad} has no prototype ({} prototypes)",
            protos.rows()
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::Contract(format!("gamma_ins must be positive, got {gamma}")));
    }
    Ok(())
}

/// Prototype-anchored contrastive loss.
///
/// `protos` and `z` hold unit rows; `rows[i]` is the prototype row of
/// sample `i`'s class. For each prototype with both positives and negatives
/// in the batch the term is `log(1 + Σₙ exp(γαₙ(sₙ − δₙ)) · Σₘ exp(−γαₘ(sₘ − δₘ)))`,
/// and the loss is the mean over those prototypes. Re-scaling factors are
/// constants in the backward pass.
pub fn proto_contrastive_loss(
    protos: &Matrix,
    z: &Matrix,
    rows: &[usize],
    gamma: f64,
    variant: ContrastiveVariant,
) -> Result<ContrastiveOutput> {
    check_inputs(protos, z, rows, gamma)?;
    let alpha = match variant {
        ContrastiveVariant::AdaptiveMargin(p) => Alpha::Adaptive(p.delta_n),
        _ => Alpha::Const(1.0),
    };
    contrastive_impl(protos, z, rows, gamma, variant.margins(), alpha)
}

/// Same loss with explicit re-scaling factors: `alpha[(c, i)]` scales the
/// pair of prototype row `c` and sample `i`. A constant-1 matrix gives the
/// margin variant; adaptive factors come from [`adaptive_alphas`].
pub fn proto_contrastive_loss_with_alpha(
    protos: &Matrix,
    z: &Matrix,
    rows: &[usize],
    gamma: f64,
    margins: MarginPair,
    alpha: &Matrix,
) -> Result<ContrastiveOutput> {
    check_inputs(protos, z, rows, gamma)?;
    if alpha.shape() != (protos.rows(), z.rows()) {
        return Err(Error::Dimension {
            op: "proto_contrastive_loss_with_alpha",
            left: alpha.shape(),
            right: (protos.rows(), z.rows()),
        });
    }
    contrastive_impl(protos, z, rows, gamma, margins, Alpha::Given(alpha))
}

/// Instance-adaptive factors for every (prototype, sample) pair.
pub fn adaptive_alphas(protos: &Matrix, z: &Matrix, rows: &[usize], m: f64) -> Result<Matrix> {
    let sims = protos.matmul_nt(z)?;
    Ok(Matrix::from_fn(protos.rows(), z.rows(), |c, i| {
        let s = sims.get(c, i);
        if rows[i] == c {
            alpha_pos(s, m)
        } else {
            alpha_neg(s, m)
        }
    }))
}

fn contrastive_impl(
    protos: &Matrix,
    z: &Matrix,
    rows: &[usize],
    gamma: f64,
    margins: MarginPair,
    alpha: Alpha<'_>,
) -> Result<ContrastiveOutput> {
    let (n_protos, batch) = (protos.rows(), z.rows());
    let sims = protos.matmul_nt(z)?;
    let mut grad_protos = Matrix::zeros(n_protos, protos.cols());
    let mut grad_z = Matrix::zeros(batch, z.cols());
    let mut total = 0.0;
    let mut n_valid = 0usize;
    // d loss_c / d s_{c,i}, filled per prototype
    let mut dsim = vec![0.0; batch];

    let mut pos_idx = Vec::with_capacity(batch);
    let mut neg_idx = Vec::with_capacity(batch);
    let mut pos_args = Vec::with_capacity(batch);
    let mut neg_args = Vec::with_capacity(batch);
    let mut pos_scale = Vec::with_capacity(batch);
    let mut neg_scale = Vec::with_capacity(batch);

    let mut per_proto = Vec::with_capacity(n_protos);
    for c in 0..n_protos {
        pos_idx.clear();
        neg_idx.clear();
        for (i, &r) in rows.iter().enumerate() {
            if r == c {
                pos_idx.push(i);
            } else {
                neg_idx.push(i);
            }
        }
        if pos_idx.is_empty() || neg_idx.is_empty() {
            per_proto.push(None);
            continue;
        }
        let a = |i: usize, positive: bool| -> f64 {
            let s = sims.get(c, i);
            match alpha {
                Alpha::Const(v) => v,
                Alpha::Adaptive(m) if positive => alpha_pos(s, m),
                Alpha::Adaptive(m) => alpha_neg(s, m),
                Alpha::Given(mat) => mat.get(c, i),
            }
        };
        neg_args.clear();
        neg_scale.clear();
        for &i in &neg_idx {
            let k = gamma * a(i, false);
            neg_scale.push(k);
            neg_args.push(k * (sims.get(c, i) - margins.delta_n));
        }
        pos_args.clear();
        pos_scale.clear();
        for &i in &pos_idx {
            let k = -gamma * a(i, true);
            pos_scale.push(k);
            pos_args.push(k * (sims.get(c, i) - margins.delta_m));
        }
        let lse_n = logsumexp_stable(&neg_args)?;
        let lse_p = logsumexp_stable(&pos_args)?;
        let inner = lse_n + lse_p;
        // log(1 + P·Q) over the combined grid {0} ∪ {aₙ + bₘ}
        let loss_c = logsumexp_stable(&[0.0, inner])?;
        let sigma = (inner - loss_c).exp();
        dsim.iter_mut().for_each(|v| *v = 0.0);
        for ((&i, &arg), &k) in neg_idx.iter().zip(&neg_args).zip(&neg_scale) {
            dsim[i] = sigma * (arg - lse_n).exp() * k;
        }
        for ((&i, &arg), &k) in pos_idx.iter().zip(&pos_args).zip(&pos_scale) {
            dsim[i] = sigma * (arg - lse_p).exp() * k;
        }
        per_proto.push(Some(dsim.clone()));
        total += loss_c;
        n_valid += 1;
    }

    if n_valid == 0 {
        return Ok(ContrastiveOutput {
            loss: 0.0,
            grad_protos,
            grad_z,
            n_valid,
        });
    }
    let scale = 1.0 / n_valid as f64;
    for (c, d) in per_proto.iter().enumerate() {
        let Some(d) = d else { continue };
        let p_row = protos.row(c);
        for (i, &g) in d.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let g = g * scale;
            let z_row = z.row(i);
            for (o, &v) in grad_protos.row_mut(c).iter_mut().zip(z_row) {
                *o += g * v;
            }
            for (o, &v) in grad_z.row_mut(i).iter_mut().zip(p_row) {
                *o += g * v;
            }
        }
    }
    Ok(ContrastiveOutput {
        loss: total * scale,
        grad_protos,
        grad_z,
        n_valid,
    })
}
