use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator};
use crate::ndcore::{Matrix, Rng};

/// Input-gradient norms below this are treated as zero when
/// differentiating the penalty.
const GRAD_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticOutput {
    /// `E[D(x')] − E[D(x)] + gp_coeff · penalty`, minimized by the critic.
    pub d_loss: f64,
    /// `E[D(x')] − E[D(x)]`.
    pub wasserstein: f64,
    pub penalty: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WganOutput {
    pub d_loss: f64,
    /// `−E[D(x')]`.
    pub g_loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
}

/// Gradient penalty at `x̂ = τx + (1 − τ)x'` with one `τ ~ U(0, 1)` per row.
/// Accumulates `grad_scale · ∂penalty/∂θ_D` into the critic.
pub fn gradient_penalty(
    d: &mut Discriminator,
    x_real: &Matrix,
    x_fake: &Matrix,
    attrs: &Matrix,
    rng: &mut Rng,
    grad_scale: f64,
) -> Result<f64> {
    if x_real.shape() != x_fake.shape() {
        return Err(Error::Dimension {
            op: "gradient_penalty",
            left: x_real.shape(),
            right: x_fake.shape(),
        });
    }
    let mut x_hat = x_real.clone();
    for i in 0..x_hat.rows() {
        let tau = rng.uniform();
        for (h, &f) in x_hat.row_mut(i).iter_mut().zip(x_fake.row(i)) {
            *h = tau * *h + (1.0 - tau) * f;
        }
    }
    gradient_penalty_at(d, &x_hat, attrs, grad_scale)
}

/// `mean_i (‖∇_x D(x̂_i, a_i)‖₂ − 1)²` at given interpolates.
///
/// The input gradient comes from an analytic backward pass. Its parameter
/// derivative is a second pass: pushing the penalty's sensitivity `r` to the
/// input gradient forward as a tangent gives, for layer `l`,
/// `∂/∂W_l = T_{l−1}ᵀ G_l` where `T` are the forward tangents of `r` and
/// `G_l` the backward signals at layer `l`'s pre-activation. LeakyReLU is
/// piecewise linear, so bias derivatives vanish.
pub fn gradient_penalty_at(
    d: &mut Discriminator,
    x_hat: &Matrix,
    attrs: &Matrix,
    grad_scale: f64,
) -> Result<f64> {
    let input = d.input(x_hat, attrs)?;
    let batch = input.rows();
    if batch == 0 {
        return Ok(0.0);
    }
    let (_, cache) = d.net.forward(&input)?;
    let signals = d.net.preactivation_signals(&cache)?;
    let grad_in = signals[0].matmul_nt(&d.net.layers[0].weight.value)?;

    let f = d.feature_dim;
    let mut penalty = 0.0;
    let mut direction = Matrix::zeros(batch, input.cols());
    for i in 0..batch {
        let gx = &grad_in.row(i)[..f];
        let norm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
        penalty += (norm - 1.0).powi(2);
        if norm > GRAD_NORM_FLOOR {
            let k = 2.0 * (norm - 1.0) / norm / batch as f64;
            for (r, &g) in direction.row_mut(i)[..f].iter_mut().zip(gx) {
                *r = k * g;
            }
        }
    }
    penalty /= batch as f64;

    if grad_scale != 0.0 {
        let tangents = d.net.forward_tangents(&cache, &direction)?;
        for l in 0..d.net.layers.len() {
            let t_in = if l == 0 { &direction } else { &tangents[l - 1] };
            let dw = t_in.matmul_tn(&signals[l])?;
            d.net.layers[l].weight.grad.add_scaled(&dw, grad_scale)?;
        }
    }
    Ok(penalty)
}

/// Critic objective on a real/fake batch. Accumulates its parameter
/// gradient into `d`.
pub fn critic_loss(
    d: &mut Discriminator,
    x_real: &Matrix,
    x_fake: &Matrix,
    attrs: &Matrix,
    rng: &mut Rng,
    gp_coeff: f64,
) -> Result<CriticOutput> {
    let n = x_real.rows();
    if n == 0 || x_fake.shape() != x_real.shape() {
        return Err(Error::Dimension {
            op: "critic_loss",
            left: x_real.shape(),
            right: x_fake.shape(),
        });
    }
    let (real_out, real_cache) = d.net.forward(&d.input(x_real, attrs)?)?;
    let (fake_out, fake_cache) = d.net.forward(&d.input(x_fake, attrs)?)?;
    let wasserstein = fake_out.mean() - real_out.mean();
    d.net
        .backward_params(&real_cache, &Matrix::filled(n, 1, -1.0 / n as f64))?;
    d.net
        .backward_params(&fake_cache, &Matrix::filled(n, 1, 1.0 / n as f64))?;
    let penalty = gradient_penalty(d, x_real, x_fake, attrs, rng, gp_coeff)?;
    Ok(CriticOutput {
        d_loss: wasserstein + gp_coeff * penalty,
        wasserstein,
        penalty,
    })
}

/// `−E[D(x', a)]` and its gradient with respect to `x'`. The critic's
/// gradient buffers are not touched.
pub fn generator_adversarial_loss(
    d: &Discriminator,
    x_fake: &Matrix,
    attrs: &Matrix,
) -> Result<(f64, Matrix)> {
    let n = x_fake.rows();
    let (out, cache) = d.net.forward(&d.input(x_fake, attrs)?)?;
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, d.feature_dim)));
    }
    let g_in = d
        .net
        .backward_input(&cache, &Matrix::filled(n, 1, -1.0 / n as f64))?;
    Ok((-out.mean(), g_in.col_slice(0, d.feature_dim)))
}

/// Both adversarial objectives on one batch: synthesizes `x' = G(a, z)`,
/// accumulates the critic gradient of `d_loss` into `d` and the generator
/// gradient of `g_loss` into `g`.
pub fn wgan_losses(
    d: &mut Discriminator,
    g: &mut Generator,
    x_real: &Matrix,
    attrs: &Matrix,
    rng: &mut Rng,
    gp_coeff: f64,
) -> Result<WganOutput> {
    let z = g.sample_noise(attrs.rows(), rng);
    let (x_fake, g_cache) = g.net.forward(&g.input(attrs, &z)?)?;
    let critic = critic_loss(d, x_real, &x_fake, attrs, rng, gp_coeff)?;
    let (g_loss, grad_fake) = generator_adversarial_loss(d, &x_fake, attrs)?;
    g.net.backward(&g_cache, &grad_fake)?;
    Ok(WganOutput {
        d_loss: critic.d_loss,
        g_loss,
        wasserstein: critic.wasserstein,
        penalty: critic.penalty,
    })
}
