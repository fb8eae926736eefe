//! Objective terms with analytic gradients: prototypical contrastive
//! losses, RelationNet semantic losses, WGAN-GP and their weighted total.

mod contrastive;
mod semantic;
mod wgan;

pub use contrastive::{
    adaptive_alphas, alpha_neg, alpha_pos, proto_contrastive_loss,
    proto_contrastive_loss_with_alpha, ContrastiveOutput, ContrastiveVariant, MarginPair,
};
pub use semantic::{center_semantic_loss, relation_semantic_loss, semantic_loss};
pub use wgan::{
    critic_loss, generator_adversarial_loss, gradient_penalty, gradient_penalty_at, wgan_losses,
    CriticOutput, WganOutput,
};

/// Scaling weights of the total objective. `gp_coeff` is the gradient
/// penalty coefficient inside the WGAN term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_proto: f64,
    pub beta_sem: f64,
    pub phi_center: f64,
    pub gp_coeff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_proto: 0.001,
            beta_sem: 0.001,
            phi_center: 0.001,
            gp_coeff: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.lambda_proto, self.beta_sem, self.phi_center, self.gp_coeff];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(crate::Error::Contract(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-term values on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub wgan: f64,
    pub proto: f64,
    pub sem: f64,
    pub center: f64,
}

/// `wgan + λ·proto + β·sem + φ·center`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.wgan + w.lambda_proto * c.proto + w.beta_sem * c.sem + w.phi_center * c.center
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_weighting() {
        let c = LossComponents {
            wgan: 1.5,
            proto: 2.0,
            sem: 3.0,
            center: 4.0,
        };
        let zero = LossWeights {
            lambda_proto: 0.0,
            beta_sem: 0.0,
            phi_center: 0.0,
            gp_coeff: 10.0,
        };
        assert_eq!(total_loss(&c, &zero), 1.5);
        let ones = LossWeights {
            lambda_proto: 1.0,
            beta_sem: 1.0,
            phi_center: 1.0,
            ..zero
        };
        assert_eq!(total_loss(&c, &ones), 10.5);
        assert!(LossWeights { beta_sem: -1.0, ..ones }.validate().is_err());
    }
}
