//! Training loop: per batch, `n_critic` critic updates followed by one joint
//! update of G, E, H, RN and the prototypes on real plus synthesized seen
//! features. Also unseen-feature synthesis and classifier training sets.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{epoch_batches, GzslDataset};
use crate::error::{Error, Result};
use crate::eval::{ClassifierConfig, MetricBlock};
use crate::losses::{
    center_semantic_loss, critic_loss, generator_adversarial_loss, proto_contrastive_loss,
    relation_semantic_loss, ContrastiveVariant, LossWeights,
};
use crate::models::{embed, embed_backward, generate_features, Generator, ModelDims, Models};
use crate::ndcore::{adam_step, AdamConfig, Matrix, Rng};

/// Child-seed offsets of the training stage.
pub const SEED_OFFSET_INIT: u64 = 0x1000;
pub const SEED_OFFSET_TRAIN: u64 = 0x2000;

pub const REPORT_HEADER: &str = "epoch,d_loss,g_loss,proto,sem,center,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_critic: usize,
    pub gamma_ins: f64,
    pub margin_m: f64,
    pub gamma_sem: f64,
    pub weights: LossWeights,
    pub variant: ContrastiveVariant,
    pub d_h: usize,
    pub d_z: usize,
    pub noise_dim: usize,
    pub gan_hidden: usize,
    pub embed_hidden: usize,
    pub leaky_slope: f64,
    pub n_synth_per_unseen: usize,
    pub classifier: ClassifierConfig,
    pub seed: u64,
}

/// Desk-scale defaults for the synthetic benchmark.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 30,
            n_critic: 5,
            gamma_ins: 80.0,
            margin_m: 0.4,
            gamma_sem: 10.0,
            weights: LossWeights::default(),
            variant: ContrastiveVariant::parse("adaptive", 0.4).unwrap(),
            d_h: 64,
            d_z: 32,
            noise_dim: 16,
            gan_hidden: 128,
            embed_hidden: 128,
            leaky_slope: 0.2,
            n_synth_per_unseen: 400,
            classifier: ClassifierConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.n_critic < 1 {
            return bad("n_critic must be at least 1".into());
        }
        if !(self.margin_m > -1.0 && self.margin_m < 1.0) {
            return bad(format!("margin_m must lie in (-1, 1), got {}", self.margin_m));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("gamma_ins", self.gamma_ins),
            ("gamma_sem", self.gamma_sem),
            ("adam_eps", self.adam_eps),
            ("classifier lr", self.classifier.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if [self.d_h, self.d_z, self.noise_dim, self.gan_hidden, self.embed_hidden]
            .contains(&0)
        {
            return bad("network widths must be positive".into());
        }
        if self.n_synth_per_unseen == 0 || self.classifier.batch_size == 0 {
            return bad("n_synth_per_unseen and classifier batch size must be positive".into());
        }
        self.weights.validate()
    }

    pub fn dims(&self, ds: &GzslDataset) -> ModelDims {
        ModelDims {
            feature_dim: ds.feature_dim(),
            attr_dim: ds.attr_dim(),
            noise_dim: self.noise_dim,
            gan_hidden: self.gan_hidden,
            embed_hidden: self.embed_hidden,
            d_h: self.d_h,
            d_z: self.d_z,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Same config with the contrastive variant replaced by `name`.
    pub fn with_variant(&self, name: &str) -> Result<Self> {
        let variant = ContrastiveVariant::parse(name, self.margin_m).ok_or_else(|| {
            Error::Contract(format!("unknown variant `{name}` (plain, margin, adaptive)"))
        })?;
        Ok(Self {
            variant,
            ..self.clone()
        })
    }
}

/// Mean loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub proto: f64,
    pub sem: f64,
    pub center: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub metrics: Option<MetricBlock>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{REPORT_HEADER}").unwrap();
        for r in &self.epochs {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, r.d_loss, r.g_loss, r.proto, r.sem, r.center, r.seconds
            )
            .unwrap();
        }
        out
    }
}

/// Loss values of one joint step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointOutput {
    pub g_loss: f64,
    pub proto: f64,
    pub sem: f64,
    pub center: f64,
}

impl JointOutput {
    /// `g_loss + λ·proto + β·sem + φ·center`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.g_loss + w.lambda_proto * self.proto + w.beta_sem * self.sem + w.phi_center * self.center
    }
}

/// The generator/embedding objective on one batch. `local` indexes rows of
/// `seen_attrs`, which must be ordered like the prototype bank. Fake
/// features `G([a; noise])` join the real ones in E, one per real sample.
///
/// Accumulates gradients into G, E, H, RN and the prototypes. The critic is
/// only read. Terms with zero weight are skipped and reported as 0.
pub fn joint_objective(
    models: &mut Models,
    seen_attrs: &Matrix,
    x_real: &Matrix,
    local: &[usize],
    noise: &Matrix,
    cfg: &TrainConfig,
) -> Result<JointOutput> {
    let w = cfg.weights;
    let a = seen_attrs.select_rows(local);
    let g = &mut models.generator;
    let (x_fake, g_cache) = g.net.forward(&g.input(&a, noise)?)?;
    let (g_loss, mut grad_fake) = generator_adversarial_loss(&models.discriminator, &x_fake, &a)?;
    let mut out = JointOutput {
        g_loss,
        ..Default::default()
    };

    if w.lambda_proto > 0.0 || w.beta_sem > 0.0 || w.phi_center > 0.0 {
        let x = x_real.vconcat(&x_fake)?;
        let rows: Vec<usize> = local.iter().chain(local).copied().collect();
        let (h, z, cache) = embed(&models.embedding, &models.projection, &x)?;

        let mut grad_h = Matrix::zeros(h.rows(), h.cols());
        let mut grad_z = None;
        if w.lambda_proto > 0.0 {
            let protos = models.prototypes.unit()?;
            let c = proto_contrastive_loss(&protos, &z, &rows, cfg.gamma_ins, cfg.variant)?;
            out.proto = c.loss;
            models
                .prototypes
                .accumulate_unit_grad(&c.grad_protos.scaled(w.lambda_proto))?;
            grad_z = Some(c.grad_z.scaled(w.lambda_proto));
        }
        if w.beta_sem > 0.0 {
            let (loss, gh) = relation_semantic_loss(
                &mut models.relation,
                &h,
                &rows,
                seen_attrs,
                cfg.gamma_sem,
                w.beta_sem,
            )?;
            out.sem = loss;
            grad_h.add_assign(&gh)?;
        }
        if w.phi_center > 0.0 {
            let (loss, gh) = center_semantic_loss(
                &mut models.relation,
                &h,
                &rows,
                seen_attrs,
                cfg.gamma_sem,
                w.phi_center,
            )?;
            out.center = loss;
            grad_h.add_assign(&gh)?;
        }
        let grad_x = embed_backward(
            &mut models.embedding,
            &mut models.projection,
            &cache,
            Some(&grad_h),
            grad_z.as_ref(),
        )?;
        grad_fake.add_assign(&grad_x.row_slice(x_real.rows(), x.rows()))?;
    }
    models.generator.net.backward(&g_cache, &grad_fake)?;
    Ok(out)
}

fn check_finite(term: &'static str, value: f64, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term, epoch })
    }
}

/// Fresh models for `ds` seeded from `cfg.seed`.
pub fn init_models(ds: &GzslDataset, cfg: &TrainConfig) -> Result<Models> {
    cfg.validate()?;
    let mut rng = Rng::child(cfg.seed, SEED_OFFSET_INIT);
    Models::init(cfg.dims(ds), ds.seen_classes(), &mut rng)
}

/// Trains fresh models for `cfg.epochs` epochs.
pub fn train(ds: &GzslDataset, cfg: &TrainConfig) -> Result<(Models, TrainReport)> {
    let mut models = init_models(ds, cfg)?;
    let report = train_epochs(&mut models, ds, cfg, 0)?;
    Ok((models, report))
}

/// Runs `cfg.epochs` further epochs numbered from `completed + 1`. Epoch `e`
/// draws from its own child stream, so a resumed run matches an
/// uninterrupted one.
pub fn train_epochs(
    models: &mut Models,
    ds: &GzslDataset,
    cfg: &TrainConfig,
    completed: usize,
) -> Result<TrainReport> {
    cfg.validate()?;
    if models.dims != cfg.dims(ds) {
        return Err(Error::Contract(format!(
            "model dimensions {:?} do not match config and dataset {:?}",
            models.dims,
            cfg.dims(ds)
        )));
    }
    let adam = cfg.adam();
    let seen_attrs = ds.class_attributes(models.prototypes.class_ids());
    let mut report = TrainReport::default();

    for epoch in completed + 1..=completed + cfg.epochs {
        let start = Instant::now();
        let mut rng = Rng::child(cfg.seed, SEED_OFFSET_TRAIN + epoch as u64);
        let mut sums = [0.0; 5];
        let batches = epoch_batches(ds.train_idx(), cfg.batch_size, &mut rng);
        for batch in &batches {
            let (x_real, labels) = ds.subset(batch);
            let local = models.prototypes.rows_of(&labels)?;
            let a = seen_attrs.select_rows(&local);

            let mut d_loss = 0.0;
            for _ in 0..cfg.n_critic {
                let noise = models.generator.sample_noise(batch.len(), &mut rng);
                let g = &models.generator;
                let x_fake = g.net.infer(&g.input(&a, &noise)?)?;
                let d = &mut models.discriminator;
                d.net.zero_grad();
                d_loss = critic_loss(d, &x_real, &x_fake, &a, &mut rng, cfg.weights.gp_coeff)?.d_loss;
                check_finite("d_loss", d_loss, epoch)?;
                d.net.params_mut().for_each(|p| adam_step(p, &adam));
            }
            models.discriminator.net.zero_grad();

            let noise = models.generator.sample_noise(batch.len(), &mut rng);
            let out = joint_objective(models, &seen_attrs, &x_real, &local, &noise, cfg)?;
            if !models.discriminator.net.grads_are_zero() {
                return Err(Error::Contract("critic gradients changed during the joint step".into()));
            }
            for (term, v) in [
                ("g_loss", out.g_loss),
                ("proto", out.proto),
                ("sem", out.sem),
                ("center", out.center),
            ] {
                check_finite(term, v, epoch)?;
            }
            for (name, p) in models.named_params_mut() {
                if !name.starts_with("D.") {
                    adam_step(p, &adam);
                    p.zero_grad();
                }
            }
            for (s, v) in sums.iter_mut().zip([d_loss, out.g_loss, out.proto, out.sem, out.center]) {
                *s += v;
            }
        }
        let n = batches.len().max(1) as f64;
        report.epochs.push(EpochRecord {
            epoch,
            d_loss: sums[0] / n,
            g_loss: sums[1] / n,
            proto: sums[2] / n,
            sem: sums[3] / n,
            center: sums[4] / n,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

/// `n_per_class` generated features for every unseen class, labelled with
/// global class ids.
pub fn synthesize_unseen(
    g: &Generator,
    ds: &GzslDataset,
    n_per_class: usize,
    rng: &mut Rng,
) -> Result<(Matrix, Vec<usize>)> {
    let unseen = ds.unseen_classes();
    let (x, local) = generate_features(g, &ds.class_attributes(unseen), rng, n_per_class)?;
    Ok((x, local.into_iter().map(|c| unseen[c]).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierMode {
    /// Real seen training samples plus synthetic unseen samples.
    Gzsl,
    /// Synthetic unseen samples only.
    Zsl,
}

/// Embeddings `h = E(x)` and labels for the final classifier.
pub fn build_classifier_trainset(
    models: &Models,
    ds: &GzslDataset,
    synth: &(Matrix, Vec<usize>),
    mode: ClassifierMode,
) -> Result<(Matrix, Vec<usize>)> {
    let (x, labels) = match mode {
        ClassifierMode::Zsl => synth.clone(),
        ClassifierMode::Gzsl => {
            let (xs, mut ys) = ds.subset(ds.train_idx());
            ys.extend_from_slice(&synth.1);
            (xs.vconcat(&synth.0)?, ys)
        }
    };
    Ok((models.embedding.net.infer(&x)?, labels))
}
