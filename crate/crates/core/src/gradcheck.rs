//! Finite-difference verification of every analytic gradient.
//!
//! Each suite draws random toy configurations (every width at most 16,
//! batch at most 8), compares the analytic gradient of one objective with
//! central differences and reports the worst normwise relative error
//! `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖)` over tensors and configurations.
//! Configurations with a LeakyReLU pre-activation closer than
//! [`KINK_MARGIN`] to zero are redrawn.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{
    adaptive_alphas, center_semantic_loss, critic_loss, generator_adversarial_loss,
    gradient_penalty_at, proto_contrastive_loss, proto_contrastive_loss_with_alpha,
    relation_semantic_loss, ContrastiveVariant, LossWeights, MarginPair,
};
use crate::models::{
    embed, embed_backward, relation_scores, Discriminator, MlpCache, ModelDims, Models,
};
use crate::ndcore::{l2_normalize_rows, l2_normalize_rows_backward, Matrix, Rng};
use crate::pipeline::{joint_objective, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-3;
/// Gradient norms below this count as exactly zero.
pub const ZERO_NORM: f64 = 1e-9;
const MAX_DRAWS: usize = 200;
const CORRUPTION: f64 = 1.01;

/// Suite names in report order.
pub const SUITES: [&str; 10] = [
    "wgan_critic",
    "gradient_penalty",
    "wgan_generator",
    "proto_plain",
    "proto_margin",
    "proto_adaptive",
    "semantic",
    "center_semantic",
    "embedding_chain",
    "total",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub configs: usize,
    /// Suite whose analytic gradient is scaled by 1.01 before comparison.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            configs: 100,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
    /// Tensor with the worst error.
    pub worst: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

type Eval = Box<dyn Fn(&[Matrix]) -> Result<(f64, Vec<Matrix>)>>;
type LossFn = Box<dyn Fn(&[Matrix]) -> Result<f64>>;

/// One differentiable objective at a fixed point.
struct Problem {
    names: Vec<String>,
    values: Vec<Matrix>,
    eval: Eval,
    /// Objective used for differencing when it differs from `eval`'s loss
    /// (stop-gradient factors frozen at the base point).
    loss: Option<LossFn>,
    kink: f64,
}

/// Normwise relative error, 0 when both gradients are negligible.
pub fn rel_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let denom = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if denom < ZERO_NORM {
        return 0.0;
    }
    let diff = analytic.sub(numeric).map_or(f64::INFINITY, |d| d.frobenius_norm());
    diff / denom
}

/// Central differences of `f` with respect to every entry of `values`.
pub fn numeric_gradient(
    f: &dyn Fn(&[Matrix]) -> Result<f64>,
    values: &[Matrix],
    h: f64,
) -> Result<Vec<Matrix>> {
    let mut point = values.to_vec();
    let mut out = Vec::with_capacity(values.len());
    for t in 0..values.len() {
        let mut g = Matrix::zeros(values[t].rows(), values[t].cols());
        for k in 0..values[t].len() {
            let orig = point[t].data()[k];
            point[t].data_mut()[k] = orig + h;
            let up = f(&point)?;
            point[t].data_mut()[k] = orig - h;
            let down = f(&point)?;
            point[t].data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

fn pick(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Random toy sizes and hyperparameters.
#[derive(Clone, Debug)]
struct Toy {
    dims: ModelDims,
    batch: usize,
    n_seen: usize,
    gamma_ins: f64,
    gamma_sem: f64,
    margin: f64,
}

impl Toy {
    fn draw(rng: &mut Rng) -> Self {
        let dims = ModelDims {
            feature_dim: pick(rng, 2, 16),
            attr_dim: pick(rng, 2, 16),
            noise_dim: pick(rng, 1, 8),
            gan_hidden: pick(rng, 2, 16),
            embed_hidden: pick(rng, 2, 16),
            d_h: pick(rng, 2, 16),
            d_z: pick(rng, 2, 16),
            leaky_slope: 0.2,
        };
        Self {
            dims,
            batch: pick(rng, 3, 8),
            n_seen: pick(rng, 2, 5),
            gamma_ins: 1.0 + 79.0 * rng.uniform(),
            gamma_sem: 1.0 + 9.0 * rng.uniform(),
            margin: 0.1 + 0.5 * rng.uniform(),
        }
    }

    /// Local class rows; the first two samples share a class and a second
    /// class is always present, so at least one prototype is valid.
    fn labels(&self, rng: &mut Rng) -> Vec<usize> {
        (0..self.batch)
            .map(|i| match i {
                0 | 1 => 0,
                2 => 1,
                _ => rng.below(self.n_seen),
            })
            .collect()
    }

    /// Models with weights `N(0, 1/fan_in)` and small random biases so that
    /// every term is well away from the near-zero initial regime.
    fn models(&self, rng: &mut Rng) -> Result<Models> {
        let seen: Vec<usize> = (0..self.n_seen).collect();
        let mut m = Models::init(self.dims, &seen, rng)?;
        for (name, p) in m.named_params_mut() {
            let (r, c) = p.shape();
            p.value = if name.ends_with(".w") {
                gaussian(r, c, rng).scaled(1.0 / (r as f64).sqrt())
            } else if name.ends_with(".b") {
                gaussian(r, c, rng).scaled(0.1)
            } else {
                gaussian(r, c, rng)
            };
        }
        Ok(m)
    }
}

fn collect(models: &Models, prefixes: &[&str]) -> (Vec<String>, Vec<Matrix>) {
    models
        .named_params()
        .into_iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, p)| (n, p.value.clone()))
        .unzip()
}

fn with_values(models: &Models, names: &[String], values: &[Matrix]) -> Models {
    let mut m = models.clone();
    for (name, p) in m.named_params_mut() {
        if let Some(i) = names.iter().position(|n| *n == name) {
            p.value = values[i].clone();
        }
        p.zero_grad();
    }
    m
}

fn grads_of(models: &Models, names: &[String]) -> Vec<Matrix> {
    let all = models.named_params();
    names
        .iter()
        .map(|n| all.iter().find(|(k, _)| k == n).unwrap().1.grad.clone())
        .collect()
}

fn kink(caches: &[(&MlpCache, &crate::models::Mlp)]) -> f64 {
    caches
        .iter()
        .map(|(c, net)| c.min_abs_kink_distance(&net.spec))
        .fold(f64::INFINITY, f64::min)
}

fn critic_kink(d: &Discriminator, xs: &[&Matrix], attrs: &Matrix) -> Result<f64> {
    let mut k = f64::INFINITY;
    for x in xs {
        let (_, c) = d.net.forward(&d.input(x, attrs)?)?;
        k = k.min(c.min_abs_kink_distance(&d.net.spec));
    }
    Ok(k)
}

fn interpolate(x_real: &Matrix, x_fake: &Matrix, rng: &mut Rng) -> Matrix {
    let mut x_hat = x_real.clone();
    for i in 0..x_hat.rows() {
        let tau = rng.uniform();
        for (h, &f) in x_hat.row_mut(i).iter_mut().zip(x_fake.row(i)) {
            *h = tau * *h + (1.0 - tau) * f;
        }
    }
    x_hat
}

fn build(suite: &str, rng: &mut Rng) -> Result<Problem> {
    let toy = Toy::draw(rng);
    let models = toy.models(rng)?;
    let dims = toy.dims;
    let b = toy.batch;
    let attrs = gaussian(toy.n_seen, dims.attr_dim, rng);
    let labels = toy.labels(rng);
    let a_rows = attrs.select_rows(&labels);

    match suite {
        "wgan_critic" | "gradient_penalty" => {
            let x_real = gaussian(b, dims.feature_dim, rng);
            let x_fake = gaussian(b, dims.feature_dim, rng);
            let tau_seed = rng.next_u64();
            let x_hat = interpolate(&x_real, &x_fake, &mut Rng::new(tau_seed));
            let gp = 0.5 + 10.0 * rng.uniform();
            let kink = critic_kink(&models.discriminator, &[&x_real, &x_fake, &x_hat], &a_rows)?;
            let (names, values) = collect(&models, &["D."]);
            let penalty_only = suite == "gradient_penalty";
            let n2 = names.clone();
            let eval: Eval = Box::new(move |v| {
                let mut m = with_values(&models, &n2, v);
                let d = &mut m.discriminator;
                let loss = if penalty_only {
                    gradient_penalty_at(d, &x_hat, &a_rows, 1.0)?
                } else {
                    critic_loss(d, &x_real, &x_fake, &a_rows, &mut Rng::new(tau_seed), gp)?.d_loss
                };
                Ok((loss, grads_of(&m, &n2)))
            });
            Ok(Problem { names, values, eval, loss: None, kink })
        }
        "wgan_generator" => {
            let noise = gaussian(b, dims.noise_dim, rng);
            let g = &models.generator;
            let (fake, gc) = g.net.forward(&g.input(&a_rows, &noise)?)?;
            let kink = kink(&[(&gc, &g.net)])
                .min(critic_kink(&models.discriminator, &[&fake], &a_rows)?);
            let (names, values) = collect(&models, &["G."]);
            let n2 = names.clone();
            let eval: Eval = Box::new(move |v| {
                let mut m = with_values(&models, &n2, v);
                let g = &mut m.generator;
                let (fake, gc) = g.net.forward(&g.input(&a_rows, &noise)?)?;
                let (loss, grad) = generator_adversarial_loss(&m.discriminator, &fake, &a_rows)?;
                m.generator.net.backward(&gc, &grad)?;
                Ok((loss, grads_of(&m, &n2)))
            });
            Ok(Problem { names, values, eval, loss: None, kink })
        }
        "proto_plain" | "proto_margin" | "proto_adaptive" => {
            let pair = MarginPair::from_margin(toy.margin);
            let variant = match suite {
                "proto_plain" => ContrastiveVariant::Plain,
                "proto_margin" => ContrastiveVariant::Margin(pair),
                _ => ContrastiveVariant::AdaptiveMargin(pair),
            };
            let protos = gaussian(toy.n_seen, dims.d_z, rng);
            let z = gaussian(b, dims.d_z, rng);
            let gamma = toy.gamma_ins;
            let rows = labels.clone();
            let eval: Eval = Box::new(move |v| {
                let (pu, zu) = (l2_normalize_rows(&v[0])?, l2_normalize_rows(&v[1])?);
                let out = proto_contrastive_loss(&pu, &zu, &rows, gamma, variant)?;
                Ok((
                    out.loss,
                    vec![
                        l2_normalize_rows_backward(&v[0], &out.grad_protos)?,
                        l2_normalize_rows_backward(&v[1], &out.grad_z)?,
                    ],
                ))
            });
            let loss: Option<LossFn> = if let ContrastiveVariant::AdaptiveMargin(p) = variant {
                let alpha = adaptive_alphas(
                    &l2_normalize_rows(&protos)?,
                    &l2_normalize_rows(&z)?,
                    &labels,
                    p.delta_n,
                )?;
                Some(Box::new(move |v| {
                    let (pu, zu) = (l2_normalize_rows(&v[0])?, l2_normalize_rows(&v[1])?);
                    Ok(proto_contrastive_loss_with_alpha(&pu, &zu, &labels, gamma, p, &alpha)?.loss)
                }))
            } else {
                None
            };
            Ok(Problem {
                names: vec!["protos".into(), "z".into()],
                values: vec![protos, z],
                eval,
                loss,
                kink: f64::INFINITY,
            })
        }
        "semantic" | "center_semantic" => {
            let h = gaussian(b, dims.d_h, rng);
            let gamma = toy.gamma_sem;
            let center = suite == "center_semantic";
            let mut kink = {
                let (_, c) = relation_scores(&models.relation, &h, &attrs)?;
                c.mlp.min_abs_kink_distance(&models.relation.net.spec)
            };
            if center {
                let mut m = models.clone();
                let (_, _) = center_semantic_loss(&mut m.relation, &h, &labels, &attrs, gamma, 1.0)?;
                kink = kink.min(center_kink(&models, &h, &labels, &attrs)?);
            }
            let (mut names, mut values) = collect(&models, &["RN."]);
            names.push("h".into());
            values.push(h);
            let n2 = names[..names.len() - 1].to_vec();
            let eval: Eval = Box::new(move |v| {
                let k = v.len() - 1;
                let mut m = with_values(&models, &n2, &v[..k]);
                let f = if center { center_semantic_loss } else { relation_semantic_loss };
                let (loss, gh) = f(&mut m.relation, &v[k], &labels, &attrs, gamma, 1.0)?;
                let mut grads = grads_of(&m, &n2);
                grads.push(gh);
                Ok((loss, grads))
            });
            Ok(Problem { names, values, eval, loss: None, kink })
        }
        "embedding_chain" => {
            let x = gaussian(b, dims.feature_dim, rng);
            let wh = gaussian(b, dims.d_h, rng);
            let wz = gaussian(b, dims.d_z, rng);
            let (_, _, cache) = embed(&models.embedding, &models.projection, &x)?;
            let kink = kink(&[
                (&cache.e, &models.embedding.net),
                (&cache.p, &models.projection.net),
            ]);
            let (mut names, mut values) = collect(&models, &["E.", "H."]);
            names.push("x".into());
            values.push(x);
            let n2 = names[..names.len() - 1].to_vec();
            let eval: Eval = Box::new(move |v| {
                let k = v.len() - 1;
                let mut m = with_values(&models, &n2, &v[..k]);
                let (h, z, cache) = embed(&m.embedding, &m.projection, &v[k])?;
                let loss = h.hadamard(&wh)?.sum() + z.hadamard(&wz)?.sum();
                let gx = embed_backward(&mut m.embedding, &mut m.projection, &cache, Some(&wh), Some(&wz))?;
                let mut grads = grads_of(&m, &n2);
                grads.push(gx);
                Ok((loss, grads))
            });
            Ok(Problem { names, values, eval, loss: None, kink })
        }
        "total" => {
            let x_real = gaussian(b, dims.feature_dim, rng);
            let noise = gaussian(b, dims.noise_dim, rng);
            let cfg = TrainConfig {
                gamma_ins: toy.gamma_ins,
                gamma_sem: toy.gamma_sem,
                margin_m: toy.margin,
                variant: ContrastiveVariant::Margin(MarginPair::from_margin(toy.margin)),
                weights: LossWeights {
                    lambda_proto: 0.1 + rng.uniform(),
                    beta_sem: 0.1 + rng.uniform(),
                    phi_center: 0.1 + rng.uniform(),
                    gp_coeff: 10.0,
                },
                ..TrainConfig::default()
            };
            let kink = joint_kink(&models, &attrs, &x_real, &labels, &noise)?;
            let (names, values) = collect(&models, &["G.", "E.", "H.", "RN.", "P."]);
            let n2 = names.clone();
            let eval: Eval = Box::new(move |v| {
                let mut m = with_values(&models, &n2, v);
                let out = joint_objective(&mut m, &attrs, &x_real, &labels, &noise, &cfg)?;
                Ok((out.total(&cfg.weights), grads_of(&m, &n2)))
            });
            Ok(Problem { names, values, eval, loss: None, kink })
        }
        other => Err(Error::Contract(format!("unknown gradcheck suite `{other}`"))),
    }
}

fn center_kink(models: &Models, h: &Matrix, labels: &[usize], attrs: &Matrix) -> Result<f64> {
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut centers = Matrix::zeros(present.len(), h.cols());
    for (k, &c) in present.iter().enumerate() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        centers
            .row_mut(k)
            .copy_from_slice(h.select_rows(&members).sum_rows().scaled(1.0 / members.len() as f64).data());
    }
    let (_, c) = relation_scores(&models.relation, &centers, attrs)?;
    Ok(c.mlp.min_abs_kink_distance(&models.relation.net.spec))
}

fn joint_kink(
    models: &Models,
    attrs: &Matrix,
    x_real: &Matrix,
    labels: &[usize],
    noise: &Matrix,
) -> Result<f64> {
    let a = attrs.select_rows(labels);
    let g = &models.generator;
    let (fake, gc) = g.net.forward(&g.input(&a, noise)?)?;
    let x = x_real.vconcat(&fake)?;
    let rows: Vec<usize> = labels.iter().chain(labels).copied().collect();
    let (h, _, cache) = embed(&models.embedding, &models.projection, &x)?;
    let (_, rc) = relation_scores(&models.relation, &h, attrs)?;
    Ok(kink(&[
        (&gc, &g.net),
        (&cache.e, &models.embedding.net),
        (&cache.p, &models.projection.net),
        (&rc.mlp, &models.relation.net),
    ])
    .min(critic_kink(&models.discriminator, &[&fake], &a)?)
    .min(center_kink(models, &h, &rows, attrs)?))
}

/// Worst relative error of one configuration and the tensor it occurred in.
fn check(problem: &Problem, corrupt: bool) -> Result<(f64, String)> {
    let (_, mut analytic) = (problem.eval)(&problem.values)?;
    if corrupt {
        analytic.iter_mut().for_each(|g| g.scale(CORRUPTION));
    }
    let default_loss = |v: &[Matrix]| (problem.eval)(v).map(|r| r.0);
    let f: &dyn Fn(&[Matrix]) -> Result<f64> = match &problem.loss {
        Some(l) => l.as_ref(),
        None => &default_loss,
    };
    let numeric = numeric_gradient(f, &problem.values, FD_STEP)?;
    let mut worst = (0.0, String::new());
    for ((name, a), n) in problem.names.iter().zip(&analytic).zip(&numeric) {
        let e = rel_error(a, n);
        if e >= worst.0 || worst.1.is_empty() {
            worst = (e, name.clone());
        }
    }
    Ok(worst)
}

/// Runs `configs` random configurations of one suite.
pub fn run_suite(name: &str, opts: &GradcheckOptions) -> Result<SuiteResult> {
    let index = SUITES
        .iter()
        .position(|s| *s == name)
        .ok_or_else(|| Error::Contract(format!("unknown gradcheck suite `{name}`")))?;
    let corrupt = opts.corrupt.as_deref() == Some(name);
    let mut result = SuiteResult {
        name: SUITES[index],
        configs: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut rng = Rng::child(opts.seed, (index as u64) << 32);
    while result.configs < opts.configs {
        let mut problem = None;
        for _ in 0..MAX_DRAWS {
            let p = build(name, &mut rng)?;
            if p.kink >= KINK_MARGIN {
                problem = Some(p);
                break;
            }
        }
        let problem = problem.ok_or_else(|| {
            Error::Degenerate(format!("{name}: no configuration away from activation kinks"))
        })?;
        let (e, tensor) = check(&problem, corrupt)?;
        if e >= result.max_rel_error || result.worst.is_empty() {
            result.max_rel_error = e;
            result.worst = tensor;
        }
        result.configs += 1;
    }
    Ok(result)
}

/// Every suite in [`SUITES`] order.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<SuiteResult>> {
    if let Some(c) = &opts.corrupt {
        if !SUITES.contains(&c.as_str()) {
            return Err(Error::Contract(format!("unknown gradcheck suite `{c}`")));
        }
    }
    SUITES.iter().map(|s| run_suite(s, opts)).collect()
}

/// Fixed-width pass/fail table.
pub fn format_report(results: &[SuiteResult]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<18} {:>7} {:>12}  {:<10} status", "loss", "configs", "max_rel_err", "worst").unwrap();
    for r in results {
        writeln!(
            out,
            "{:<18} {:>7} {:>12.3e}  {:<10} {}",
            r.name,
            r.configs,
            r.max_rel_error,
            r.worst,
            if r.passed() { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}
