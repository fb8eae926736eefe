//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment, unknown or repeated keys are rejected and missing keys keep
//! their defaults.
//!
//! | key | default |
//! |---|---|
//! | `seed` | 0 |
//! | `lr`, `beta1`, `beta2`, `adam_eps` | 1e-3, 0.5, 0.99, 1e-8 |
//! | `batch_size`, `epochs`, `n_critic` | 64, 30, 5 |
//! | `gamma_ins`, `margin_m`, `gamma_sem` | 80, 0.4, 10 |
//! | `variant` | `adaptive` (`plain`, `margin`, `adaptive`) |
//! | `lambda_proto`, `beta_sem`, `phi_center`, `gp_coeff` | 0.001, 0.001, 0.001, 10 |
//! | `d_h`, `d_z`, `noise_dim`, `gan_hidden`, `embed_hidden` | 64, 32, 16, 128, 128 |
//! | `leaky_slope` | 0.2 |
//! | `n_synth_per_unseen` | 400 |
//! | `cls_lr`, `cls_epochs`, `cls_batch_size`, `cls_beta1`, `cls_beta2` | 1e-3, 100, 128, 0.5, 0.999 |
//! | `n_seen`, `n_unseen`, `attr_dim`, `feature_dim` | 10, 3, 20, 64 |
//! | `samples_per_class`, `noise_sigma`, `class_overlap` | 200, 1.0, 0.3 |
//! | `data_seed` | `seed` + 0x3000 |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::ContrastiveVariant;
use crate::pipeline::TrainConfig;

/// Offset of the dataset seed when `data_seed` is not given.
pub const SEED_OFFSET_DATA: u64 = 0x3000;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: SyntheticSpec {
                seed: SEED_OFFSET_DATA,
                ..SyntheticSpec::default()
            },
        }
    }
}

fn value<T: FromStr>(raw: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| format!("invalid value `{raw}`: {e}"))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = HashSet::new();
        let mut variant: Option<(usize, String)> = None;
        let mut data_seed = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, val) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            let res = match key {
                "variant" => {
                    variant = Some((line, val.to_string()));
                    Ok(())
                }
                "data_seed" => value(val).map(|v| data_seed = Some(v)),
                _ => cfg.set(key, val),
            };
            res.map_err(|msg| Error::Config { line, msg })?;
        }
        let t = &mut cfg.train;
        cfg.data.seed = data_seed.unwrap_or(t.seed.wrapping_add(SEED_OFFSET_DATA));
        let (line, name) = variant.unwrap_or((0, t.variant.name().to_string()));
        t.variant = ContrastiveVariant::parse(&name, t.margin_m).ok_or_else(|| Error::Config {
            line,
            msg: format!("unknown variant `{name}` (plain, margin, adaptive)"),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Both parts are valid; failures are reported as config errors.
    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .and_then(|()| self.data.validate())
            .map_err(|e| match e {
                Error::Contract(msg) => Error::Config { line: 0, msg },
                other => other,
            })
    }

    fn set(&mut self, key: &str, val: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => t.seed = value(val)?,
            "lr" => t.lr = value(val)?,
            "beta1" => t.beta1 = value(val)?,
            "beta2" => t.beta2 = value(val)?,
            "adam_eps" => t.adam_eps = value(val)?,
            "batch_size" => t.batch_size = value(val)?,
            "epochs" => t.epochs = value(val)?,
            "n_critic" => t.n_critic = value(val)?,
            "gamma_ins" => t.gamma_ins = value(val)?,
            "margin_m" => t.margin_m = value(val)?,
            "gamma_sem" => t.gamma_sem = value(val)?,
            "lambda_proto" => t.weights.lambda_proto = value(val)?,
            "beta_sem" => t.weights.beta_sem = value(val)?,
            "phi_center" => t.weights.phi_center = value(val)?,
            "gp_coeff" => t.weights.gp_coeff = value(val)?,
            "d_h" => t.d_h = value(val)?,
            "d_z" => t.d_z = value(val)?,
            "noise_dim" => t.noise_dim = value(val)?,
            "gan_hidden" => t.gan_hidden = value(val)?,
            "embed_hidden" => t.embed_hidden = value(val)?,
            "leaky_slope" => t.leaky_slope = value(val)?,
            "n_synth_per_unseen" => t.n_synth_per_unseen = value(val)?,
            "cls_lr" => t.classifier.lr = value(val)?,
            "cls_epochs" => t.classifier.epochs = value(val)?,
            "cls_batch_size" => t.classifier.batch_size = value(val)?,
            "cls_beta1" => t.classifier.beta1 = value(val)?,
            "cls_beta2" => t.classifier.beta2 = value(val)?,
            "n_seen" => d.n_seen = value(val)?,
            "n_unseen" => d.n_unseen = value(val)?,
            "attr_dim" => d.attr_dim = value(val)?,
            "feature_dim" => d.feature_dim = value(val)?,
            "samples_per_class" => d.samples_per_class = value(val)?,
            "noise_sigma" => d.noise_sigma = value(val)?,
            "class_overlap" => d.class_overlap = value(val)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every key with its value, in a form [`Config::parse`] reads back
    /// to an equal config.
    pub fn to_text(&self) -> String {
        let (t, d) = (&self.train, &self.data);
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k} = {v}").unwrap();
        kv("seed", &t.seed);
        kv("lr", &t.lr);
        kv("beta1", &t.beta1);
        kv("beta2", &t.beta2);
        kv("adam_eps", &t.adam_eps);
        kv("batch_size", &t.batch_size);
        kv("epochs", &t.epochs);
        kv("n_critic", &t.n_critic);
        kv("gamma_ins", &t.gamma_ins);
        kv("margin_m", &t.margin_m);
        kv("gamma_sem", &t.gamma_sem);
        kv("variant", &t.variant.name());
        kv("lambda_proto", &t.weights.lambda_proto);
        kv("beta_sem", &t.weights.beta_sem);
        kv("phi_center", &t.weights.phi_center);
        kv("gp_coeff", &t.weights.gp_coeff);
        kv("d_h", &t.d_h);
        kv("d_z", &t.d_z);
        kv("noise_dim", &t.noise_dim);
        kv("gan_hidden", &t.gan_hidden);
        kv("embed_hidden", &t.embed_hidden);
        kv("leaky_slope", &t.leaky_slope);
        kv("n_synth_per_unseen", &t.n_synth_per_unseen);
        kv("cls_lr", &t.classifier.lr);
        kv("cls_epochs", &t.classifier.epochs);
        kv("cls_batch_size", &t.classifier.batch_size);
        kv("cls_beta1", &t.classifier.beta1);
        kv("cls_beta2", &t.classifier.beta2);
        kv("n_seen", &d.n_seen);
        kv("n_unseen", &d.n_unseen);
        kv("attr_dim", &d.attr_dim);
        kv("feature_dim", &d.feature_dim);
        kv("samples_per_class", &d.samples_per_class);
        kv("noise_sigma", &d.noise_sigma);
        kv("class_overlap", &d.class_overlap);
        kv("data_seed", &d.seed);
        out
    }
}
