mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pce_gzsl::data::{generate_synthetic, SyntheticSpec};
use pce_gzsl::eval::{evaluate, harmonic_mean, per_class_top1, MetricBlock, SoftmaxClassifier};
use pce_gzsl::gradcheck::{run_all, GradcheckOptions};
use pce_gzsl::losses::{
    gradient_penalty, proto_contrastive_loss, proto_contrastive_loss_with_alpha, semantic_loss,
    ContrastiveVariant, MarginPair,
};
use pce_gzsl::models::{Discriminator, Mlp, MlpSpec};
use pce_gzsl::ndcore::l2_normalize_rows;
use pce_gzsl::pipeline::{train, TrainConfig};
use pce_gzsl::{Matrix, Rng};

const GRADCHECK_CONFIGS: usize = 100;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const ANCHOR_TOL: f64 = 1e-12;
const CHAIN_TOL: f64 = 1e-12;
const CHAIN_BATCHES: u64 = 50;
const H_TOL: f64 = 0.05;
const H_MIN_ROWS: usize = 5;
const ORACLE_INSTANCES: u64 = 50;
const DESK_SEEDS: u64 = 5;
const DESK_H_MIN: f64 = 70.0;
const DESK_BUDGET: Duration = Duration::from_secs(300);
const ADAPTIVE_SLACK: f64 = 1.0;

/// (dataset, method, U, S, H) as printed in the benchmark table.
const TABLE: &[(&str, &str, f64, f64, f64)] = &[
    ("AWA1", "DEVISE", 13.4, 68.7, 22.4),
    ("AWA1", "DAP", 0.0, 88.7, 0.0),
    ("AWA1", "SSE", 7.0, 80.5, 12.9),
    ("AWA1", "ESZSL", 6.6, 75.6, 12.1),
    ("AWA1", "ALE", 16.8, 76.1, 27.5),
    ("AWA1", "LATEM", 7.3, 71.7, 13.3),
    ("AWA1", "SYNC", 8.9, 87.3, 16.2),
    ("AWA1", "TCN", 49.4, 76.5, 60.0),
    ("AWA1", "SE-GZSL", 56.3, 67.8, 61.5),
    ("AWA1", "f-CLSWGAN", 57.9, 61.4, 59.6),
    ("AWA1", "CADA-VAE", 57.3, 72.8, 64.1),
    ("AWA1", "LisGAN", 52.6, 76.3, 62.3),
    ("AWA1", "FREE", 62.9, 69.4, 66.0),
    ("AWA1", "HSVA", 59.3, 76.6, 66.8),
    ("AWA1", "CE-GZSL", 65.3, 73.4, 69.1),
    ("AWA1", "SCE-GZSL", 65.1, 75.1, 69.7),
    ("AWA1", "DFTN", 56.3, 83.6, 67.3),
    ("AWA1", "CvDSF", 64.5, 71.4, 67.8),
    ("AWA1", "Ours", 67.2, 73.8, 70.3),
    ("AWA2", "TCN", 61.2, 65.8, 63.4),
    ("AWA2", "SE-GZSL", 58.3, 68.1, 62.8),
    ("AWA2", "CADA-VAE", 55.8, 75.0, 63.9),
    ("AWA2", "f-VAEGAN-D2", 57.6, 70.6, 63.5),
    ("AWA2", "TF-VAEGAN", 59.8, 75.1, 66.6),
    ("AWA2", "FREE", 60.4, 75.4, 67.1),
    ("AWA2", "HSVA", 56.7, 79.8, 66.3),
    ("AWA2", "CE-GZSL", 63.1, 78.6, 70.0),
    ("AWA2", "SCE-GZSL", 64.3, 77.5, 70.3),
    ("AWA2", "DFTN", 61.1, 78.5, 68.7),
    ("AWA2", "CvDSF", 65.6, 70.4, 67.9),
    ("AWA2", "Ours", 67.0, 74.8, 70.6),
    ("CUB", "DEVISE", 23.8, 53.0, 32.8),
    ("CUB", "DAP", 1.7, 67.9, 3.3),
    ("CUB", "SSE", 8.5, 46.9, 14.4),
    ("CUB", "ESZSL", 12.6, 63.8, 21.0),
    ("CUB", "ALE", 23.7, 62.8, 34.4),
    ("CUB", "LATEM", 15.2, 57.3, 24.0),
    ("CUB", "SYNC", 11.5, 70.9, 19.8),
    ("CUB", "TCN", 52.6, 52.0, 52.3),
    ("CUB", "SE-GZSL", 41.5, 53.3, 46.7),
    ("CUB", "f-CLSWGAN", 43.7, 57.7, 49.7),
    ("CUB", "CADA-VAE", 51.6, 53.5, 52.4),
    ("CUB", "f-VAEGAN-D2", 48.4, 60.1, 53.6),
    ("CUB", "LisGAN", 46.5, 57.9, 51.6),
    ("CUB", "TF-VAEGAN", 52.8, 64.7, 58.1),
    ("CUB", "FREE", 55.7, 59.9, 57.7),
    ("CUB", "HSVA", 52.7, 58.3, 55.3),
    ("CUB", "CE-GZSL", 63.9, 66.8, 65.3),
    ("CUB", "SCE-GZSL", 66.5, 68.6, 67.6),
    ("CUB", "DFTN", 61.8, 67.2, 64.4),
    ("CUB", "CvDSF", 53.7, 60.0, 56.9),
    ("CUB", "Ours", 66.9, 65.8, 66.4),
    ("SUN", "DEVISE", 16.9, 27.4, 20.9),
    ("SUN", "DAP", 4.2, 25.1, 7.2),
    ("SUN", "SSE", 2.1, 36.4, 4.0),
    ("SUN", "ESZSL", 11.0, 27.9, 15.8),
    ("SUN", "ALE", 21.8, 33.1, 26.3),
    ("SUN", "LATEM", 14.7, 28.8, 19.5),
    ("SUN", "SYNC", 7.9, 43.3, 13.4),
    ("SUN", "TCN", 31.2, 37.3, 34.0),
    ("SUN", "SE-GZSL", 30.5, 40.9, 34.9),
    ("SUN", "f-CLSWGAN", 42.6, 36.6, 39.4),
    ("SUN", "CADA-VAE", 47.2, 35.7, 40.6),
    ("SUN", "f-VAEGAN-D2", 45.1, 38.0, 41.3),
    ("SUN", "LisGAN", 42.9, 37.8, 40.2),
    ("SUN", "TF-VAEGAN", 45.6, 40.7, 43.0),
    ("SUN", "FREE", 47.4, 37.2, 41.7),
    ("SUN", "HSVA", 48.6, 39.0, 43.3),
    ("SUN", "CE-GZSL", 48.8, 38.6, 43.1),
    ("SUN", "SCE-GZSL", 45.9, 39.7, 42.7),
    ("SUN", "CvDSF", 49.2, 38.0, 42.9),
    ("SUN", "Ours", 51.3, 37.9, 43.6),
];

const SMALL_CONFIG: &str = "\
seed = 7
n_seen = 5
n_unseen = 2
attr_dim = 8
feature_dim = 16
samples_per_class = 40
epochs = 3
batch_size = 32
d_h = 16
d_z = 8
noise_dim = 4
gan_hidden = 32
embed_hidden = 32
n_synth_per_unseen = 50
cls_epochs = 20
";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn at(theta: f64) -> Vec<f64> {
    vec![theta.cos(), theta.sin()]
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let opts = GradcheckOptions { seed: 0, configs: GRADCHECK_CONFIGS, ..Default::default() };
    let results = run_all(&opts).unwrap();
    let elapsed = start.elapsed();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    outcome(
        failed.is_empty() && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} suites x {} configs, worst rel err {:.2e} ({}), {:.1}s, failing {:?}",
            results.len(),
            GRADCHECK_CONFIGS,
            worst.max_rel_error,
            worst.name,
            elapsed.as_secs_f64(),
            failed
        ),
    )
}

fn anchors() -> Outcome {
    let mut rng = Rng::new(0xA1);
    let mut worst = [0.0f64; 4];
    for _ in 0..20 {
        let (rot, phi) = (rng.uniform() * 6.0, 0.1 + rng.uniform() * 1.4);
        let gamma = 1.0 + rng.uniform() * 79.0;
        let protos = Matrix::from_rows(&[at(rot), at(rot + std::f64::consts::PI)]).unwrap();
        let z = Matrix::from_rows(&[at(rot + phi), at(rot - phi)]).unwrap();
        let plain = proto_contrastive_loss(&protos, &z, &[0, 1], gamma, ContrastiveVariant::Plain).unwrap();
        worst[0] = worst[0].max((plain.loss - 2f64.ln()).abs());

        // m = -0.1 zeroes both factors once positives sit above 0.9 and negatives below 0.1
        let protos = Matrix::from_rows(&[at(rot), at(rot + 1.8)]).unwrap();
        let z = Matrix::from_rows(&[at(rot + 0.2 * rng.uniform()), at(rot + 1.8 - 0.2 * rng.uniform())]).unwrap();
        let variant = ContrastiveVariant::AdaptiveMargin(MarginPair::from_margin(-0.1));
        let adaptive = proto_contrastive_loss(&protos, &z, &[0, 1], gamma, variant).unwrap();
        worst[1] = worst[1].max((adaptive.loss - 2f64.ln()).abs());

        let (n, s) = (1 + rng.below(8), 1 + rng.below(12));
        let labels: Vec<usize> = (0..n).map(|_| rng.below(s)).collect();
        let scores = Matrix::filled(n, s, rng.normal() * 5.0);
        let (loss, _) = semantic_loss(&scores, &labels, 1.0 + rng.uniform() * 9.0).unwrap();
        worst[2] = worst[2].max((loss - (s as f64).ln()).abs());

        let (f, a) = (1 + rng.below(16), 1 + rng.below(8));
        let w = l2_normalize_rows(&gaussian(1, f, &mut rng)).unwrap();
        let mut net = Mlp::init(MlpSpec::new(vec![f + a, 1], 0.2), &mut rng).unwrap();
        let mut col = w.data().to_vec();
        col.extend(std::iter::repeat_n(0.0, a));
        net.layers[0].weight.value = Matrix::new(f + a, 1, col).unwrap();
        net.layers[0].bias.value.set(0, 0, rng.normal());
        let mut d = Discriminator { net, feature_dim: f, attr_dim: a };
        let b = 1 + rng.below(8);
        let (xr, xf, at_) = (gaussian(b, f, &mut rng), gaussian(b, f, &mut rng), gaussian(b, a, &mut rng));
        let gp = gradient_penalty(&mut d, &xr, &xf, &at_, &mut rng, 1.0).unwrap();
        worst[3] = worst[3].max(gp.abs());
    }
    outcome(
        worst.iter().all(|&e| e <= ANCHOR_TOL),
        format!(
            "max |dev| plain ln2 {:.1e}, adaptive ln2 {:.1e}, semantic ln|S| {:.1e}, unit critic GP {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn reduction_chain() -> Outcome {
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..CHAIN_BATCHES {
        let mut rng = Rng::new(0xC0 + seed);
        let (c, b, d) = (2 + rng.below(4), 3 + rng.below(6), 2 + rng.below(14));
        let p = l2_normalize_rows(&gaussian(c, d, &mut rng)).unwrap();
        let z = l2_normalize_rows(&gaussian(b, d, &mut rng)).unwrap();
        let rows: Vec<usize> = (0..b).map(|i| if i < c { i } else { rng.below(c) }).collect();
        let gamma = 1.0 + rng.uniform() * 79.0;
        let pair = MarginPair::from_margin(rng.uniform() * 0.8 - 0.2);
        let ones = Matrix::filled(c, b, 1.0);
        let adaptive = proto_contrastive_loss_with_alpha(&p, &z, &rows, gamma, pair, &ones).unwrap();
        let margin = proto_contrastive_loss(&p, &z, &rows, gamma, ContrastiveVariant::Margin(pair)).unwrap();
        let zero = proto_contrastive_loss(&p, &z, &rows, gamma, ContrastiveVariant::Margin(MarginPair::ZERO)).unwrap();
        let plain = proto_contrastive_loss(&p, &z, &rows, gamma, ContrastiveVariant::Plain).unwrap();
        let dev = |a: &pce_gzsl::losses::ContrastiveOutput, b: &pce_gzsl::losses::ContrastiveOutput| {
            let scale = b.loss.abs().max(1.0);
            ((a.loss - b.loss).abs() / scale)
                .max(a.grad_z.sub(&b.grad_z).unwrap().max_abs() / b.grad_z.max_abs().max(1.0))
                .max(a.grad_protos.sub(&b.grad_protos).unwrap().max_abs() / b.grad_protos.max_abs().max(1.0))
        };
        worst.0 = worst.0.max(dev(&adaptive, &margin));
        worst.1 = worst.1.max(dev(&zero, &plain));
    }
    outcome(
        worst.0 <= CHAIN_TOL && worst.1 <= CHAIN_TOL,
        format!(
            "{CHAIN_BATCHES} batches, alpha=1 vs margin {:.1e}, zero margin vs plain {:.1e}",
            worst.0, worst.1
        ),
    )
}

fn metric_arithmetic() -> Outcome {
    let mut missed = Vec::new();
    let mut within = 0;
    for &(ds, method, u, s, h) in TABLE {
        let got = harmonic_mean(u, s).unwrap();
        if (got - h).abs() <= H_TOL + 1e-9 {
            within += 1;
        } else {
            missed.push(format!("{method}/{ds} {got:.2} vs {h}"));
        }
    }
    let ours = harmonic_mean(67.0, 74.8).unwrap();
    let ce = harmonic_mean(63.1, 78.6).unwrap();
    outcome(
        within >= H_MIN_ROWS,
        format!(
            "{within}/{} rows within {H_TOL}; Ours/AWA2 {ours:.2}, CE-GZSL/AWA2 {ce:.2}; outside: {}",
            TABLE.len(),
            missed.join("; ")
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut top1_mismatch = 0;
    let mut eval_mismatch = 0;
    for seed in 0..ORACLE_INSTANCES {
        let mut rng = Rng::new(0x0E + seed);
        let dim = 1 + rng.below(8);
        let classes: Vec<usize> = (0..2 + rng.below(6)).map(|c| 3 * c).collect();
        let n = classes.len() + rng.below(60);
        let labels: Vec<usize> =
            (0..n).map(|i| classes[if i < classes.len() { i } else { rng.below(classes.len()) }]).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let mut clf = SoftmaxClassifier::zeros(dim, classes.clone());
        clf.weight.value = gaussian(dim, classes.len(), &mut rng);
        clf.bias.value = gaussian(1, classes.len(), &mut rng);
        let got = per_class_top1(&clf, &Matrix::from_rows(&rows).unwrap(), &labels, &classes).unwrap();
        if got != common::tally(&common::predict(&clf, &rows), &labels, &classes) {
            top1_mismatch += 1;
        }

        let (spec, cfg) = common::toy(seed, 2 + rng.below(3), 1 + rng.below(2));
        let ds = generate_synthetic(&spec).unwrap();
        let (models, _) = train(&ds, &cfg).unwrap();
        let ev = evaluate(&models, &ds, &cfg).unwrap();
        let (u, s, h, t) = common::metrics(&ev, &models.embedding.net, &ds);
        if ev.metrics != (MetricBlock { u, s, h, t }) {
            eval_mismatch += 1;
        }
    }
    outcome(
        top1_mismatch == 0 && eval_mismatch == 0,
        format!(
            "{ORACLE_INSTANCES} instances, per_class_top1 mismatches {top1_mismatch}, evaluate mismatches {eval_mismatch}"
        ),
    )
}

fn desk_run(seed: u64, variant: &str) -> (f64, Duration) {
    let ds = generate_synthetic(&SyntheticSpec { seed, ..SyntheticSpec::default() }).unwrap();
    let cfg = TrainConfig { seed, ..TrainConfig::default() }.with_variant(variant).unwrap();
    let start = Instant::now();
    let (models, _) = train(&ds, &cfg).unwrap();
    let elapsed = start.elapsed();
    (evaluate(&models, &ds, &cfg).unwrap().metrics.h, elapsed)
}

fn desk_scale() -> (Outcome, String) {
    let mut adaptive = Vec::new();
    let mut plain = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..DESK_SEEDS {
        let (ha, ta) = desk_run(seed, "adaptive");
        let (hp, tp) = desk_run(seed, "plain");
        slowest = slowest.max(ta).max(tp);
        adaptive.push(ha);
        plain.push(hp);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mp) = (mean(&adaptive), mean(&plain));
    let wins = adaptive.iter().zip(&plain).filter(|(a, p)| a > p).count();
    let fmt = |v: &[f64]| v.iter().map(|h| format!("{h:.2}")).collect::<Vec<_>>().join(" ");
    let pass = adaptive[0] >= DESK_H_MIN && slowest < DESK_BUDGET && ma >= mp - ADAPTIVE_SLACK;
    let detail = format!(
        "seed 0 adaptive H {:.2} (min {DESK_H_MIN}), slowest training {:.1}s; adaptive H [{}] mean {ma:.2}, plain H [{}] mean {mp:.2}",
        adaptive[0],
        slowest.as_secs_f64(),
        fmt(&adaptive),
        fmt(&plain)
    );
    let info = format!(
        "INFO criterion 6: adaptive strictly above plain on {wins}/{DESK_SEEDS} seeds ({})",
        if 2 * wins > DESK_SEEDS as usize { "majority" } else { "no majority" }
    );
    (outcome(pass, detail), info)
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pcegzsl")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `<name>.cfg` and generates `<name>-data` from it.
fn prepare(dir: &Path, name: &str, config: &str) {
    let cfg = dir.join(format!("{name}.cfg"));
    fs::write(&cfg, config).unwrap();
    let o = bin(&["gen-data", "--config", path(&cfg), "--out", path(&dir.join(format!("{name}-data")))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn train_cli(dir: &Path, name: &str, run: &str, variant: Option<&str>) -> bool {
    let cfg = dir.join(format!("{name}.cfg"));
    let (data, out) = (dir.join(format!("{name}-data")), dir.join(run));
    let mut args = vec!["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&out)];
    if let Some(v) = variant {
        args.extend(["--variant", v]);
    }
    bin(&args).status.success()
}

fn determinism(dir: &Path) -> Outcome {
    let mut ok = true;
    for run in ["a", "b"] {
        ok &= train_cli(dir, "small", run, None);
        let ck = dir.join(run).join("checkpoint.pcem");
        ok &= bin(&["eval", "--checkpoint", path(&ck), "--data", path(&dir.join("small-data"))]).status.success();
    }
    let mut differing = Vec::new();
    for file in ["checkpoint.pcem", "metrics.csv", "eval.csv"] {
        let a = fs::read(dir.join("a").join(file)).unwrap_or_default();
        let b = fs::read(dir.join("b").join(file)).unwrap_or_default();
        if a.is_empty() || a != b {
            differing.push(file);
        }
    }
    outcome(
        ok && differing.is_empty(),
        format!("checkpoint.pcem, metrics.csv, eval.csv compared; differing {differing:?}"),
    )
}

fn ablation(dir: &Path) -> Outcome {
    let mut rows = Vec::new();
    let mut ok = true;
    for variant in ["plain", "margin", "adaptive"] {
        let run = format!("ablation-{variant}");
        ok &= train_cli(dir, "desk", &run, Some(variant));
        let text = fs::read_to_string(dir.join(&run).join("metrics.csv")).unwrap_or_default();
        let lines: Vec<&str> = text.lines().collect();
        ok &= lines.len() == 2 && lines[0] == "setting,U,S,H,T" && lines[1].starts_with(&format!("{variant},"));
        rows.push(lines.get(1).copied().unwrap_or("").to_string());
    }
    outcome(ok && rows.len() == 3, format!("rows: {}", rows.join(" | ")))
}

fn main() {
    let scratch = tempfile::TempDir::new().unwrap();
    prepare(scratch.path(), "small", SMALL_CONFIG);
    prepare(scratch.path(), "desk", "");

    let mut lines = Vec::new();
    let mut all = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        all &= o.pass;
        let line = format!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        lines.push(line);
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "closed-form anchors", anchors());
    report(3, "reduction chain", reduction_chain());
    report(4, "metric arithmetic", metric_arithmetic());
    report(5, "oracle equivalence", oracle_equivalence());
    let (desk, info) = desk_scale();
    report(6, "desk-scale run", desk);
    println!("{info}");
    report(7, "determinism", determinism(scratch.path()));
    report(8, "ablation harness", ablation(scratch.path()));

    if !all {
        std::process::exit(1);
    }
}
