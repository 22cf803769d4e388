//! End-to-end acceptance checks, one test per criterion. Each prints a PASS/FAIL line.
//!
//! The digit-toy criteria train fifteen small models on MNIST (expected under
//! `data/mnist`, or wherever `STYLESMOOTH_MNIST` points). Trained checkpoints are cached
//! under the cargo test tmpdir and reused while their configuration is unchanged.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use stylesmooth::losses::{
    content_preservation_loss, cycle_consistency_loss, diversity_sensitive_loss, sphere_regularization,
    style_reconstruction_loss, style_regularization, triplet_loss,
};
use stylesmooth::metrics::{
    alignment_score, encode_dataset, frechet_distance, gap_distribution, harmonic_mean, linear_probe_accuracy,
    linearity_harness, mean_squared_norm, ps_protocol, sample_path_endpoints, third_class_fraction,
    uniformity_score, EndpointKind, LinearityColumn, PsProtocol,
};
use stylesmooth::perceptual::{
    scalar, stack_distance, BackboneSpec, ConvBackbone, DistanceBackend, FeatureExtractor, FeatureStack, Lpips,
    PixelL2, RandomProjection,
};
use stylesmooth::stylespace::InterpStrategy;
use stylesmooth_cli::commands::{cmd_evaluate, cmd_train, cmd_train_backbone, EvalContext, Metric};
use stylesmooth_cli::config::ExperimentConfig;

fn verdict(criterion: usize, ok: bool, detail: &str) {
    let line = format!(
        "criterion {criterion}: {} {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    let mut err = std::io::stderr().lock();
    writeln!(err, "{line}").unwrap();
    assert!(ok, "{line}");
}

fn note(text: &str) {
    writeln!(std::io::stderr().lock(), "  {text}").unwrap();
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor {
    let data: Vec<f64> = (0..n * side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, (n, 1, side, side), &Device::Cpu).unwrap()
}

fn random_backbone(seed: u64) -> Arc<dyn FeatureExtractor> {
    let spec = BackboneSpec {
        in_channels: 1,
        image_size: 8,
        channels: vec![4, 6],
        num_classes: 3,
    };
    Arc::new(ConvBackbone::new(spec, seed).unwrap().frozen(DType::F64).unwrap())
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

#[test]
fn criterion_1_path_score_oracles() {
    let start = Instant::now();
    let mut ok = true;
    ok &= uniformity_score(&[1.0, 1.0, 1.0, 1.0]).unwrap() == 1.0;
    ok &= uniformity_score(&[0.0, 0.0, 0.0, 1.0]).unwrap() == 0.25;
    ok &= (uniformity_score(&[1.0, 2.0, 3.0]).unwrap() - 7.0 / 9.0).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let backends: Vec<Box<dyn DistanceBackend>> = vec![
        Box::new(PixelL2),
        Box::new(RandomProjection::new(64, 16, 5).unwrap()),
        Box::new(Lpips::star(random_backbone(9))),
    ];
    let mut worst: f64 = 0.0;
    for p in 0..1000 {
        let backend = &backends[p % backends.len()];
        let steps = rng.random_range(1..=8);
        let frames = random_images(&mut rng, steps + 1, 8);
        let d = to_vec(&backend.distance(&frames.narrow(0, 0, steps).unwrap(), &frames.narrow(0, 1, steps).unwrap()).unwrap());
        let end = to_vec(&backend.distance(&frames.narrow(0, 0, 1).unwrap(), &frames.narrow(0, steps, 1).unwrap()).unwrap())[0];
        worst = worst.max(alignment_score(end, &d).unwrap());
    }
    ok &= worst <= 1.0 + 1e-9;

    let mut max_err: f64 = 0.0;
    for _ in 0..1000 {
        let (a, u): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let oracle = if a + u == 0.0 { 0.0 } else { 2.0 * a * u / (a + u) };
        max_err = max_err.max((harmonic_mean(a, u) - oracle).abs());
    }
    ok &= max_err <= 1e-12;
    verdict(
        1,
        ok,
        &format!(
            "(max alignment {worst:.6}, harmonic error {max_err:.1e}, {:.2}s)",
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_metricity() {
    let start = Instant::now();
    let star = Lpips::star(random_backbone(21));
    let backends: [(&str, &dyn DistanceBackend); 2] = [("lpips_star", &star), ("pixel_l2", &PixelL2)];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = BTreeMap::new();
    for (name, be) in backends {
        let mut count = 0;
        for _ in 0..1000 {
            let x = random_images(&mut rng, 3, 8);
            let (a, b, c) = (x.narrow(0, 0, 1).unwrap(), x.narrow(0, 1, 1).unwrap(), x.narrow(0, 2, 1).unwrap());
            let ab = scalar(&be.distance(&a, &b).unwrap()).unwrap();
            let bc = scalar(&be.distance(&b, &c).unwrap()).unwrap();
            let ac = scalar(&be.distance(&a, &c).unwrap()).unwrap();
            if ac > ab + bc + 1e-12 * (ab + bc) {
                count += 1;
            }
        }
        violations.insert(name, count);
    }
    let stack = |v: f64| {
        let t = Tensor::new(&[v], &Device::Cpu).unwrap().reshape((1, 1, 1, 1)).unwrap();
        FeatureStack::new(vec![t], vec![1.0]).unwrap()
    };
    let sq = |a: f64, b: f64| scalar(&stack_distance(&stack(a), &stack(b), true).unwrap()).unwrap();
    let squared_violates = sq(0.0, 2.0) > sq(0.0, 1.0) + sq(1.0, 2.0);
    let ok = violations.values().all(|&c| c == 0) && squared_violates;
    verdict(
        2,
        ok,
        &format!(
            "(violations {violations:?}; squared form d(0,2)={} vs d(0,1)+d(1,2)={}, {:.2}s)",
            sq(0.0, 2.0),
            sq(0.0, 1.0) + sq(1.0, 2.0),
            start.elapsed().as_secs_f64()
        ),
    );
}

type LossFn = Box<dyn Fn(&[Tensor]) -> Tensor>;

/// Relative error between the autodiff gradient and central differences, taken over
/// the concatenated gradient of every input.
fn gradient_error(inputs: &[Tensor], loss: &LossFn, eps: f64) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = loss(&tensors).backward().unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        analytic.extend(to_vec(grads.get(v).unwrap()));
        let base = to_vec(v.as_tensor());
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut moved = base.clone();
                moved[i] += delta;
                let mut args: Vec<Tensor> = inputs.to_vec();
                args[k] = Tensor::from_vec(moved, inputs[k].shape(), &Device::Cpu).unwrap();
                scalar(&loss(&args)).unwrap()
            };
            numeric.push((eval(eps) - eval(-eps)) / (2.0 * eps));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

#[test]
fn criterion_3_loss_gradients() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut randn = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    };
    let codes = || -> Vec<usize> { vec![5, 3] };
    let imgs = || -> Vec<usize> { vec![3, 1, 4, 4] };
    let cases: Vec<(&str, Vec<Tensor>, LossFn)> = vec![
        (
            "tri",
            vec![randn(&codes()), randn(&codes()), randn(&codes())],
            Box::new(|t: &[Tensor]| triplet_loss(&t[0], &t[1], &t[2], 2.0).unwrap()),
        ),
        ("sr", vec![randn(&codes())], Box::new(|t: &[Tensor]| style_regularization(&t[0]).unwrap())),
        ("sph", vec![randn(&codes())], Box::new(|t: &[Tensor]| sphere_regularization(&t[0]).unwrap())),
        (
            "sty",
            vec![randn(&codes()), randn(&codes())],
            Box::new(|t: &[Tensor]| style_reconstruction_loss(&t[0], &t[1]).unwrap()),
        ),
        (
            "ds",
            vec![randn(&imgs()), randn(&imgs())],
            Box::new(|t: &[Tensor]| diversity_sensitive_loss(&t[0], &t[1]).unwrap()),
        ),
        (
            "cyc",
            vec![randn(&imgs()), randn(&imgs())],
            Box::new(|t: &[Tensor]| cycle_consistency_loss(&t[0], &t[1]).unwrap()),
        ),
        (
            "cont",
            vec![randn(&imgs()), randn(&imgs())],
            Box::new(|t: &[Tensor]| content_preservation_loss(&t[0], &t[1], &PixelL2).unwrap()),
        ),
    ];
    let mut errors = BTreeMap::new();
    for (name, inputs, loss) in &cases {
        errors.insert(*name, gradient_error(inputs, loss, 1e-4));
    }
    let ok = errors.values().all(|&e| e <= 1e-3);
    let shown: Vec<String> = errors.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        3,
        ok,
        &format!("(relative errors: {}; {:.2}s)", shown.join(", "), start.elapsed().as_secs_f64()),
    );
}

#[test]
fn criterion_4_fid_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (500, 16);
    let mix: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let raw: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let x = raw * mix;
    let self_fid = frechet_distance(&x, &x).unwrap();
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shifted = DMatrix::from_fn(n, d, |i, j| x[(i, j)] + v[j]);
    let offset_fid = frechet_distance(&x, &shifted).unwrap();
    let norm2: f64 = v.iter().map(|a| a * a).sum();
    let ok = self_fid.abs() <= 1e-6 && (offset_fid - norm2).abs() <= 1e-4;
    verdict(
        4,
        ok,
        &format!(
            "(fid(X,X)={self_fid:.2e}, offset fid {offset_fid:.8} vs |v|^2 {norm2:.8}, {:.2}s)",
            start.elapsed().as_secs_f64()
        ),
    );
}

fn mnist_root() -> PathBuf {
    std::env::var_os("STYLESMOOTH_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data/mnist"))
}

fn toy_base() -> ExperimentConfig {
    let root = mnist_root();
    assert!(
        root.join("train-images-idx3-ubyte").exists() || root.join("train-images-idx3-ubyte.gz").exists(),
        "MNIST not found under {} (set STYLESMOOTH_MNIST)",
        root.display()
    );
    let mut cfg = ExperimentConfig::load(&workspace().join("configs/mnist_toy.toml")).unwrap();
    cfg.train.dataset.root = root;
    cfg
}

const TOY_CONFIGS: [&str; 5] = ["baseline", "sr_0.01", "sr_0.1", "sr_1.0", "tri_sr"];

fn toy_config(name: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = toy_base();
    cfg.train.seed = seed;
    let s = &mut cfg.train.smooth;
    match name {
        "baseline" => {}
        "sr_0.01" | "sr_0.1" | "sr_1.0" => {
            s.use_sr = true;
            s.lambda_sr = name[3..].parse().unwrap();
        }
        "tri_sr" => {
            s.use_sr = true;
            s.lambda_sr = 1.0;
            s.use_tri = true;
            s.margin_alpha = 0.5;
        }
        other => panic!("unknown toy config {other}"),
    }
    cfg.out = cache_dir().join(format!("{name}_seed{seed}"));
    cfg
}

static TRAINING: Mutex<()> = Mutex::new(());

/// Final checkpoint of a toy run, training it unless an identical run is cached.
fn toy_checkpoint(name: &str, seed: u64) -> (ExperimentConfig, PathBuf) {
    let _guard = TRAINING.lock().unwrap_or_else(|e| e.into_inner());
    let mut cfg = toy_config(name, seed);
    let ck = cfg.out.join("checkpoints/final");
    let echo = std::fs::read_to_string(cfg.out.join("config.toml")).unwrap_or_default();
    if echo == cfg.to_toml().unwrap() && ck.with_extension("safetensors").exists() {
        return (cfg, ck);
    }
    let start = Instant::now();
    cmd_train(&mut cfg, None, None).unwrap();
    note(&format!("trained {name} seed {seed} in {:.0}s", start.elapsed().as_secs_f64()));
    (cfg, ck)
}

fn toy_backbone() -> PathBuf {
    let _guard = TRAINING.lock().unwrap_or_else(|e| e.into_inner());
    let mut cfg = toy_base();
    cfg.out = cache_dir().join("backbone");
    let path = cfg.out.join("backbone.safetensors");
    if !path.exists() {
        cmd_train_backbone(&cfg, 0).unwrap();
    }
    path
}

#[derive(Debug, Clone, Copy)]
struct ToyStats {
    mean_sq_norm: f64,
    probe: f64,
    third: f64,
    gap_median: f64,
    ps_inter: f64,
}

fn toy_stats(name: &str, seed: u64) -> ToyStats {
    let (cfg, ck) = toy_checkpoint(name, seed);
    let ctx = EvalContext::load(&cfg, &ck).unwrap();
    let test = &ctx.test;
    let codes = encode_dataset(ctx.encoder(), test, DType::F32).unwrap();
    let labels = test.labels();
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..codes.len()).partition(|i| i % 2 == 0);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (idx.iter().map(|&i| codes[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (xa, ya) = pick(&train_idx);
    let (xb, yb) = pick(&test_idx);
    let probe = linear_probe_accuracy(&xa, &ya, &xb, &yb, 10, 300).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let third = third_class_fraction(&codes, labels, 2, 7, 100, 10, 10, &mut rng).unwrap();
    let (gap, _) = gap_distribution(ctx.encoder(), test, 2000, DType::F32, &mut rng).unwrap();
    let protocol = PsProtocol {
        n_paths: 100,
        steps: 19,
        strategy: InterpStrategy::Lerp,
        kind: EndpointKind::Inter,
    };
    let (ps, _) = ps_protocol(ctx.generator(), ctx.provider(cfg.eval.endpoints), test, &PixelL2, &protocol, &mut rng).unwrap();
    ToyStats {
        mean_sq_norm: mean_squared_norm(&codes),
        probe,
        third,
        gap_median: gap.median,
        ps_inter: ps.ps,
    }
}

#[test]
fn criterion_5_digit_toy_trends() {
    let start = Instant::now();
    let seeds = [0u64, 1, 2];
    let mut table: BTreeMap<(u64, &str), ToyStats> = BTreeMap::new();
    for &seed in &seeds {
        for name in TOY_CONFIGS {
            let s = toy_stats(name, seed);
            note(&format!(
                "seed {seed} {name:>8}: |s|^2 {:.4}  probe {:.3}  third {:.3}  gap median {:.4}  ps {:.4}",
                s.mean_sq_norm, s.probe, s.third, s.gap_median, s.ps_inter
            ));
            table.insert((seed, name), s);
        }
    }
    let table = &table;
    let get = move |seed: u64, name: &str| table[&(seed, name)];
    type Check<'a> = Box<dyn Fn(u64) -> bool + 'a>;
    let checks: Vec<(&str, Check<'_>)> = vec![
        (
            "a: SR compacts codes below 25% of baseline",
            Box::new(move |s| get(s, "sr_1.0").mean_sq_norm < 0.25 * get(s, "baseline").mean_sq_norm),
        ),
        (
            "b: tri+SR probe >= SR-only probe",
            Box::new(move |s| get(s, "tri_sr").probe >= get(s, "sr_1.0").probe),
        ),
        (
            "c: tri+SR third-class fraction < SR-only",
            Box::new(move |s| get(s, "tri_sr").third < get(s, "sr_1.0").third),
        ),
        (
            "d: gap median decreases with lambda_SR",
            Box::new(move |s| {
                get(s, "sr_0.01").gap_median > get(s, "sr_0.1").gap_median
                    && get(s, "sr_0.1").gap_median > get(s, "sr_1.0").gap_median
            }),
        ),
        (
            "e: tri+SR inter-domain PS > baseline",
            Box::new(move |s| get(s, "tri_sr").ps_inter > get(s, "baseline").ps_inter),
        ),
    ];
    let mut ok = true;
    let mut summary = Vec::new();
    for (label, check) in &checks {
        let held: Vec<u64> = seeds.iter().copied().filter(|&s| check(s)).collect();
        note(&format!("{label}: holds for seeds {held:?}"));
        ok &= held.len() >= 2;
        summary.push(format!("{}:{}/3", &label[..1], held.len()));
    }
    verdict(
        5,
        ok,
        &format!("({}; {:.0}s)", summary.join(" "), start.elapsed().as_secs_f64()),
    );
}

#[test]
fn criterion_6_linearity_directions() {
    let start = Instant::now();
    let (cfg, ck) = toy_checkpoint("tri_sr", 0);
    let backbone = toy_backbone();
    let ctx = EvalContext::load(&cfg, &ck).unwrap();
    let net: Arc<dyn FeatureExtractor> = Arc::new(ConvBackbone::load(&backbone).unwrap().frozen(DType::F32).unwrap());
    let squared = Lpips::squared(net.clone());
    let star = Lpips::star(net);
    let columns = [
        LinearityColumn {
            name: "lpips".into(),
            backend: &squared,
            ppl_scaled: false,
        },
        LinearityColumn {
            name: "lpips_star".into(),
            backend: &star,
            ppl_scaled: false,
        },
        LinearityColumn {
            name: "ppl".into(),
            backend: &squared,
            ppl_scaled: true,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = ctx.generator();
    let ends =
        sample_path_endpoints(&ctx.test, ctx.provider(cfg.eval.endpoints), EndpointKind::Mixed, 20, g.dtype(), &mut rng)
            .unwrap();
    let counts = [10, 20, 50, 100];
    let rows = linearity_harness(g, &ctx.test, &ends, &columns, &counts).unwrap();
    let col = |name: &str| -> Vec<f64> { rows.iter().map(|r| r.sums[name]).collect() };
    let (lp, st, ppl) = (col("lpips"), col("lpips_star"), col("ppl"));
    for (row, c) in rows.iter().zip(counts) {
        note(&format!(
            "count {c:>3}: lpips {:.5}  lpips* {:.5}  ppl {:.3}",
            row.sums["lpips"], row.sums["lpips_star"], row.sums["ppl"]
        ));
    }
    let ok = lp.windows(2).all(|w| w[1] < w[0])
        && st.windows(2).all(|w| w[1] >= w[0])
        && ppl.windows(2).all(|w| w[1] > w[0]);
    verdict(
        6,
        ok,
        &format!("(counts {counts:?}, {:.0}s)", start.elapsed().as_secs_f64()),
    );
}

#[test]
fn criterion_7_evaluation_is_deterministic() {
    let start = Instant::now();
    let (mut cfg, ck) = toy_checkpoint("tri_sr", 0);
    let backbone = toy_backbone();
    cfg.out = cache_dir().join("determinism");
    cfg.eval.backbone = Some(backbone.clone());
    cfg.eval.face_backbone = Some(backbone);
    cfg.eval.fid_images = 10;
    cfg.eval.diversity_images = 10;
    cfg.eval.frd_samples = 100;
    cfg.eval.ppl_samples = 50;
    cfg.eval.linearity_pairs = 4;
    let first: Vec<(PathBuf, Vec<u8>)> = cmd_evaluate(&cfg, &ck, &Metric::ALL, 17)
        .unwrap()
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    let second = cmd_evaluate(&cfg, &ck, &Metric::ALL, 17).unwrap();
    let mut same = first.len() == Metric::ALL.len() && second.len() == first.len();
    for ((p, bytes), q) in first.iter().zip(&second) {
        same &= p == q && &std::fs::read(q).unwrap() == bytes;
    }
    verdict(
        7,
        same,
        &format!("({} reports compared byte for byte, {:.0}s)", first.len(), start.elapsed().as_secs_f64()),
    );
}
