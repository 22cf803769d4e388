//! The subcommands as library functions. Each takes a fully resolved configuration and
//! returns the paths it wrote.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use stylesmooth::data::{preprocess_image, DomainDataset};
use stylesmooth::metrics::{
    encode_dataset, fid_over_interpolations, frd_protocol, gap_distribution, linearity_harness, lpips_diversity,
    mean_squared_norm, ppl_score, ps_protocol, sample_path_endpoints, translate_codes, EndpointKind, FidProtocol,
    LinearityColumn, MetricReport, PsProtocol,
};
use stylesmooth::perceptual::{
    train_backbone, BackboneSpec, BackboneTraining, ConvBackbone, DistanceBackend, FaceEmbeddingBackend,
    FeatureExtractor, Lpips,
};
use stylesmooth::stylespace::{
    build_path, noise_batch, tensor_to_codes, CodeProvider, CodeSource, EndpointSource, InterpStrategy, PathKind,
    StyleEncoder, StyleMapper, Translator,
};
use stylesmooth::training::{load_checkpoint, load_datasets, train, LoadedCheckpoint, TrainConfig, Trainer};
use stylesmooth::{Error, Result};

use crate::config::ExperimentConfig;
use crate::figures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ps,
    Fid,
    Lpips,
    Frd,
    Ppl,
    Linearity,
}

impl Metric {
    /// Canonical order; per-metric seeds are drawn from the root stream in this order.
    pub const ALL: [Metric; 6] = [
        Metric::Ps,
        Metric::Fid,
        Metric::Lpips,
        Metric::Frd,
        Metric::Ppl,
        Metric::Linearity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ps => "ps",
            Metric::Fid => "fid",
            Metric::Lpips => "lpips",
            Metric::Frd => "frd",
            Metric::Ppl => "ppl",
            Metric::Linearity => "linearity",
        }
    }
}

pub const CONFIG_ECHO: &str = "config.toml";
pub const REPORTS_DIR: &str = "reports";
pub const FIGURES_DIR: &str = "figures";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_report(out: &Path, report: &MetricReport) -> Result<PathBuf> {
    let path = out.join(REPORTS_DIR).join(format!("{}.json", report.metric));
    write_text(&path, &report.to_json()?)?;
    Ok(path)
}

fn config_json(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Trains from scratch or resumes, writing the config echo, `losses.csv` and checkpoints
/// under `cfg.out`. Returns the final checkpoint.
pub fn cmd_train(cfg: &mut ExperimentConfig, resume: Option<&Path>, iterations: Option<usize>) -> Result<PathBuf> {
    let backend = cfg.train.backend.build(cfg.train.image_len())?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::resume(path, backend)?;
            if let Some(n) = iterations {
                t.config.iterations = n;
            }
            cfg.train = t.config.clone();
            t
        }
        None => Trainer::new(cfg.train.clone(), backend)?,
    };
    cfg.validate()?;
    create_dir(&cfg.out)?;
    write_text(&cfg.out.join(CONFIG_ECHO), &cfg.to_toml()?)?;
    let (data, _) = load_datasets(&cfg.train)?;
    log::info!(
        "training on {} images, {} domains, iterations {}..{}",
        data.len(),
        data.num_domains(),
        trainer.iteration,
        trainer.config.iterations
    );
    let outcome = train(&mut trainer, &data, Some(&cfg.out))?;
    Ok(outcome.checkpoint.expect("output directory given"))
}

/// Checkpoint plus the test split it is evaluated on.
pub struct EvalContext {
    pub checkpoint: LoadedCheckpoint,
    pub test: DomainDataset,
}

impl EvalContext {
    pub fn load(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Self> {
        let ck = load_checkpoint(checkpoint, DType::F32)?;
        let mut tc: TrainConfig = ck.meta.config.clone();
        if let Some(d) = &cfg.eval.dataset {
            tc.dataset = d.clone();
        }
        let (_, mut test) = load_datasets(&tc)?;
        if let Some(k) = cfg.eval.test_per_domain {
            test = test.take_per_domain(k)?;
        }
        Ok(Self { checkpoint: ck, test })
    }

    pub fn generator(&self) -> &dyn Translator {
        &self.checkpoint.models.ema_generator
    }

    pub fn encoder(&self) -> &dyn StyleEncoder {
        &self.checkpoint.models.ema_encoder
    }

    pub fn mapper(&self) -> &dyn StyleMapper {
        &self.checkpoint.models.ema_mapper
    }

    pub fn provider(&self, source: EndpointSource) -> CodeProvider<'_> {
        match source {
            EndpointSource::Encoder => CodeProvider::Encoder(self.encoder()),
            EndpointSource::Mapper => CodeProvider::Mapper(self.mapper()),
        }
    }

    pub fn hash(&self) -> String {
        self.checkpoint.meta.tensors_sha256.clone()
    }

    pub fn image_len(&self) -> usize {
        self.checkpoint.meta.config.image_len()
    }
}

fn load_backbone(path: Option<&PathBuf>, metric: Metric) -> Result<Arc<ConvBackbone>> {
    let path = path.ok_or_else(|| {
        Error::Config(format!("metric {} needs eval.backbone (a trained backbone weight file)", metric.name()))
    })?;
    Ok(Arc::new(ConvBackbone::load(path)?.frozen(DType::F32)?))
}

/// Seeds for every metric, drawn from the root stream in canonical order so a metric's
/// numbers do not depend on which others were requested.
pub fn metric_seeds(seed: u64) -> Vec<(Metric, u64)> {
    let mut root = ChaCha8Rng::seed_from_u64(seed);
    Metric::ALL.iter().map(|&m| (m, root.next_u64())).collect()
}

/// Computes one report per requested metric and writes each to `reports/<metric>.json`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, metrics: &[Metric], seed: u64) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if metrics.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    let ctx = EvalContext::load(cfg, checkpoint)?;
    let mut written = Vec::new();
    for (metric, metric_seed) in metric_seeds(seed) {
        if !metrics.contains(&metric) {
            continue;
        }
        log::info!("evaluating {}", metric.name());
        let mut rng = ChaCha8Rng::seed_from_u64(metric_seed);
        let mut report = evaluate_metric(cfg, &ctx, metric, &mut rng)?;
        report.seed = seed;
        report.checkpoint_hash = Some(ctx.hash());
        written.push(write_report(&cfg.out, &report)?);
    }
    Ok(written)
}

fn evaluate_metric(cfg: &ExperimentConfig, ctx: &EvalContext, metric: Metric, rng: &mut ChaCha8Rng) -> Result<MetricReport> {
    let e = &cfg.eval;
    let g = ctx.generator();
    let provider = ctx.provider(e.endpoints);
    let data = &ctx.test;
    let config = config_json(cfg)?;
    let report = match metric {
        Metric::Ps => {
            let backend = e.backend.build(ctx.image_len())?;
            let mut r = MetricReport::new(
                "ps",
                0,
                json!({"n_paths": e.ps_paths, "steps": e.steps, "strategy": e.strategy,
                       "endpoints": e.endpoints, "config": config}),
            );
            let mut details = serde_json::Map::new();
            for kind in [EndpointKind::Intra, EndpointKind::Inter, EndpointKind::Mixed] {
                let protocol = PsProtocol {
                    n_paths: e.ps_paths,
                    steps: e.steps,
                    strategy: e.strategy,
                    kind,
                };
                let (score, _) = ps_protocol(g, provider, data, backend.as_ref(), &protocol, rng)?;
                let name = serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string();
                r.results.insert(format!("{name}.alig"), score.alig);
                r.results.insert(format!("{name}.uni"), score.uni);
                r.results.insert(format!("{name}.ps"), score.ps);
                if score.n_degenerate > 0 {
                    r.notes.push(format!(
                        "{name}: {} of {} paths were degenerate and excluded",
                        score.n_degenerate, score.n_paths
                    ));
                }
                details.insert(name, serde_json::to_value(&score)?);
            }
            r.backend = Some(backend.identity());
            r.details = serde_json::Value::Object(details);
            r
        }
        Metric::Fid => {
            let net = load_backbone(e.backbone.as_ref(), metric)?;
            let protocol = FidProtocol {
                source: e.fid_source,
                target: e.fid_target,
                n_images: e.fid_images,
                n_points: e.fid_points,
            };
            let res = fid_over_interpolations(g, provider, data, net.as_ref(), &protocol, rng)?;
            let mut r = MetricReport::new("fid", 0, json!({"fid": protocol, "config": config}));
            r.results.insert("fid".into(), res.fid);
            r.results.insert("n_generated".into(), res.n_generated as f64);
            r.results.insert("n_real".into(), res.n_real as f64);
            r.notes.push(format!("feature network {}", net.identity()));
            r
        }
        Metric::Lpips => {
            let net = load_backbone(e.backbone.as_ref(), metric)?;
            let backend = Lpips::squared(net);
            let d = lpips_diversity(
                g,
                provider,
                data,
                &backend,
                e.diversity_source,
                e.diversity_target,
                e.diversity_images,
                e.diversity_styles,
                rng,
            )?;
            let mut r = MetricReport::new(
                "lpips",
                0,
                json!({"source": e.diversity_source, "target": e.diversity_target,
                       "n_images": e.diversity_images, "n_styles": e.diversity_styles, "config": config}),
            );
            r.results.insert("lpips".into(), d);
            r.backend = Some(backend.identity());
            r
        }
        Metric::Frd => {
            let face = e.face_backbone.as_ref().map(FaceEmbeddingBackend::load).transpose()?;
            let d = frd_protocol(g, provider, data, face.as_ref(), e.frd_samples, rng)?;
            let mut r = MetricReport::new("frd", 0, json!({"n_samples": e.frd_samples, "config": config}));
            r.results.insert("frd".into(), d);
            if let Some(f) = &face {
                r.notes.push(format!("embedding network {}", f.identity()));
            }
            r
        }
        Metric::Ppl => {
            let backend = e.backend.build(ctx.image_len())?;
            let v = ppl_score(
                g,
                provider,
                data,
                backend.as_ref(),
                e.ppl_kind,
                e.strategy,
                e.ppl_epsilon,
                e.ppl_samples,
                rng,
            )?;
            let mut r = MetricReport::new(
                "ppl",
                0,
                json!({"n_samples": e.ppl_samples, "epsilon": e.ppl_epsilon, "kind": e.ppl_kind,
                       "strategy": e.strategy, "config": config}),
            );
            r.results.insert("ppl".into(), v);
            r.backend = Some(backend.identity());
            r
        }
        Metric::Linearity => {
            let net = load_backbone(e.backbone.as_ref(), metric)?;
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
            let ends = sample_path_endpoints(data, provider, EndpointKind::Mixed, e.linearity_pairs, g.dtype(), rng)?;
            let rows = linearity_harness(g, data, &ends, &columns, &e.linearity_counts)?;
            let mut r = MetricReport::new(
                "linearity",
                0,
                json!({"pairs": e.linearity_pairs, "counts": e.linearity_counts, "config": config}),
            );
            for row in &rows {
                for (name, v) in &row.sums {
                    r.results.insert(format!("{name}@{}", row.count), *v);
                }
            }
            r.backend = Some(star.identity());
            r.details = serde_json::to_value(&rows)?;
            r
        }
    };
    Ok(report)
}

/// Endpoints of an interpolation: two reference images, or mapper noise when absent.
pub struct InterpolateArgs {
    pub source: PathBuf,
    pub from_domain: usize,
    pub to_domain: usize,
    pub references: Option<[PathBuf; 2]>,
    pub steps: usize,
    pub strategy: InterpStrategy,
    pub output: PathBuf,
}

fn load_image(path: &Path, image_size: usize, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?;
    let data = preprocess_image(&img, image_size, channels)?;
    Ok(Tensor::from_vec(data, (1, channels, image_size, image_size), &Device::Cpu)?)
}

/// Writes a strip of the `steps + 1` frames along the path and returns the frames.
pub fn cmd_interpolate(cfg: &ExperimentConfig, checkpoint: &Path, args: &InterpolateArgs, seed: u64) -> Result<Tensor> {
    let ck = load_checkpoint(checkpoint, DType::F32)?;
    let mc = &ck.meta.config.model;
    for d in [args.from_domain, args.to_domain] {
        if d >= mc.num_domains {
            return Err(Error::Config(format!("domain {d} out of range (model has {})", mc.num_domains)));
        }
    }
    let content = load_image(&args.source, mc.image_size, mc.channels)?;
    let domains = [args.from_domain, args.to_domain];
    let models = &ck.models;
    let (codes, source) = match &args.references {
        Some(refs) => {
            let imgs = refs
                .iter()
                .map(|p| load_image(p, mc.image_size, mc.channels))
                .collect::<Result<Vec<_>>>()?;
            (models.ema_encoder.encode(&Tensor::cat(&imgs, 0)?, &domains)?, CodeSource::Encoder)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = noise_batch(2, mc.noise_dim, DType::F32, &mut rng)?;
            (models.ema_mapper.map(&z, &domains)?, CodeSource::Mapper)
        }
    };
    let ends = tensor_to_codes(&codes, &domains, source)?;
    let kind = if args.from_domain == args.to_domain {
        PathKind::Intra
    } else {
        PathKind::Inter
    };
    let path = build_path(&ends[0], &ends[1], args.steps, args.strategy, kind)?;
    let frames = translate_codes(&models.ema_generator, &content, &path.codes)?;
    let output = if args.output.is_absolute() {
        args.output.clone()
    } else {
        cfg.out.join(&args.output)
    };
    figures::save_frame_strip(&frames, &output)?;
    log::info!("wrote {}", output.display());
    Ok(frames)
}

/// Gap distribution report with a box plot, plus a scatter of encoded test codes when
/// the style space is two-dimensional.
pub fn cmd_analyze_space(cfg: &ExperimentConfig, checkpoint: &Path, n_triplets: usize, seed: u64) -> Result<MetricReport> {
    let ctx = EvalContext::load(cfg, checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = ctx.encoder();
    let (summary, _) = gap_distribution(enc, &ctx.test, n_triplets, DType::F32, &mut rng)?;
    let mut r = MetricReport::new("gap", seed, json!({"n_triplets": n_triplets, "config": config_json(cfg)?}));
    r.checkpoint_hash = Some(ctx.hash());
    for (k, v) in [
        ("min", summary.min),
        ("q1", summary.q1),
        ("median", summary.median),
        ("q3", summary.q3),
        ("max", summary.max),
    ] {
        r.results.insert(k.into(), v);
    }
    let figs = cfg.out.join(FIGURES_DIR);
    figures::save_box_plot(&summary, &figs.join("gap_boxplot.png"))?;
    let scatter_set = match cfg.analyze.scatter_per_domain {
        Some(k) => ctx.test.take_per_domain(k)?,
        None => ctx.test.clone(),
    };
    let codes = encode_dataset(enc, &scatter_set, DType::F32)?;
    r.results.insert("mean_squared_norm".into(), mean_squared_norm(&codes));
    if enc.style_dim() == 2 {
        let points: Vec<[f64; 2]> = codes.iter().map(|c| [c[0], c[1]]).collect();
        figures::save_scatter(&points, scatter_set.labels(), &figs.join("style_scatter.png"))?;
    } else {
        let notice = format!("style scatter skipped: style_dim is {}, not 2", enc.style_dim());
        log::warn!("{notice}");
        r.notes.push(notice);
    }
    r.details = serde_json::to_value(&summary)?;
    write_report(&cfg.out, &r)?;
    Ok(r)
}

/// Trains the conv backbone used by the perceptual and feature metrics and writes
/// `backbone.safetensors` to the output directory.
pub fn cmd_train_backbone(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let (train, test) = load_datasets(&cfg.train)?;
    let m = &cfg.train.model;
    let spec = BackboneSpec {
        in_channels: m.channels,
        image_size: m.image_size,
        channels: cfg.backbone.channels.clone(),
        num_classes: m.num_domains,
    };
    let b = &cfg.backbone;
    let (net, history) = train_backbone(
        &train,
        spec,
        BackboneTraining {
            iterations: b.iterations,
            batch_size: b.batch_size,
            lr: b.lr,
            seed,
        },
    )?;
    let path = cfg.out.join("backbone.safetensors");
    create_dir(&cfg.out)?;
    net.save(&path)?;
    let mut r = MetricReport::new("backbone", seed, json!({"config": config_json(cfg)?}));
    r.results.insert("test_accuracy".into(), net.accuracy(&test, usize::MAX)?);
    if let Some(l) = history.last() {
        r.results.insert("final_loss".into(), *l);
    }
    r.details = json!({"digest": net.digest()?});
    write_report(&cfg.out, &r)?;
    Ok(path)
}
