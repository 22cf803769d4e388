//! Networks, the combined objective, the optimisation loop and checkpoints.

mod checkpoint;
mod models;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint};
pub use models::{build_models, Encoder, Generator, Mapper, ModelBundle, ModelConfig, MultiDiscriminator};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_image_folder, load_mnist, DomainDataset, Split};
use crate::error::{contract, Error, Result};
use crate::losses::{
    cycle_consistency_loss, discriminator_loss, diversity_sensitive_loss, generator_adversarial_loss,
    generator_total, sphere_regularization, style_reconstruction_loss, style_regularization, triplet_loss,
    Discriminator, LossBundle, OrigLossWeights, SmoothLossWeights, COMPONENTS,
};
use crate::nn::{ema_update, Adam, AdamConfig};
use crate::perceptual::{BackendKind, ConvBackbone, DistanceBackend, Lpips, PixelL2, RandomProjection};
use crate::stylespace::{
    mixed_code_source, noise_batch, sample_triplet_indices, CodeSource, DomainLabel, StyleEncoder, StyleMapper,
    Translator,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_encoder: f64,
    pub lr_mapper: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            lr_encoder: 1e-4,
            lr_mapper: 1e-6,
            beta1: 0.0,
            beta2: 0.99,
            weight_decay: 1e-4,
        }
    }
}

impl OptimConfig {
    fn adam(&self, lr: f64) -> Adam {
        Adam::new(AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// IDX files (optionally gzipped) with one domain per digit.
    Mnist,
    /// One subdirectory of images per domain.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub root: PathBuf,
    /// Share of each folder domain used for training.
    pub train_fraction: f64,
    /// Keep at most this many images per domain in each split.
    pub per_domain: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Mnist,
            root: PathBuf::from("data/mnist"),
            train_fraction: 0.9,
            per_domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSpec {
    pub kind: BackendKind,
    /// Backbone weights for `lpips` and `lpips_star`.
    pub weights: Option<PathBuf>,
    pub projection_dim: usize,
    pub projection_seed: u64,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::PixelL2,
            weights: None,
            projection_dim: 64,
            projection_seed: 0,
        }
    }
}

impl BackendSpec {
    pub fn build(&self, image_len: usize) -> Result<Arc<dyn DistanceBackend>> {
        let backbone = || -> Result<Arc<ConvBackbone>> {
            let path = self.weights.as_ref().ok_or_else(|| {
                Error::Config(format!("backend {} needs backbone weights", self.kind.name()))
            })?;
            Ok(Arc::new(ConvBackbone::load(path)?))
        };
        Ok(match self.kind {
            BackendKind::PixelL2 => Arc::new(PixelL2),
            BackendKind::RandomProjection => {
                Arc::new(RandomProjection::new(image_len, self.projection_dim, self.projection_seed)?)
            }
            BackendKind::Lpips => Arc::new(Lpips::squared(backbone()?)),
            BackendKind::LpipsStar => Arc::new(Lpips::star(backbone()?)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Save a checkpoint every this many iterations; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub ema_decay: f64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub smooth: SmoothLossWeights,
    pub orig: OrigLossWeights,
    pub dataset: DatasetSpec,
    /// Backend of the content-preservation term.
    pub backend: BackendSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 50_000,
            batch_size: 32,
            checkpoint_every: 5_000,
            ema_decay: 0.999,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            smooth: SmoothLossWeights::default(),
            orig: OrigLossWeights::default(),
            dataset: DatasetSpec::default(),
            backend: BackendSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.smooth.validate()?;
        self.orig.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        let o = &self.optim;
        for (name, v) in [
            ("lr_generator", o.lr_generator),
            ("lr_discriminator", o.lr_discriminator),
            ("lr_encoder", o.lr_encoder),
            ("lr_mapper", o.lr_mapper),
            ("weight_decay", o.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn image_len(&self) -> usize {
        self.model.channels * self.model.image_size * self.model.image_size
    }
}

/// Train and test splits described by `spec`, resized to the model's image size.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(DomainDataset, DomainDataset)> {
    let spec = &cfg.dataset;
    let (train, test) = match spec.kind {
        DatasetKind::Mnist => {
            if cfg.model.channels != 1 {
                return Err(Error::Config("digit data is single-channel".into()));
            }
            (
                load_mnist(&spec.root, Split::Train, cfg.model.image_size)?,
                load_mnist(&spec.root, Split::Test, cfg.model.image_size)?,
            )
        }
        DatasetKind::Folder => {
            let s = load_image_folder(
                &spec.root,
                cfg.model.image_size,
                cfg.model.channels,
                spec.train_fraction,
                cfg.seed,
            )?;
            (s.train, s.test)
        }
    };
    if train.num_domains() != cfg.model.num_domains {
        return Err(Error::Config(format!(
            "dataset has {} domains, model is configured for {}",
            train.num_domains(),
            cfg.model.num_domains
        )));
    }
    match spec.per_domain {
        Some(k) => Ok((train.take_per_domain(k)?, test.take_per_domain(k)?)),
        None => Ok((train, test)),
    }
}

/// One Adam state per network.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub generator: Adam,
    pub discriminator: Adam,
    pub encoder: Adam,
    pub mapper: Adam,
}

impl Optimizers {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            generator: cfg.adam(cfg.lr_generator),
            discriminator: cfg.adam(cfg.lr_discriminator),
            encoder: cfg.adam(cfg.lr_encoder),
            mapper: cfg.adam(cfg.lr_mapper),
        }
    }

    pub fn named(&self) -> [(&'static str, &Adam); 4] {
        [
            ("opt_g.", &self.generator),
            ("opt_d.", &self.discriminator),
            ("opt_e.", &self.encoder),
            ("opt_m.", &self.mapper),
        ]
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(iteration: usize, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            loss: format!("{name} = {v}"),
            dump: None,
        })
    }
}

/// Target codes for a batch: two independent draws per sample, from the encoder on
/// random reference images of the target domain or from the mapper on fresh noise.
fn target_codes(
    models: &ModelBundle,
    data: &DomainDataset,
    domains: &[usize],
    source: CodeSource,
    dtype: DType,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let b = domains.len();
    let doubled: Vec<usize> = domains.iter().chain(domains).copied().collect();
    let codes = match source {
        CodeSource::Mapper => {
            let z = noise_batch(2 * b, models.mapper.noise_dim(), dtype, rng)?;
            models.mapper.map(&z, &doubled)?
        }
        _ => {
            let refs = doubled
                .iter()
                .map(|&d| data.sample_from_domain(DomainLabel(d), rng))
                .collect::<Result<Vec<_>>>()?;
            models.encoder.encode(&data.batch(&refs)?.to_dtype(dtype)?, &doubled)?
        }
    };
    Ok((codes.narrow(0, 0, b)?, codes.narrow(0, b, b)?))
}

/// One discriminator update followed by one joint generator/encoder/mapper update and
/// the EMA refresh. Every random draw comes from `rng`.
pub fn training_step(
    models: &ModelBundle,
    optims: &mut Optimizers,
    data: &DomainDataset,
    iteration: usize,
    cfg: &TrainConfig,
    backend: &dyn DistanceBackend,
    rng: &mut impl Rng,
) -> Result<LossBundle> {
    let dtype = models.generator.dtype();
    let b = cfg.batch_size;
    let m = cfg.model.num_domains;
    if data.num_domains() != m {
        return Err(contract!("dataset has {} domains, models {m}", data.num_domains()));
    }
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
    let y_org: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
    let y_trg: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
    let x = data.batch(&idx)?.to_dtype(dtype)?;
    let source = mixed_code_source(iteration);
    let (s_trg, s_trg2) = target_codes(models, data, &y_trg, source, dtype, rng)?;
    let triplets = if cfg.smooth.use_tri {
        Some(
            (0..b)
                .map(|_| sample_triplet_indices(data, rng))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let fake = models.generator.translate(&x, &s_trg)?;
    let d = &models.discriminator;
    let (d_real, d_fake) = discriminator_loss(&d.logits(&x, &y_org)?, &d.logits(&fake.detach(), &y_trg)?)?;
    let d_total = (&d_real + &d_fake)?;
    let total_discriminator = scalar(&d_total)?;
    check_finite(iteration, "discriminator loss", total_discriminator)?;
    optims.discriminator.step(&d.store, &d_total.backward()?)?;

    let g_adv = generator_adversarial_loss(&d.logits(&fake, &y_trg)?)?;
    let sty = style_reconstruction_loss(&s_trg, &models.encoder.encode(&fake, &y_trg)?)?;
    let fake2 = models.generator.translate(&x, &s_trg2)?.detach();
    let ds = diversity_sensitive_loss(&fake, &fake2)?;
    let s_org = models.encoder.encode(&x, &y_org)?;
    let cyc = cycle_consistency_loss(&x, &models.generator.translate(&fake, &s_org)?)?;
    let sr = style_regularization(&s_trg)?;
    let sph = sphere_regularization(&s_trg)?;

    let w = &cfg.smooth;
    let o = &cfg.orig;
    let mut total = (&g_adv + (&sty * o.lambda_sty)?)?;
    total = (total - (&ds * o.lambda_ds_at(iteration))?)?;
    total = (total + (&cyc * o.lambda_cyc)?)?;
    let mut components = BTreeMap::new();
    if w.use_cont {
        let cont = backend.distance(&x, &fake)?.mean_all()?;
        components.insert("cont".to_string(), scalar(&cont)?);
        total = (total + cont)?;
    }
    if w.use_sr {
        total = (total + (&sr * w.lambda_sr)?)?;
    }
    if w.use_sphere {
        total = (total + (&sph * w.lambda_sr)?)?;
    }
    if let Some(tri) = &triplets {
        let images: Vec<usize> = [
            tri.iter().map(|t| t.anchor).collect::<Vec<_>>(),
            tri.iter().map(|t| t.positive).collect(),
            tri.iter().map(|t| t.negative).collect(),
        ]
        .concat();
        let domains: Vec<usize> = [
            tri.iter().map(|t| t.domain).collect::<Vec<_>>(),
            tri.iter().map(|t| t.domain).collect(),
            tri.iter().map(|t| t.negative_domain).collect(),
        ]
        .concat();
        let codes = models.encoder.encode(&data.batch(&images)?.to_dtype(dtype)?, &domains)?;
        let loss = triplet_loss(
            &codes.narrow(0, 0, b)?,
            &codes.narrow(0, b, b)?,
            &codes.narrow(0, 2 * b, b)?,
            w.margin_alpha,
        )?;
        components.insert("tri".to_string(), scalar(&loss)?);
        total = (total + loss)?;
    }
    for (name, t) in [
        ("d_real", &d_real),
        ("d_fake", &d_fake),
        ("g_adv", &g_adv),
        ("sty", &sty),
        ("ds", &ds),
        ("cyc", &cyc),
        ("sr", &sr),
        ("sph", &sph),
    ] {
        components.insert(name.to_string(), scalar(t)?);
    }
    for name in COMPONENTS {
        components.entry(name.to_string()).or_insert(0.0);
    }
    let total_generator = scalar(&total)?;
    check_finite(iteration, "generator loss", total_generator)?;
    let grads = total.backward()?;
    optims.generator.step(&models.generator.store, &grads)?;
    optims.encoder.step(&models.encoder.store, &grads)?;
    optims.mapper.step(&models.mapper.store, &grads)?;

    ema_update(&models.ema_generator.store, &models.generator.store, cfg.ema_decay)?;
    ema_update(&models.ema_encoder.store, &models.encoder.store, cfg.ema_decay)?;
    ema_update(&models.ema_mapper.store, &models.mapper.store, cfg.ema_decay)?;

    debug_assert!(
        (total_generator - generator_total(&components, o, w, iteration)).abs()
            <= 1e-3 * (1.0 + total_generator.abs())
    );
    Ok(LossBundle {
        components,
        total_generator,
        total_discriminator,
    })
}

/// Full training state: networks, optimisers, the single random stream and the
/// iteration counter.
pub struct Trainer {
    pub config: TrainConfig,
    pub models: ModelBundle,
    pub optims: Optimizers,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    backend: Arc<dyn DistanceBackend>,
}

impl Trainer {
    pub fn new(config: TrainConfig, backend: Arc<dyn DistanceBackend>) -> Result<Self> {
        Self::with_dtype(config, backend, DType::F32)
    }

    pub fn with_dtype(config: TrainConfig, backend: Arc<dyn DistanceBackend>, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let models = ModelBundle::new(&config.model, dtype, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            optims: Optimizers::new(&config.optim),
            config,
            models,
            rng,
            iteration: 0,
            backend,
        })
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn resume(path: impl AsRef<Path>, backend: Arc<dyn DistanceBackend>) -> Result<Self> {
        let ck = load_checkpoint(path, DType::F32)?;
        let mut optims = Optimizers::new(&ck.meta.config.optim);
        for (prefix, opt, store) in [
            ("opt_g.", &mut optims.generator, &ck.models.generator.store),
            ("opt_d.", &mut optims.discriminator, &ck.models.discriminator.store),
            ("opt_e.", &mut optims.encoder, &ck.models.encoder.store),
            ("opt_m.", &mut optims.mapper, &ck.models.mapper.store),
        ] {
            let steps = ck.meta.optimizer_steps.get(prefix).copied().unwrap_or(0);
            opt.import(store, &ck.tensors, prefix, steps)?;
        }
        Ok(Self {
            config: ck.meta.config,
            models: ck.models,
            optims,
            rng: ck.meta.rng,
            iteration: ck.meta.iteration,
            backend,
        })
    }

    pub fn backend(&self) -> &dyn DistanceBackend {
        self.backend.as_ref()
    }

    pub fn step(&mut self, data: &DomainDataset) -> Result<LossBundle> {
        let losses = training_step(
            &self.models,
            &mut self.optims,
            data,
            self.iteration,
            &self.config,
            self.backend.as_ref(),
            &mut self.rng,
        )?;
        self.iteration += 1;
        Ok(losses)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        save_checkpoint(path, self)
    }
}

pub const LOSS_CSV: &str = "losses.csv";

fn csv_header() -> String {
    let mut cols = vec!["iteration".to_string()];
    cols.extend(COMPONENTS.iter().map(|c| c.to_string()));
    cols.push("total_generator".into());
    cols.push("total_discriminator".into());
    cols.join(",")
}

fn csv_row(iteration: usize, l: &LossBundle) -> String {
    let mut cols = vec![iteration.to_string()];
    cols.extend(COMPONENTS.iter().map(|c| l.get(c).to_string()));
    cols.push(l.total_generator.to_string());
    cols.push(l.total_discriminator.to_string());
    cols.join(",")
}

pub struct TrainOutcome {
    pub history: Vec<LossBundle>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Runs the trainer up to `config.iterations`. With `out_dir`, writes `losses.csv`,
/// periodic checkpoints under `checkpoints/` and `checkpoints/final`; on divergence
/// the state is dumped to `checkpoints/diverged` before the error is returned.
pub fn train(trainer: &mut Trainer, data: &DomainDataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let ck_dir = out_dir.map(|d| d.join("checkpoints"));
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_CSV);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{}", csv_header()).map_err(|e| Error::io(&path, e))?;
            Some((path, w))
        }
        None => None,
    };
    let mut history = Vec::new();
    while trainer.iteration < trainer.config.iterations {
        let it = trainer.iteration;
        let losses = match trainer.step(data) {
            Ok(l) => l,
            Err(Error::Diverged { iteration, loss, .. }) => {
                let dump = match &ck_dir {
                    Some(d) => Some(trainer.save(d.join("diverged"))?),
                    None => None,
                };
                return Err(Error::Diverged { iteration, loss, dump });
            }
            Err(e) => return Err(e),
        };
        if let Some((path, w)) = csv.as_mut() {
            writeln!(w, "{}", csv_row(it, &losses)).map_err(|e| Error::io(&*path, e))?;
        }
        if it.is_multiple_of(100) {
            log::info!(
                "iteration {it}: g {:.4} d {:.4}",
                losses.total_generator,
                losses.total_discriminator
            );
        }
        history.push(losses);
        let every = trainer.config.checkpoint_every;
        if let Some(d) = &ck_dir {
            if every > 0 && trainer.iteration.is_multiple_of(every) && trainer.iteration < trainer.config.iterations {
                trainer.save(d.join(format!("iter_{:06}", trainer.iteration)))?;
            }
        }
    }
    if let Some((path, mut w)) = csv {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let checkpoint = match &ck_dir {
        Some(d) => Some(trainer.save(d.join("final"))?),
        None => None,
    };
    Ok(TrainOutcome { history, checkpoint })
}
