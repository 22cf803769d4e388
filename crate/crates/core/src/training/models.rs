//! Generator, discriminator, style encoder and mapping network.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::losses::Discriminator;
use crate::nn::{instance_norm, leaky_relu, select_heads, upsample2, AdaIn, Conv2d, Linear, ParamStore, LEAKY_SLOPE};
use crate::stylespace::{StyleEncoder, StyleMapper, Translator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_domains: usize,
    pub style_dim: usize,
    pub noise_dim: usize,
    /// Width of the first conv layer; doubles at every downsampling.
    pub base_channels: usize,
    pub max_channels: usize,
    pub mapper_hidden: usize,
    pub mapper_layers: usize,
}

impl Default for ModelConfig {
    /// Digit preset: 32x32 grey images, ten domains, 2-d style codes.
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            num_domains: 10,
            style_dim: 2,
            noise_dim: 16,
            base_channels: 8,
            max_channels: 32,
            mapper_hidden: 64,
            mapper_layers: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if !(16..=256).contains(&s) || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "unsupported image size {s}: expected a power of two between 16 and 256"
            )));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("style_dim", self.style_dim),
            ("noise_dim", self.noise_dim),
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
            ("mapper_hidden", self.mapper_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_domains < 2 {
            return Err(Error::Config("at least two domains are required".into()));
        }
        Ok(())
    }

    /// Number of stride-2 stages between the image and the 8x8 bottleneck.
    fn generator_depth(&self) -> usize {
        (self.image_size / 8).trailing_zeros() as usize
    }

    fn width(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.max_channels)
    }
}

fn act(x: &Tensor) -> Result<Tensor> {
    leaky_relu(x, LEAKY_SLOPE)
}

fn check_domains(domains: &[usize], batch: usize, m: usize) -> Result<()> {
    if domains.len() != batch {
        return Err(contract!("{} domain labels for a batch of {batch}", domains.len()));
    }
    if let Some(d) = domains.iter().find(|&&d| d >= m) {
        return Err(contract!("domain {d} out of range for {m} domains"));
    }
    Ok(())
}

/// Conv encoder down to 8x8 followed by AdaIN decoder blocks back up to full size.
#[derive(Debug, Clone)]
pub struct Generator {
    pub store: ParamStore,
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<(AdaIn, Conv2d, bool)>,
    out: Conv2d,
    style_dim: usize,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let n = cfg.generator_depth();
        let stem = Conv2d::same3(&mut store, "stem", cfg.channels, cfg.width(0), rng)?;
        let down = (1..=n)
            .map(|k| Conv2d::down3(&mut store, &format!("down{k}"), cfg.width(k - 1), cfg.width(k), rng))
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::with_capacity(n + 1);
        let c = cfg.width(n);
        blocks.push((
            AdaIn::new(&mut store, "block0.norm", cfg.style_dim, c, rng)?,
            Conv2d::same3(&mut store, "block0.conv", c, c, rng)?,
            false,
        ));
        for k in (1..=n).rev() {
            let name = format!("block{}", n - k + 1);
            blocks.push((
                AdaIn::new(&mut store, &format!("{name}.norm"), cfg.style_dim, cfg.width(k), rng)?,
                Conv2d::same3(&mut store, &format!("{name}.conv"), cfg.width(k), cfg.width(k - 1), rng)?,
                true,
            ));
        }
        let out = Conv2d::new(&mut store, "out", cfg.width(0), cfg.channels, 1, 1, 0, rng)?;
        Ok(Self {
            store,
            stem,
            down,
            blocks,
            out,
            style_dim: cfg.style_dim,
        })
    }
}

impl Translator for Generator {
    fn translate(&self, images: &Tensor, styles: &Tensor) -> Result<Tensor> {
        let (b, d) = styles.dims2()?;
        if b != images.dim(0)? || d != self.style_dim {
            return Err(contract!(
                "generator got {} images with {b} codes of dim {d} (expects {})",
                images.dim(0)?,
                self.style_dim
            ));
        }
        let mut h = act(&self.stem.forward(images)?)?;
        for conv in &self.down {
            h = act(&instance_norm(&conv.forward(&h)?, 1e-5)?)?;
        }
        for (norm, conv, up) in &self.blocks {
            h = act(&norm.forward(&h, styles)?)?;
            if *up {
                h = upsample2(&h)?;
            }
            h = conv.forward(&h)?;
        }
        Ok(self.out.forward(&act(&h)?)?.tanh()?)
    }

    fn style_dim(&self) -> usize {
        self.style_dim
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

/// Conv trunk down to 4x4, flattened.
#[derive(Debug, Clone)]
struct Trunk {
    convs: Vec<Conv2d>,
}

impl Trunk {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<(Self, usize)> {
        let n = cfg.generator_depth() + 1;
        let mut convs = vec![Conv2d::same3(store, "stem", cfg.channels, cfg.width(0), rng)?];
        for k in 1..=n {
            convs.push(Conv2d::down3(store, &format!("down{k}"), cfg.width(k - 1), cfg.width(k), rng)?);
        }
        Ok((Self { convs }, cfg.width(n) * 16))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = act(&conv.forward(&h)?)?;
        }
        Ok(h.flatten_from(1)?)
    }
}

/// One real/fake logit per domain; the sample's domain picks which one is read.
#[derive(Debug, Clone)]
pub struct MultiDiscriminator {
    pub store: ParamStore,
    trunk: Trunk,
    head: Linear,
    num_domains: usize,
}

impl MultiDiscriminator {
    pub fn new(cfg: &ModelConfig, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let (trunk, flat) = Trunk::new(&mut store, cfg, rng)?;
        let head = Linear::new(&mut store, "head", flat, cfg.num_domains, rng)?;
        Ok(Self {
            store,
            trunk,
            head,
            num_domains: cfg.num_domains,
        })
    }

    /// `(B, m)` logits of every branch.
    pub fn all_logits(&self, images: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.trunk.forward(images)?)
    }
}

impl Discriminator for MultiDiscriminator {
    fn logits(&self, images: &Tensor, domains: &[usize]) -> Result<Tensor> {
        check_domains(domains, images.dim(0)?, self.num_domains)?;
        select_heads(&self.all_logits(images)?, domains, 1)?.squeeze(1).map_err(Into::into)
    }

    fn num_domains(&self) -> usize {
        self.num_domains
    }
}

/// Shared conv trunk with one linear style head per domain.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub store: ParamStore,
    trunk: Trunk,
    hidden: Linear,
    heads: Linear,
    style_dim: usize,
    num_domains: usize,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let (trunk, flat) = Trunk::new(&mut store, cfg, rng)?;
        let hidden = Linear::new(&mut store, "hidden", flat, cfg.mapper_hidden, rng)?;
        let heads = Linear::new(
            &mut store,
            "heads",
            cfg.mapper_hidden,
            cfg.num_domains * cfg.style_dim,
            rng,
        )?;
        Ok(Self {
            store,
            trunk,
            hidden,
            heads,
            style_dim: cfg.style_dim,
            num_domains: cfg.num_domains,
        })
    }
}

impl StyleEncoder for Encoder {
    fn encode(&self, images: &Tensor, domains: &[usize]) -> Result<Tensor> {
        check_domains(domains, images.dim(0)?, self.num_domains)?;
        let h = act(&self.hidden.forward(&self.trunk.forward(images)?)?)?;
        select_heads(&self.heads.forward(&h)?, domains, self.style_dim)
    }

    fn style_dim(&self) -> usize {
        self.style_dim
    }
}

/// MLP from noise to one style head per domain.
#[derive(Debug, Clone)]
pub struct Mapper {
    pub store: ParamStore,
    layers: Vec<Linear>,
    heads: Linear,
    noise_dim: usize,
    style_dim: usize,
    num_domains: usize,
}

impl Mapper {
    pub fn new(cfg: &ModelConfig, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut layers = Vec::with_capacity(cfg.mapper_layers);
        let mut d_in = cfg.noise_dim;
        for l in 0..cfg.mapper_layers {
            layers.push(Linear::new(&mut store, &format!("fc{l}"), d_in, cfg.mapper_hidden, rng)?);
            d_in = cfg.mapper_hidden;
        }
        let heads = Linear::new(&mut store, "heads", d_in, cfg.num_domains * cfg.style_dim, rng)?;
        Ok(Self {
            store,
            layers,
            heads,
            noise_dim: cfg.noise_dim,
            style_dim: cfg.style_dim,
            num_domains: cfg.num_domains,
        })
    }
}

impl StyleMapper for Mapper {
    fn map(&self, noise: &Tensor, domains: &[usize]) -> Result<Tensor> {
        let (b, d) = noise.dims2()?;
        if d != self.noise_dim {
            return Err(contract!("mapper expects noise of dim {}, got {d}", self.noise_dim));
        }
        check_domains(domains, b, self.num_domains)?;
        let mut h = noise.clone();
        for layer in &self.layers {
            h = act(&layer.forward(&h)?)?;
        }
        select_heads(&self.heads.forward(&h)?, domains, self.style_dim)
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn style_dim(&self) -> usize {
        self.style_dim
    }
}

/// Live networks plus the EMA shadows of G, E and M.
#[derive(Debug)]
pub struct ModelBundle {
    pub generator: Generator,
    pub discriminator: MultiDiscriminator,
    pub encoder: Encoder,
    pub mapper: Mapper,
    pub ema_generator: Generator,
    pub ema_encoder: Encoder,
    pub ema_mapper: Mapper,
}

impl ModelBundle {
    /// Every network is initialised from `rng` in a fixed order; the shadows start as
    /// copies of the live weights.
    pub fn new(cfg: &ModelConfig, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        let generator = Generator::new(cfg, dtype, rng)?;
        let discriminator = MultiDiscriminator::new(cfg, dtype, rng)?;
        let encoder = Encoder::new(cfg, dtype, rng)?;
        let mapper = Mapper::new(cfg, dtype, rng)?;
        let ema_generator = Generator::new(cfg, dtype, rng)?;
        let ema_encoder = Encoder::new(cfg, dtype, rng)?;
        let ema_mapper = Mapper::new(cfg, dtype, rng)?;
        ema_generator.store.copy_from(&generator.store)?;
        ema_encoder.store.copy_from(&encoder.store)?;
        ema_mapper.store.copy_from(&mapper.store)?;
        Ok(Self {
            generator,
            discriminator,
            encoder,
            mapper,
            ema_generator,
            ema_encoder,
            ema_mapper,
        })
    }

    /// `(prefix, store)` for every network, in checkpoint order.
    pub fn stores(&self) -> [(&'static str, &ParamStore); 7] {
        [
            ("g.", &self.generator.store),
            ("d.", &self.discriminator.store),
            ("e.", &self.encoder.store),
            ("m.", &self.mapper.store),
            ("ema_g.", &self.ema_generator.store),
            ("ema_e.", &self.ema_encoder.store),
            ("ema_m.", &self.ema_mapper.store),
        ]
    }
}

pub fn build_models(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<ModelBundle> {
    use rand::SeedableRng;
    ModelBundle::new(cfg, dtype, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}
