//! Training objectives: the smoothing terms (triplet, style regularization, sphere,
//! content preservation) and the multi-domain translation objective they are added to.
//!
//! Tensor-level functions return 0-d tensors that keep the autograd graph. Code-level
//! wrappers over [`StyleCode`] batches return plain numbers.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{safe_sqrt, softplus};
use crate::perceptual::DistanceBackend;
use crate::stylespace::{codes_to_tensor, StyleCode, StyleEncoder, StyleTriplet, Translator};

/// Multi-task discriminator: one real/fake logit per sample, read from the branch of
/// the given domain.
pub trait Discriminator {
    fn logits(&self, images: &Tensor, domains: &[usize]) -> Result<Tensor>;
    fn num_domains(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothLossWeights {
    pub lambda_sr: f64,
    pub margin_alpha: f64,
    pub use_cont: bool,
    pub use_sr: bool,
    pub use_tri: bool,
    /// Sphere penalty instead of (or next to) the norm penalty, weighted by `lambda_sr`.
    pub use_sphere: bool,
}

impl Default for SmoothLossWeights {
    fn default() -> Self {
        Self {
            lambda_sr: 1.0,
            margin_alpha: 0.1,
            use_cont: false,
            use_sr: false,
            use_tri: false,
            use_sphere: false,
        }
    }
}

impl SmoothLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_sr", self.lambda_sr), ("margin_alpha", self.margin_alpha)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrigLossWeights {
    pub lambda_sty: f64,
    pub lambda_ds: f64,
    pub lambda_cyc: f64,
    /// Iterations over which `lambda_ds` decays linearly to zero; 0 keeps it constant.
    pub ds_decay_iterations: usize,
}

impl Default for OrigLossWeights {
    fn default() -> Self {
        Self {
            lambda_sty: 1.0,
            lambda_ds: 1.0,
            lambda_cyc: 1.0,
            ds_decay_iterations: 0,
        }
    }
}

impl OrigLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sty", self.lambda_sty),
            ("lambda_ds", self.lambda_ds),
            ("lambda_cyc", self.lambda_cyc),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn lambda_ds_at(&self, iteration: usize) -> f64 {
        if self.ds_decay_iterations == 0 {
            return self.lambda_ds;
        }
        let left = 1.0 - iteration as f64 / self.ds_decay_iterations as f64;
        self.lambda_ds * left.max(0.0)
    }
}

/// Named loss values of one optimisation step with the two totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub components: BTreeMap<String, f64>,
    pub total_generator: f64,
    pub total_discriminator: f64,
}

impl LossBundle {
    pub fn get(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }
}

/// Column order of the per-step components.
pub const COMPONENTS: [&str; 10] = [
    "d_real", "d_fake", "g_adv", "sty", "ds", "cyc", "cont", "sr", "sph", "tri",
];

/// `g_adv + l_sty*sty - l_ds*ds + l_cyc*cyc + smooth`, summed from a component map.
pub fn generator_total(
    c: &BTreeMap<String, f64>,
    orig: &OrigLossWeights,
    smooth: &SmoothLossWeights,
    iteration: usize,
) -> f64 {
    let g = |k: &str| c.get(k).copied().unwrap_or(0.0);
    g("g_adv") + orig.lambda_sty * g("sty") - orig.lambda_ds_at(iteration) * g("ds")
        + orig.lambda_cyc * g("cyc")
        + smooth_loss(
            if smooth.use_cont { g("cont") } else { 0.0 },
            if smooth.use_sr { g("sr") } else { 0.0 } + if smooth.use_sphere { g("sph") } else { 0.0 },
            if smooth.use_tri { g("tri") } else { 0.0 },
            smooth,
        )
}

fn nonempty(t: &Tensor, what: &str) -> Result<usize> {
    let b = t.dim(0)?;
    if b == 0 {
        return Err(contract!("{what}: empty batch"));
    }
    Ok(b)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(contract!("{what}: shapes {:?} and {:?}", a.dims(), b.dims()));
    }
    nonempty(a, what).map(|_| ())
}

fn row_norm(x: &Tensor) -> Result<Tensor> {
    safe_sqrt(&x.sqr()?.sum(1)?)
}

/// Mean of `max(|a - p| - |a - n| + alpha, 0)` over `(B, d)` code batches.
pub fn triplet_loss(anchor: &Tensor, positive: &Tensor, negative: &Tensor, alpha: f64) -> Result<Tensor> {
    same_shape(anchor, positive, "triplet loss")?;
    same_shape(anchor, negative, "triplet loss")?;
    if !(alpha >= 0.0) {
        return Err(contract!("triplet margin must be >= 0, got {alpha}"));
    }
    let dp = row_norm(&(anchor - positive)?)?;
    let dn = row_norm(&(anchor - negative)?)?;
    Ok(((dp - dn)? + alpha)?.relu()?.mean_all()?)
}

/// Mean squared norm of a `(B, d)` code batch.
pub fn style_regularization(codes: &Tensor) -> Result<Tensor> {
    nonempty(codes, "style regularization")?;
    Ok(codes.sqr()?.sum(1)?.mean_all()?)
}

/// Mean of `| |s| - 1 |` over a `(B, d)` code batch.
pub fn sphere_regularization(codes: &Tensor) -> Result<Tensor> {
    nonempty(codes, "sphere regularization")?;
    Ok((row_norm(codes)? - 1.0)?.abs()?.mean_all()?)
}

/// Mean perceptual distance between sources and their translations.
pub fn content_preservation_loss(x: &Tensor, fake: &Tensor, backend: &dyn DistanceBackend) -> Result<Tensor> {
    same_shape(x, fake, "content loss")?;
    Ok(backend.distance(x, fake)?.mean_all()?)
}

pub fn content_preservation(
    x: &Tensor,
    styles: &Tensor,
    generator: &dyn Translator,
    backend: &dyn DistanceBackend,
) -> Result<Tensor> {
    if x.dim(0)? != styles.dim(0)? {
        return Err(contract!(
            "content loss: {} images with {} style codes",
            x.dim(0)?,
            styles.dim(0)?
        ));
    }
    content_preservation_loss(x, &generator.translate(x, styles)?, backend)
}

/// `cont + lambda_sr * sr + tri`.
pub fn smooth_loss(cont: f64, sr: f64, tri: f64, weights: &SmoothLossWeights) -> f64 {
    cont + weights.lambda_sr * sr + tri
}

/// Mean over the batch of the L1 distance (summed over dimensions) between target and
/// re-extracted codes.
pub fn style_reconstruction_loss(target: &Tensor, recovered: &Tensor) -> Result<Tensor> {
    same_shape(target, recovered, "style reconstruction")?;
    Ok((target - recovered)?.abs()?.sum(1)?.mean_all()?)
}

pub fn style_reconstruction(
    target: &Tensor,
    target_domains: &[usize],
    x: &Tensor,
    generator: &dyn Translator,
    encoder: &dyn StyleEncoder,
) -> Result<Tensor> {
    let fake = generator.translate(x, target)?;
    style_reconstruction_loss(target, &encoder.encode(&fake, target_domains)?)
}

/// Pixel-mean L1 distance between two translations of the same sources.
pub fn diversity_sensitive_loss(fake1: &Tensor, fake2: &Tensor) -> Result<Tensor> {
    same_shape(fake1, fake2, "diversity loss")?;
    Ok((fake1 - fake2)?.abs()?.mean_all()?)
}

pub fn diversity_sensitive(
    x: &Tensor,
    s1: &Tensor,
    s2: &Tensor,
    generator: &dyn Translator,
) -> Result<Tensor> {
    same_shape(s1, s2, "diversity loss")?;
    diversity_sensitive_loss(&generator.translate(x, s1)?, &generator.translate(x, s2)?)
}

/// Pixel-mean L1 distance between the sources and their back-translations.
pub fn cycle_consistency_loss(x: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    same_shape(x, reconstructed, "cycle loss")?;
    Ok((x - reconstructed)?.abs()?.mean_all()?)
}

/// `x -> G(x, s) -> G(G(x, s), E(x))`, with `E` using the source domains' heads.
pub fn cycle_consistency(
    x: &Tensor,
    source_domains: &[usize],
    styles: &Tensor,
    generator: &dyn Translator,
    encoder: &dyn StyleEncoder,
) -> Result<Tensor> {
    let fake = generator.translate(x, styles)?;
    let back = encoder.encode(x, source_domains)?;
    cycle_consistency_loss(x, &generator.translate(&fake, &back)?)
}

/// Discriminator loss from logits: `mean softplus(-real) + mean softplus(fake)`.
pub fn discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    nonempty(real_logits, "discriminator loss")?;
    nonempty(fake_logits, "discriminator loss")?;
    Ok((
        softplus(&real_logits.neg()?)?.mean_all()?,
        softplus(fake_logits)?.mean_all()?,
    ))
}

/// Non-saturating generator loss `mean softplus(-fake)`.
pub fn generator_adversarial_loss(fake_logits: &Tensor) -> Result<Tensor> {
    nonempty(fake_logits, "generator adversarial loss")?;
    Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// `(d_loss, g_loss)`. The fakes are detached for `d_loss`, so it carries no gradient
/// back into whatever produced them.
pub fn adversarial_losses(
    x_real: &Tensor,
    real_domains: &[usize],
    x_fake: &Tensor,
    fake_domains: &[usize],
    disc: &dyn Discriminator,
) -> Result<(Tensor, Tensor)> {
    let m = disc.num_domains();
    if let Some(bad) = real_domains.iter().chain(fake_domains).find(|&&d| d >= m) {
        return Err(contract!("domain {bad} out of range for {m} discriminator branches"));
    }
    let real = disc.logits(x_real, real_domains)?;
    let fake_d = disc.logits(&x_fake.detach(), fake_domains)?;
    let (r, f) = discriminator_loss(&real, &fake_d)?;
    let g = generator_adversarial_loss(&disc.logits(x_fake, fake_domains)?)?;
    Ok(((r + f)?, g))
}

fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn triplet_loss_codes(triplets: &[StyleTriplet], alpha: f64) -> Result<f64> {
    if triplets.is_empty() {
        return Err(contract!("triplet loss: empty batch"));
    }
    let pick = |f: fn(&StyleTriplet) -> &StyleCode| {
        codes_to_tensor(&triplets.iter().map(|t| f(t).clone()).collect::<Vec<_>>(), DType::F64)
    };
    to_f64(&triplet_loss(
        &pick(|t| &t.anchor)?,
        &pick(|t| &t.positive)?,
        &pick(|t| &t.negative)?,
        alpha,
    )?)
}

pub fn style_regularization_codes(codes: &[StyleCode]) -> Result<f64> {
    to_f64(&style_regularization(&codes_to_tensor(codes, DType::F64)?)?)
}

pub fn sphere_regularization_codes(codes: &[StyleCode]) -> Result<f64> {
    to_f64(&sphere_regularization(&codes_to_tensor(codes, DType::F64)?)?)
}
