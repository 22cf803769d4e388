//! Minimal neural-network toolkit on top of `candle-core`: seeded parameter stores,
//! a handful of layers, Adam and parameter EMA.
//!
//! Parameters are always initialised from an explicit seeded generator so that a
//! (config, seed) pair fully determines every run.

mod conv;
mod ops;
mod optim;
mod params;

pub use conv::conv2d;
pub use ops::{add_channel_bias, cross_entropy, leaky_relu, safe_sqrt, softplus, upsample2};
pub use optim::{Adam, AdamConfig};
pub use params::{ema_update, ParamStore};

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Fully connected layer `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = (2.0 / d_in as f64).sqrt();
        let weight = store.normal(&format!("{name}.weight"), &[d_out, d_in], std, rng)?;
        let bias = store.zeros(&format!("{name}.bias"), &[d_out])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    /// Copy whose weights are cut from the autograd graph and cast to `dtype`.
    pub fn detached(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            weight: self.weight.detach().to_dtype(dtype)?,
            bias: self.bias.detach().to_dtype(dtype)?,
        })
    }
}

/// Square-kernel convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.normal(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            std,
            rng,
        )?;
        let bias = store.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// 3x3 "same" convolution.
    pub fn same3(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(store, name, c_in, c_out, 3, 1, 1, rng)
    }

    /// 3x3 convolution that halves the spatial resolution.
    pub fn down3(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(store, name, c_in, c_out, 3, 2, 1, rng)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        add_channel_bias(&conv2d(x, &self.weight, self.stride, self.pad)?, &self.bias)
    }

    pub fn detached(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            weight: self.weight.detach().to_dtype(dtype)?,
            bias: self.bias.detach().to_dtype(dtype)?,
            ..*self
        })
    }
}

/// Per-sample, per-channel normalisation over the spatial axes of a `(B, C, H, W)` map.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered
        .sqr()?
        .mean_keepdim(D::Minus1)?
        .mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Adaptive instance normalisation: the style code predicts a per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct AdaIn {
    fc: Linear,
    channels: usize,
}

impl AdaIn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        style_dim: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fc = Linear::new(store, &format!("{name}.fc"), style_dim, 2 * channels, rng)?;
        Ok(Self { fc, channels })
    }

    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let h = self.fc.forward(style)?.reshape((b, 2 * self.channels, 1, 1))?;
        let gamma = h.narrow(1, 0, self.channels)?;
        let beta = h.narrow(1, self.channels, self.channels)?;
        let normed = instance_norm(x, 1e-5)?;
        Ok(normed
            .broadcast_mul(&(gamma + 1.0)?)?
            .broadcast_add(&beta)?)
    }
}

/// Picks, for every sample, the `dim`-sized slice of `heads` (shape `(B, m * dim)`) that
/// belongs to that sample's domain.
pub fn select_heads(heads: &Tensor, domains: &[usize], dim: usize) -> Result<Tensor> {
    let (b, total) = heads.dims2()?;
    let m = total / dim;
    if domains.len() != b || m * dim != total {
        return Err(crate::error::contract!(
            "head selection: {} domains for a batch of {b}, {total} outputs for dim {dim}",
            domains.len()
        ));
    }
    if let Some(&bad) = domains.iter().find(|&&d| d >= m) {
        return Err(crate::error::contract!("domain index {bad} out of range for {m} heads"));
    }
    let mut mask = vec![0.0f64; b * m];
    for (i, &d) in domains.iter().enumerate() {
        mask[i * m + d] = 1.0;
    }
    let mask = Tensor::from_vec(mask, (b, m, 1), heads.device())?.to_dtype(heads.dtype())?;
    Ok(heads
        .reshape((b, m, dim))?
        .broadcast_mul(&mask)?
        .sum(1)?)
}


#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    #[test]
    fn select_heads_picks_domain_slices() {
        let heads = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]], &Device::Cpu)
            .unwrap();
        let out = select_heads(&heads, &[1, 0], 2).unwrap();
        assert_eq!(
            out.to_vec2::<f64>().unwrap(),
            vec![vec![3.0, 4.0], vec![5.0, 6.0]]
        );
        assert!(select_heads(&heads, &[2, 0], 2).is_err());
    }

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64);
        let x = store
            .normal("x", &[2, 3, 4, 4], 3.0, &mut rng)
            .unwrap();
        let y = instance_norm(&(x + 5.0).unwrap(), 1e-8).unwrap();
        let mean = y.mean_keepdim(3).unwrap().mean_keepdim(2).unwrap();
        let max_mean = mean.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(max_mean < 1e-12);
        let var = y.sqr().unwrap().mean_keepdim(3).unwrap().mean_keepdim(2).unwrap();
        let v = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }
}
