//! Small convolutional classifier used as the perceptual backbone at digit scale.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FeatureExtractor;
use crate::data::DomainDataset;
use crate::error::{contract, Error, Result};
use crate::nn::{cross_entropy, Adam, AdamConfig, Conv2d, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            channels: vec![16, 32, 64],
            num_classes: 10,
        }
    }
}

/// Stride-2 conv stack with a linear classification head. Every conv output (after ReLU)
/// is one perceptual layer; the spatially pooled last layer is the embedding.
#[derive(Debug, Clone)]
pub struct ConvBackbone {
    spec: BackboneSpec,
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
    layer_weights: Vec<f64>,
    dtype: DType,
}

impl ConvBackbone {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        let depth = spec.channels.len();
        if depth == 0 || !spec.image_size.is_multiple_of(1 << depth) || spec.in_channels == 0 {
            return Err(Error::Config(format!(
                "backbone with {depth} stride-2 layers cannot take {}px images",
                spec.image_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DType::F32);
        let mut convs = Vec::with_capacity(depth);
        let mut c_in = spec.in_channels;
        for (l, &c) in spec.channels.iter().enumerate() {
            convs.push(Conv2d::down3(&mut store, &format!("conv{l}"), c_in, c, &mut rng)?);
            c_in = c;
        }
        let side = spec.image_size >> depth;
        let head = Linear::new(&mut store, "head", c_in * side * side, spec.num_classes, &mut rng)?;
        Ok(Self {
            layer_weights: vec![1.0; depth],
            spec,
            store,
            convs,
            head,
            dtype: DType::F32,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn set_layer_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.convs.len() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "layer weights {weights:?} for {} layers",
                self.convs.len()
            )));
        }
        self.layer_weights = weights;
        Ok(())
    }

    fn trunk(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let dims = x.dims();
        if dims.len() != 4
            || dims[1] != self.spec.in_channels
            || dims[2] != self.spec.image_size
            || dims[3] != self.spec.image_size
        {
            return Err(contract!(
                "backbone expects (B, {}, {s}, {s}) images, got {dims:?}",
                self.spec.in_channels,
                s = self.spec.image_size
            ));
        }
        let mut h = x.to_dtype(self.dtype)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.trunk(x)?.pop().expect("at least one layer");
        self.head.forward(&last.flatten_from(1)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax(1)?.to_vec1::<u32>()?.into_iter().map(|c| c as usize).collect())
    }

    /// Copy with every weight cut from the autograd graph, so gradients stop at the
    /// backbone's input. The copy computes in `dtype`.
    pub fn frozen(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            spec: self.spec.clone(),
            store: self.store.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| c.detached(dtype))
                .collect::<Result<_>>()?,
            head: self.head.detached(dtype)?,
            layer_weights: self.layer_weights.clone(),
            dtype,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = self.store.export("")?;
        let spec = serde_json::to_vec(&self.spec)?;
        tensors.insert(
            "meta.spec".into(),
            Tensor::from_vec(spec.clone(), spec.len(), &Device::Cpu)?,
        );
        tensors.insert(
            "meta.layer_weights".into(),
            Tensor::new(self.layer_weights.as_slice(), &Device::Cpu)?,
        );
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Config(format!(
                "backbone weight file {} not found",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        Self::from_tensors(&tensors)
            .map_err(|e| Error::Data(format!("invalid backbone file {}: {e}", path.display())))
    }

    fn from_tensors(tensors: &HashMap<String, Tensor>) -> Result<Self> {
        let spec_bytes = tensors
            .get("meta.spec")
            .ok_or_else(|| Error::Data("missing meta.spec".into()))?
            .to_vec1::<u8>()?;
        let spec: BackboneSpec = serde_json::from_slice(&spec_bytes)?;
        let weights = tensors
            .get("meta.layer_weights")
            .ok_or_else(|| Error::Data("missing meta.layer_weights".into()))?
            .to_vec1::<f64>()?;
        let mut net = Self::new(spec, 0)?;
        net.store.import(tensors, "")?;
        net.set_layer_weights(weights)?;
        Ok(net)
    }

    /// Content hash over the architecture, parameters and layer weights.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec)?);
        h.update(self.store.digest()?.as_bytes());
        for w in &self.layer_weights {
            h.update(w.to_le_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn accuracy(&self, dataset: &DomainDataset, limit: usize) -> Result<f64> {
        let n = dataset.len().min(limit);
        if n == 0 {
            return Err(contract!("accuracy over an empty dataset"));
        }
        let mut correct = 0;
        for start in (0..n).step_by(256) {
            let idx: Vec<usize> = (start..(start + 256).min(n)).collect();
            let pred = self.predict(&dataset.batch(&idx)?)?;
            correct += idx
                .iter()
                .zip(pred)
                .filter(|(&i, p)| dataset.labels()[i] == *p)
                .count();
        }
        Ok(correct as f64 / n as f64)
    }
}

impl FeatureExtractor for ConvBackbone {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.trunk(x)
    }

    fn layer_weights(&self) -> &[f64] {
        &self.layer_weights
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.trunk(x)?.pop().expect("at least one layer");
        Ok(last.flatten_from(2)?.mean(2)?)
    }

    fn identity(&self) -> String {
        self.digest().unwrap_or_else(|e| format!("unhashable: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneTraining {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BackboneTraining {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains a classifier on the dataset's domain labels. Returns the network and the
/// per-iteration training loss.
pub fn train_backbone(
    dataset: &DomainDataset,
    spec: BackboneSpec,
    cfg: BackboneTraining,
) -> Result<(ConvBackbone, Vec<f64>)> {
    if spec.num_classes != dataset.num_domains() || spec.in_channels != dataset.channels() {
        return Err(Error::Config(format!(
            "backbone spec {spec:?} does not fit a dataset of {} domains, {} channels",
            dataset.num_domains(),
            dataset.channels()
        )));
    }
    if cfg.batch_size == 0 || dataset.is_empty() {
        return Err(Error::Config("backbone training needs data and a positive batch size".into()));
    }
    let net = ConvBackbone::new(spec, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += cfg.batch_size;
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
        let loss = cross_entropy(&net.logits(&dataset.batch(idx)?)?, &labels)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: "backbone cross entropy".into(),
                dump: None,
            });
        }
        opt.step(net.store(), &loss.backward()?)?;
        history.push(value);
    }
    Ok((net, history))
}
