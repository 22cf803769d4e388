//! Perceptual distances between image batches.
//!
//! Every backend maps two `(B, C, H, W)` batches to a `(B,)` tensor of per-sample
//! distances that stays differentiable with respect to the images.

mod backbone;

pub use backbone::{train_backbone, BackboneSpec, BackboneTraining, ConvBackbone};

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::nn::safe_sqrt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Lpips,
    LpipsStar,
    PixelL2,
    RandomProjection,
}

impl BackendKind {
    /// Whether the distance satisfies the triangle inequality.
    pub fn is_metric(self) -> bool {
        !matches!(self, BackendKind::Lpips)
    }

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Lpips => "lpips",
            BackendKind::LpipsStar => "lpips_star",
            BackendKind::PixelL2 => "pixel_l2",
            BackendKind::RandomProjection => "random_projection",
        }
    }
}

/// Which backend produced a number, and a hash of everything that determines it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub kind: BackendKind,
    pub hash: String,
}

pub trait DistanceBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn is_metric(&self) -> bool {
        self.kind().is_metric()
    }

    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;

    fn identity(&self) -> BackendIdentity;
}

/// A network exposing intermediate feature maps and a pooled embedding.
pub trait FeatureExtractor: Send + Sync {
    /// Raw (unnormalised) per-layer maps, each `(B, C_l, H_l, W_l)`.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    /// Nonnegative per-layer weights `w_l`.
    fn layer_weights(&self) -> &[f64];
    /// `(B, D)` embedding of each image.
    fn embed(&self, x: &Tensor) -> Result<Tensor>;
    fn identity(&self) -> String;
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(contract!("image shapes differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    if a.rank() == 0 || a.dim(0)? == 0 {
        return Err(contract!("empty image batch"));
    }
    Ok(())
}

/// Divides every spatial feature vector by its Euclidean norm across channels.
pub fn normalize_channels(y: &Tensor) -> Result<Tensor> {
    let norm = (y.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
    Ok(y.broadcast_div(&norm)?)
}

/// Per-layer feature maps (already channel-normalised) with their weights.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<Tensor>,
    pub weights: Vec<f64>,
}

impl FeatureStack {
    pub fn new(layers: Vec<Tensor>, weights: Vec<f64>) -> Result<Self> {
        if layers.is_empty() || layers.len() != weights.len() {
            return Err(contract!(
                "{} feature layers with {} weights",
                layers.len(),
                weights.len()
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(contract!("layer weights must be finite and nonnegative: {weights:?}"));
        }
        for l in &layers {
            if l.rank() != 4 {
                return Err(contract!("feature layer of rank {}, expected 4", l.rank()));
            }
        }
        Ok(Self { layers, weights })
    }

    /// Normalises raw extractor output channel-wise.
    pub fn from_raw(raw: Vec<Tensor>, weights: Vec<f64>) -> Result<Self> {
        let layers = raw.iter().map(normalize_channels).collect::<Result<Vec<_>>>()?;
        Self::new(layers, weights)
    }

    pub fn extract(fx: &dyn FeatureExtractor, x: &Tensor) -> Result<Self> {
        Self::from_raw(fx.features(x)?, fx.layer_weights().to_vec())
    }
}

/// `sum_l w_l mean_hw ||y1 - y2||^2` (squared) or `sum_l w_l mean_hw ||y1 - y2||`.
pub fn stack_distance(a: &FeatureStack, b: &FeatureStack, squared: bool) -> Result<Tensor> {
    if a.layers.len() != b.layers.len() || a.weights != b.weights {
        return Err(contract!("feature stacks differ in layout"));
    }
    let mut total: Option<Tensor> = None;
    for ((ya, yb), &w) in a.layers.iter().zip(&b.layers).zip(&a.weights) {
        if ya.dims() != yb.dims() {
            return Err(contract!("feature maps differ: {:?} vs {:?}", ya.dims(), yb.dims()));
        }
        let sq = (ya - yb)?.sqr()?.sum(1)?;
        let per_pos = if squared { sq } else { safe_sqrt(&sq)? };
        let term = (per_pos.flatten_from(1)?.mean(1)? * w)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

pub fn lpips_distance(x1: &Tensor, x2: &Tensor, fx: &dyn FeatureExtractor) -> Result<Tensor> {
    check_pair(x1, x2)?;
    stack_distance(&FeatureStack::extract(fx, x1)?, &FeatureStack::extract(fx, x2)?, true)
}

pub fn lpips_star_distance(x1: &Tensor, x2: &Tensor, fx: &dyn FeatureExtractor) -> Result<Tensor> {
    check_pair(x1, x2)?;
    stack_distance(&FeatureStack::extract(fx, x1)?, &FeatureStack::extract(fx, x2)?, false)
}

/// Root-sum-square of the pixel differences divided by `sqrt(pixel count)`.
pub fn pixel_l2_distance(x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
    check_pair(x1, x2)?;
    let ms = (x1 - x2)?.sqr()?.flatten_from(1)?.mean(1)?;
    safe_sqrt(&ms)
}

/// Squared Euclidean distance between embeddings.
pub fn face_distance(x1: &Tensor, x2: &Tensor, backend: Option<&FaceEmbeddingBackend>) -> Result<Tensor> {
    let backend = backend.ok_or_else(|| Error::Config("no face embedding backend loaded".into()))?;
    check_pair(x1, x2)?;
    let (e1, e2) = (backend.embed(x1)?, backend.embed(x2)?);
    Ok((e1 - e2)?.sqr()?.sum(1)?)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PixelL2;

impl DistanceBackend for PixelL2 {
    fn kind(&self) -> BackendKind {
        BackendKind::PixelL2
    }

    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        pixel_l2_distance(a, b)
    }

    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            kind: BackendKind::PixelL2,
            hash: "none".into(),
        }
    }
}

/// Euclidean distance after a fixed Gaussian projection of the flattened pixels.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    matrix: Tensor,
    seed: u64,
}

impl RandomProjection {
    pub fn new(input_len: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if input_len == 0 || out_dim == 0 {
            return Err(Error::Config("random projection needs positive dimensions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (out_dim as f64).sqrt();
        let data: Vec<f64> = (0..input_len * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            matrix: Tensor::from_vec(data, (input_len, out_dim), &Device::Cpu)?,
            seed,
        })
    }

    fn project(&self, x: &Tensor) -> Result<Tensor> {
        let flat = x.flatten_from(1)?;
        if flat.dim(1)? != self.matrix.dim(0)? {
            return Err(contract!(
                "projection expects {} pixels, got {}",
                self.matrix.dim(0)?,
                flat.dim(1)?
            ));
        }
        Ok(flat.matmul(&self.matrix.to_dtype(x.dtype())?)?)
    }
}

impl DistanceBackend for RandomProjection {
    fn kind(&self) -> BackendKind {
        BackendKind::RandomProjection
    }

    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_pair(a, b)?;
        let d = (self.project(a)? - self.project(b)?)?.sqr()?.sum(1)?;
        safe_sqrt(&d)
    }

    fn identity(&self) -> BackendIdentity {
        let (n, k) = self.matrix.dims2().expect("2-d projection");
        BackendIdentity {
            kind: BackendKind::RandomProjection,
            hash: format!("seed={};{n}x{k}", self.seed),
        }
    }
}

/// LPIPS (`squared = true`) or LPIPS* on top of a frozen feature extractor.
#[derive(Clone)]
pub struct Lpips {
    extractor: Arc<dyn FeatureExtractor>,
    squared: bool,
}

impl Lpips {
    pub fn squared(extractor: Arc<dyn FeatureExtractor>) -> Self {
        Self {
            extractor,
            squared: true,
        }
    }

    pub fn star(extractor: Arc<dyn FeatureExtractor>) -> Self {
        Self {
            extractor,
            squared: false,
        }
    }

    pub fn extractor(&self) -> &Arc<dyn FeatureExtractor> {
        &self.extractor
    }
}

impl DistanceBackend for Lpips {
    fn kind(&self) -> BackendKind {
        if self.squared {
            BackendKind::Lpips
        } else {
            BackendKind::LpipsStar
        }
    }

    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = if self.squared {
            lpips_distance(a, b, self.extractor.as_ref())?
        } else {
            lpips_star_distance(a, b, self.extractor.as_ref())?
        };
        Ok(d.to_dtype(a.dtype())?)
    }

    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            kind: self.kind(),
            hash: self.extractor.identity(),
        }
    }
}

/// Identity embedding network used by the face-recognition distance.
#[derive(Clone)]
pub struct FaceEmbeddingBackend {
    extractor: Arc<dyn FeatureExtractor>,
}

impl FaceEmbeddingBackend {
    pub fn new(extractor: Arc<dyn FeatureExtractor>) -> Self {
        Self { extractor }
    }

    /// Loads a conv backbone weight file and uses its pooled embedding.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(Arc::new(ConvBackbone::load(path)?.frozen(DType::F32)?)))
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.extractor.embed(x)?.to_dtype(x.dtype())?)
    }

    pub fn identity(&self) -> String {
        self.extractor.identity()
    }
}

/// SHA-256 of a file's bytes, for recording weight files in reports.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Scalar view of a single-sample distance, for tests and small tools.
pub fn scalar(d: &Tensor) -> Result<f64> {
    Ok(d.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.into_iter().sum())
}
