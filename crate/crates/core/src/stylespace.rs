//! Style codes, the encoder/mapper/translator contracts, endpoint and triplet sampling,
//! and interpolation paths.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainLabel(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeSource {
    Encoder,
    Mapper,
    Interpolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub values: Vec<f64>,
    pub domain: DomainLabel,
    pub source: CodeSource,
}

impl StyleCode {
    pub fn new(values: Vec<f64>, domain: DomainLabel, source: CodeSource) -> Result<Self> {
        if values.is_empty() {
            return Err(contract!("style code with zero dimensions"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract!("style code has non-finite entries: {values:?}"));
        }
        Ok(Self {
            values,
            domain,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &StyleCode) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Standard-normal input of the mapping network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentNoise {
    pub values: Vec<f64>,
}

impl LatentNoise {
    pub fn sample(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            values: (0..dim).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTriplet {
    pub anchor: StyleCode,
    pub positive: StyleCode,
    pub negative: StyleCode,
}

impl StyleTriplet {
    pub fn new(anchor: StyleCode, positive: StyleCode, negative: StyleCode) -> Result<Self> {
        if anchor.domain != positive.domain || negative.domain == anchor.domain {
            return Err(contract!(
                "triplet domains anchor={} positive={} negative={}",
                anchor.domain.0,
                positive.domain.0,
                negative.domain.0
            ));
        }
        if anchor.dim() != positive.dim() || anchor.dim() != negative.dim() {
            return Err(contract!("triplet codes differ in dimension"));
        }
        Ok(Self {
            anchor,
            positive,
            negative,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpStrategy {
    Lerp,
    Slerp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Intra,
    Inter,
}

/// Where sampled endpoint codes come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointSource {
    Encoder,
    Mapper,
}

pub const DEFAULT_PATH_STEPS: usize = 19;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPath {
    pub codes: Vec<StyleCode>,
    /// Perceptual distance between consecutive generated frames, filled in by scoring.
    pub step_distances: Vec<f64>,
    /// Perceptual distance between the first and last frame, filled in by scoring.
    pub end_to_end: Option<f64>,
    pub strategy: InterpStrategy,
    pub kind: PathKind,
}

impl InterpolationPath {
    /// Number of steps `T`; the path holds `T + 1` codes.
    pub fn steps(&self) -> usize {
        self.codes.len() - 1
    }
}

/// Produces images from content images and style codes.
pub trait Translator {
    /// `images`: `(B, C, H, W)`, `styles`: `(B, d_s)`.
    fn translate(&self, images: &Tensor, styles: &Tensor) -> Result<Tensor>;
    fn style_dim(&self) -> usize;

    /// Element type the translator computes in.
    fn dtype(&self) -> DType {
        DType::F32
    }
}

/// Extracts a style code from an image, using the head of the given domain.
pub trait StyleEncoder {
    fn encode(&self, images: &Tensor, domains: &[usize]) -> Result<Tensor>;
    fn style_dim(&self) -> usize;
}

/// Maps latent noise to a style code of the given domain.
pub trait StyleMapper {
    fn map(&self, noise: &Tensor, domains: &[usize]) -> Result<Tensor>;
    fn noise_dim(&self) -> usize;
    fn style_dim(&self) -> usize;
}

fn check_dims(s0: &StyleCode, s1: &StyleCode) -> Result<()> {
    if s0.dim() != s1.dim() {
        return Err(contract!(
            "interpolating codes of dimension {} and {}",
            s0.dim(),
            s1.dim()
        ));
    }
    Ok(())
}

fn nearest_domain(s0: &StyleCode, s1: &StyleCode, t: f64) -> DomainLabel {
    if t < 0.5 {
        s0.domain
    } else {
        s1.domain
    }
}

pub fn lerp(s0: &StyleCode, s1: &StyleCode, t: f64) -> Result<StyleCode> {
    check_dims(s0, s1)?;
    let values = s0
        .values
        .iter()
        .zip(&s1.values)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    StyleCode::new(values, nearest_domain(s0, s1, t), CodeSource::Interpolated)
}

pub fn slerp(s0: &StyleCode, s1: &StyleCode, t: f64) -> Result<StyleCode> {
    check_dims(s0, s1)?;
    let (n0, n1) = (s0.norm(), s1.norm());
    if n0 == 0.0 || n1 == 0.0 {
        return Err(contract!("slerp endpoint with zero norm"));
    }
    let dot: f64 = s0.values.iter().zip(&s1.values).map(|(a, b)| a * b).sum();
    let omega = (dot / (n0 * n1)).clamp(-1.0, 1.0).acos();
    if omega < 1e-6 {
        return lerp(s0, s1, t);
    }
    let sin = omega.sin();
    let w0 = ((1.0 - t) * omega).sin() / sin;
    let w1 = (t * omega).sin() / sin;
    let values = s0
        .values
        .iter()
        .zip(&s1.values)
        .map(|(a, b)| w0 * a + w1 * b)
        .collect();
    StyleCode::new(values, nearest_domain(s0, s1, t), CodeSource::Interpolated)
}

pub fn interpolate(s0: &StyleCode, s1: &StyleCode, t: f64, strategy: InterpStrategy) -> Result<StyleCode> {
    match strategy {
        InterpStrategy::Lerp => lerp(s0, s1, t),
        InterpStrategy::Slerp => slerp(s0, s1, t),
    }
}

/// `T + 1` codes at `t = k / T`. The endpoints are stored as given.
pub fn build_path(
    s0: &StyleCode,
    s1: &StyleCode,
    steps: usize,
    strategy: InterpStrategy,
    kind: PathKind,
) -> Result<InterpolationPath> {
    if steps == 0 {
        return Err(contract!("interpolation path needs at least one step"));
    }
    check_dims(s0, s1)?;
    let mut codes = Vec::with_capacity(steps + 1);
    codes.push(s0.clone());
    for k in 1..steps {
        codes.push(interpolate(s0, s1, k as f64 / steps as f64, strategy)?);
    }
    codes.push(s1.clone());
    Ok(InterpolationPath {
        codes,
        step_distances: Vec::new(),
        end_to_end: None,
        strategy,
        kind,
    })
}

/// Stacks codes into a `(B, d_s)` tensor.
pub fn codes_to_tensor(codes: &[StyleCode], dtype: DType) -> Result<Tensor> {
    let Some(first) = codes.first() else {
        return Err(contract!("empty code batch"));
    };
    let d = first.dim();
    if codes.iter().any(|c| c.dim() != d) {
        return Err(contract!("code batch mixes dimensions"));
    }
    let flat: Vec<f64> = codes.iter().flat_map(|c| c.values.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (codes.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `(B, d_s)` tensor into codes, one per domain label.
pub fn tensor_to_codes(t: &Tensor, domains: &[usize], source: CodeSource) -> Result<Vec<StyleCode>> {
    let rows = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    if rows.len() != domains.len() {
        return Err(contract!("{} codes for {} domain labels", rows.len(), domains.len()));
    }
    rows.into_iter()
        .zip(domains)
        .map(|(v, &d)| StyleCode::new(v, DomainLabel(d), source))
        .collect()
}

/// A `(B, d_z)` batch of fresh standard-normal noise drawn from `rng`.
pub fn noise_batch(n: usize, dim: usize, dtype: DType, rng: &mut impl Rng) -> Result<Tensor> {
    let flat: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(flat, (n, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Encoder or mapper, whichever the caller selected as endpoint source.
#[derive(Clone, Copy)]
pub enum CodeProvider<'a> {
    Encoder(&'a dyn StyleEncoder),
    Mapper(&'a dyn StyleMapper),
}

impl CodeProvider<'_> {
    pub fn source(&self) -> CodeSource {
        match self {
            CodeProvider::Encoder(_) => CodeSource::Encoder,
            CodeProvider::Mapper(_) => CodeSource::Mapper,
        }
    }

    /// One code per requested domain. The encoder sees a random real image of that
    /// domain, the mapper fresh noise.
    pub fn codes_for(
        &self,
        dataset: &DomainDataset,
        domains: &[usize],
        dtype: DType,
        rng: &mut impl Rng,
    ) -> Result<Vec<StyleCode>> {
        let t = match self {
            CodeProvider::Encoder(e) => {
                let idx = domains
                    .iter()
                    .map(|&d| dataset.sample_from_domain(DomainLabel(d), rng))
                    .collect::<Result<Vec<_>>>()?;
                e.encode(&dataset.batch(&idx)?.to_dtype(dtype)?, domains)?
            }
            CodeProvider::Mapper(m) => {
                let z = noise_batch(domains.len(), m.noise_dim(), dtype, rng)?;
                m.map(&z, domains)?
            }
        };
        tensor_to_codes(&t, domains, self.source())
    }
}

/// Draws the domain pair of one endpoint pair.
pub fn endpoint_domains(num_domains: usize, kind: PathKind, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if num_domains < 2 && kind == PathKind::Inter {
        return Err(Error::Data("inter-domain endpoints need two domains".into()));
    }
    if num_domains == 0 {
        return Err(Error::Data("no domains".into()));
    }
    let i = rng.random_range(0..num_domains);
    let j = match kind {
        PathKind::Intra => i,
        PathKind::Inter => (i + rng.random_range(1..num_domains)) % num_domains,
    };
    Ok((i, j))
}

/// `n` endpoint pairs, each from one domain (`intra`) or two distinct domains (`inter`).
pub fn sample_endpoint_pairs(
    dataset: &DomainDataset,
    provider: CodeProvider<'_>,
    kind: PathKind,
    n: usize,
    dtype: DType,
    rng: &mut impl Rng,
) -> Result<Vec<(StyleCode, StyleCode)>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let pairs = (0..n)
        .map(|_| endpoint_domains(dataset.num_domains(), kind, rng))
        .collect::<Result<Vec<_>>>()?;
    let domains: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
    let codes = provider.codes_for(dataset, &domains, dtype, rng)?;
    let mut it = codes.into_iter();
    let mut out = Vec::with_capacity(n);
    while let (Some(a), Some(b)) = (it.next(), it.next()) {
        out.push((a, b));
    }
    Ok(out)
}

pub fn sample_endpoints(
    dataset: &DomainDataset,
    provider: CodeProvider<'_>,
    kind: PathKind,
    rng: &mut impl Rng,
) -> Result<(StyleCode, StyleCode)> {
    let mut pairs = sample_endpoint_pairs(dataset, provider, kind, 1, DType::F32, rng)?;
    Ok(pairs.remove(0))
}

/// Image indices of one triplet: anchor and positive from the same domain, negative
/// from another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndices {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub domain: usize,
    pub negative_domain: usize,
}

pub fn sample_triplet_indices(dataset: &DomainDataset, rng: &mut impl Rng) -> Result<TripletIndices> {
    let m = dataset.num_domains();
    if m < 2 {
        return Err(Error::Data("triplets need at least two domains".into()));
    }
    let i = rng.random_range(0..m);
    let pool = dataset.domain_indices(DomainLabel(i));
    if pool.len() < 2 {
        return Err(Error::Data(format!(
            "domain {i} holds {} images, triplets need 2",
            pool.len()
        )));
    }
    let a = rng.random_range(0..pool.len());
    let mut p = rng.random_range(0..pool.len() - 1);
    if p >= a {
        p += 1;
    }
    let j = (i + rng.random_range(1..m)) % m;
    let negative = dataset.sample_from_domain(DomainLabel(j), rng)?;
    Ok(TripletIndices {
        anchor: pool[a],
        positive: pool[p],
        negative,
        domain: i,
        negative_domain: j,
    })
}

/// Encodes `n` triplets in three batched encoder calls.
pub fn sample_triplets(
    dataset: &DomainDataset,
    encoder: &dyn StyleEncoder,
    n: usize,
    dtype: DType,
    rng: &mut impl Rng,
) -> Result<Vec<StyleTriplet>> {
    let idx = (0..n)
        .map(|_| sample_triplet_indices(dataset, rng))
        .collect::<Result<Vec<_>>>()?;
    if idx.is_empty() {
        return Ok(Vec::new());
    }
    let enc = |images: Vec<usize>, domains: Vec<usize>| -> Result<Vec<StyleCode>> {
        let t = encoder.encode(&dataset.batch(&images)?.to_dtype(dtype)?, &domains)?;
        tensor_to_codes(&t, &domains, CodeSource::Encoder)
    };
    let anchors = enc(
        idx.iter().map(|t| t.anchor).collect(),
        idx.iter().map(|t| t.domain).collect(),
    )?;
    let positives = enc(
        idx.iter().map(|t| t.positive).collect(),
        idx.iter().map(|t| t.domain).collect(),
    )?;
    let negatives = enc(
        idx.iter().map(|t| t.negative).collect(),
        idx.iter().map(|t| t.negative_domain).collect(),
    )?;
    anchors
        .into_iter()
        .zip(positives)
        .zip(negatives)
        .map(|((a, p), n)| StyleTriplet::new(a, p, n))
        .collect()
}

pub fn sample_triplet(
    dataset: &DomainDataset,
    encoder: &dyn StyleEncoder,
    rng: &mut impl Rng,
) -> Result<StyleTriplet> {
    Ok(sample_triplets(dataset, encoder, 1, DType::F32, rng)?.remove(0))
}

/// Even iterations draw codes from the encoder, odd ones from the mapper.
pub fn mixed_code_source(iteration: usize) -> CodeSource {
    if iteration.is_multiple_of(2) {
        CodeSource::Encoder
    } else {
        CodeSource::Mapper
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code(v: &[f64], d: usize) -> StyleCode {
        StyleCode::new(v.to_vec(), DomainLabel(d), CodeSource::Encoder).unwrap()
    }

    /// Encoder returning the image mean plus the domain index.
    struct MeanEncoder;

    impl StyleEncoder for MeanEncoder {
        fn encode(&self, images: &Tensor, domains: &[usize]) -> Result<Tensor> {
            let b = images.dim(0)?;
            let mean = images.flatten_from(1)?.mean_keepdim(1)?.to_dtype(DType::F64)?;
            let d = Tensor::from_vec(
                domains.iter().map(|&d| d as f64).collect::<Vec<_>>(),
                (b, 1),
                &Device::Cpu,
            )?;
            Ok(Tensor::cat(&[&mean, &d], 1)?)
        }

        fn style_dim(&self) -> usize {
            2
        }
    }

    struct EchoMapper;

    impl StyleMapper for EchoMapper {
        fn map(&self, noise: &Tensor, _domains: &[usize]) -> Result<Tensor> {
            Ok(noise.clone())
        }

        fn noise_dim(&self) -> usize {
            3
        }

        fn style_dim(&self) -> usize {
            3
        }
    }

    fn toy_dataset(per_domain: &[usize]) -> DomainDataset {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut k = 0.0;
        for (d, &n) in per_domain.iter().enumerate() {
            for _ in 0..n {
                pixels.extend(std::iter::repeat_n(k / 1000.0, 4));
                labels.push(d);
                k += 1.0;
            }
        }
        let names = (0..per_domain.len()).map(|d| d.to_string()).collect();
        DomainDataset::from_parts(Split::Train, 1, 2, names, pixels, labels).unwrap()
    }

    #[test]
    fn lerp_endpoints_and_midpoint() {
        let a = code(&[0.0, 0.0], 0);
        let b = code(&[1.0, 1.0], 1);
        assert_eq!(lerp(&a, &b, 0.0).unwrap().values, a.values);
        let mid = lerp(&a, &b, 0.5).unwrap();
        assert_eq!(mid.values, vec![0.5, 0.5]);
        assert_eq!(mid.source, CodeSource::Interpolated);
        assert_eq!(mid.domain, DomainLabel(1));
        assert_eq!(lerp(&a, &b, 0.49).unwrap().domain, DomainLabel(0));
        assert!(lerp(&a, &code(&[1.0], 0), 0.5).is_err());
    }

    #[test]
    fn twenty_point_path() {
        let a = code(&[0.0, 0.0], 2);
        let b = code(&[19.0, -19.0], 7);
        let p = build_path(&a, &b, DEFAULT_PATH_STEPS, InterpStrategy::Lerp, PathKind::Inter).unwrap();
        assert_eq!(p.codes.len(), 20);
        assert_eq!(p.codes[0], a);
        assert_eq!(p.codes[19], b);
        for (k, c) in p.codes.iter().enumerate() {
            assert_abs_diff_eq!(c.values[0], k as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn slerp_examples() {
        let s = code(&[0.3, -1.2], 0);
        assert_eq!(slerp(&s, &s, 0.7).unwrap().values, s.values);
        let r2 = std::f64::consts::FRAC_1_SQRT_2;
        let m = slerp(&code(&[1.0, 0.0], 0), &code(&[0.0, 1.0], 1), 0.5).unwrap();
        assert_abs_diff_eq!(m.values[0], r2, epsilon = 1e-12);
        assert_abs_diff_eq!(m.values[1], r2, epsilon = 1e-12);
        assert!(slerp(&code(&[0.0, 0.0], 0), &s, 0.5).is_err());
    }

    #[test]
    fn endpoints_respect_kind() {
        let ds = toy_dataset(&[5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (a, b) =
                sample_endpoints(&ds, CodeProvider::Encoder(&MeanEncoder), PathKind::Intra, &mut rng)
                    .unwrap();
            assert_eq!(a.domain, b.domain);
            // the encoder head saw the same domain the label claims
            assert_eq!(a.values[1], a.domain.0 as f64);
            let (a, b) =
                sample_endpoints(&ds, CodeProvider::Mapper(&EchoMapper), PathKind::Inter, &mut rng)
                    .unwrap();
            assert_ne!(a.domain, b.domain);
            assert_eq!(a.source, CodeSource::Mapper);
        }
    }

    #[test]
    fn endpoints_deterministic() {
        let ds = toy_dataset(&[4, 4]);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            sample_endpoints(&ds, CodeProvider::Encoder(&MeanEncoder), PathKind::Inter, &mut rng)
                .unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn empty_domain_is_data_error() {
        let ds = toy_dataset(&[3, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = (0..20)
            .map(|_| sample_endpoints(&ds, CodeProvider::Encoder(&MeanEncoder), PathKind::Inter, &mut rng))
            .find_map(|r| r.err())
            .unwrap();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn triplets_satisfy_invariants_and_balance() {
        let ds = toy_dataset(&[30, 30]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ts = sample_triplets(&ds, &MeanEncoder, 1000, DType::F64, &mut rng).unwrap();
        let mut zero = 0;
        for t in &ts {
            assert_eq!(t.anchor.domain, t.positive.domain);
            assert_ne!(t.anchor.domain, t.negative.domain);
            // distinct images have distinct means in the toy dataset
            assert_ne!(t.anchor.values[0], t.positive.values[0]);
            if t.anchor.domain.0 == 0 {
                zero += 1;
            }
        }
        let freq = zero as f64 / 1000.0;
        assert!((freq - 0.5).abs() <= 0.05, "{freq}");
    }

    #[test]
    fn triplet_needs_two_images() {
        let ds = toy_dataset(&[1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = sample_triplet(&ds, &MeanEncoder, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn parity_alternation() {
        assert_eq!(mixed_code_source(0), CodeSource::Encoder);
        assert_eq!(mixed_code_source(1), CodeSource::Mapper);
        let enc = (0..1000)
            .filter(|&i| mixed_code_source(i) == CodeSource::Encoder)
            .count();
        assert_eq!(enc, 500);
    }

    fn vec2() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 2..6)
    }

    proptest! {
        #[test]
        fn lerp_is_affine(a in vec2(), t in 0.0f64..1.0) {
            let b: Vec<f64> = a.iter().map(|x| x * 0.5 - 1.0).collect();
            let (s0, s1) = (code(&a, 0), code(&b, 1));
            let x = lerp(&s0, &s1, t).unwrap();
            let y = lerp(&s0, &s1, 1.0 - t).unwrap();
            for k in 0..a.len() {
                prop_assert!((x.values[k] + y.values[k] - a[k] - b[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn slerp_keeps_equal_radius(a in vec2(), seed in 0u64..1000, t in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let (na, nb) = (code(&a, 0).norm(), code(&b, 0).norm());
            prop_assume!(na > 1e-3 && nb > 1e-3);
            let b: Vec<f64> = b.iter().map(|x| x * na / nb).collect();
            let s = slerp(&code(&a, 0), &code(&b, 1), t).unwrap();
            // antipodal endpoints make the arc ill-defined
            prop_assume!(code(&a, 0).distance(&code(&b, 0)) < 2.0 * na - 1e-3);
            prop_assert!((s.norm() - na).abs() <= 1e-6 * na);
        }

        #[test]
        fn lerp_path_has_equal_gaps(a in vec2(), steps in 1usize..40) {
            let b: Vec<f64> = a.iter().map(|x| 3.0 - x).collect();
            let p = build_path(&code(&a, 0), &code(&b, 1), steps, InterpStrategy::Lerp, PathKind::Inter).unwrap();
            let gaps: Vec<f64> = p.codes.windows(2).map(|w| w[0].distance(&w[1])).collect();
            for g in &gaps {
                prop_assert!((g - gaps[0]).abs() < 1e-9);
            }
        }
    }
}
