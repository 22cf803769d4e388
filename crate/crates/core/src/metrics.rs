//! Evaluation protocols over trained translators.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{contract, Error, Result};
use crate::nn::{cross_entropy, Adam, AdamConfig, ParamStore};
use crate::perceptual::{BackendIdentity, DistanceBackend, FaceEmbeddingBackend, FeatureExtractor};
use crate::stylespace::{
    build_path, codes_to_tensor, endpoint_domains, sample_triplet_indices, tensor_to_codes,
    CodeProvider, CodeSource, DomainLabel, InterpStrategy, InterpolationPath, PathKind, StyleCode,
    StyleEncoder, Translator,
};

/// `end_to_end / sum(steps)` for one path.
pub fn alignment_score(end_to_end: f64, steps: &[f64]) -> Result<f64> {
    let total: f64 = steps.iter().sum();
    if steps.is_empty() || total == 0.0 {
        return Err(Error::DegeneratePath);
    }
    if steps.iter().any(|d| *d < 0.0 || !d.is_finite()) || !(end_to_end >= 0.0) {
        return Err(contract!("step distances must be finite and nonnegative"));
    }
    Ok(end_to_end / total)
}

/// One minus the Gini coefficient of the step distances.
pub fn uniformity_score(steps: &[f64]) -> Result<f64> {
    let t = steps.len() as f64;
    if steps.iter().any(|d| *d < 0.0 || !d.is_finite()) {
        return Err(contract!("step distances must be finite and nonnegative"));
    }
    let mean = steps.iter().sum::<f64>() / t;
    if steps.is_empty() || mean == 0.0 {
        return Err(Error::DegeneratePath);
    }
    let mut abs_diff = 0.0;
    for a in steps {
        for b in steps {
            abs_diff += (a - b).abs();
        }
    }
    Ok(1.0 - abs_diff / (2.0 * t * t * mean))
}

pub fn harmonic_mean(alig: f64, uni: f64) -> f64 {
    if alig + uni == 0.0 {
        return 0.0;
    }
    2.0 * alig * uni / (alig + uni)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathScore {
    pub alig: f64,
    pub uni: f64,
    pub ps: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    /// True when at least one path was excluded for having zero length.
    pub degenerate: bool,
    pub n_paths: usize,
    pub n_degenerate: usize,
}

/// Averages alignment and uniformity over the non-degenerate paths and combines them.
pub fn ps_score(paths: &[InterpolationPath]) -> Result<PathScore> {
    let mut alig = Vec::new();
    let mut uni = Vec::new();
    let mut n_degenerate = 0;
    for p in paths {
        let end = p
            .end_to_end
            .ok_or_else(|| contract!("path scored before its end-to-end distance was filled"))?;
        if p.step_distances.len() != p.steps() {
            return Err(contract!(
                "path with {} steps carries {} step distances",
                p.steps(),
                p.step_distances.len()
            ));
        }
        match (alignment_score(end, &p.step_distances), uniformity_score(&p.step_distances)) {
            (Ok(a), Ok(u)) => {
                alig.push(a);
                uni.push(u);
            }
            (Err(Error::DegeneratePath), _) | (_, Err(Error::DegeneratePath)) => n_degenerate += 1,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    if alig.is_empty() {
        return Err(Error::DegenerateGenerator(paths.len()));
    }
    if n_degenerate > 0 {
        log::warn!("{n_degenerate} of {} paths had zero length and were excluded", paths.len());
    }
    let a = alig.iter().sum::<f64>() / alig.len() as f64;
    let u = uni.iter().sum::<f64>() / uni.len() as f64;
    Ok(PathScore {
        alig: a,
        uni: u,
        ps: harmonic_mean(a, u),
        steps: paths[0].steps(),
        degenerate: n_degenerate > 0,
        n_paths: paths.len(),
        n_degenerate,
    })
}

/// Translates one content image (`(1, C, H, W)`) with every code.
pub fn translate_codes(generator: &dyn Translator, content: &Tensor, codes: &[StyleCode]) -> Result<Tensor> {
    let (_, c, h, w) = content.dims4()?;
    let n = codes.len();
    let x = content
        .to_dtype(generator.dtype())?
        .broadcast_as((n, c, h, w))?
        .contiguous()?;
    generator.translate(&x, &codes_to_tensor(codes, generator.dtype())?)
}

fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Generates the frames of `path` from `content` and fills its step and end-to-end
/// distances.
pub fn score_path(
    path: &mut InterpolationPath,
    content: &Tensor,
    generator: &dyn Translator,
    backend: &dyn DistanceBackend,
) -> Result<()> {
    let frames = translate_codes(generator, content, &path.codes)?;
    let t = path.steps();
    let steps = backend.distance(&frames.narrow(0, 0, t)?, &frames.narrow(0, 1, t)?)?;
    path.step_distances = to_vec_f64(&steps)?;
    let end = backend.distance(&frames.narrow(0, 0, 1)?, &frames.narrow(0, t, 1)?)?;
    path.end_to_end = Some(to_vec_f64(&end)?[0]);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Intra,
    Inter,
    /// Intra or inter, chosen per path with equal probability.
    Mixed,
}

impl EndpointKind {
    pub fn draw(self, rng: &mut impl Rng) -> PathKind {
        match self {
            EndpointKind::Intra => PathKind::Intra,
            EndpointKind::Inter => PathKind::Inter,
            EndpointKind::Mixed => {
                if rng.random_bool(0.5) {
                    PathKind::Intra
                } else {
                    PathKind::Inter
                }
            }
        }
    }
}

/// A content image index with a pair of endpoint codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEndpoints {
    pub content: usize,
    pub kind: PathKind,
    pub start: StyleCode,
    pub end: StyleCode,
}

/// Draws `n` (content image, endpoint pair) samples. Content images are uniform over
/// the dataset.
pub fn sample_path_endpoints(
    dataset: &DomainDataset,
    provider: CodeProvider<'_>,
    kind: EndpointKind,
    n: usize,
    dtype: DType,
    rng: &mut impl Rng,
) -> Result<Vec<PathEndpoints>> {
    if dataset.is_empty() {
        return Err(Error::Data("no content images".into()));
    }
    let mut plan = Vec::with_capacity(n);
    for _ in 0..n {
        let content = rng.random_range(0..dataset.len());
        let k = kind.draw(rng);
        let (i, j) = endpoint_domains(dataset.num_domains(), k, rng)?;
        plan.push((content, k, i, j));
    }
    let domains: Vec<usize> = plan.iter().flat_map(|&(_, _, i, j)| [i, j]).collect();
    let mut codes = provider.codes_for(dataset, &domains, dtype, rng)?.into_iter();
    Ok(plan
        .into_iter()
        .map(|(content, kind, _, _)| PathEndpoints {
            content,
            kind,
            start: codes.next().expect("two codes per path"),
            end: codes.next().expect("two codes per path"),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsProtocol {
    pub n_paths: usize,
    pub steps: usize,
    pub strategy: InterpStrategy,
    pub kind: EndpointKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub content: usize,
    pub kind: PathKind,
    pub end_to_end: f64,
    pub path_length: f64,
    pub alig: Option<f64>,
    pub uni: Option<f64>,
}

/// Samples paths, generates and scores them, then aggregates.
pub fn ps_protocol(
    generator: &dyn Translator,
    provider: CodeProvider<'_>,
    dataset: &DomainDataset,
    backend: &dyn DistanceBackend,
    protocol: &PsProtocol,
    rng: &mut impl Rng,
) -> Result<(PathScore, Vec<PathRecord>)> {
    let ends = sample_path_endpoints(
        dataset,
        provider,
        protocol.kind,
        protocol.n_paths,
        generator.dtype(),
        rng,
    )?;
    let mut paths = Vec::with_capacity(ends.len());
    let mut records = Vec::with_capacity(ends.len());
    for e in &ends {
        let mut path = build_path(&e.start, &e.end, protocol.steps, protocol.strategy, e.kind)?;
        score_path(&mut path, &dataset.batch(&[e.content])?, generator, backend)?;
        let end = path.end_to_end.unwrap_or(0.0);
        records.push(PathRecord {
            content: e.content,
            kind: e.kind,
            end_to_end: end,
            path_length: path.step_distances.iter().sum(),
            alig: alignment_score(end, &path.step_distances).ok(),
            uni: uniformity_score(&path.step_distances).ok(),
        });
        paths.push(path);
    }
    Ok((ps_score(&paths)?, records))
}

/// Mean of `psi(G(x, s(t)), G(x, s(t + eps))) / eps^2` with `t ~ U[0, 1 - eps]`.
#[allow(clippy::too_many_arguments)]
pub fn ppl_score(
    generator: &dyn Translator,
    provider: CodeProvider<'_>,
    dataset: &DomainDataset,
    backend: &dyn DistanceBackend,
    kind: EndpointKind,
    strategy: InterpStrategy,
    epsilon: f64,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(contract!("PPL epsilon must lie in (0, 1), got {epsilon}"));
    }
    if n_samples == 0 {
        return Err(contract!("PPL needs at least one sample"));
    }
    let ends = sample_path_endpoints(dataset, provider, kind, n_samples, generator.dtype(), rng)?;
    let mut total = 0.0;
    for e in &ends {
        let t = rng.random_range(0.0..=1.0 - epsilon);
        let a = crate::stylespace::interpolate(&e.start, &e.end, t, strategy)?;
        let b = crate::stylespace::interpolate(&e.start, &e.end, t + epsilon, strategy)?;
        let frames = translate_codes(generator, &dataset.batch(&[e.content])?, &[a, b])?;
        let d = backend.distance(&frames.narrow(0, 0, 1)?, &frames.narrow(0, 1, 1)?)?;
        total += to_vec_f64(&d)?[0] / (epsilon * epsilon);
    }
    Ok(total / n_samples as f64)
}

fn mean_cov(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(contract!("Frechet distance needs at least 2 samples, got {n}"));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussians fitted to two `(N, D)` feature sets.
pub fn frechet_distance(real: &DMatrix<f64>, generated: &DMatrix<f64>) -> Result<f64> {
    if real.ncols() != generated.ncols() {
        return Err(contract!(
            "feature dimensions differ: {} vs {}",
            real.ncols(),
            generated.ncols()
        ));
    }
    let (mu_r, cov_r) = mean_cov(real)?;
    let (mu_g, cov_g) = mean_cov(generated)?;
    let root_r = psd_sqrt(&cov_r);
    let inner = &root_r * &cov_g * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let fd = (mu_r - mu_g).norm_squared() + cov_r.trace() + cov_g.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

/// Embeds images in chunks and stacks the embeddings as matrix rows.
pub fn embed_all(extractor: &dyn FeatureExtractor, images: &Tensor) -> Result<DMatrix<f64>> {
    let n = images.dim(0)?;
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    for start in (0..n).step_by(256) {
        let len = 256.min(n - start);
        let e = extractor.embed(&images.narrow(0, start, len)?)?;
        dim = e.dim(1)?;
        rows.extend(to_vec_f64(&e)?);
    }
    Ok(DMatrix::from_row_slice(n, dim, &rows))
}

fn embed_indices(extractor: &dyn FeatureExtractor, dataset: &DomainDataset, idx: &[usize]) -> Result<DMatrix<f64>> {
    let mut parts = Vec::new();
    for chunk in idx.chunks(256) {
        parts.push(embed_all(extractor, &dataset.batch(chunk)?)?);
    }
    let dim = parts.first().map(|p| p.ncols()).unwrap_or(0);
    let rows: Vec<f64> = parts
        .iter()
        .flat_map(|p| p.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
        .collect();
    Ok(DMatrix::from_row_slice(idx.len(), dim, &rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidProtocol {
    pub source: usize,
    pub target: usize,
    pub n_images: usize,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub fid: f64,
    pub n_generated: usize,
    pub n_real: usize,
}

/// FID between real images of the source and target domains and translations along
/// `n_points`-point lerp paths from a source-domain code to a target-domain code.
pub fn fid_over_interpolations(
    generator: &dyn Translator,
    provider: CodeProvider<'_>,
    dataset: &DomainDataset,
    extractor: &dyn FeatureExtractor,
    protocol: &FidProtocol,
    rng: &mut impl Rng,
) -> Result<FidResult> {
    let FidProtocol {
        source,
        target,
        n_images,
        n_points,
    } = *protocol;
    if n_points < 2 {
        return Err(contract!("FID paths need at least 2 points"));
    }
    let pool = dataset.domain_indices(DomainLabel(source));
    if pool.is_empty() || dataset.domain_indices(DomainLabel(target)).is_empty() {
        return Err(Error::Data(format!("domain {source} or {target} has no images")));
    }
    let mut generated = Vec::with_capacity(n_images * n_points);
    let mut dim = 0;
    for _ in 0..n_images {
        let content = pool[rng.random_range(0..pool.len())];
        let codes = provider.codes_for(dataset, &[source, target], generator.dtype(), rng)?;
        let path = build_path(&codes[0], &codes[1], n_points - 1, InterpStrategy::Lerp, PathKind::Inter)?;
        let frames = translate_codes(generator, &dataset.batch(&[content])?, &path.codes)?;
        let e = extractor.embed(&frames)?;
        dim = e.dim(1)?;
        generated.extend(to_vec_f64(&e)?);
    }
    let n_generated = n_images * n_points;
    let gen = DMatrix::from_row_slice(n_generated, dim, &generated);
    let mut real_idx: Vec<usize> = dataset.domain_indices(DomainLabel(source)).to_vec();
    if target != source {
        real_idx.extend_from_slice(dataset.domain_indices(DomainLabel(target)));
    }
    let real = embed_indices(extractor, dataset, &real_idx)?;
    Ok(FidResult {
        fid: frechet_distance(&real, &gen)?,
        n_generated,
        n_real: real_idx.len(),
    })
}

/// Mean pairwise distance among `n_styles` translations of each source image.
#[allow(clippy::too_many_arguments)]
pub fn lpips_diversity(
    generator: &dyn Translator,
    provider: CodeProvider<'_>,
    dataset: &DomainDataset,
    backend: &dyn DistanceBackend,
    source: usize,
    target: usize,
    n_images: usize,
    n_styles: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n_styles < 2 {
        return Err(contract!("diversity needs at least 2 styles per image"));
    }
    let pool = dataset.domain_indices(DomainLabel(source));
    if pool.is_empty() {
        return Err(Error::Data(format!("domain {source} has no images")));
    }
    let (ia, ib): (Vec<i64>, Vec<i64>) = (0..n_styles)
        .flat_map(|a| ((a + 1)..n_styles).map(move |b| (a as i64, b as i64)))
        .unzip();
    let pairs = ia.len();
    let ia = Tensor::new(ia.iter().map(|&v| v as u32).collect::<Vec<_>>(), &Device::Cpu)?;
    let ib = Tensor::new(ib.iter().map(|&v| v as u32).collect::<Vec<_>>(), &Device::Cpu)?;
    let mut total = 0.0;
    for _ in 0..n_images {
        let content = pool[rng.random_range(0..pool.len())];
        let codes = provider.codes_for(dataset, &vec![target; n_styles], generator.dtype(), rng)?;
        let frames = translate_codes(generator, &dataset.batch(&[content])?, &codes)?;
        let d = backend.distance(&frames.index_select(&ia, 0)?, &frames.index_select(&ib, 0)?)?;
        total += to_vec_f64(&d)?.iter().sum::<f64>() / pairs as f64;
    }
    Ok(total / n_images.max(1) as f64)
}

/// Mean squared embedding distance between sources and their translations to random
/// other domains.
pub fn frd_protocol(
    generator: &dyn Translator,
    provider: CodeProvider<'_>,
    dataset: &DomainDataset,
    face: Option<&FaceEmbeddingBackend>,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let face = face.ok_or_else(|| Error::Config("FRD requires a face embedding backend".into()))?;
    if n_samples == 0 || dataset.is_empty() {
        return Err(contract!("FRD needs samples and data"));
    }
    let m = dataset.num_domains();
    let mut total = 0.0;
    for start in (0..n_samples).step_by(64) {
        let len = 64.min(n_samples - start);
        let idx: Vec<usize> = (0..len).map(|_| rng.random_range(0..dataset.len())).collect();
        let targets: Vec<usize> = idx
            .iter()
            .map(|&i| (dataset.labels()[i] + rng.random_range(1..m)) % m)
            .collect();
        let codes = provider.codes_for(dataset, &targets, generator.dtype(), rng)?;
        let x = dataset.batch(&idx)?.to_dtype(generator.dtype())?;
        let fake = generator.translate(&x, &codes_to_tensor(&codes, generator.dtype())?)?;
        let d = crate::perceptual::face_distance(&x, &fake, Some(face))?;
        total += to_vec_f64(&d)?.iter().sum::<f64>();
    }
    Ok(total / n_samples as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub n: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Result<GapSummary> {
    if values.is_empty() {
        return Err(contract!("summary of an empty sample"));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(GapSummary {
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
        n: s.len(),
    })
}

/// `|s_a - s_n| - |s_a - s_p|` for each triplet.
pub fn triplet_gap(anchor: &StyleCode, positive: &StyleCode, negative: &StyleCode) -> f64 {
    anchor.distance(negative) - anchor.distance(positive)
}

/// Samples `n_triplets` encoder triplets and summarises their distance gaps.
pub fn gap_distribution(
    encoder: &dyn StyleEncoder,
    dataset: &DomainDataset,
    n_triplets: usize,
    dtype: DType,
    rng: &mut impl Rng,
) -> Result<(GapSummary, Vec<f64>)> {
    let mut gaps = Vec::with_capacity(n_triplets);
    let mut remaining = n_triplets;
    while remaining > 0 {
        let len = remaining.min(512);
        remaining -= len;
        let idx = (0..len)
            .map(|_| sample_triplet_indices(dataset, rng))
            .collect::<Result<Vec<_>>>()?;
        let enc = |images: Vec<usize>, domains: Vec<usize>| -> Result<Vec<StyleCode>> {
            let t = encoder.encode(&dataset.batch(&images)?.to_dtype(dtype)?, &domains)?;
            tensor_to_codes(&t, &domains, CodeSource::Encoder)
        };
        let a = enc(idx.iter().map(|t| t.anchor).collect(), idx.iter().map(|t| t.domain).collect())?;
        let p = enc(idx.iter().map(|t| t.positive).collect(), idx.iter().map(|t| t.domain).collect())?;
        let n = enc(
            idx.iter().map(|t| t.negative).collect(),
            idx.iter().map(|t| t.negative_domain).collect(),
        )?;
        for ((a, p), n) in a.iter().zip(&p).zip(&n) {
            gaps.push(triplet_gap(a, p, n));
        }
    }
    Ok((summarize(&gaps)?, gaps))
}

/// One column of the linearity table.
pub struct LinearityColumn<'a> {
    pub name: String,
    pub backend: &'a dyn DistanceBackend,
    /// Multiply each step distance by `T^2` (the PPL normalisation with `eps = 1/T`).
    pub ppl_scaled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityRow {
    pub count: usize,
    pub sums: BTreeMap<String, f64>,
}

/// For each step count `T`, the mean over the fixed endpoint pairs of the summed
/// consecutive distances along the `T`-step lerp path.
pub fn linearity_harness(
    generator: &dyn Translator,
    dataset: &DomainDataset,
    endpoints: &[PathEndpoints],
    columns: &[LinearityColumn<'_>],
    counts: &[usize],
) -> Result<Vec<LinearityRow>> {
    if endpoints.is_empty() {
        return Err(contract!("linearity harness needs endpoint pairs"));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut sums: BTreeMap<String, f64> = columns.iter().map(|c| (c.name.clone(), 0.0)).collect();
        for e in endpoints {
            let path = build_path(&e.start, &e.end, count, InterpStrategy::Lerp, e.kind)?;
            let frames = translate_codes(generator, &dataset.batch(&[e.content])?, &path.codes)?;
            let (a, b) = (frames.narrow(0, 0, count)?, frames.narrow(0, 1, count)?);
            for c in columns {
                let d: f64 = to_vec_f64(&c.backend.distance(&a, &b)?)?.iter().sum();
                let scale = if c.ppl_scaled { (count * count) as f64 } else { 1.0 };
                *sums.get_mut(&c.name).expect("column registered") += d * scale / endpoints.len() as f64;
            }
        }
        rows.push(LinearityRow { count, sums });
    }
    Ok(rows)
}

/// Column-standardised copy of `(N, d)` features, with the statistics used.
fn standardize(x: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-12)
        })
        .collect();
    let z = x
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect())
        .collect();
    (z, mean, std)
}

/// Accuracy of a multinomial logistic regression fitted on standardised training
/// features and evaluated on the test features.
pub fn linear_probe_accuracy(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    num_classes: usize,
    iterations: usize,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() || train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(contract!("linear probe needs matching, nonempty features and labels"));
    }
    let d = train[0].len();
    let (z, mean, std) = standardize(train);
    let flat: Vec<f64> = z.into_iter().flatten().collect();
    let x = Tensor::from_vec(flat, (train.len(), d), &Device::Cpu)?;
    let mut store = ParamStore::new(DType::F64);
    let w = store.zeros("w", &[d, num_classes])?;
    let b = store.zeros("b", &[num_classes])?;
    let mut opt = Adam::new(AdamConfig {
        lr: 0.05,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    });
    for _ in 0..iterations {
        let loss = cross_entropy(&x.matmul(&w)?.broadcast_add(&b)?, train_labels)?;
        opt.step(&store, &loss.backward()?)?;
    }
    let tz: Vec<f64> = test
        .iter()
        .flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect::<Vec<_>>())
        .collect();
    let tx = Tensor::from_vec(tz, (test.len(), d), &Device::Cpu)?;
    let pred = tx.matmul(&w)?.broadcast_add(&b)?.argmax(1)?.to_vec1::<u32>()?;
    let correct = pred
        .iter()
        .zip(test_labels)
        .filter(|(p, l)| **p as usize == **l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Majority label among the `k` nearest reference points (ties go to the smaller label).
pub fn knn_classify(reference: &[Vec<f64>], labels: &[usize], query: &[f64], k: usize) -> Result<usize> {
    if reference.is_empty() || reference.len() != labels.len() || k == 0 {
        return Err(contract!("kNN needs a nonempty labelled reference set and k > 0"));
    }
    let mut dist: Vec<(f64, usize)> = reference
        .iter()
        .zip(labels)
        .map(|(r, &l)| {
            let d: f64 = r.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum();
            (d, l)
        })
        .collect();
    let k = k.min(dist.len());
    dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for &(_, l) in &dist[..k] {
        *votes.entry(l).or_default() += 1;
    }
    let best = votes.values().copied().max().unwrap_or(0);
    Ok(votes.into_iter().find(|&(_, v)| v == best).map(|(l, _)| l).unwrap_or(0))
}

/// Encodes every image of `dataset` with the head of its own domain.
pub fn encode_dataset(encoder: &dyn StyleEncoder, dataset: &DomainDataset, dtype: DType) -> Result<Vec<Vec<f64>>> {
    let d = encoder.style_dim();
    let mut out = Vec::with_capacity(dataset.len());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(256) {
        let domains: Vec<usize> = chunk.iter().map(|&i| dataset.labels()[i]).collect();
        let t = encoder.encode(&dataset.batch(chunk)?.to_dtype(dtype)?, &domains)?;
        out.extend(to_vec_f64(&t)?.chunks_exact(d).map(|c| c.to_vec()));
    }
    Ok(out)
}

pub fn mean_squared_norm(codes: &[Vec<f64>]) -> f64 {
    codes.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / codes.len().max(1) as f64
}

/// Fraction of interior points on lerp paths between encoded images of `from` and `to`
/// that a `k`-NN classifier over the reference codes assigns to some third class.
#[allow(clippy::too_many_arguments)]
pub fn third_class_fraction(
    reference: &[Vec<f64>],
    labels: &[usize],
    from: usize,
    to: usize,
    n_paths: usize,
    steps: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let pick = |class: usize, rng: &mut dyn rand::RngCore| -> Result<&Vec<f64>> {
        let pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if pool.is_empty() {
            return Err(Error::Data(format!("no reference codes of class {class}")));
        }
        Ok(&reference[pool[rng.random_range(0..pool.len())]])
    };
    if steps < 2 || n_paths == 0 {
        return Err(contract!("third-class fraction needs paths with interior points"));
    }
    let mut third = 0usize;
    let mut total = 0usize;
    for _ in 0..n_paths {
        let a = pick(from, rng)?;
        let b = pick(to, rng)?;
        for t in 1..steps {
            let f = t as f64 / steps as f64;
            let q: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + f * (y - x)).collect();
            let c = knn_classify(reference, labels, &q, k)?;
            if c != from && c != to {
                third += 1;
            }
            total += 1;
        }
    }
    Ok(third as f64 / total as f64)
}

/// Serialized result of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub seed: u64,
    pub protocol: serde_json::Value,
    pub backend: Option<BackendIdentity>,
    pub checkpoint_hash: Option<String>,
    pub notes: Vec<String>,
    pub results: BTreeMap<String, f64>,
    pub details: serde_json::Value,
}

impl MetricReport {
    pub fn new(metric: &str, seed: u64, protocol: serde_json::Value) -> Self {
        Self {
            metric: metric.to_string(),
            seed,
            protocol,
            backend: None,
            checkpoint_hash: None,
            notes: Vec::new(),
            results: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::perceptual::PixelL2;
    use crate::stylespace::CodeSource;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniformity_examples() {
        assert_eq!(uniformity_score(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(uniformity_score(&[0.0, 0.0, 0.0, 1.0]).unwrap(), 0.25);
        assert!((uniformity_score(&[1.0, 2.0, 3.0]).unwrap() - 7.0 / 9.0).abs() < 1e-15);
        assert!(matches!(uniformity_score(&[0.0, 0.0]), Err(Error::DegeneratePath)));
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(alignment_score(4.0, &[1.0; 4]).unwrap(), 1.0);
        assert_eq!(alignment_score(2.0, &[1.0; 4]).unwrap(), 0.5);
        assert!(matches!(alignment_score(0.0, &[0.0; 3]), Err(Error::DegeneratePath)));
    }

    #[test]
    fn harmonic_examples() {
        assert_eq!(harmonic_mean(1.0, 1.0), 1.0);
        assert!((harmonic_mean(1.0, 0.25) - 0.4).abs() < 1e-15);
        assert_eq!(harmonic_mean(0.5, 0.5), 0.5);
    }

    fn filled(steps: Vec<f64>, end: f64) -> InterpolationPath {
        let c = StyleCode::new(vec![0.0], DomainLabel(0), CodeSource::Mapper).unwrap();
        let mut p = build_path(&c, &c, steps.len(), InterpStrategy::Lerp, PathKind::Intra).unwrap();
        p.step_distances = steps;
        p.end_to_end = Some(end);
        p
    }

    #[test]
    fn ps_excludes_degenerate_paths() {
        let paths = vec![filled(vec![1.0, 1.0], 2.0), filled(vec![0.0, 0.0], 0.0)];
        let s = ps_score(&paths).unwrap();
        assert_eq!(s.ps, 1.0);
        assert_eq!(s.n_degenerate, 1);
        assert!(s.degenerate);
        let all = vec![filled(vec![0.0, 0.0], 0.0)];
        assert!(matches!(ps_score(&all), Err(Error::DegenerateGenerator(1))));
    }

    #[test]
    fn fid_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_fn(200, 4, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        assert!(frechet_distance(&x, &x).unwrap().abs() < 1e-6);
        let v = [0.5, -1.0, 2.0, 0.25];
        let mut y = x.clone();
        for mut row in y.row_iter_mut() {
            for j in 0..4 {
                row[j] += v[j];
            }
        }
        let expected: f64 = v.iter().map(|a| a * a).sum();
        assert!((frechet_distance(&x, &y).unwrap() - expected).abs() < 1e-4);
        assert!(frechet_distance(&x.rows(0, 1).into_owned(), &x).is_err());
    }

    #[test]
    fn quartiles_match_linear_interpolation() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q1, 1.75);
    }

    #[test]
    fn gap_of_two_clusters() {
        // Clusters 10 apart with unit variance per coordinate in 2-D. |a - p| is Rayleigh
        // with sigma sqrt(2) (median sqrt(2 ln 2) sqrt(2)); |a - n| concentrates near
        // sqrt(100 + 2 * 2) less a small curvature term, so the median gap sits near 8.4.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = |rng: &mut ChaCha8Rng, c: f64| -> StyleCode {
            let v: Vec<f64> = (0..2)
                .map(|j| {
                    let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                    z + if j == 0 { c } else { 0.0 }
                })
                .collect();
            StyleCode::new(v, DomainLabel(0), CodeSource::Encoder).unwrap()
        };
        let mut gaps = Vec::new();
        let mut far = Vec::new();
        for _ in 0..10_000 {
            let (ca, cn) = if rand::Rng::random_bool(&mut rng, 0.5) { (0.0, 10.0) } else { (10.0, 0.0) };
            let a = normal(&mut rng, ca);
            let p = normal(&mut rng, ca);
            let n = normal(&mut rng, cn);
            gaps.push(triplet_gap(&a, &p, &n));
            far.push(a.distance(&n));
        }
        let rayleigh_median = 2.0f64.sqrt() * (2.0 * 2.0f64.ln()).sqrt();
        let m = summarize(&gaps).unwrap().median;
        assert!((m - (10.1 - rayleigh_median)).abs() < 0.15, "{m}");
        let f = summarize(&far).unwrap().median;
        assert!((f - 10.0).abs() < 0.5, "{f}");
    }

    struct ConstEncoder;

    impl StyleEncoder for ConstEncoder {
        fn encode(&self, images: &Tensor, _d: &[usize]) -> Result<Tensor> {
            Ok(Tensor::ones((images.dim(0)?, 2), DType::F32, &Device::Cpu)?)
        }

        fn style_dim(&self) -> usize {
            2
        }
    }

    fn toy_dataset() -> DomainDataset {
        let n = 40;
        let pixels: Vec<f32> = (0..n * 16).map(|i| ((i * 37) % 23) as f32 / 11.5 - 1.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        DomainDataset::from_parts(Split::Test, 1, 4, vec!["a".into(), "b".into()], pixels, labels).unwrap()
    }

    #[test]
    fn collapsed_encoder_has_zero_gaps() {
        let ds = toy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, gaps) = gap_distribution(&ConstEncoder, &ds, 100, DType::F32, &mut rng).unwrap();
        assert!(gaps.iter().all(|g| *g == 0.0));
        assert_eq!(s.n, 100);
    }

    /// Output = input shifted by the first style coordinate; linear in the code.
    struct Shift;

    impl Translator for Shift {
        fn translate(&self, images: &Tensor, styles: &Tensor) -> Result<Tensor> {
            let b = images.dim(0)?;
            let s = styles.narrow(1, 0, 1)?.reshape((b, 1, 1, 1))?;
            Ok(images.broadcast_add(&s)?)
        }

        fn style_dim(&self) -> usize {
            2
        }
    }

    /// Ignores the style code.
    struct Constant;

    impl Translator for Constant {
        fn translate(&self, images: &Tensor, _styles: &Tensor) -> Result<Tensor> {
            Ok(images.clone())
        }

        fn style_dim(&self) -> usize {
            2
        }
    }

    struct NoiseMapper;

    impl crate::stylespace::StyleMapper for NoiseMapper {
        fn map(&self, noise: &Tensor, _d: &[usize]) -> Result<Tensor> {
            Ok(noise.clone())
        }

        fn noise_dim(&self) -> usize {
            2
        }

        fn style_dim(&self) -> usize {
            2
        }
    }

    #[test]
    fn protocols_on_toy_translators() {
        let ds = toy_dataset();
        let provider = CodeProvider::Mapper(&NoiseMapper);
        let proto = PsProtocol {
            n_paths: 10,
            steps: 19,
            strategy: InterpStrategy::Lerp,
            kind: EndpointKind::Inter,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, records) = ps_protocol(&Shift, provider, &ds, &PixelL2, &proto, &mut rng).unwrap();
        assert_eq!(records.len(), 10);
        assert!((s.alig - 1.0).abs() < 1e-5 && (s.uni - 1.0).abs() < 1e-5, "{s:?}");
        let err = ps_protocol(&Constant, provider, &ds, &PixelL2, &proto, &mut rng).unwrap_err();
        assert!(matches!(err, Error::DegenerateGenerator(10)));

        let ppl = ppl_score(&Constant, provider, &ds, &PixelL2, EndpointKind::Mixed, InterpStrategy::Lerp, 1e-2, 5, &mut rng)
            .unwrap();
        assert_eq!(ppl, 0.0);
        let div = lpips_diversity(&Constant, provider, &ds, &PixelL2, 0, 1, 3, 10, &mut rng).unwrap();
        assert_eq!(div, 0.0);
    }

    #[test]
    fn linear_generator_keeps_metric_sum_constant() {
        let ds = toy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ends = sample_path_endpoints(&ds, CodeProvider::Mapper(&NoiseMapper), EndpointKind::Inter, 5, DType::F32, &mut rng)
            .unwrap();
        let cols = [
            LinearityColumn { name: "metric".into(), backend: &PixelL2, ppl_scaled: false },
            LinearityColumn { name: "ppl".into(), backend: &PixelL2, ppl_scaled: true },
        ];
        let rows = linearity_harness(&Shift, &ds, &ends, &cols, &[10, 20, 50, 100]).unwrap();
        let base = rows[0].sums["metric"];
        for r in &rows {
            assert!((r.sums["metric"] - base).abs() < 1e-4 * base, "{r:?}");
        }
        assert!(rows.windows(2).all(|w| w[1].sums["ppl"] > w[0].sums["ppl"]));
    }

    #[test]
    fn knn_and_probe() {
        let reference = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0], vec![5.0, 5.1]];
        let labels = vec![0, 0, 1, 1, 1];
        assert_eq!(knn_classify(&reference, &labels, &[0.05, 0.0], 2).unwrap(), 0);
        assert_eq!(knn_classify(&reference, &labels, &[4.0, 4.0], 3).unwrap(), 1);
        let acc = linear_probe_accuracy(&reference, &labels, &reference, &labels, 2, 200).unwrap();
        assert_eq!(acc, 1.0);
        // Class 2 sits between 0 and 1 on a line; class 3 is off to the side.
        let reference = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![10.0, 0.0], vec![5.0, 50.0]];
        let labels = vec![0, 2, 1, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = third_class_fraction(&reference, &labels, 0, 1, 3, 4, 1, &mut rng).unwrap();
        // Interior points 2.5, 5, 7.5: 2.5 ties 0 and 5 (smaller distance-then-label wins, so 0),
        // 5 is class 2, 7.5 ties 5 and 10 (label 1 < 2).
        assert!((f - 1.0 / 3.0).abs() < 1e-12, "{f}");
    }

    proptest! {
        #[test]
        fn uniformity_scale_and_permutation_invariant(
            steps in prop::collection::vec(0.01f64..10.0, 1..30),
            c in 0.01f64..100.0,
            rot in 0usize..30,
        ) {
            let u = uniformity_score(&steps).unwrap();
            let scaled: Vec<f64> = steps.iter().map(|d| d * c).collect();
            prop_assert!((uniformity_score(&scaled).unwrap() - u).abs() < 1e-12);
            let mut rotated = steps.clone();
            rotated.rotate_left(rot % steps.len());
            prop_assert!((uniformity_score(&rotated).unwrap() - u).abs() < 1e-12);
            prop_assert!(u >= 1.0 / steps.len() as f64 - 1e-12 && u <= 1.0 + 1e-12);
        }

        #[test]
        fn ps_monotone_in_alignment(a in 0.0f64..1.0, da in 0.0f64..1.0, u in 0.0f64..1.0) {
            prop_assert!(harmonic_mean(a + da, u) >= harmonic_mean(a, u));
        }
    }
}
