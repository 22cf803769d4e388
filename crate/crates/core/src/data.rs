//! Domain-labelled image datasets: MNIST (IDX archives) and folder-per-domain layouts.
//!
//! Images are stored as `f32` in `[-1, 1]`, channel-major (`C x H x W`), one contiguous
//! buffer per dataset.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::stylespace::DomainLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images grouped into disjoint domains.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    split: Split,
    channels: usize,
    image_size: usize,
    domain_names: Vec<String>,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    by_domain: Vec<Vec<usize>>,
    skipped: usize,
}

impl DomainDataset {
    /// Builds a dataset from a flat pixel buffer. Every label must be `< domain_names.len()`.
    pub fn from_parts(
        split: Split,
        channels: usize,
        image_size: usize,
        domain_names: Vec<String>,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * image_size * image_size;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(contract!(
                "{} pixels for {} images of {channels}x{image_size}x{image_size}",
                pixels.len(),
                labels.len()
            ));
        }
        if domain_names.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 domains, found {}",
                domain_names.len()
            )));
        }
        let mut by_domain = vec![Vec::new(); domain_names.len()];
        for (i, &l) in labels.iter().enumerate() {
            by_domain
                .get_mut(l)
                .ok_or_else(|| Error::Data(format!("label {l} out of range")))?
                .push(i);
        }
        if let Some(bad) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::Data(format!("non-finite pixel at offset {bad}")));
        }
        Ok(Self {
            split,
            channels,
            image_size,
            domain_names,
            pixels,
            labels,
            by_domain,
            skipped: 0,
        })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Files that could not be decoded while loading.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let per = self.pixels_per_image();
        &self.pixels[index * per..(index + 1) * per]
    }

    pub fn label(&self, index: usize) -> DomainLabel {
        DomainLabel(self.labels[index])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain_indices(&self, domain: DomainLabel) -> &[usize] {
        self.by_domain.get(domain.0).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Uniformly random image index from `domain`.
    pub fn sample_from_domain(&self, domain: DomainLabel, rng: &mut impl Rng) -> Result<usize> {
        let pool = self.domain_indices(domain);
        if pool.is_empty() {
            return Err(Error::Data(format!("domain {} has no images", domain.0)));
        }
        Ok(pool[rng.random_range(0..pool.len())])
    }

    /// Stacks the given images into a `(B, C, H, W)` f32 tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let per = self.pixels_per_image();
        let mut buf = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(contract!("image index {i} out of range ({})", self.len()));
            }
            buf.extend_from_slice(self.image(i));
        }
        Ok(Tensor::from_vec(
            buf,
            (indices.len(), self.channels, self.image_size, self.image_size),
            &Device::Cpu,
        )?)
    }

    /// Keeps only the listed images, preserving their order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * self.pixels_per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self::from_parts(
            self.split,
            self.channels,
            self.image_size,
            self.domain_names.clone(),
            pixels,
            labels,
        )
    }

    /// The first `per_domain` images of each domain (or all of them if fewer).
    pub fn take_per_domain(&self, per_domain: usize) -> Result<Self> {
        let mut keep: Vec<usize> = self
            .by_domain
            .iter()
            .flat_map(|d| d.iter().take(per_domain).copied())
            .collect();
        keep.sort_unstable();
        self.subset(&keep)
    }
}

// SHA-256 of the decompressed standard MNIST IDX files.
const MNIST_FILES: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

/// Reads an IDX archive, transparently inflating a `.gz` sibling when the plain file is absent.
fn read_archive(root: &Path, name: &str) -> Result<(PathBuf, Vec<u8>)> {
    let plain = root.join(name);
    if plain.exists() {
        let bytes = fs::read(&plain).map_err(|e| Error::io(&plain, e))?;
        return Ok((plain, bytes));
    }
    let gz = root.join(format!("{name}.gz"));
    if gz.exists() {
        let file = fs::File::open(&gz).map_err(|e| Error::io(&gz, e))?;
        let mut bytes = Vec::new();
        flate2::read::GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Data(format!("corrupt archive {}: {e}", gz.display())))?;
        return Ok((gz, bytes));
    }
    Err(Error::Data(format!(
        "MNIST archive {name} (or {name}.gz) not found under {}",
        root.display()
    )))
}

fn verify_checksum(path: &Path, bytes: &[u8], expected: &str) -> Result<()> {
    let got = hex::encode(Sha256::digest(bytes));
    if got != expected {
        return Err(Error::Data(format!(
            "checksum mismatch for {}: expected sha256 {expected}, got {got}",
            path.display()
        )));
    }
    Ok(())
}

fn idx_header(bytes: &[u8], magic: u32, dims: usize, path: &Path) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::Data(format!("{} is truncated", path.display())));
    }
    let word = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    if word(0) != magic {
        return Err(Error::Data(format!(
            "{}: bad IDX magic {:#010x}, expected {magic:#010x}",
            path.display(),
            word(0)
        )));
    }
    let shape: Vec<usize> = (0..dims).map(|d| word(4 + 4 * d) as usize).collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(shape)
}

/// Parses an IDX image/label archive pair into raw `u8` images and labels.
pub fn parse_idx(
    images: &[u8],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<(usize, usize, Vec<u8>, Vec<u8>)> {
    let ishape = idx_header(images, 0x0803, 3, images_path)?;
    let lshape = idx_header(labels, 0x0801, 1, labels_path)?;
    if ishape[0] != lshape[0] {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            ishape[0], lshape[0]
        )));
    }
    if ishape[1] != ishape[2] {
        return Err(Error::Data(format!(
            "non-square IDX images {}x{}",
            ishape[1], ishape[2]
        )));
    }
    Ok((
        ishape[0],
        ishape[1],
        images[16..].to_vec(),
        labels[8..].to_vec(),
    ))
}

/// Zero-pads (with the background value) a square grayscale image to `target` pixels.
fn pad_to(src: &[f32], size: usize, target: usize, fill: f32) -> Vec<f32> {
    let off = (target - size) / 2;
    let mut out = vec![fill; target * target];
    for y in 0..size {
        out[(y + off) * target + off..(y + off) * target + off + size]
            .copy_from_slice(&src[y * size..(y + 1) * size]);
    }
    out
}

fn resize_gray(src: &[f32], size: usize, target: usize) -> Vec<f32> {
    let img = image::ImageBuffer::<image::Luma<f32>, _>::from_raw(size as u32, size as u32, src.to_vec())
        .expect("buffer sized for image");
    let out = image::imageops::resize(&img, target as u32, target as u32, FilterType::Triangle);
    out.into_raw()
}

/// Loads one MNIST split. The ten digit classes become ten domains; the 28x28 digits are
/// padded to 32x32 (and resized if another size is requested) and scaled to `[-1, 1]`.
pub fn load_mnist(root: impl AsRef<Path>, split: Split, image_size: usize) -> Result<DomainDataset> {
    let root = root.as_ref();
    let (img_name, lbl_name) = match split {
        Split::Train => (MNIST_FILES[0], MNIST_FILES[1]),
        Split::Test => (MNIST_FILES[2], MNIST_FILES[3]),
    };
    let (ipath, ibytes) = read_archive(root, img_name.0)?;
    verify_checksum(&ipath, &ibytes, img_name.1)?;
    let (lpath, lbytes) = read_archive(root, lbl_name.0)?;
    verify_checksum(&lpath, &lbytes, lbl_name.1)?;
    mnist_from_idx(&ibytes, &lbytes, &ipath, &lpath, split, image_size)
}

/// Converts already-read IDX bytes into a dataset (no checksum verification).
pub fn mnist_from_idx(
    images: &[u8],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
    split: Split,
    image_size: usize,
) -> Result<DomainDataset> {
    if image_size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let (n, side, raw, labels) = parse_idx(images, labels, images_path, labels_path)?;
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("digit label {bad} out of range")));
    }
    let padded_side = side.max(32);
    let mut pixels = Vec::with_capacity(n * image_size * image_size);
    for i in 0..n {
        let img: Vec<f32> = raw[i * side * side..(i + 1) * side * side]
            .iter()
            .map(|&p| p as f32 / 255.0 * 2.0 - 1.0)
            .collect();
        let img = if padded_side > side {
            pad_to(&img, side, padded_side, -1.0)
        } else {
            img
        };
        if image_size == padded_side {
            pixels.extend_from_slice(&img);
        } else {
            pixels.extend(resize_gray(&img, padded_side, image_size));
        }
    }
    DomainDataset::from_parts(
        split,
        1,
        image_size,
        (0..10).map(|d| d.to_string()).collect(),
        pixels,
        labels.into_iter().map(usize::from).collect(),
    )
}

/// Train and test halves produced by [`load_image_folder`].
#[derive(Debug, Clone)]
pub struct FolderSplits {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Center-crops to a square, resizes and scales an image to `[-1, 1]`, channel-major.
pub fn preprocess_image(img: &image::DynamicImage, image_size: usize, channels: usize) -> Result<Vec<f32>> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = cropped.resize_exact(image_size as u32, image_size as u32, FilterType::Triangle);
    let plane = image_size * image_size;
    match channels {
        1 => Ok(resized
            .to_luma32f()
            .into_raw()
            .into_iter()
            .map(|p| p * 2.0 - 1.0)
            .collect()),
        3 => {
            let rgb = resized.to_rgb32f().into_raw();
            let mut out = vec![0.0; 3 * plane];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = px[c] * 2.0 - 1.0;
                }
            }
            Ok(out)
        }
        other => Err(Error::Config(format!("unsupported channel count {other}"))),
    }
}

/// Loads `root/<domain>/<image>` files. Domains are the subdirectory names in sorted
/// order; each domain is shuffled with `seed` and split by `train_fraction`.
/// Undecodable files are skipped and counted.
pub fn load_image_folder(
    root: impl AsRef<Path>,
    image_size: usize,
    channels: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<FolderSplits> {
    let root = root.as_ref();
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut domains: Vec<(String, Vec<PathBuf>)> = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&path)
            .map_err(|e| Error::io(&path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        let name = entry.file_name().to_string_lossy().into_owned();
        if files.is_empty() {
            return Err(Error::Data(format!("domain folder {} is empty", path.display())));
        }
        domains.push((name, files));
    }
    domains.sort_by(|a, b| a.0.cmp(&b.0));
    if domains.len() < 2 {
        return Err(Error::Data(format!(
            "{} holds {} domain folders, need at least 2",
            root.display(),
            domains.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_px, mut train_lbl) = (Vec::new(), Vec::new());
    let (mut test_px, mut test_lbl) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for (label, (_, files)) in domains.iter().enumerate() {
        let mut order: Vec<usize> = (0..files.len()).collect();
        order.shuffle(&mut rng);
        let n_train = (files.len() as f64 * train_fraction).round() as usize;
        for (rank, &i) in order.iter().enumerate() {
            let decoded = image::open(&files[i])
                .map_err(Error::from)
                .and_then(|img| preprocess_image(&img, image_size, channels));
            let px = match decoded {
                Ok(px) => px,
                Err(e) => {
                    log::warn!("skipping {}: {e}", files[i].display());
                    skipped += 1;
                    continue;
                }
            };
            if rank < n_train {
                train_px.extend(px);
                train_lbl.push(label);
            } else {
                test_px.extend(px);
                test_lbl.push(label);
            }
        }
    }
    let names: Vec<String> = domains.into_iter().map(|(n, _)| n).collect();
    let mut train = DomainDataset::from_parts(
        Split::Train,
        channels,
        image_size,
        names.clone(),
        train_px,
        train_lbl,
    )?;
    let mut test =
        DomainDataset::from_parts(Split::Test, channels, image_size, names, test_px, test_lbl)?;
    train.skipped = skipped;
    test.skipped = skipped;
    Ok(FolderSplits { train, test })
}
