//! Synthetic MRI-like data, PGM image I/O, preprocessing, and the 80:20
//! split.
//!
//! The generators produce desk-scale stand-ins for brain-MRI studies: a
//! noisy dark background with one bright lesion whose geometry encodes the
//! class. Classification images carry a label; segmentation images carry the
//! exact painted lesion mask. Generation is pure per sample: sample `i` of a
//! run with seed `s` is drawn from `splitmix64(s XOR i)`, so datasets are
//! bit-reproducible and order-independent.
//!
//! Storage is deliberately primitive: binary PGM (P5, maxval 255) for
//! images, the same container with raw class-id bytes for masks, and a JSON
//! manifest listing files, labels, and the train/test split assignment.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// H x W class-id mask (row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Mask {
        Mask { h, w, data: vec![0; h * w] }
    }
}

#[derive(Debug, Clone)]
pub struct ClsSample {
    /// 3 x H x W, values in [0, 1]; grayscale replicated across channels.
    pub image: Tensor<f32>,
    pub label: usize,
    pub sample_id: u64,
}

#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub sample_id: u64,
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Classification { samples: Vec<ClsSample>, num_classes: usize },
    Segmentation { samples: Vec<SegSample>, num_classes: usize },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Classification { samples, .. } => samples.len(),
            Dataset::Segmentation { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Dataset::Classification { num_classes, .. } => *num_classes,
            Dataset::Segmentation { num_classes, .. } => *num_classes,
        }
    }
}

/// Replicates an H x W grayscale tensor to 3 x H x W.
pub fn replicate3(gray: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = gray.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "replicate3",
            shape: shape.to_vec(),
            reason: "expected H x W grayscale".into(),
        });
    }
    let mut data = Vec::with_capacity(3 * gray.len());
    for _ in 0..3 {
        data.extend_from_slice(gray.data());
    }
    Tensor::new(vec![3, shape[0], shape[1]], data)
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// One lesion shape, in pixel coordinates (pixel centers at x + 0.5).
enum Shape {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, theta: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, a, b, theta } => {
                let (dx, dy) = (px - cx, py - cy);
                let (s, c) = theta.sin_cos();
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                u * u + v * v <= 1.0
            }
            Shape::Disc { cx, cy, r } => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

/// Radii and axes in fractions of the image side. The floors keep lesions a
/// few pixels wide even at the smallest sizes, so painted fractions stay
/// inside the documented [0.5%, 20%] band.
fn px(frac: f64, size: usize) -> f64 {
    (frac * size as f64).max(1.5)
}

/// Lesion geometry for one class, drawn from the sample's own stream.
/// Class 0 has no lesion; 1 is a union of three overlapping ellipses
/// (irregular); 2 is a single large disc cut by the image border; 3 is a
/// small disc within 10% of the image center.
fn lesion_shapes(class: usize, size: usize, rng: &mut SplitMix64) -> Vec<Shape> {
    let s = size as f64;
    match class {
        0 => Vec::new(),
        1 => {
            let cx = rng.uniform_in(0.3, 0.7) * s;
            let cy = rng.uniform_in(0.3, 0.7) * s;
            let mut shapes = Vec::with_capacity(3);
            for i in 0..3 {
                // Later ellipses stay within 0.06*size of the first center;
                // with semi-axes of at least 0.06*size they must overlap it.
                let (ex, ey) = if i == 0 {
                    (cx, cy)
                } else {
                    (
                        cx + rng.uniform_in(-0.06, 0.06) * s,
                        cy + rng.uniform_in(-0.06, 0.06) * s,
                    )
                };
                shapes.push(Shape::Ellipse {
                    cx: ex,
                    cy: ey,
                    a: px(rng.uniform_in(0.06, 0.13), size),
                    b: px(rng.uniform_in(0.06, 0.13), size),
                    theta: rng.uniform_in(0.0, std::f64::consts::PI),
                });
            }
            shapes
        }
        2 => {
            let r = px(rng.uniform_in(0.15, 0.25), size);
            let t = rng.uniform_in(0.25, 0.75) * s;
            let d = rng.uniform_in(0.5, 0.9) * r;
            let (cx, cy) = match rng.below(4) {
                0 => (t, d),         // near top
                1 => (t, s - d),     // near bottom
                2 => (d, t),         // near left
                _ => (s - d, t),     // near right
            };
            vec![Shape::Disc { cx, cy, r }]
        }
        3 => {
            let rho = rng.uniform_in(0.0, 0.1) * s;
            let phi = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
            vec![Shape::Disc {
                cx: s / 2.0 + rho * phi.cos(),
                cy: s / 2.0 + rho * phi.sin(),
                r: px(rng.uniform_in(0.05, 0.09), size),
            }]
        }
        _ => unreachable!("lesion classes are 0..=3"),
    }
}

/// Paints one sample: background noise N(0.2, 0.05) clipped to [0, 1],
/// lesion pixels 0.8 plus the same noise. Returns the grayscale image and
/// the exact indicator used while painting. Class-0 images are additionally
/// clamped to 0.5 so "no bright pixel" holds by construction.
fn paint_sample(class: usize, size: usize, rng: &mut SplitMix64) -> (Tensor<f32>, Mask) {
    let shapes = lesion_shapes(class, size, rng);
    let mut img = Vec::with_capacity(size * size);
    let mut mask = Mask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (pxc, pyc) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = shapes.iter().any(|sh| sh.contains(pxc, pyc));
            let base = if inside { 0.8 } else { 0.2 };
            let mut v = (base + rng.normal(0.0, 0.05)).clamp(0.0, 1.0);
            if class == 0 {
                v = v.min(0.5);
            }
            if inside {
                mask.data[y * size + x] = class as u8;
            }
            img.push(v as f32);
        }
    }
    let gray = Tensor::new(vec![size, size], img).expect("painted image shape");
    (gray, mask)
}

/// Four-class classification set: `n_per_class` samples of each class,
/// labels interleaved (sample i has class i mod 4). Deterministic from
/// (seed, size, n_per_class).
pub fn synth_classification(n_per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 32 {
        return Err(Error::InvalidData(format!(
            "classification images must be at least 32 px, got {size}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidData("n_per_class must be positive".into()));
    }
    let samples = (0..4 * n_per_class as u64)
        .map(|id| {
            let class = (id % 4) as usize;
            let mut rng = SplitMix64::new(seed ^ id);
            let (gray, _) = paint_sample(class, size, &mut rng);
            Ok(ClsSample { image: replicate3(&gray)?, label: class, sample_id: id })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::Classification { samples, num_classes: 4 })
}

/// Segmentation set of `n` (image, mask) pairs. Sample i carries lesion
/// type i mod 4, where type 0 means an empty (all-background) mask; the
/// mask is the exact indicator the painter used.
pub fn synth_segmentation(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size % 16 != 0 || size == 0 {
        return Err(Error::InvalidData(format!(
            "segmentation size must be a positive multiple of 16, got {size}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidData("sample count must be positive".into()));
    }
    let samples = (0..n as u64)
        .map(|id| {
            let class = (id % 4) as usize;
            let mut rng = SplitMix64::new(seed ^ id);
            let (gray, mask) = paint_sample(class, size, &mut rng);
            Ok(SegSample { image: replicate3(&gray)?, mask, sample_id: id })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::Segmentation { samples, num_classes: 4 })
}

// ---------------------------------------------------------------------------
// PGM I/O
// ---------------------------------------------------------------------------

/// Reads the P5 header and payload: magic, dimensions, maxval 255, one
/// whitespace byte, then exactly w*h bytes.
fn read_pgm_raw(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::InvalidData(format!("{}: {why}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("not a binary PGM (P5 magic missing)"));
    }
    // Tokenize the header: three whitespace-separated fields after the
    // magic, with # comments running to end of line.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("malformed header"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are utf-8")
            .parse()
            .map_err(|_| bad("header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() != w * h {
        return Err(bad("truncated or oversized payload"));
    }
    Ok((w, h, payload.to_vec()))
}

fn write_pgm_raw(path: &Path, w: usize, h: usize, payload: &[u8]) -> Result<()> {
    debug_assert_eq!(payload.len(), w * h);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(payload)?;
    Ok(())
}

/// Grayscale image in [0, 1] -> bytes via round(v * 255), half away from
/// zero.
pub fn write_pgm_gray(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "write_pgm_gray",
            shape: shape.to_vec(),
            reason: "expected H x W".into(),
        });
    }
    let payload: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    write_pgm_raw(path, shape[1], shape[0], &payload)
}

/// Bytes -> [0, 1] grayscale (v / 255).
pub fn read_pgm_gray(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, payload) = read_pgm_raw(path)?;
    Tensor::new(vec![h, w], payload.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Masks travel as raw class-id bytes, no scaling.
pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pgm_raw(path, mask.w, mask.h, &mask.data)
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let (w, h, payload) = read_pgm_raw(path)?;
    Ok(Mask { h, w, data: payload })
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    MinMax01,
    ZScore,
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Bilinear resize of one channel with the corner-pixel-center convention
/// (align-corners false): destination pixel centers map to source
/// coordinates (i + 0.5) * src/dst - 0.5, clamped at the edges. The nested
/// lerp form reproduces constant images exactly.
fn resize_channel(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize, out: &mut Vec<f32>) {
    let ry = sh as f32 / dh as f32;
    let rx = sw as f32 / dw as f32;
    for y in 0..dh {
        let sy = ((y as f32 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = sy - y0 as f32;
        for x in 0..dw {
            let sx = ((x as f32 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = sx - x0 as f32;
            let top = lerp(src[y0 * sw + x0], src[y0 * sw + x1], fx);
            let bot = lerp(src[y1 * sw + x0], src[y1 * sw + x1], fx);
            out.push(lerp(top, bot, fy));
        }
    }
}

/// Resize to `target` (H, W) then normalize over the whole image. Accepts
/// H x W or C x H x W. minmax01 maps the range to [0, 1] (constant image to
/// zeros); zscore centers to mean 0, population std 1 (zero std to zeros).
pub fn preprocess(
    img: &Tensor<f32>,
    target: (usize, usize),
    mode: Normalize,
) -> Result<Tensor<f32>> {
    let shape = img.shape();
    let (ch, sh, sw) = match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => {
            return Err(Error::InvalidShape {
                op: "preprocess",
                shape: shape.to_vec(),
                reason: "expected H x W or C x H x W".into(),
            })
        }
    };
    let (dh, dw) = target;
    if dh == 0 || dw == 0 {
        return Err(Error::InvalidData("target size must be positive".into()));
    }
    let mut resized = Vec::with_capacity(ch * dh * dw);
    for c in 0..ch {
        resize_channel(&img.data()[c * sh * sw..(c + 1) * sh * sw], sh, sw, dh, dw, &mut resized);
    }

    match mode {
        Normalize::MinMax01 => {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &v in &resized {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi > lo {
                let inv = 1.0 / (hi - lo);
                for v in &mut resized {
                    *v = (*v - lo) * inv;
                }
            } else {
                resized.fill(0.0);
            }
        }
        Normalize::ZScore => {
            let n = resized.len() as f64;
            let mean = resized.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = resized.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                let inv = 1.0 / var.sqrt();
                for v in &mut resized {
                    *v = ((*v as f64 - mean) * inv) as f32;
                }
            } else {
                resized.fill(0.0);
            }
        }
    }

    let out_shape = if shape.len() == 2 { vec![dh, dw] } else { vec![ch, dh, dw] };
    Tensor::new(out_shape, resized)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Seeded 80:20 index split. With labels, the cut is stratified: each
/// class's indices are shuffled and its first ceil(0.8 * count) go to train.
/// Without labels a single shuffle is cut at ceil(0.8 * n). Both halves are
/// returned in ascending index order.
pub fn split_indices(
    labels: Option<&[usize]>,
    n: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::InvalidData(format!(
            "splitting needs at least 5 samples, got {n}"
        )));
    }
    if let Some(l) = labels {
        debug_assert_eq!(l.len(), n);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut order);

    let mut train = Vec::new();
    let mut test = Vec::new();
    match labels {
        Some(labels) => {
            let classes = labels.iter().max().copied().unwrap_or(0) + 1;
            for c in 0..classes {
                let members: Vec<usize> =
                    order.iter().copied().filter(|&i| labels[i] == c).collect();
                let cut = ceil_80(members.len());
                train.extend_from_slice(&members[..cut]);
                test.extend_from_slice(&members[cut..]);
            }
        }
        None => {
            let cut = ceil_80(n);
            train.extend_from_slice(&order[..cut]);
            test.extend_from_slice(&order[cut..]);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// ceil(0.8 * n) in integer arithmetic.
fn ceil_80(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

/// Splits a dataset 80:20 (stratified by label for classification, plain
/// shuffle for segmentation).
pub fn split_80_20(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    match ds {
        Dataset::Classification { samples, num_classes } => {
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let (tr, te) = split_indices(Some(&labels), samples.len(), seed)?;
            let pick = |idx: &[usize]| Dataset::Classification {
                samples: idx.iter().map(|&i| samples[i].clone()).collect(),
                num_classes: *num_classes,
            };
            Ok((pick(&tr), pick(&te)))
        }
        Dataset::Segmentation { samples, num_classes } => {
            let (tr, te) = split_indices(None, samples.len(), seed)?;
            let pick = |idx: &[usize]| Dataset::Segmentation {
                samples: idx.iter().map(|&i| samples[i].clone()).collect(),
                num_classes: *num_classes,
            };
            Ok((pick(&tr), pick(&te)))
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub sample_id: u64,
    pub split: Split,
}

/// The JSON index written beside the PGM files. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DataKind,
    pub num_classes: usize,
    pub size: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn image_hw(t: &Tensor<f32>) -> (usize, usize) {
    let s = t.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

/// Writes every sample as PGM plus `manifest.json`, assigning the 80:20
/// split with `split_seed`. Images are stored as single-channel files
/// (channel 0; the channels are replicas).
pub fn save_dataset(ds: &Dataset, dir: &Path, split_seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (entries, kind, size) = match ds {
        Dataset::Classification { samples, .. } => {
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let (train, _) = split_indices(Some(&labels), samples.len(), split_seed)?;
            let mut entries = Vec::with_capacity(samples.len());
            let mut size = 0;
            for (i, s) in samples.iter().enumerate() {
                let (h, w) = image_hw(&s.image);
                size = h;
                let name = format!("img_{:04}.pgm", s.sample_id);
                let gray = Tensor::new(
                    vec![h, w],
                    s.image.data()[..h * w].to_vec(),
                )?;
                write_pgm_gray(&dir.join(&name), &gray)?;
                entries.push(ManifestEntry {
                    image: name,
                    label: Some(s.label),
                    mask: None,
                    sample_id: s.sample_id,
                    split: if train.binary_search(&i).is_ok() { Split::Train } else { Split::Test },
                });
            }
            (entries, DataKind::Classification, size)
        }
        Dataset::Segmentation { samples, .. } => {
            let (train, _) = split_indices(None, samples.len(), split_seed)?;
            let mut entries = Vec::with_capacity(samples.len());
            let mut size = 0;
            for (i, s) in samples.iter().enumerate() {
                let (h, w) = image_hw(&s.image);
                size = h;
                let name = format!("img_{:04}.pgm", s.sample_id);
                let mask_name = format!("mask_{:04}.pgm", s.sample_id);
                let gray = Tensor::new(vec![h, w], s.image.data()[..h * w].to_vec())?;
                write_pgm_gray(&dir.join(&name), &gray)?;
                write_pgm_mask(&dir.join(&mask_name), &s.mask)?;
                entries.push(ManifestEntry {
                    image: name,
                    label: None,
                    mask: Some(mask_name),
                    sample_id: s.sample_id,
                    split: if train.binary_search(&i).is_ok() { Split::Train } else { Split::Test },
                });
            }
            (entries, DataKind::Segmentation, size)
        }
    };
    let manifest = DatasetManifest {
        kind,
        num_classes: ds.num_classes(),
        size,
        entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

pub fn load_manifest(manifest_path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads (a split of) a stored dataset. `manifest_path` may be the manifest
/// file itself or its directory.
pub fn load_dataset(manifest_path: &Path, filter: Option<Split>) -> Result<Dataset> {
    let manifest_path: PathBuf = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_NAME)
    } else {
        manifest_path.to_path_buf()
    };
    let manifest = load_manifest(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let keep = |e: &ManifestEntry| filter.map_or(true, |f| e.split == f);
    match manifest.kind {
        DataKind::Classification => {
            let mut samples = Vec::new();
            for e in manifest.entries.iter().filter(|e| keep(e)) {
                let gray = read_pgm_gray(&root.join(&e.image))?;
                let label = e.label.ok_or_else(|| {
                    Error::InvalidData(format!("{}: classification entry without label", e.image))
                })?;
                if label >= manifest.num_classes {
                    return Err(Error::LabelOutOfRange { label, classes: manifest.num_classes });
                }
                samples.push(ClsSample {
                    image: replicate3(&gray)?,
                    label,
                    sample_id: e.sample_id,
                });
            }
            Ok(Dataset::Classification { samples, num_classes: manifest.num_classes })
        }
        DataKind::Segmentation => {
            let mut samples = Vec::new();
            for e in manifest.entries.iter().filter(|e| keep(e)) {
                let gray = read_pgm_gray(&root.join(&e.image))?;
                let mask_name = e.mask.as_ref().ok_or_else(|| {
                    Error::InvalidData(format!("{}: segmentation entry without mask", e.image))
                })?;
                let mask = read_pgm_mask(&root.join(mask_name))?;
                if let Some(&bad) =
                    mask.data.iter().find(|&&v| v as usize >= manifest.num_classes)
                {
                    return Err(Error::LabelOutOfRange {
                        label: bad as usize,
                        classes: manifest.num_classes,
                    });
                }
                samples.push(SegSample {
                    image: replicate3(&gray)?,
                    mask,
                    sample_id: e.sample_id,
                });
            }
            Ok(Dataset::Segmentation { samples, num_classes: manifest.num_classes })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = synth_classification(3, 32, 42).unwrap();
        let b = synth_classification(3, 32, 42).unwrap();
        let (Dataset::Classification { samples: sa, .. }, Dataset::Classification { samples: sb, .. }) =
            (&a, &b)
        else {
            unreachable!()
        };
        for (x, y) in sa.iter().zip(sb) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.label, y.label);
        }
        let c = synth_classification(3, 32, 43).unwrap();
        let Dataset::Classification { samples: sc, .. } = &c else { unreachable!() };
        assert!(sa[0].image.data() != sc[0].image.data());
    }

    #[test]
    fn labels_balanced_and_counted() {
        let ds = synth_classification(16, 32, 7).unwrap();
        assert_eq!(ds.len(), 64);
        let Dataset::Classification { samples, .. } = &ds else { unreachable!() };
        for c in 0..4 {
            assert_eq!(samples.iter().filter(|s| s.label == c).count(), 16);
        }
    }

    #[test]
    fn class0_has_no_bright_pixel() {
        let ds = synth_classification(8, 48, 1234).unwrap();
        let Dataset::Classification { samples, .. } = &ds else { unreachable!() };
        for s in samples.iter().filter(|s| s.label == 0) {
            assert!(s.image.data().iter().all(|&v| v <= 0.5));
        }
    }

    #[test]
    fn lesion_classes_are_bright_where_masked() {
        let ds = synth_segmentation(24, 64, 9).unwrap();
        let Dataset::Segmentation { samples, .. } = &ds else { unreachable!() };
        for s in samples {
            let hw = s.mask.h * s.mask.w;
            let gray = &s.image.data()[..hw];
            let class = (s.sample_id % 4) as u8;
            if class == 0 {
                assert!(s.mask.data.iter().all(|&v| v == 0), "empty sample has nonzero mask");
                continue;
            }
            assert!(s.mask.data.iter().all(|&v| v == 0 || v == class));
            let lesion: Vec<f32> = (0..hw).filter(|&i| s.mask.data[i] != 0).map(|i| gray[i]).collect();
            let bg: Vec<f32> = (0..hw).filter(|&i| s.mask.data[i] == 0).map(|i| gray[i]).collect();
            let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
            assert!(mean(&lesion) > 0.7, "lesion should be bright");
            assert!(mean(&bg) < 0.3, "background should be dark");
        }
    }

    #[test]
    fn lesion_fraction_within_band() {
        for size in [32usize, 64] {
            let ds = synth_segmentation(40, size, 0xfeed).unwrap();
            let Dataset::Segmentation { samples, .. } = &ds else { unreachable!() };
            for s in samples {
                if s.sample_id % 4 == 0 {
                    continue;
                }
                let lesion = s.mask.data.iter().filter(|&&v| v != 0).count();
                let frac = lesion as f64 / (size * size) as f64;
                assert!(
                    (0.005..=0.20).contains(&frac),
                    "sample {} at size {size}: fraction {frac}",
                    s.sample_id
                );
            }
        }
    }

    #[test]
    fn generator_size_validation() {
        assert!(synth_segmentation(4, 30, 1).is_err());
        assert!(synth_classification(4, 16, 1).is_err());
    }

    #[test]
    fn pgm_round_trip_and_byte_example() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let img = Tensor::new(vec![2, 2], vec![0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]).unwrap();
        write_pgm_gray(&p, &img).unwrap();
        let back = read_pgm_gray(&p).unwrap();
        assert_eq!(back.data(), img.data());
        let raw = std::fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&raw[raw.len() - 4..], &[0u8, 128, 255, 64]);
    }

    #[test]
    fn pgm_quantizes_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.pgm");
        let img = Tensor::new(vec![1, 3], vec![0.5, 0.001, 0.999]).unwrap();
        write_pgm_gray(&p, &img).unwrap();
        let back = read_pgm_gray(&p).unwrap();
        let want: Vec<f32> = img.data().iter().map(|v| (v * 255.0).round() / 255.0).collect();
        assert_eq!(back.data(), &want[..]);
    }

    #[test]
    fn pgm_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P2\n2 2\n255\n0 0 0 0").unwrap();
        assert!(read_pgm_gray(&p).is_err());
        std::fs::write(&p, b"P5\n2 2\n15\n0000").unwrap();
        assert!(read_pgm_gray(&p).is_err());
        std::fs::write(&p, b"P5\n2 2\n255\n00").unwrap();
        assert!(read_pgm_gray(&p).is_err());
        // Comments and generous whitespace are legal.
        std::fs::write(&p, b"P5\n# made by hand\n 2\t2 \n255\n0123").unwrap();
        let t = read_pgm_gray(&p).unwrap();
        assert_eq!(t.shape(), vec![2, 2]);
    }

    #[test]
    fn mask_round_trip_raw_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mask = Mask { h: 2, w: 3, data: vec![0, 1, 2, 3, 0, 1] };
        write_pgm_mask(&p, &mask).unwrap();
        assert_eq!(read_pgm_mask(&p).unwrap(), mask);
    }

    #[test]
    fn resize_identity_and_constant_preservation() {
        let mut rng = SplitMix64::new(5);
        let img = Tensor::<f32>::uniform(vec![3, 17, 13], 0.0, 1.0, &mut rng).unwrap();
        let same = preprocess(&img, (17, 13), Normalize::MinMax01).unwrap();
        // Identity resize then minmax: only the normalization acts.
        let (lo, hi) = img.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
        for (&a, &b) in same.data().iter().zip(img.data()) {
            assert!((a - (b - lo) / (hi - lo)).abs() < 1e-6);
        }

        let flat = Tensor::new(vec![4, 4], vec![0.37; 16]).unwrap();
        let up = preprocess(&flat, (9, 7), Normalize::MinMax01).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.0), "constant image maps to zeros");
    }

    #[test]
    fn minmax_hand_case() {
        let img = Tensor::new(vec![1, 3], vec![2.0, 4.0, 6.0]).unwrap();
        let out = preprocess(&img, (1, 3), Normalize::MinMax01).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn zscore_moments() {
        let mut rng = SplitMix64::new(8);
        let img = Tensor::<f32>::uniform(vec![12, 10], 0.0, 5.0, &mut rng).unwrap();
        let out = preprocess(&img, (12, 10), Normalize::ZScore).unwrap();
        let n = out.len() as f64;
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn split_is_partition_and_stratified() {
        let ds = synth_classification(10, 32, 3).unwrap();
        let (train, test) = split_80_20(&ds, 77).unwrap();
        assert_eq!(train.len(), 32);
        assert_eq!(test.len(), 8);
        let (Dataset::Classification { samples: tr, .. }, Dataset::Classification { samples: te, .. }) =
            (&train, &test)
        else {
            unreachable!()
        };
        let mut ids: Vec<u64> = tr.iter().chain(te.iter()).map(|s| s.sample_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..40).collect::<Vec<u64>>());
        for c in 0..4 {
            assert_eq!(tr.iter().filter(|s| s.label == c).count(), 8);
            assert_eq!(te.iter().filter(|s| s.label == c).count(), 2);
        }
    }

    #[test]
    fn split_counting_oracle() {
        // A 1621-strong class splits 1297 / 324 under the stratified ceil.
        let labels = vec![0usize; 1621];
        let (tr, te) = split_indices(Some(&labels), 1621, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (1297, 324));
        // Uneven classes stay within one sample of 80:20 each.
        let labels: Vec<usize> = (0..47).map(|i| i % 3).collect();
        let (tr, _) = split_indices(Some(&labels), 47, 2).unwrap();
        for c in 0..3 {
            let total = labels.iter().filter(|&&l| l == c).count();
            let in_train = tr.iter().filter(|&&i| labels[i] == c).count();
            assert!((in_train as f64 - 0.8 * total as f64).abs() < 1.0);
        }
    }

    #[test]
    fn split_rejects_tiny_sets() {
        assert!(split_indices(None, 4, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_segmentation(8, 32, 21).unwrap();
        save_dataset(&ds, dir.path(), 5).unwrap();
        let all = load_dataset(dir.path(), None).unwrap();
        assert_eq!(all.len(), 8);
        let train = load_dataset(&dir.path().join(MANIFEST_NAME), Some(Split::Train)).unwrap();
        let test = load_dataset(dir.path(), Some(Split::Test)).unwrap();
        assert_eq!(train.len() + test.len(), 8);
        assert_eq!(train.len(), 7); // ceil(0.8 * 8)

        let (Dataset::Segmentation { samples: orig, .. }, Dataset::Segmentation { samples: back, .. }) =
            (&ds, &all)
        else {
            unreachable!()
        };
        for (o, b) in orig.iter().zip(back) {
            assert_eq!(o.mask, b.mask, "masks survive byte-exact");
            // Images survive up to the 8-bit quantization of PGM.
            for (&x, &y) in o.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }

        // Second save of the loaded data reproduces the files byte for byte.
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&all, dir2.path(), 5).unwrap();
        for name in ["img_0000.pgm", "mask_0003.pgm", MANIFEST_NAME] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn loader_rejects_out_of_range_mask_values() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_segmentation(5, 16, 3).unwrap();
        save_dataset(&ds, dir.path(), 1).unwrap();
        // Rewrite one mask with an out-of-range class id.
        let bad = Mask { h: 16, w: 16, data: vec![9; 256] };
        write_pgm_mask(&dir.path().join("mask_0001.pgm"), &bad).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), None),
            Err(Error::LabelOutOfRange { label: 9, .. })
        ));
    }
}
