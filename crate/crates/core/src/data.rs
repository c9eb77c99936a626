//! Datasets: seeded synthetic generators, IDX and CSV readers, splits and
//! minibatch order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_path, derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...example_shape]`, every entry in `[0, 1]`.
    pub inputs: Tensor,
    /// `None` for an unlabeled pool.
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    pub tag: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Option<Vec<usize>>, classes: usize, tag: impl Into<String>) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::Invalid(format!("dataset inputs need a batch axis, got {:?}", inputs.shape())));
        }
        if let Some(v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("input value {v} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::Invalid(format!(
                    "{} labels for {} examples",
                    l.len(),
                    inputs.rows()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::Label { label: bad, classes });
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            tag: tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-example shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Invalid(format!("dataset {:?} is unlabeled", self.tag)))
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            tag: self.tag.clone(),
        }
    }

    /// Seeded subset of at most `n` examples, in original order.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Split into a labeled part holding `fraction` of the examples and an
    /// unlabeled remainder with labels dropped. Pure function of `(seed, fraction)`.
    pub fn split_labeled(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Invalid(format!("labeled fraction must be in [0, 1], got {fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        let k = ((self.len() as f64) * fraction).round() as usize;
        let k = k.clamp(1, self.len());
        let (mut a, mut b) = (idx[..k].to_vec(), idx[k..].to_vec());
        a.sort_unstable();
        b.sort_unstable();
        let labeled = Dataset {
            tag: format!("{}/labeled", self.tag),
            ..self.select(&a)
        };
        let unlabeled = if b.is_empty() {
            Dataset {
                inputs: Tensor::zeros(&[0]),
                labels: None,
                classes: self.classes,
                tag: format!("{}/unlabeled", self.tag),
            }
        } else {
            Dataset {
                labels: None,
                tag: format!("{}/unlabeled", self.tag),
                ..self.select(&b)
            }
        };
        Ok((labeled, unlabeled))
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    /// `[d]` for vectors, `[channels, h, w]` for images.
    pub shape: Vec<usize>,
    /// Scale of the class centres relative to the unit noise.
    pub margin: f64,
    /// Per-coordinate Gaussian noise standard deviation.
    pub noise: f64,
    /// Image mode only: per-example positional jitter of the blobs, in pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn vectors(n: usize, classes: usize, dim: usize, margin: f64, seed: u64) -> Self {
        SynthSpec {
            n,
            classes,
            shape: vec![dim],
            margin,
            noise: 1.0,
            jitter: 0.0,
            seed,
        }
    }

    pub fn images(n: usize, classes: usize, side: usize, margin: f64, seed: u64) -> Self {
        SynthSpec {
            n,
            classes,
            shape: vec![1, side, side],
            margin,
            noise: 1.0,
            jitter: 0.0,
            seed,
        }
    }
}

/// Blob centres for image mode: two bright bumps per class and channel.
fn blob_centres(spec: &SynthSpec, rng: &mut Rng) -> Vec<Vec<(f64, f64)>> {
    let (h, w) = (spec.shape[1] as f64, spec.shape[2] as f64);
    (0..spec.classes)
        .map(|_| {
            (0..2 * spec.shape[0])
                .map(|_| (rng.uniform_range(0.5, h - 0.5), rng.uniform_range(0.5, w - 0.5)))
                .collect()
        })
        .collect()
}

fn render(spec: &SynthSpec, bumps: &[(f64, f64)], shift: (f64, f64), out: &mut [f64]) {
    let (c, h, w) = (spec.shape[0], spec.shape[1], spec.shape[2]);
    let width = 0.18 * h.max(w) as f64;
    for ch in 0..c {
        for &(my, mx) in &bumps[2 * ch..2 * ch + 2] {
            for i in 0..h {
                for j in 0..w {
                    let dy = i as f64 - (my + shift.0);
                    let dx = j as f64 - (mx + shift.1);
                    out[(ch * h + i) * w + j] += (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
                }
            }
        }
    }
}

/// C Gaussian clusters in `[0, 1]`, class-balanced and deterministic in
/// `seed`.
///
/// Vector mode draws centres `margin * N(0, I)`, adds unit-scaled noise and
/// maps everything affinely into `[0, 1]`. Image mode (`[C, H, W]` shapes)
/// renders each class as a pair of bright blobs per channel on a dark
/// background, adds noise of standard deviation `noise / margin` and clamps
/// to `[0, 1]`, so convolutions have spatial structure to find.
pub fn synth_blobs(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.n < spec.classes {
        return Err(Error::Invalid(format!(
            "need n >= classes >= 1, got n = {}, classes = {}",
            spec.n, spec.classes
        )));
    }
    let image = match spec.shape.len() {
        1 => false,
        3 => true,
        _ => return Err(Error::Invalid(format!("unsupported example shape {:?}", spec.shape))),
    };
    if spec.shape.contains(&0) || !(spec.noise >= 0.0) || !(spec.margin >= 0.0) {
        return Err(Error::Invalid("synthetic spec has a zero dimension or negative scale".into()));
    }
    if image && spec.margin == 0.0 {
        return Err(Error::Invalid("image mode needs margin > 0".into()));
    }
    let dim: usize = spec.shape.iter().product();
    let mut rng = Rng::new(derive_seed(spec.seed, 0));

    let bumps = image.then(|| blob_centres(spec, &mut rng));
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| match &bumps {
            Some(b) => {
                let mut c = vec![0.0; dim];
                render(spec, &b[k], (0.0, 0.0), &mut c);
                c
            }
            None => (0..dim).map(|_| spec.margin * rng.gaussian()).collect(),
        })
        .collect();
    let noise = if image { spec.noise / spec.margin } else { spec.noise };

    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    Rng::new(derive_seed(spec.seed, 1)).shuffle(&mut labels);

    let mut data = vec![0.0; spec.n * dim];
    for (i, &y) in labels.iter().enumerate() {
        let mut r = Rng::new(derive_path(spec.seed, &[2, i as u64]));
        let row = &mut data[i * dim..(i + 1) * dim];
        match (&bumps, spec.jitter > 0.0) {
            (Some(b), true) => {
                let shift = (spec.jitter * r.gaussian(), spec.jitter * r.gaussian());
                render(spec, &b[y], shift, row);
            }
            _ => row.copy_from_slice(&centres[y]),
        }
        for v in row.iter_mut() {
            *v += noise * r.gaussian();
        }
    }

    if image {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    } else {
        let (lo, hi) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in &mut data {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    }

    let mut shape = vec![spec.n];
    shape.extend_from_slice(&spec.shape);
    Dataset::new(Tensor::new(shape, data)?, Some(labels), spec.classes, "synth")
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header at byte {at}")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse an IDX image file (`0x00000803`, dims n, rows, cols, u8 pixels).
/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(path, format!("bad image magic 0x{magic:08x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {need} pixel bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format(path, format!("{} trailing bytes", payload.len() - need)));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

/// Parse an IDX label file (`0x00000801`, dim n, u8 labels).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(path, format!("bad label magic 0x{magic:08x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            path,
            format!("label payload has {} bytes, header says {n}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

/// Load an IDX image/label pair; pixels become `byte / 255` in a `[N, 1, rows, cols]` tensor.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images)?, images)?;
    let lab = parse_idx_labels(&read_file(labels)?, labels)?;
    if lab.len() != n {
        return Err(Error::format(
            labels,
            format!("{} labels but {} has {n} images", lab.len(), images.display()),
        ));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(images, "empty image file"));
    }
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, Some(labels), classes, "idx")
}

/// Serialize images/labels to IDX bytes (the inverse of the parsers).
pub fn encode_idx(pixels: &[u8], n: usize, rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// CSV with a header row, one example per line, features in `[0, 1]`, label last.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::format(path, "empty csv"))?;
    let width = header.split(',').count();
    if width < 2 {
        return Err(Error::format(path, "csv needs at least one feature and a label column"));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(Error::format(
                path,
                format!("line {}: {} fields, header has {width}", i + 1, fields.len()),
            ));
        }
        for f in &fields[..width - 1] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad number {f:?}", i + 1)))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::format(path, format!("line {}: value {v} outside [0, 1]", i + 1)));
            }
            data.push(v);
        }
        let y: usize = fields[width - 1]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad label {:?}", i + 1, fields[width - 1])))?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::format(path, "csv has no examples"));
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, width - 1], data)?, Some(labels), classes, "csv")
}

/// Minibatch index lists for one epoch: Fisher–Yates order keyed by
/// `(seed, epoch)`, last partial batch kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    Rng::new(derive_path(seed, &[0xBA7C4, epoch])).shuffle(&mut idx);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
