//! Dataset ingestion: IDX files and two seeded synthetic generators.
//!
//! Every source yields train/test splits with inputs in `[0, 1]`, a Gaussian
//! noise OoD set matched to the training statistics, and (for synthetic
//! sources with `ood_classes > 0`) a held-out split drawn from classes the
//! model never trains on.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use randprune::arch::Shape3;
use randprune::engine::Batch;
use randprune::rng::{self, streams};
use serde::{Deserialize, Serialize};

use crate::error::RunnerError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Isotropic Gaussian blobs in `[0, 1]^dim`.
    GaussianMixture {
        classes: usize,
        samples: usize,
        dim: usize,
        seed: u64,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        ood_classes: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Blocky per-class prototypes on a `size × size` grid, jittered by
    /// one-pixel shifts, contrast changes and pixel noise.
    ImageGrid {
        #[serde(default = "default_classes")]
        classes: usize,
        samples: usize,
        #[serde(default = "default_size")]
        size: usize,
        seed: u64,
        #[serde(default = "default_pixel_noise")]
        noise: f64,
        #[serde(default)]
        ood_classes: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// IDX (MNIST-style) unsigned-byte image and label files.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: usize,
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_spread() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.25
}
fn default_classes() -> usize {
    10
}
fn default_size() -> usize {
    8
}
fn default_pixel_noise() -> f64 {
    0.2
}

impl DatasetSource {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSource::GaussianMixture { classes, .. } | DatasetSource::ImageGrid { classes, .. } | DatasetSource::Idx { classes, .. } => *classes,
        }
    }

    /// Makes relative IDX paths relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        if let DatasetSource::Idx { images, labels, .. } = self {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Validation(m));
        let (classes, frac) = match self {
            DatasetSource::GaussianMixture { classes, samples, dim, test_fraction, spread, .. } => {
                if *samples == 0 || *dim == 0 {
                    return bad("gaussian_mixture needs positive samples and dim".into());
                }
                if !(*spread > 0.0) {
                    return bad("gaussian_mixture spread must be positive".into());
                }
                (*classes, *test_fraction)
            }
            DatasetSource::ImageGrid { classes, samples, size, test_fraction, noise, .. } => {
                if *samples == 0 || *size < 4 || size % 4 != 0 {
                    return bad("image_grid needs positive samples and a size divisible by 4".into());
                }
                if !(*noise >= 0.0) {
                    return bad("image_grid noise must be >= 0".into());
                }
                (*classes, *test_fraction)
            }
            DatasetSource::Idx { images, labels, classes, test_fraction, .. } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return bad(format!("dataset file {} does not exist", p.display()));
                    }
                }
                (*classes, *test_fraction)
            }
        };
        if classes < 2 {
            return bad("datasets need at least 2 classes".into());
        }
        if !(frac > 0.0 && frac < 1.0) {
            return bad(format!("test_fraction {frac} outside (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub shape: Shape3,
    pub classes: usize,
    pub train: Batch,
    pub test: Batch,
    /// Held-out-class split; absent for sources without extra classes.
    pub ood: Option<Batch>,
    /// Gaussian noise with the training set's per-feature mean and std.
    pub noise: Batch,
}

pub fn load_dataset(source: &DatasetSource) -> Result<Splits, RunnerError> {
    source.validate()?;
    let (shape, classes, all, ood, seed, frac) = match source {
        DatasetSource::GaussianMixture { classes, samples, dim, seed, spread, ood_classes, test_fraction } => {
            let (all, ood) = gaussian_mixture(*classes, *ood_classes, *samples, *dim, *spread, *seed);
            ((*dim, 1, 1), *classes, all, ood, *seed, *test_fraction)
        }
        DatasetSource::ImageGrid { classes, samples, size, seed, noise, ood_classes, test_fraction } => {
            let (all, ood) = image_grid(*classes, *ood_classes, *samples, *size, *noise, *seed);
            ((1, *size, *size), *classes, all, ood, *seed, *test_fraction)
        }
        DatasetSource::Idx { images, labels, classes, seed, test_fraction } => {
            let (shape, all) = read_idx_pair(images, labels, *classes)?;
            (shape, *classes, all, None, *seed, *test_fraction)
        }
    };
    let (train, test) = split(&all, frac, seed);
    if train.is_empty() || test.is_empty() {
        return Err(RunnerError::Validation("dataset too small to split".into()));
    }
    let noise = gaussian_noise_like(&train, test.len(), seed);
    Ok(Splits { shape, classes, train, test, ood, noise })
}

fn split(all: &Batch, test_fraction: f64, seed: u64) -> (Batch, Batch) {
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng::stream(seed, streams::SPLIT));
    let n_test = ((all.len() as f64 * test_fraction).round() as usize).clamp(1, all.len().saturating_sub(1).max(1));
    let (test_idx, train_idx) = order.split_at(n_test);
    (all.select(train_idx), all.select(test_idx))
}

fn gaussian_noise_like(train: &Batch, n: usize, seed: u64) -> Batch {
    let len = train.sample_len;
    let count = train.len() as f64;
    let mut mean = vec![0.0; len];
    for i in 0..train.len() {
        for (m, &x) in mean.iter_mut().zip(train.sample(i)) {
            *m += x / count;
        }
    }
    let mut var = vec![0.0; len];
    for i in 0..train.len() {
        for ((v, &x), &m) in var.iter_mut().zip(train.sample(i)).zip(&mean) {
            *v += (x - m) * (x - m) / count;
        }
    }
    let mut r = rng::stream(seed, streams::NOISE);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut inputs = Vec::with_capacity(n * len);
    for _ in 0..n {
        for (m, v) in mean.iter().zip(&var) {
            inputs.push((m + v.sqrt() * std_normal.sample(&mut r)).clamp(0.0, 1.0));
        }
    }
    Batch { inputs, labels: vec![0; n], sample_len: len }
}

fn gaussian_mixture(classes: usize, ood_classes: usize, samples: usize, dim: usize, spread: f64, seed: u64) -> (Batch, Option<Batch>) {
    let mut r = rng::stream(seed, streams::DATASET);
    let means: Vec<Vec<f64>> = (0..classes + ood_classes).map(|_| (0..dim).map(|_| r.random_range(0.25..0.75)).collect()).collect();
    let noise = Normal::new(0.0, spread).expect("positive spread");
    let draw = |class: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        means[class].iter().map(|&m| (m + noise.sample(r)).clamp(0.0, 1.0)).collect()
    };
    let mut inputs = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        inputs.extend(draw(c, &mut r));
        labels.push(c);
    }
    let ood = (ood_classes > 0).then(|| {
        let n = (samples / classes).max(1) * ood_classes;
        let mut xs = Vec::with_capacity(n * dim);
        for i in 0..n {
            xs.extend(draw(classes + i % ood_classes, &mut r));
        }
        Batch { inputs: xs, labels: vec![0; n], sample_len: dim }
    });
    (Batch { inputs, labels, sample_len: dim }, ood)
}

fn image_grid(classes: usize, ood_classes: usize, samples: usize, size: usize, pixel_noise: f64, seed: u64) -> (Batch, Option<Batch>) {
    const COARSE: usize = 4;
    const BACKGROUND: f64 = 0.1;
    let mut r = rng::stream(seed, streams::DATASET);
    let block = size / COARSE;
    let prototypes: Vec<Vec<f64>> = (0..classes + ood_classes)
        .map(|_| {
            let coarse: Vec<f64> = (0..COARSE * COARSE).map(|_| if r.random::<bool>() { 0.9 } else { BACKGROUND }).collect();
            (0..size * size).map(|i| coarse[(i / size / block) * COARSE + (i % size) / block]).collect()
        })
        .collect();
    let noise = Normal::new(0.0, pixel_noise.max(f64::MIN_POSITIVE)).expect("non-negative noise");
    let draw = |class: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let dy = r.random_range(-1i64..=1);
        let dx = r.random_range(-1i64..=1);
        let contrast = r.random_range(0.6..1.0);
        let proto = &prototypes[class];
        (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as i64 - dy, (i % size) as i64 - dx);
                let base = if (0..size as i64).contains(&y) && (0..size as i64).contains(&x) {
                    proto[y as usize * size + x as usize]
                } else {
                    BACKGROUND
                };
                let jitter = if pixel_noise > 0.0 { noise.sample(r) } else { 0.0 };
                (BACKGROUND + contrast * (base - BACKGROUND) + jitter).clamp(0.0, 1.0)
            })
            .collect()
    };
    let len = size * size;
    let mut inputs = Vec::with_capacity(samples * len);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        inputs.extend(draw(c, &mut r));
        labels.push(c);
    }
    let ood = (ood_classes > 0).then(|| {
        let n = (samples / classes).max(1) * ood_classes;
        let mut xs = Vec::with_capacity(n * len);
        for i in 0..n {
            xs.extend(draw(classes + i % ood_classes, &mut r));
        }
        Batch { inputs: xs, labels: vec![0; n], sample_len: len }
    });
    (Batch { inputs, labels, sample_len: len }, ood)
}

const IDX_U8_IMAGES: u32 = 0x0000_0803;
const IDX_U8_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &Path) -> Result<u32, RunnerError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| RunnerError::Data(format!("{}: truncated header", what.display())))
}

/// Parses an IDX image/label pair (unsigned bytes, `n × rows × cols` images).
pub fn read_idx_pair(images: &Path, labels: &Path, classes: usize) -> Result<(Shape3, Batch), RunnerError> {
    let img = std::fs::read(images).map_err(|e| RunnerError::Data(format!("{}: {e}", images.display())))?;
    let lab = std::fs::read(labels).map_err(|e| RunnerError::Data(format!("{}: {e}", labels.display())))?;
    parse_idx(&img, &lab, classes, images, labels)
}

pub fn parse_idx(img: &[u8], lab: &[u8], classes: usize, img_name: &Path, lab_name: &Path) -> Result<(Shape3, Batch), RunnerError> {
    if be_u32(img, 0, img_name)? != IDX_U8_IMAGES {
        return Err(RunnerError::Data(format!("{}: not an unsigned-byte 3-D IDX file", img_name.display())));
    }
    if be_u32(lab, 0, lab_name)? != IDX_U8_LABELS {
        return Err(RunnerError::Data(format!("{}: not an unsigned-byte 1-D IDX file", lab_name.display())));
    }
    let n = be_u32(img, 4, img_name)? as usize;
    let rows = be_u32(img, 8, img_name)? as usize;
    let cols = be_u32(img, 12, img_name)? as usize;
    let n_labels = be_u32(lab, 4, lab_name)? as usize;
    if n != n_labels {
        return Err(RunnerError::Data(format!("{n} images but {n_labels} labels")));
    }
    let len = rows * cols;
    if len == 0 || img.len() != 16 + n * len {
        return Err(RunnerError::Data(format!("{}: payload size does not match header", img_name.display())));
    }
    if lab.len() != 8 + n {
        return Err(RunnerError::Data(format!("{}: payload size does not match header", lab_name.display())));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(RunnerError::Data(format!("label {label} at sample {index} is >= class count {classes}")));
    }
    let inputs = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(((1, rows, cols), Batch { inputs, labels, sample_len: len }))
}

/// Serializes a batch as an IDX pair (inputs quantized to bytes).
pub fn to_idx(batch: &Batch, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + batch.inputs.len());
    img.extend_from_slice(&IDX_U8_IMAGES.to_be_bytes());
    for v in [batch.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(batch.inputs.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + batch.len());
    lab.extend_from_slice(&IDX_U8_LABELS.to_be_bytes());
    lab.extend_from_slice(&(batch.len() as u32).to_be_bytes());
    lab.extend(batch.labels.iter().map(|&l| l as u8));
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture() -> DatasetSource {
        DatasetSource::GaussianMixture { classes: 4, samples: 2000, dim: 5, seed: 7, spread: 0.1, ood_classes: 1, test_fraction: 0.25 }
    }

    #[test]
    fn mixture_is_deterministic() {
        let a = load_dataset(&mixture()).unwrap();
        let b = load_dataset(&mixture()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.test.len(), 2000);
        assert_eq!(a.test.len(), 500);
        assert!(a.train.inputs.iter().chain(&a.noise.inputs).all(|x| (0.0..=1.0).contains(x)));
        assert!(a.ood.is_some());
    }

    #[test]
    fn image_grid_shapes() {
        let src = DatasetSource::ImageGrid { classes: 10, samples: 500, size: 8, seed: 1, noise: 0.2, ood_classes: 2, test_fraction: 0.2 };
        let s = load_dataset(&src).unwrap();
        assert_eq!(s.shape, (1, 8, 8));
        assert_eq!(s.train.sample_len, 64);
        assert_eq!(s.ood.unwrap().len(), 100);
    }

    #[test]
    fn idx_round_trip_and_label_check() {
        let s = load_dataset(&mixture()).unwrap();
        let batch = s.test.head(10);
        let (img, lab) = to_idx(&batch, 1, 5);
        let (shape, parsed) = parse_idx(&img, &lab, 4, Path::new("i"), Path::new("l")).unwrap();
        assert_eq!(shape, (1, 1, 5));
        assert_eq!(parsed.labels, batch.labels);
        let err = parse_idx(&img, &lab, 2, Path::new("i"), Path::new("l")).unwrap_err().to_string();
        assert!(err.contains("at sample"), "{err}");
        assert!(parse_idx(&img[..20], &lab, 4, Path::new("i"), Path::new("l")).is_err());
    }

    #[test]
    fn validation_errors() {
        let src = DatasetSource::GaussianMixture { classes: 1, samples: 10, dim: 2, seed: 0, spread: 0.1, ood_classes: 0, test_fraction: 0.25 };
        assert!(src.validate().is_err());
        let src = DatasetSource::Idx { images: "/nonexistent".into(), labels: "/nonexistent".into(), classes: 10, seed: 0, test_fraction: 0.2 };
        assert!(src.validate().is_err());
    }
}
