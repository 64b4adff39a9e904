//! Dataset ingestion: CIFAR binary files, image folders, and deterministic
//! synthetic sets for oracle tests.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Per-channel normalization constants applied at batch assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

/// An in-memory labeled dataset. Raw values are stored unnormalized;
/// [`LabeledDataset::batch`] applies the per-channel normalization.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    name: String,
    data: Vec<f32>,
    labels: Vec<u32>,
    shape: (usize, usize, usize),
    num_classes: usize,
    split: Split,
    normalization: Normalization,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        data: Vec<f32>,
        labels: Vec<u32>,
        shape: (usize, usize, usize),
        num_classes: usize,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self> {
        let sample_len = shape.0 * shape.1 * shape.2;
        if labels.is_empty() || data.len() != labels.len() * sample_len {
            return Err(Error::argument("dataset data/label sizes are inconsistent"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::argument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            name: name.into(),
            data,
            labels,
            shape,
            num_classes,
            split,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Identifier used in profiles and reports: name, split, sample count.
    pub fn dataset_id(&self) -> String {
        format!("{}-{}[{}]", self.name, self.split, self.len())
    }

    fn sample_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn raw_sample(&self, i: usize) -> &[f32] {
        let sl = self.sample_len();
        &self.data[i * sl..(i + 1) * sl]
    }

    fn normalize_into(&self, raw: &[f32], out: &mut [f32]) {
        let (c, h, w) = self.shape;
        for ci in 0..c {
            let m = self.normalization.mean[ci];
            let s = self.normalization.std[ci];
            let inv = if s != 0.0 { 1.0 / s } else { 1.0 };
            for p in 0..h * w {
                out[ci * h * w + p] = (raw[ci * h * w + p] - m) * inv;
            }
        }
    }

    /// Assembles a normalized batch in the given index order.
    pub fn batch(&self, indices: &[usize]) -> (Array4<f32>, Vec<u32>) {
        let (c, h, w) = self.shape;
        let mut x = Array4::<f32>::zeros((indices.len(), c, h, w));
        let xs = x.as_slice_mut().unwrap();
        let sl = self.sample_len();
        for (bi, &i) in indices.iter().enumerate() {
            self.normalize_into(self.raw_sample(i), &mut xs[bi * sl..(bi + 1) * sl]);
        }
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// Assembles a batch with random crop (4-pixel zero padding) and
    /// horizontal flip. Augmentation draws are keyed by
    /// `(seed, epoch, sample index)`, so the result does not depend on batch
    /// composition or order. Spatial sizes below 8×8 are left untouched.
    pub fn batch_augmented(
        &self,
        indices: &[usize],
        seed: u64,
        epoch: u32,
    ) -> (Array4<f32>, Vec<u32>) {
        let (c, h, w) = self.shape;
        if h < 8 || w < 8 {
            return self.batch(indices);
        }
        let pad = 4usize;
        let sl = self.sample_len();
        let mut x = Array4::<f32>::zeros((indices.len(), c, h, w));
        let xs = x.as_slice_mut().unwrap();
        let mut aug = vec![0.0f32; sl];
        for (bi, &i) in indices.iter().enumerate() {
            let mut rng = stream_rng(seed, Stream::Augment { epoch, sample: i as u64 });
            let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
            let flip = rng.gen_bool(0.5);
            let raw = self.raw_sample(i);
            for ci in 0..c {
                for y in 0..h {
                    for xo in 0..w {
                        let sx = if flip { w - 1 - xo } else { xo } as isize + dx;
                        let sy = y as isize + dy;
                        aug[ci * h * w + y * w + xo] =
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                raw[ci * h * w + sy as usize * w + sx as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
            self.normalize_into(&aug, &mut xs[bi * sl..(bi + 1) * sl]);
        }
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// Per-channel mean/std of the raw values.
    pub fn compute_normalization(&self) -> Normalization {
        let (c, h, w) = self.shape;
        let per = h * w;
        let count = (self.len() * per) as f64;
        let mut mean = vec![0.0f32; c];
        let mut std = vec![1.0f32; c];
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for i in 0..self.len() {
                for &v in &self.raw_sample(i)[ci * per..(ci + 1) * per] {
                    sum += f64::from(v);
                    sq += f64::from(v) * f64::from(v);
                }
            }
            let m = sum / count;
            let var = (sq / count - m * m).max(1e-12);
            mean[ci] = m as f32;
            std[ci] = var.sqrt() as f32;
        }
        Normalization { mean, std }
    }

    pub fn set_normalization(&mut self, norm: Normalization) {
        self.normalization = norm;
    }

    fn subset(&self, indices: &[usize], split: Split) -> LabeledDataset {
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sl);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.raw_sample(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            name: self.name.clone(),
            data,
            labels,
            shape: self.shape,
            num_classes: self.num_classes,
            split,
            normalization: self.normalization.clone(),
        }
    }

    /// Truncates to the first `limit` samples.
    pub fn truncated(&self, limit: usize) -> LabeledDataset {
        let k = limit.min(self.len());
        let indices: Vec<usize> = (0..k).collect();
        self.subset(&indices, self.split)
    }
}

/// Which dataset to ingest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Cifar10,
    Cifar100,
    Synthetic,
    Folder,
}

/// Split handling: how much validation data to carve from train, and
/// optional deterministic truncation per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { val_fraction: 0.1, train_limit: None, val_limit: None, test_limit: None }
    }
}

/// Generator parameters for `synthetic` mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub mode: SynthMode,
    /// Training samples (before the validation carve).
    pub samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    /// `(channels, height, width)`; vectors use `(d, 1, 1)`.
    pub shape: (usize, usize, usize),
    /// Additive noise level.
    pub noise: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// Gaussian class clusters in feature space; linearly separable at low
    /// noise.
    Vectors,
    /// Procedural 10-class-style images: class-keyed grating orientation,
    /// color tint, and blob position plus instance noise.
    Images,
}

impl SyntheticSpec {
    pub fn vectors(samples: usize, classes: usize, dim: usize) -> Self {
        SyntheticSpec {
            mode: SynthMode::Vectors,
            samples,
            test_samples: samples / 4,
            classes,
            shape: (dim, 1, 1),
            noise: 0.4,
        }
    }

    pub fn images(samples: usize, test_samples: usize, classes: usize) -> Self {
        SyntheticSpec {
            mode: SynthMode::Images,
            samples,
            test_samples,
            classes,
            shape: (3, 32, 32),
            noise: 0.18,
        }
    }
}

/// Train/val/test triple returned by [`load_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: LabeledDataset,
    pub val: Option<LabeledDataset>,
    pub test: LabeledDataset,
}

impl DatasetBundle {
    pub fn eval_split(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => self.val.as_ref().unwrap_or(&self.test),
            Split::Test => &self.test,
        }
    }
}

/// Loads and normalizes a dataset.
///
/// The validation split is carved deterministically from train (seeded
/// shuffle, disjoint). Normalization constants are computed from the
/// training split unless a caller overrides them afterwards.
pub fn load_dataset(
    name: DatasetName,
    root: Option<&Path>,
    split: &SplitSpec,
    seed: u64,
    synth: Option<&SyntheticSpec>,
) -> Result<DatasetBundle> {
    let (train_full, test_full) = match name {
        DatasetName::Cifar10 => {
            let root = require_root(root, "cifar10")?;
            load_cifar10(&root)?
        }
        DatasetName::Cifar100 => {
            let root = require_root(root, "cifar100")?;
            load_cifar100(&root)?
        }
        DatasetName::Folder => {
            let root = require_root(root, "folder")?;
            load_folder(&root)?
        }
        DatasetName::Synthetic => {
            let spec = synth.ok_or_else(|| {
                Error::argument("synthetic dataset requires generator parameters")
            })?;
            generate_synthetic(spec, seed)?
        }
    };

    // Deterministic validation carve.
    let m = train_full.len();
    let val_count = ((m as f64) * split.val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    if val_count > 0 {
        let mut rng = stream_rng(seed, Stream::Shuffle { epoch: u32::MAX });
        shuffle(&mut order, &mut rng);
    }
    let (val_idx, train_idx) = order.split_at(val_count.min(m));
    let mut train = train_full.subset(train_idx, Split::Train);
    let mut val =
        (!val_idx.is_empty()).then(|| train_full.subset(val_idx, Split::Val));
    let mut test = test_full;

    if let Some(limit) = split.train_limit {
        train = train.truncated(limit);
    }
    if let (Some(limit), Some(v)) = (split.val_limit, val.as_ref()) {
        val = Some(v.truncated(limit));
    }
    if let Some(limit) = split.test_limit {
        test = test.truncated(limit);
    }

    let norm = train.compute_normalization();
    train.set_normalization(norm.clone());
    if let Some(v) = &mut val {
        v.set_normalization(norm.clone());
    }
    test.set_normalization(norm);
    Ok(DatasetBundle { train, val, test })
}

fn require_root(root: Option<&Path>, what: &str) -> Result<PathBuf> {
    root.map(Path::to_path_buf).ok_or_else(|| {
        Error::argument(format!("dataset '{what}' requires a root path"))
    })
}

fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

// --- CIFAR binary format -------------------------------------------------

const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn read_cifar_file(
    path: &Path,
    record_len: usize,
    label_offset: usize,
    data: &mut Vec<f32>,
    labels: &mut Vec<u32>,
) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::Ingestion {
        file: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if bytes.is_empty() || bytes.len() % record_len != 0 {
        return Err(Error::Ingestion {
            file: path.to_path_buf(),
            detail: format!(
                "file size {} is not a positive multiple of the {record_len}-byte record",
                bytes.len()
            ),
        });
    }
    for rec in bytes.chunks_exact(record_len) {
        labels.push(u32::from(rec[label_offset]));
        data.extend(rec[label_offset + 1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok(())
}

/// CIFAR-10 binary layout: `data_batch_{1..5}.bin` + `test_batch.bin`,
/// records of 1 label byte + 3072 pixel bytes (RGB planes).
fn load_cifar10(root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut found = 0;
    for i in 1..=5 {
        let path = root.join(format!("data_batch_{i}.bin"));
        if path.exists() {
            read_cifar_file(&path, 1 + CIFAR_PIXELS, 0, &mut data, &mut labels)?;
            found += 1;
        }
    }
    if found == 0 {
        return Err(Error::Ingestion {
            file: root.join("data_batch_1.bin"),
            detail: "no data_batch_*.bin files found".into(),
        });
    }
    let train = LabeledDataset::new(
        "cifar10",
        data,
        labels,
        (3, 32, 32),
        10,
        Split::Train,
        Normalization::identity(3),
    )?;

    let mut tdata = Vec::new();
    let mut tlabels = Vec::new();
    read_cifar_file(&root.join("test_batch.bin"), 1 + CIFAR_PIXELS, 0, &mut tdata, &mut tlabels)?;
    let test = LabeledDataset::new(
        "cifar10",
        tdata,
        tlabels,
        (3, 32, 32),
        10,
        Split::Test,
        Normalization::identity(3),
    )?;
    Ok((train, test))
}

/// CIFAR-100 binary layout: `train.bin`/`test.bin`, records of coarse byte,
/// fine byte, 3072 pixel bytes. Fine labels are used.
fn load_cifar100(root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut load = |file: &str, split| -> Result<LabeledDataset> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        read_cifar_file(&root.join(file), 2 + CIFAR_PIXELS, 1, &mut data, &mut labels)?;
        LabeledDataset::new(
            "cifar100",
            data,
            labels,
            (3, 32, 32),
            100,
            split,
            Normalization::identity(3),
        )
    };
    Ok((load("train.bin", Split::Train)?, load("test.bin", Split::Test)?))
}

/// Writes records in CIFAR-10 binary format; used for fixtures and for the
/// surrogate dataset the acceptance run falls back to when real CIFAR-10 is
/// absent.
pub fn write_cifar10_format(path: &Path, images: &[Vec<u8>], labels: &[u8]) -> Result<()> {
    assert_eq!(images.len(), labels.len());
    let mut bytes = Vec::with_capacity(images.len() * (1 + CIFAR_PIXELS));
    for (img, &label) in images.iter().zip(labels) {
        assert_eq!(img.len(), CIFAR_PIXELS, "images must be 3x32x32");
        bytes.push(label);
        bytes.extend_from_slice(img);
    }
    fs::write(path, bytes)?;
    Ok(())
}

// --- Folder of images ----------------------------------------------------

/// `root/train/<class>/*.png` and `root/test/<class>/*.png`; class names
/// sorted lexicographically define the label ids.
fn load_folder(root: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let classes = sorted_class_dirs(&root.join("train"))?;
    let train = read_image_tree(&root.join("train"), &classes, Split::Train)?;
    let test = read_image_tree(&root.join("test"), &classes, Split::Test)?;
    Ok((train, test))
}

fn sorted_class_dirs(dir: &Path) -> Result<Vec<String>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Ingestion {
        file: dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut classes: Vec<String> = rd
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Ingestion {
            file: dir.to_path_buf(),
            detail: "no class subdirectories".into(),
        });
    }
    Ok(classes)
}

fn read_image_tree(dir: &Path, classes: &[String], split: Split) -> Result<LabeledDataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<(usize, usize, usize)> = None;
    for (label, class) in classes.iter().enumerate() {
        let cdir = dir.join(class);
        let mut files: Vec<PathBuf> = fs::read_dir(&cdir)
            .map_err(|e| Error::Ingestion { file: cdir.clone(), detail: e.to_string() })?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Ingestion { file: file.clone(), detail: e.to_string() })?
                .to_rgb8();
            let (w, h) = img.dimensions();
            let dims = (3usize, h as usize, w as usize);
            match shape {
                None => shape = Some(dims),
                Some(s) if s != dims => {
                    return Err(Error::Ingestion {
                        file,
                        detail: format!("image shape {dims:?} differs from {s:?}"),
                    })
                }
                _ => {}
            }
            let (c, hh, ww) = dims;
            let mut planes = vec![0.0f32; c * hh * ww];
            for (x, y, px) in img.enumerate_pixels() {
                for ci in 0..3 {
                    planes[ci * hh * ww + y as usize * ww + x as usize] =
                        f32::from(px[ci]) / 255.0;
                }
            }
            data.extend_from_slice(&planes);
            labels.push(label as u32);
        }
    }
    let shape = shape.ok_or_else(|| Error::Ingestion {
        file: dir.to_path_buf(),
        detail: "no images found".into(),
    })?;
    LabeledDataset::new(
        "folder",
        data,
        labels,
        shape,
        classes.len(),
        split,
        Normalization::identity(3),
    )
}

// --- Synthetic generators -------------------------------------------------

fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.classes < 2 || spec.samples == 0 {
        return Err(Error::argument("synthetic data needs >= 2 classes and > 0 samples"));
    }
    let mut rng = stream_rng(seed, Stream::Synthesis);
    let gen = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> (Vec<f32>, Vec<u32>) {
        let mut data = Vec::with_capacity(n * spec.shape.0 * spec.shape.1 * spec.shape.2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % spec.classes) as u32;
            labels.push(class);
            match spec.mode {
                SynthMode::Vectors => synth_vector(spec, class, rng, &mut data),
                SynthMode::Images => synth_image(spec, class, rng, &mut data),
            }
        }
        (data, labels)
    };
    let (tr_data, tr_labels) = gen(&mut rng, spec.samples);
    let (te_data, te_labels) = gen(&mut rng, spec.test_samples.max(1));
    let train = LabeledDataset::new(
        "synthetic",
        tr_data,
        tr_labels,
        spec.shape,
        spec.classes,
        Split::Train,
        Normalization::identity(spec.shape.0),
    )?;
    let test = LabeledDataset::new(
        "synthetic",
        te_data,
        te_labels,
        spec.shape,
        spec.classes,
        Split::Test,
        Normalization::identity(spec.shape.0),
    )?;
    Ok((train, test))
}

/// Gaussian cluster per class. Means sit on coordinate-ish axes scaled to be
/// well separated at the default noise.
fn synth_vector(
    spec: &SyntheticSpec,
    class: u32,
    rng: &mut rand_chacha::ChaCha8Rng,
    out: &mut Vec<f32>,
) {
    let d = spec.shape.0;
    let normal = Normal::new(0.0f32, spec.noise.max(1e-6)).unwrap();
    for j in 0..d {
        let axis = class as usize % d;
        let sign = if (class as usize / d) % 2 == 0 { 1.0 } else { -1.0 };
        let mean = if j == axis { 2.0 * sign } else { 0.0 };
        out.push(mean + normal.sample(rng));
    }
}

fn class_tint(class: u32, classes: usize) -> [f32; 3] {
    // Evenly spaced hues, full saturation.
    let h = class as f32 / classes as f32 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Procedural class-keyed image: oriented grating + color tint + positioned
/// blob, with per-instance phase, jitter, and pixel noise.
fn synth_image(
    spec: &SyntheticSpec,
    class: u32,
    rng: &mut rand_chacha::ChaCha8Rng,
    out: &mut Vec<f32>,
) {
    let (c, h, w) = spec.shape;
    debug_assert_eq!(c, 3);
    let classes = spec.classes;
    let theta = std::f32::consts::PI * class as f32 / classes as f32;
    let freq = 2.0 + (class % 3) as f32;
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let tint = class_tint(class, classes);
    let quad = class % 4;
    let bx = w as f32 * (0.3 + 0.4 * f32::from(quad % 2 == 1)) + rng.gen_range(-3.0..3.0);
    let by = h as f32 * (0.3 + 0.4 * f32::from(quad / 2 == 1)) + rng.gen_range(-3.0..3.0);
    let amp: f32 = rng.gen_range(0.7..1.0);
    let noise = Normal::new(0.0f32, spec.noise).unwrap();

    let (sin_t, cos_t) = theta.sin_cos();
    let start = out.len();
    out.resize(start + c * h * w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f32 * cos_t + y as f32 * sin_t) / w as f32;
            let g = 0.5 + 0.5 * (std::f32::consts::TAU * freq * u + phase).sin();
            let dx = x as f32 - bx;
            let dy = y as f32 - by;
            let blob = (-(dx * dx + dy * dy) / 18.0).exp();
            for ci in 0..3 {
                let v = 0.45 * amp * g * tint[ci] + 0.4 * blob + 0.15 + noise.sample(rng);
                out[start + ci * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::vectors(200, 2, 8);
        let a = load_dataset(DatasetName::Synthetic, None, &SplitSpec::default(), 7, Some(&spec))
            .unwrap();
        let b = load_dataset(DatasetName::Synthetic, None, &SplitSpec::default(), 7, Some(&spec))
            .unwrap();
        assert_eq!(a.train.data, b.train.data);
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.test.data, b.test.data);
    }

    #[test]
    fn val_carve_is_disjoint_and_sized() {
        let spec = SyntheticSpec::vectors(1000, 4, 6);
        let split = SplitSpec { val_fraction: 0.1, ..SplitSpec::default() };
        let bundle =
            load_dataset(DatasetName::Synthetic, None, &split, 3, Some(&spec)).unwrap();
        assert_eq!(bundle.train.len(), 900);
        assert_eq!(bundle.val.as_ref().unwrap().len(), 100);
    }

    #[test]
    fn cifar_roundtrip_through_binary_format() {
        let dir = tempfile::tempdir().unwrap();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20u8 {
            images.push(vec![i; CIFAR_PIXELS]);
            labels.push(i % 10);
        }
        write_cifar10_format(&dir.path().join("data_batch_1.bin"), &images, &labels).unwrap();
        write_cifar10_format(&dir.path().join("test_batch.bin"), &images[..5], &labels[..5])
            .unwrap();
        let split = SplitSpec { val_fraction: 0.0, ..SplitSpec::default() };
        let bundle =
            load_dataset(DatasetName::Cifar10, Some(dir.path()), &split, 0, None).unwrap();
        assert_eq!(bundle.train.len(), 20);
        assert_eq!(bundle.test.len(), 5);
        assert_eq!(bundle.train.labels()[3], 3);
        // Raw value 7/255 for every pixel of record 7.
        let raw = bundle.train.raw_sample(7);
        assert!((raw[0] - 7.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn missing_cifar_files_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(
            DatasetName::Cifar10,
            Some(dir.path()),
            &SplitSpec::default(),
            0,
            None,
        )
        .unwrap_err();
        match err {
            Error::Ingestion { file, .. } => {
                assert!(file.to_string_lossy().contains("data_batch_1.bin"))
            }
            other => panic!("expected ingestion error, got {other}"),
        }
    }

    #[test]
    fn corrupt_record_length_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 100]).unwrap();
        let err = load_dataset(
            DatasetName::Cifar10,
            Some(dir.path()),
            &SplitSpec::default(),
            0,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
    }

    #[test]
    fn augmentation_is_batch_order_independent() {
        let spec = SyntheticSpec::images(40, 8, 4);
        let bundle = load_dataset(
            DatasetName::Synthetic,
            None,
            &SplitSpec { val_fraction: 0.0, ..SplitSpec::default() },
            5,
            Some(&spec),
        )
        .unwrap();
        let (a, _) = bundle.train.batch_augmented(&[3, 7, 11], 9, 2);
        let (b, _) = bundle.train.batch_augmented(&[11, 3, 7], 9, 2);
        // Sample 3 is row 0 in a, row 1 in b.
        let a3 = a.index_axis(ndarray::Axis(0), 0);
        let b3 = b.index_axis(ndarray::Axis(0), 1);
        assert_eq!(
            a3.as_slice().unwrap(),
            b3.as_slice().unwrap(),
            "augmentation must be keyed by sample, not batch position"
        );
    }
}
