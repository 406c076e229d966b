//! Dataset layout, bicubic degradation, synthetic scenes, splits and label encoding.
//!
//! On disk a corpus lives under `root/images/NNNNN.png` (8-bit RGB, high
//! resolution) and `root/labels/NNNNN.png` (8-bit single channel), with a
//! `splits.json` manifest naming the files of each split together with their
//! SHA-256 content hashes. Low-resolution inputs are never stored; they are
//! recomputed with [`downsample_bicubic`] so they match bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ulrseg_tensor::Tensor;

use crate::error::{io_err, Error, Result};
use crate::types::{ImageTensor, LabelMap, IGNORE_INDEX};
use crate::FORMAT_VERSION;

/// Bicubic kernel parameter.
pub const BICUBIC_A: f64 = -0.5;

/// Number of distinct region types the synthetic generator can draw.
pub const MAX_SYNTH_CLASSES: usize = 40;

pub const WALL_CLASS: u8 = 0;
pub const FLOOR_CLASS: u8 = 1;

fn default_objects() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    pub crop_size: usize,
    pub lr_size: usize,
    pub num_classes: usize,
    pub ignore_index: u8,
    /// (train, val, test) sample counts.
    pub split_sizes: (usize, usize, usize),
    pub seed: u64,
    /// Objects drawn per synthetic scene.
    #[serde(default = "default_objects")]
    pub objects_per_scene: usize,
}

impl DatasetSpec {
    /// Full-resolution layout: 384 crops, 16×16 inputs, 37 classes.
    pub fn full_scale(root: impl Into<PathBuf>) -> Self {
        Self {
            root_path: root.into(),
            crop_size: 384,
            lr_size: 16,
            num_classes: 37,
            ignore_index: IGNORE_INDEX,
            split_sizes: (9000, 668, 667),
            seed: 0,
            objects_per_scene: default_objects(),
        }
    }

    /// Desk-scale layout: 32 crops, 8×8 inputs, 6 classes, 16 training samples.
    pub fn desk(root: impl Into<PathBuf>) -> Self {
        Self {
            root_path: root.into(),
            crop_size: 32,
            lr_size: 8,
            num_classes: 6,
            ignore_index: IGNORE_INDEX,
            split_sizes: (16, 4, 4),
            seed: 1,
            objects_per_scene: default_objects(),
        }
    }

    pub fn corpus_size(&self) -> usize {
        self.split_sizes.0 + self.split_sizes.1 + self.split_sizes.2
    }

    pub fn scale(&self) -> usize {
        self.crop_size / self.lr_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_size == 0 || self.crop_size == 0 {
            return Err(Error::Config(
                "crop_size and lr_size must be positive".into(),
            ));
        }
        if !self.crop_size.is_multiple_of(self.lr_size) {
            return Err(Error::Config(format!(
                "crop_size {} is not divisible by lr_size {}",
                self.crop_size, self.lr_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.num_classes > self.ignore_index as usize {
            return Err(Error::Config(format!(
                "num_classes {} collides with ignore_index {}",
                self.num_classes, self.ignore_index
            )));
        }
        if self.corpus_size() == 0 {
            return Err(Error::Config("split sizes are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub hr: ImageTensor,
    pub lr: ImageTensor,
    pub label: LabelMap,
}

impl Sample {
    /// Builds a sample, deriving the low-resolution input from `hr`.
    pub fn from_hr(hr: ImageTensor, label: LabelMap, lr_size: usize) -> Result<Self> {
        if (label.height(), label.width()) != (hr.height(), hr.width()) {
            return Err(Error::Shape("label and image sizes differ".into()));
        }
        let lr = downsample_bicubic(&hr, lr_size)?;
        Ok(Self { hr, lr, label })
    }
}

/// Cubic convolution kernel with parameter [`BICUBIC_A`].
pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let t = x.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized taps `(first_index, weights)` for every output position.
///
/// The kernel is stretched by the downscale factor, which low-pass filters
/// before sampling. Taps falling outside the image are dropped and the rest
/// renormalized, so constants are preserved exactly up to rounding.
fn resample_taps(n_in: usize, n_out: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = n_in as f64 / n_out as f64;
    let support = 2.0 * scale;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support - 0.5).ceil().max(0.0)) as usize;
            let hi = ((center + support - 0.5).floor() as usize).min(n_in - 1);
            let mut w: Vec<f64> = (lo..=hi)
                .map(|j| cubic_kernel((j as f64 + 0.5 - center) / scale))
                .collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            (lo, w)
        })
        .collect()
}

/// Separable resampling without clamping; linear in the input.
pub fn resample_bicubic_linear(img: &ImageTensor, target: usize) -> Result<ImageTensor> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if h != w {
        return Err(Error::Shape(format!(
            "bicubic downsampling needs a square image, got {h}×{w}"
        )));
    }
    if target == 0 || h % target != 0 {
        return Err(Error::Shape(format!(
            "image side {h} is not divisible by target {target}; only integer downscale factors are supported"
        )));
    }
    let taps = resample_taps(h, target);
    let src = img.tensor().data();
    // Horizontal pass: c × h × target.
    let mut tmp = vec![0.0; c * h * target];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (x, (lo, ws)) in taps.iter().enumerate() {
                tmp[(ch * h + y) * target + x] =
                    ws.iter().enumerate().map(|(k, wk)| wk * row[lo + k]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * target * target];
    for ch in 0..c {
        for (y, (lo, ws)) in taps.iter().enumerate() {
            for x in 0..target {
                out[(ch * target + y) * target + x] = ws
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * tmp[(ch * h + lo + k) * target + x])
                    .sum();
            }
        }
    }
    ImageTensor::new(Tensor::new(&[c, target, target], out))
}

/// Antialiased bicubic downscale to `target×target`, clamped to `[0, 1]`.
pub fn downsample_bicubic(img: &ImageTensor, target: usize) -> Result<ImageTensor> {
    let out = resample_bicubic_linear(img, target)?;
    ImageTensor::new(out.into_tensor().map(|v| v.clamp(0.0, 1.0)))
}

/// 8-bit RGB color of each synthetic region type.
pub fn class_color(class: u8) -> [u8; 3] {
    match class {
        0 => [196, 188, 170],
        1 => [120, 82, 44],
        c => {
            let levels = [0u8, 85, 170, 255];
            let k = c as usize - 2;
            // Skip grays so objects never resemble the wall.
            let combos = (0..64usize)
                .map(|i| [levels[i / 16], levels[(i / 4) % 4], levels[i % 4]])
                .filter(|[r, g, b]| !(r == g && g == b));
            combos.cycle().nth(k).expect("cycle is infinite")
        }
    }
}

/// Per-sample random stream derived from `(seed, index)`.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Paints one scene: a wall, a floor band and axis-aligned objects.
///
/// All region edges fall on the low-resolution pixel grid and objects occupy
/// disjoint column slots, so every drawn object is visible.
fn synth_scene(spec: &DatasetSpec, index: usize, object_classes: &[u8]) -> (ImageTensor, LabelMap) {
    let mut rng = sample_rng(spec.seed, index);
    let cells = spec.lr_size;
    let g = spec.scale();
    let mut grid = vec![WALL_CLASS; cells * cells];
    let floor_top = rng.gen_range(cells / 2..=(3 * cells / 4).max(cells / 2));
    for y in floor_top..cells {
        for x in 0..cells {
            grid[y * cells + x] = FLOOR_CLASS;
        }
    }
    let k = object_classes.len();
    if let Some(slot) = cells.checked_div(k) {
        let slot = slot.max(1);
        for (i, &class) in object_classes.iter().enumerate() {
            let x0_slot = (i * slot).min(cells - 1);
            let x1_slot = if i + 1 == k {
                cells
            } else {
                ((i + 1) * slot).min(cells)
            };
            let max_w = (x1_slot - x0_slot).max(1);
            let w = rng.gen_range((max_w / 2).max(1)..=max_w);
            let x0 = x0_slot + rng.gen_range(0..=(max_w - w));
            let max_h = (cells * 3 / 4).max(1);
            let h = rng.gen_range((cells / 4).max(1)..=max_h);
            let y0 = rng.gen_range(0..=(cells - h));
            for y in y0..y0 + h {
                for x in x0..(x0 + w).min(cells) {
                    grid[y * cells + x] = class;
                }
            }
        }
    }
    let side = spec.crop_size;
    let label = LabelMap::from_fn(side, side, |y, x| grid[(y / g) * cells + x / g]);
    let hr = ImageTensor::from_fn(3, side, side, |c, y, x| {
        class_color(label.get(y, x))[c] as f64 / 255.0
    });
    (hr, label)
}

/// Generates the seeded synthetic corpus described by `spec`.
pub fn synth_generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    if spec.num_classes > MAX_SYNTH_CLASSES {
        return Err(Error::Config(format!(
            "synthetic scenes support at most {MAX_SYNTH_CLASSES} region types, {} requested",
            spec.num_classes
        )));
    }
    let n = spec.corpus_size();
    let object_types = spec.num_classes - 2;
    let per_scene = if object_types == 0 {
        0
    } else {
        spec.objects_per_scene.max(1)
    };
    if per_scene > spec.lr_size {
        return Err(Error::Config(format!(
            "{per_scene} objects do not fit side by side in {} columns",
            spec.lr_size
        )));
    }
    if object_types > n * per_scene {
        return Err(Error::Config(format!(
            "{n} scenes with {per_scene} objects each cannot show all {object_types} object classes"
        )));
    }
    (0..n)
        .map(|i| {
            let classes: Vec<u8> = (0..per_scene)
                .map(|k| (2 + (i * per_scene + k) % object_types) as u8)
                .collect();
            let (hr, label) = synth_scene(spec, i, &classes);
            Sample::from_hr(hr, label, spec.lr_size)
        })
        .collect()
}

/// One-hot `C×H×W` stack; ignored pixels are all-zero.
pub fn encode_onehot(label: &LabelMap, num_classes: usize, ignore_index: u8) -> Result<Tensor> {
    label.validate(num_classes, ignore_index)?;
    let plane = label.len();
    let mut data = vec![0.0; num_classes * plane];
    for (p, &v) in label.data().iter().enumerate() {
        if v != ignore_index {
            data[v as usize * plane + p] = 1.0;
        }
    }
    Ok(Tensor::new(
        &[num_classes, label.height(), label.width()],
        data,
    ))
}

/// Disjoint index lists partitioning a corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Invalid(format!(
                "unknown split {other:?} (train|val|test)"
            ))),
        }
    }
}

/// Seeded random partition of `0..corpus_len` with the spec's split sizes.
pub fn make_splits(spec: &DatasetSpec, corpus_len: usize) -> Result<Splits> {
    if spec.corpus_size() != corpus_len {
        return Err(Error::Config(format!(
            "split sizes {:?} sum to {} but the corpus has {corpus_len} samples",
            spec.split_sizes,
            spec.corpus_size()
        )));
    }
    let mut idx: Vec<usize> = (0..corpus_len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (a, b, _) = spec.split_sizes;
    Ok(Splits {
        train: idx[..a].to_vec(),
        val: idx[a..a + b].to_vec(),
        test: idx[a + b..].to_vec(),
    })
}

pub fn sample_name(index: usize) -> String {
    format!("{index:05}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub splits: BTreeMap<String, Vec<String>>,
    /// SHA-256 of every written file keyed by its path relative to the root.
    pub hashes: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_png(
    path: &Path,
    w: usize,
    h: usize,
    bytes: &[u8],
    color: image::ExtendedColorType,
) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes images, labels and `splits.json` under `root`.
pub fn write_corpus(
    root: &Path,
    corpus: &[Sample],
    splits: &Splits,
    config: serde_json::Value,
) -> Result<Manifest> {
    let mut hashes = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        let name = sample_name(i);
        let img_path = root.join("images").join(&name);
        let rgb = s.hr.to_rgb8_interleaved()?;
        let png = encode_png(
            &img_path,
            s.hr.width(),
            s.hr.height(),
            &rgb,
            image::ExtendedColorType::Rgb8,
        )?;
        write_file(&img_path, &png)?;
        hashes.insert(format!("images/{name}"), sha256_hex(&png));

        let lbl_path = root.join("labels").join(&name);
        let png = encode_png(
            &lbl_path,
            s.label.width(),
            s.label.height(),
            s.label.data(),
            image::ExtendedColorType::L8,
        )?;
        write_file(&lbl_path, &png)?;
        hashes.insert(format!("labels/{name}"), sha256_hex(&png));
    }
    let names = |v: &[usize]| v.iter().map(|&i| sample_name(i)).collect::<Vec<_>>();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config,
        splits: BTreeMap::from([
            ("train".to_string(), names(&splits.train)),
            ("val".to_string(), names(&splits.val)),
            ("test".to_string(), names(&splits.test)),
        ]),
        hashes,
    };
    let path = root.join("splits.json");
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("splits.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

fn decode_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads one image/label pair by file name.
pub fn read_sample(root: &Path, name: &str, spec: &DatasetSpec) -> Result<Sample> {
    let img_path = root.join("images").join(name);
    let rgb = decode_png(&img_path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let hr = ImageTensor::from_rgb8_interleaved(h, w, rgb.as_raw())?;
    let lbl_path = root.join("labels").join(name);
    let gray = decode_png(&lbl_path)?.to_luma8();
    let label = LabelMap::new(
        gray.height() as usize,
        gray.width() as usize,
        gray.into_raw(),
    )?;
    label.validate(spec.num_classes, spec.ignore_index)?;
    Sample::from_hr(hr, label, spec.lr_size)
}

/// Loads every sample of a named split listed in `splits.json`.
pub fn read_split(root: &Path, spec: &DatasetSpec, split: &str) -> Result<Vec<Sample>> {
    let manifest = read_manifest(root)?;
    let names = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::Invalid(format!("manifest has no split {split:?}")))?;
    names.iter().map(|n| read_sample(root, n, spec)).collect()
}
