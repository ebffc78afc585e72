//! Dataset ingestion, preprocessing, stratified splits and a synthetic
//! desk-scale dataset generator.
//!
//! On disk a dataset is a directory with one subdirectory per class,
//! `<root>/0/*.png` and `<root>/1/*.png`, holding 8-bit RGB patches.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Raw 8-bit image in channel-major `[C, H, W]` layout. Values are kept as
/// `i32` so out-of-range inputs can be reported rather than truncated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
}

/// Complement then scale: `(255 - v) / 255`.
pub fn preprocess(raw: &RawImage) -> Result<Tensor> {
    if raw.values.len() != raw.channels * raw.height * raw.width {
        return Err(Error::Dimension(format!(
            "raw image {}x{}x{} has {} values",
            raw.channels,
            raw.height,
            raw.width,
            raw.values.len()
        )));
    }
    if let Some(v) = raw.values.iter().find(|v| !(0..=255).contains(*v)) {
        return Err(Error::Input(format!("pixel value {v} outside 0..=255")));
    }
    let data = raw.values.iter().map(|&v| f64::from(255 - v) / 255.0).collect();
    Tensor::new(vec![raw.channels, raw.height, raw.width], data)
}

/// Inverse of [`preprocess`], rounding to the nearest integer.
pub fn unprocess(pixels: &Tensor) -> Result<RawImage> {
    let [c, h, w]: [usize; 3] = pixels
        .shape()
        .try_into()
        .map_err(|_| Error::Dimension(format!("expected [C,H,W], got {:?}", pixels.shape())))?;
    let values = pixels
        .data()
        .iter()
        .map(|&p| (255.0 * (1.0 - p)).round() as i32)
        .collect();
    Ok(RawImage {
        channels: c,
        height: h,
        width: w,
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub split_seed: u64,
}

impl DatasetSplit {
    pub fn by_name(&self, name: &str) -> Result<Vec<&LabeledImage>> {
        Ok(match name {
            "train" => self.train.iter().collect(),
            "val" | "validation" => self.validation.iter().collect(),
            "test" => self.test.iter().collect(),
            "all" => self
                .train
                .iter()
                .chain(&self.validation)
                .chain(&self.test)
                .collect(),
            other => return Err(Error::Input(format!("unknown split `{other}`"))),
        })
    }
}

pub const TEST_FRACTION: f64 = 0.2;
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Shares `total` items among classes proportionally to `sizes`, by largest remainder.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total - alloc.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Stratified deterministic split: 20% test, then 20% of the remainder as
/// validation, the rest training.
pub fn split(dataset: Vec<LabeledImage>, seed: u64) -> Result<DatasetSplit> {
    if dataset.len() < 5 {
        return Err(Error::Input(format!(
            "need at least 5 images to split, got {}",
            dataset.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = dataset.iter().find(|img| !seen.insert(img.id.clone())) {
        return Err(Error::Input(format!("duplicate image id `{}`", dup.id)));
    }
    let mut items = dataset;
    items.sort_by(|a, b| a.id.cmp(&b.id));

    let mut by_class: BTreeMap<usize, Vec<LabeledImage>> = BTreeMap::new();
    for img in items {
        by_class.entry(img.label).or_default().push(img);
    }
    let mut rng = rng::stream(seed, 0x5b11);
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
    }
    let n: usize = by_class.values().map(Vec::len).sum();
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let test_alloc = apportion(&sizes, n_test);
    let rest: Vec<usize> = sizes.iter().zip(&test_alloc).map(|(s, t)| s - t).collect();
    let n_val = ((n - n_test) as f64 * VALIDATION_FRACTION).round() as usize;
    let val_alloc = apportion(&rest, n_val);

    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for ((members, nt), nv) in by_class.into_values().zip(test_alloc).zip(val_alloc) {
        let mut it = members.into_iter();
        test.extend(it.by_ref().take(nt));
        validation.extend(it.by_ref().take(nv));
        train.extend(it);
    }
    if train.is_empty() || validation.is_empty() || test.is_empty() {
        return Err(Error::Input(format!(
            "split left an empty partition (train {}, val {}, test {})",
            train.len(),
            validation.len(),
            test.len()
        )));
    }
    // interleave classes deterministically
    for part in [&mut train, &mut validation, &mut test] {
        part.shuffle(&mut rng);
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
        split_seed: seed,
    })
}

/// Result of scanning a dataset directory.
#[derive(Debug)]
pub struct LoadReport {
    pub images: Vec<LabeledImage>,
    /// Files that could not be decoded or had an unexpected format or size.
    pub skipped: usize,
}

fn decode_png(path: &Path) -> std::result::Result<RawImage, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(buf) => buf,
        other => return Err(format!("expected 8-bit RGB, found {:?}", other.color())),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut values = vec![0i32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            values[(c * h + y as usize) * w + x as usize] = i32::from(px[c]);
        }
    }
    Ok(RawImage {
        channels: 3,
        height: h,
        width: w,
        values,
    })
}

/// Loads `<root>/0/*.png` and `<root>/1/*.png`. Undecodable files and images
/// whose size differs from the most common one are skipped with a warning.
pub fn load_patches(root: &Path) -> Result<LoadReport> {
    if !root.is_dir() {
        return Err(Error::Input(format!("{} is not a directory", root.display())));
    }
    let mut raw: Vec<(String, usize, RawImage)> = Vec::new();
    let mut skipped = 0;
    for label in 0..2usize {
        let dir = root.join(label.to_string());
        let mut count = 0;
        if dir.is_dir() {
            let mut entries: Vec<_> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            entries.sort();
            for path in entries {
                match decode_png(&path) {
                    Ok(img) => {
                        let name = path.file_name().unwrap().to_string_lossy();
                        raw.push((format!("{label}/{name}"), label, img));
                        count += 1;
                    }
                    Err(e) => {
                        warn!("skipping {}: {e}", path.display());
                        skipped += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::Input(format!(
                "class {label} has no readable images under {}",
                root.display()
            )));
        }
    }

    let mut size_counts: HashMap<(usize, usize), usize> = HashMap::new();
    for (_, _, img) in &raw {
        *size_counts.entry((img.height, img.width)).or_default() += 1;
    }
    let common = size_counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(s, _)| *s)
        .unwrap();
    let mut images = Vec::with_capacity(raw.len());
    for (id, label, img) in raw {
        if (img.height, img.width) != common {
            warn!(
                "skipping {id}: size {}x{} differs from {}x{}",
                img.height, img.width, common.0, common.1
            );
            skipped += 1;
            continue;
        }
        images.push(LabeledImage {
            id,
            pixels: preprocess(&img)?,
            label,
        });
    }
    images.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(LoadReport { images, skipped })
}

/// Writes images back to the `<root>/<label>/<name>.png` layout.
pub fn export_patches(root: &Path, images: &[LabeledImage]) -> Result<()> {
    for img in images {
        let raw = unprocess(&img.pixels)?;
        if raw.channels != 3 {
            return Err(Error::Input("only 3-channel images can be exported".into()));
        }
        let (h, w) = (raw.height, raw.width);
        let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| raw.values[(c * h + y as usize) * w + x as usize] as u8;
            Rgb([at(0), at(1), at(2)])
        });
        let name = img.id.rsplit('/').next().unwrap_or(&img.id);
        let name = if name.ends_with(".png") {
            name.to_string()
        } else {
            format!("{name}.png")
        };
        let dir = root.join(img.label.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(name);
        buf.save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
    }
    Ok(())
}

/// Synthetic two-class patches. Class 0: pale background with a few smooth,
/// low-frequency stained blobs. Class 1: darker background covered by dense
/// high-frequency speckle. `label_noise` flips that fraction of labels.
pub fn synth_generate(n_per_class: usize, size: usize, seed: u64, label_noise: f64) -> Result<Vec<LabeledImage>> {
    if n_per_class == 0 {
        return Err(Error::Input("need at least one image per class".into()));
    }
    if size < 8 {
        return Err(Error::Input(format!("image size must be >= 8, got {size}")));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::Input(format!("label noise {label_noise} outside [0,1]")));
    }
    let mut rng = rng::seeded(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for label in 0..2usize {
        for i in 0..n_per_class {
            let raw = if label == 0 {
                smooth_blobs(size, &mut rng)
            } else {
                dense_speckle(size, &mut rng)
            };
            let flip = label_noise > 0.0 && rng.random::<f64>() < label_noise;
            out.push(LabeledImage {
                id: format!("{label}/synth_{i:05}"),
                pixels: preprocess(&raw)?,
                label: if flip { 1 - label } else { label },
            });
        }
    }
    Ok(out)
}

const STAIN: [f64; 3] = [0.45, 0.75, 0.5];

fn smooth_blobs(size: usize, rng: &mut Rng) -> RawImage {
    let s = size as f64;
    let base = rng.random_range(220.0..245.0);
    let blobs = rng.random_range(1..=2);
    let mut darkness = vec![0.0; size * size];
    for _ in 0..blobs {
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let radius = rng.random_range(0.2 * s..0.45 * s);
        let depth = rng.random_range(30.0..80.0);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                darkness[y * size + x] += depth * (-d2 / (2.0 * radius * radius)).exp();
            }
        }
    }
    colorize(size, base, &darkness, 2.0, rng)
}

fn dense_speckle(size: usize, rng: &mut Rng) -> RawImage {
    let base = rng.random_range(175.0..215.0);
    let density = rng.random_range(0.4..0.7);
    let mut darkness = vec![0.0; size * size];
    for d in darkness.iter_mut() {
        if rng.random::<f64>() < density {
            *d = rng.random_range(50.0..130.0);
        }
    }
    colorize(size, base, &darkness, 6.0, rng)
}

fn colorize(size: usize, base: f64, darkness: &[f64], jitter: f64, rng: &mut Rng) -> RawImage {
    let mut values = vec![0i32; 3 * size * size];
    for c in 0..3 {
        for (p, d) in darkness.iter().enumerate() {
            let v = base - STAIN[c] * d + rng.random_range(-jitter..=jitter);
            values[c * size * size + p] = v.round().clamp(0.0, 255.0) as i32;
        }
    }
    RawImage {
        channels: 3,
        height: size,
        width: size,
        values,
    }
}
