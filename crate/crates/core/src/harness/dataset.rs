//! Procedural desk-scale datasets (shape classification, blob segmentation),
//! external PNG ingestion, on-disk persistence with digests, and
//! class-balanced labeled/unlabeled splits.

use crate::error::{Error, Result};
use crate::stream::{normal, stream, Stream};
use ndarray::{Array3, Array4, Axis};
use rand::RngExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ShapesClassification,
    BlobsSegmentation,
    ExternalDirectory,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shapes_classification" => Ok(DatasetKind::ShapesClassification),
            "blobs_segmentation" => Ok(DatasetKind::BlobsSegmentation),
            "external_directory" => Ok(DatasetKind::ExternalDirectory),
            other => Err(Error::Config(format!("unknown dataset kind '{other}'"))),
        }
    }
}

/// Appearance ranges for the procedural renderers. Hues are degrees, the
/// rest are fractions; `scale` is the shape radius as a fraction of the
/// half-image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub fg_hue: (f64, f64),
    pub fg_sat: (f64, f64),
    pub fg_val: (f64, f64),
    pub bg_hue: (f64, f64),
    pub bg_sat: (f64, f64),
    pub bg_val: (f64, f64),
    pub noise: f64,
    pub scale: (f64, f64),
}

impl Default for Appearance {
    fn default() -> Self {
        // broad ranges, the "generic" distribution
        Appearance {
            fg_hue: (0.0, 360.0),
            fg_sat: (0.5, 1.0),
            fg_val: (0.6, 1.0),
            bg_hue: (0.0, 360.0),
            bg_sat: (0.0, 0.3),
            bg_val: (0.2, 0.95),
            noise: 0.03,
            scale: (0.35, 0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub image_size: usize,
    pub classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub appearance: Appearance,
    pub source: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::ShapesClassification,
            image_size: 32,
            classes: 4,
            train_count: 2000,
            test_count: 500,
            seed: 7,
            appearance: Appearance::default(),
            source: None,
        }
    }
}

/// Shape silhouettes available to the renderers, in class order.
pub const SHAPE_VOCABULARY: [&str; 8] =
    ["circle", "square", "triangle", "cross", "ring", "diamond", "star", "bars"];

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size must be >= 8, got {}", self.image_size)));
        }
        match self.kind {
            DatasetKind::ShapesClassification => {
                if self.classes < 2 {
                    return Err(Error::Config("classification needs K >= 2".into()));
                }
                if self.classes > SHAPE_VOCABULARY.len() {
                    return Err(Error::Config(format!(
                        "K = {} exceeds the shape vocabulary ({})",
                        self.classes,
                        SHAPE_VOCABULARY.len()
                    )));
                }
            }
            DatasetKind::BlobsSegmentation => {
                if self.classes < 2 {
                    return Err(Error::Config("segmentation needs background + >= 1 class".into()));
                }
                if self.classes - 1 > SHAPE_VOCABULARY.len() {
                    return Err(Error::Config(format!(
                        "K - 1 = {} exceeds the shape vocabulary ({})",
                        self.classes - 1,
                        SHAPE_VOCABULARY.len()
                    )));
                }
            }
            DatasetKind::ExternalDirectory => {
                if self.source.is_none() {
                    return Err(Error::Config("external_directory needs dataset.path".into()));
                }
            }
        }
        if self.kind != DatasetKind::ExternalDirectory && self.train_count == 0 {
            return Err(Error::Config("train_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// In-memory dataset: images in `[0, 1]`, integer labels, optional per-pixel
/// masks (segmentation).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train_images: Array4<f32>,
    pub train_labels: Vec<usize>,
    pub train_masks: Option<Array3<u8>>,
    pub test_images: Array4<f32>,
    pub test_labels: Vec<usize>,
    pub test_masks: Option<Array3<u8>>,
}

impl Dataset {
    pub fn is_segmentation(&self) -> bool {
        self.train_masks.is_some()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

fn inside_shape(shape: usize, dx: f64, dy: f64) -> bool {
    let r2 = dx * dx + dy * dy;
    match shape {
        0 => r2 <= 1.0,                                  // circle
        1 => dx.abs().max(dy.abs()) <= 0.82,             // square
        2 => dy <= 0.75 && dy >= -1.0 && dx.abs() <= 0.95 * (dy + 1.0) / 1.75, // triangle
        3 => (dx.abs() <= 0.33 && dy.abs() <= 1.0) || (dy.abs() <= 0.33 && dx.abs() <= 1.0), // cross
        4 => (0.3025..=1.0).contains(&r2),               // ring (inner radius 0.55)
        5 => dx.abs() + dy.abs() <= 1.1,                 // diamond
        6 => {
            // five-lobed star-like rose
            let r = r2.sqrt();
            let theta = dy.atan2(dx);
            r <= 0.55 + 0.45 * (5.0 * theta).cos().max(0.0)
        }
        7 => dx.abs() <= 0.95 && ((dy - 0.5).abs() <= 0.22 || (dy + 0.5).abs() <= 0.22), // bars
        _ => unreachable!("shape index out of vocabulary"),
    }
}

fn sample_range(rng: &mut Stream, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

struct Rendered {
    image: Array3<f32>,
    mask: Array3<u8>, // [1, H, W] pre-squeeze; value = class + 1
}

fn render_shape_image(
    size: usize,
    shape: usize,
    appearance: &Appearance,
    rng: &mut Stream,
) -> Rendered {
    let bg = hsv_to_rgb(
        sample_range(rng, appearance.bg_hue),
        sample_range(rng, appearance.bg_sat),
        sample_range(rng, appearance.bg_val),
    );
    let fg = hsv_to_rgb(
        sample_range(rng, appearance.fg_hue),
        sample_range(rng, appearance.fg_sat),
        sample_range(rng, appearance.fg_val),
    );
    let half = size as f64 / 2.0;
    let radius = sample_range(rng, appearance.scale) * half;
    // keep the full silhouette (max extent 1.15 r) inside the frame
    let margin = (1.15 * radius).ceil().min(half - 1.0);
    let cx = rng.random_range(margin..(size as f64 - margin));
    let cy = rng.random_range(margin..(size as f64 - margin));

    let mut image = Array3::<f32>::zeros((3, size, size));
    let mut mask = Array3::<u8>::zeros((1, size, size));
    for i in 0..size {
        for j in 0..size {
            // 3x3 supersampled coverage
            let mut hits = 0usize;
            for si in 0..3 {
                for sj in 0..3 {
                    let py = i as f64 + (si as f64 + 0.5) / 3.0;
                    let px = j as f64 + (sj as f64 + 0.5) / 3.0;
                    if inside_shape(shape, (px - cx) / radius, (py - cy) / radius) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f32 / 9.0;
            if cov >= 0.5 {
                mask[[0, i, j]] = 1;
            }
            for c in 0..3 {
                let noise = (normal(rng) * appearance.noise) as f32;
                let v = bg[c] * (1.0 - cov) + fg[c] * cov + noise;
                image[[c, i, j]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Rendered { image, mask }
}

fn generate_procedural(spec: &DatasetSpec) -> Result<Dataset> {
    let size = spec.image_size;
    let seg = spec.kind == DatasetKind::BlobsSegmentation;
    let fg_classes = if seg { spec.classes - 1 } else { spec.classes };
    let make = |count: usize, tag: &str| -> (Array4<f32>, Vec<usize>, Array3<u8>) {
        let mut rng = stream(spec.seed, tag);
        let mut images = Array4::<f32>::zeros((count, 3, size, size));
        let mut labels = Vec::with_capacity(count);
        let mut masks = Array3::<u8>::zeros((count, size, size));
        for i in 0..count {
            let label = i % fg_classes;
            let rendered = render_shape_image(size, label, &spec.appearance, &mut rng);
            images.index_axis_mut(Axis(0), i).assign(&rendered.image);
            for y in 0..size {
                for x in 0..size {
                    if rendered.mask[[0, y, x]] > 0 {
                        masks[[i, y, x]] = label as u8 + 1;
                    }
                }
            }
            labels.push(label);
        }
        (images, labels, masks)
    };
    let (train_images, train_labels, train_masks) = make(spec.train_count, "dataset-train");
    let (test_images, test_labels, test_masks) = make(spec.test_count, "dataset-test");
    Ok(Dataset {
        spec: spec.clone(),
        train_images,
        train_labels,
        train_masks: seg.then_some(train_masks),
        test_images,
        test_labels,
        test_masks: seg.then_some(test_masks),
    })
}

/// Generate (or ingest) the dataset described by the spec; bit-reproducible
/// from `(spec, seed)` for the procedural kinds.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    match spec.kind {
        DatasetKind::ShapesClassification | DatasetKind::BlobsSegmentation => {
            generate_procedural(spec)
        }
        DatasetKind::ExternalDirectory => load_external(spec),
    }
}

fn png_to_array(path: &Path, expect: usize) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w as usize != expect || h as usize != expect {
        return Err(Error::Data(format!(
            "{}: expected {expect}x{expect}, got {w}x{h}",
            path.display()
        )));
    }
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn load_external_split(
    root: &Path,
    split: &str,
    size: usize,
) -> Result<(Array4<f32>, Vec<usize>, Option<Array3<u8>>, Vec<String>)> {
    let dir = root.join(split);
    if !dir.exists() {
        return Ok((Array4::zeros((0, 3, size, size)), Vec::new(), None, Vec::new()));
    }
    let seg = dir.join("images").is_dir() && dir.join("masks").is_dir();
    if seg {
        let image_files = sorted_entries(&dir.join("images"))?;
        let mut images = Array4::<f32>::zeros((image_files.len(), 3, size, size));
        let mut masks = Array3::<u8>::zeros((image_files.len(), size, size));
        for (i, f) in image_files.iter().enumerate() {
            images.index_axis_mut(Axis(0), i).assign(&png_to_array(f, size)?);
            let name = f.file_name().unwrap();
            let mask_path = dir.join("masks").join(name);
            let m = image::open(&mask_path)
                .map_err(|e| Error::Data(format!("{}: {e}", mask_path.display())))?
                .to_luma8();
            for (x, y, p) in m.enumerate_pixels() {
                masks[[i, y as usize, x as usize]] = p.0[0];
            }
        }
        let labels = vec![0usize; image_files.len()];
        return Ok((images, labels, Some(masks), vec!["segmentation".into()]));
    }
    let mut class_dirs: Vec<PathBuf> =
        sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()).collect();
    class_dirs.sort();
    let mut files = Vec::new();
    let mut class_names = Vec::new();
    for (class, cd) in class_dirs.iter().enumerate() {
        class_names.push(cd.file_name().unwrap().to_string_lossy().to_string());
        for f in sorted_entries(cd)? {
            if f.extension().map(|e| e == "png").unwrap_or(false) {
                files.push((f, class));
            }
        }
    }
    let mut images = Array4::<f32>::zeros((files.len(), 3, size, size));
    let mut labels = Vec::with_capacity(files.len());
    for (i, (f, class)) in files.iter().enumerate() {
        images.index_axis_mut(Axis(0), i).assign(&png_to_array(f, size)?);
        labels.push(*class);
    }
    Ok((images, labels, None, class_names))
}

fn load_external(spec: &DatasetSpec) -> Result<Dataset> {
    let root = spec.source.as_ref().expect("validated");
    let (train_images, train_labels, train_masks, _) =
        load_external_split(root, "train", spec.image_size)?;
    if train_images.shape()[0] == 0 {
        return Err(Error::Data(format!("{}: no training images", root.display())));
    }
    let (test_images, test_labels, test_masks, _) =
        load_external_split(root, "test", spec.image_size)?;
    Ok(Dataset {
        spec: spec.clone(),
        train_images,
        train_labels,
        train_masks,
        test_images,
        test_labels,
        test_masks,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    spec: DatasetSpec,
    train_count: usize,
    test_count: usize,
    digests: std::collections::BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn f32_bytes(a: &Array4<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 4);
    for &v in a.as_slice().unwrap() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_bytes(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

/// Persist a dataset directory: `meta.json` plus raw little-endian blobs.
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut digests = std::collections::BTreeMap::new();
    let mut write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        digests.insert(name.to_string(), sha256_hex(&bytes));
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))
    };
    write("train_images.bin", f32_bytes(&ds.train_images))?;
    write("train_labels.bin", u32_bytes(&ds.train_labels))?;
    if let Some(m) = &ds.train_masks {
        write("train_masks.bin", m.as_slice().unwrap().to_vec())?;
    }
    write("test_images.bin", f32_bytes(&ds.test_images))?;
    write("test_labels.bin", u32_bytes(&ds.test_labels))?;
    if let Some(m) = &ds.test_masks {
        write("test_masks.bin", m.as_slice().unwrap().to_vec())?;
    }
    let meta = DatasetMeta {
        spec: ds.spec.clone(),
        train_count: ds.train_images.shape()[0],
        test_count: ds.test_images.shape()[0],
        digests,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Load a dataset directory, verifying blob digests.
pub fn load(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
    let size = meta.spec.image_size;
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        match meta.digests.get(name) {
            Some(d) if *d == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::Corrupt(format!("digest mismatch for {name}"))),
            None => Err(Error::Corrupt(format!("no digest recorded for {name}"))),
        }
    };
    let images_from = |bytes: Vec<u8>, count: usize| -> Result<Array4<f32>> {
        if bytes.len() != count * 3 * size * size * 4 {
            return Err(Error::Corrupt("image blob has wrong length".into()));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Array4::from_shape_vec((count, 3, size, size), vals)
            .map_err(|e| Error::Corrupt(e.to_string()))
    };
    let labels_from = |bytes: Vec<u8>, count: usize| -> Result<Vec<usize>> {
        if bytes.len() != count * 4 {
            return Err(Error::Corrupt("label blob has wrong length".into()));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect())
    };
    let masks_from = |bytes: Vec<u8>, count: usize| -> Result<Array3<u8>> {
        if bytes.len() != count * size * size {
            return Err(Error::Corrupt("mask blob has wrong length".into()));
        }
        Array3::from_shape_vec((count, size, size), bytes).map_err(|e| Error::Corrupt(e.to_string()))
    };

    let train_images = images_from(read("train_images.bin")?, meta.train_count)?;
    let train_labels = labels_from(read("train_labels.bin")?, meta.train_count)?;
    let train_masks = if meta.digests.contains_key("train_masks.bin") {
        Some(masks_from(read("train_masks.bin")?, meta.train_count)?)
    } else {
        None
    };
    let test_images = images_from(read("test_images.bin")?, meta.test_count)?;
    let test_labels = labels_from(read("test_labels.bin")?, meta.test_count)?;
    let test_masks = if meta.digests.contains_key("test_masks.bin") {
        Some(masks_from(read("test_masks.bin")?, meta.test_count)?)
    } else {
        None
    };
    Ok(Dataset {
        spec: meta.spec,
        train_images,
        train_labels,
        train_masks,
        test_images,
        test_labels,
        test_masks,
    })
}

/// Labeled/unlabeled split: a class-balanced labeled subset plus the full
/// training image set as the unlabeled pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub n_labeled: usize,
    pub seed: u64,
    pub labeled_indices: Vec<usize>,
    pub per_class: Vec<usize>,
}

/// Select the labeled subset. Per-class counts differ by at most one; ties
/// in the remainder go to a seed-shuffled class order.
pub fn split_dataset(ds: &Dataset, n_labeled: usize, seed: u64) -> Result<DatasetSplit> {
    let n = ds.train_images.shape()[0];
    if n_labeled == 0 || n_labeled > n {
        return Err(Error::Config(format!(
            "n_labeled must be in [1, {n}], got {n_labeled}"
        )));
    }
    let k = if ds.is_segmentation() { ds.spec.classes - 1 } else { ds.spec.classes };
    let mut rng = stream(seed, "split");
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in ds.train_labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Data(format!("label {l} out of range {k}")));
        }
        by_class[l].push(i);
    }
    use rand::seq::SliceRandom;
    let base = n_labeled / k;
    let extra = n_labeled % k;
    let mut class_order: Vec<usize> = (0..k).collect();
    class_order.shuffle(&mut rng);
    let mut take = vec![base; k];
    for &c in class_order.iter().take(extra) {
        take[c] += 1;
    }
    let mut labeled = Vec::with_capacity(n_labeled);
    for c in 0..k {
        let mut pool = by_class[c].clone();
        pool.shuffle(&mut rng);
        if take[c] > pool.len() {
            return Err(Error::Config(format!(
                "class {c} has only {} samples, need {}",
                pool.len(),
                take[c]
            )));
        }
        labeled.extend_from_slice(&pool[..take[c]]);
    }
    labeled.sort_unstable();
    Ok(DatasetSplit { n_labeled, seed, labeled_indices: labeled, per_class: take })
}

pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(split).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Gather the labeled images and targets named by a split.
pub fn labeled_subset(
    ds: &Dataset,
    split: &DatasetSplit,
) -> (Array4<f32>, crate::ssl::LabeledTargets) {
    let idx = &split.labeled_indices;
    let images = crate::contrastive::gather(&ds.train_images, idx);
    let targets = match &ds.train_masks {
        Some(masks) => {
            let (_, h, w) = masks.dim();
            let mut m = Array3::<u8>::zeros((idx.len(), h, w));
            for (row, &i) in idx.iter().enumerate() {
                m.index_axis_mut(Axis(0), row).assign(&masks.index_axis(Axis(0), i));
            }
            crate::ssl::LabeledTargets::Masks(m)
        }
        None => crate::ssl::LabeledTargets::Classes(
            idx.iter().map(|&i| ds.train_labels[i]).collect(),
        ),
    };
    (images, targets)
}

/// Test-set targets in `ssl` form.
pub fn test_targets(ds: &Dataset) -> crate::ssl::LabeledTargets {
    match &ds.test_masks {
        Some(m) => crate::ssl::LabeledTargets::Masks(m.clone()),
        None => crate::ssl::LabeledTargets::Classes(ds.test_labels.clone()),
    }
}
