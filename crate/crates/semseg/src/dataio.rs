//! Dataset ingestion: paired image/annotation discovery, decoding, resizing
//! and seeded batch iteration.
//!
//! Layout on disk is two sibling directories with matching file stems:
//! images as 8-bit RGB, annotations as 8-bit single-channel class-index
//! images (pixel value = class id).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub images_dir: PathBuf,
    pub annotations_dir: PathBuf,
    pub n_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub output_height: usize,
    pub output_width: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Optional per-channel (mean, std) applied after the [0,1] scaling.
    #[serde(default)]
    pub channel_mean_std: Option<([f32; 3], [f32; 3])>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.n_classes > 256 {
            return Err(Error::config(
                "n_classes exceeds 256, the capacity of 8-bit class-index annotations",
            ));
        }
        if self.input_height == 0
            || self.input_width == 0
            || self.output_height == 0
            || self.output_width == 0
        {
            return Err(Error::config("image dimensions must be positive"));
        }
        if self.output_height > self.input_height || self.output_width > self.input_width {
            return Err(Error::config(format!(
                "output dims {}x{} exceed input dims {}x{}",
                self.output_height, self.output_width, self.input_height, self.input_width
            )));
        }
        Ok(())
    }
}

/// One resolved (image, annotation) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPaths {
    pub stem: String,
    pub image: PathBuf,
    pub annotation: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct ScanResult {
    /// Matched pairs sorted lexicographically by stem.
    pub pairs: Vec<PairPaths>,
    /// Stems of images with no matching annotation.
    pub missing_annotations: Vec<String>,
}

/// A decoded, resized training sample.
#[derive(Debug, Clone)]
pub struct SegmentationSample {
    /// H×W×3, scaled to [0,1] (then optionally mean/std normalized).
    pub image: Array3<f32>,
    /// H'×W' class indices, every entry < n_classes.
    pub labels: Array2<u8>,
    pub source_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetReport {
    pub n_pairs: usize,
    pub missing_annotations: Vec<String>,
    /// (stem, max label found) for annotations with labels ≥ n_classes.
    pub out_of_range_ids: Vec<(String, u8)>,
    /// Stems whose files exist but cannot be decoded.
    pub undecodable_ids: Vec<String>,
    /// Pixel count per class over all valid annotations, at native
    /// annotation resolution.
    pub class_histogram: Vec<u64>,
}

impl DatasetReport {
    pub fn has_defects(&self) -> bool {
        !self.missing_annotations.is_empty()
            || !self.out_of_range_ids.is_empty()
            || !self.undecodable_ids.is_empty()
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("pairs: {}\n", self.n_pairs));
        out.push_str(&format!(
            "defects: {}\n",
            self.missing_annotations.len() + self.out_of_range_ids.len() + self.undecodable_ids.len()
        ));
        if !self.missing_annotations.is_empty() {
            out.push_str(&format!(
                "missing annotations ({}):\n",
                self.missing_annotations.len()
            ));
            for id in &self.missing_annotations {
                out.push_str(&format!("  {id}\n"));
            }
        }
        if !self.out_of_range_ids.is_empty() {
            out.push_str(&format!(
                "out-of-range labels ({}):\n",
                self.out_of_range_ids.len()
            ));
            for (id, max) in &self.out_of_range_ids {
                out.push_str(&format!("  {id} (max label {max})\n"));
            }
        }
        if !self.undecodable_ids.is_empty() {
            out.push_str(&format!("undecodable ({}):\n", self.undecodable_ids.len()));
            for id in &self.undecodable_ids {
                out.push_str(&format!("  {id}\n"));
            }
        }
        out.push_str("class histogram:\n");
        for (c, n) in self.class_histogram.iter().enumerate() {
            out.push_str(&format!("  {c}: {n}\n"));
        }
        out
    }
}

fn index_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !ext_ok {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        if let Some(previous) = map.insert(stem.clone(), path.clone()) {
            return Err(Error::config(format!(
                "ambiguous stem {stem:?}: {} and {}",
                previous.display(),
                path.display()
            )));
        }
    }
    Ok(map)
}

/// Pair images with annotations by shared file stem. Unmatched images are
/// reported, not fatal; training rejects them separately.
pub fn scan_dataset(config: &DatasetConfig) -> Result<ScanResult> {
    for dir in [&config.images_dir, &config.annotations_dir] {
        if !dir.is_dir() {
            return Err(Error::config(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
    }
    let images = index_dir(&config.images_dir)?;
    let annotations = index_dir(&config.annotations_dir)?;
    let mut result = ScanResult::default();
    for (stem, image) in images {
        match annotations.get(&stem) {
            Some(annotation) => result.pairs.push(PairPaths {
                stem,
                image,
                annotation: annotation.clone(),
            }),
            None => result.missing_annotations.push(stem),
        }
    }
    // BTreeMap iteration already sorted by stem.
    Ok(result)
}

fn decode_annotation(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            // Tolerate grayscale stored in wider formats, but reject
            // genuinely colored annotations: a class-index image must carry
            // one channel of information.
            let rgb = other.to_rgb8();
            if rgb
                .pixels()
                .any(|p| p.0[0] != p.0[1] || p.0[1] != p.0[2])
            {
                return Err(Error::data(
                    path,
                    "annotation is not a single-channel class-index image",
                ));
            }
            image::DynamicImage::ImageRgb8(rgb).to_luma8()
        }
    };
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), gray.into_raw())
        .expect("luma buffer matches dims"))
}

/// Nearest-neighbor resample of a label grid; never invents class ids.
pub fn resize_labels_nearest(labels: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = labels.dim();
    if (h, w) == (oh, ow) {
        return labels.clone();
    }
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = (((y as f32 + 0.5) * h as f32 / oh as f32 - 0.5).round() as isize)
            .clamp(0, h as isize - 1) as usize;
        let sx = (((x as f32 + 0.5) * w as f32 / ow as f32 - 0.5).round() as isize)
            .clamp(0, w as isize - 1) as usize;
        labels[[sy, sx]]
    })
}

/// Decode an RGB image, bilinearly resize to `h`×`w`, scale into [0,1] and
/// optionally apply per-channel mean/std normalization.
pub fn load_rgb_normalized(
    path: &Path,
    h: usize,
    w: usize,
    channel_mean_std: Option<&([f32; 3], [f32; 3])>,
) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let resized = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    let mut image_arr = Array3::<f32>::zeros((h, w, 3));
    for (x, y, p) in resized.enumerate_pixels() {
        for c in 0..3 {
            image_arr[[y as usize, x as usize, c]] = p.0[c] as f32 / 255.0;
        }
    }
    if let Some((mean, std)) = channel_mean_std {
        for c in 0..3 {
            let (m, s) = (mean[c], std[c].max(1e-6));
            image_arr
                .slice_mut(ndarray::s![.., .., c])
                .mapv_inplace(|v| (v - m) / s);
        }
    }
    Ok(image_arr)
}

/// Decode, resize and normalize one (image, annotation) pair.
///
/// The image is resized bilinearly to the input dims and scaled into [0,1];
/// the annotation is resized nearest-neighbor to the output dims (class ids
/// are never interpolated) and validated against `n_classes`.
pub fn load_sample(
    image_path: &Path,
    annotation_path: &Path,
    config: &DatasetConfig,
) -> Result<SegmentationSample> {
    let image_arr = load_rgb_normalized(
        image_path,
        config.input_height,
        config.input_width,
        config.channel_mean_std.as_ref(),
    )?;

    let native = decode_annotation(annotation_path)?;
    let labels = resize_labels_nearest(&native, config.output_height, config.output_width);
    if let Some(&max) = labels.iter().max() {
        if max as usize >= config.n_classes {
            return Err(Error::data(
                annotation_path,
                format!(
                    "label value {max} out of range for {} classes",
                    config.n_classes
                ),
            ));
        }
    }

    let source_id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample")
        .to_string();
    Ok(SegmentationSample {
        image: image_arr,
        labels,
        source_id,
    })
}

/// Full dataset health scan. Bad data is reported, never raised; only
/// filesystem-level failures surface as errors.
pub fn verify_dataset(config: &DatasetConfig) -> Result<DatasetReport> {
    config.validate()?;
    let scan = scan_dataset(config)?;
    let mut report = DatasetReport {
        n_pairs: scan.pairs.len(),
        missing_annotations: scan.missing_annotations,
        out_of_range_ids: Vec::new(),
        undecodable_ids: Vec::new(),
        class_histogram: vec![0; config.n_classes],
    };
    for pair in &scan.pairs {
        let native = match decode_annotation(&pair.annotation) {
            Ok(a) => a,
            Err(_) => {
                report.undecodable_ids.push(pair.stem.clone());
                continue;
            }
        };
        let max = native.iter().copied().max().unwrap_or(0);
        if max as usize >= config.n_classes {
            report.out_of_range_ids.push((pair.stem.clone(), max));
            continue;
        }
        for &v in native.iter() {
            report.class_histogram[v as usize] += 1;
        }
    }
    Ok(report)
}

/// Deterministic seeded epoch iteration: a permutation of all pairs split
/// into batches, the final short batch included.
pub struct BatchIter<'a> {
    order: Vec<&'a PairPaths>,
    config: &'a DatasetConfig,
    batch_size: usize,
    cursor: usize,
    transform: Option<&'a (dyn Fn(&mut SegmentationSample) + Sync)>,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        pairs: &'a [PairPaths],
        config: &'a DatasetConfig,
        batch_size: usize,
        epoch_seed: u64,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::config("cannot iterate over an empty pair list"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        let mut order: Vec<&PairPaths> = pairs.iter().collect();
        let seed = config
            .shuffle_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch_seed);
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        Ok(BatchIter {
            order,
            config,
            batch_size,
            cursor: 0,
            transform: None,
        })
    }

    /// Augmentation hook applied to each sample after loading.
    pub fn with_transform(
        mut self,
        transform: &'a (dyn Fn(&mut SegmentationSample) + Sync),
    ) -> Self {
        self.transform = Some(transform);
        self
    }

    fn load(&self, pair: &PairPaths) -> Result<SegmentationSample> {
        let mut sample = load_sample(&pair.image, &pair.annotation, self.config)?;
        if let Some(t) = self.transform {
            t(&mut sample);
        }
        Ok(sample)
    }
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = Result<Vec<SegmentationSample>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let chunk = &self.order[self.cursor..end];
        self.cursor = end;

        #[cfg(feature = "parallel")]
        let loaded: Vec<Result<SegmentationSample>> = {
            use rayon::prelude::*;
            chunk.par_iter().map(|p| self.load(p)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let loaded: Vec<Result<SegmentationSample>> =
            chunk.iter().map(|p| self.load(p)).collect();

        Some(loaded.into_iter().collect())
    }
}
