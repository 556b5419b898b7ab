//! Prediction and qualitative rendering: label maps, palette colorization
//! and alpha-blended overlays.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::SegmentationModel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub color: [u8; 3],
}

/// Per-class display names and colors; length equals the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPalette {
    pub entries: Vec<PaletteEntry>,
}

impl ClassPalette {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn color(&self, class: u8) -> Result<[u8; 3]> {
        self.entries
            .get(class as usize)
            .map(|e| e.color)
            .ok_or_else(|| {
                Error::shape(format!(
                    "label {class} out of range for a {}-entry palette",
                    self.entries.len()
                ))
            })
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn load(path: &Path) -> Result<ClassPalette> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<PaletteEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid palette file {}: {e}", path.display())))?;
        Ok(ClassPalette { entries })
    }
}

fn hue_to_rgb(hue: f32) -> [u8; 3] {
    let h = (hue / 60.0).rem_euclid(6.0);
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

/// Deterministic default palette: class 0 dark gray (background-like),
/// remaining classes evenly spaced hues at full saturation.
pub fn default_palette(class_names: &[String]) -> ClassPalette {
    let k = class_names.len();
    let entries = class_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let color = if i == 0 {
                [64, 64, 64]
            } else {
                hue_to_rgb(360.0 * (i - 1) as f32 / (k - 1).max(1) as f32)
            };
            PaletteEntry {
                name: name.clone(),
                color,
            }
        })
        .collect();
    ClassPalette { entries }
}

pub fn numbered_class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

/// Per-pixel argmax over the class axis; ties resolve to the lowest class
/// index.
pub fn argmax_labels(probs: &Array4<f32>) -> Array3<u8> {
    let (n, k, h, w) = probs.dim();
    Array3::from_shape_fn((n, h, w), |(ni, y, x)| {
        let mut best_c = 0usize;
        let mut best = probs[[ni, 0, y, x]];
        for c in 1..k {
            let v = probs[[ni, c, y, x]];
            if v > best {
                best = v;
                best_c = c;
            }
        }
        best_c as u8
    })
}

/// Predict the label grid for one prepared image (H×W×3 in [0,1], already
/// at the model's input dims).
pub fn predict_labels(model: &SegmentationModel, image: &Array3<f32>) -> Result<Array2<u8>> {
    let (h, w, c) = image.dim();
    if c != 3 || h != model.spec().input_height || w != model.spec().input_width {
        return Err(Error::shape(format!(
            "image {h}x{w}x{c} does not match model input {}x{}x3",
            model.spec().input_height,
            model.spec().input_width
        )));
    }
    let mut batch = Array4::<f32>::zeros((1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            for ci in 0..3 {
                batch[[0, ci, y, x]] = image[[y, x, ci]];
            }
        }
    }
    let probs = model.forward(&batch)?;
    let labels = argmax_labels(&probs);
    Ok(labels.index_axis(ndarray::Axis(0), 0).to_owned())
}

/// Pixelwise palette lookup.
pub fn colorize(labels: ArrayView2<'_, u8>, palette: &ClassPalette) -> Result<Array3<u8>> {
    let (h, w) = labels.dim();
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let color = palette.color(labels[[y, x]])?;
            for c in 0..3 {
                out[[y, x, c]] = color[c];
            }
        }
    }
    Ok(out)
}

/// Blend the colorized labels over the photograph:
/// `round(alpha·palette + (1−alpha)·image)` per channel.
pub fn overlay(
    image: ArrayView3<'_, u8>,
    labels: ArrayView2<'_, u8>,
    palette: &ClassPalette,
    alpha: f32,
) -> Result<Array3<u8>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0,1]")));
    }
    let (h, w, c) = image.dim();
    if c != 3 || labels.dim() != (h, w) {
        return Err(Error::shape(format!(
            "overlay dims disagree: image {:?}, labels {:?}",
            image.dim(),
            labels.dim()
        )));
    }
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let color = palette.color(labels[[y, x]])?;
            for ci in 0..3 {
                let blended =
                    alpha * color[ci] as f32 + (1.0 - alpha) * image[[y, x, ci]] as f32;
                out[[y, x, ci]] = blended.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Write an H×W×3 array as an 8-bit RGB image file.
pub fn save_rgb(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape("expected an H×W×3 array"));
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            image[[y as usize, x as usize, 0]],
            image[[y as usize, x as usize, 1]],
            image[[y as usize, x as usize, 2]],
        ])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Write a label grid as the single-channel class-index format the dataset
/// loader reads back.
pub fn save_labels(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([labels[[y as usize, x as usize]]])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
