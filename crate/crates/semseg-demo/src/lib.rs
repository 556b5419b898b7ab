//! Single-page browser demo for the segmentation toolkit.
//!
//! Three interactive panels, each a thin wasm-bindgen wrapper over the
//! library:
//!
//! - [`MetricLab`]: corrupt a synthetic ground-truth map with a noise
//!   slider and watch per-class IoU / mIoU / fIoU respond.
//! - [`OverlayLab`]: blend a label map over a synthetic photo with an
//!   alpha slider.
//! - [`TrainLab`]: train a small encoder-decoder on four synthetic images
//!   right in the page and watch its predictions sharpen.
//!
//! Exports stick to `String`/`Vec<u8>`/numbers so the same code compiles
//! and tests natively.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use wasm_bindgen::prelude::*;

use semseg::backend::{NllConf, Optimizer};
use semseg::dataio::SegmentationSample;
use semseg::inference::{colorize, default_palette, numbered_class_names, overlay, ClassPalette};
use semseg::metrics::{build_report, ConfusionMatrix, EvalReport};
use semseg::models::{batch_to_arrays, DecoderKind, EncoderKind, ModelSpec, SegmentationModel};
use semseg::training::train_batch_step;

fn rng_for(seed: u32, salt: u64) -> rand::rngs::StdRng {
    rand::rngs::StdRng::seed_from_u64(seed as u64 ^ salt)
}

/// Blobby K-class label map: nearest-site assignment over seeded sites.
fn voronoi_labels(size: usize, k: u8, seed: u32) -> Array2<u8> {
    let mut rng = rng_for(seed, 0x5ce9e);
    let n_sites = (k as usize * 3).max(6);
    let sites: Vec<(f32, f32, u8)> = (0..n_sites)
        .map(|i| {
            (
                rng.gen_range(0.0..size as f32),
                rng.gen_range(0.0..size as f32),
                (i % k as usize) as u8,
            )
        })
        .collect();
    Array2::from_shape_fn((size, size), |(y, x)| {
        sites
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - y as f32).powi(2) + (a.1 - x as f32).powi(2);
                let db = (b.0 - y as f32).powi(2) + (b.1 - x as f32).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
            .2
    })
}

/// A plausible "photograph" of a label map: per-class base color, vertical
/// illumination falloff, speckle noise.
fn synthetic_photo(labels: &Array2<u8>, palette: &ClassPalette, seed: u32) -> Array3<u8> {
    let (h, w) = labels.dim();
    let mut rng = rng_for(seed, 0x9b0c_1234);
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        let shade = 1.0 - 0.35 * (y as f32 / h as f32);
        for x in 0..w {
            let base = palette.color(labels[[y, x]]).expect("palette covers classes");
            let noise: f32 = rng.gen_range(-14.0..14.0);
            for c in 0..3 {
                out[[y, x, c]] = (base[c] as f32 * shade + noise).clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn flip_fraction(labels: &Array2<u8>, k: u8, fraction: f32, seed: u32) -> Array2<u8> {
    let mut rng = rng_for(seed, 0xf11b5);
    let mut out = labels.clone();
    for v in out.iter_mut() {
        if rng.gen_range(0.0..1.0f32) < fraction {
            let bump = rng.gen_range(1..k);
            *v = (*v + bump) % k;
        }
    }
    out
}

fn rgba_from_rgb(rgb: &Array3<u8>) -> Vec<u8> {
    let (h, w, _) = rgb.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            out.push(rgb[[y, x, 0]]);
            out.push(rgb[[y, x, 1]]);
            out.push(rgb[[y, x, 2]]);
            out.push(255);
        }
    }
    out
}

fn report_of(truth: &Array2<u8>, pred: &Array2<u8>, names: &[String]) -> EvalReport {
    let mut cm = ConfusionMatrix::new(names.len());
    cm.accumulate(pred.view(), truth.view())
        .expect("grids agree by construction");
    build_report(&cm, names).expect("every class present by construction")
}

/// Interactive metric explorer: a fixed ground truth, a prediction
/// derived from it by randomized corruption, and the resulting IoU table.
#[wasm_bindgen]
pub struct MetricLab {
    k: u8,
    size: usize,
    seed: u32,
    names: Vec<String>,
    palette: ClassPalette,
    truth: Array2<u8>,
    pred: Array2<u8>,
}

#[wasm_bindgen]
impl MetricLab {
    #[wasm_bindgen(constructor)]
    pub fn new(k: u8, size: u32, seed: u32) -> MetricLab {
        let k = k.clamp(2, 16);
        let size = (size as usize).clamp(16, 256);
        let names = numbered_class_names(k as usize);
        let truth = voronoi_labels(size, k, seed);
        MetricLab {
            k,
            size,
            seed,
            palette: default_palette(&names),
            names,
            pred: truth.clone(),
            truth,
        }
    }

    /// Regenerate the prediction with `percent` of pixels flipped.
    pub fn set_noise(&mut self, percent: f32) {
        let fraction = (percent / 100.0).clamp(0.0, 1.0);
        self.pred = flip_fraction(&self.truth, self.k, fraction, self.seed ^ 7);
    }

    pub fn size(&self) -> u32 {
        self.size as u32
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        rgba_from_rgb(&colorize(self.truth.view(), &self.palette).expect("in range"))
    }

    pub fn pred_rgba(&self) -> Vec<u8> {
        rgba_from_rgb(&colorize(self.pred.view(), &self.palette).expect("in range"))
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string(&report_of(&self.truth, &self.pred, &self.names))
            .expect("report serializes")
    }

    pub fn table_text(&self) -> String {
        report_of(&self.truth, &self.pred, &self.names).render_table("noisy-prediction")
    }
}

/// Overlay studio: one synthetic photo, its label map, and an alpha blend.
#[wasm_bindgen]
pub struct OverlayLab {
    photo: Array3<u8>,
    labels: Array2<u8>,
    palette: ClassPalette,
}

#[wasm_bindgen]
impl OverlayLab {
    #[wasm_bindgen(constructor)]
    pub fn new(size: u32, k: u8, seed: u32) -> OverlayLab {
        let k = k.clamp(2, 16);
        let size = (size as usize).clamp(16, 256);
        let names = numbered_class_names(k as usize);
        let palette = default_palette(&names);
        let labels = voronoi_labels(size, k, seed);
        let photo = synthetic_photo(&labels, &palette, seed);
        OverlayLab {
            photo,
            labels,
            palette,
        }
    }

    pub fn size(&self) -> u32 {
        self.photo.dim().0 as u32
    }

    pub fn photo_rgba(&self) -> Vec<u8> {
        rgba_from_rgb(&self.photo)
    }

    pub fn labels_rgba(&self) -> Vec<u8> {
        rgba_from_rgb(&colorize(self.labels.view(), &self.palette).expect("in range"))
    }

    pub fn overlay_rgba(&self, alpha: f32) -> Vec<u8> {
        let blended = overlay(
            self.photo.view(),
            self.labels.view(),
            &self.palette,
            alpha.clamp(0.0, 1.0),
        )
        .expect("dims agree");
        rgba_from_rgb(&blended)
    }
}

const TRAIN_SIZE: usize = 32;
const TRAIN_CLASSES: usize = 3;

/// In-page training: a small upsampling decoder memorizes four synthetic
/// color-coded images, one optimizer step batch at a time.
#[wasm_bindgen]
pub struct TrainLab {
    model: SegmentationModel,
    optimizer: Optimizer,
    images: Array4<f32>,
    labels: Array3<u8>,
    photos: Vec<Array3<u8>>,
    palette: ClassPalette,
    last_probs: Option<Array4<f32>>,
    epoch: usize,
}

#[derive(serde::Serialize)]
struct TrainTick {
    epoch: usize,
    loss: f32,
    accuracy: f64,
}

#[wasm_bindgen]
impl TrainLab {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> TrainLab {
        let names = numbered_class_names(TRAIN_CLASSES);
        let palette = default_palette(&names);
        let colors: [[u8; 3]; 4] = [[230, 40, 40], [40, 230, 40], [50, 60, 230], [230, 230, 40]];
        let mut samples = Vec::new();
        let mut photos = Vec::new();
        for (i, color) in colors.iter().enumerate() {
            let class = (i % TRAIN_CLASSES) as u8;
            let image = Array3::from_shape_fn((TRAIN_SIZE, TRAIN_SIZE, 3), |(_, _, c)| {
                color[c] as f32 / 255.0
            });
            let photo = Array3::from_shape_fn((TRAIN_SIZE, TRAIN_SIZE, 3), |(_, _, c)| color[c]);
            photos.push(photo);
            samples.push(SegmentationSample {
                image,
                labels: Array2::from_elem((TRAIN_SIZE, TRAIN_SIZE), class),
                source_id: format!("synthetic{i}"),
            });
        }
        let (images, labels) = batch_to_arrays(&samples).expect("batch well formed");
        let spec = ModelSpec::new(
            EncoderKind::Plain,
            DecoderKind::Segnet,
            TRAIN_CLASSES,
            TRAIN_SIZE,
            TRAIN_SIZE,
        );
        let model = SegmentationModel::new(spec, seed as u64).expect("valid spec");
        TrainLab {
            optimizer: Optimizer::new(
                semseg::backend::OptimizerKind::AdaptiveMoment,
                1e-3,
                0.9,
                0.9,
                0.999,
            ),
            model,
            images,
            labels,
            photos,
            palette,
            last_probs: None,
            epoch: 0,
        }
    }

    pub fn parameter_count(&self) -> u32 {
        self.model.count_parameters() as u32
    }

    pub fn epoch(&self) -> u32 {
        self.epoch as u32
    }

    pub fn size(&self) -> u32 {
        TRAIN_SIZE as u32
    }

    pub fn sample_count(&self) -> u32 {
        self.photos.len() as u32
    }

    /// Run `n` full-batch epochs; returns a JSON array of per-epoch
    /// loss/accuracy ticks.
    pub fn run_epochs(&mut self, n: u32) -> String {
        let conf = NllConf {
            eps: 1e-7,
            class_weights: None,
            ignore_label: None,
        };
        let mut ticks = Vec::new();
        for _ in 0..n {
            let outcome = train_batch_step(
                &mut self.model,
                &mut self.optimizer,
                &self.images,
                &self.labels,
                &conf,
            )
            .expect("training step");
            self.epoch += 1;
            let pred = semseg::inference::argmax_labels(&outcome.probs);
            let total = pred.len() as f64;
            let correct = pred
                .iter()
                .zip(self.labels.iter())
                .filter(|(p, t)| p == t)
                .count() as f64;
            ticks.push(TrainTick {
                epoch: self.epoch,
                loss: outcome.loss,
                accuracy: correct / total,
            });
            self.last_probs = Some(outcome.probs);
        }
        serde_json::to_string(&ticks).expect("ticks serialize")
    }

    pub fn photo_rgba(&self, i: u32) -> Vec<u8> {
        rgba_from_rgb(&self.photos[i as usize % self.photos.len()])
    }

    pub fn truth_rgba(&self, i: u32) -> Vec<u8> {
        let idx = i as usize % self.photos.len();
        let labels = self.labels.index_axis(ndarray::Axis(0), idx).to_owned();
        rgba_from_rgb(&colorize(labels.view(), &self.palette).expect("in range"))
    }

    /// Latest training-mode prediction for sample `i`, blended over its
    /// photo. Uniform gray until the first step has run.
    pub fn prediction_rgba(&self, i: u32, alpha: f32) -> Vec<u8> {
        let idx = i as usize % self.photos.len();
        match &self.last_probs {
            None => rgba_from_rgb(&self.photos[idx]),
            Some(probs) => {
                let pred = semseg::inference::argmax_labels(probs);
                let labels = pred.index_axis(ndarray::Axis(0), idx).to_owned();
                let blended = overlay(
                    self.photos[idx].view(),
                    labels.view(),
                    &self.palette,
                    alpha.clamp(0.0, 1.0),
                )
                .expect("dims agree");
                rgba_from_rgb(&blended)
            }
        }
    }
}
