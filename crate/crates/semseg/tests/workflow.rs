//! End-to-end library workflow: overfit a small model on four synthetic
//! color-coded images, then push it through the inference-mode evaluation
//! and prediction paths.
//!
//! Inference-mode batch norm runs on running averages (momentum 0.99), so
//! the evaluation half of this test needs the full 300-epoch run for the
//! averages to converge to the batch statistics the model was fit under;
//! accuracy measured during training saturates after a handful of epochs.

use image::{GrayImage, RgbImage};
use ndarray::Array2;

use semseg::dataio::{load_rgb_normalized, DatasetConfig};
use semseg::inference::{default_palette, numbered_class_names, predict_labels};
use semseg::models::{DecoderKind, EncoderKind, ModelSpec};
use semseg::training::{evaluate_split, train, TrainConfig};

fn solid_color_dataset(dir: &std::path::Path, size: u32) -> DatasetConfig {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&annotations).unwrap();
    let colors = [[230u8, 40, 40], [40, 230, 40], [50, 60, 230], [230, 230, 40]];
    for i in 0..4u32 {
        let class = (i % 3) as u8;
        RgbImage::from_pixel(size, size, image::Rgb(colors[i as usize]))
            .save(images.join(format!("s{i}.png")))
            .unwrap();
        GrayImage::from_pixel(size, size, image::Luma([class]))
            .save(annotations.join(format!("s{i}.png")))
            .unwrap();
    }
    DatasetConfig {
        images_dir: images,
        annotations_dir: annotations,
        n_classes: 3,
        input_height: size as usize,
        input_width: size as usize,
        output_height: size as usize,
        output_width: size as usize,
        shuffle_seed: 0,
        channel_mean_std: None,
    }
}

#[test]
fn overfit_model_scores_high_miou_in_inference_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = solid_color_dataset(tmp.path(), 32);
    let tc = TrainConfig {
        epochs: 300,
        batch_size: 4,
        checkpoint_dir: tmp.path().join("ckpt"),
        ..TrainConfig::default()
    };
    let spec = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 3, 32, 32);
    let (model, history) = train(spec, &dataset, &tc, None).unwrap();
    let final_acc = history.records.last().unwrap().train_pixel_accuracy;
    assert!(final_acc >= 0.95, "training accuracy {final_acc:.4}");

    // Full inference-mode evaluation over the training pairs.
    let names = numbered_class_names(3);
    let report = evaluate_split(&model, &dataset, Some(&names)).unwrap();
    assert!(report.miou >= 0.9, "inference-mode mIoU {:.4}", report.miou);

    // Per-image prediction agrees with the annotation on >= 95% of pixels.
    let image = load_rgb_normalized(&dataset.images_dir.join("s0.png"), 32, 32, None).unwrap();
    let labels = predict_labels(&model, &image).unwrap();
    let truth = Array2::<u8>::zeros((32, 32));
    let agree = labels
        .iter()
        .zip(truth.iter())
        .filter(|(a, b)| a == b)
        .count();
    assert!(
        agree as f64 / 1024.0 >= 0.95,
        "prediction agreement {agree}/1024"
    );

    // The palette covers the classes; a rendered overlay is well formed.
    let palette = default_palette(&names);
    let photo = image.mapv(|v| (v * 255.0).round() as u8);
    let blended = semseg::inference::overlay(photo.view(), labels.view(), &palette, 0.5).unwrap();
    assert_eq!(blended.dim(), (32, 32, 3));
}
