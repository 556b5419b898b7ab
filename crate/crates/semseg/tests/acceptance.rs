//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (run with `--nocapture` to see them). Heavy cases share a
//! lock so wall-clock budgets are measured without core contention.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};

use semseg::backend::Graph;
use semseg::cli::RunConfig;
use semseg::dataio::DatasetConfig;
use semseg::metrics::{build_report, ConfusionMatrix};
use semseg::models::{DecoderKind, EncoderKind, ModelSpec, SegmentationModel};
use semseg::persistence::{load_checkpoint, save_checkpoint};
use semseg::training::{train, TrainConfig};

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_lock() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn rand_grid(rng: &mut impl Rng, h: usize, w: usize, k: u8) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |_| rng.gen_range(0..k))
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = rand::rngs::StdRng::seed_from_u64(1001);
    let ks = [2u8, 8, 12];
    for case in 0..1000usize {
        let k = ks[case % ks.len()];
        let truth = rand_grid(&mut rng, 32, 32, k);
        let pred = rand_grid(&mut rng, 32, 32, k);
        let mut cm = ConfusionMatrix::new(k as usize);
        cm.accumulate(pred.view(), truth.view()).unwrap();
        for c in 0..k {
            let inter = pred
                .iter()
                .zip(truth.iter())
                .filter(|(&p, &t)| p == c && t == c)
                .count() as u64;
            let union = pred
                .iter()
                .zip(truth.iter())
                .filter(|(&p, &t)| p == c || t == c)
                .count() as u64;
            let (tp, un) = cm.class_counts(c as usize);
            assert_eq!((tp, un), (inter, union), "case {case} class {c}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "oracle sweep took {secs:.1}s, budget 30s");
    println!("criterion 1 PASS: 1000 grid pairs, confusion-matrix IoU == pixel-set IoU exactly ({secs:.1}s)");
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_hand_checked_metric_values() {
    let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
    let iou = cm.iou_per_class();
    assert!((iou[0].unwrap() - 0.5).abs() < 1e-9);
    assert!((iou[1].unwrap() - 0.571428571428571).abs() < 1e-9);
    assert!((cm.mean_iou().unwrap() - 0.535714285714286).abs() < 1e-9);
    assert!((cm.frequency_weighted_iou().unwrap() - 0.542857142857143).abs() < 1e-9);
    assert!((cm.pixel_accuracy().unwrap() - 0.70).abs() < 1e-9);
    println!("criterion 2 PASS: cm=[[3,1],[2,4]] metrics match hand-derived values within 1e-9");
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_shape_contract_sweep() {
    let _guard = heavy_lock();
    let start = Instant::now();
    let encoders = [
        EncoderKind::Plain,
        EncoderKind::Vgg,
        EncoderKind::Resnet50,
        EncoderKind::Mobilenet,
    ];
    let decoders = [
        DecoderKind::Segnet,
        DecoderKind::Unet,
        DecoderKind::Fcn32,
        DecoderKind::Fcn8,
        DecoderKind::Pspnet,
    ];
    let mut runs = 0usize;
    for &hw in &[96usize, 192] {
        for &k in &[2usize, 12] {
            for &enc in &encoders {
                for &dec in &decoders {
                    let spec = ModelSpec::new(enc, dec, k, hw, hw);
                    let model = SegmentationModel::new(spec, 0).unwrap();
                    let mut rng = rand::rngs::StdRng::seed_from_u64(runs as u64);
                    let x = Array4::from_shape_fn((1, 3, hw, hw), |_| rng.gen_range(0.0..1.0f32));
                    let out = model.forward(&x).unwrap();
                    assert_eq!(out.dim(), (1, k, hw, hw), "{enc}-{dec}@{hw} k={k}");
                    let mut worst = 0.0f32;
                    for y in 0..hw {
                        for xx in 0..hw {
                            let mut s = 0.0f32;
                            let mut finite = true;
                            for c in 0..k {
                                let v = out[[0, c, y, xx]];
                                finite &= v.is_finite();
                                s += v;
                            }
                            assert!(finite, "{enc}-{dec}@{hw}: non-finite output");
                            worst = worst.max((s - 1.0).abs());
                        }
                    }
                    assert!(
                        worst <= 1e-5,
                        "{enc}-{dec}@{hw} k={k}: pixel sum deviates by {worst}"
                    );
                    runs += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(runs, 80);
    assert!(secs < 300.0, "sweep took {secs:.1}s, budget 300s");
    println!("criterion 3 PASS: {runs} encoder x decoder x size x class combinations, pixel sums within 1e-5 ({secs:.1}s)");
}

// ---------------------------------------------------------------- 4

fn solid_color_dataset(dir: &Path, size: u32) -> DatasetConfig {
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
fn criterion_4_overfit_convergence() {
    let _guard = heavy_lock();
    let tmp = tempfile::tempdir().unwrap();
    let dataset = solid_color_dataset(tmp.path(), 96);
    let configs = [
        (EncoderKind::Plain, DecoderKind::Segnet),
        (EncoderKind::Plain, DecoderKind::Unet),
        (EncoderKind::Mobilenet, DecoderKind::Unet),
        (EncoderKind::Plain, DecoderKind::Fcn8),
        (EncoderKind::Plain, DecoderKind::Pspnet),
    ];
    for (enc, dec) in configs {
        let started = Instant::now();
        let tc = TrainConfig {
            epochs: 300,
            batch_size: 4,
            checkpoint_dir: tmp.path().join(format!("ckpt_{enc}_{dec}")),
            stop_at_train_accuracy: Some(0.95),
            ..TrainConfig::default()
        };
        let spec = ModelSpec::new(enc, dec, 3, 96, 96);
        let (_, history) = train(spec, &dataset, &tc, None).unwrap();
        let secs = started.elapsed().as_secs_f64();
        let best = history
            .records
            .iter()
            .map(|r| r.train_pixel_accuracy)
            .fold(0.0, f64::max);
        assert!(
            best >= 0.95,
            "{enc}-{dec}: best accuracy {best:.4} after {} epochs",
            history.records.len()
        );
        assert!(history.records.len() <= 300);
        assert!(secs < 600.0, "{enc}-{dec}: took {secs:.1}s, budget 600s");
        println!(
            "criterion 4 PASS: {enc}-{dec} memorized 4 images to {best:.3} accuracy in {} epochs ({secs:.1}s)",
            history.records.len()
        );
    }
}

// ---------------------------------------------------------------- 5

/// Independent f64 oracle: mean softmax cross-entropy over an NCHW score
/// volume, fully recomputed per evaluation.
fn ce_f64(scores: &[f64], labels: &[usize], n: usize, k: usize, plane: usize) -> f64 {
    let mut total = 0.0;
    for ni in 0..n {
        for j in 0..plane {
            let at = |c: usize| scores[(ni * k + c) * plane + j];
            let maxv = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..k).map(|c| (at(c) - maxv).exp()).sum();
            let t = labels[ni * plane + j];
            let p = (at(t) - maxv).exp() / denom;
            total += -p.ln();
        }
    }
    total / (n * plane) as f64
}

#[test]
fn criterion_5_gradient_matches_finite_differences() {
    let (n, k, h, w) = (2usize, 3usize, 4usize, 4usize);
    let plane = h * w;
    let mut rng = rand::rngs::StdRng::seed_from_u64(55);
    let scores_f32 = Array4::from_shape_fn((n, k, h, w), |_| rng.gen_range(-2.0..2.0f32));
    let labels = Array3::from_shape_fn((n, h, w), |_| rng.gen_range(0..k as u8));

    // Analytic gradient through the production softmax + loss path.
    let mut g = Graph::new();
    let s = g.leaf4(scores_f32.clone(), true);
    let p = g.softmax_channels(s);
    let loss = g
        .nll_from_probs(
            p,
            labels.clone(),
            semseg::backend::NllConf {
                eps: 1e-7,
                class_weights: None,
                ignore_label: None,
            },
        )
        .unwrap();
    let mut grads = g.backward(loss);
    let analytic = grads.take(s).unwrap();
    let analytic = analytic.as_slice().unwrap();

    let scores: Vec<f64> = scores_f32.iter().map(|&v| v as f64).collect();
    let labels_flat: Vec<usize> = labels.iter().map(|&v| v as usize).collect();
    let h_step = 1e-4f64;
    let mut max_rel = 0.0f64;
    for i in 0..scores.len() {
        let mut plus = scores.clone();
        plus[i] += h_step;
        let mut minus = scores.clone();
        minus[i] -= h_step;
        let fd = (ce_f64(&plus, &labels_flat, n, k, plane)
            - ce_f64(&minus, &labels_flat, n, k, plane))
            / (2.0 * h_step);
        let a = analytic[i] as f64;
        let rel = (a - fd).abs() / fd.abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    assert!(max_rel <= 1e-3, "max relative gradient error {max_rel:.2e}");
    println!("criterion 5 PASS: softmax cross-entropy gradient vs central differences, max relative error {max_rel:.2e}");
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let spec = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 3, 32, 32);
    let model = SegmentationModel::new(spec, 21).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path, Some(model.spec())).unwrap();
    let x = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, y, xx)| {
        ((c + y + xx) % 9) as f32 / 9.0
    });
    let a = model.forward(&x).unwrap();
    let b = loaded.forward(&x).unwrap();
    assert_eq!(a, b, "forward after round trip must be bitwise identical");

    let mut bytes = std::fs::read(&path).unwrap();
    let idx = bytes.len() - 150;
    bytes[idx] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path, None).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    println!("criterion 6 PASS: save/load forward bitwise identical; single corrupted byte fails the checksum");
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_merge_is_a_commutative_monoid() {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};

    let trio = (2usize..6).prop_flat_map(|k| {
        let counts = || proptest::collection::vec(0u64..1000, k * k);
        (Just(k), counts(), counts(), counts())
    });
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&trio, |(k, a, b, c)| {
            let a = ConfusionMatrix::from_counts(k, a).unwrap();
            let b = ConfusionMatrix::from_counts(k, b).unwrap();
            let c = ConfusionMatrix::from_counts(k, c).unwrap();
            let zero = ConfusionMatrix::new(k);
            prop_assert_eq!(a.merge(&zero).unwrap(), a.clone());
            prop_assert_eq!(zero.merge(&a).unwrap(), a.clone());
            prop_assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
            prop_assert_eq!(
                a.merge(&b).unwrap().merge(&c).unwrap(),
                a.merge(&b.merge(&c).unwrap()).unwrap()
            );
            Ok(())
        })
        .unwrap();
    println!("criterion 7 PASS: merge commutativity/associativity/identity over 256 randomized cases, exact equality");
}

// ---------------------------------------------------------------- 8

fn profile_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn criterion_8_report_format_conformance() {
    let cases = [
        ("camvid.json", 12usize, "misc"),
        ("sitting.json", 15, "L f"),
        ("suim.json", 8, "Floor"),
    ];
    for (file, k, last_name) in cases {
        let cfg = RunConfig::load(&profile_path(file)).unwrap();
        let names = cfg.class_names.clone().expect("profile carries class names");
        assert_eq!(names.len(), k, "{file}");
        assert_eq!(cfg.n_classes, Some(k), "{file}");
        assert_eq!(names.last().unwrap(), last_name);

        // Synthetic confusion matrix with every class present.
        let mut counts = vec![0u64; k * k];
        for c in 0..k {
            counts[c * k + c] = 50 + c as u64;
            counts[c * k + (c + 1) % k] = 5;
        }
        let cm = ConfusionMatrix::from_counts(k, counts).unwrap();
        let report = build_report(&cm, &names).unwrap();
        assert_eq!(report.per_class_iou.len(), k);

        let table = report.render_table("probe");
        let header = table.lines().next().unwrap();
        let fiou_at = header.find("fIoU").expect("fIoU column present");
        assert!(header.find("mIoU").unwrap() < fiou_at);
        // Class columns follow fIoU in table order.
        let mut cursor = fiou_at;
        for name in &names {
            let at = header[cursor..]
                .find(name.as_str())
                .unwrap_or_else(|| panic!("{file}: column {name} missing or out of order"));
            cursor += at + name.len();
        }
        // Every metric cell rendered to exactly 2 decimals.
        let row = table.lines().nth(1).unwrap();
        let mut numbers = 0;
        for cell in row.split("  ").map(str::trim).filter(|c| !c.is_empty()) {
            if cell == "probe" {
                continue;
            }
            assert!(
                cell.len() >= 4 && cell.contains('.') && cell.split('.').nth(1).unwrap().len() == 2,
                "{file}: cell {cell:?} not rendered to 2 decimals"
            );
            numbers += 1;
        }
        assert_eq!(numbers, k + 2, "{file}: mIoU, fIoU and {k} class columns");
    }
    println!("criterion 8 PASS: CamVid/sitting/SUIM reports carry 12/15/8 class columns after mIoU and fIoU, 2-decimal rendering");
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_verifier_catches_planted_defects() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    let annotations = tmp.path().join("annotations");
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&annotations).unwrap();
    for stem in ["a", "b", "c"] {
        RgbImage::from_pixel(16, 16, image::Rgb([10, 20, 30]))
            .save(images.join(format!("{stem}.png")))
            .unwrap();
        GrayImage::from_pixel(16, 16, image::Luma([1]))
            .save(annotations.join(format!("{stem}.png")))
            .unwrap();
    }
    // Planted defect 1: label 7 with n_classes = 4.
    RgbImage::from_pixel(16, 16, image::Rgb([1, 1, 1]))
        .save(images.join("bad_label.png"))
        .unwrap();
    GrayImage::from_pixel(16, 16, image::Luma([7]))
        .save(annotations.join("bad_label.png"))
        .unwrap();
    // Planted defect 2: image with no matching annotation.
    RgbImage::from_pixel(16, 16, image::Rgb([2, 2, 2]))
        .save(images.join("orphan.png"))
        .unwrap();

    let out = tmp.path().join("out");
    let output = std::process::Command::new(env!("CARGO_BIN_EXE_semseg"))
        .args([
            "--out",
            out.to_str().unwrap(),
            "verify",
            "--images-dir",
            images.to_str().unwrap(),
            "--annotations-dir",
            annotations.to_str().unwrap(),
            "--n-classes",
            "4",
            "--input-height",
            "32",
            "--input-width",
            "32",
        ])
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(1), "defects must exit 1");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("bad_label"), "out-of-range file named:\n{stdout}");
    assert!(stdout.contains("orphan"), "unpaired file named:\n{stdout}");
    let report_file = std::fs::read_to_string(out.join("verify.txt")).unwrap();
    assert!(report_file.contains("bad_label") && report_file.contains("orphan"));
    println!("criterion 9 PASS: planted out-of-range label and unpaired image exit 1 and are both named");
}
