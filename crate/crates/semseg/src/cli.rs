//! Command-line surface: `verify`, `train`, `evaluate`, `predict`.
//!
//! Every command is driven by one flat JSON config file; command-line
//! flags mirror the config keys and override them. The effective merged
//! config is echoed to the output directory so a run is reproducible from
//! its artifacts alone.
//!
//! Exit codes: 0 success, 1 data defects, 2 configuration error,
//! 3 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backend::OptimizerKind;
use crate::dataio::{load_rgb_normalized, verify_dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::inference::{
    colorize, default_palette, numbered_class_names, overlay, predict_labels, save_labels,
    save_rgb, ClassPalette,
};
use crate::models::{DecoderKind, EncoderKind, ModelSpec, SegmentationModel};
use crate::persistence::{
    load_checkpoint, load_checkpoint_with_map, load_optimizer_state, NameMap,
};
use crate::training::{evaluate_split, train, train_resume, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Flat run configuration. Doubles as the JSON config schema and the
/// command-line override set; flags are sugar over config keys.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // dataset
    #[arg(long)]
    pub images_dir: Option<PathBuf>,
    #[arg(long)]
    pub annotations_dir: Option<PathBuf>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub input_height: Option<usize>,
    #[arg(long)]
    pub input_width: Option<usize>,
    #[arg(long)]
    pub output_height: Option<usize>,
    #[arg(long)]
    pub output_width: Option<usize>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub channel_mean: Option<Vec<f32>>,
    #[arg(long, value_delimiter = ',')]
    pub channel_std: Option<Vec<f32>>,

    // model
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderArg>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderArg>,
    #[arg(long)]
    pub pretrained_source: Option<String>,

    // training
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long)]
    pub beta1: Option<f32>,
    #[arg(long)]
    pub beta2: Option<f32>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub class_weights: Option<Vec<f32>>,
    #[arg(long)]
    pub ignore_label: Option<u8>,
    #[arg(long)]
    pub stop_at_train_accuracy: Option<f64>,
    #[arg(long)]
    pub keep_all_checkpoints: Option<bool>,

    // presentation
    #[arg(long, value_delimiter = ',')]
    pub class_names: Option<Vec<String>>,
    #[arg(long)]
    pub palette: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f32>,
}

// clap's ValueEnum and the model enums are kept separate so the config
// file schema stays serde-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderArg {
    Plain,
    Vgg,
    Resnet50,
    Mobilenet,
}

impl From<EncoderArg> for EncoderKind {
    fn from(value: EncoderArg) -> Self {
        match value {
            EncoderArg::Plain => EncoderKind::Plain,
            EncoderArg::Vgg => EncoderKind::Vgg,
            EncoderArg::Resnet50 => EncoderKind::Resnet50,
            EncoderArg::Mobilenet => EncoderKind::Mobilenet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderArg {
    Segnet,
    Unet,
    Fcn32,
    Fcn8,
    Pspnet,
}

impl From<DecoderArg> for DecoderKind {
    fn from(value: DecoderArg) -> Self {
        match value {
            DecoderArg::Segnet => DecoderKind::Segnet,
            DecoderArg::Unet => DecoderKind::Unet,
            DecoderArg::Fcn32 => DecoderKind::Fcn32,
            DecoderArg::Fcn8 => DecoderKind::Fcn8,
            DecoderArg::Pspnet => DecoderKind::Pspnet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerArg {
    SgdMomentum,
    AdaptiveMoment,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(value: OptimizerArg) -> Self {
        match value {
            OptimizerArg::SgdMomentum => OptimizerKind::SgdMomentum,
            OptimizerArg::AdaptiveMoment => OptimizerKind::AdaptiveMoment,
        }
    }
}

macro_rules! merge_fields {
    ($base:expr, $over:expr, [$($field:ident),+ $(,)?]) => {
        $(if $over.$field.is_some() {
            $base.$field = $over.$field.clone();
        })+
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))
    }

    /// Overlay command-line overrides; explicit flags win.
    pub fn merged_with(mut self, over: &RunConfig) -> RunConfig {
        merge_fields!(
            self,
            over,
            [
                images_dir,
                annotations_dir,
                n_classes,
                input_height,
                input_width,
                output_height,
                output_width,
                shuffle_seed,
                channel_mean,
                channel_std,
                encoder,
                decoder,
                pretrained_source,
                epochs,
                batch_size,
                learning_rate,
                optimizer,
                momentum,
                beta1,
                beta2,
                validation_fraction,
                seed,
                checkpoint_dir,
                class_weights,
                ignore_label,
                stop_at_train_accuracy,
                keep_all_checkpoints,
                class_names,
                palette,
                alpha,
            ]
        );
        self
    }

    fn require<T: Clone>(value: &Option<T>, key: &str) -> Result<T> {
        value
            .clone()
            .ok_or_else(|| Error::config(format!("missing required config key `{key}`")))
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        let input_height = self.input_height.unwrap_or(96);
        let input_width = self.input_width.unwrap_or(96);
        let channel_mean_std = match (&self.channel_mean, &self.channel_std) {
            (None, None) => None,
            (Some(m), Some(s)) => {
                let (m, s) = (as_rgb_triple(m, "channel_mean")?, as_rgb_triple(s, "channel_std")?);
                Some((m, s))
            }
            _ => {
                return Err(Error::config(
                    "channel_mean and channel_std must be given together",
                ))
            }
        };
        let config = DatasetConfig {
            images_dir: Self::require(&self.images_dir, "images_dir")?,
            annotations_dir: Self::require(&self.annotations_dir, "annotations_dir")?,
            n_classes: Self::require(&self.n_classes, "n_classes")?,
            input_height,
            input_width,
            output_height: self.output_height.unwrap_or(input_height),
            output_width: self.output_width.unwrap_or(input_width),
            shuffle_seed: self.shuffle_seed.unwrap_or(0),
            channel_mean_std,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let encoder = Self::require(&self.encoder, "encoder")?;
        let decoder = Self::require(&self.decoder, "decoder")?;
        let input_height = self.input_height.unwrap_or(96);
        let input_width = self.input_width.unwrap_or(96);
        let mut spec = ModelSpec::new(
            encoder.into(),
            decoder.into(),
            Self::require(&self.n_classes, "n_classes")?,
            input_height,
            input_width,
        );
        spec.pretrained_source = self.pretrained_source.clone();
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self, out_dir: &Path) -> Result<TrainConfig> {
        let defaults = TrainConfig::default();
        let tc = TrainConfig {
            epochs: self.epochs.unwrap_or(defaults.epochs),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            learning_rate: self.learning_rate.unwrap_or(defaults.learning_rate),
            optimizer: self
                .optimizer
                .map(Into::into)
                .unwrap_or(defaults.optimizer),
            momentum: self.momentum.unwrap_or(defaults.momentum),
            beta1: self.beta1.unwrap_or(defaults.beta1),
            beta2: self.beta2.unwrap_or(defaults.beta2),
            checkpoint_dir: self
                .checkpoint_dir
                .clone()
                .unwrap_or_else(|| out_dir.join("checkpoints")),
            seed: self.seed.unwrap_or(defaults.seed),
            validation_fraction: self
                .validation_fraction
                .unwrap_or(defaults.validation_fraction),
            class_weights: self.class_weights.clone(),
            ignore_label: self.ignore_label,
            stop_at_train_accuracy: self.stop_at_train_accuracy,
            keep_all_checkpoints: self.keep_all_checkpoints.unwrap_or(false),
        };
        tc.validate()?;
        Ok(tc)
    }

    /// Display names: explicit class_names, else palette names, else
    /// numbered.
    pub fn resolve_names(&self, n_classes: usize, palette: Option<&ClassPalette>) -> Result<Vec<String>> {
        let names = match (&self.class_names, palette) {
            (Some(names), _) => names.clone(),
            (None, Some(p)) => p.names(),
            (None, None) => numbered_class_names(n_classes),
        };
        if names.len() != n_classes {
            return Err(Error::config(format!(
                "{} class names for {} classes",
                names.len(),
                n_classes
            )));
        }
        Ok(names)
    }

    pub fn resolve_palette(&self, n_classes: usize) -> Result<ClassPalette> {
        let palette = match &self.palette {
            Some(path) => ClassPalette::load(path)?,
            None => {
                let names = match &self.class_names {
                    Some(n) => n.clone(),
                    None => numbered_class_names(n_classes),
                };
                default_palette(&names)
            }
        };
        if palette.len() != n_classes {
            return Err(Error::config(format!(
                "palette has {} entries for {} classes",
                palette.len(),
                n_classes
            )));
        }
        Ok(palette)
    }
}

fn as_rgb_triple(v: &[f32], key: &str) -> Result<[f32; 3]> {
    <[f32; 3]>::try_from(v.to_vec())
        .map_err(|_| Error::config(format!("{key} must have exactly 3 values")))
}

#[derive(Debug, Parser)]
#[command(
    name = "semseg",
    about = "Encoder-decoder semantic segmentation: dataset checks, training, IoU evaluation, overlays",
    version
)]
pub struct Cli {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root directory for all artifacts.
    #[arg(long, global = true, default_value = "semseg_out")]
    pub out: PathBuf,
    /// Suppress per-epoch and per-file progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan the dataset and report pairing, label-range and decoding
    /// defects.
    Verify {
        #[command(flatten)]
        overrides: RunConfig,
    },
    /// Train a model; writes per-epoch checkpoints, a best checkpoint and
    /// history.jsonl.
    Train {
        /// Continue from a checkpoint (its .optim sidecar is picked up
        /// automatically).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Skip the dataset verification that normally precedes training.
        #[arg(long)]
        skip_verify: bool,
        /// Foreign-to-canonical parameter name table for imported weights.
        #[arg(long)]
        name_map: Option<PathBuf>,
        #[command(flatten)]
        overrides: RunConfig,
    },
    /// Evaluate a checkpoint: per-class IoU, mIoU, fIoU, pixel accuracy.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        name_map: Option<PathBuf>,
        #[command(flatten)]
        overrides: RunConfig,
    },
    /// Predict label maps and overlays for image files.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        name_map: Option<PathBuf>,
        /// Input image files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        overrides: RunConfig,
    },
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path too.
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err((code, err)) => {
            eprintln!("error: {err}");
            code
        }
    }
}

type CmdResult = std::result::Result<i32, (i32, Error)>;

fn config_err(e: Error) -> (i32, Error) {
    (EXIT_CONFIG, e)
}

/// Map library errors onto the exit-code contract for command bodies.
fn classify(e: Error) -> (i32, Error) {
    let code = match &e {
        Error::Config(_) | Error::Checkpoint(_) => EXIT_CONFIG,
        Error::Data { .. } => EXIT_DATA,
        _ => EXIT_RUNTIME,
    };
    (code, e)
}

fn dispatch(cli: Cli) -> CmdResult {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(config_err)?,
        None => RunConfig::default(),
    };
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| config_err(Error::io(&cli.out, e)))?;
    match &cli.command {
        Command::Verify { overrides } => {
            let cfg = base.merged_with(overrides);
            echo_config(&cfg, &cli.out)?;
            cmd_verify(&cfg, &cli.out, cli.quiet)
        }
        Command::Train {
            resume,
            skip_verify,
            name_map,
            overrides,
        } => {
            let cfg = base.merged_with(overrides);
            echo_config(&cfg, &cli.out)?;
            cmd_train(
                &cfg,
                &cli.out,
                cli.quiet,
                resume.as_deref(),
                *skip_verify,
                name_map.as_deref(),
            )
        }
        Command::Evaluate {
            checkpoint,
            name_map,
            overrides,
        } => {
            let cfg = base.merged_with(overrides);
            echo_config(&cfg, &cli.out)?;
            cmd_evaluate(&cfg, &cli.out, cli.quiet, checkpoint, name_map.as_deref())
        }
        Command::Predict {
            checkpoint,
            name_map,
            inputs,
            overrides,
        } => {
            let cfg = base.merged_with(overrides);
            echo_config(&cfg, &cli.out)?;
            cmd_predict(
                &cfg,
                &cli.out,
                cli.quiet,
                checkpoint,
                name_map.as_deref(),
                inputs,
            )
        }
    }
}

fn echo_config(cfg: &RunConfig, out: &Path) -> std::result::Result<(), (i32, Error)> {
    let path = out.join("config.json");
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&path, json).map_err(|e| config_err(Error::io(&path, e)))
}

fn cmd_verify(cfg: &RunConfig, out: &Path, quiet: bool) -> CmdResult {
    let dataset = cfg.dataset_config().map_err(config_err)?;
    let report = verify_dataset(&dataset).map_err(classify)?;
    let text = report.render_text();
    let path = out.join("verify.txt");
    std::fs::write(&path, &text).map_err(|e| classify(Error::io(&path, e)))?;
    if !quiet {
        print!("{text}");
    }
    Ok(if report.has_defects() { EXIT_DATA } else { EXIT_OK })
}

fn load_model_for(
    checkpoint: &Path,
    name_map: Option<&Path>,
    expected: Option<&ModelSpec>,
) -> std::result::Result<SegmentationModel, (i32, Error)> {
    // Anything wrong with the checkpoint or its path is a configuration
    // problem per the exit-code contract.
    let model = match name_map {
        Some(map_path) => {
            let map = NameMap::load(map_path).map_err(config_err)?;
            load_checkpoint_with_map(checkpoint, &map, expected)
        }
        None => load_checkpoint(checkpoint, expected),
    };
    model.map_err(config_err)
}

fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    quiet: bool,
    resume: Option<&Path>,
    skip_verify: bool,
    name_map: Option<&Path>,
) -> CmdResult {
    let dataset = cfg.dataset_config().map_err(config_err)?;
    let spec = cfg.model_spec().map_err(config_err)?;
    let tc = cfg.train_config(out).map_err(config_err)?;

    if !skip_verify {
        let report = verify_dataset(&dataset).map_err(classify)?;
        if report.has_defects() {
            let text = report.render_text();
            eprint!("{text}");
            return Err((
                EXIT_DATA,
                Error::data(&dataset.images_dir, "dataset verification found defects"),
            ));
        }
    }

    let mut printer = |r: &crate::training::EpochRecord| {
        if !quiet {
            let val = r
                .val_miou
                .map(|v| format!(" val_miou {v:.4}"))
                .unwrap_or_default();
            println!(
                "epoch {:>3}  loss {:.5}  acc {:.4}{}  ({} steps, {:.1}s)",
                r.epoch + 1,
                r.mean_loss,
                r.train_pixel_accuracy,
                val,
                r.steps,
                r.wall_secs
            );
        }
    };

    let result = match resume {
        Some(ckpt_path) => {
            let model = load_model_for(ckpt_path, name_map, Some(&spec))?;
            let sidecar = ckpt_path.with_extension("optim");
            let (optimizer, next_epoch) = if sidecar.is_file() {
                load_optimizer_state(&sidecar).map_err(config_err)?
            } else {
                (tc.build_optimizer(), 0)
            };
            train_resume(model, optimizer, next_epoch, &dataset, &tc, Some(&mut printer))
        }
        None => train(spec, &dataset, &tc, Some(&mut printer)),
    };
    let (_, history) = result.map_err(classify)?;
    if !quiet {
        println!(
            "trained {} epochs; checkpoints in {}",
            history.records.len(),
            tc.checkpoint_dir.display()
        );
    }
    Ok(EXIT_OK)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    out: &Path,
    quiet: bool,
    checkpoint: &Path,
    name_map: Option<&Path>,
) -> CmdResult {
    let dataset = cfg.dataset_config().map_err(config_err)?;
    let model = load_model_for(checkpoint, name_map, None)?;
    if model.spec().n_classes != dataset.n_classes {
        return Err(config_err(Error::config(format!(
            "checkpoint has {} classes but the dataset declares {}",
            model.spec().n_classes,
            dataset.n_classes
        ))));
    }
    let names = cfg
        .resolve_names(dataset.n_classes, None)
        .map_err(config_err)?;
    let report = evaluate_split(&model, &dataset, Some(&names)).map_err(classify)?;
    let table = report.render_table(&model.spec().method_label());
    let txt_path = out.join("report.txt");
    std::fs::write(&txt_path, &table).map_err(|e| classify(Error::io(&txt_path, e)))?;
    let json_path = out.join("report.json");
    std::fs::write(&json_path, report.to_json()).map_err(|e| classify(Error::io(&json_path, e)))?;
    if !quiet {
        print!("{table}");
    }
    Ok(EXIT_OK)
}

fn cmd_predict(
    cfg: &RunConfig,
    out: &Path,
    quiet: bool,
    checkpoint: &Path,
    name_map: Option<&Path>,
    inputs: &[PathBuf],
) -> CmdResult {
    let model = load_model_for(checkpoint, name_map, None)?;
    let k = model.spec().n_classes;
    let palette = cfg.resolve_palette(k).map_err(config_err)?;
    let alpha = cfg.alpha.unwrap_or(0.5);
    let (h, w) = (model.spec().input_height, model.spec().input_width);
    let channel_mean_std = match (&cfg.channel_mean, &cfg.channel_std) {
        (Some(m), Some(s)) => Some((
            as_rgb_triple(m, "channel_mean").map_err(config_err)?,
            as_rgb_triple(s, "channel_std").map_err(config_err)?,
        )),
        _ => None,
    };

    let mut failures = 0usize;
    for input in inputs {
        let outcome = (|| -> Result<()> {
            let image = load_rgb_normalized(input, h, w, channel_mean_std.as_ref())?;
            let labels = predict_labels(&model, &image)?;
            // Overlay over the resized (but unnormalized) photograph.
            let display = load_rgb_normalized(input, h, w, None)?;
            let display_u8 = display.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
            let blended = overlay(display_u8.view(), labels.view(), &palette, alpha)?;
            let stem = input
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("input");
            save_labels(&out.join(format!("{stem}.labels.png")), &labels)?;
            save_rgb(&out.join(format!("{stem}.overlay.png")), &blended)?;
            let _ = colorize(labels.view(), &palette)?;
            Ok(())
        })();
        match outcome {
            Ok(()) => {
                if !quiet {
                    println!("{} -> ok", input.display());
                }
            }
            Err(e) => {
                eprintln!("{} -> {e}", input.display());
                failures += 1;
            }
        }
    }
    Ok(if failures > 0 { EXIT_DATA } else { EXIT_OK })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_file_values() {
        let file = RunConfig {
            n_classes: Some(8),
            epochs: Some(5),
            ..RunConfig::default()
        };
        let over = RunConfig {
            epochs: Some(9),
            ..RunConfig::default()
        };
        let merged = file.merged_with(&over);
        assert_eq!(merged.n_classes, Some(8));
        assert_eq!(merged.epochs, Some(9));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"n_classes": 3, "typo_key": 1}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn dataset_config_requires_core_keys() {
        let cfg = RunConfig::default();
        assert!(matches!(cfg.dataset_config(), Err(Error::Config(_))));
    }

    #[test]
    fn model_spec_resolution_defaults_dims() {
        let cfg = RunConfig {
            encoder: Some(EncoderArg::Plain),
            decoder: Some(DecoderArg::Unet),
            n_classes: Some(3),
            ..RunConfig::default()
        };
        let spec = cfg.model_spec().unwrap();
        assert_eq!((spec.input_height, spec.input_width), (96, 96));
        assert_eq!(spec.n_classes, 3);
    }

    #[test]
    fn epochs_zero_is_a_config_error() {
        let cfg = RunConfig {
            epochs: Some(0),
            ..RunConfig::default()
        };
        assert!(cfg.train_config(Path::new("out")).is_err());
    }

    #[test]
    fn palette_and_names_length_validation() {
        let cfg = RunConfig {
            class_names: Some(vec!["a".into(), "b".into()]),
            ..RunConfig::default()
        };
        assert!(cfg.resolve_names(3, None).is_err());
        assert_eq!(cfg.resolve_names(2, None).unwrap(), vec!["a", "b"]);
        let palette = cfg.resolve_palette(2).unwrap();
        assert_eq!(palette.len(), 2);
        assert!(cfg.resolve_palette(3).is_err());
    }
}
