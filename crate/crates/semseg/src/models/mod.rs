//! Segmentation model zoo: encoder feature pyramids assembled with
//! decoders into per-pixel class-distribution networks.
//!
//! Every network is fully convolutional. Forward output is `[n, k, h, w]`
//! with a softmax over the class axis at every pixel; decoders that work at
//! a coarser native stride bilinearly resize the distribution map up to the
//! input resolution.

mod decoders;
mod encoders;

pub use encoders::encoder_channels;

use ndarray::{Array1, Array3, Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::backend::{ConvConf, Graph, Init, ParamStore, PoolConf, VarId};
use crate::error::{Error, Result};

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Plain,
    Vgg,
    Resnet50,
    Mobilenet,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EncoderKind::Plain => "plain",
            EncoderKind::Vgg => "vgg",
            EncoderKind::Resnet50 => "resnet50",
            EncoderKind::Mobilenet => "mobilenet",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Segnet,
    Unet,
    Fcn32,
    Fcn8,
    Pspnet,
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DecoderKind::Segnet => "segnet",
            DecoderKind::Unet => "unet",
            DecoderKind::Fcn32 => "fcn32",
            DecoderKind::Fcn8 => "fcn8",
            DecoderKind::Pspnet => "pspnet",
        };
        f.write_str(s)
    }
}

impl DecoderKind {
    /// Output stride of the decoder before the final distribution resize.
    pub fn native_stride(&self) -> usize {
        match self {
            DecoderKind::Pspnet => 8,
            _ => 1,
        }
    }

    /// How many encoder stages the decoder consumes (pyramid taps at
    /// strides 2..2^depth).
    fn encoder_depth(&self) -> usize {
        match self {
            DecoderKind::Pspnet => 3,
            _ => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub n_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub native_stride: usize,
    #[serde(default)]
    pub pretrained_source: Option<String>,
}

impl ModelSpec {
    pub fn new(
        encoder: EncoderKind,
        decoder: DecoderKind,
        n_classes: usize,
        input_height: usize,
        input_width: usize,
    ) -> Self {
        ModelSpec {
            encoder,
            decoder,
            n_classes,
            input_height,
            input_width,
            native_stride: decoder.native_stride(),
            pretrained_source: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be positive"));
        }
        if !self.input_height.is_multiple_of(32) || !self.input_width.is_multiple_of(32) {
            return Err(Error::config(format!(
                "input dims {}x{} must be divisible by 32",
                self.input_height, self.input_width
            )));
        }
        if self.decoder == DecoderKind::Pspnet
            && (!self.input_height.is_multiple_of(48) || !self.input_width.is_multiple_of(48))
        {
            return Err(Error::config(format!(
                "pspnet input dims {}x{} must be divisible by 48 so every pooling bin divides the stride-8 feature",
                self.input_height, self.input_width
            )));
        }
        if self.native_stride != self.decoder.native_stride() {
            return Err(Error::config(format!(
                "native_stride {} inconsistent with decoder {} (expected {})",
                self.native_stride,
                self.decoder,
                self.decoder.native_stride()
            )));
        }
        Ok(())
    }

    /// Name of the first field differing from `other`, ignoring
    /// `pretrained_source`. Used for checkpoint spec matching.
    pub fn field_mismatch(&self, other: &ModelSpec) -> Option<&'static str> {
        if self.encoder != other.encoder {
            return Some("encoder");
        }
        if self.decoder != other.decoder {
            return Some("decoder");
        }
        if self.n_classes != other.n_classes {
            return Some("n_classes");
        }
        if self.input_height != other.input_height {
            return Some("input_height");
        }
        if self.input_width != other.input_width {
            return Some("input_width");
        }
        if self.native_stride != other.native_stride {
            return Some("native_stride");
        }
        None
    }

    pub fn method_label(&self) -> String {
        format!("{}-{}", self.encoder, self.decoder)
    }
}

enum StoreRef<'p> {
    Read(&'p ParamStore),
    Mut(&'p mut ParamStore),
}

/// Graph-building context: resolves canonical parameter names
/// (`<stage>.<block>.<layer>.<kind>` paths), materializes parameters on
/// first use, and tracks trainable leaves for gradient extraction.
pub(crate) struct NetCtx<'g, 'p> {
    graph: &'g mut Graph,
    store: StoreRef<'p>,
    path: Vec<String>,
    training: bool,
    seed: u64,
    trainable: Vec<(String, VarId)>,
}

impl<'g, 'p> NetCtx<'g, 'p> {
    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.path.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub(crate) fn scope<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        self.path.push(name.to_string());
        let out = f(self);
        self.path.pop();
        out
    }

    pub(crate) fn graph(&mut self) -> &mut Graph {
        self.graph
    }

    fn ensure(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<ArrayD<f32>> {
        match &mut self.store {
            StoreRef::Mut(store) => Ok(store
                .get_or_create(name, shape, init, trainable, self.seed)?
                .value
                .clone()),
            StoreRef::Read(store) => {
                let entry = store.get(name).ok_or_else(|| {
                    Error::Runtime(format!("parameter {name} missing from model store"))
                })?;
                if entry.value.shape() != shape {
                    return Err(Error::shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        entry.value.shape(),
                        shape
                    )));
                }
                Ok(entry.value.clone())
            }
        }
    }

    /// Parameter as a graph leaf (trainable in training mode).
    fn param(&mut self, leaf: &str, shape: &[usize], init: Init, trainable: bool) -> Result<VarId> {
        let name = self.full_name(leaf);
        let value = self.ensure(&name, shape, init, trainable)?;
        let requires_grad = trainable && self.training;
        let id = self.graph.leaf_dyn(value, requires_grad)?;
        if requires_grad {
            self.trainable.push((name, id));
        }
        Ok(id)
    }

    /// Parameter value without a graph node (inference-mode batch norm).
    fn param_value(&mut self, leaf: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Array1<f32>> {
        let name = self.full_name(leaf);
        let v = self.ensure(&name, shape, init, trainable)?;
        Ok(v.into_dimensionality::<ndarray::Ix1>().expect("rank-1 parameter"))
    }

    pub(crate) fn conv(
        &mut self,
        name: &str,
        x: VarId,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<VarId> {
        let c_in = self.graph.dim4(x).1;
        let w = self.param(
            &format!("{name}.weight"),
            &[c_out, c_in, k, k],
            Init::FanInUniform { fan_in: c_in * k * k },
            true,
        )?;
        let b = self.param(&format!("{name}.bias"), &[c_out], Init::Zeros, true)?;
        self.graph.conv2d(x, w, b, ConvConf::square(k, stride))
    }

    pub(crate) fn depthwise(&mut self, name: &str, x: VarId, k: usize, stride: usize) -> Result<VarId> {
        let c = self.graph.dim4(x).1;
        let w = self.param(
            &format!("{name}.weight"),
            &[c, 1, k, k],
            Init::FanInUniform { fan_in: k * k },
            true,
        )?;
        let b = self.param(&format!("{name}.bias"), &[c], Init::Zeros, true)?;
        self.graph.depthwise_conv2d(x, w, b, ConvConf::square(k, stride))
    }

    pub(crate) fn batch_norm(&mut self, name: &str, x: VarId) -> Result<VarId> {
        let c = self.graph.dim4(x).1;
        let mean_name = self.full_name(&format!("{name}.running_mean"));
        let var_name = self.full_name(&format!("{name}.running_var"));
        self.ensure(&mean_name, &[c], Init::Zeros, false)?;
        self.ensure(&var_name, &[c], Init::Ones, false)?;
        if self.training {
            let gamma = self.param(&format!("{name}.gamma"), &[c], Init::Ones, true)?;
            let beta = self.param(&format!("{name}.beta"), &[c], Init::Zeros, true)?;
            let (y, mean, var) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS);
            let StoreRef::Mut(store) = &mut self.store else {
                return Err(Error::Runtime(
                    "training-mode forward requires mutable parameter access".into(),
                ));
            };
            for (stat_name, batch) in [(&mean_name, &mean), (&var_name, &var)] {
                let entry = store.get_mut(stat_name).expect("ensured above");
                entry.value.zip_mut_with(&batch.clone().into_dyn(), |r, &b| {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                });
            }
            Ok(y)
        } else {
            let gamma = self.param_value(&format!("{name}.gamma"), &[c], Init::Ones, true)?;
            let beta = self.param_value(&format!("{name}.beta"), &[c], Init::Zeros, true)?;
            let mean = self.param_value(&format!("{name}.running_mean"), &[c], Init::Zeros, false)?;
            let var = self.param_value(&format!("{name}.running_var"), &[c], Init::Ones, false)?;
            let scale = ndarray::Zip::from(&gamma)
                .and(&var)
                .map_collect(|&g, &v| g / (v + BN_EPS).sqrt());
            let shift = ndarray::Zip::from(&beta)
                .and(&mean)
                .and(&scale)
                .map_collect(|&b, &m, &s| b - m * s);
            Ok(self.graph.channel_affine(x, scale, shift))
        }
    }

    pub(crate) fn conv_bn_relu(
        &mut self,
        name: &str,
        x: VarId,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<VarId> {
        let x = self.conv(&format!("{name}.conv"), x, c_out, k, stride)?;
        let x = self.batch_norm(&format!("{name}.bn"), x)?;
        Ok(self.graph.relu(x))
    }

    pub(crate) fn maxpool(&mut self, x: VarId, k: usize, stride: usize, pad: usize) -> VarId {
        self.graph.maxpool(x, PoolConf { k, stride, pad })
    }
}

/// Live training-mode forward pass: the tape, the distribution node, and
/// the trainable leaves to pull gradients from.
pub type TrainingForward = (Graph, VarId, Vec<(String, VarId)>);

/// A fully assembled network: spec plus named parameters. Inference-mode
/// forward is pure; training steps take exclusive access.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    spec: ModelSpec,
    params: ParamStore,
    seed: u64,
}

impl SegmentationModel {
    /// Assemble the network for `spec`, materializing every parameter with
    /// seeded fan-in-scaled initialization.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut model = SegmentationModel {
            spec,
            params: ParamStore::new(),
            seed,
        };
        // One throwaway single-image pass materializes the full parameter
        // set and pins every shape.
        let dummy = Array4::zeros((1, 3, model.spec.input_height, model.spec.input_width));
        let mut graph = Graph::new();
        let mut ctx = NetCtx {
            graph: &mut graph,
            store: StoreRef::Mut(&mut model.params),
            path: Vec::new(),
            training: false,
            seed,
            trainable: Vec::new(),
        };
        let input = ctx.graph.leaf4(dummy, false);
        build_net(&mut ctx, &model.spec, input)?;
        Ok(model)
    }

    /// Rebuild from a spec plus an exact parameter set (checkpoint load).
    pub fn from_parts(spec: ModelSpec, params: ParamStore, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(SegmentationModel { spec, params, seed })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn set_pretrained_source(&mut self, source: Option<String>) {
        self.spec.pretrained_source = source;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Total scalar parameter count, batch-norm running statistics
    /// included.
    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    fn check_batch(&self, images: &Array4<f32>) -> Result<()> {
        let (n, c, h, w) = images.dim();
        if n == 0 || c != 3 || h != self.spec.input_height || w != self.spec.input_width {
            return Err(Error::shape(format!(
                "batch {:?} does not match model input (N,3,{},{})",
                images.dim(),
                self.spec.input_height,
                self.spec.input_width
            )));
        }
        Ok(())
    }

    /// Inference forward: per-pixel class distributions at input
    /// resolution, batch-norm on stored statistics. Deterministic and pure.
    pub fn forward(&self, images: &Array4<f32>) -> Result<Array4<f32>> {
        self.check_batch(images)?;
        let mut graph = Graph::new();
        let mut ctx = NetCtx {
            graph: &mut graph,
            store: StoreRef::Read(&self.params),
            path: Vec::new(),
            training: false,
            seed: self.seed,
            trainable: Vec::new(),
        };
        let input = ctx.graph.leaf4(images.clone(), false);
        let probs = build_net(&mut ctx, &self.spec, input)?;
        Ok(graph.take4(probs))
    }

    /// Training forward: batch-statistics batch norm (running averages
    /// updated), gradients enabled. Returns the live graph, the
    /// distribution node and the trainable leaves.
    pub fn forward_training(
        &mut self,
        images: &Array4<f32>,
    ) -> Result<TrainingForward> {
        self.check_batch(images)?;
        let mut graph = Graph::new();
        let mut ctx = NetCtx {
            graph: &mut graph,
            store: StoreRef::Mut(&mut self.params),
            path: Vec::new(),
            training: true,
            seed: self.seed,
            trainable: Vec::new(),
        };
        let input = ctx.graph.leaf4(images.clone(), false);
        let probs = build_net(&mut ctx, &self.spec, input)?;
        let trainable = ctx.trainable;
        Ok((graph, probs, trainable))
    }

    /// Encoder taps at strides 2..2^depth for this model's encoder
    /// (inference mode).
    pub fn forward_pyramid(&self, images: &Array4<f32>) -> Result<Vec<Array4<f32>>> {
        self.check_batch(images)?;
        let mut graph = Graph::new();
        let mut ctx = NetCtx {
            graph: &mut graph,
            store: StoreRef::Read(&self.params),
            path: Vec::new(),
            training: false,
            seed: self.seed,
            trainable: Vec::new(),
        };
        let input = ctx.graph.leaf4(images.clone(), false);
        let taps = ctx.scope("encoder", |ctx| {
            encoders::build_pyramid(ctx, self.spec.encoder, input, self.spec.decoder.encoder_depth())
        })?;
        Ok(taps.into_iter().map(|t| graph.value4(t).clone()).collect())
    }
}

/// Wire encoder and decoder into the per-pixel distribution head.
fn build_net(ctx: &mut NetCtx, spec: &ModelSpec, input: VarId) -> Result<VarId> {
    let taps = ctx.scope("encoder", |ctx| {
        encoders::build_pyramid(ctx, spec.encoder, input, spec.decoder.encoder_depth())
    })?;
    let logits = ctx.scope("decoder", |ctx| decoders::build(ctx, spec, &taps))?;
    let probs = ctx.graph().softmax_channels(logits);
    let (_, _, h, w) = ctx.graph().dim4(probs);
    if (h, w) != (spec.input_height, spec.input_width) {
        // Native stride > 1: bilinear resize of the distribution map; the
        // interpolation is convex so pixel sums stay 1.
        Ok(ctx
            .graph()
            .resize_bilinear(probs, spec.input_height, spec.input_width))
    } else {
        Ok(probs)
    }
}

/// Standalone encoder: the feature-pyramid producer with its own parameter
/// set, independent of any decoder.
pub struct EncoderNet {
    pub kind: EncoderKind,
    pub input_height: usize,
    pub input_width: usize,
    params: ParamStore,
    seed: u64,
}

/// Build a feature-pyramid producer for `kind`. Input dims must be
/// divisible by 32, the deepest stride.
pub fn build_encoder(
    kind: EncoderKind,
    input_height: usize,
    input_width: usize,
    seed: u64,
) -> Result<EncoderNet> {
    if !input_height.is_multiple_of(32) || !input_width.is_multiple_of(32) {
        return Err(Error::config(format!(
            "encoder input dims {input_height}x{input_width} must be divisible by 32"
        )));
    }
    let mut net = EncoderNet {
        kind,
        input_height,
        input_width,
        params: ParamStore::new(),
        seed,
    };
    let dummy = Array4::zeros((1, 3, input_height, input_width));
    net.run(&dummy, true)?;
    Ok(net)
}

impl EncoderNet {
    fn run(&mut self, images: &Array4<f32>, materialize: bool) -> Result<Vec<Array4<f32>>> {
        let mut graph = Graph::new();
        let mut ctx = NetCtx {
            graph: &mut graph,
            store: if materialize {
                StoreRef::Mut(&mut self.params)
            } else {
                StoreRef::Read(&self.params)
            },
            path: Vec::new(),
            training: false,
            seed: self.seed,
            trainable: Vec::new(),
        };
        let input = ctx.graph.leaf4(images.clone(), false);
        let taps = ctx.scope("encoder", |ctx| {
            encoders::build_pyramid(ctx, self.kind, input, 5)
        })?;
        Ok(taps.into_iter().map(|t| graph.value4(t).clone()).collect())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// The five pyramid levels at strides 2, 4, 8, 16, 32.
    pub fn forward(&mut self, images: &Array4<f32>) -> Result<Vec<Array4<f32>>> {
        let (_, c, h, w) = images.dim();
        if c != 3 || h != self.input_height || w != self.input_width {
            return Err(Error::shape(format!(
                "batch {:?} does not match encoder input (N,3,{},{})",
                images.dim(),
                self.input_height,
                self.input_width
            )));
        }
        self.run(images, false)
    }
}

/// Convert a batch of samples into NCHW images and a label volume.
pub fn batch_to_arrays(
    samples: &[crate::dataio::SegmentationSample],
) -> Result<(Array4<f32>, Array3<u8>)> {
    if samples.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let (h, w, _) = samples[0].image.dim();
    let (lh, lw) = samples[0].labels.dim();
    let n = samples.len();
    let mut images = Array4::<f32>::zeros((n, 3, h, w));
    let mut labels = Array3::<u8>::zeros((n, lh, lw));
    for (i, s) in samples.iter().enumerate() {
        if s.image.dim() != (h, w, 3) || s.labels.dim() != (lh, lw) {
            return Err(Error::shape("inconsistent sample dims within batch"));
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    images[[i, c, y, x]] = s.image[[y, x, c]];
                }
            }
        }
        labels
            .slice_mut(ndarray::s![i, .., ..])
            .assign(&s.labels.view());
    }
    Ok((images, labels))
}

/// Convenience wrapper used throughout tests and the CLI.
pub fn assemble_model(spec: ModelSpec, seed: u64) -> Result<SegmentationModel> {
    SegmentationModel::new(spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_images(n: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn plain_pyramid_dims_halve_per_stage() {
        let mut enc = build_encoder(EncoderKind::Plain, 64, 64, 0).unwrap();
        let taps = enc.forward(&rand_images(1, 64, 64, 1)).unwrap();
        let dims: Vec<usize> = taps.iter().map(|t| t.dim().2).collect();
        assert_eq!(dims, vec![32, 16, 8, 4, 2]);
        let channels: Vec<usize> = taps.iter().map(|t| t.dim().1).collect();
        assert_eq!(channels.to_vec(), encoder_channels(EncoderKind::Plain).to_vec());
    }

    #[test]
    fn resnet50_deepest_feature_is_7x7_at_224() {
        let mut enc = build_encoder(EncoderKind::Resnet50, 224, 224, 0).unwrap();
        let taps = enc.forward(&rand_images(1, 224, 224, 2)).unwrap();
        assert_eq!(taps.len(), 5);
        for (i, t) in taps.iter().enumerate() {
            let stride = 1usize << (i + 1);
            assert_eq!((t.dim().2, t.dim().3), (224 / stride, 224 / stride));
        }
        assert_eq!((taps[4].dim().2, taps[4].dim().3), (7, 7));
        assert_eq!(taps[4].dim().1, 2048);
    }

    #[test]
    fn mobilenet_deepest_feature_is_3x3_at_96() {
        let mut enc = build_encoder(EncoderKind::Mobilenet, 96, 96, 0).unwrap();
        let taps = enc.forward(&rand_images(1, 96, 96, 3)).unwrap();
        assert_eq!((taps[4].dim().2, taps[4].dim().3), (3, 3));
        let channels: Vec<usize> = taps.iter().map(|t| t.dim().1).collect();
        assert_eq!(channels, vec![64, 128, 256, 512, 1024]);
    }

    #[test]
    fn vgg_pyramid_strides_are_exact() {
        let mut enc = build_encoder(EncoderKind::Vgg, 64, 64, 0).unwrap();
        let taps = enc.forward(&rand_images(1, 64, 64, 4)).unwrap();
        for (i, t) in taps.iter().enumerate() {
            let stride = 1usize << (i + 1);
            assert_eq!((t.dim().2, t.dim().3), (64 / stride, 64 / stride));
        }
        // Channel counts monotonically non-decreasing with depth.
        let ch: Vec<usize> = taps.iter().map(|t| t.dim().1).collect();
        assert!(ch.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn indivisible_input_dims_are_rejected() {
        assert!(build_encoder(EncoderKind::Plain, 60, 64, 0).is_err());
        let spec = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 2, 100, 96);
        assert!(SegmentationModel::new(spec, 0).is_err());
    }

    #[test]
    fn pspnet_requires_divisibility_by_48() {
        let spec = ModelSpec::new(EncoderKind::Plain, DecoderKind::Pspnet, 2, 64, 64);
        assert!(matches!(SegmentationModel::new(spec, 0), Err(Error::Config(_))));
        let ok = ModelSpec::new(EncoderKind::Plain, DecoderKind::Pspnet, 2, 96, 96);
        assert!(SegmentationModel::new(ok, 0).is_ok());
    }

    #[test]
    fn segnet_forward_shape_and_softmax_contract() {
        let spec = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 2, 64, 64);
        let model = SegmentationModel::new(spec, 7).unwrap();
        let out = model.forward(&rand_images(1, 64, 64, 5)).unwrap();
        assert_eq!(out.dim(), (1, 2, 64, 64));
        assert!(out.iter().all(|v| v.is_finite()));
        for y in 0..64 {
            for x in 0..64 {
                let s: f32 = (0..2).map(|c| out[[0, c, y, x]]).sum();
                assert!((s - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn pspnet_stride8_feature_and_output_resize() {
        let spec = ModelSpec::new(EncoderKind::Resnet50, DecoderKind::Pspnet, 8, 96, 96);
        let model = SegmentationModel::new(spec, 1).unwrap();
        let taps = model.forward_pyramid(&rand_images(1, 96, 96, 6)).unwrap();
        // pspnet consumes the pyramid only down to stride 8
        assert_eq!(taps.len(), 3);
        assert_eq!((taps[2].dim().2, taps[2].dim().3), (12, 12));
        let out = model.forward(&rand_images(1, 96, 96, 7)).unwrap();
        assert_eq!(out.dim(), (1, 8, 96, 96));
        for y in (0..96).step_by(17) {
            for x in (0..96).step_by(13) {
                let s: f32 = (0..8).map(|c| out[[0, c, y, x]]).sum();
                assert!((s - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn inference_forward_is_pure_and_batch_independent() {
        let spec = ModelSpec::new(EncoderKind::Mobilenet, DecoderKind::Unet, 3, 64, 64);
        let model = SegmentationModel::new(spec, 11).unwrap();
        let one = rand_images(1, 64, 64, 8);
        let a = model.forward(&one).unwrap();
        let b = model.forward(&one).unwrap();
        assert_eq!(a, b);

        let mut two = Array4::zeros((2, 3, 64, 64));
        two.slice_mut(ndarray::s![0, .., .., ..]).assign(&one.slice(ndarray::s![0, .., .., ..]));
        two.slice_mut(ndarray::s![1, .., .., ..]).assign(&one.slice(ndarray::s![0, .., .., ..]));
        let batched = model.forward(&two).unwrap();
        assert_eq!(batched.slice(ndarray::s![0, .., .., ..]), batched.slice(ndarray::s![1, .., .., ..]));
        assert_eq!(batched.slice(ndarray::s![0, .., .., ..]), a.slice(ndarray::s![0, .., .., ..]));
    }

    #[test]
    fn parameter_count_is_deterministic_and_orders_as_expected() {
        let segnet = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 2, 64, 64);
        let m1 = SegmentationModel::new(segnet.clone(), 0).unwrap();
        let m2 = SegmentationModel::new(segnet, 1).unwrap();
        assert_eq!(m1.count_parameters(), m2.count_parameters());

        let unet = ModelSpec::new(EncoderKind::Plain, DecoderKind::Unet, 2, 64, 64);
        let mu = SegmentationModel::new(unet, 0).unwrap();
        // Skip-concat convs see more input channels.
        assert!(mu.count_parameters() > m1.count_parameters());
    }

    #[test]
    fn head_size_scales_linearly_in_class_count() {
        let k2 = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 2, 64, 64);
        let k12 = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 12, 64, 64);
        let c_last = 16; // final upsampling block width
        let diff = SegmentationModel::new(k12, 0).unwrap().count_parameters()
            - SegmentationModel::new(k2, 0).unwrap().count_parameters();
        assert_eq!(diff, (12 - 2) * (c_last + 1));
    }

    #[test]
    fn fcn8_with_zero_branches_equals_fcn32_bitwise() {
        let seed = 3;
        let f8 = ModelSpec::new(EncoderKind::Plain, DecoderKind::Fcn8, 4, 64, 64);
        let f32spec = ModelSpec::new(EncoderKind::Plain, DecoderKind::Fcn32, 4, 64, 64);
        let mut fcn8 = SegmentationModel::new(f8, seed).unwrap();
        let fcn32 = SegmentationModel::new(f32spec, seed).unwrap();
        // Same seed + name-keyed init: encoder and score5 weights coincide.
        for name in ["decoder.score4", "decoder.score3"] {
            for kind in ["weight", "bias"] {
                fcn8.params_mut()
                    .get_mut(&format!("{name}.{kind}"))
                    .unwrap()
                    .value
                    .fill(0.0);
            }
        }
        let x = rand_images(1, 64, 64, 9);
        let a = fcn8.forward(&x).unwrap();
        let b = fcn32.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuting_head_channels_permutes_probability_maps() {
        let spec = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 4, 64, 64);
        let base = SegmentationModel::new(spec.clone(), 5).unwrap();
        let x = rand_images(1, 64, 64, 10);
        let out = base.forward(&x).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut permuted = SegmentationModel::new(spec, 5).unwrap();
        {
            let w = permuted.params_mut().get_mut("decoder.head.weight").unwrap();
            let orig = w.value.clone();
            for (dst, &src) in perm.iter().enumerate() {
                w.value
                    .index_axis_mut(ndarray::Axis(0), dst)
                    .assign(&orig.index_axis(ndarray::Axis(0), src));
            }
            let b = permuted.params_mut().get_mut("decoder.head.bias").unwrap();
            let orig_b = b.value.clone();
            for (dst, &src) in perm.iter().enumerate() {
                b.value[[dst]] = orig_b[[src]];
            }
        }
        let out_p = permuted.forward(&x).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let a = out.index_axis(ndarray::Axis(1), src);
            let b = out_p.index_axis(ndarray::Axis(1), dst);
            let max_diff = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff <= 1e-6, "class {src}->{dst} diff {max_diff}");
        }
    }

    #[test]
    fn every_parameter_is_convolutional_or_norm_shaped() {
        // No fully connected layers anywhere: every array is a conv kernel
        // (rank 4) or a per-channel vector (bias / batch-norm term).
        for (enc, dec) in [
            (EncoderKind::Resnet50, DecoderKind::Fcn8),
            (EncoderKind::Mobilenet, DecoderKind::Segnet),
            (EncoderKind::Vgg, DecoderKind::Fcn32),
            (EncoderKind::Plain, DecoderKind::Pspnet),
        ] {
            let spec = ModelSpec::new(enc, dec, 2, 96, 96);
            let model = SegmentationModel::new(spec, 0).unwrap();
            for (name, e) in model.params().iter() {
                match e.value.ndim() {
                    4 => assert!(name.ends_with(".weight"), "{name}"),
                    1 => assert!(
                        name.ends_with(".bias")
                            || name.ends_with(".gamma")
                            || name.ends_with(".beta")
                            || name.ends_with(".running_mean")
                            || name.ends_with(".running_var"),
                        "{name}"
                    ),
                    d => panic!("parameter {name} has unexpected rank {d}"),
                }
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_dims() {
        let spec = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 2, 64, 64);
        let model = SegmentationModel::new(spec, 0).unwrap();
        assert!(model.forward(&rand_images(1, 32, 64, 0)).is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        let mut spec = ModelSpec::new(EncoderKind::Resnet50, DecoderKind::Pspnet, 8, 96, 96);
        spec.pretrained_source = Some("ade20k".into());
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"resnet50\""));
        assert!(json.contains("\"pspnet\""));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn field_mismatch_names_the_field() {
        let a = ModelSpec::new(EncoderKind::Plain, DecoderKind::Segnet, 12, 64, 64);
        let mut b = a.clone();
        b.n_classes = 8;
        assert_eq!(a.field_mismatch(&b), Some("n_classes"));
        let mut c = a.clone();
        c.pretrained_source = Some("elsewhere".into());
        assert_eq!(a.field_mismatch(&c), None);
    }
}
