//! Reverse-mode tape. Each op records its output plus whatever the backward
//! pass needs; `backward` walks the tape once and frees intermediate
//! gradients as it goes.

use ndarray::{Array1, Array3, Array4, ArrayD, Ix1, Ix4};

use super::ops::{self, BnTrainOut, ConvConf, NllConf, PoolConf};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Value {
    A4(Array4<f32>),
    A1(Array1<f32>),
    Scalar(f64),
}

impl Value {
    fn a4(&self) -> &Array4<f32> {
        match self {
            Value::A4(a) => a,
            _ => panic!("expected rank-4 value"),
        }
    }

    fn a1(&self) -> &Array1<f32> {
        match self {
            Value::A1(a) => a,
            _ => panic!("expected rank-1 value"),
        }
    }

    fn add_assign(&mut self, other: &Value) {
        match (self, other) {
            (Value::A4(a), Value::A4(b)) => *a += b,
            (Value::A1(a), Value::A1(b)) => *a += b,
            (Value::Scalar(a), Value::Scalar(b)) => *a += b,
            _ => panic!("gradient kind mismatch"),
        }
    }

    fn into_dyn(self) -> ArrayD<f32> {
        match self {
            Value::A4(a) => a.into_dyn(),
            Value::A1(a) => a.into_dyn(),
            Value::Scalar(s) => ArrayD::from_elem(ndarray::IxDyn(&[]), s as f32),
        }
    }
}

struct BnCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
}

enum Op {
    Leaf,
    Conv {
        x: VarId,
        w: VarId,
        b: VarId,
        conf: ConvConf,
    },
    Depthwise {
        x: VarId,
        w: VarId,
        b: VarId,
        conf: ConvConf,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        cache: BnCache,
    },
    ChannelAffine {
        x: VarId,
        scale: Array1<f32>,
    },
    Relu {
        x: VarId,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<u32>,
    },
    AvgPoolBins {
        x: VarId,
    },
    UpNearest {
        x: VarId,
        factor: usize,
    },
    Resize {
        x: VarId,
    },
    Concat {
        xs: Vec<VarId>,
        splits: Vec<usize>,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Softmax {
        x: VarId,
    },
    WeightedSum {
        x: VarId,
        weights: Array4<f32>,
    },
    Nll {
        probs: VarId,
        labels: Array3<u8>,
        conf: NllConf,
        norm: f64,
    },
}

struct Node {
    value: Value,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaf gradients
/// survive the walk; everything else is freed as soon as it has been
/// propagated.
pub struct Grads(Vec<Option<Value>>);

impl Grads {
    pub fn take(&mut self, id: VarId) -> Option<ArrayD<f32>> {
        self.0[id.0].take().map(Value::into_dyn)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Value, requires_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf4(&mut self, value: Array4<f32>, requires_grad: bool) -> VarId {
        self.push(Value::A4(value), requires_grad, Op::Leaf)
    }

    pub fn leaf1(&mut self, value: Array1<f32>, requires_grad: bool) -> VarId {
        self.push(Value::A1(value), requires_grad, Op::Leaf)
    }

    /// Insert a stored parameter as a leaf; rank 4 and rank 1 are the only
    /// parameter shapes the architectures use.
    pub fn leaf_dyn(&mut self, value: ArrayD<f32>, requires_grad: bool) -> Result<VarId> {
        match value.ndim() {
            4 => Ok(self.leaf4(
                value.into_dimensionality::<Ix4>().expect("checked ndim"),
                requires_grad,
            )),
            1 => Ok(self.leaf1(
                value.into_dimensionality::<Ix1>().expect("checked ndim"),
                requires_grad,
            )),
            d => Err(Error::shape(format!("unsupported parameter rank {d}"))),
        }
    }

    pub fn value4(&self, id: VarId) -> &Array4<f32> {
        self.nodes[id.0].value.a4()
    }

    pub fn take4(&mut self, id: VarId) -> Array4<f32> {
        let empty = Value::Scalar(0.0);
        match std::mem::replace(&mut self.nodes[id.0].value, empty) {
            Value::A4(a) => a,
            _ => panic!("expected rank-4 value"),
        }
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        match &self.nodes[id.0].value {
            Value::Scalar(s) => *s,
            _ => panic!("expected scalar value"),
        }
    }

    pub fn dim4(&self, id: VarId) -> (usize, usize, usize, usize) {
        self.value4(id).dim()
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, conf: ConvConf) -> Result<VarId> {
        let xv = self.value4(x);
        let wv = self.value4(w);
        if xv.dim().1 != wv.dim().1 {
            return Err(Error::shape(format!(
                "conv input channels {} != kernel channels {}",
                xv.dim().1,
                wv.dim().1
            )));
        }
        let out = ops::conv2d_fwd(xv, wv, self.nodes[b.0].value.a1(), conf);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Value::A4(out), rg, Op::Conv { x, w, b, conf }))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        conf: ConvConf,
    ) -> Result<VarId> {
        let xv = self.value4(x);
        let wv = self.value4(w);
        if xv.dim().1 != wv.dim().0 {
            return Err(Error::shape(format!(
                "depthwise conv channels {} != kernel count {}",
                xv.dim().1,
                wv.dim().0
            )));
        }
        let out = ops::depthwise_fwd(xv, wv, self.nodes[b.0].value.a1(), conf);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Value::A4(out), rg, Op::Depthwise { x, w, b, conf }))
    }

    /// Training-mode batch norm. Returns the node plus the batch statistics
    /// so the caller can fold them into running averages.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f32,
    ) -> (VarId, Array1<f32>, Array1<f32>) {
        let BnTrainOut {
            y,
            xhat,
            inv_std,
            mean,
            var,
        } = ops::batchnorm_train_fwd(
            self.value4(x),
            self.nodes[gamma.0].value.a1(),
            self.nodes[beta.0].value.a1(),
            eps,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            Value::A4(y),
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache: BnCache { xhat, inv_std },
            },
        );
        (id, mean, var)
    }

    /// Inference-mode batch norm folded to `x·scale + shift`.
    pub fn channel_affine(&mut self, x: VarId, scale: Array1<f32>, shift: Array1<f32>) -> VarId {
        let out = ops::channel_affine_fwd(self.value4(x), &scale, &shift);
        let rg = self.rg(x);
        self.push(Value::A4(out), rg, Op::ChannelAffine { x, scale })
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out = ops::relu_fwd(self.value4(x));
        let rg = self.rg(x);
        self.push(Value::A4(out), rg, Op::Relu { x })
    }

    pub fn maxpool(&mut self, x: VarId, conf: PoolConf) -> VarId {
        let (out, argmax) = ops::maxpool_fwd(self.value4(x), conf);
        let rg = self.rg(x);
        self.push(Value::A4(out), rg, Op::MaxPool { x, argmax })
    }

    pub fn avgpool_bins(&mut self, x: VarId, bins: usize) -> Result<VarId> {
        let out = ops::avgpool_bins_fwd(self.value4(x), bins)?;
        let rg = self.rg(x);
        Ok(self.push(Value::A4(out), rg, Op::AvgPoolBins { x }))
    }

    pub fn upsample_nearest(&mut self, x: VarId, factor: usize) -> VarId {
        let out = ops::upsample_nearest_fwd(self.value4(x), factor);
        let rg = self.rg(x);
        self.push(Value::A4(out), rg, Op::UpNearest { x, factor })
    }

    pub fn resize_bilinear(&mut self, x: VarId, oh: usize, ow: usize) -> VarId {
        let out = ops::resize_bilinear_fwd(self.value4(x), oh, ow);
        let rg = self.rg(x);
        self.push(Value::A4(out), rg, Op::Resize { x })
    }

    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId> {
        assert!(!xs.is_empty());
        let (n, _, h, w) = self.dim4(xs[0]);
        let mut splits = Vec::with_capacity(xs.len());
        for &x in xs {
            let d = self.dim4(x);
            if (d.0, d.2, d.3) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat operands disagree: {:?} vs (n={n}, h={h}, w={w})",
                    d
                )));
            }
            splits.push(d.1);
        }
        let views: Vec<_> = xs.iter().map(|&x| self.value4(x).view()).collect();
        let out = ndarray::concatenate(ndarray::Axis(1), &views).expect("validated dims");
        let out = out.as_standard_layout().into_owned();
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Value::A4(out),
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                splits,
            },
        ))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.dim4(a) != self.dim4(b) {
            return Err(Error::shape(format!(
                "add operands disagree: {:?} vs {:?}",
                self.dim4(a),
                self.dim4(b)
            )));
        }
        let out = self.value4(a) + self.value4(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Value::A4(out), rg, Op::Add { a, b }))
    }

    pub fn softmax_channels(&mut self, x: VarId) -> VarId {
        let out = ops::softmax_fwd(self.value4(x));
        let rg = self.rg(x);
        self.push(Value::A4(out), rg, Op::Softmax { x })
    }

    /// Scalar Σ x·weights; handy for reducing any map to a test loss.
    pub fn weighted_sum(&mut self, x: VarId, weights: Array4<f32>) -> Result<VarId> {
        if self.dim4(x) != weights.dim() {
            return Err(Error::shape("weighted_sum shape mismatch"));
        }
        let s: f64 = self
            .value4(x)
            .iter()
            .zip(weights.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Value::Scalar(s), rg, Op::WeightedSum { x, weights }))
    }

    pub fn nll_from_probs(
        &mut self,
        probs: VarId,
        labels: Array3<u8>,
        conf: NllConf,
    ) -> Result<VarId> {
        let (loss, norm) = ops::nll_fwd(self.value4(probs), &labels, &conf)?;
        let rg = self.rg(probs);
        Ok(self.push(
            Value::Scalar(loss as f64),
            rg,
            Op::Nll {
                probs,
                labels,
                conf,
                norm,
            },
        ))
    }

    /// Reverse pass from a scalar node. Gradients of intermediates are
    /// dropped once propagated; leaf gradients remain for extraction.
    pub fn backward(&self, loss: VarId) -> Grads {
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Value::Scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            self.propagate(i, &g, &mut grads);
            if is_leaf {
                grads[i] = Some(g);
            }
        }
        Grads(grads)
    }

    fn acc(&self, grads: &mut [Option<Value>], id: VarId, delta: Value) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Value, grads: &mut [Option<Value>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, conf } => {
                let (dx, dw, db) = ops::conv2d_bwd(
                    self.value4(*x),
                    self.value4(*w),
                    g.a4(),
                    *conf,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Value::A4(dx));
                }
                self.acc(grads, *w, Value::A4(dw));
                self.acc(grads, *b, Value::A1(db));
            }
            Op::Depthwise { x, w, b, conf } => {
                let (dx, dw, db) = ops::depthwise_bwd(
                    self.value4(*x),
                    self.value4(*w),
                    g.a4(),
                    *conf,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Value::A4(dx));
                }
                self.acc(grads, *w, Value::A4(dw));
                self.acc(grads, *b, Value::A1(db));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dgamma, dbeta) = ops::batchnorm_train_bwd(
                    g.a4(),
                    &cache.xhat,
                    &cache.inv_std,
                    self.nodes[gamma.0].value.a1(),
                );
                self.acc(grads, *x, Value::A4(dx));
                self.acc(grads, *gamma, Value::A1(dgamma));
                self.acc(grads, *beta, Value::A1(dbeta));
            }
            Op::ChannelAffine { x, scale } => {
                let dx = ops::channel_affine_bwd(g.a4(), scale);
                self.acc(grads, *x, Value::A4(dx));
            }
            Op::Relu { x } => {
                let dx = ops::relu_bwd(g.a4(), self.value4(*x));
                self.acc(grads, *x, Value::A4(dx));
            }
            Op::MaxPool { x, argmax } => {
                let dx = ops::maxpool_bwd(argmax, g.a4(), self.dim4(*x));
                self.acc(grads, *x, Value::A4(dx));
            }
            Op::AvgPoolBins { x } => {
                let dx = ops::avgpool_bins_bwd(g.a4(), self.dim4(*x));
                self.acc(grads, *x, Value::A4(dx));
            }
            Op::UpNearest { x, factor } => {
                let dx = ops::upsample_nearest_bwd(g.a4(), *factor);
                self.acc(grads, *x, Value::A4(dx));
            }
            Op::Resize { x } => {
                let dx = ops::resize_bilinear_bwd(g.a4(), self.dim4(*x));
                self.acc(grads, *x, Value::A4(dx));
            }
            Op::Concat { xs, splits } => {
                let gv = g.a4();
                let mut start = 0usize;
                for (&xid, &c) in xs.iter().zip(splits.iter()) {
                    let part = gv
                        .slice(ndarray::s![.., start..start + c, .., ..])
                        .as_standard_layout()
                        .into_owned();
                    self.acc(grads, xid, Value::A4(part));
                    start += c;
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.a4();
                let dx = ops::softmax_bwd(g.a4(), y);
                self.acc(grads, *x, Value::A4(dx));
            }
            Op::WeightedSum { x, weights } => {
                let s = match g {
                    Value::Scalar(s) => *s as f32,
                    _ => panic!("scalar gradient expected"),
                };
                self.acc(grads, *x, Value::A4(weights.mapv(|w| w * s)));
            }
            Op::Nll {
                probs,
                labels,
                conf,
                norm,
            } => {
                let s = match g {
                    Value::Scalar(s) => *s as f32,
                    _ => panic!("scalar gradient expected"),
                };
                let dp = ops::nll_bwd(s, self.value4(*probs), labels, conf, *norm);
                self.acc(grads, *probs, Value::A4(dp));
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array4::from_shape_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn rand1(len: usize, seed: u64) -> Array1<f32> {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        Array1::from((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    /// Leaves are rebuilt per evaluation, so any op combination can be
    /// probed. f32 forward passes limit attainable accuracy; tolerances are
    /// set to catch structural errors (wrong index, sign, scale).
    fn fd_check(
        leaves: Vec<ArrayD<f32>>,
        build: impl Fn(&mut Graph, &[VarId]) -> VarId,
        samples: usize,
        tol: f32,
    ) {
        let eval = |vals: &[ArrayD<f32>]| -> (f64, Vec<ArrayD<f32>>) {
            let mut g = Graph::new();
            let ids: Vec<VarId> = vals
                .iter()
                .map(|v| g.leaf_dyn(v.clone(), true).unwrap())
                .collect();
            let loss = build(&mut g, &ids);
            let mut grads = g.backward(loss);
            let out = ids.iter().map(|&id| grads.take(id).unwrap()).collect();
            (g.scalar(loss), out)
        };
        let (_, analytic) = eval(&leaves);
        let mut rng = rand::rngs::StdRng::seed_from_u64(99);
        let h = 1e-2f32;
        for (li, leaf) in leaves.iter().enumerate() {
            for _ in 0..samples {
                let idx = rng.gen_range(0..leaf.len());
                let mut plus = leaves.clone();
                plus[li].as_slice_mut().unwrap()[idx] += h;
                let mut minus = leaves.clone();
                minus[li].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h as f64);
                let an = analytic[li].as_slice().unwrap()[idx] as f64;
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    ((fd - an) / denom).abs() < tol as f64,
                    "leaf {li} idx {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn scalar_loss(g: &mut Graph, out: VarId, seed: u64) -> VarId {
        let w = rand4(g.dim4(out), seed);
        g.weighted_sum(out, w).unwrap()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rand4((2, 3, 6, 6), 1).into_dyn();
        let w = rand4((4, 3, 3, 3), 2).into_dyn();
        let b = rand1(4, 3).into_dyn();
        fd_check(
            vec![x, w, b],
            |g, ids| {
                let y = g
                    .conv2d(ids[0], ids[1], ids[2], ConvConf::square(3, 2))
                    .unwrap();
                scalar_loss(g, y, 42)
            },
            6,
            2e-2,
        );
    }

    #[test]
    fn depthwise_gradients_match_finite_differences() {
        let x = rand4((2, 3, 6, 6), 4).into_dyn();
        let w = rand4((3, 1, 3, 3), 5).into_dyn();
        let b = rand1(3, 6).into_dyn();
        fd_check(
            vec![x, w, b],
            |g, ids| {
                let y = g
                    .depthwise_conv2d(ids[0], ids[1], ids[2], ConvConf::square(3, 1))
                    .unwrap();
                scalar_loss(g, y, 43)
            },
            6,
            2e-2,
        );
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let x = rand4((3, 2, 4, 4), 7).into_dyn();
        let gamma = rand1(2, 8).into_dyn();
        let beta = rand1(2, 9).into_dyn();
        fd_check(
            vec![x, gamma, beta],
            |g, ids| {
                let (y, _, _) = g.batch_norm_train(ids[0], ids[1], ids[2], 1e-5);
                let y = g.relu(y);
                scalar_loss(g, y, 44)
            },
            8,
            3e-2,
        );
    }

    #[test]
    fn pool_resize_softmax_gradients_match_finite_differences() {
        let x = rand4((1, 3, 8, 8), 11).into_dyn();
        fd_check(
            vec![x],
            |g, ids| {
                let p = g.maxpool(
                    ids[0],
                    PoolConf {
                        k: 2,
                        stride: 2,
                        pad: 0,
                    },
                );
                let u = g.upsample_nearest(p, 2);
                let r = g.resize_bilinear(u, 6, 10);
                let s = g.softmax_channels(r);
                scalar_loss(g, s, 45)
            },
            10,
            2e-2,
        );
    }

    #[test]
    fn concat_add_avgpool_gradients_match_finite_differences() {
        let a = rand4((1, 2, 6, 6), 13).into_dyn();
        let b = rand4((1, 3, 6, 6), 14).into_dyn();
        fd_check(
            vec![a, b],
            |g, ids| {
                let c = g.concat_channels(&[ids[0], ids[1]]).unwrap();
                let p = g.avgpool_bins(c, 3).unwrap();
                let q = g.avgpool_bins(c, 3).unwrap();
                let s = g.add(p, q).unwrap();
                scalar_loss(g, s, 46)
            },
            8,
            2e-2,
        );
    }

    #[test]
    fn softmax_nll_gradient_equals_probs_minus_onehot() {
        // Analytic composite: d(mean CE)/d(score) = (p - onehot)/N.
        let scores = rand4((2, 3, 4, 4), 21);
        let mut rng = rand::rngs::StdRng::seed_from_u64(22);
        let labels =
            Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(0..3u8));
        let mut g = Graph::new();
        let s = g.leaf4(scores.clone(), true);
        let p = g.softmax_channels(s);
        let probs = g.value4(p).clone();
        let loss = g
            .nll_from_probs(
                p,
                labels.clone(),
                NllConf {
                    eps: 1e-7,
                    class_weights: None,
                    ignore_label: None,
                },
            )
            .unwrap();
        let mut grads = g.backward(loss);
        let ds = grads
            .take(s)
            .unwrap()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let n_pixels = (2 * 4 * 4) as f32;
        for ni in 0..2 {
            for ci in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        let onehot = if labels[[ni, y, x]] as usize == ci {
                            1.0
                        } else {
                            0.0
                        };
                        let want = (probs[[ni, ci, y, x]] - onehot) / n_pixels;
                        let got = ds[[ni, ci, y, x]];
                        assert!(
                            (want - got).abs() < 1e-5,
                            "({ni},{ci},{y},{x}): want {want} got {got}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn no_grad_leaves_are_skipped() {
        let mut g = Graph::new();
        let x = g.leaf4(rand4((1, 2, 4, 4), 31), false);
        let w = g.leaf4(rand4((2, 2, 1, 1), 32), true);
        let b = g.leaf1(rand1(2, 33), true);
        let y = g.conv2d(x, w, b, ConvConf::square(1, 1)).unwrap();
        let loss = g.weighted_sum(y, Array4::ones(g.dim4(y))).unwrap();
        let mut grads = g.backward(loss);
        assert!(grads.take(x).is_none());
        assert!(grads.take(w).is_some());
    }

    #[test]
    fn leaf_dyn_rejects_rank_2() {
        let mut g = Graph::new();
        let arr = ArrayD::<f32>::zeros(IxDyn(&[2, 2]));
        assert!(g.leaf_dyn(arr, false).is_err());
    }
}
