//! Minimal CPU tensor backend: dense f32 arrays, a reverse-mode tape, and
//! the handful of kernels segmentation networks need (convolution, pooling,
//! normalization, resampling, softmax).
//!
//! Layout convention is NCHW for activations and `[c_out, c_in, kh, kw]`
//! for convolution kernels. All kernels produce standard-layout owned
//! arrays; determinism is independent of worker count because work is
//! split into fixed-size chunks.

mod graph;
pub(crate) mod ops;
mod optim;

pub use graph::{Graph, VarId};
pub use ops::{ConvConf, NllConf, PoolConf};
pub use optim::{Optimizer, OptimizerKind};

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};

/// Fixed GEMM row-chunk so results do not depend on the number of workers.
const GEMM_ROW_CHUNK: usize = 16;

#[cfg(feature = "parallel")]
pub(crate) fn par_chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk.max(1))
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, c) in data.chunks_mut(chunk.max(1)).enumerate() {
        f(i, c);
    }
}

/// C (m×n, row-major) = A·B with arbitrary A/B strides, C overwritten when
/// `beta` is 0 and accumulated into when 1. Rows of C are processed in
/// fixed-size chunks, in parallel when the `parallel` feature is on.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    beta: f32,
) {
    assert_eq!(c.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    let a_ptr = a.as_ptr() as usize;
    let b_ptr = b.as_ptr() as usize;
    par_chunks_mut(c, GEMM_ROW_CHUNK * n, |chunk_idx, c_chunk| {
        let row0 = chunk_idx * GEMM_ROW_CHUNK;
        let rows = c_chunk.len() / n;
        let a_block = (a_ptr as *const f32).wrapping_offset(row0 as isize * rsa);
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a_block,
                rsa,
                csa,
                b_ptr as *const f32,
                rsb,
                csb,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// C = A·B, all row-major: A m×k, B k×n, C m×n.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    gemm_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, c, 0.0);
}

/// C += A·Bᵀ with B stored row-major n×k.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k);
    gemm_strided(m, k, n, a, k as isize, 1, b, 1, k as isize, c, 1.0);
}

/// C = Aᵀ·B with A stored row-major k×m.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n);
    gemm_strided(m, k, n, a, 1, m as isize, b, n as isize, 1, c, 0.0);
}

/// How a parameter array is filled on creation.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: ArrayD<f32>,
    /// Optimizers only touch trainable entries; batch-norm running
    /// statistics live here as non-trainable state.
    pub trainable: bool,
}

/// Named parameter arrays in canonical (sorted-name) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over every stored array, running statistics
    /// included.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: String, value: ArrayD<f32>, trainable: bool) {
        self.entries.insert(name, ParamEntry { value, trainable });
    }

    /// Fetch an entry, creating it with `init` when absent. A shape clash
    /// with an existing entry is a hard error since it means two layers
    /// resolved to the same canonical name.
    pub fn get_or_create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
        seed: u64,
    ) -> Result<&ParamEntry> {
        if !self.entries.contains_key(name) {
            let value = init_array(shape, init, seed ^ fnv1a(name.as_bytes()));
            self.entries.insert(
                name.to_string(),
                ParamEntry { value, trainable },
            );
        }
        let entry = self.entries.get(name).expect("just inserted");
        if entry.value.shape() != shape {
            return Err(Error::shape(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                entry.value.shape(),
                shape
            )));
        }
        Ok(entry)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

fn init_array(shape: &[usize], init: Init, seed: u64) -> ArrayD<f32> {
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Ones => ArrayD::from_elem(IxDyn(shape), 1.0),
        Init::FanInUniform { fan_in } => {
            let bound = (6.0 / fan_in.max(1) as f32).sqrt();
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
        }
    }
}

/// Stable 64-bit FNV-1a; keys parameter init to the parameter name so the
/// draw order of layers cannot change initialization.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
