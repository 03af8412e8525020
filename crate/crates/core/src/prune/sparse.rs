//! Compressed-row inference for pruned dense layers.
//!
//! Runs of dense and ReLU layers execute in a transposed "lane" layout:
//! `LANES` examples side by side, so every kept weight costs one contiguous
//! multiply-add over the lanes and activations never leave the cache between
//! layers. `ε` is drawn only at kept positions, in ascending kernel order, so
//! each sample reproduces the masked dense draw exactly.

use std::ops::Range;
use std::time::Instant;

use crate::error::{BnnError, Result};
use crate::infer::{mc_with, PredictiveSamples, DEFAULT_CHUNK};
use crate::layers::{LayerNoise, LayerSpec, ModelGraph, Noise, Sampling, VariationalParam};
use crate::scalar::Scalar;
use crate::tensor::{softplus, Tensor};

/// Examples processed together.
const LANES: usize = 64;
/// Inputs per cache block: `BLOCK × LANES` activations and their sign-flipped
/// copies stay resident while every output row consumes them.
const BLOCK: usize = 64;

/// CSR copy of the kept `μ` and `σ` of one `[in, out]` kernel, stored
/// transposed: row `j` lists the kept inputs feeding output `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseKernel<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    /// `block_ptr[j·(blocks+1) + b]` is the first entry of row `j` whose input
    /// lies in block `b` or later.
    block_ptr: Vec<usize>,
    /// Kernel position (`i·out + j`) of each kept weight, ascending.
    positions: Vec<u64>,
    /// Storage slot of the weight at `positions[k]`.
    slots: Vec<u32>,
}

/// Per-lane-chunk work buffers, reused across chunks and layers.
#[derive(Default)]
struct Scratch<T> {
    xst: Vec<T>,
    out_signs: Vec<T>,
    pert: Vec<T>,
    bits: Vec<T>,
}

impl<T: Scalar> SparseKernel<T> {
    pub fn from_param(p: &VariationalParam<T>) -> Result<Self> {
        let &[inputs, outputs] = p.shape() else {
            return Err(BnnError::dim("sparse kernel", p.shape(), &[0, 0]));
        };
        let mut k = Self {
            inputs,
            outputs,
            row_ptr: Vec::with_capacity(outputs + 1),
            col_idx: Vec::new(),
            mu: Vec::new(),
            sigma: Vec::new(),
            block_ptr: Vec::new(),
            positions: Vec::new(),
            slots: Vec::new(),
        };
        k.row_ptr.push(0);
        for j in 0..outputs {
            for i in 0..inputs {
                let at = i * outputs + j;
                if p.is_kept(at) {
                    k.col_idx.push(i as u32);
                    k.mu.push(p.mu.data()[at]);
                    k.sigma.push(softplus(p.rho.data()[at]));
                    k.positions.push(at as u64);
                }
            }
            k.row_ptr.push(k.mu.len());
        }
        let blocks = inputs.div_ceil(BLOCK);
        for j in 0..outputs {
            let row = k.row_ptr[j]..k.row_ptr[j + 1];
            for b in 0..=blocks {
                let first = k.col_idx[row.clone()].partition_point(|&i| (i as usize) < b * BLOCK);
                k.block_ptr.push(row.start + first);
            }
        }
        let mut order: Vec<u32> = (0..k.positions.len() as u32).collect();
        order.sort_unstable_by_key(|&n| k.positions[n as usize]);
        k.positions = order.iter().map(|&n| k.positions[n as usize]).collect();
        k.slots = order;
        Ok(k)
    }

    pub fn nnz(&self) -> usize {
        self.mu.len()
    }

    /// `σ∘ε` in storage order, with `ε` drawn at ascending kernel positions.
    fn delta(&self, noise: &LayerNoise) -> Vec<T> {
        let mut eps: Vec<T> = Vec::with_capacity(self.nnz());
        noise.weights.gather_normal(self.positions.iter().copied(), &mut eps);
        let mut delta = vec![T::zero(); self.nnz()];
        for (&slot, e) in self.slots.iter().zip(eps) {
            delta[slot as usize] = e * self.sigma[slot as usize];
        }
        delta
    }

    /// Same contract as the dense flipout layer, without a cache.
    pub fn forward(&self, x: &Tensor<T>, bias: Option<&Tensor<T>>, noise: Option<&LayerNoise>) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[1] != self.inputs {
            return Err(BnnError::dim("sparse dense layer", x.shape(), &[self.inputs, self.outputs]));
        }
        let delta = noise.map(|n| self.delta(n));
        let draw = noise.zip(delta.as_deref());
        let mut out = Tensor::zeros(&[x.shape()[0], self.outputs]);
        let mut scratch = Scratch::default();
        let mut yt = Vec::new();
        for_lane_chunks(x, &mut out, |xt, first, nb| {
            self.forward_lanes(xt, first, nb, bias, draw, &mut scratch, &mut yt);
            std::mem::swap(xt, &mut yt);
            Ok(())
        })?;
        Ok(out)
    }

    /// One lane chunk: `xt` holds `inputs × LANES` activations of the examples
    /// with chunk rows `first..first + nb`; `yt` receives `outputs × LANES`.
    #[allow(clippy::too_many_arguments)]
    fn forward_lanes(
        &self,
        xt: &[T],
        first: usize,
        nb: usize,
        bias: Option<&Tensor<T>>,
        draw: Option<(&LayerNoise, &[T])>,
        s: &mut Scratch<T>,
        yt: &mut Vec<T>,
    ) {
        let (n_in, n_out) = (self.inputs, self.outputs);
        yt.clear();
        yt.resize(n_out * LANES, T::zero());
        if let Some((noise, _)) = draw {
            let width = n_in + n_out;
            s.xst.clear();
            s.xst.resize(n_in * LANES, T::zero());
            s.out_signs.clear();
            s.out_signs.resize(n_out * LANES, T::zero());
            s.pert.clear();
            s.pert.resize(n_out * LANES, T::zero());
            s.bits.resize(width, T::zero());
            for n in 0..nb {
                let base = (noise.example_offset + (first + n) as u64) * width as u64;
                noise.signs.fill_sign(base, &mut s.bits);
                for (i, &b) in s.bits[..n_in].iter().enumerate() {
                    s.xst[i * LANES + n] = xt[i * LANES + n] * b;
                }
                for (j, &b) in s.bits[n_in..].iter().enumerate() {
                    s.out_signs[j * LANES + n] = b;
                }
            }
        }
        let kernel = RowKernel::detect();
        let blocks = n_in.div_ceil(BLOCK);
        for b in 0..blocks {
            for j in 0..n_out {
                let at = j * (blocks + 1) + b;
                let (lo, hi) = (self.block_ptr[at], self.block_ptr[at + 1]);
                if lo == hi {
                    continue;
                }
                let cols = &self.col_idx[lo..hi];
                kernel.run(lane_row(yt, j), xt, cols, &self.mu[lo..hi]);
                if let Some((_, delta)) = draw {
                    kernel.run(lane_row(&mut s.pert, j), &s.xst, cols, &delta[lo..hi]);
                }
            }
        }
        if draw.is_some() {
            for ((y, &p), &r) in yt.iter_mut().zip(&s.pert).zip(&s.out_signs) {
                *y += p * r;
            }
        }
        if let Some(bias) = bias {
            for (row, &b) in yt.chunks_exact_mut(LANES).zip(bias.data()) {
                row.iter_mut().for_each(|v| *v += b);
            }
        }
    }
}

fn lane_row<T>(buf: &mut [T], j: usize) -> &mut [T; LANES] {
    (&mut buf[j * LANES..(j + 1) * LANES]).try_into().expect("LANES wide")
}

/// Transposes `x` into lane chunks, runs `f(xt, first_row, nb)` and writes the
/// transposed result back into `out`.
fn for_lane_chunks<T: Scalar>(
    x: &Tensor<T>,
    out: &mut Tensor<T>,
    mut f: impl FnMut(&mut Vec<T>, usize, usize) -> Result<()>,
) -> Result<()> {
    let (batch, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = out.shape()[1];
    let mut xt = Vec::new();
    for start in (0..batch).step_by(LANES) {
        let nb = LANES.min(batch - start);
        xt.clear();
        xt.resize(n_in * LANES, T::zero());
        for i0 in (0..n_in).step_by(16) {
            let i1 = (i0 + 16).min(n_in);
            for n in 0..nb {
                for (i, &v) in (i0..i1).zip(&x.row(start + n)[i0..i1]) {
                    xt[i * LANES + n] = v;
                }
            }
        }
        f(&mut xt, start, nb)?;
        debug_assert_eq!(xt.len(), n_out * LANES);
        let od = out.data_mut();
        for j0 in (0..n_out).step_by(16) {
            let j1 = (j0 + 16).min(n_out);
            for n in 0..nb {
                for j in j0..j1 {
                    od[(start + n) * n_out + j] = xt[j * LANES + n];
                }
            }
        }
    }
    Ok(())
}

/// `acc += Σ_k w_k · xt[cols_k]`, each term a `LANES`-wide multiply-add.
#[inline(always)]
fn accumulate<T: Scalar>(acc: &mut [T; LANES], xt: &[T], cols: &[u32], w: &[T]) {
    let mut local = *acc;
    for (&i, &wk) in cols.iter().zip(w) {
        let row: &[T; LANES] = xt[i as usize * LANES..][..LANES].try_into().expect("LANES wide");
        for (a, &v) in local.iter_mut().zip(row) {
            *a += wk * v;
        }
    }
    *acc = local;
}

/// [`accumulate`] with fused multiply-adds, which only pay off when the CPU has them.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn accumulate_fma<T: Scalar>(acc: &mut [T; LANES], xt: &[T], cols: &[u32], w: &[T]) {
    let mut local = *acc;
    for (&i, &wk) in cols.iter().zip(w) {
        let row: &[T; LANES] = xt[i as usize * LANES..][..LANES].try_into().expect("LANES wide");
        for (a, &v) in local.iter_mut().zip(row) {
            *a = wk.mul_add(v, *a);
        }
    }
    *acc = local;
}

#[derive(Clone, Copy)]
enum RowKernel {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Fma,
}

impl RowKernel {
    fn detect() -> Self {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            return RowKernel::Fma;
        }
        RowKernel::Portable
    }

    fn run<T: Scalar>(self, acc: &mut [T; LANES], xt: &[T], cols: &[u32], w: &[T]) {
        match self {
            RowKernel::Portable => accumulate(acc, xt, cols, w),
            // SAFETY: only selected when the CPU reports AVX2 and FMA.
            #[cfg(target_arch = "x86_64")]
            RowKernel::Fma => unsafe { accumulate_fma(acc, xt, cols, w) },
        }
    }
}

/// Sparse kernels for every dense-flipout layer of one pruned graph.
///
/// Conv layers keep running through the masked dense path.
#[derive(Clone, Debug)]
pub struct SparseModel<T> {
    pub kernels: Vec<Option<SparseKernel<T>>>,
    fingerprints: Vec<u32>,
}

fn fingerprint<T: Scalar>(p: &VariationalParam<T>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    let mut buf = Vec::with_capacity(p.len() * 2 * T::DTYPE.size_of());
    for (&m, &r) in p.mu.data().iter().zip(p.rho.data()) {
        m.write_le(&mut buf);
        r.write_le(&mut buf);
    }
    h.update(&buf);
    if let Some(kept) = &p.kept {
        h.update(&kept.iter().map(|&k| u8::from(k)).collect::<Vec<_>>());
    }
    h.finalize()
}

impl<T: Scalar> SparseModel<T> {
    pub fn from_graph(graph: &ModelGraph<T>) -> Self {
        let mut kernels = Vec::with_capacity(graph.layers().len());
        let mut fingerprints = Vec::with_capacity(graph.layers().len());
        for layer in graph.layers() {
            match (&layer.spec, &layer.param) {
                (LayerSpec::DenseFlipout { .. }, Some(p)) => {
                    kernels.push(Some(SparseKernel::from_param(p).expect("dense kernels are rank 2")));
                    fingerprints.push(fingerprint(p));
                }
                _ => {
                    kernels.push(None);
                    fingerprints.push(0);
                }
            }
        }
        Self { kernels, fingerprints }
    }

    pub fn nnz(&self) -> usize {
        self.kernels.iter().flatten().map(SparseKernel::nnz).sum()
    }

    /// Fails unless this conversion was made from `graph` as it is now.
    pub fn check(&self, graph: &ModelGraph<T>) -> Result<()> {
        if self.kernels.len() != graph.layers().len() {
            return Err(BnnError::Usage("sparse conversion belongs to a different graph".into()));
        }
        for ((layer, k), &fp) in graph.layers().iter().zip(&self.kernels).zip(&self.fingerprints) {
            if let (LayerSpec::DenseFlipout { .. }, Some(p)) = (&layer.spec, &layer.param) {
                if k.is_none() || fingerprint(p) != fp {
                    return Err(BnnError::Usage(format!(
                        "layer {} changed since sparse conversion; convert again",
                        layer.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// `σ∘ε` of every sparse layer under `noise`.
    fn deltas(&self, noise: &Noise) -> Vec<Option<Vec<T>>> {
        self.kernels
            .iter()
            .enumerate()
            .map(|(i, k)| k.as_ref().map(|k| k.delta(&noise.layer(i))))
            .collect()
    }
}

/// Runs layers `range` (sparse dense layers and ReLUs) in lane layout.
fn run_segment<T: Scalar>(
    graph: &ModelGraph<T>,
    sparse: &SparseModel<T>,
    range: Range<usize>,
    h: &Tensor<T>,
    draw: Option<(&Noise, &[Option<Vec<T>>])>,
) -> Result<Tensor<T>> {
    let n_out = range
        .clone()
        .rev()
        .find_map(|i| sparse.kernels[i].as_ref().map(|k| k.outputs))
        .expect("segment starts with a sparse layer");
    if h.rank() != 2 {
        return Err(BnnError::dim("sparse dense layer", h.shape(), &[0, 0]));
    }
    let mut out = Tensor::zeros(&[h.shape()[0], n_out]);
    let mut scratch = Scratch::default();
    let mut yt = Vec::new();
    for_lane_chunks(h, &mut out, |xt, first, nb| {
        for i in range.clone() {
            let layer = &graph.layers()[i];
            match &sparse.kernels[i] {
                Some(k) => {
                    if xt.len() != k.inputs * LANES {
                        return Err(BnnError::dim("sparse dense layer", &[nb, xt.len() / LANES], &[k.inputs, k.outputs]));
                    }
                    let layer_noise = draw.map(|(n, _)| n.layer(i));
                    let layer_draw = layer_noise
                        .as_ref()
                        .zip(draw.and_then(|(_, d)| d[i].as_deref()));
                    k.forward_lanes(xt, first, nb, layer.bias.as_ref(), layer_draw, &mut scratch, &mut yt);
                    std::mem::swap(xt, &mut yt);
                }
                None => xt.iter_mut().for_each(|v| *v = v.max(T::zero())),
            }
        }
        Ok(())
    })?;
    Ok(out)
}

fn forward_with<T: Scalar>(
    graph: &ModelGraph<T>,
    sparse: &SparseModel<T>,
    x: &Tensor<T>,
    sampling: &Sampling,
    deltas: Option<&[Option<Vec<T>>]>,
) -> Result<Tensor<T>> {
    graph.check_input(x)?;
    let draw = match sampling {
        Sampling::Mean => None,
        Sampling::Flipout(n) => Some((n, deltas.expect("deltas for a stochastic pass"))),
    };
    let layers = graph.layers();
    let mut h = x.clone();
    let mut i = 0;
    while i < layers.len() {
        if sparse.kernels[i].is_some() {
            let mut end = i + 1;
            while end < layers.len()
                && (sparse.kernels[end].is_some() || matches!(layers[end].spec, LayerSpec::Relu))
            {
                end += 1;
            }
            h = run_segment(graph, sparse, i..end, &h, draw)?;
            i = end;
        } else {
            h = graph.apply_layer(i, h, sampling, false)?.0;
            i += 1;
        }
    }
    Ok(h)
}

/// Forward pass that uses the sparse kernels for dense layers.
pub fn sparse_forward<T: Scalar>(
    graph: &ModelGraph<T>,
    sparse: &SparseModel<T>,
    x: &Tensor<T>,
    sampling: &Sampling,
) -> Result<Tensor<T>> {
    sparse.check(graph)?;
    let deltas = match sampling {
        Sampling::Mean => None,
        Sampling::Flipout(n) => Some(sparse.deltas(n)),
    };
    forward_with(graph, sparse, x, sampling, deltas.as_deref())
}

type Deltas<T> = Vec<Option<Vec<T>>>;

/// Monte-Carlo inference through the sparse path; also returns wall seconds.
///
/// `σ∘ε` is drawn once per sample and shared by all chunks.
pub fn sparse_infer<T: Scalar>(
    graph: &ModelGraph<T>,
    sparse: &SparseModel<T>,
    x: &Tensor<T>,
    n_samples: usize,
    seed: u64,
    labels: Option<Vec<usize>>,
) -> Result<(PredictiveSamples, f64)> {
    sparse.check(graph)?;
    let started = Instant::now();
    // σ∘ε of the current sample, keyed by its noise stream.
    let mut cached: Option<((u64, u64), Deltas<T>)> = None;
    let (classes, probs) = mc_with(x, graph.input_shape(), n_samples, seed, DEFAULT_CHUNK, |xs, s| {
        let deltas = match s {
            Sampling::Mean => None,
            Sampling::Flipout(n) => {
                let key = (n.seed, n.stream);
                if cached.as_ref().is_none_or(|(k, _)| *k != key) {
                    cached = Some((key, sparse.deltas(n)));
                }
                cached.as_ref().map(|(_, d)| d.as_slice())
            }
        };
        forward_with(graph, sparse, xs, s, deltas)
    })?;
    let runtime = started.elapsed().as_secs_f64();
    Ok((PredictiveSamples::new(n_samples, x.shape()[0], classes, probs, labels)?, runtime))
}
