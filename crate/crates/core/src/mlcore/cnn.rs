use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{InputShape, ModelInput};
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot, Scalar};
use crate::telemetry::N_PERCENTILES;

const KERNEL: usize = 9; // 3x3, same padding

/// Layer widths of the latency predictor.
///
/// `X_RH` goes through two 3×3 convolutions over the (tier, time) plane and
/// a dense layer; `X_LH` and `X_RC` each go through one dense layer. The
/// three branch outputs are concatenated and fused into the latent vector,
/// from which a linear head predicts p95..p99.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub shape: InputShape,
    pub conv1: usize,
    pub conv2: usize,
    pub rh_hidden: usize,
    pub lh_hidden: usize,
    pub rc_hidden: usize,
    pub latent: usize,
    pub outputs: usize,
}

impl CnnConfig {
    pub fn new(shape: InputShape) -> Self {
        CnnConfig {
            shape,
            conv1: 8,
            conv2: 16,
            rh_hidden: 32,
            lh_hidden: 16,
            rc_hidden: 16,
            latent: 32,
            outputs: N_PERCENTILES,
        }
    }

    fn positions(&self) -> usize {
        self.shape.n_tiers * self.shape.history
    }

    fn fused(&self) -> usize {
        self.rh_hidden + self.lh_hidden + self.rc_hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    conv1_w: Range<usize>,
    conv1_b: Range<usize>,
    conv2_w: Range<usize>,
    conv2_b: Range<usize>,
    rh_w: Range<usize>,
    rh_b: Range<usize>,
    lh_w: Range<usize>,
    lh_b: Range<usize>,
    rc_w: Range<usize>,
    rc_b: Range<usize>,
    fuse_w: Range<usize>,
    fuse_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(c: &CnnConfig) -> Self {
        let p = c.positions();
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let conv1_w = take(c.conv1 * c.shape.channels * KERNEL);
        let conv1_b = take(c.conv1);
        let conv2_w = take(c.conv2 * c.conv1 * KERNEL);
        let conv2_b = take(c.conv2);
        let rh_w = take(c.rh_hidden * c.conv2 * p);
        let rh_b = take(c.rh_hidden);
        let lh_w = take(c.lh_hidden * c.shape.lh_len());
        let lh_b = take(c.lh_hidden);
        let rc_w = take(c.rc_hidden * c.shape.rc_len());
        let rc_b = take(c.rc_hidden);
        let fuse_w = take(c.latent * c.fused());
        let fuse_b = take(c.latent);
        let out_w = take(c.outputs * c.latent);
        let out_b = take(c.outputs);
        Layout {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            rh_w,
            rh_b,
            lh_w,
            lh_b,
            rc_w,
            rc_b,
            fuse_w,
            fuse_b,
            out_w,
            out_b,
            total: at,
        }
    }

    /// `(weights, fan_in)` of every layer, for initialization.
    fn weight_blocks(&self, c: &CnnConfig) -> Vec<(Range<usize>, usize)> {
        vec![
            (self.conv1_w.clone(), c.shape.channels * KERNEL),
            (self.conv2_w.clone(), c.conv1 * KERNEL),
            (self.rh_w.clone(), c.conv2 * c.positions()),
            (self.lh_w.clone(), c.shape.lh_len()),
            (self.rc_w.clone(), c.shape.rc_len()),
            (self.fuse_w.clone(), c.fused()),
            (self.out_w.clone(), c.latent),
        ]
    }
}

/// For every output position, the input position under each of the nine
/// kernel taps (`u32::MAX` = zero padding).
fn neighbor_table(rows: usize, cols: usize) -> Vec<u32> {
    let mut table = Vec::with_capacity(rows * cols * KERNEL);
    for i in 0..rows as isize {
        for j in 0..cols as isize {
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (r, c) = (i + di, j + dj);
                    if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
                        table.push((r as usize * cols + c as usize) as u32);
                    } else {
                        table.push(u32::MAX);
                    }
                }
            }
        }
    }
    table
}

/// The latency predictor with all weights in one flat parameter vector.
///
/// Outputs are produced in a standardized space and mapped back to
/// milliseconds with a per-output affine transform fitted on the training
/// targets (identity until trained).
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<S> {
    pub config: CnnConfig,
    pub params: Vec<S>,
    pub out_offset: Vec<S>,
    pub out_scale: Vec<S>,
    layout: Layout,
    neighbors: Vec<u32>,
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<S> {
    /// Predicted p95..p99, ms.
    pub latency_ms: Vec<S>,
    /// Fused post-activation layer, the violation classifier's input.
    pub latent: Vec<S>,
}

impl<S: Scalar> Forward<S> {
    pub fn p99(&self) -> S {
        self.latency_ms[self.latency_ms.len() - 1]
    }
}

/// Reusable activation and gradient buffers.
#[derive(Debug, Clone)]
pub struct Workspace<S> {
    x0: Vec<S>,
    col1: Vec<S>,
    z1: Vec<S>,
    a1: Vec<S>,
    col2: Vec<S>,
    z2: Vec<S>,
    a2: Vec<S>,
    z_rh: Vec<S>,
    z_lh: Vec<S>,
    z_rc: Vec<S>,
    u: Vec<S>,
    z_f: Vec<S>,
    latent: Vec<S>,
    y: Vec<S>,
    // backward
    d_lat: Vec<S>,
    d_u: Vec<S>,
    d_a2: Vec<S>,
    d_col2: Vec<S>,
    d_a1: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    pub fn new(c: &CnnConfig) -> Self {
        let p = c.positions();
        let z = |n: usize| vec![S::zero(); n];
        Workspace {
            x0: z(c.shape.channels * p),
            col1: z(p * c.shape.channels * KERNEL),
            z1: z(c.conv1 * p),
            a1: z(c.conv1 * p),
            col2: z(p * c.conv1 * KERNEL),
            z2: z(c.conv2 * p),
            a2: z(c.conv2 * p),
            z_rh: z(c.rh_hidden),
            z_lh: z(c.lh_hidden),
            z_rc: z(c.rc_hidden),
            u: z(c.fused()),
            z_f: z(c.latent),
            latent: z(c.latent),
            y: z(c.outputs),
            d_lat: z(c.latent),
            d_u: z(c.fused()),
            d_a2: z(c.conv2 * p),
            d_col2: z(p * c.conv1 * KERNEL),
            d_a1: z(c.conv1 * p),
        }
    }

    /// Which units were active on the last forward pass. Two passes with
    /// equal signatures lie on the same linear piece of the network.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for z in [&self.z1, &self.z2, &self.z_rh, &self.z_lh, &self.z_rc, &self.z_f] {
            sig.extend(z.iter().map(|&v| v > S::zero()));
        }
        sig
    }

    pub fn latent(&self) -> &[S] {
        &self.latent
    }

    /// Raw (standardized) outputs of the last forward pass.
    pub fn raw_output(&self) -> &[S] {
        &self.y
    }
}

/// Builds im2col rows: `col[p * (ch * 9) + c * 9 + k] = x[c * P + nb[p][k]]`.
fn im2col<S: Scalar>(x: &[S], channels: usize, positions: usize, nb: &[u32], col: &mut [S]) {
    let width = channels * KERNEL;
    for p in 0..positions {
        let row = &mut col[p * width..(p + 1) * width];
        let taps = &nb[p * KERNEL..(p + 1) * KERNEL];
        for c in 0..channels {
            let plane = &x[c * positions..(c + 1) * positions];
            for (k, &q) in taps.iter().enumerate() {
                row[c * KERNEL + k] = if q == u32::MAX { S::zero() } else { plane[q as usize] };
            }
        }
    }
}

/// Scatter-add of im2col gradients back onto the input planes.
fn col2im<S: Scalar>(dcol: &[S], channels: usize, positions: usize, nb: &[u32], dx: &mut [S]) {
    dx.iter_mut().for_each(|v| *v = S::zero());
    let width = channels * KERNEL;
    for p in 0..positions {
        let row = &dcol[p * width..(p + 1) * width];
        let taps = &nb[p * KERNEL..(p + 1) * KERNEL];
        for c in 0..channels {
            for (k, &q) in taps.iter().enumerate() {
                if q != u32::MAX {
                    dx[c * positions + q as usize] += row[c * KERNEL + k];
                }
            }
        }
    }
}

/// `out[o] = b[o] + W[o, :] · x` for a row-major `W`.
#[inline]
fn dense<S: Scalar>(w: &[S], b: &[S], x: &[S], out: &mut [S]) {
    let n = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        *slot = b[o] + dot(&w[o * n..(o + 1) * n], x);
    }
}

#[inline]
fn relu_into<S: Scalar>(z: &[S], a: &mut [S]) {
    for (ai, &zi) in a.iter_mut().zip(z) {
        *ai = if zi > S::zero() { zi } else { S::zero() };
    }
}

/// Gradient of a dense layer: accumulates `dW += d ⊗ x`, `db += d`, and,
/// if requested, writes `dx = Wᵀ d`.
#[inline]
fn dense_backward<S: Scalar>(w: &[S], x: &[S], d: &[S], gw: &mut [S], gb: &mut [S], dx: Option<&mut [S]>) {
    let n = x.len();
    for (o, &g) in d.iter().enumerate() {
        if g == S::zero() {
            continue;
        }
        gb[o] += g;
        axpy(g, x, &mut gw[o * n..(o + 1) * n]);
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = S::zero());
        for (o, &g) in d.iter().enumerate() {
            if g != S::zero() {
                axpy(g, &w[o * n..(o + 1) * n], dx);
            }
        }
    }
}

impl<S: Scalar> CnnModel<S> {
    /// He-initialized weights, zero biases, identity output transform.
    pub fn new(config: CnnConfig, seed: u64) -> Self {
        let mut model = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (range, fan_in) in model.layout.weight_blocks(&config) {
            let std = (2.0 / fan_in as f64).sqrt();
            for p in &mut model.params[range] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = S::of(z * std);
            }
        }
        model
    }

    pub fn zeros(config: CnnConfig) -> Self {
        let layout = Layout::new(&config);
        CnnModel {
            params: vec![S::zero(); layout.total],
            out_offset: vec![S::zero(); config.outputs],
            out_scale: vec![S::one(); config.outputs],
            neighbors: neighbor_table(config.shape.n_tiers, config.shape.history),
            layout,
            config,
        }
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(config: CnnConfig, params: Vec<S>, out_offset: Vec<S>, out_scale: Vec<S>) -> Result<Self> {
        let mut m = Self::zeros(config);
        if params.len() != m.params.len() || out_offset.len() != config.outputs || out_scale.len() != config.outputs {
            return Err(Error::config(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                m.params.len()
            )));
        }
        if params
            .iter()
            .chain(&out_offset)
            .chain(&out_scale)
            .any(|v| !v.is_finite())
        {
            return Err(Error::numeric("non-finite model parameter"));
        }
        m.params = params;
        m.out_offset = out_offset;
        m.out_scale = out_scale;
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Bytes taken by the parameters at this precision.
    pub fn size_bytes(&self) -> usize {
        self.params.len() * std::mem::size_of::<S>()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent
    }

    pub fn output_bias_range(&self) -> Range<usize> {
        self.layout.out_b.clone()
    }

    pub fn cast<T: Scalar>(&self) -> CnnModel<T> {
        CnnModel {
            config: self.config,
            params: crate::scalar::cast_vec(&self.params),
            out_offset: crate::scalar::cast_vec(&self.out_offset),
            out_scale: crate::scalar::cast_vec(&self.out_scale),
            layout: self.layout.clone(),
            neighbors: self.neighbors.clone(),
        }
    }

    pub fn workspace(&self) -> Workspace<S> {
        Workspace::new(&self.config)
    }

    /// Full forward pass; shapes are checked.
    pub fn forward(&self, input: &ModelInput<S>) -> Result<Forward<S>> {
        self.config.shape.check(&input.shape)?;
        input.check()?;
        let mut ws = self.workspace();
        self.forward_ws(&input.rh, &input.lh, &input.rc, &mut ws);
        Ok(Forward {
            latency_ms: self.denormalize(&ws.y),
            latent: ws.latent.clone(),
        })
    }

    pub(crate) fn denormalize(&self, raw: &[S]) -> Vec<S> {
        raw.iter()
            .zip(self.out_offset.iter().zip(&self.out_scale))
            .map(|(&r, (&o, &s))| o + s * r)
            .collect()
    }

    /// Forward pass into `ws`, unchecked slice lengths.
    pub fn forward_ws(&self, rh: &[S], lh: &[S], rc: &[S], ws: &mut Workspace<S>) {
        let c = &self.config;
        let l = &self.layout;
        let pr = &self.params;
        let (n, t, ch) = (c.shape.n_tiers, c.shape.history, c.shape.channels);
        let p = c.positions();

        // [tier][time][channel] -> [channel][tier*time]
        for tier in 0..n {
            for step in 0..t {
                let src = (tier * t + step) * ch;
                for k in 0..ch {
                    ws.x0[k * p + tier * t + step] = rh[src + k];
                }
            }
        }

        im2col(&ws.x0, ch, p, &self.neighbors, &mut ws.col1);
        conv_forward(
            &pr[l.conv1_w.clone()],
            &pr[l.conv1_b.clone()],
            &ws.col1,
            ch * KERNEL,
            p,
            &mut ws.z1,
        );
        relu_into(&ws.z1, &mut ws.a1);

        im2col(&ws.a1, c.conv1, p, &self.neighbors, &mut ws.col2);
        conv_forward(
            &pr[l.conv2_w.clone()],
            &pr[l.conv2_b.clone()],
            &ws.col2,
            c.conv1 * KERNEL,
            p,
            &mut ws.z2,
        );
        relu_into(&ws.z2, &mut ws.a2);

        dense(&pr[l.rh_w.clone()], &pr[l.rh_b.clone()], &ws.a2, &mut ws.z_rh);
        dense(&pr[l.lh_w.clone()], &pr[l.lh_b.clone()], lh, &mut ws.z_lh);
        dense(&pr[l.rc_w.clone()], &pr[l.rc_b.clone()], rc, &mut ws.z_rc);
        let (h1, rest) = ws.u.split_at_mut(c.rh_hidden);
        let (h2, h3) = rest.split_at_mut(c.lh_hidden);
        relu_into(&ws.z_rh, h1);
        relu_into(&ws.z_lh, h2);
        relu_into(&ws.z_rc, h3);

        dense(&pr[l.fuse_w.clone()], &pr[l.fuse_b.clone()], &ws.u, &mut ws.z_f);
        relu_into(&ws.z_f, &mut ws.latent);
        dense(&pr[l.out_w.clone()], &pr[l.out_b.clone()], &ws.latent, &mut ws.y);
    }

    /// Backpropagates `d_y` (gradient w.r.t. the raw outputs of the last
    /// `forward_ws` on the same inputs) and accumulates into `grad`.
    pub fn backward_ws(&self, lh: &[S], rc: &[S], d_y: &[S], ws: &mut Workspace<S>, grad: &mut [S]) {
        let c = &self.config;
        let l = &self.layout;
        let pr = &self.params;
        let p = c.positions();

        {
            let (gw, gb) = split_pair(grad, &l.out_w, &l.out_b);
            dense_backward(&pr[l.out_w.clone()], &ws.latent, d_y, gw, gb, Some(&mut ws.d_lat));
        }
        mask_relu(&ws.z_f, &mut ws.d_lat);
        {
            let (gw, gb) = split_pair(grad, &l.fuse_w, &l.fuse_b);
            dense_backward(&pr[l.fuse_w.clone()], &ws.u, &ws.d_lat, gw, gb, Some(&mut ws.d_u));
        }
        let (d_rh, rest) = ws.d_u.split_at_mut(c.rh_hidden);
        let (d_lh, d_rc) = rest.split_at_mut(c.lh_hidden);
        mask_relu(&ws.z_rh, d_rh);
        mask_relu(&ws.z_lh, d_lh);
        mask_relu(&ws.z_rc, d_rc);
        {
            let (gw, gb) = split_pair(grad, &l.lh_w, &l.lh_b);
            dense_backward(&pr[l.lh_w.clone()], lh, d_lh, gw, gb, None);
        }
        {
            let (gw, gb) = split_pair(grad, &l.rc_w, &l.rc_b);
            dense_backward(&pr[l.rc_w.clone()], rc, d_rc, gw, gb, None);
        }
        {
            let (gw, gb) = split_pair(grad, &l.rh_w, &l.rh_b);
            dense_backward(&pr[l.rh_w.clone()], &ws.a2, d_rh, gw, gb, Some(&mut ws.d_a2));
        }

        mask_relu(&ws.z2, &mut ws.d_a2);
        {
            let (gw, gb) = split_pair(grad, &l.conv2_w, &l.conv2_b);
            conv_backward(
                &pr[l.conv2_w.clone()],
                &ws.col2,
                &ws.d_a2,
                c.conv1 * KERNEL,
                p,
                gw,
                gb,
                Some(&mut ws.d_col2),
            );
        }
        col2im(&ws.d_col2, c.conv1, p, &self.neighbors, &mut ws.d_a1);
        mask_relu(&ws.z1, &mut ws.d_a1);
        {
            let (gw, gb) = split_pair(grad, &l.conv1_w, &l.conv1_b);
            conv_backward(
                &pr[l.conv1_w.clone()],
                &ws.col1,
                &ws.d_a1,
                c.shape.channels * KERNEL,
                p,
                gw,
                gb,
                None,
            );
        }
    }

    /// Per-sample squared error `Σ_j ((y_j - ŷ_j) / scale_j)^2` and its
    /// gradient, accumulated into `grad` with weight `weight`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        rh: &[S],
        lh: &[S],
        rc: &[S],
        target_ms: &[S],
        weight: S,
        ws: &mut Workspace<S>,
        grad: &mut [S],
    ) -> S {
        self.forward_ws(rh, lh, rc, ws);
        let mut d_y = [S::zero(); 16];
        let outputs = self.config.outputs;
        let mut loss = S::zero();
        for j in 0..outputs {
            let target = (target_ms[j] - self.out_offset[j]) / self.out_scale[j];
            let err = ws.y[j] - target;
            loss += err * err;
            d_y[j] = S::of(2.0) * err * weight;
        }
        self.backward_ws(lh, rc, &d_y[..outputs], ws, grad);
        loss
    }

    /// Loss only (no gradient).
    pub fn loss(&self, rh: &[S], lh: &[S], rc: &[S], target_ms: &[S], ws: &mut Workspace<S>) -> S {
        self.forward_ws(rh, lh, rc, ws);
        (0..self.config.outputs)
            .map(|j| {
                let target = (target_ms[j] - self.out_offset[j]) / self.out_scale[j];
                let err = ws.y[j] - target;
                err * err
            })
            .sum()
    }
}

fn split_pair<'a, S>(grad: &'a mut [S], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [S], &'a mut [S]) {
    debug_assert_eq!(w.end, b.start);
    let (left, right) = grad[w.start..b.end].split_at_mut(w.len());
    (left, right)
}

#[inline]
fn mask_relu<S: Scalar>(z: &[S], d: &mut [S]) {
    for (di, &zi) in d.iter_mut().zip(z) {
        if zi <= S::zero() {
            *di = S::zero();
        }
    }
}

/// `z[f * P + p] = b[f] + W[f, :] · col[p, :]`.
fn conv_forward<S: Scalar>(w: &[S], b: &[S], col: &[S], width: usize, positions: usize, z: &mut [S]) {
    for (f, &bias) in b.iter().enumerate() {
        let wf = &w[f * width..(f + 1) * width];
        let zf = &mut z[f * positions..(f + 1) * positions];
        for (p, slot) in zf.iter_mut().enumerate() {
            *slot = bias + dot(wf, &col[p * width..(p + 1) * width]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<S: Scalar>(
    w: &[S],
    col: &[S],
    dz: &[S],
    width: usize,
    positions: usize,
    gw: &mut [S],
    gb: &mut [S],
    mut dcol: Option<&mut [S]>,
) {
    if let Some(dc) = dcol.as_deref_mut() {
        dc.iter_mut().for_each(|v| *v = S::zero());
    }
    for f in 0..gb.len() {
        let dzf = &dz[f * positions..(f + 1) * positions];
        let wf = &w[f * width..(f + 1) * width];
        let gwf = &mut gw[f * width..(f + 1) * width];
        let mut bias = S::zero();
        for (p, &g) in dzf.iter().enumerate() {
            if g == S::zero() {
                continue;
            }
            bias += g;
            axpy(g, &col[p * width..(p + 1) * width], gwf);
            if let Some(dc) = dcol.as_deref_mut() {
                axpy(g, wf, &mut dc[p * width..(p + 1) * width]);
            }
        }
        gb[f] += bias;
    }
}
