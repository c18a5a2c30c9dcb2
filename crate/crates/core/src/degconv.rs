//! Direction-guided edge-gated convolution.
//!
//! Feature maps are tiled into non-overlapping views. Each view yields an
//! orientation histogram (Sobel angles, constrained to [0, pi], binned per
//! cell and weighted by bin-center angle) that a fixed embedding pipeline
//! turns into a per-channel prior vector. The prior biases a sigmoid gate
//! over a lightweight strip-convolution branch. Views are reassembled and
//! smoothed by one more edge convolution.
//!
//! The histogram is a hard-binned count, so the embedding path carries no
//! useful gradient; its pipeline runs outside the tape and its weights stay
//! fixed at their seeded values. Training gradients flow through the gate and
//! feature branches only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{paste_grid, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::kernels::{self as k, Conv2dSpec};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PI: f64 = std::f64::consts::PI;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegConfig {
    pub view: (usize, usize),
    pub cell: (usize, usize),
    pub nbins: usize,
    pub strip_k: usize,
    pub reduce_r: usize,
}

impl Default for DegConfig {
    fn default() -> Self {
        DegConfig { view: (32, 32), cell: (8, 8), nbins: 180, strip_k: 5, reduce_r: 4 }
    }
}

impl DegConfig {
    /// Clamp view and cell to an actual stage resolution so every stage gets
    /// a valid tiling (small late-stage maps become a single view).
    pub fn for_resolution(&self, h: usize, w: usize) -> DegConfig {
        let view = (self.view.0.min(h).max(1), self.view.1.min(w).max(1));
        let cell = (self.cell.0.min(view.0).max(1), self.cell.1.min(view.1).max(1));
        DegConfig { view, cell, ..*self }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.nbins == 0 {
            return Err(Error::config("nbins must be >= 1"));
        }
        if self.strip_k % 2 == 0 {
            return Err(Error::config(format!("strip kernel must be odd, got {}", self.strip_k)));
        }
        if self.view.0 % self.cell.0 != 0 || self.view.1 % self.cell.1 != 0 {
            return Err(Error::config(format!(
                "view {:?} not divisible by cell {:?}",
                self.view, self.cell
            )));
        }
        if channels % self.reduce_r != 0 {
            return Err(Error::config(format!(
                "channels {channels} not divisible by reduction {}",
                self.reduce_r
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// view partition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct GridMeta {
    pub grid: (usize, usize),
    pub view: (usize, usize),
    pub original: (usize, usize),
    pub padded: (usize, usize),
}

impl GridMeta {
    pub fn n_views(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

fn grid_meta(h: usize, w: usize, view: (usize, usize)) -> GridMeta {
    let gh = h.div_ceil(view.0);
    let gw = w.div_ceil(view.1);
    GridMeta { grid: (gh, gw), view, original: (h, w), padded: (gh * view.0, gw * view.1) }
}

/// Non-overlapping tiling of a raw map, reflect-padding the bottom/right
/// remainder. Views come out in row-major grid order.
pub fn partition<T: Scalar>(x: &Tensor<T>, view: (usize, usize)) -> (Vec<Tensor<T>>, GridMeta) {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let meta = grid_meta(h, w, view);
    let padded = if meta.padded != (h, w) {
        k::pad_reflect2d(x, (0, meta.padded.0 - h, 0, meta.padded.1 - w))
    } else {
        x.clone()
    };
    let mut views = Vec::with_capacity(meta.n_views());
    for gy in 0..meta.grid.0 {
        for gx in 0..meta.grid.1 {
            views.push(k::crop2d(&padded, gy * view.0, gx * view.1, view.0, view.1));
        }
    }
    (views, meta)
}

/// Left inverse of [`partition`]: paste the grid and crop the padding away.
pub fn restore<T: Scalar>(views: &[Tensor<T>], meta: &GridMeta) -> Tensor<T> {
    let refs: Vec<&Tensor<T>> = views.iter().collect();
    let pasted = k::paste_grid(&refs, meta.grid.0, meta.grid.1);
    if meta.padded != meta.original {
        k::crop2d(&pasted, 0, 0, meta.original.0, meta.original.1)
    } else {
        pasted
    }
}

/// Tape-tracked partition.
pub fn partition_vars<'t, T: Scalar>(
    x: Var<'t, T>,
    view: (usize, usize),
) -> (Vec<Var<'t, T>>, GridMeta) {
    let shape = x.shape();
    let (h, w) = (shape[1], shape[2]);
    let meta = grid_meta(h, w, view);
    let padded = if meta.padded != (h, w) {
        x.pad_reflect2d((0, meta.padded.0 - h, 0, meta.padded.1 - w))
    } else {
        x
    };
    let mut views = Vec::with_capacity(meta.n_views());
    for gy in 0..meta.grid.0 {
        for gx in 0..meta.grid.1 {
            views.push(padded.crop2d(gy * view.0, gx * view.1, view.0, view.1));
        }
    }
    (views, meta)
}

/// Tape-tracked restore.
pub fn restore_vars<'t, T: Scalar>(views: &[Var<'t, T>], meta: &GridMeta) -> Var<'t, T> {
    let pasted = paste_grid(views, meta.grid.0, meta.grid.1);
    if meta.padded != meta.original {
        pasted.crop2d(0, 0, meta.original.0, meta.original.1)
    } else {
        pasted
    }
}

// ---------------------------------------------------------------------------
// direction field and histogram
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DirectionField<T: Scalar> {
    /// `[1, h, w]`, radians in [0, pi]
    pub theta: Tensor<T>,
    pub dx: Tensor<T>,
    pub dy: Tensor<T>,
}

fn sobel_kernels<T: Scalar>() -> (Tensor<T>, Tensor<T>) {
    let kx: Vec<f64> = vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let ky: Vec<f64> = vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    (
        Tensor::from_vec(&[1, 1, 3, 3], kx.into_iter().map(T::from_f64).collect()),
        Tensor::from_vec(&[1, 1, 3, 3], ky.into_iter().map(T::from_f64).collect()),
    )
}

/// Channel-mean, Sobel gradients under reflection padding, and per-pixel
/// orientation folded into [0, pi]. Flat pixels (both gradients below 1e-12)
/// take angle zero.
pub fn sobel_theta<T: Scalar>(view: &Tensor<T>) -> DirectionField<T> {
    let (c, h, w) = (view.shape()[0], view.shape()[1], view.shape()[2]);
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut mean = vec![T::ZERO; h * w];
    for ci in 0..c {
        for (i, v) in view.data()[ci * h * w..(ci + 1) * h * w].iter().enumerate() {
            mean[i] += *v;
        }
    }
    for v in &mut mean {
        *v *= inv_c;
    }
    let mean = Tensor::from_vec(&[1, h, w], mean);
    let padded = k::pad_reflect2d(&mean, (1, 1, 1, 1));
    let (kx, ky) = sobel_kernels::<T>();
    let dx = k::conv2d(&padded, &kx, None, Conv2dSpec::unit());
    let dy = k::conv2d(&padded, &ky, None, Conv2dSpec::unit());

    let tiny = 1e-12;
    let theta: Vec<T> = dx
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&gx, &gy)| {
            let (gx, gy) = (gx.to_f64(), gy.to_f64());
            if gx.abs() < tiny && gy.abs() < tiny {
                T::ZERO
            } else if gx.abs() < tiny {
                T::from_f64(PI / 2.0)
            } else {
                let mut a = (gy / gx).atan();
                if a < 0.0 {
                    a += PI;
                }
                T::from_f64(a)
            }
        })
        .collect();
    DirectionField { theta: Tensor::from_vec(&[1, h, w], theta), dx, dy }
}

/// Per-cell bin counts over `[0, pi]` split into `n` bins; the right endpoint
/// clamps into the last bin. Counts per cell always sum to `cell_h * cell_w`.
pub fn orientation_counts<T: Scalar>(
    theta: &Tensor<T>,
    cell: (usize, usize),
    nbins: usize,
) -> Tensor<T> {
    let (h, w) = (theta.shape()[1], theta.shape()[2]);
    assert_eq!(h % cell.0, 0, "shape error: height {h} not divisible by cell {}", cell.0);
    assert_eq!(w % cell.1, 0, "shape error: width {w} not divisible by cell {}", cell.1);
    let (gh, gw) = (h / cell.0, w / cell.1);
    let mut counts = vec![T::ZERO; nbins * gh * gw];
    let bin_width = PI / nbins as f64;
    for y in 0..h {
        for x in 0..w {
            let t = theta.data()[y * w + x].to_f64();
            let idx = ((t / bin_width).floor() as usize).min(nbins - 1);
            let (a, b) = (y / cell.0, x / cell.1);
            counts[(idx * gh + a) * gw + b] += T::ONE;
        }
    }
    Tensor::from_vec(&[nbins, gh, gw], counts)
}

/// Center angle of bin `k`.
pub fn bin_center(k: usize, nbins: usize) -> f64 {
    PI / (2.0 * nbins as f64) + k as f64 * PI / nbins as f64
}

/// Weighted orientation histogram: counts normalized by cell area and scaled
/// by the bin-center angle.
pub fn direction_histogram<T: Scalar>(
    theta: &Tensor<T>,
    cell: (usize, usize),
    nbins: usize,
) -> Tensor<T> {
    let counts = orientation_counts(theta, cell, nbins);
    let (gh, gw) = (counts.shape()[1], counts.shape()[2]);
    let area = T::from_f64(1.0 / (cell.0 * cell.1) as f64);
    let mut p = counts.data().to_vec();
    for kbin in 0..nbins {
        let ck = T::from_f64(bin_center(kbin, nbins));
        for v in &mut p[kbin * gh * gw..(kbin + 1) * gh * gw] {
            *v = *v * area * ck;
        }
    }
    Tensor::from_vec(&[nbins, gh, gw], p)
}

// ---------------------------------------------------------------------------
// direction embedding (fixed prior projection, no gradients)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DirectionEmbedParams<T: Scalar> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
    pub norm_g: Tensor<T>,
    pub norm_b: Tensor<T>,
}

impl<T: Scalar> DirectionEmbedParams<T> {
    pub fn init(nbins: usize, channels: usize, rng: &mut Rng) -> Self {
        DirectionEmbedParams {
            w1: init::conv_weight_linear(rng, channels, nbins, 1, 1),
            b1: Tensor::zeros(&[channels]),
            w3: init::conv_weight(rng, channels, channels, 3, 3),
            b3: Tensor::zeros(&[channels]),
            norm_g: Tensor::ones(&[channels]),
            norm_b: Tensor::zeros(&[channels]),
        }
    }

    pub fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (name, t) in [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w3", &self.w3),
            ("b3", &self.b3),
            ("norm_g", &self.norm_g),
            ("norm_b", &self.norm_b),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = match name {
            "w1" => &mut self.w1,
            "b1" => &mut self.b1,
            "w3" => &mut self.w3,
            "b3" => &mut self.b3,
            "norm_g" => &mut self.norm_g,
            "norm_b" => &mut self.norm_b,
            _ => return Err(Error::Checkpoint(format!("unknown embed buffer {name:?}"))),
        };
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "embed buffer {name:?} shape {:?} vs checkpoint {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// Histogram `[n, gh, gw]` to a per-channel prior vector of length `C`:
/// pointwise conv, 3x3 conv, ReLU, channel norm, global average.
pub fn direction_embedding<T: Scalar>(
    p: &Tensor<T>,
    ep: &DirectionEmbedParams<T>,
) -> Tensor<T> {
    let f1 = k::conv2d(p, &ep.w1, Some(&ep.b1), Conv2dSpec::unit());
    let f3 = k::conv2d(&f1, &ep.w3, Some(&ep.b3), Conv2dSpec::same((3, 3)));
    let relu = f3.map(|v| v.maxs(T::ZERO));
    let (normed, _) = k::layer_norm(&relu, &[0], &ep.norm_g, &ep.norm_b, LN_EPS);
    let pooled = k::adaptive_avgpool(&normed);
    let c = pooled.shape()[0];
    pooled.reshaped(&[c])
}

// ---------------------------------------------------------------------------
// edge convolution and gating
// ---------------------------------------------------------------------------

pub struct EdgeConvParams<'t, T: Scalar> {
    pub pw_in_w: Var<'t, T>,
    pub pw_in_b: Var<'t, T>,
    pub strip_h_w: Var<'t, T>,
    pub strip_h_b: Var<'t, T>,
    pub strip_v_w: Var<'t, T>,
    pub strip_v_b: Var<'t, T>,
    pub dw_w: Var<'t, T>,
    pub dw_b: Var<'t, T>,
    pub pw_out_w: Var<'t, T>,
    pub pw_out_b: Var<'t, T>,
    pub channels: usize,
    pub bottleneck: usize,
    pub strip_k: usize,
}

impl<'t, T: Scalar> EdgeConvParams<'t, T> {
    pub fn init(tape: &'t Tape<T>, channels: usize, cfg: &DegConfig, rng: &mut Rng) -> Self {
        Self::init_with_reduction(tape, channels, cfg.reduce_r, cfg.strip_k, rng)
    }

    pub fn init_with_reduction(
        tape: &'t Tape<T>,
        channels: usize,
        reduce_r: usize,
        strip_k: usize,
        rng: &mut Rng,
    ) -> Self {
        assert_eq!(
            channels % reduce_r,
            0,
            "configuration error: channels {channels} not divisible by reduction {reduce_r}"
        );
        let m = channels / reduce_r;
        let kk = strip_k;
        // activation-free chain: variance-preserving init keeps the gate
        // logits and feature branch at input scale
        EdgeConvParams {
            pw_in_w: tape.leaf(init::conv_weight_linear(rng, m, channels, 1, 1)),
            pw_in_b: tape.leaf(Tensor::zeros(&[m])),
            strip_h_w: tape.leaf(init::conv_weight_linear(rng, m, 1, 1, kk)),
            strip_h_b: tape.leaf(Tensor::zeros(&[m])),
            strip_v_w: tape.leaf(init::conv_weight_linear(rng, m, 1, kk, 1)),
            strip_v_b: tape.leaf(Tensor::zeros(&[m])),
            dw_w: tape.leaf(init::conv_weight_linear(rng, 2 * m, 1, 3, 3)),
            dw_b: tape.leaf(Tensor::zeros(&[2 * m])),
            pw_out_w: tape.leaf(init::conv_weight_linear(rng, channels, 2 * m, 1, 1)),
            pw_out_b: tape.leaf(Tensor::zeros(&[channels])),
            channels,
            bottleneck: m,
            strip_k: kk,
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Var<'t, T>)>) {
        for (name, var) in [
            ("pw_in_w", self.pw_in_w),
            ("pw_in_b", self.pw_in_b),
            ("strip_h_w", self.strip_h_w),
            ("strip_h_b", self.strip_h_b),
            ("strip_v_w", self.strip_v_w),
            ("strip_v_b", self.strip_v_b),
            ("dw_w", self.dw_w),
            ("dw_b", self.dw_b),
            ("pw_out_w", self.pw_out_w),
            ("pw_out_b", self.pw_out_b),
        ] {
            out.push((format!("{prefix}.{name}"), var));
        }
    }

    pub fn zero_weights(&self, tape: &Tape<T>) {
        for var in [self.pw_in_w, self.strip_h_w, self.strip_v_w, self.dw_w, self.pw_out_w] {
            tape.set_value(var, Tensor::zeros(&var.shape()));
        }
    }
}

/// Closed-form parameter count of one edge convolution.
pub fn edge_conv_param_count(channels: usize, strip_k: usize, reduce_r: usize) -> usize {
    let m = channels / reduce_r;
    let pw_in = channels * m + m;
    let strips = 2 * (m * strip_k + m); // depth-wise strips
    let dw = 2 * m * 9 + 2 * m;
    let pw_out = 2 * m * channels + channels;
    pw_in + strips + dw + pw_out
}

/// Pointwise squeeze, parallel horizontal/vertical strip convolutions,
/// concat, depth-wise 3x3, pointwise expand. Shape preserving.
pub fn edge_conv<'t, T: Scalar>(x: Var<'t, T>, p: &EdgeConvParams<'t, T>) -> Var<'t, T> {
    let kk = p.strip_k;
    let m = p.bottleneck;
    let lo = x.conv2d(p.pw_in_w, Some(p.pw_in_b), Conv2dSpec::unit());
    let sh = lo.conv2d(
        p.strip_h_w,
        Some(p.strip_h_b),
        Conv2dSpec { stride: (1, 1), pad: (0, (kk - 1) / 2), groups: m },
    );
    let sv = lo.conv2d(
        p.strip_v_w,
        Some(p.strip_v_b),
        Conv2dSpec { stride: (1, 1), pad: ((kk - 1) / 2, 0), groups: m },
    );
    let cat = crate::autodiff::concat(&[sh, sv], 0);
    let dw = cat.conv2d(
        p.dw_w,
        Some(p.dw_b),
        Conv2dSpec { stride: (1, 1), pad: (1, 1), groups: 2 * p.bottleneck },
    );
    dw.conv2d(p.pw_out_w, Some(p.pw_out_b), Conv2dSpec::unit())
}

/// Gate a feature view with its direction prior: the prior is added per
/// channel before the gate branch; the two edge convolutions have
/// independent parameters.
pub fn deg_gate<'t, T: Scalar>(
    x: Var<'t, T>,
    epsilon: &Tensor<T>,
    gate: &EdgeConvParams<'t, T>,
    feat: &EdgeConvParams<'t, T>,
) -> Var<'t, T> {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(epsilon.shape(), &[c], "shape error: prior {:?} vs {c} channels", epsilon.shape());
    let eps = x.tape().leaf(epsilon.reshaped(&[c, 1, 1])).expand(&[c, h, w]);
    let g = edge_conv(x.add(eps), gate).sigmoid();
    g.mul(edge_conv(x, feat))
}

// ---------------------------------------------------------------------------
// full module
// ---------------------------------------------------------------------------

pub struct DegParams<'t, T: Scalar> {
    pub cfg: DegConfig,
    pub embed: DirectionEmbedParams<T>,
    pub gate: EdgeConvParams<'t, T>,
    pub feat: EdgeConvParams<'t, T>,
    pub post: EdgeConvParams<'t, T>,
}

impl<'t, T: Scalar> DegParams<'t, T> {
    pub fn init(tape: &'t Tape<T>, channels: usize, cfg: DegConfig, rng: &mut Rng) -> Self {
        // the gate only steers, so it gets half the bottleneck of the two
        // value-carrying branches
        let gate_r = if channels % (cfg.reduce_r * 2) == 0 { cfg.reduce_r * 2 } else { cfg.reduce_r };
        DegParams {
            cfg,
            embed: DirectionEmbedParams::init(cfg.nbins, channels, rng),
            gate: EdgeConvParams::init_with_reduction(tape, channels, gate_r, cfg.strip_k, rng),
            feat: EdgeConvParams::init(tape, channels, &cfg, rng),
            post: EdgeConvParams::init(tape, channels, &cfg, rng),
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Var<'t, T>)>) {
        self.gate.named(&format!("{prefix}.gate"), out);
        self.feat.named(&format!("{prefix}.feat"), out);
        self.post.named(&format!("{prefix}.post"), out);
    }

    pub fn buffers(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.embed.buffers(&format!("{prefix}.embed"), out);
    }

    pub fn trainable_param_count(&self) -> usize {
        let c = self.feat.channels;
        edge_conv_param_count(c, self.cfg.strip_k, c / self.gate.bottleneck)
            + 2 * edge_conv_param_count(c, self.cfg.strip_k, self.cfg.reduce_r)
    }
}

/// Per-view artifacts for probing and pinned-routing reruns.
#[derive(Debug, Clone)]
pub struct DegAux<T: Scalar> {
    /// Direction prior per view, row-major grid order.
    pub epsilon: Vec<Tensor<T>>,
    /// Assembled orientation map `[1, H, W]` (absent when priors were pinned).
    pub theta: Option<Tensor<T>>,
}

/// Full pipeline: partition, per-view prior + gate, restore, post smoothing.
/// `pinned` replaces the per-view priors (finite-difference harnesses pin
/// them because hard binning makes the prior piecewise constant).
pub fn degconv_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &DegParams<'t, T>,
    pinned: Option<&[Tensor<T>]>,
) -> (Var<'t, T>, DegAux<T>) {
    let shape = x.shape();
    let cfg = p.cfg.for_resolution(shape[1], shape[2]);
    let (views, meta) = partition_vars(x, cfg.view);
    let mut outs = Vec::with_capacity(views.len());
    let mut eps_list = Vec::with_capacity(views.len());
    let mut theta_views = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let eps = match pinned {
            Some(list) => list[i].clone(),
            None => {
                let field = sobel_theta(&v.value());
                let hist = direction_histogram(&field.theta, cfg.cell, cfg.nbins);
                theta_views.push(field.theta);
                direction_embedding(&hist, &p.embed)
            }
        };
        outs.push(deg_gate(*v, &eps, &p.gate, &p.feat));
        eps_list.push(eps);
    }
    let restored = restore_vars(&outs, &meta);
    let out = edge_conv(restored, &p.post);
    let theta = (pinned.is_none()).then(|| restore(&theta_views, &meta));
    (out, DegAux { epsilon: eps_list, theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::check_param_directional_multi_h;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.range(-1.0, 1.0)).collect())
    }

    /// f(u,v) = v: intensity grows along columns
    fn horizontal_ramp(h: usize, w: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(h * w);
        for _y in 0..h {
            for x in 0..w {
                data.push(x as f64);
            }
        }
        Tensor::from_vec(&[1, h, w], data)
    }

    /// f(u,v) = u: intensity grows along rows
    fn vertical_ramp(h: usize, w: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for _x in 0..w {
                data.push(y as f64);
            }
        }
        Tensor::from_vec(&[1, h, w], data)
    }

    #[test]
    fn partition_whole_map_is_identity() {
        let mut rng = Rng::new(70);
        let x = rand_tensor(&mut rng, &[3, 6, 8]);
        let (views, meta) = partition(&x, (6, 8));
        assert_eq!(views.len(), 1);
        assert!(views[0].bit_eq(&x));
        assert!(restore(&views, &meta).bit_eq(&x));
    }

    #[test]
    fn partition_four_views_row_major() {
        let x = Tensor::from_vec(
            &[1, 4, 4],
            (0..16).map(|v| v as f64).collect::<Vec<f64>>(),
        );
        let (views, meta) = partition(&x, (2, 2));
        assert_eq!(meta.grid, (2, 2));
        assert_eq!(views.len(), 4);
        assert_eq!(views[0].data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(views[1].data(), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(views[2].data(), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(views[3].data(), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn partition_restore_roundtrip_with_padding() {
        let mut rng = Rng::new(71);
        for (h, w, vh, vw) in [(5usize, 7usize, 2usize, 3usize), (6, 6, 4, 4), (3, 3, 2, 2)] {
            let x = rand_tensor(&mut rng, &[2, h, w]);
            let (views, meta) = partition(&x, (vh, vw));
            assert!(restore(&views, &meta).bit_eq(&x), "roundtrip {h}x{w} view {vh}x{vw}");
        }
    }

    #[test]
    fn tape_partition_restore_matches_raw() {
        let mut rng = Rng::new(72);
        let x_t = rand_tensor(&mut rng, &[2, 5, 7]);
        let tape = Tape::new();
        let x = tape.leaf(x_t.clone());
        let (views, meta) = partition_vars(x, (2, 3));
        let back = restore_vars(&views, &meta);
        assert!(back.value().bit_eq(&x_t));
    }

    #[test]
    fn sobel_horizontal_ramp_gives_zero_angle() {
        let field = sobel_theta(&horizontal_ramp(8, 8));
        for (i, &t) in field.theta.data().iter().enumerate() {
            assert!(t.abs() < 1e-12, "theta[{i}] = {t}");
        }
        // interior gradient magnitude is the full Sobel response
        assert!((field.dx.data()[3 * 8 + 3] - 8.0).abs() < 1e-9);
    }

    #[test]
    fn sobel_vertical_ramp_gives_half_pi() {
        let field = sobel_theta(&vertical_ramp(8, 8));
        for (i, &t) in field.theta.data().iter().enumerate() {
            assert!((t - PI / 2.0).abs() < 1e-12, "theta[{i}] = {t}");
        }
    }

    #[test]
    fn sobel_constant_image_uses_zero_convention() {
        let field = sobel_theta(&Tensor::full(&[3, 6, 6], 0.42f64));
        assert_eq!(field.theta.max_abs(), 0.0);
    }

    #[test]
    fn histogram_concentrates_mass_at_bin_center_value() {
        // all angles at pi/2 with n=180 -> bin 90 holds exactly c_90
        let theta = Tensor::full(&[1, 8, 8], PI / 2.0);
        let p = direction_histogram(&theta, (8, 8), 180);
        assert_eq!(p.shape(), &[180, 1, 1]);
        let c90 = bin_center(90, 180);
        assert!((c90 - (PI / 360.0 + PI / 2.0)).abs() < 1e-15);
        for (kbin, &v) in p.data().iter().enumerate() {
            if kbin == 90 {
                assert!((v - c90).abs() < 1e-12, "bin 90 should carry exactly c_90");
            } else {
                assert_eq!(v, 0.0, "bin {kbin} should be empty");
            }
        }
    }

    #[test]
    fn histogram_clamps_right_endpoint() {
        let theta = Tensor::full(&[1, 4, 4], PI);
        for n in [9usize, 36, 180] {
            let counts = orientation_counts(&theta, (4, 4), n);
            assert_eq!(counts.data()[n - 1], 16.0, "pi must clamp into bin {}", n - 1);
        }
    }

    #[test]
    fn histogram_counts_conserve_mass() {
        let mut rng = Rng::new(73);
        let theta = Tensor::from_vec(
            &[1, 8, 12],
            (0..96).map(|_| rng.range(0.0, PI)).collect::<Vec<f64>>(),
        );
        let counts = orientation_counts(&theta, (4, 4), 36);
        let (gh, gw) = (2, 3);
        for a in 0..gh {
            for b in 0..gw {
                let mut total = 0.0;
                for kbin in 0..36 {
                    total += counts.data()[(kbin * gh + a) * gw + b];
                }
                assert_eq!(total, 16.0, "cell ({a},{b})");
            }
        }
        // weighted form: sum_k p/c_k == 1 per cell
        let p = direction_histogram(&theta, (4, 4), 36);
        for a in 0..gh {
            for b in 0..gw {
                let mut total = 0.0;
                for kbin in 0..36 {
                    total += p.data()[(kbin * gh + a) * gw + b] / bin_center(kbin, 36);
                }
                assert!((total - 1.0).abs() < 1e-9, "cell ({a},{b}) normalized mass {total}");
            }
        }
    }

    #[test]
    fn rotating_ramp_moves_mass_to_quarter_turn_bin() {
        for n in [9usize, 36, 180] {
            let flat = sobel_theta(&horizontal_ramp(8, 8));
            let c0 = orientation_counts(&flat.theta, (8, 8), n);
            assert_eq!(c0.data()[0], 64.0, "n={n}: ramp mass must sit in bin 0");

            let turned = sobel_theta(&vertical_ramp(8, 8));
            let c1 = orientation_counts(&turned.theta, (8, 8), n);
            let target = ((PI / 2.0) / (PI / n as f64)).floor() as usize;
            assert_eq!(
                c1.data()[target], 64.0,
                "n={n}: rotated ramp mass must sit in bin {target}"
            );
        }
    }

    #[test]
    fn embedding_zero_histogram_zero_biases_gives_zero() {
        let mut rng = Rng::new(74);
        let ep = DirectionEmbedParams::<f64>::init(36, 8, &mut rng);
        let p = Tensor::zeros(&[36, 2, 2]);
        let eps = direction_embedding(&p, &ep);
        assert_eq!(eps.shape(), &[8]);
        assert_eq!(eps.max_abs(), 0.0);
    }

    #[test]
    fn embedding_length_tracks_channels_and_is_deterministic() {
        let mut rng = Rng::new(75);
        for c in [4usize, 8, 16] {
            let ep = DirectionEmbedParams::<f64>::init(36, c, &mut rng);
            let theta = Tensor::from_vec(
                &[1, 8, 8],
                (0..64).map(|_| rng.range(0.0, PI)).collect::<Vec<f64>>(),
            );
            let hist = direction_histogram(&theta, (4, 4), 36);
            let e1 = direction_embedding(&hist, &ep);
            let e2 = direction_embedding(&hist, &ep);
            assert_eq!(e1.shape(), &[c]);
            assert!(e1.bit_eq(&e2), "identical fields must embed identically");
        }
    }

    #[test]
    fn edge_conv_zero_weights_and_shape() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(76);
        let cfg = DegConfig { reduce_r: 2, ..Default::default() };
        let p = EdgeConvParams::init(&tape, 8, &cfg, &mut rng);
        let x = tape.leaf(rand_tensor(&mut rng, &[8, 6, 7]));
        let y = edge_conv(x, &p);
        assert_eq!(y.shape(), vec![8, 6, 7]);
        p.zero_weights(&tape);
        let y0 = edge_conv(x, &p);
        assert_eq!(y0.value().max_abs(), 0.0);
    }

    #[test]
    fn edge_conv_param_count_matches_actual_and_beats_dense() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(77);
        for (c, kk, r) in [(16usize, 5usize, 2usize), (32, 5, 2), (8, 3, 4), (64, 5, 16)] {
            let cfg = DegConfig { strip_k: kk, reduce_r: r, ..Default::default() };
            let p = EdgeConvParams::init(&tape, c, &cfg, &mut rng);
            let mut named = Vec::new();
            p.named("e", &mut named);
            let actual: usize = named.iter().map(|(_, v)| v.value().numel()).sum();
            assert_eq!(actual, edge_conv_param_count(c, kk, r), "closed form for c={c}");
        }
        // lighter than a dense 3x3 mixing conv
        for c in [16usize, 32, 64, 128] {
            let dense = 9 * c * c + c;
            assert!(
                edge_conv_param_count(c, 5, 2) < dense,
                "edge conv must undercut dense 3x3 at c={c}"
            );
        }
    }

    #[test]
    fn gate_zero_weights_halves_feature_branch() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(78);
        let cfg = DegConfig { reduce_r: 2, ..Default::default() };
        let gate = EdgeConvParams::init(&tape, 4, &cfg, &mut rng);
        let feat = EdgeConvParams::init(&tape, 4, &cfg, &mut rng);
        gate.zero_weights(&tape);
        let x = tape.leaf(rand_tensor(&mut rng, &[4, 5, 5]));
        let eps = Tensor::zeros(&[4]);
        let y = deg_gate(x, &eps, &gate, &feat).value();
        let want = edge_conv(x, &feat).value().map(|v| 0.5 * v);
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_values_strictly_inside_unit_interval() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(79);
        let cfg = DegConfig { reduce_r: 2, ..Default::default() };
        let gate = EdgeConvParams::init(&tape, 4, &cfg, &mut rng);
        let x = tape.leaf(rand_tensor(&mut rng, &[4, 5, 5]));
        let eps = rand_tensor(&mut rng, &[4]);
        let eps_leaf = tape.leaf(eps.reshaped(&[4, 1, 1])).expand(&[4, 5, 5]);
        let g = edge_conv(x.add(eps_leaf), &gate).sigmoid().value();
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn prior_vector_changes_gate_output() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(80);
        let cfg = DegConfig { reduce_r: 2, ..Default::default() };
        let gate = EdgeConvParams::init(&tape, 4, &cfg, &mut rng);
        let feat = EdgeConvParams::init(&tape, 4, &cfg, &mut rng);
        let x = tape.leaf(rand_tensor(&mut rng, &[4, 5, 5]));
        let zero = deg_gate(x, &Tensor::zeros(&[4]), &gate, &feat).value();
        let biased = deg_gate(x, &rand_tensor(&mut rng, &[4]), &gate, &feat).value();
        assert!(zero.zip(&biased, |a, b| (a - b).abs()).max_abs() > 1e-9);
    }

    #[test]
    fn forward_single_view_equals_manual_composition() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(81);
        let cfg =
            DegConfig { view: (32, 32), cell: (4, 4), nbins: 36, strip_k: 5, reduce_r: 2 };
        let p = DegParams::init(&tape, 4, cfg, &mut rng);
        let x_t = rand_tensor(&mut rng, &[4, 8, 8]);
        let x = tape.leaf(x_t.clone());
        let (y, aux) = degconv_forward(x, &p, None);

        // single view: partition is identity, so the pipeline is gate + post
        let field = sobel_theta(&x_t);
        let hist = direction_histogram(&field.theta, (4, 4), 36);
        let eps = direction_embedding(&hist, &p.embed);
        assert_eq!(aux.epsilon.len(), 1);
        assert!(aux.epsilon[0].bit_eq(&eps));
        let manual = edge_conv(deg_gate(x, &eps, &p.gate, &p.feat), &p.post).value();
        assert!(y.value().bit_eq(&manual));
    }

    #[test]
    fn forward_is_shape_preserving_and_deterministic_across_stage_sizes() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(82);
        let base = DegConfig::default();
        for (c, h, w) in [(8usize, 16usize, 16usize), (16, 8, 8), (32, 4, 4), (64, 2, 2)] {
            let cfg = base.for_resolution(h, w);
            // constant bottleneck width of 2 channels
            let cfg = DegConfig { reduce_r: c / 2, ..cfg };
            let p = DegParams::init(&tape, c, cfg, &mut rng);
            let x_t = rand_tensor(&mut rng, &[c, h, w]);
            let x = tape.leaf(x_t.clone());
            let (y1, _) = degconv_forward(x, &p, None);
            let (y2, _) = degconv_forward(x, &p, None);
            assert_eq!(y1.shape(), vec![c, h, w]);
            assert!(y1.value().bit_eq(&y2.value()));
        }
    }

    #[test]
    fn forward_multi_view_uses_independent_priors() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(83);
        let cfg = DegConfig { view: (4, 4), cell: (2, 2), nbins: 18, strip_k: 3, reduce_r: 2 };
        let p = DegParams::init(&tape, 4, cfg, &mut rng);
        let x = tape.leaf(rand_tensor(&mut rng, &[4, 8, 8]));
        let (y, aux) = degconv_forward(x, &p, None);
        assert_eq!(aux.epsilon.len(), 4);
        assert_eq!(y.shape(), vec![4, 8, 8]);
        assert!(aux.theta.as_ref().unwrap().shape() == &[1, 8, 8]);
    }

    #[test]
    fn forward_gradients_match_finite_differences_with_pinned_priors() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(84);
        let cfg = DegConfig { view: (4, 4), cell: (2, 2), nbins: 18, strip_k: 3, reduce_r: 2 };
        let p = DegParams::init(&tape, 4, cfg, &mut rng);
        let mark = tape.len();
        let x_t = rand_tensor(&mut rng, &[4, 8, 8]);
        let w_t = rand_tensor(&mut rng, &[4, 8, 8]);

        // one live forward fixes the priors for the whole check
        let x0 = tape.leaf(x_t.clone());
        let (_, aux) = degconv_forward(x0, &p, None);
        let pinned = aux.epsilon;
        tape.truncate(mark);

        let x = tape.leaf(x_t.clone());
        let w = tape.leaf(w_t.clone());
        let (y, _) = degconv_forward(x, &p, Some(&pinned));
        let loss = y.mul(w).sum_all();
        let grads = tape.backward(loss);

        let mut names = Vec::new();
        p.named("deg", &mut names);
        let mut dir_rng = Rng::new(85);
        for (name, var) in names {
            let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()));
            let param = var.value();
            let pinned_ref = &pinned;
            let mut set = |t: Tensor<f64>| tape.set_value(var, t);
            let mut eval = || {
                tape.truncate(mark);
                let x = tape.leaf(x_t.clone());
                let w = tape.leaf(w_t.clone());
                let (y, _) = degconv_forward(x, &p, Some(pinned_ref));
                y.mul(w).sum_all().value().item()
            };
            let fail = check_param_directional_multi_h(
                &param,
                &analytic,
                &mut dir_rng,
                &[1e-5, 1e-6, 1e-4],
                &mut set,
                &mut eval,
            );
            assert!(
                fail.within(1e-6, 2e-9),
                "{name}: rel={} analytic={} fd={}",
                fail.rel_err,
                fail.analytic,
                fail.fd
            );
            tape.truncate(mark);
        }
    }
}
