//! Hybrid mixer block: scan output channels are ranked by mean step size and
//! split into a global stream (self-attention) and a local stream (a small
//! convolutional refinement), then scattered back before the closing gate
//! projection. Wrapped in pre-norm and a residual connection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{linear, scatter_cols, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::kernels::Conv2dSpec;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::ssm::{
    mamba_post, mamba_pre, rank_channels, ChannelSplit, RankDirection, ScanTrace, SsmConfig,
    SsmParams, TokenGrid,
};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "avg")]
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransMixerConfig {
    pub gamma: f64,
    pub heads: usize,
    pub rank_direction: RankDirection,
    pub local_pool: PoolKind,
    pub depth: usize,
}

impl Default for TransMixerConfig {
    fn default() -> Self {
        TransMixerConfig {
            gamma: 0.5,
            heads: 1,
            rank_direction: RankDirection::LowDelta,
            local_pool: PoolKind::Max,
            depth: 1,
        }
    }
}

impl TransMixerConfig {
    pub fn global_width(&self, d: usize) -> usize {
        (d as f64 * self.gamma).floor() as usize
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must be in [0,1], got {}", self.gamma)));
        }
        if self.heads == 0 {
            return Err(Error::config("heads must be >= 1"));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1"));
        }
        let d_g = self.global_width(d);
        if self.heads > 1 && d_g % self.heads != 0 {
            return Err(Error::config(format!(
                "global width {d_g} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

pub struct AttentionParams<'t, T: Scalar> {
    pub w_q: Var<'t, T>,
    pub b_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub b_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub b_v: Var<'t, T>,
    pub w_o: Var<'t, T>,
    pub b_o: Var<'t, T>,
    pub heads: usize,
}

impl<'t, T: Scalar> AttentionParams<'t, T> {
    pub fn init(tape: &'t Tape<T>, d_g: usize, heads: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            w_q: tape.leaf(init::linear_weight_linear(rng, d_g, d_g)),
            b_q: tape.leaf(Tensor::zeros(&[d_g])),
            w_k: tape.leaf(init::linear_weight_linear(rng, d_g, d_g)),
            b_k: tape.leaf(Tensor::zeros(&[d_g])),
            w_v: tape.leaf(init::linear_weight_linear(rng, d_g, d_g)),
            b_v: tape.leaf(Tensor::zeros(&[d_g])),
            w_o: tape.leaf(init::linear_weight_linear(rng, d_g, d_g)),
            b_o: tape.leaf(Tensor::zeros(&[d_g])),
            heads,
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Var<'t, T>)>) {
        for (name, var) in [
            ("w_q", self.w_q),
            ("b_q", self.b_q),
            ("w_k", self.w_k),
            ("b_k", self.b_k),
            ("w_v", self.w_v),
            ("b_v", self.b_v),
            ("w_o", self.w_o),
            ("b_o", self.b_o),
        ] {
            out.push((format!("{prefix}.{name}"), var));
        }
    }
}

/// Scaled dot-product self-attention over `[L, d_g]` tokens. No positional
/// encoding: order information already arrives through the causal scan.
pub fn self_attention<'t, T: Scalar>(x: Var<'t, T>, p: &AttentionParams<'t, T>) -> Var<'t, T> {
    let d_g = x.shape()[1];
    let heads = p.heads;
    assert_eq!(d_g % heads, 0, "shape error: width {d_g} vs {heads} heads");
    let dh = d_g / heads;
    let q = linear(x, p.w_q, p.b_q);
    let k = linear(x, p.w_k, p.b_k);
    let v = linear(x, p.w_v, p.b_v);
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
        let (qh, kh, vh) = (q.gather_cols(&cols), k.gather_cols(&cols), v.gather_cols(&cols));
        let scores = qh.matmul(kh.permute(&[1, 0])).affine(scale, T::ZERO);
        let att = scores.softmax(1);
        outs.push(att.matmul(vh));
    }
    let merged = if heads == 1 { outs[0] } else { crate::autodiff::concat(&outs, 1) };
    linear(merged, p.w_o, p.b_o)
}

pub struct LocalRefineParams<'t, T: Scalar> {
    pub norm_g: Var<'t, T>,
    pub norm_b: Var<'t, T>,
    pub w: Var<'t, T>,
    pub b: Var<'t, T>,
}

impl<'t, T: Scalar> LocalRefineParams<'t, T> {
    pub fn init(tape: &'t Tape<T>, d_l: usize, rng: &mut Rng) -> Self {
        LocalRefineParams {
            norm_g: tape.leaf(Tensor::ones(&[d_l])),
            norm_b: tape.leaf(Tensor::zeros(&[d_l])),
            w: tape.leaf(init::conv_weight_linear(rng, d_l, d_l, 1, 1)),
            b: tape.leaf(Tensor::zeros(&[d_l])),
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Var<'t, T>)>) {
        for (name, var) in
            [("norm_g", self.norm_g), ("norm_b", self.norm_b), ("w", self.w), ("b", self.b)]
        {
            out.push((format!("{prefix}.{name}"), var));
        }
    }
}

/// Local stream: reshape tokens to a map, channel-normalize, pool (3x3,
/// stride 1, shape preserving), squeeze through a pointwise conv into a
/// sigmoid gate, and modulate the normalized map.
pub fn local_refinement<'t, T: Scalar>(
    y_l: Var<'t, T>,
    p: &LocalRefineParams<'t, T>,
    grid: TokenGrid,
    pool: PoolKind,
) -> Var<'t, T> {
    let (l, d_l) = {
        let s = y_l.shape();
        (s[0], s[1])
    };
    assert_eq!(
        l,
        grid.len(),
        "shape error: local refinement on {l} tokens vs {}x{} grid",
        grid.h,
        grid.w
    );
    let f = y_l.permute(&[1, 0]).reshape(&[d_l, grid.h, grid.w]).layer_norm(
        &[0],
        p.norm_g,
        p.norm_b,
        LN_EPS,
    );
    let pooled = match pool {
        PoolKind::Max => f.maxpool2d((3, 3), (1, 1), (1, 1)),
        PoolKind::Avg => f.avgpool2d((3, 3), (1, 1), (1, 1)),
    };
    let gate = pooled.conv2d(p.w, Some(p.b), Conv2dSpec::unit()).sigmoid();
    gate.mul(f).reshape(&[d_l, l]).permute(&[1, 0])
}

/// Route channel streams through their transforms and scatter the results
/// back into a `[L, d]` tensor. Empty streams are skipped.
pub fn mix_channels<'t, T: Scalar>(
    y: Var<'t, T>,
    split: &ChannelSplit,
    f_g: impl FnOnce(Var<'t, T>) -> Var<'t, T>,
    f_l: impl FnOnce(Var<'t, T>) -> Var<'t, T>,
) -> Var<'t, T> {
    let (l, d) = {
        let s = y.shape();
        (s[0], s[1])
    };
    assert!(split.covers(d), "shape error: channel split does not partition 0..{d}");
    let tape = y.tape();
    let mut streams: Vec<(&[usize], Var<'t, T>)> = Vec::new();
    let g_out;
    let l_out;
    if !split.global.is_empty() {
        g_out = f_g(y.gather_cols(&split.global));
        streams.push((split.global.as_slice(), g_out));
    }
    if !split.local.is_empty() {
        l_out = f_l(y.gather_cols(&split.local));
        streams.push((split.local.as_slice(), l_out));
    }
    scatter_cols(tape, l, d, &streams)
}

pub struct TransMixerParams<'t, T: Scalar> {
    pub norm_g: Var<'t, T>,
    pub norm_b: Var<'t, T>,
    pub ssm: SsmParams<'t, T>,
    pub attn: Option<AttentionParams<'t, T>>,
    pub refine: Option<LocalRefineParams<'t, T>>,
    pub cfg: TransMixerConfig,
}

impl<'t, T: Scalar> TransMixerParams<'t, T> {
    pub fn init(
        tape: &'t Tape<T>,
        ssm_cfg: SsmConfig,
        cfg: TransMixerConfig,
        rng: &mut Rng,
    ) -> Self {
        let d = ssm_cfg.dim;
        let d_g = cfg.global_width(d);
        let d_l = d - d_g;
        TransMixerParams {
            norm_g: tape.leaf(Tensor::ones(&[d])),
            norm_b: tape.leaf(Tensor::zeros(&[d])),
            ssm: SsmParams::init(tape, ssm_cfg, rng),
            attn: (d_g > 0).then(|| AttentionParams::init(tape, d_g, cfg.heads, rng)),
            refine: (d_l > 0).then(|| LocalRefineParams::init(tape, d_l, rng)),
            cfg,
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Var<'t, T>)>) {
        out.push((format!("{prefix}.norm_g"), self.norm_g));
        out.push((format!("{prefix}.norm_b"), self.norm_b));
        self.ssm.named(&format!("{prefix}.ssm"), out);
        if let Some(a) = &self.attn {
            a.named(&format!("{prefix}.attn"), out);
        }
        if let Some(r) = &self.refine {
            r.named(&format!("{prefix}.refine"), out);
        }
    }
}

/// One mixer block: pre-norm, gated scan, rank/split/enhance/scatter, closing
/// projection, residual. `routing` pins the channel split (used by gradient
/// checks); otherwise it is ranked from the fresh trace.
pub fn transmixer_block<'t, T: Scalar>(
    i: Var<'t, T>,
    p: &TransMixerParams<'t, T>,
    grid: TokenGrid,
    routing: Option<&ChannelSplit>,
) -> Result<(Var<'t, T>, ScanTrace<T>, ChannelSplit)> {
    let normed = i.layer_norm(&[1], p.norm_g, p.norm_b, LN_EPS);
    let (y, z, trace) = mamba_pre(normed, &p.ssm, grid);
    let split = match routing {
        Some(s) => s.clone(),
        None => rank_channels(&trace, p.cfg.gamma, p.cfg.rank_direction)?,
    };
    let expected_dg = p.cfg.global_width(p.ssm.cfg.dim);
    assert_eq!(split.global.len(), expected_dg, "shape error: routing width mismatch");
    let mixed = mix_channels(
        y,
        &split,
        |g| self_attention(g, p.attn.as_ref().expect("attention params for global stream")),
        |lv| {
            local_refinement(
                lv,
                p.refine.as_ref().expect("refine params for local stream"),
                grid,
                p.cfg.local_pool,
            )
        },
    );
    let o = mamba_post(mixed, z, &p.ssm);
    Ok((i.add(o), trace, split))
}
