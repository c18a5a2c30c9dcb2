//! Selective state-space core: the input-dependent scan, the gated block
//! around it, exact hidden-attention extraction from the recorded scan
//! quantities, and step-size-based channel ranking.
//!
//! The scan keeps its per-step discretized quantities in a [`ScanTrace`] so
//! the attention weights a token assigned to its predecessors can be
//! reconstructed exactly afterwards, and so channels can be ranked by their
//! mean step size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, linear, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::rng::Rng;
use crate::scalar::{softplus, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub dim: usize,
    pub state_dim: usize,
    /// Apply softplus directly to the input instead of a learned projection.
    #[serde(default)]
    pub literal_delta: bool,
    /// 1 = single causal scan over row-major tokens; 4 adds the reversed and
    /// column-major orders, averaging the four outputs.
    #[serde(default = "default_directions")]
    pub scan_directions: usize,
}

fn default_directions() -> usize {
    1
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.state_dim == 0 {
            return Err(Error::config("ssm dims must be positive"));
        }
        if self.scan_directions != 1 && self.scan_directions != 4 {
            return Err(Error::config(format!(
                "scan_directions must be 1 or 4, got {}",
                self.scan_directions
            )));
        }
        Ok(())
    }
}

pub const CONV1D_WIDTH: usize = 3;

/// Parameters of one scan block. `log_a` stores the decay matrix as
/// `A = -exp(log_a)` so `A` stays strictly negative under any update.
pub struct SsmParams<'t, T: Scalar> {
    pub w_in: Var<'t, T>,
    pub b_in: Var<'t, T>,
    pub w_gate: Var<'t, T>,
    pub b_gate: Var<'t, T>,
    pub w_out: Var<'t, T>,
    pub b_out: Var<'t, T>,
    pub conv_w: Var<'t, T>,
    pub conv_b: Var<'t, T>,
    pub w_delta: Var<'t, T>,
    pub b_delta: Var<'t, T>,
    pub w_b: Var<'t, T>,
    pub w_c: Var<'t, T>,
    pub log_a: Var<'t, T>,
    pub cfg: SsmConfig,
}

impl<'t, T: Scalar> SsmParams<'t, T> {
    pub fn init(tape: &'t Tape<T>, cfg: SsmConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        let n = cfg.state_dim;
        // softplus(b_delta) centered at 0.5 with a small per-channel spread:
        // identical biases leave the mean-step-size ranking to per-input
        // noise, and the global/local routing thrashes early in training
        let b_delta0 = (0.5f64.exp() - 1.0).ln();
        let b_delta = Tensor::from_vec(
            &[d],
            (0..d)
                .map(|c| {
                    let offset = (c as f64 / d.max(1) as f64 - 0.5) * 0.8;
                    T::from_f64(b_delta0 + offset)
                })
                .collect(),
        );
        // scaled-down projection keeps init delta near the bias value
        let w_delta = init::linear_weight::<T>(rng, d, d).map(|v| v * T::from_f64(0.1));
        SsmParams {
            w_in: tape.leaf(init::linear_weight(rng, d, d)),
            b_in: tape.leaf(Tensor::zeros(&[d])),
            w_gate: tape.leaf(init::linear_weight(rng, d, d)),
            b_gate: tape.leaf(Tensor::zeros(&[d])),
            w_out: tape.leaf(init::linear_weight_linear(rng, d, d)),
            b_out: tape.leaf(Tensor::zeros(&[d])),
            conv_w: tape.leaf(init::kaiming_uniform(rng, &[d, CONV1D_WIDTH], CONV1D_WIDTH)),
            conv_b: tape.leaf(Tensor::zeros(&[d])),
            w_delta: tape.leaf(w_delta),
            b_delta: tape.leaf(b_delta),
            w_b: tape.leaf(init::linear_weight_linear(rng, d, n)),
            w_c: tape.leaf(init::linear_weight_linear(rng, d, n)),
            log_a: tape.leaf(init::uniform(rng, &[d, n], (0.5f64).ln(), (2.0f64).ln())),
            cfg,
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Var<'t, T>)>) {
        for (name, var) in [
            ("w_in", self.w_in),
            ("b_in", self.b_in),
            ("w_gate", self.w_gate),
            ("b_gate", self.b_gate),
            ("w_out", self.w_out),
            ("b_out", self.b_out),
            ("conv_w", self.conv_w),
            ("conv_b", self.conv_b),
            ("w_delta", self.w_delta),
            ("b_delta", self.b_delta),
            ("w_b", self.w_b),
            ("w_c", self.w_c),
            ("log_a", self.log_a),
        ] {
            out.push((format!("{prefix}.{name}"), var));
        }
    }
}

/// Per-step quantities recorded by the scan: step sizes, discretized decay
/// and input factors, and output projections.
#[derive(Debug, Clone)]
pub struct ScanTrace<T: Scalar> {
    /// `[L, d]`, strictly positive
    pub delta: Tensor<T>,
    /// `[L, d, n]`, elementwise in (0, 1)
    pub a_bar: Tensor<T>,
    /// `[L, d, n]`
    pub b_bar: Tensor<T>,
    /// `[L, n]`
    pub c: Tensor<T>,
}

impl<T: Scalar> ScanTrace<T> {
    pub fn from_parts(delta: Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, c: Tensor<T>) -> Self {
        let (l, d) = (delta.shape()[0], delta.shape()[1]);
        let n = a.shape()[1];
        let mut a_bar = vec![T::ZERO; l * d * n];
        let mut b_bar = vec![T::ZERO; l * d * n];
        for t in 0..l {
            for ch in 0..d {
                let dt = delta.data()[t * d + ch];
                for j in 0..n {
                    a_bar[(t * d + ch) * n + j] = (a.data()[ch * n + j] * dt).exp();
                    b_bar[(t * d + ch) * n + j] = b.data()[t * n + j] * dt;
                }
            }
        }
        ScanTrace {
            delta,
            a_bar: Tensor::from_vec(&[l, d, n], a_bar),
            b_bar: Tensor::from_vec(&[l, d, n], b_bar),
            c,
        }
    }

    pub fn len(&self) -> usize {
        self.delta.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.delta.shape()[1]
    }

    pub fn state_dim(&self) -> usize {
        self.c.shape()[1]
    }

    /// Mean step size per channel, the ranking statistic.
    pub fn mean_delta(&self) -> Vec<f64> {
        let (l, d) = (self.len(), self.dim());
        let mut means = vec![0.0f64; d];
        for t in 0..l {
            for ch in 0..d {
                means[ch] += self.delta.data()[t * d + ch].to_f64();
            }
        }
        for m in &mut means {
            *m /= l as f64;
        }
        means
    }

    /// Exact rescale of step `t` to a new delta. Since the decay factor is
    /// `exp(A*delta)`, changing delta raises it to `new/old` elementwise; the
    /// input factor scales linearly.
    pub fn with_delta_at(&self, t: usize, new_delta: f64) -> ScanTrace<T> {
        let (l, d) = (self.len(), self.dim());
        let n = self.state_dim();
        assert!(t < l, "step {t} out of range for length {l}");
        let mut delta = self.delta.data().to_vec();
        let mut a_bar = self.a_bar.data().to_vec();
        let mut b_bar = self.b_bar.data().to_vec();
        for ch in 0..d {
            let old = delta[t * d + ch].to_f64();
            let ratio = new_delta / old;
            delta[t * d + ch] = T::from_f64(new_delta);
            for j in 0..n {
                let i = (t * d + ch) * n + j;
                let ab = a_bar[i].to_f64();
                a_bar[i] = T::from_f64(ab.powf(ratio));
                b_bar[i] = T::from_f64(b_bar[i].to_f64() * ratio);
            }
        }
        ScanTrace {
            delta: Tensor::from_vec(&[l, d], delta),
            a_bar: Tensor::from_vec(&[l, d, n], a_bar),
            b_bar: Tensor::from_vec(&[l, d, n], b_bar),
            c: self.c.clone(),
        }
    }

    /// Trace of the sequence with step `t` removed.
    pub fn without_step(&self, t: usize) -> ScanTrace<T> {
        let (l, d) = (self.len(), self.dim());
        let n = self.state_dim();
        assert!(l > 1 && t < l);
        let keep: Vec<usize> = (0..l).filter(|&s| s != t).collect();
        let gather = |src: &Tensor<T>, row: usize| -> Vec<T> {
            let mut out = Vec::with_capacity((l - 1) * row);
            for &s in &keep {
                out.extend_from_slice(&src.data()[s * row..(s + 1) * row]);
            }
            out
        };
        ScanTrace {
            delta: Tensor::from_vec(&[l - 1, d], gather(&self.delta, d)),
            a_bar: Tensor::from_vec(&[l - 1, d, n], gather(&self.a_bar, d * n)),
            b_bar: Tensor::from_vec(&[l - 1, d, n], gather(&self.b_bar, d * n)),
            c: Tensor::from_vec(&[l - 1, n], gather(&self.c, n)),
        }
    }
}

/// Hidden attention weights `[d, L, L]`, strictly causal: entry `(c, i, j)`
/// is the contribution of token `j` to output `i` on channel `c`, zero for
/// `j > i`.
#[derive(Debug, Clone)]
pub struct AttentionMatrix<T: Scalar> {
    pub alpha: Tensor<T>,
}

impl<T: Scalar> AttentionMatrix<T> {
    pub fn channels(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> T {
        let l = self.len();
        self.alpha.data()[(c * l + i) * l + j]
    }
}

/// Unroll the recurrence recorded in `trace` into explicit token-to-token
/// weights: `alpha[c,i,j] = sum_n C_i (prod_{k=j+1..i} Abar_k) Bbar_j`, with
/// the empty product equal to one.
pub fn hidden_attention<T: Scalar>(trace: &ScanTrace<T>) -> AttentionMatrix<T> {
    let (l, d, n) = (trace.len(), trace.dim(), trace.state_dim());
    let (ab, bb, cd) = (trace.a_bar.data(), trace.b_bar.data(), trace.c.data());
    let mut alpha = vec![T::ZERO; d * l * l];
    for ch in 0..d {
        // m[j*n + s] = (prod_{k=j+1..i} Abar_k[ch,s]) * Bbar_j[ch,s]
        let mut m = vec![T::ZERO; l * n];
        for i in 0..l {
            // age every previous column by this step's decay, then open column i
            for j in 0..i {
                for s in 0..n {
                    m[j * n + s] *= ab[(i * d + ch) * n + s];
                }
            }
            for s in 0..n {
                m[i * n + s] = bb[(i * d + ch) * n + s];
            }
            for j in 0..=i {
                let mut acc = T::ZERO;
                for s in 0..n {
                    acc += cd[i * n + s] * m[j * n + s];
                }
                alpha[(ch * l + i) * l + j] = acc;
            }
        }
    }
    AttentionMatrix { alpha: Tensor::from_vec(&[d, l, l], alpha) }
}

/// Index sets of globally and locally scoped channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSplit {
    pub global: Vec<usize>,
    pub local: Vec<usize>,
}

impl ChannelSplit {
    pub fn covers(&self, d: usize) -> bool {
        let mut seen = vec![false; d];
        for &i in self.global.iter().chain(self.local.iter()) {
            if i >= d || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.iter().all(|&s| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankDirection {
    /// Small mean step size keeps the decay factor near one: long memory,
    /// whole-sequence receptive field. Default.
    #[serde(rename = "low-delta")]
    LowDelta,
    #[serde(rename = "high-delta")]
    HighDelta,
}

/// Sort channels by mean step size and take the first `floor(d*gamma)` as
/// global. Ties break toward the lower channel index.
pub fn rank_channels<T: Scalar>(
    trace: &ScanTrace<T>,
    gamma: f64,
    direction: RankDirection,
) -> Result<ChannelSplit> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma must be in [0,1], got {gamma}")));
    }
    let d = trace.dim();
    let means = trace.mean_delta();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (means[a], means[b]);
        let ord = ma.partial_cmp(&mb).unwrap_or(std::cmp::Ordering::Equal);
        match direction {
            RankDirection::LowDelta => ord.then(a.cmp(&b)),
            RankDirection::HighDelta => ord.reverse().then(a.cmp(&b)),
        }
    });
    let d_g = (d as f64 * gamma).floor() as usize;
    let mut global: Vec<usize> = order[..d_g].to_vec();
    let mut local: Vec<usize> = order[d_g..].to_vec();
    global.sort_unstable();
    local.sort_unstable();
    Ok(ChannelSplit { global, local })
}

/// Token-grid geometry for multi-direction scans.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn column_major(&self) -> Vec<usize> {
        let mut perm = Vec::with_capacity(self.len());
        for x in 0..self.w {
            for y in 0..self.h {
                perm.push(y * self.w + x);
            }
        }
        perm
    }
}

/// Input-dependent scan over `[L, d]` tokens. Returns the output tokens and
/// the trace of the forward (row-major) direction.
pub fn scan_ssm<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &SsmParams<'t, T>,
    grid: TokenGrid,
) -> (Var<'t, T>, ScanTrace<T>) {
    let l = x.shape()[0];
    assert_eq!(l, grid.len(), "shape error: {l} tokens vs grid {}x{}", grid.h, grid.w);

    let delta = if p.cfg.literal_delta {
        x.softplus()
    } else {
        linear(x, p.w_delta, p.b_delta).softplus()
    };
    let b = x.matmul(p.w_b);
    let c = x.matmul(p.w_c);
    let a = p.log_a.exp().neg();

    let run = |perm: Option<Vec<usize>>| -> Var<'t, T> {
        match perm {
            None => autodiff::scan(x, delta, b, c, a),
            Some(fw) => {
                let inv = crate::kernels::inverse_permutation(&fw);
                let y = autodiff::scan(
                    x.permute_rows(&fw),
                    delta.permute_rows(&fw),
                    b.permute_rows(&fw),
                    c.permute_rows(&fw),
                    a,
                );
                y.permute_rows(&inv)
            }
        }
    };

    let y = if p.cfg.scan_directions == 4 {
        let rev: Vec<usize> = (0..l).rev().collect();
        let col = grid.column_major();
        let mut col_rev = col.clone();
        col_rev.reverse();
        let y1 = run(None);
        let y2 = run(Some(rev));
        let y3 = run(Some(col));
        let y4 = run(Some(col_rev));
        y1.add(y2).add(y3).add(y4).affine(T::from_f64(0.25), T::ZERO)
    } else {
        run(None)
    };

    let trace = ScanTrace::from_parts(delta.value(), &a.value(), &b.value(), c.value());
    (y, trace)
}

/// Raw (non-tape) scan for probing: same math, plus finiteness checks that
/// report the failing step.
pub fn selective_scan<T: Scalar>(
    x: &Tensor<T>,
    p: &SsmParams<'_, T>,
) -> Result<(Tensor<T>, ScanTrace<T>)> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let delta = if p.cfg.literal_delta {
        x.map(softplus)
    } else {
        let z = crate::kernels::matmul(x, &p.w_delta.value());
        let bd = p.b_delta.value();
        let mut out = z.data().to_vec();
        for t in 0..l {
            for ch in 0..d {
                out[t * d + ch] = softplus(out[t * d + ch] + bd.data()[ch]);
            }
        }
        Tensor::from_vec(&[l, d], out)
    };
    let b = crate::kernels::matmul(x, &p.w_b.value());
    let c = crate::kernels::matmul(x, &p.w_c.value());
    let a = p.log_a.value().map(|v| -(v.exp()));
    let (y, h_states) = crate::kernels::scan_forward(x, &delta, &b, &c, &a);
    if let Some(idx) = h_states.first_non_finite() {
        return Err(Error::Numeric {
            step: idx / (d * p.cfg.state_dim),
            what: "non-finite scan state".into(),
        });
    }
    if let Some(idx) = y.first_non_finite() {
        return Err(Error::Numeric { step: idx / d, what: "non-finite scan output".into() });
    }
    Ok((y, ScanTrace::from_parts(delta, &a, &b, c)))
}

/// First half of the gated block: gate stream, causal depth-wise conv stream,
/// then the scan. Returns `(y, z, trace)` so a mixer can rewrite `y` before
/// the closing projection.
pub fn mamba_pre<'t, T: Scalar>(
    i: Var<'t, T>,
    p: &SsmParams<'t, T>,
    grid: TokenGrid,
) -> (Var<'t, T>, Var<'t, T>, ScanTrace<T>) {
    let z = linear(i, p.w_gate, p.b_gate).silu();
    let xs = linear(i, p.w_in, p.b_in).causal_conv1d(p.conv_w, p.conv_b).silu();
    let (y, trace) = scan_ssm(xs, p, grid);
    (y, z, trace)
}

/// Closing projection of the gated block.
pub fn mamba_post<'t, T: Scalar>(
    y: Var<'t, T>,
    z: Var<'t, T>,
    p: &SsmParams<'t, T>,
) -> Var<'t, T> {
    linear(y.mul(z), p.w_out, p.b_out)
}

pub fn mamba_block<'t, T: Scalar>(
    i: Var<'t, T>,
    p: &SsmParams<'t, T>,
    grid: TokenGrid,
) -> (Var<'t, T>, ScanTrace<T>) {
    let (y, z, trace) = mamba_pre(i, p, grid);
    (mamba_post(y, z, p), trace)
}
