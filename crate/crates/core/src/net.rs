//! Whole-network assembly: stem, four mixer stages with downsampling, an
//! edge-gated refinement per pyramid level, the spatial-refinement decoder,
//! and a segmentation head. One config record drives construction, cost
//! accounting, and checkpoint I/O. A plain-convolution stage variant of equal
//! width serves as the comparison baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::decoder::{plain_fuse, seg_head, srf_fuse, HeadParams, SrfParams, HEAD_HIDDEN};
use crate::degconv::{degconv_forward, edge_conv_param_count, DegConfig, DegParams};
use crate::error::{Error, Result};
use crate::init;
use crate::kernels::Conv2dSpec;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::ssm::{ChannelSplit, ScanTrace, SsmConfig, TokenGrid};
use crate::tensor::Tensor;
use crate::transmixer::{transmixer_block, TransMixerConfig, TransMixerParams};

pub const STAGES: usize = 4;
/// Stem reduces by 4, each of the three stage transitions by 2.
pub const TOTAL_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "transmixer")]
    TransMixer,
    #[serde(rename = "cnn")]
    Cnn,
}

/// Edge-gating settings as they appear in the JSON config. `reduce_r` is the
/// stage-one reduction; deeper stages scale it with the width so the strip
/// bottleneck stays at `widths[0] / reduce_r` channels everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegSettings {
    pub enabled: bool,
    pub nbins: usize,
    pub cell_h: usize,
    pub cell_w: usize,
    pub view_h: usize,
    pub view_w: usize,
    pub strip_k: usize,
    pub reduce_r: usize,
}

impl Default for DegSettings {
    fn default() -> Self {
        DegSettings {
            enabled: true,
            nbins: 180,
            cell_h: 8,
            cell_w: 8,
            view_h: 32,
            view_w: 32,
            strip_k: 5,
            reduce_r: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub widths: [usize; STAGES],
    pub state_dim: usize,
    /// `[H, W]`, both divisible by 32
    pub input_size: (usize, usize),
    pub transmixer: TransMixerConfig,
    pub degconv: DegSettings,
    pub srf_enabled: bool,
    #[serde(default)]
    pub literal_delta: bool,
    #[serde(default = "default_directions")]
    pub scan_directions: usize,
}

fn default_directions() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl ModelConfig {
    /// Desk-scale default: 64x64 inputs, widths 8/16/32/64, state dim 4.
    pub fn desk_default() -> Self {
        ModelConfig {
            arch: Arch::TransMixer,
            widths: [8, 16, 32, 64],
            state_dim: 4,
            input_size: (64, 64),
            transmixer: TransMixerConfig::default(),
            degconv: DegSettings::default(),
            srf_enabled: true,
            literal_delta: false,
            scan_directions: 1,
        }
    }

    /// Equal-width plain-convolution baseline with both refinement modules off.
    pub fn baseline_cnn() -> Self {
        ModelConfig {
            arch: Arch::Cnn,
            degconv: DegSettings { enabled: false, ..DegSettings::default() },
            srf_enabled: false,
            ..Self::desk_default()
        }
    }

    /// Desk widths carried to benchmark resolution, for analytic cost
    /// estimates only.
    pub fn paper_scale() -> Self {
        ModelConfig { input_size: (512, 512), ..Self::desk_default() }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(json).map_err(|e| Error::config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Strip-conv bottleneck width shared by all stages.
    pub fn deg_bottleneck(&self) -> usize {
        self.widths[0] / self.degconv.reduce_r.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "input size {h}x{w} must be a positive multiple of {TOTAL_STRIDE}"
            )));
        }
        if self.widths.iter().any(|&c| c == 0) {
            return Err(Error::config("widths must be positive"));
        }
        if !self.widths.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::config(format!("widths must strictly increase: {:?}", self.widths)));
        }
        if self.state_dim == 0 {
            return Err(Error::config("state_dim must be >= 1"));
        }
        if self.scan_directions != 1 && self.scan_directions != 4 {
            return Err(Error::config("scan_directions must be 1 or 4"));
        }
        for &d in &self.widths {
            self.transmixer.validate(d)?;
        }
        if self.degconv.enabled {
            if self.degconv.reduce_r == 0 || self.widths[0] % self.degconv.reduce_r != 0 {
                return Err(Error::config(format!(
                    "widths[0]={} must be divisible by reduce_r={}",
                    self.widths[0], self.degconv.reduce_r
                )));
            }
            let m = self.deg_bottleneck();
            for (i, &c) in self.widths.iter().enumerate() {
                if c % m != 0 {
                    return Err(Error::config(format!(
                        "stage {i} width {c} not divisible by bottleneck {m}"
                    )));
                }
                self.deg_for_stage(i)?;
            }
        }
        Ok(())
    }

    /// Stage resolution for a given input size.
    pub fn stage_hw(&self, stage: usize, input: (usize, usize)) -> (usize, usize) {
        let div = 4 << stage;
        (input.0 / div, input.1 / div)
    }

    pub fn deg_for_stage(&self, stage: usize) -> Result<DegConfig> {
        let (h, w) = self.stage_hw(stage, self.input_size);
        let m = self.deg_bottleneck();
        if m == 0 {
            return Err(Error::config("degconv bottleneck must be >= 1"));
        }
        let cfg = DegConfig {
            view: (self.degconv.view_h, self.degconv.view_w),
            cell: (self.degconv.cell_h, self.degconv.cell_w),
            nbins: self.degconv.nbins,
            strip_k: self.degconv.strip_k,
            reduce_r: self.widths[stage] / m,
        }
        .for_resolution(h, w);
        cfg.validate(self.widths[stage])?;
        Ok(cfg)
    }

    fn ssm_for_stage(&self, stage: usize) -> SsmConfig {
        SsmConfig {
            dim: self.widths[stage],
            state_dim: self.state_dim,
            literal_delta: self.literal_delta,
            scan_directions: self.scan_directions,
        }
    }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

enum Stage<'t, T: Scalar> {
    Mixer(Vec<TransMixerParams<'t, T>>),
    Cnn { w: Var<'t, T>, b: Var<'t, T> },
}

pub struct Model<'t, T: Scalar> {
    pub cfg: ModelConfig,
    stem1_w: Var<'t, T>,
    stem1_b: Var<'t, T>,
    stem2_w: Var<'t, T>,
    stem2_b: Var<'t, T>,
    stages: Vec<Stage<'t, T>>,
    downsamples: Vec<(Var<'t, T>, Var<'t, T>)>,
    deg: Vec<Option<DegParams<'t, T>>>,
    srf: Option<SrfParams<'t, T>>,
    head: HeadParams<'t, T>,
}

/// Data-dependent discrete decisions of one forward pass, reusable to rerun
/// the same piecewise-linear region (finite differences pin these).
#[derive(Debug, Clone, Default)]
pub struct Routing<T: Scalar> {
    /// channel split per mixer block, in execution order
    pub splits: Vec<ChannelSplit>,
    /// direction priors per stage, per view
    pub eps: Vec<Vec<Tensor<T>>>,
}

pub struct ForwardAux<T: Scalar> {
    /// scan trace per mixer block, in execution order
    pub traces: Vec<ScanTrace<T>>,
    pub routing: Routing<T>,
    /// pyramid features before edge gating
    pub pyramid: Vec<Tensor<T>>,
    /// pyramid features after edge gating (same as `pyramid` when disabled)
    pub pyramid_deg: Vec<Tensor<T>>,
    /// decoder spatial attention map
    pub alpha: Option<Tensor<T>>,
    /// upsampled deeper levels before reweighting
    pub upsampled: Vec<Tensor<T>>,
    /// reweighted deeper levels
    pub refined: Vec<Tensor<T>>,
    /// orientation map per stage (when edge gating ran unpinned)
    pub theta: Vec<Option<Tensor<T>>>,
}

impl<'t, T: Scalar> Model<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.stem1_w.tape()
    }

    pub fn init(tape: &'t Tape<T>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let w = cfg.widths;

        let mut rng = root.derive("stem");
        let stem1_w = tape.leaf(init::conv_weight(&mut rng, w[0], 3, 3, 3));
        let stem1_b = tape.leaf(Tensor::zeros(&[w[0]]));
        let stem2_w = tape.leaf(init::conv_weight(&mut rng, w[0], w[0], 3, 3));
        let stem2_b = tape.leaf(Tensor::zeros(&[w[0]]));

        let mut stages = Vec::with_capacity(STAGES);
        let mut downsamples = Vec::new();
        let mut deg = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            if i > 0 {
                let mut rng = root.derive(&format!("down{i}"));
                downsamples.push((
                    tape.leaf(init::conv_weight(&mut rng, w[i], w[i - 1], 3, 3)),
                    tape.leaf(Tensor::zeros(&[w[i]])),
                ));
            }
            let mut rng = root.derive(&format!("stage{i}"));
            let stage = match cfg.arch {
                Arch::TransMixer => Stage::Mixer(
                    (0..cfg.transmixer.depth)
                        .map(|_| {
                            TransMixerParams::init(
                                tape,
                                cfg.ssm_for_stage(i),
                                cfg.transmixer,
                                &mut rng,
                            )
                        })
                        .collect(),
                ),
                Arch::Cnn => Stage::Cnn {
                    w: tape.leaf(init::conv_weight(&mut rng, w[i], w[i], 3, 3)),
                    b: tape.leaf(Tensor::zeros(&[w[i]])),
                },
            };
            stages.push(stage);
            deg.push(if cfg.degconv.enabled {
                let mut rng = root.derive(&format!("deg{i}"));
                Some(DegParams::init(tape, w[i], cfg.deg_for_stage(i)?, &mut rng))
            } else {
                None
            });
        }

        let srf = cfg.srf_enabled.then(|| {
            let mut rng = root.derive("srf");
            SrfParams::init(tape, w[0], &mut rng)
        });
        let mut rng = root.derive("head");
        let head = HeadParams::init(tape, w.iter().sum(), &mut rng);

        Ok(Model {
            cfg: cfg.clone(),
            stem1_w,
            stem1_b,
            stem2_w,
            stem2_b,
            stages,
            downsamples,
            deg,
            srf,
            head,
        })
    }

    /// Trainable parameters with stable names, in construction order.
    pub fn named_params(&self) -> Vec<(String, Var<'t, T>)> {
        let mut out = Vec::new();
        out.push(("stem.conv1.w".into(), self.stem1_w));
        out.push(("stem.conv1.b".into(), self.stem1_b));
        out.push(("stem.conv2.w".into(), self.stem2_w));
        out.push(("stem.conv2.b".into(), self.stem2_b));
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                out.push((format!("down{i}.w"), self.downsamples[i - 1].0));
                out.push((format!("down{i}.b"), self.downsamples[i - 1].1));
            }
            match stage {
                Stage::Mixer(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        b.named(&format!("stage{i}.block{j}"), &mut out);
                    }
                }
                Stage::Cnn { w, b } => {
                    out.push((format!("stage{i}.conv.w"), *w));
                    out.push((format!("stage{i}.conv.b"), *b));
                }
            }
            if let Some(d) = &self.deg[i] {
                d.named(&format!("deg{i}"), &mut out);
            }
        }
        if let Some(s) = &self.srf {
            s.named("srf", &mut out);
        }
        self.head.named("head", &mut out);
        out
    }

    /// Fixed (non-trainable) buffers: the direction-embedding projections.
    pub fn named_buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, d) in self.deg.iter().enumerate() {
            if let Some(d) = d {
                d.buffers(&format!("deg{i}"), &mut out);
            }
        }
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.value().numel()).sum()
    }

    pub fn deg_param_count(&self) -> usize {
        self.deg.iter().flatten().map(|d| d.trainable_param_count()).sum()
    }

    pub fn forward(
        &self,
        image: &Tensor<T>,
        routing: Option<&Routing<T>>,
    ) -> Result<(Var<'t, T>, ForwardAux<T>)> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::config(format!("input must be [3,H,W], got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} must be divisible by {TOTAL_STRIDE}"
            )));
        }
        let tape = self.stem1_w.tape();
        let s2 = Conv2dSpec { stride: (2, 2), pad: (1, 1), groups: 1 };

        let x = tape.leaf(image.clone());
        let mut f = x
            .conv2d(self.stem1_w, Some(self.stem1_b), s2)
            .silu()
            .conv2d(self.stem2_w, Some(self.stem2_b), s2)
            .silu();

        let mut traces = Vec::new();
        let mut splits = Vec::new();
        let mut eps_all = Vec::new();
        let mut pyramid_vars = Vec::with_capacity(STAGES);
        let mut pyramid = Vec::with_capacity(STAGES);
        let mut pyramid_deg = Vec::with_capacity(STAGES);
        let mut theta = Vec::with_capacity(STAGES);
        let mut block_idx = 0usize;

        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let (dw, db) = self.downsamples[i - 1];
                f = f.conv2d(dw, Some(db), s2).silu();
            }
            let fs = f.shape();
            let (c, sh, sw) = (fs[0], fs[1], fs[2]);
            match stage {
                Stage::Mixer(blocks) => {
                    let grid = TokenGrid { h: sh, w: sw };
                    let mut tokens = f.reshape(&[c, sh * sw]).permute(&[1, 0]);
                    for b in blocks {
                        let pinned = routing.map(|r| &r.splits[block_idx]);
                        let (o, trace, split) = transmixer_block(tokens, b, grid, pinned)?;
                        tokens = o;
                        traces.push(trace);
                        splits.push(split);
                        block_idx += 1;
                    }
                    f = tokens.permute(&[1, 0]).reshape(&[c, sh, sw]);
                }
                Stage::Cnn { w, b } => {
                    f = f.conv2d(*w, Some(*b), Conv2dSpec::same((3, 3))).relu();
                }
            }
            pyramid.push(f.value());

            if let Some(d) = &self.deg[i] {
                let pinned = routing.map(|r| r.eps[i].as_slice());
                let (refined, aux) = degconv_forward(f, d, pinned);
                f = refined;
                eps_all.push(aux.epsilon);
                theta.push(aux.theta);
            } else {
                eps_all.push(Vec::new());
                theta.push(None);
            }
            pyramid_deg.push(f.value());
            pyramid_vars.push(f);
        }

        let (fused, alpha, upsampled, refined) = if let Some(srf) = &self.srf {
            let (fused, aux) = srf_fuse(&pyramid_vars, srf)?;
            (fused, Some(aux.alpha), aux.upsampled, aux.refined)
        } else {
            (plain_fuse(&pyramid_vars)?, None, Vec::new(), Vec::new())
        };
        let logits = seg_head(fused, (h, w), &self.head);

        Ok((
            logits,
            ForwardAux {
                traces,
                routing: Routing { splits, eps: eps_all },
                pyramid,
                pyramid_deg,
                alpha,
                upsampled,
                refined,
                theta,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor<T>)> =
            self.named_params().into_iter().map(|(n, v)| (n, v.value())).collect();
        entries.extend(self.named_buffers());
        checkpoint::save(path, &entries)
    }

    /// Build from config and overwrite every tensor from a checkpoint.
    /// Unknown or missing names are errors.
    pub fn load(tape: &'t Tape<T>, cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Model::init(tape, cfg, 0)?;
        let mut stored = checkpoint::load::<T>(path)?;
        for (name, var) in model.named_params() {
            let t = stored
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            if t.shape() != var.value().shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, model wants {:?}",
                    t.shape(),
                    var.value().shape()
                )));
            }
            tape.set_value(var, t);
        }
        let buffer_names: Vec<String> =
            model.named_buffers().into_iter().map(|(n, _)| n).collect();
        for name in buffer_names {
            let t = stored
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name:?}")))?;
            model.set_buffer(&name, t)?;
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra:?} in checkpoint")));
        }
        Ok(model)
    }

    fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        // names look like deg{i}.embed.{field}
        let rest = name
            .strip_prefix("deg")
            .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name:?}")))?;
        let (idx, field) = rest
            .split_once(".embed.")
            .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name:?}")))?;
        let i: usize = idx
            .parse()
            .map_err(|_| Error::Checkpoint(format!("unknown buffer {name:?}")))?;
        let slot = self
            .deg
            .get_mut(i)
            .and_then(|d| d.as_mut())
            .ok_or_else(|| Error::Checkpoint(format!("no edge-gating stage {i}")))?;
        slot.embed.set_buffer(field, value)
    }
}

// ---------------------------------------------------------------------------
// analytic cost model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    /// convolutions (2 * MACs + bias adds)
    pub conv: u64,
    /// token-side projections (2 * MACs + bias adds)
    pub matmul: u64,
    /// attention score/value products and softmax
    pub attention: u64,
    /// recurrence steps and step-size projections
    pub scan: u64,
    /// activations, norms, gates, histogram work
    pub elementwise: u64,
    /// bilinear resampling
    pub resample: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.matmul + self.attention + self.scan + self.elementwise + self.resample
    }
}

fn conv_flops(cin: usize, cout: usize, k: (usize, usize), out_hw: (usize, usize), groups: usize) -> u64 {
    let macs = (cout * out_hw.0 * out_hw.1) as u64 * (cin / groups * k.0 * k.1) as u64;
    2 * macs + (cout * out_hw.0 * out_hw.1) as u64
}

fn linear_flops(rows: usize, din: usize, dout: usize) -> u64 {
    2 * (rows * din * dout) as u64 + (rows * dout) as u64
}

/// Closed-form count of trainable parameters for a config.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let w = cfg.widths;
    let mut total = 0usize;
    // stem
    total += w[0] * 3 * 9 + w[0];
    total += w[0] * w[0] * 9 + w[0];
    for i in 0..STAGES {
        let d = w[i];
        if i > 0 {
            total += d * w[i - 1] * 9 + d;
        }
        match cfg.arch {
            Arch::TransMixer => {
                let n = cfg.state_dim;
                let d_g = cfg.transmixer.global_width(d);
                let d_l = d - d_g;
                let mut block = 2 * d; // pre-norm
                block += 3 * (d * d + d); // in, gate, out projections
                block += d * crate::ssm::CONV1D_WIDTH + d;
                block += d * d + d; // step-size projection
                block += 2 * d * n; // input/output state projections
                block += d * n; // decay
                if d_g > 0 {
                    block += 4 * (d_g * d_g + d_g);
                }
                if d_l > 0 {
                    block += 2 * d_l + d_l * d_l + d_l;
                }
                total += cfg.transmixer.depth * block;
            }
            Arch::Cnn => {
                total += d * d * 9 + d;
            }
        }
        if cfg.degconv.enabled {
            let deg = cfg.deg_for_stage(i).expect("validated config");
            let gate_r =
                if d % (deg.reduce_r * 2) == 0 { deg.reduce_r * 2 } else { deg.reduce_r };
            total += 2 * edge_conv_param_count(d, deg.strip_k, deg.reduce_r);
            total += edge_conv_param_count(d, deg.strip_k, gate_r);
        }
    }
    if cfg.srf_enabled {
        total += w[0] + 1;
    }
    let sum_c: usize = w.iter().sum();
    total += HEAD_HIDDEN * sum_c + HEAD_HIDDEN;
    total += HEAD_HIDDEN + 1;
    total
}

/// Decoder-side cost (fusion plus head) for a given input resolution.
pub fn decoder_flop_count(cfg: &ModelConfig, input: (usize, usize)) -> u64 {
    let w = cfg.widths;
    let (h1, w1) = cfg.stage_hw(0, input);
    let sum_c: usize = w.iter().sum();
    let mut fl = 0u64;
    if cfg.srf_enabled {
        fl += conv_flops(w[0], 1, (1, 1), (h1, w1), 1);
        fl += 4 * (h1 * w1) as u64; // sigmoid
        for i in 1..STAGES {
            fl += 8 * (w[i] * h1 * w1) as u64; // bilinear gather
            fl += (w[i] * h1 * w1) as u64; // reweighting multiply
        }
    } else {
        for i in 1..STAGES {
            fl += 8 * (w[i] * h1 * w1) as u64;
        }
    }
    // head: upsample fused stack, two pointwise convs, relu
    fl += 8 * (sum_c * input.0 * input.1) as u64;
    fl += conv_flops(sum_c, HEAD_HIDDEN, (1, 1), input, 1);
    fl += (HEAD_HIDDEN * input.0 * input.1) as u64;
    fl += conv_flops(HEAD_HIDDEN, 1, (1, 1), input, 1);
    fl
}

/// Cost of the dense decoder this design replaces: one 3x3 mixing conv over
/// the full channel stack at input resolution.
pub fn dense_decoder_flop_count(cfg: &ModelConfig, input: (usize, usize)) -> u64 {
    let sum_c: usize = cfg.widths.iter().sum();
    conv_flops(sum_c, sum_c, (3, 3), input, 1)
}

/// Analytic forward cost at `input` resolution. Convs and matmuls count
/// 2*MACs; elementwise work counts per element.
pub fn flop_count(cfg: &ModelConfig, input: (usize, usize)) -> FlopBreakdown {
    let w = cfg.widths;
    let mut fl = FlopBreakdown::default();
    let (h2, w2) = (input.0 / 2, input.1 / 2);
    let (h4, w4) = (input.0 / 4, input.1 / 4);
    fl.conv += conv_flops(3, w[0], (3, 3), (h2, w2), 1);
    fl.elementwise += 4 * (w[0] * h2 * w2) as u64;
    fl.conv += conv_flops(w[0], w[0], (3, 3), (h4, w4), 1);
    fl.elementwise += 4 * (w[0] * h4 * w4) as u64;

    for i in 0..STAGES {
        let d = w[i];
        let (sh, sw) = cfg.stage_hw(i, input);
        let l = sh * sw;
        if i > 0 {
            fl.conv += conv_flops(w[i - 1], d, (3, 3), (sh, sw), 1);
            fl.elementwise += 4 * (d * l) as u64;
        }
        match cfg.arch {
            Arch::TransMixer => {
                let n = cfg.state_dim;
                let dirs = cfg.scan_directions as u64;
                let d_g = cfg.transmixer.global_width(d);
                let d_l = d - d_g;
                let mut block = FlopBreakdown::default();
                block.elementwise += 8 * (l * d) as u64; // pre-norm
                block.matmul += 3 * linear_flops(l, d, d); // in, gate, out
                block.elementwise += 2 * 4 * (l * d) as u64; // two silus
                block.conv += (2 * l * d * crate::ssm::CONV1D_WIDTH + l * d) as u64;
                block.scan += linear_flops(l, d, d) + 4 * (l * d) as u64; // step size
                block.matmul += 2 * linear_flops(l, d, n);
                block.scan += dirs * 6 * (l * d * n) as u64;
                block.elementwise += (l * d) as u64; // output gate multiply
                if d_g > 0 {
                    block.attention += 4 * linear_flops(l, d_g, d_g);
                    block.attention += 2 * 2 * (l * l * d_g) as u64;
                    block.attention += 5 * (l * l * cfg.transmixer.heads) as u64;
                }
                if d_l > 0 {
                    block.elementwise += 8 * (l * d_l) as u64; // norm
                    block.elementwise += 9 * (l * d_l) as u64; // 3x3 pool
                    block.conv += conv_flops(d_l, d_l, (1, 1), (sh, sw), 1);
                    block.elementwise += 5 * (l * d_l) as u64; // sigmoid + gate
                }
                block.elementwise += (l * d) as u64; // residual add
                fl.conv += cfg.transmixer.depth as u64 * block.conv;
                fl.matmul += cfg.transmixer.depth as u64 * block.matmul;
                fl.attention += cfg.transmixer.depth as u64 * block.attention;
                fl.scan += cfg.transmixer.depth as u64 * block.scan;
                fl.elementwise += cfg.transmixer.depth as u64 * block.elementwise;
            }
            Arch::Cnn => {
                fl.conv += conv_flops(d, d, (3, 3), (sh, sw), 1);
                fl.elementwise += (d * l) as u64;
            }
        }
        if cfg.degconv.enabled {
            let deg = cfg.deg_for_stage(i).expect("validated config");
            let r = deg.reduce_r;
            let m = d / r;
            let (vh, vw) = ((sh.min(deg.view.0)).max(1), (sw.min(deg.view.1)).max(1));
            let n_views = sh.div_ceil(vh) * sw.div_ceil(vw);
            let va = vh * vw;
            let mut per_view = 0u64;
            // channel mean + two 3x3 sobel passes + angle fold
            per_view += (d * va) as u64;
            per_view += 2 * conv_flops(1, 1, (3, 3), (vh, vw), 1);
            per_view += 6 * va as u64;
            // histogram binning and weighting
            per_view += 4 * va as u64 + deg.nbins as u64;
            // embedding convs on the cell grid
            let (gh, gw) = (vh / deg.cell.0, vw / deg.cell.1);
            per_view += conv_flops(deg.nbins, d, (1, 1), (gh, gw), 1);
            per_view += conv_flops(d, d, (3, 3), (gh, gw), 1);
            per_view += 10 * (d * gh * gw) as u64;
            // two gated edge convs + sigmoid + multiply
            per_view += 2 * edge_conv_flops(d, m, deg.strip_k, (vh, vw));
            per_view += 5 * (d * va) as u64;
            fl.conv += n_views as u64 * per_view;
            // post-restore smoothing at full stage resolution
            fl.conv += edge_conv_flops(d, m, deg.strip_k, (sh, sw));
        }
    }

    let dec = decoder_flop_count(cfg, input);
    fl.resample += dec;
    fl
}

fn edge_conv_flops(c: usize, m: usize, k: usize, hw: (usize, usize)) -> u64 {
    conv_flops(c, m, (1, 1), hw, 1)
        + conv_flops(m, m, (1, k), hw, 1)
        + conv_flops(m, m, (k, 1), hw, 1)
        + conv_flops(2 * m, 2 * m, (3, 3), hw, 2 * m)
        + conv_flops(2 * m, c, (1, 1), hw, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.range(0.0, 1.0)).collect())
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = ModelConfig::desk_default();
        let json = cfg.to_json();
        let back = ModelConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        assert!(json.contains("\"gamma\""));
        assert!(json.contains("\"nbins\""));
        assert!(json.contains("\"reduce_r\""));
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let mut cfg = ModelConfig::desk_default();
        cfg.input_size = (60, 64);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::desk_default();
        cfg.widths = [8, 8, 32, 64];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::desk_default();
        cfg.widths = [0, 16, 32, 64];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_resolutions_follow_stride_schedule() {
        let cfg = ModelConfig::desk_default();
        assert_eq!(cfg.stage_hw(0, (64, 64)), (16, 16));
        assert_eq!(cfg.stage_hw(1, (64, 64)), (8, 8));
        assert_eq!(cfg.stage_hw(2, (64, 64)), (4, 4));
        assert_eq!(cfg.stage_hw(3, (64, 64)), (2, 2));
    }

    #[test]
    fn forward_shapes_and_aux() {
        let cfg = ModelConfig::desk_default();
        let tape = Tape::<f64>::new();
        let model = Model::init(&tape, &cfg, 7).unwrap();
        let mut rng = Rng::new(1);
        let img = rand_image(&mut rng, 64, 64);
        let (logits, aux) = model.forward(&img, None).unwrap();
        assert_eq!(logits.shape(), vec![1, 64, 64]);
        assert_eq!(aux.pyramid.len(), 4);
        assert_eq!(aux.pyramid[0].shape(), &[8, 16, 16]);
        assert_eq!(aux.pyramid[3].shape(), &[64, 2, 2]);
        assert_eq!(aux.traces.len(), 4);
        assert_eq!(aux.routing.splits.len(), 4);
        assert!(aux.alpha.is_some());
        assert!(logits.value().all_finite());
    }

    #[test]
    fn forward_rejects_indivisible_input_before_compute() {
        let cfg = ModelConfig::desk_default();
        let tape = Tape::<f64>::new();
        let model = Model::init(&tape, &cfg, 7).unwrap();
        let img = Tensor::<f64>::zeros(&[3, 60, 64]);
        assert!(matches!(model.forward(&img, None), Err(Error::Config(_))));
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let cfg = ModelConfig::desk_default();
        let mut rng = Rng::new(2);
        let img = rand_image(&mut rng, 64, 64);
        let run = || {
            let tape = Tape::<f64>::new();
            let model = Model::init(&tape, &cfg, 7).unwrap();
            model.forward(&img, None).unwrap().0.value()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn param_count_closed_form_matches_model() {
        for cfg in [
            ModelConfig::desk_default(),
            ModelConfig::baseline_cnn(),
            ModelConfig {
                srf_enabled: false,
                ..ModelConfig::desk_default()
            },
            ModelConfig {
                degconv: DegSettings { enabled: false, ..DegSettings::default() },
                ..ModelConfig::desk_default()
            },
        ] {
            let tape = Tape::<f64>::new();
            let model = Model::init(&tape, &cfg, 3).unwrap();
            assert_eq!(
                model.trainable_param_count(),
                param_count(&cfg),
                "closed form disagrees for {:?}",
                cfg.arch
            );
        }
    }

    #[test]
    fn edge_gating_stays_under_eight_percent_of_parameters() {
        let cfg = ModelConfig::desk_default();
        let tape = Tape::<f64>::new();
        let model = Model::init(&tape, &cfg, 3).unwrap();
        let total = model.trainable_param_count();
        let deg = model.deg_param_count();
        let share = deg as f64 / total as f64;
        assert!(
            share < 0.08,
            "edge gating holds {deg} of {total} trainable parameters ({:.1}%)",
            share * 100.0
        );
    }

    #[test]
    fn conv_flops_scale_quadratically_with_resolution() {
        let cfg = ModelConfig::desk_default();
        let base = flop_count(&cfg, (64, 64));
        let big = flop_count(&cfg, (128, 128));
        assert_eq!(big.conv, 4 * base.conv, "conv flops must scale by exactly 4");
        assert!(big.attention > 4 * base.attention, "attention grows faster than area");
    }

    #[test]
    fn decoder_flops_undercut_dense_decoder_by_five_x() {
        let cfg = ModelConfig::desk_default();
        let dec = decoder_flop_count(&cfg, (64, 64));
        let dense = dense_decoder_flop_count(&cfg, (64, 64));
        assert!(
            (dec as f64) < 0.2 * dense as f64,
            "decoder {dec} vs dense baseline {dense}"
        );
    }

    #[test]
    fn paper_resolution_estimate_lands_within_order_of_magnitude() {
        let cfg = ModelConfig::paper_scale();
        let total = flop_count(&cfg, cfg.input_size).total() as f64;
        let anchor = 2.05e9;
        assert!(
            total > anchor / 10.0 && total < anchor * 10.0,
            "512x512 estimate {total:.3e} should sit within 10x of {anchor:.2e}"
        );
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_bits() {
        let dir = std::env::temp_dir().join("mxseg_net_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.mxseg");
        let cfg = ModelConfig::desk_default();
        let mut rng = Rng::new(5);
        let img = rand_image(&mut rng, 64, 64);

        let tape = Tape::<f64>::new();
        let model = Model::init(&tape, &cfg, 11).unwrap();
        let (logits, _) = model.forward(&img, None).unwrap();
        let want = logits.value();
        model.save(&path).unwrap();

        let tape2 = Tape::<f64>::new();
        let loaded = Model::load(&tape2, &cfg, &path).unwrap();
        let (logits2, _) = loaded.forward(&img, None).unwrap();
        assert!(logits2.value().bit_eq(&want), "reloaded forward must be bit-identical");
    }

    #[test]
    fn load_rejects_missing_and_extra_tensors() {
        let dir = std::env::temp_dir().join("mxseg_net_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("wrong.mxseg");
        let cfg = ModelConfig::desk_default();
        let tape = Tape::<f64>::new();
        let model = Model::init(&tape, &cfg, 11).unwrap();
        let mut entries: Vec<(String, Tensor<f64>)> =
            model.named_params().into_iter().map(|(n, v)| (n, v.value())).collect();
        entries.extend(model.named_buffers());
        entries.pop();
        checkpoint::save(&path, &entries).unwrap();
        let tape2 = Tape::<f64>::new();
        assert!(Model::load(&tape2, &cfg, &path).is_err());
    }

    #[test]
    fn pinned_routing_reproduces_unpinned_forward() {
        let cfg = ModelConfig::desk_default();
        let tape = Tape::<f64>::new();
        let model = Model::init(&tape, &cfg, 13).unwrap();
        let mut rng = Rng::new(6);
        let img = rand_image(&mut rng, 64, 64);
        let (logits, aux) = model.forward(&img, None).unwrap();
        let (logits2, _) = model.forward(&img, Some(&aux.routing)).unwrap();
        assert!(logits.value().bit_eq(&logits2.value()));
    }

    #[test]
    fn baseline_cnn_runs_and_uses_plain_decoder() {
        let cfg = ModelConfig::baseline_cnn();
        let tape = Tape::<f64>::new();
        let model = Model::init(&tape, &cfg, 17).unwrap();
        let mut rng = Rng::new(7);
        let img = rand_image(&mut rng, 64, 64);
        let (logits, aux) = model.forward(&img, None).unwrap();
        assert_eq!(logits.shape(), vec![1, 64, 64]);
        assert!(aux.traces.is_empty());
        assert!(aux.alpha.is_none());
    }

    #[test]
    fn four_direction_variant_runs() {
        let cfg = ModelConfig { scan_directions: 4, ..ModelConfig::desk_default() };
        let tape = Tape::<f64>::new();
        let model = Model::init(&tape, &cfg, 19).unwrap();
        let mut rng = Rng::new(8);
        let img = rand_image(&mut rng, 32, 32);
        let (logits, _) = model.forward(&img, None).unwrap();
        assert_eq!(logits.shape(), vec![1, 32, 32]);
    }
}
