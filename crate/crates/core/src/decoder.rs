//! Decoder: a sigmoid spatial map from the highest-resolution level reweights
//! the upsampled deeper levels before concatenation; a pixelwise two-layer
//! head turns the fused stack into mask logits.

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::kernels::Conv2dSpec;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HEAD_HIDDEN: usize = 64;

pub struct SrfParams<'t, T: Scalar> {
    pub alpha_w: Var<'t, T>,
    pub alpha_b: Var<'t, T>,
}

impl<'t, T: Scalar> SrfParams<'t, T> {
    pub fn init(tape: &'t Tape<T>, c1: usize, rng: &mut Rng) -> Self {
        SrfParams {
            alpha_w: tape.leaf(init::conv_weight_linear(rng, 1, c1, 1, 1)),
            alpha_b: tape.leaf(Tensor::zeros(&[1])),
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Var<'t, T>)>) {
        out.push((format!("{prefix}.alpha_w"), self.alpha_w));
        out.push((format!("{prefix}.alpha_b"), self.alpha_b));
    }
}

pub struct SrfAux<T: Scalar> {
    /// `[1, H_1, W_1]` spatial attention, strictly inside (0, 1)
    pub alpha: Tensor<T>,
    /// upsampled deeper levels, before reweighting
    pub upsampled: Vec<Tensor<T>>,
    /// reweighted deeper levels
    pub refined: Vec<Tensor<T>>,
}

/// Fuse a four-level pyramid. Level one passes through untouched and supplies
/// the attention map; deeper levels are upsampled to its resolution and
/// multiplied by the map before the channel concat.
pub fn srf_fuse<'t, T: Scalar>(
    levels: &[Var<'t, T>],
    p: &SrfParams<'t, T>,
) -> Result<(Var<'t, T>, SrfAux<T>)> {
    if levels.len() != 4 {
        return Err(Error::config(format!("srf expects 4 pyramid levels, got {}", levels.len())));
    }
    let s1 = levels[0].shape();
    let (h1, w1) = (s1[1], s1[2]);
    let alpha = levels[0].conv2d(p.alpha_w, Some(p.alpha_b), Conv2dSpec::unit()).sigmoid();

    let mut parts = vec![levels[0]];
    let mut upsampled = Vec::new();
    let mut refined = Vec::new();
    for lv in &levels[1..] {
        let up = lv.upsample_bilinear((h1, w1));
        let c = up.shape()[0];
        let weighted = alpha.expand(&[c, h1, w1]).mul(up);
        upsampled.push(up.value());
        refined.push(weighted.value());
        parts.push(weighted);
    }
    let fused = concat(&parts, 0);
    Ok((fused, SrfAux { alpha: alpha.value(), upsampled, refined }))
}

/// Ablation decoder: plain upsample-and-concat with no spatial reweighting.
pub fn plain_fuse<'t, T: Scalar>(levels: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if levels.len() != 4 {
        return Err(Error::config(format!("fuse expects 4 pyramid levels, got {}", levels.len())));
    }
    let s1 = levels[0].shape();
    let (h1, w1) = (s1[1], s1[2]);
    let mut parts = vec![levels[0]];
    for lv in &levels[1..] {
        parts.push(lv.upsample_bilinear((h1, w1)));
    }
    Ok(concat(&parts, 0))
}

pub struct HeadParams<'t, T: Scalar> {
    pub w1: Var<'t, T>,
    pub b1: Var<'t, T>,
    pub w2: Var<'t, T>,
    pub b2: Var<'t, T>,
}

impl<'t, T: Scalar> HeadParams<'t, T> {
    pub fn init(tape: &'t Tape<T>, c_in: usize, rng: &mut Rng) -> Self {
        // the fused stack arrives unnormalized, so plain Kaiming here yields
        // saturated logits (|z| ~ 50) at init; damping both projections keeps
        // the start in the responsive region of the loss
        let damp = T::from_f64(0.2);
        HeadParams {
            w1: tape.leaf(init::conv_weight::<T>(rng, HEAD_HIDDEN, c_in, 1, 1).map(|v| v * damp)),
            b1: tape.leaf(Tensor::zeros(&[HEAD_HIDDEN])),
            w2: tape.leaf(init::conv_weight::<T>(rng, 1, HEAD_HIDDEN, 1, 1).map(|v| v * damp)),
            b2: tape.leaf(Tensor::zeros(&[1])),
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Var<'t, T>)>) {
        for (name, var) in [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)] {
            out.push((format!("{prefix}.{name}"), var));
        }
    }
}

/// Upsample the fused stack to the output resolution, then a pixelwise MLP
/// (1x1 conv, ReLU, 1x1 conv). Returns raw logits; the loss applies the
/// sigmoid.
pub fn seg_head<'t, T: Scalar>(
    fused: Var<'t, T>,
    out_hw: (usize, usize),
    p: &HeadParams<'t, T>,
) -> Var<'t, T> {
    fused
        .upsample_bilinear(out_hw)
        .conv2d(p.w1, Some(p.b1), Conv2dSpec::unit())
        .relu()
        .conv2d(p.w2, Some(p.b2), Conv2dSpec::unit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::check_param_directional_multi_h;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.range(-1.0, 1.0)).collect())
    }

    fn pyramid<'t>(tape: &'t Tape<f64>, rng: &mut Rng) -> Vec<Var<'t, f64>> {
        vec![
            tape.leaf(rand_tensor(rng, &[3, 8, 8])),
            tape.leaf(rand_tensor(rng, &[4, 4, 4])),
            tape.leaf(rand_tensor(rng, &[5, 2, 2])),
            tape.leaf(rand_tensor(rng, &[6, 1, 1])),
        ]
    }

    #[test]
    fn zero_alpha_conv_halves_upsampled_levels() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(90);
        let levels = pyramid(&tape, &mut rng);
        let p = SrfParams::init(&tape, 3, &mut rng);
        tape.set_value(p.alpha_w, Tensor::zeros(&[1, 3, 1, 1]));
        let (_, aux) = srf_fuse(&levels, &p).unwrap();
        assert!(aux.alpha.data().iter().all(|&a| a == 0.5));
        for (up, re) in aux.upsampled.iter().zip(&aux.refined) {
            for (u, r) in up.data().iter().zip(re.data()) {
                assert!((r - 0.5 * u).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_strictly_inside_unit_interval() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(91);
        let levels = pyramid(&tape, &mut rng);
        let p = SrfParams::init(&tape, 3, &mut rng);
        let (_, aux) = srf_fuse(&levels, &p).unwrap();
        assert!(aux.alpha.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn fused_shape_is_channel_sum_at_level_one_resolution() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(92);
        let levels = pyramid(&tape, &mut rng);
        let p = SrfParams::init(&tape, 3, &mut rng);
        let (fused, _) = srf_fuse(&levels, &p).unwrap();
        assert_eq!(fused.shape(), vec![3 + 4 + 5 + 6, 8, 8]);
    }

    #[test]
    fn level_one_passes_through_unweighted() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(93);
        let levels = pyramid(&tape, &mut rng);
        let f1 = levels[0].value();
        let p = SrfParams::init(&tape, 3, &mut rng);
        let (fused, _) = srf_fuse(&levels, &p).unwrap();
        let head = Tensor::from_vec(&[3, 8, 8], fused.value().data()[..3 * 64].to_vec());
        assert!(head.bit_eq(&f1));
    }

    #[test]
    fn wrong_level_count_is_config_error() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(94);
        let levels = vec![tape.leaf(rand_tensor(&mut rng, &[3, 8, 8]))];
        let p = SrfParams::init(&tape, 3, &mut rng);
        assert!(matches!(srf_fuse(&levels, &p), Err(Error::Config(_))));
        assert!(matches!(plain_fuse(&levels), Err(Error::Config(_))));
    }

    #[test]
    fn head_shape_and_zero_weight_bias() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(95);
        let fused = tape.leaf(rand_tensor(&mut rng, &[7, 4, 4]));
        let p = HeadParams::init(&tape, 7, &mut rng);
        let logits = seg_head(fused, (16, 16), &p);
        assert_eq!(logits.shape(), vec![1, 16, 16]);

        tape.set_value(p.w1, Tensor::zeros(&[HEAD_HIDDEN, 7, 1, 1]));
        tape.set_value(p.w2, Tensor::zeros(&[1, HEAD_HIDDEN, 1, 1]));
        tape.set_value(p.b2, Tensor::from_vec(&[1], vec![0.75]));
        let flat = seg_head(fused, (16, 16), &p).value();
        assert!(flat.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn plain_fuse_concats_upsampled_levels() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(96);
        let levels = pyramid(&tape, &mut rng);
        let fused = plain_fuse(&levels).unwrap();
        assert_eq!(fused.shape(), vec![18, 8, 8]);
        let head = Tensor::from_vec(&[3, 8, 8], fused.value().data()[..3 * 64].to_vec());
        assert!(head.bit_eq(&levels[0].value()));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(97);
        let level_shapes: Vec<Vec<usize>> =
            vec![vec![3, 8, 8], vec![4, 4, 4], vec![5, 2, 2], vec![6, 1, 1]];
        let level_values: Vec<Tensor<f64>> =
            level_shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let srf = SrfParams::init(&tape, 3, &mut rng);
        let head = HeadParams::init(&tape, 18, &mut rng);
        let mark = tape.len();
        let mask = rand_tensor(&mut rng, &[1, 16, 16]);

        let forward = |tape: &Tape<f64>| -> f64 {
            let levels: Vec<Var<'_, f64>> =
                level_values.iter().map(|t| tape.leaf(t.clone())).collect();
            let (fused, _) = srf_fuse(&levels, &srf).unwrap();
            let logits = seg_head(fused, (16, 16), &head);
            let m = tape.leaf(mask.clone());
            logits.mul(m).sum_all().value().item()
        };

        let levels: Vec<Var<'_, f64>> =
            level_values.iter().map(|t| tape.leaf(t.clone())).collect();
        let (fused, _) = srf_fuse(&levels, &srf).unwrap();
        let logits = seg_head(fused, (16, 16), &head);
        let m = tape.leaf(mask.clone());
        let loss = logits.mul(m).sum_all();
        let grads = tape.backward(loss);

        let mut names = Vec::new();
        srf.named("srf", &mut names);
        head.named("head", &mut names);
        let mut dir_rng = Rng::new(98);
        for (name, var) in names {
            let analytic = grads.get(var).cloned().unwrap();
            let param = var.value();
            let mut set = |t: Tensor<f64>| tape.set_value(var, t);
            let mut eval = || {
                tape.truncate(mark);
                forward(&tape)
            };
            let fail = check_param_directional_multi_h(
                &param,
                &analytic,
                &mut dir_rng,
                &[1e-5, 1e-6, 1e-4],
                &mut set,
                &mut eval,
            );
            assert!(fail.within(1e-6, 2e-9), "{name}: rel={}", fail.rel_err);
            tape.truncate(mark);
        }
    }
}
