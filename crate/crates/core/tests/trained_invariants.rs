//! Invariants that need a trained model rather than a fresh one: the decoder
//! refinement-evidence inequality and the ablation harness actually training
//! every config it emits.

use mixercseg::autodiff::Tape;
use mixercseg::data::{generate, split_ids, CrackSpec, SegSample};
use mixercseg::kernels::resize_bilinear;
use mixercseg::net::{Model, ModelConfig};
use mixercseg::tensor::Tensor;
use mixercseg::train::{ablation_matrix, train, TrainConfig, BEST_CHECKPOINT};

fn dataset(seed: u64, count: usize, size: usize) -> Vec<SegSample<f32>> {
    generate(&CrackSpec { seed, ..Default::default() }, count, size, size)
}

/// After training, the decoder's reweighted deepest level should hold more
/// energy on crack pixels than off them: the spatial map concentrates the
/// coarse semantics where the high-resolution level sees structure.
#[test]
fn refined_deep_features_concentrate_on_cracks() {
    let dir = std::env::temp_dir().join("mxseg_trained_inv_srf");
    let _ = std::fs::remove_dir_all(&dir);
    let samples = dataset(303, 64, 64);
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = split_ids(&ids, (8.0, 1.0, 2.0), 303).unwrap();
    let pick = |idset: &[String]| -> Vec<SegSample<f32>> {
        idset.iter().map(|id| samples.iter().find(|s| &s.id == id).unwrap().clone()).collect()
    };
    let (train_set, val_set, test_set) = (pick(&split.train), pick(&split.val), pick(&split.test));

    let cfg = ModelConfig::desk_default();
    let tape = Tape::<f32>::new();
    let model = Model::init(&tape, &cfg, 303).unwrap();
    let tcfg = TrainConfig { epochs: 14, seed: 303, ..Default::default() };
    train(&model, &train_set, &val_set, &tcfg, &dir).unwrap();

    let tape2 = Tape::<f32>::new();
    let best = Model::load(&tape2, &cfg, &dir.join(BEST_CHECKPOINT)).unwrap();
    let mark = tape2.len();

    let mut inside = 0.0f64;
    let mut inside_n = 0.0f64;
    let mut outside = 0.0f64;
    let mut outside_n = 0.0f64;
    for s in &test_set {
        let (_, aux) = best.forward(&s.image, None).unwrap();
        // deepest reweighted level, at the decoder's working resolution
        let f4 = aux.refined.last().unwrap().clone();
        let (c, h, w) = (f4.shape()[0], f4.shape()[1], f4.shape()[2]);
        let mask_small = resize_bilinear(&s.mask, (h, w));
        for y in 0..h {
            for x in 0..w {
                let mut energy = 0.0f64;
                for ch in 0..c {
                    energy += f4.data()[(ch * h + y) * w + x].abs() as f64;
                }
                energy /= c as f64;
                if mask_small.data()[y * w + x] >= 0.25 {
                    inside += energy;
                    inside_n += 1.0;
                } else {
                    outside += energy;
                    outside_n += 1.0;
                }
            }
        }
        tape2.truncate(mark);
    }
    let mean_in = inside / inside_n.max(1.0);
    let mean_out = outside / outside_n.max(1.0);
    assert!(
        mean_in >= mean_out,
        "refined deep-level energy inside cracks ({mean_in:.4}) should not fall below the \
         background level ({mean_out:.4})"
    );
    println!(
        "[PASS] decoder refinement evidence: mean refined deep-level energy {mean_in:.4} on \
         crack pixels vs {mean_out:.4} off them ({} test images)",
        test_set.len()
    );
}

/// Every config in the ablation matrix must train end to end.
#[test]
fn ablation_matrix_configs_all_train() {
    let samples = dataset(404, 9, 32);
    let (train_set, val_set) = (&samples[..7], &samples[7..]);
    for (name, mut cfg) in ablation_matrix() {
        cfg.input_size = (32, 32);
        let dir = std::env::temp_dir().join(format!("mxseg_trained_inv_abl_{name}"));
        let _ = std::fs::remove_dir_all(&dir);
        let tape = Tape::<f32>::new();
        let model = Model::init(&tape, &cfg, 404).unwrap_or_else(|e| panic!("{name}: {e}"));
        let tcfg = TrainConfig { epochs: 1, seed: 404, ..Default::default() };
        let outcome = train(&model, train_set, val_set, &tcfg, &dir)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(outcome.logs.len(), 1, "{name} must complete its epoch");
        assert!(outcome.logs[0].loss.is_finite(), "{name} produced a non-finite loss");
        assert!(dir.join(BEST_CHECKPOINT).exists(), "{name} must write a checkpoint");
    }
    println!("[PASS] ablation harness: all {} configs trained", ablation_matrix().len());
}

/// Degenerate global ratios: gamma 0 and 1 must train, not just construct,
/// and produce outputs that differ from the balanced split.
#[test]
fn degenerate_gamma_variants_train_and_differ() {
    let samples = dataset(505, 6, 32);
    let run = |gamma: f64| -> Tensor<f32> {
        let mut cfg = ModelConfig::desk_default();
        cfg.input_size = (32, 32);
        cfg.transmixer.gamma = gamma;
        let dir = std::env::temp_dir().join(format!("mxseg_trained_inv_gamma_{gamma}"));
        let _ = std::fs::remove_dir_all(&dir);
        let tape = Tape::<f32>::new();
        let model = Model::init(&tape, &cfg, 505).unwrap();
        let tcfg = TrainConfig { epochs: 1, seed: 505, ..Default::default() };
        train(&model, &samples[..5], &samples[5..], &tcfg, &dir).unwrap();
        mixercseg::train::predict(&model, &samples[5].image).unwrap()
    };
    let p0 = run(0.0);
    let p5 = run(0.5);
    let p1 = run(1.0);
    let d05 = p0.zip(&p5, |a, b| (a - b).abs()).max_abs();
    let d15 = p1.zip(&p5, |a, b| (a - b).abs()).max_abs();
    assert!(d05 > 1e-7, "all-local routing should differ from the balanced split");
    assert!(d15 > 1e-7, "all-global routing should differ from the balanced split");
    println!("[PASS] degenerate gamma variants trained; max prediction deltas {d05:.2e}, {d15:.2e}");
}
