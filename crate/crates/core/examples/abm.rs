use mixercseg::autodiff::Tape;
use mixercseg::data::{generate, split_ids, CrackSpec, SegSample};
use mixercseg::net::{Model, ModelConfig};
use mixercseg::train::{evaluate_model, train, TrainConfig, BEST_CHECKPOINT};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(25);
    let spec = CrackSpec { seed: 77, ..Default::default() };
    let samples = generate::<f32>(&spec, 275, 64, 64);
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = split_ids(&ids, (8.0, 1.0, 2.0), 77).unwrap();
    let pick = |idset: &[String]| -> Vec<SegSample<f32>> {
        idset.iter().map(|id| samples.iter().find(|s| &s.id == id).unwrap().clone()).collect()
    };
    let (tr, va, te) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let cfg = ModelConfig::desk_default();
    let dir = std::env::temp_dir().join("mxseg_abm");
    let _ = std::fs::remove_dir_all(&dir);
    let tape = Tape::<f32>::new();
    let model = Model::init(&tape, &cfg, 7).unwrap();
    let tcfg = TrainConfig { epochs, seed: 7, ..Default::default() };
    let out = train(&model, &tr, &va, &tcfg, &dir).unwrap();
    let tape2 = Tape::<f32>::new();
    let best = Model::load(&tape2, &cfg, &dir.join(BEST_CHECKPOINT)).unwrap();
    let arts = evaluate_model(&best, &te).unwrap();
    println!(
        "mixer: test miou {:.4} f1 {:.4} (best val {:.4} @ ep {:?})",
        arts.report.miou, arts.report.f1, out.best_val_miou, out.best_epoch
    );
}
