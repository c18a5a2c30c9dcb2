//! Command-line front end. Exit codes: 0 success, 2 configuration error,
//! 3 numeric abort, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixercseg::data;
use mixercseg::kernels;
use mixercseg::net::{Model, ModelConfig};
use mixercseg::ssm::hidden_attention;
use mixercseg::train::{self, TrainConfig};
use mixercseg::{Error, Tape, Tensor};

#[derive(Parser)]
#[command(name = "mixercseg", version, about = "Crack segmentation: train, eval, probe")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Model config JSON (desk-scale defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic crack dataset (images/, masks/, split.json)
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of samples
        #[arg(long, default_value_t = 275)]
        count: usize,
        /// Square image size in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train on a generated dataset
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Segment one image: binary mask PNG plus raw probability PGM
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Resize the input to the configured size instead of rejecting it
        #[arg(long)]
        resize: bool,
        /// Also write per-stage orientation maps (theta scaled by 255/pi)
        #[arg(long)]
        dump_theta: bool,
        /// Also write per-level feature means before/after decoder refinement
        #[arg(long)]
        dump_features: bool,
    },
    /// Extract per-channel hidden-attention heatmaps from one image
    ProbeAttn {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Stage to probe, 1-4
        #[arg(long, default_value_t = 4)]
        stage: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(2),
                Some(Error::Numeric { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load_model_config(path: &Option<PathBuf>) -> anyhow::Result<ModelConfig> {
    match path {
        None => Ok(ModelConfig::desk_default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            Ok(ModelConfig::from_json(&text)?)
        }
    }
}

fn mkdir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData { common, count, size } => gen_data(common, count, size),
        Cmd::Train { common, data, epochs, batch, lr, weight_decay } => {
            run_train(common, data, epochs, batch, lr, weight_decay)
        }
        Cmd::Eval { common, data, checkpoint } => run_eval(common, data, checkpoint),
        Cmd::Infer { common, checkpoint, image, resize, dump_theta, dump_features } => {
            run_infer(common, checkpoint, image, resize, dump_theta, dump_features)
        }
        Cmd::ProbeAttn { common, checkpoint, image, stage } => {
            probe_attn(common, checkpoint, image, stage)
        }
    }
}

fn gen_data(common: CommonArgs, count: usize, size: usize) -> anyhow::Result<()> {
    let spec = match &common.config {
        None => data::CrackSpec { seed: common.seed, ..Default::default() },
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            let mut spec: data::CrackSpec = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("crack spec: {e}")))?;
            spec.seed = common.seed;
            spec
        }
    };
    spec.validate()?;
    let samples = data::generate::<f32>(&spec, count, size, size);
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = data::split_ids(&ids, (7.0, 1.0, 2.0), common.seed)?;
    data::write_dataset(&common.out, &samples, &split)?;
    println!(
        "wrote {count} samples ({} train / {} val / {} test) to {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        common.out.display()
    );
    Ok(())
}

fn load_split_samples(
    dir: &Path,
) -> anyhow::Result<(Vec<data::SegSample<f32>>, Vec<data::SegSample<f32>>, Vec<data::SegSample<f32>>)> {
    let split = data::read_split(dir)?;
    let load = |ids: &[String]| -> anyhow::Result<Vec<data::SegSample<f32>>> {
        ids.iter().map(|id| Ok(data::load_sample::<f32>(dir, id)?)).collect()
    };
    Ok((load(&split.train)?, load(&split.val)?, load(&split.test)?))
}

fn run_train(
    common: CommonArgs,
    data_dir: PathBuf,
    epochs: usize,
    batch: usize,
    lr: f64,
    weight_decay: f64,
) -> anyhow::Result<()> {
    let cfg = load_model_config(&common.config)?;
    let (train_set, val_set, _) = load_split_samples(&data_dir)?;
    mkdir(&common.out)?;
    std::fs::write(common.out.join("config.json"), cfg.to_json())
        .map_err(|e| Error::io(common.out.join("config.json").display().to_string(), e))?;

    let tape = Tape::<f32>::new();
    let model = Model::init(&tape, &cfg, common.seed)?;
    let tcfg = TrainConfig { epochs, batch, lr, weight_decay, seed: common.seed };
    let outcome = train::train(&model, &train_set, &val_set, &tcfg, &common.out)?;
    if let Some(best) = outcome.best_epoch {
        println!(
            "trained {epochs} epochs; best val mIoU {:.4} at epoch {best}; checkpoints in {}",
            outcome.best_val_miou,
            common.out.display()
        );
    } else {
        println!("trained {epochs} epochs; checkpoints in {}", common.out.display());
    }
    Ok(())
}

fn run_eval(common: CommonArgs, data_dir: PathBuf, checkpoint: PathBuf) -> anyhow::Result<()> {
    let cfg = load_model_config(&common.config)?;
    let split = data::read_split(&data_dir)?;
    let test: Vec<data::SegSample<f32>> = split
        .test
        .iter()
        .map(|id| data::load_sample::<f32>(&data_dir, id))
        .collect::<Result<_, _>>()?;

    let tape = Tape::<f32>::new();
    let model = Model::load(&tape, &cfg, &checkpoint)?;
    let arts = train::evaluate_model(&model, &test)?;

    mkdir(&common.out)?;
    let preds_dir = common.out.join("predictions");
    mkdir(&preds_dir)?;
    for (id, p) in &arts.predictions {
        data::write_png_gray(p, &preds_dir.join(format!("{id}.png")))?;
    }
    let report_json = serde_json::to_string_pretty(&arts.report).expect("report serializes");
    std::fs::write(common.out.join("report.json"), report_json)
        .map_err(|e| Error::io(common.out.join("report.json").display().to_string(), e))?;
    println!(
        "miou {:.4}  ods {:.4}  ois {:.4}  f1 {:.4}  ({} test images)",
        arts.report.miou,
        arts.report.ods,
        arts.report.ois,
        arts.report.f1,
        arts.report.per_image.len()
    );
    Ok(())
}

/// Min-max normalize a single-channel map into [0,1] for visualization.
fn normalized_gray(t: &Tensor<f32>) -> Tensor<f32> {
    let mut lo = f32::MAX;
    let mut hi = f32::MIN;
    for &v in t.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    t.map(|v| (v - lo) / span)
}

fn channel_mean(t: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = vec![0.0f32; h * w];
    for ci in 0..c {
        for (i, v) in t.data()[ci * h * w..(ci + 1) * h * w].iter().enumerate() {
            out[i] += v / c as f32;
        }
    }
    Tensor::from_vec(&[1, h, w], out)
}

fn run_infer(
    common: CommonArgs,
    checkpoint: PathBuf,
    image_path: PathBuf,
    resize: bool,
    dump_theta: bool,
    dump_features: bool,
) -> anyhow::Result<()> {
    let cfg = load_model_config(&common.config)?;
    let mut image = data::read_png::<f32>(&image_path)?;
    if image.shape()[0] == 1 {
        // grayscale input: replicate to three channels
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let mut data3 = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data3.extend_from_slice(image.data());
        }
        image = Tensor::from_vec(&[3, h, w], data3);
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if (h, w) != cfg.input_size {
        if resize {
            image = kernels::resize_bilinear(&image, cfg.input_size);
        } else if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "image {h}x{w} is not divisible by 32; pass --resize to scale it to {:?}",
                cfg.input_size
            ))
            .into());
        }
    }

    let tape = Tape::<f32>::new();
    let model = Model::load(&tape, &cfg, &checkpoint)?;
    let (logits, aux) = model.forward(&image, None)?;
    let prob = logits.sigmoid().value();

    mkdir(&common.out)?;
    let mask = prob.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    data::write_png_gray(&mask, &common.out.join("mask.png"))?;
    data::write_pgm(&prob, &common.out.join("prob.pgm"))?;

    if dump_theta {
        for (i, theta) in aux.theta.iter().enumerate() {
            if let Some(theta) = theta {
                let scaled = theta.map(|v| v / std::f32::consts::PI);
                data::write_png_gray(&scaled, &common.out.join(format!("theta_stage{}.png", i + 1)))?;
            }
        }
    }
    if dump_features {
        for (i, f) in aux.pyramid_deg.iter().enumerate() {
            let mean = normalized_gray(&channel_mean(f));
            data::write_png_gray(&mean, &common.out.join(format!("features_pre_stage{}.png", i + 1)))?;
        }
        for (i, f) in aux.refined.iter().enumerate() {
            let mean = normalized_gray(&channel_mean(f));
            data::write_png_gray(
                &mean,
                &common.out.join(format!("features_post_stage{}.png", i + 2)),
            )?;
        }
    }
    println!("wrote mask.png and prob.pgm to {}", common.out.display());
    Ok(())
}

fn probe_attn(
    common: CommonArgs,
    checkpoint: PathBuf,
    image_path: PathBuf,
    stage: usize,
) -> anyhow::Result<()> {
    if !(1..=4).contains(&stage) {
        return Err(Error::config(format!("stage must be 1-4, got {stage}")).into());
    }
    let cfg = load_model_config(&common.config)?;
    let image = data::read_png::<f32>(&image_path)?;
    let tape = Tape::<f32>::new();
    let model = Model::load(&tape, &cfg, &checkpoint)?;
    let (_, aux) = model.forward(&image, None)?;
    if aux.traces.is_empty() {
        return Err(Error::config("this architecture records no scan traces").into());
    }

    // last block of the requested stage
    let depth = cfg.transmixer.depth;
    let idx = stage * depth - 1;
    let trace = &aux.traces[idx];
    let split = &aux.routing.splits[idx];
    let att = hidden_attention(trace);
    let means = trace.mean_delta();

    mkdir(&common.out)?;
    let l = att.len();
    for c in 0..att.channels() {
        let plane = Tensor::from_vec(
            &[1, l, l],
            att.alpha.data()[c * l * l..(c + 1) * l * l].to_vec(),
        );
        let vis = plane.map(|v: f32| v.abs());
        let peak = vis.max_abs().max(1e-12);
        data::write_png_gray(
            &vis.map(|v| v / peak),
            &common.out.join(format!("attn_stage{stage}_ch{c:02}.png")),
        )?;
    }

    #[derive(serde::Serialize)]
    struct ChannelInfo {
        channel: usize,
        mean_delta: f64,
        classified: &'static str,
    }
    let info: Vec<ChannelInfo> = (0..att.channels())
        .map(|c| ChannelInfo {
            channel: c,
            mean_delta: means[c],
            classified: if split.global.contains(&c) { "global" } else { "local" },
        })
        .collect();
    let sidecar = serde_json::to_string_pretty(&info).expect("sidecar serializes");
    std::fs::write(common.out.join(format!("attn_stage{stage}.json")), sidecar)
        .map_err(|e| Error::io(common.out.display().to_string(), e))?;
    println!(
        "wrote {} heatmaps and attn_stage{stage}.json to {}",
        att.channels(),
        common.out.display()
    );
    Ok(())
}
