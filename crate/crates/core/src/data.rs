//! Synthetic crack dataset: multi-octave value-noise backgrounds, darkened
//! random-walk polylines with stochastic branching for cracks, plus short
//! crack-like distractor dashes that stay out of the mask (so context, not
//! just local texture, separates signal from noise). Deterministic per seed.
//!
//! Also the PNG/PGM plumbing and the 7:1:2 split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SegSample<T: Scalar> {
    /// `[3, H, W]` in [0, 1]
    pub image: Tensor<T>,
    /// `[1, H, W]`, strictly binary
    pub mask: Tensor<T>,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrackSpec {
    pub seed: u64,
    /// inclusive range of cracks per image
    pub n_cracks: (usize, usize),
    /// stroke width range in pixels
    pub width: (f64, f64),
    pub branch_prob: f64,
    /// heading jitter (radians std) per step
    pub curvature: f64,
    pub noise_amplitude: f64,
    /// lattice spacing of the coarsest noise octave
    pub texture_scale: f64,
    /// inclusive range of short crack-like dashes kept out of the mask
    pub distractors: (usize, usize),
}

impl Default for CrackSpec {
    fn default() -> Self {
        CrackSpec {
            seed: 0,
            n_cracks: (1, 2),
            width: (2.2, 3.6),
            branch_prob: 0.12,
            curvature: 0.22,
            noise_amplitude: 0.16,
            texture_scale: 12.0,
            distractors: (3, 6),
        }
    }
}

impl CrackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width.0 < 1.0 || self.width.1 < self.width.0 {
            return Err(Error::config(format!("width range {:?} invalid", self.width)));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(Error::config("branch_prob must be in [0,1]"));
        }
        if self.n_cracks.1 < self.n_cracks.0 {
            return Err(Error::config("n_cracks range reversed"));
        }
        Ok(())
    }
}

fn value_noise(rng: &mut Rng, h: usize, w: usize, scale: f64, octaves: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut cell = scale.max(2.0);
    let mut total_amp = 0.0;
    for _ in 0..octaves {
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.uniform()).collect();
        for y in 0..h {
            let fy = y as f64 / cell;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = x as f64 / cell;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f64;
                let v00 = lattice[y0 * gw + x0];
                let v01 = lattice[y0 * gw + x0 + 1];
                let v10 = lattice[(y0 + 1) * gw + x0];
                let v11 = lattice[(y0 + 1) * gw + x0 + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[y * w + x] += amp * (top + (bot - top) * ty);
            }
        }
        total_amp += amp;
        amp *= 0.5;
        cell = (cell / 2.0).max(2.0);
    }
    for v in &mut out {
        *v = *v / total_amp - 0.5;
    }
    out
}

struct Stroke {
    points: Vec<(f64, f64)>,
    width: f64,
    /// target core intensity per point; sections that fade toward the
    /// background stay in the mask but lose local contrast
    depths: Vec<f64>,
}

/// Random-walk polyline with optional one-level branching.
fn walk(
    rng: &mut Rng,
    h: usize,
    w: usize,
    steps: usize,
    curvature: f64,
    branch_prob: f64,
    out: &mut Vec<Vec<(f64, f64)>>,
) {
    let mut x = rng.range(2.0, w as f64 - 2.0);
    let mut y = rng.range(2.0, h as f64 - 2.0);
    let mut heading = rng.range(0.0, 2.0 * std::f64::consts::PI);
    let mut points = Vec::with_capacity(steps);
    for _ in 0..steps {
        points.push((y, x));
        heading += rng.normal() * curvature;
        x += heading.cos();
        y += heading.sin();
        if x < 1.0 || x > w as f64 - 2.0 {
            heading = std::f64::consts::PI - heading;
            x = x.clamp(1.0, w as f64 - 2.0);
        }
        if y < 1.0 || y > h as f64 - 2.0 {
            heading = -heading;
            y = y.clamp(1.0, h as f64 - 2.0);
        }
        if rng.uniform() < branch_prob && points.len() > 4 {
            let side = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            let mut bx = x;
            let mut by = y;
            let mut bh = heading + side * rng.range(0.4, 0.9);
            let mut branch = Vec::new();
            for _ in 0..steps / 3 {
                branch.push((by, bx));
                bh += rng.normal() * curvature;
                bx = (bx + bh.cos()).clamp(1.0, w as f64 - 2.0);
                by = (by + bh.sin()).clamp(1.0, h as f64 - 2.0);
            }
            out.push(branch);
        }
    }
    out.push(points);
}

fn stamp(gray: &mut [f64], mask: Option<&mut [f64]>, h: usize, w: usize, stroke: &Stroke) {
    let r = stroke.width / 2.0;
    let ri = r.ceil() as isize;
    let mut mask = mask;
    for (i, &(py, px)) in stroke.points.iter().enumerate() {
        let depth = stroke.depths[i.min(stroke.depths.len() - 1)];
        let cy = py.round() as isize;
        let cx = px.round() as isize;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (yy, xx) = (cy + dy, cx + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let dist2 = (yy as f64 - py).powi(2) + (xx as f64 - px).powi(2);
                if dist2 <= r * r {
                    let idx = yy as usize * w + xx as usize;
                    gray[idx] = gray[idx].min(depth + 0.06 * (dist2 / (r * r)));
                    if let Some(m) = mask.as_deref_mut() {
                        m[idx] = 1.0;
                    }
                }
            }
        }
    }
}

/// Fade profile along a polyline: most of the crack keeps full contrast, but
/// one window (roughly a fifth to a third of the length) ramps toward the
/// background intensity and nearly vanishes at its center. The mask keeps
/// labeling the window, so tracing it requires linking the visible ends.
fn fade_profile(rng: &mut Rng, len: usize, background: f64, core: f64) -> Vec<f64> {
    let with_window = rng.uniform() < 0.75;
    let center = rng.range(0.25, 0.75) * len as f64;
    let half_width = rng.range(0.09, 0.16) * len as f64;
    let floor = rng.range(0.18, 0.32);
    (0..len)
        .map(|t| {
            let fade = if with_window {
                let d = (t as f64 - center).abs() / half_width.max(1.0);
                if d < 1.0 {
                    floor + (1.0 - floor) * d * d
                } else {
                    1.0
                }
            } else {
                1.0
            };
            core + (background - core) * (1.0 - fade)
        })
        .collect()
}

fn box_blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut count = 0.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let yy = y as i32 + dy;
                    let xx = x as i32 + dx;
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += src[yy as usize * w + xx as usize];
                        count += 1.0;
                    }
                }
            }
            out[y * w + x] = acc / count;
        }
    }
    out
}

/// Generate `count` samples at `h x w`. Sample `i` depends only on
/// `(spec.seed, i)`, so generation parallelizes and re-runs reproduce bits.
pub fn generate<T: Scalar>(spec: &CrackSpec, count: usize, h: usize, w: usize) -> Vec<SegSample<T>> {
    (0..count).map(|i| generate_one(spec, i, h, w)).collect()
}

fn generate_one<T: Scalar>(spec: &CrackSpec, index: usize, h: usize, w: usize) -> SegSample<T> {
    let mut rng = Rng::new(spec.seed).derive(&format!("sample{index:05}"));
    let base = rng.range(0.55, 0.8);
    let noise = value_noise(&mut rng, h, w, spec.texture_scale, 3);
    let mut gray: Vec<f64> =
        noise.iter().map(|n| (base + spec.noise_amplitude * 2.0 * n).clamp(0.02, 0.98)).collect();
    let mut mask = vec![0.0f64; h * w];

    let n_cracks = spec.n_cracks.0 + rng.below(spec.n_cracks.1 - spec.n_cracks.0 + 1);
    for _ in 0..n_cracks {
        let steps = (0.45 * h.min(w) as f64) as usize + rng.below(h.min(w) / 4 + 1);
        let mut polylines = Vec::new();
        walk(&mut rng, h, w, steps, spec.curvature, spec.branch_prob, &mut polylines);
        let width = rng.range(spec.width.0, spec.width.1);
        let core = rng.range(0.08, 0.28);
        for points in polylines {
            let depths = fade_profile(&mut rng, points.len(), base, core);
            stamp(&mut gray, Some(&mut mask), h, w, &Stroke { points, width, depths });
        }
    }

    let n_distract = spec.distractors.0 + rng.below(spec.distractors.1 - spec.distractors.0 + 1);
    for _ in 0..n_distract {
        let steps = 3 + rng.below(7);
        let mut polylines = Vec::new();
        walk(&mut rng, h, w, steps, spec.curvature * 1.5, 0.0, &mut polylines);
        let width = rng.range(spec.width.0.max(1.0), spec.width.1.min(3.0).max(spec.width.0));
        let depth = rng.range(0.12, 0.3);
        for points in polylines {
            let depths = vec![depth; points.len()];
            stamp(&mut gray, None, h, w, &Stroke { points, width, depths });
        }
    }

    let blurred = box_blur(&gray, h, w);
    // slight per-channel tint so the RGB planes are not identical
    let tint = [rng.range(-0.02, 0.02), rng.range(-0.02, 0.02), rng.range(-0.02, 0.02)];
    let mut image = Vec::with_capacity(3 * h * w);
    for t in tint {
        image.extend(blurred.iter().map(|&v| T::from_f64((v + t).clamp(0.0, 1.0))));
    }
    SegSample {
        image: Tensor::from_vec(&[3, h, w], image),
        mask: Tensor::from_vec(&[1, h, w], mask.into_iter().map(T::from_f64).collect()),
        id: format!("{index:05}"),
    }
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Disjoint, covering 7:1:2 split of ids after a seeded shuffle. Largest
/// remainders round the quotas; every part receives at least one id.
pub fn split_ids(ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    if ids.len() < 3 {
        return Err(Error::config(format!("need at least 3 samples to split, got {}", ids.len())));
    }
    let total = ratios.0 + ratios.1 + ratios.2;
    if total <= 0.0 {
        return Err(Error::config("split ratios must sum to a positive value"));
    }
    let n = ids.len();
    let quotas = [
        ratios.0 / total * n as f64,
        ratios.1 / total * n as f64,
        ratios.2 / total * n as f64,
    ];
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rem: Vec<(f64, usize)> =
        quotas.iter().enumerate().map(|(i, q)| (q - q.floor(), i)).collect();
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut assigned: usize = counts.iter().sum();
    for (_, i) in rem {
        if assigned == n {
            break;
        }
        counts[i] += 1;
        assigned += 1;
    }
    // promote one id into any empty part from the largest part
    for i in 0..3 {
        while counts[i] == 0 {
            let largest = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[largest] -= 1;
            counts[i] += 1;
        }
    }

    let mut shuffled: Vec<String> = ids.to_vec();
    Rng::new(seed).derive("split").shuffle(&mut shuffled);
    let train = shuffled[..counts[0]].to_vec();
    let val = shuffled[counts[0]..counts[0] + counts[1]].to_vec();
    let test = shuffled[counts[0] + counts[1]..].to_vec();
    Ok(Split { train, val, test })
}

// ---------------------------------------------------------------------------
// image I/O
// ---------------------------------------------------------------------------

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_png_rgb<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert_eq!(c, 3, "shape error: write_png_rgb wants [3,H,W], got {:?}", t.shape());
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push(to_u8(t.data()[ch * h * w + i].to_f64()));
        }
    }
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    img.save(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        what: format!("png encode: {e}"),
    })
}

pub fn write_png_gray<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = match t.shape() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => panic!("shape error: write_png_gray wants [1,H,W] or [H,W], got {other:?}"),
    };
    let buf: Vec<u8> = t.data().iter().map(|v| to_u8(v.to_f64())).collect();
    let img: image::GrayImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("sized buffer");
    img.save(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        what: format!("png encode: {e}"),
    })
}

/// Grayscale PNGs load as `[1,H,W]`, color as `[3,H,W]`; values scale to [0,1].
pub fn read_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        what: e.to_string(),
    })?;
    let scale = 1.0 / 255.0;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data: Vec<T> =
                g.pixels().map(|p| T::from_f64(p.0[0] as f64 * scale)).collect();
            Ok(Tensor::from_vec(&[1, h as usize, w as usize], data))
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let (wu, hu) = (w as usize, h as usize);
            let mut data = vec![T::ZERO; 3 * hu * wu];
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * hu * wu + i] = T::from_f64(p.0[ch] as f64 * scale);
                }
            }
            Ok(Tensor::from_vec(&[3, hu, wu], data))
        }
    }
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = match t.shape() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => panic!("shape error: write_pgm wants [1,H,W] or [H,W], got {other:?}"),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|v| to_u8(v.to_f64())));
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// dataset directory layout
// ---------------------------------------------------------------------------

pub fn write_dataset<T: Scalar>(dir: &Path, samples: &[SegSample<T>], split: &Split) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(masks.display().to_string(), e))?;
    for s in samples {
        write_png_rgb(&s.image, &images.join(format!("{}.png", s.id)))?;
        write_png_gray(&s.mask, &masks.join(format!("{}.png", s.id)))?;
    }
    let json = serde_json::to_string_pretty(split).expect("split serializes");
    std::fs::write(dir.join("split.json"), json)
        .map_err(|e| Error::io(dir.join("split.json").display().to_string(), e))
}

pub fn read_split(dir: &Path) -> Result<Split> {
    let path = dir.join("split.json");
    let json =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&json).map_err(|e| Error::config(format!("split.json: {e}")))
}

/// Load one image/mask pair by id; the mask binarizes at 0.5.
pub fn load_sample<T: Scalar>(dir: &Path, id: &str) -> Result<SegSample<T>> {
    let image = read_png::<T>(&dir.join("images").join(format!("{id}.png")))?;
    let raw_mask = read_png::<T>(&dir.join("masks").join(format!("{id}.png")))?;
    let mask = raw_mask.map(|v| if v.to_f64() >= 0.5 { T::ONE } else { T::ZERO });
    if image.shape()[0] != 3 {
        return Err(Error::Decode {
            path: dir.join("images").join(format!("{id}.png")).display().to_string(),
            what: format!("expected RGB image, got {:?}", image.shape()),
        });
    }
    Ok(SegSample { image, mask, id: id.to_string() })
}
