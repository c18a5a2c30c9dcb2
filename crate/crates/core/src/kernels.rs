//! Raw compute kernels on tensors: forward passes and their hand-derived
//! backward counterparts. Everything is deterministic; parallel sections only
//! split work across independent output elements so thread count never
//! changes results.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

const PAR_THRESHOLD: usize = 1 << 15;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

fn mm2d<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    let body = |i: usize, row: &mut [T]| {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    };
    if m * n * k > PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// C[m,k] = A[m,n] * B[k,n]^T  (dot of contiguous rows)
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * k];
    let body = |i: usize, row: &mut [T]| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * n * k > PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(k).enumerate() {
            body(i, row);
        }
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]  (axpy over rows of A and B)
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; k * n];
    // parallelizing over output rows p keeps accumulation order fixed per row
    let body = |p: usize, row: &mut [T]| {
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    };
    if m * n * k > PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(p, row)| body(p, row));
    } else {
        for (p, row) in out.chunks_mut(n).enumerate() {
            body(p, row);
        }
    }
    out
}

/// Batch dims of `a` and `b` must match, or one side may omit them (rank 2).
/// Supported ranks: 2x2, 3x3, 3x2, 2x3.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ash, bsh) = (a.shape(), b.shape());
    assert!(
        (2..=3).contains(&ash.len()) && (2..=3).contains(&bsh.len()),
        "shape error: matmul on {ash:?} x {bsh:?}"
    );
    let (m, ka) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    assert_eq!(ka, kb, "shape error: matmul inner dims disagree: {ash:?} x {bsh:?}");
    let ba = if ash.len() == 3 { ash[0] } else { 1 };
    let bb = if bsh.len() == 3 { bsh[0] } else { 1 };
    assert!(
        ba == bb || ba == 1 || bb == 1,
        "shape error: matmul batch dims not broadcastable: {ash:?} x {bsh:?}"
    );
    let batch = ba.max(bb);
    let mut out = Vec::with_capacity(batch * m * n);
    for i in 0..batch {
        let asl = &a.data()[(i % ba) * m * ka..(i % ba) * m * ka + m * ka];
        let bsl = &b.data()[(i % bb) * ka * n..(i % bb) * ka * n + ka * n];
        out.extend_from_slice(&mm2d(asl, bsl, m, ka, n));
    }
    if ash.len() == 2 && bsh.len() == 2 {
        Tensor::from_vec(&[m, n], out)
    } else {
        Tensor::from_vec(&[batch, m, n], out)
    }
}

/// Gradients of `matmul` for both operands, reducing over broadcast batches.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (ash, bsh) = (a.shape(), b.shape());
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = bsh[bsh.len() - 1];
    let ba = if ash.len() == 3 { ash[0] } else { 1 };
    let bb = if bsh.len() == 3 { bsh[0] } else { 1 };
    let batch = ba.max(bb);

    let mut da = vec![T::ZERO; ba * m * k];
    let mut db = vec![T::ZERO; bb * k * n];
    for i in 0..batch {
        let dsl = &dy.data()[i * m * n..(i + 1) * m * n];
        let asl = &a.data()[(i % ba) * m * k..(i % ba) * m * k + m * k];
        let bsl = &b.data()[(i % bb) * k * n..(i % bb) * k * n + k * n];
        // da += dy * b^T ; db += a^T * dy
        let da_i = mm_nt(dsl, bsl, m, n, k);
        let db_i = mm_tn(asl, dsl, m, k, n);
        let da_dst = &mut da[(i % ba) * m * k..(i % ba) * m * k + m * k];
        for (o, v) in da_dst.iter_mut().zip(da_i) {
            *o += v;
        }
        let db_dst = &mut db[(i % bb) * k * n..(i % bb) * k * n + k * n];
        for (o, v) in db_dst.iter_mut().zip(db_i) {
            *o += v;
        }
    }
    (Tensor::from_vec(ash, da), Tensor::from_vec(bsh, db))
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn unit() -> Self {
        Conv2dSpec { stride: (1, 1), pad: (0, 0), groups: 1 }
    }

    pub fn same(k: (usize, usize)) -> Self {
        Conv2dSpec { stride: (1, 1), pad: ((k.0 - 1) / 2, (k.1 - 1) / 2), groups: 1 }
    }

    pub fn out_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        assert!(
            self.stride.0 >= 1 && self.stride.1 >= 1,
            "configuration error: conv2d stride must be >= 1, got {:?}",
            self.stride
        );
        assert!(
            h + 2 * self.pad.0 >= kh && w + 2 * self.pad.1 >= kw,
            "configuration error: conv2d kernel {kh}x{kw} does not fit padded input \
             {h}x{w} with pad {:?}",
            self.pad
        );
        (
            (h + 2 * self.pad.0 - kh) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - kw) / self.stride.1 + 1,
        )
    }
}

/// Cross-correlation over `[C_in,H,W]` with kernel `[C_out,C_in/g,kh,kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Tensor<T> {
    let (xs, ws) = (x.shape(), w.shape());
    assert_eq!(xs.len(), 3, "shape error: conv2d input must be [C,H,W], got {xs:?}");
    assert_eq!(ws.len(), 4, "shape error: conv2d weight must be [Co,Ci/g,kh,kw], got {ws:?}");
    let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
    let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let g = spec.groups;
    assert!(
        g >= 1 && cin % g == 0 && cout % g == 0 && cpg == cin / g,
        "shape error: conv2d groups={g} incompatible with x {xs:?} and w {ws:?}"
    );
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[cout], "shape error: conv2d bias {:?} vs C_out {cout}", b.shape());
    }
    let (oh, ow) = spec.out_hw(h, wdt, kh, kw);
    let (sy, sx) = spec.stride;
    let (py, px) = spec.pad;

    // 1x1 stride-1 convolutions are plain channel-mixing matmuls
    if kh == 1 && kw == 1 && sy == 1 && sx == 1 && py == 0 && px == 0 && g == 1 {
        let y = mm2d(w.data(), x.data(), cout, cin, h * wdt);
        let mut y = y;
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b.data()[co];
                for v in &mut y[co * h * wdt..(co + 1) * h * wdt] {
                    *v += bv;
                }
            }
        }
        return Tensor::from_vec(&[cout, h, wdt], y);
    }

    let xd = x.data();
    let wd = w.data();
    let copg = cout / g;
    let mut out = vec![T::ZERO; cout * oh * ow];
    let body = |co: usize, plane: &mut [T]| {
        let gi = co / copg;
        let bv = bias.map(|b| b.data()[co]).unwrap_or(T::ZERO);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bv;
                for cl in 0..cpg {
                    let ci = gi * cpg + cl;
                    let wbase = ((co * cpg + cl) * kh) * kw;
                    for ky in 0..kh {
                        let iy = (oy * sy + ky) as isize - py as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * wdt;
                        let wrow = wbase + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * sx + kx) as isize - px as isize;
                            if ix < 0 || ix >= wdt as isize {
                                continue;
                            }
                            acc += xd[xrow + ix as usize] * wd[wrow + kx];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    };
    if cout * oh * ow * cpg * kh * kw > PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(co, p)| body(co, p));
    } else {
        for (co, p) in out.chunks_mut(oh * ow).enumerate() {
            body(co, p);
        }
    }
    Tensor::from_vec(&[cout, oh, ow], out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    spec: Conv2dSpec,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
    let (cout, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let g = spec.groups;
    let copg = cout / g;
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let (sy, sx) = spec.stride;
    let (py, px) = spec.pad;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());

    let db = if has_bias {
        let mut db = vec![T::ZERO; cout];
        for co in 0..cout {
            let mut acc = T::ZERO;
            for v in &dyd[co * oh * ow..(co + 1) * oh * ow] {
                acc += *v;
            }
            db[co] = acc;
        }
        Some(Tensor::from_vec(&[cout], db))
    } else {
        None
    };

    // pointwise stride-1 convolutions reduce to two matrix products
    if kh == 1 && kw == 1 && sy == 1 && sx == 1 && py == 0 && px == 0 && g == 1 {
        let hw = h * wdt;
        let dw = mm_nt(dyd, xd, cout, hw, cin);
        let dx = mm_tn(wd, dyd, cout, cin, hw);
        return (Tensor::from_vec(xs, dx), Tensor::from_vec(ws, dw), db);
    }

    // dw[co,cl,ky,kx] = sum_{oy,ox} dy[co,oy,ox] x[ci, oy*sy+ky-py, ox*sx+kx-px]
    let mut dw = vec![T::ZERO; w.numel()];
    let dw_body = |co: usize, block: &mut [T]| {
        let gi = co / copg;
        for cl in 0..cpg {
            let ci = gi * cpg + cl;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = T::ZERO;
                    for oy in 0..oh {
                        let iy = (oy * sy + ky) as isize - py as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * wdt;
                        let drow = (co * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * sx + kx) as isize - px as isize;
                            if ix < 0 || ix >= wdt as isize {
                                continue;
                            }
                            acc += dyd[drow + ox] * xd[xrow + ix as usize];
                        }
                    }
                    block[(cl * kh + ky) * kw + kx] = acc;
                }
            }
        }
    };
    if cout * cpg * kh * kw * oh * ow > PAR_THRESHOLD {
        dw.par_chunks_mut(cpg * kh * kw).enumerate().for_each(|(co, b)| dw_body(co, b));
    } else {
        for (co, b) in dw.chunks_mut(cpg * kh * kw).enumerate() {
            dw_body(co, b);
        }
    }

    // dx[ci,iy,ix]: gather over the outputs each input position fed
    let mut dx = vec![T::ZERO; x.numel()];
    let dx_body = |ci: usize, plane: &mut [T]| {
        let gi = ci / cpg;
        let cl = ci % cpg;
        for co in gi * copg..(gi + 1) * copg {
            let wbase = (co * cpg + cl) * kh * kw;
            for oy in 0..oh {
                for ky in 0..kh {
                    let iy = (oy * sy + ky) as isize - py as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = (co * oh + oy) * ow;
                    let prow = iy as usize * wdt;
                    for ox in 0..ow {
                        for kx in 0..kw {
                            let ix = (ox * sx + kx) as isize - px as isize;
                            if ix < 0 || ix >= wdt as isize {
                                continue;
                            }
                            plane[prow + ix as usize] += dyd[drow + ox] * wd[wbase + ky * kw + kx];
                        }
                    }
                }
            }
        }
    };
    if cin * copg * kh * kw * oh * ow > PAR_THRESHOLD {
        dx.par_chunks_mut(h * wdt).enumerate().for_each(|(ci, p)| dx_body(ci, p));
    } else {
        for (ci, p) in dx.chunks_mut(h * wdt).enumerate() {
            dx_body(ci, p);
        }
    }

    (Tensor::from_vec(xs, dx), Tensor::from_vec(ws, dw), db)
}

// ---------------------------------------------------------------------------
// causal depth-wise conv1d over [L,d]
// ---------------------------------------------------------------------------

pub fn causal_dwconv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    assert_eq!(w.shape()[0], d, "shape error: conv1d weight {:?} vs width {d}", w.shape());
    assert_eq!(b.shape(), &[d], "shape error: conv1d bias {:?} vs width {d}", b.shape());
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::ZERO; l * d];
    for t in 0..l {
        for c in 0..d {
            let mut acc = bd[c];
            for j in 0..k {
                let s = t as isize - (k - 1) as isize + j as isize;
                if s >= 0 {
                    acc += wd[c * k + j] * xd[s as usize * d + c];
                }
            }
            out[t * d + c] = acc;
        }
    }
    Tensor::from_vec(&[l, d], out)
}

pub fn causal_dwconv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::ZERO; l * d];
    let mut dw = vec![T::ZERO; d * k];
    let mut db = vec![T::ZERO; d];
    for t in 0..l {
        for c in 0..d {
            let g = dyd[t * d + c];
            db[c] += g;
            for j in 0..k {
                let s = t as isize - (k - 1) as isize + j as isize;
                if s >= 0 {
                    dw[c * k + j] += g * xd[s as usize * d + c];
                    dx[s as usize * d + c] += g * wd[c * k + j];
                }
            }
        }
    }
    (
        Tensor::from_vec(&[l, d], dx),
        Tensor::from_vec(&[d, k], dw),
        Tensor::from_vec(&[d], db),
    )
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Max pooling; returns the pooled map and the flat argmax index per output.
/// Ties resolve to the first position in row-major scan order.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(
        h + 2 * pad.0 >= k.0 && w + 2 * pad.1 >= k.1,
        "configuration error: maxpool kernel {k:?} does not fit {h}x{w} with pad {pad:?}"
    );
    let oh = (h + 2 * pad.0 - k.0) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - k.1) / stride.1 + 1;
    let xd = x.data();
    let mut out = vec![T::ZERO; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..k.0 {
                    let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k.1 {
                        let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (ci * h + iy as usize) * w + ix as usize;
                        let v = xd[idx];
                        if best.map_or(true, |(bv, _)| v > bv) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("maxpool window out of input");
                out[(ci * oh + oy) * ow + ox] = v;
                arg[(ci * oh + oy) * ow + ox] = idx as u32;
            }
        }
    }
    (Tensor::from_vec(&[c, oh, ow], out), arg)
}

pub fn maxpool2d_backward<T: Scalar>(
    x_shape: &[usize],
    arg: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = vec![T::ZERO; x_shape.iter().product()];
    for (i, &g) in dy.data().iter().enumerate() {
        dx[arg[i] as usize] += g;
    }
    Tensor::from_vec(x_shape, dx)
}

/// Window-mean pooling over in-bounds elements (padding never dilutes).
pub fn avgpool2d<T: Scalar>(
    x: &Tensor<T>,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(
        h + 2 * pad.0 >= k.0 && w + 2 * pad.1 >= k.1,
        "configuration error: avgpool kernel {k:?} does not fit {h}x{w} with pad {pad:?}"
    );
    let oh = (h + 2 * pad.0 - k.0) / stride.0 + 1;
    let ow = (w + 2 * pad.1 - k.1) / stride.1 + 1;
    let xd = x.data();
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                let mut count = 0usize;
                for ky in 0..k.0 {
                    let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k.1 {
                        let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += xd[(ci * h + iy as usize) * w + ix as usize];
                        count += 1;
                    }
                }
                out[(ci * oh + oy) * ow + ox] = acc * T::from_f64(1.0 / count.max(1) as f64);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn avgpool2d_backward<T: Scalar>(
    x_shape: &[usize],
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let dyd = dy.data();
    let mut dx = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut members = Vec::with_capacity(k.0 * k.1);
                for ky in 0..k.0 {
                    let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k.1 {
                        let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        members.push((ci * h + iy as usize) * w + ix as usize);
                    }
                }
                let g = dyd[(ci * oh + oy) * ow + ox]
                    * T::from_f64(1.0 / members.len().max(1) as f64);
                for m in members {
                    dx[m] += g;
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

/// Mean over all spatial positions per channel: `[C,H,W] -> [C,1,1]`.
pub fn adaptive_avgpool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut out = vec![T::ZERO; c];
    for ci in 0..c {
        let mut acc = T::ZERO;
        for v in &x.data()[ci * h * w..(ci + 1) * h * w] {
            acc += *v;
        }
        out[ci] = acc * inv;
    }
    Tensor::from_vec(&[c, 1, 1], out)
}

pub fn adaptive_avgpool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut dx = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        let g = dy.data()[ci] * inv;
        for v in &mut dx[ci * h * w..(ci + 1) * h * w] {
            *v = g;
        }
    }
    Tensor::from_vec(x_shape, dx)
}

// ---------------------------------------------------------------------------
// bilinear resampling (half-pixel centers, align_corners = false)
// ---------------------------------------------------------------------------

fn lerp_grid(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resampling in either direction (no low-pass filtering); the
/// graph-tracked upsample op wraps the enlarging case.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_hw: (usize, usize)) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = out_hw;
    let ys = lerp_grid(oh, h);
    let xs = lerp_grid(ow, w);
    let xd = x.data();
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        let base = ci * h * w;
        let obase = ci * oh * ow;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = xd[base + y0 * w + x0].to_f64();
                let v01 = xd[base + y0 * w + x1].to_f64();
                let v10 = xd[base + y1 * w + x0].to_f64();
                let v11 = xd[base + y1 * w + x1].to_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[obase + oy * ow + ox] = T::from_f64(top + (bot - top) * fy);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, out_hw: (usize, usize)) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = out_hw;
    assert!(
        oh >= h && ow >= w,
        "configuration error: upsample target {oh}x{ow} is smaller than input {h}x{w}"
    );
    let ys = lerp_grid(oh, h);
    let xs = lerp_grid(ow, w);
    let xd = x.data();
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        let base = ci * h * w;
        let obase = ci * oh * ow;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = xd[base + y0 * w + x0].to_f64();
                let v01 = xd[base + y0 * w + x1].to_f64();
                let v10 = xd[base + y1 * w + x0].to_f64();
                let v11 = xd[base + y1 * w + x1].to_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[obase + oy * ow + ox] = T::from_f64(top + (bot - top) * fy);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn upsample_bilinear_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let ys = lerp_grid(oh, h);
    let xs = lerp_grid(ow, w);
    let dyd = dy.data();
    let mut dx = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        let base = ci * h * w;
        let obase = ci * oh * ow;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = dyd[obase + oy * ow + ox].to_f64();
                dx[base + y0 * w + x0] += T::from_f64(g * (1.0 - fy) * (1.0 - fx));
                dx[base + y0 * w + x1] += T::from_f64(g * (1.0 - fy) * fx);
                dx[base + y1 * w + x0] += T::from_f64(g * fy * (1.0 - fx));
                dx[base + y1 * w + x1] += T::from_f64(g * fy * fx);
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

// ---------------------------------------------------------------------------
// normalization and softmax
// ---------------------------------------------------------------------------

/// Iterates the tensor assigning each flat element a (group, member) pair,
/// where members run over `axes` and groups over the complement.
fn group_layout(shape: &[usize], axes: &[usize]) -> (Vec<u32>, Vec<u32>, usize, usize) {
    let rank = shape.len();
    let mut is_norm = vec![false; rank];
    for &a in axes {
        assert!(a < rank, "shape error: norm axis {a} out of range for {shape:?}");
        is_norm[a] = true;
    }
    let st = strides(shape);
    let mut gstride = vec![0usize; rank];
    let mut mstride = vec![0usize; rank];
    let mut gsz = 1usize;
    let mut msz = 1usize;
    for i in (0..rank).rev() {
        if is_norm[i] {
            mstride[i] = msz;
            msz *= shape[i];
        } else {
            gstride[i] = gsz;
            gsz *= shape[i];
        }
    }
    let numel: usize = shape.iter().product();
    let mut group_of = vec![0u32; numel];
    let mut member_of = vec![0u32; numel];
    for flat in 0..numel {
        let mut g = 0usize;
        let mut m = 0usize;
        for i in 0..rank {
            let coord = (flat / st[i]) % shape[i];
            if is_norm[i] {
                m += coord * mstride[i];
            } else {
                g += coord * gstride[i];
            }
        }
        group_of[flat] = g as u32;
        member_of[flat] = m as u32;
    }
    (group_of, member_of, gsz, msz)
}

pub struct LayerNormSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub group_of: Vec<u32>,
    pub member_of: Vec<u32>,
    pub group_size: usize,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    axes: &[usize],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, LayerNormSaved<T>) {
    let msz_expected: usize = axes.iter().map(|&a| x.shape()[a]).product();
    assert_eq!(
        gamma.numel(),
        msz_expected,
        "shape error: layer_norm gamma {:?} vs normalized extent {msz_expected}",
        gamma.shape()
    );
    assert_eq!(beta.numel(), msz_expected, "shape error: layer_norm beta size");
    let (group_of, member_of, gsz, msz) = group_layout(x.shape(), axes);
    let xd = x.data();
    let mut mean = vec![T::ZERO; gsz];
    for (i, &v) in xd.iter().enumerate() {
        mean[group_of[i] as usize] += v;
    }
    let inv_n = T::from_f64(1.0 / msz as f64);
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut var = vec![T::ZERO; gsz];
    for (i, &v) in xd.iter().enumerate() {
        let d = v - mean[group_of[i] as usize];
        var[group_of[i] as usize] += d * d;
    }
    let epsv = T::from_f64(eps);
    let inv_std: Vec<T> =
        var.iter().map(|&v| T::ONE / (v * inv_n + epsv).sqrt()).collect();
    let gd = gamma.data();
    let bd = beta.data();
    let mut xhat = vec![T::ZERO; xd.len()];
    let mut y = vec![T::ZERO; xd.len()];
    for (i, &v) in xd.iter().enumerate() {
        let g = group_of[i] as usize;
        let m = member_of[i] as usize;
        let h = (v - mean[g]) * inv_std[g];
        xhat[i] = h;
        y[i] = h * gd[m] + bd[m];
    }
    (
        Tensor::from_vec(x.shape(), y),
        LayerNormSaved {
            xhat: Tensor::from_vec(x.shape(), xhat),
            inv_std,
            group_of,
            member_of,
            group_size: msz,
        },
    )
}

pub fn layer_norm_backward<T: Scalar>(
    saved: &LayerNormSaved<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let xhat = saved.xhat.data();
    let dyd = dy.data();
    let gd = gamma.data();
    let gsz = saved.inv_std.len();
    let msz = saved.group_size;
    let inv_n = T::from_f64(1.0 / msz as f64);

    let mut dgamma = vec![T::ZERO; gamma.numel()];
    let mut dbeta = vec![T::ZERO; gamma.numel()];
    // per-group sums of dy*gamma and dy*gamma*xhat
    let mut s1 = vec![T::ZERO; gsz];
    let mut s2 = vec![T::ZERO; gsz];
    for i in 0..dyd.len() {
        let g = saved.group_of[i] as usize;
        let m = saved.member_of[i] as usize;
        let dg = dyd[i] * gd[m];
        s1[g] += dg;
        s2[g] += dg * xhat[i];
        dgamma[m] += dyd[i] * xhat[i];
        dbeta[m] += dyd[i];
    }
    let mut dx = vec![T::ZERO; dyd.len()];
    for i in 0..dyd.len() {
        let g = saved.group_of[i] as usize;
        let m = saved.member_of[i] as usize;
        let dg = dyd[i] * gd[m];
        dx[i] = saved.inv_std[g] * (dg - inv_n * s1[g] - xhat[i] * inv_n * s2[g]);
    }
    (
        Tensor::from_vec(dy.shape(), dx),
        Tensor::from_vec(gamma.shape(), dgamma),
        Tensor::from_vec(gamma.shape(), dbeta),
    )
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (group_of, _member_of, gsz, _msz) = group_layout(x.shape(), &[axis]);
    let xd = x.data();
    let mut maxv = vec![T::from_f64(f64::NEG_INFINITY); gsz];
    for (i, &v) in xd.iter().enumerate() {
        let g = group_of[i] as usize;
        maxv[g] = maxv[g].maxs(v);
    }
    let mut sum = vec![T::ZERO; gsz];
    let mut out = vec![T::ZERO; xd.len()];
    for (i, &v) in xd.iter().enumerate() {
        let g = group_of[i] as usize;
        let e = (v - maxv[g]).exp();
        out[i] = e;
        sum[g] += e;
    }
    for (i, v) in out.iter_mut().enumerate() {
        *v /= sum[group_of[i] as usize];
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, axis: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (group_of, _m, gsz, _msz) = group_layout(y.shape(), &[axis]);
    let yd = y.data();
    let dyd = dy.data();
    let mut dot = vec![T::ZERO; gsz];
    for i in 0..yd.len() {
        dot[group_of[i] as usize] += yd[i] * dyd[i];
    }
    let mut dx = vec![T::ZERO; yd.len()];
    for i in 0..yd.len() {
        dx[i] = yd[i] * (dyd[i] - dot[group_of[i] as usize]);
    }
    Tensor::from_vec(y.shape(), dx)
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let rank = x.rank();
    assert_eq!(axes.len(), rank, "shape error: permute axes {axes:?} vs rank {rank}");
    let mut seen = vec![false; rank];
    for &a in axes {
        assert!(a < rank && !seen[a], "shape error: bad permutation {axes:?}");
        seen[a] = true;
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let ist = strides(in_shape);
    let ost = strides(&out_shape);
    let xd = x.data();
    let mut out = vec![T::ZERO; x.numel()];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for d in 0..rank {
            let coord = (flat / ost[d]) % out_shape[d];
            src += coord * ist[axes[d]];
        }
        *o = xd[src];
    }
    Tensor::from_vec(&out_shape, out)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    assert!(!parts.is_empty(), "shape error: concat of zero tensors");
    let rank = parts[0].rank();
    assert!(axis < rank, "shape error: concat axis {axis} out of range");
    let mut out_shape = parts[0].shape().to_vec();
    let mut total = 0usize;
    for p in parts {
        assert_eq!(p.rank(), rank, "shape error: concat rank mismatch");
        for d in 0..rank {
            if d != axis {
                assert_eq!(
                    p.shape()[d],
                    out_shape[d],
                    "shape error: concat shapes {:?} vs {:?} differ off-axis",
                    p.shape(),
                    parts[0].shape()
                );
            }
        }
        total += p.shape()[axis];
    }
    out_shape[axis] = total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let e = p.shape()[axis];
            let src = &p.data()[o * e * inner..(o + 1) * e * inner];
            out.extend_from_slice(src);
        }
    }
    Tensor::from_vec(&out_shape, out)
}

/// Split `dy` of a concat back into the original part shapes.
pub fn concat_backward<T: Scalar>(
    part_shapes: &[Vec<usize>],
    axis: usize,
    dy: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let out_shape = dy.shape();
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut grads: Vec<Vec<T>> =
        part_shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let dyd = dy.data();
    let mut cursor = 0usize;
    for _o in 0..outer {
        for (pi, s) in part_shapes.iter().enumerate() {
            let e = s[axis];
            grads[pi].extend_from_slice(&dyd[cursor..cursor + e * inner]);
            cursor += e * inner;
        }
    }
    part_shapes.iter().zip(grads).map(|(s, g)| Tensor::from_vec(s, g)).collect()
}

/// Column gather on the last axis of `[L,d]`.
pub fn gather_cols<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    for &i in idx {
        assert!(i < d, "shape error: column index {i} out of range for width {d}");
    }
    assert!(!idx.is_empty(), "shape error: gather_cols with empty index set");
    let xd = x.data();
    let mut out = Vec::with_capacity(l * idx.len());
    for r in 0..l {
        for &i in idx {
            out.push(xd[r * d + i]);
        }
    }
    Tensor::from_vec(&[l, idx.len()], out)
}

/// Scatter columns of two streams into a `[L,d]` output; indices must be
/// disjoint and cover `0..d`.
pub fn scatter_cols<T: Scalar>(
    l: usize,
    d: usize,
    streams: &[(&[usize], &Tensor<T>)],
) -> Tensor<T> {
    let mut covered = vec![false; d];
    let mut out = vec![T::ZERO; l * d];
    for (idx, t) in streams {
        assert_eq!(t.shape()[0], l, "shape error: scatter rows {:?} vs {l}", t.shape());
        assert_eq!(t.shape()[1], idx.len(), "shape error: scatter cols vs index count");
        for (j, &i) in idx.iter().enumerate() {
            assert!(!covered[i], "shape error: scatter column {i} written twice");
            covered[i] = true;
            for r in 0..l {
                out[r * d + i] = t.data()[r * idx.len() + j];
            }
        }
    }
    assert!(covered.iter().all(|&c| c), "shape error: scatter does not cover all columns");
    Tensor::from_vec(&[l, d], out)
}

/// Reorder rows of `[L,d]`: `y[r] = x[perm[r]]`.
pub fn permute_rows<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    assert_eq!(perm.len(), l, "shape error: row permutation length {} vs {l}", perm.len());
    let xd = x.data();
    let mut out = Vec::with_capacity(l * d);
    for &r in perm {
        out.extend_from_slice(&xd[r * d..(r + 1) * d]);
    }
    Tensor::from_vec(&[l, d], out)
}

/// Broadcast size-1 axes of `x` up to `target`.
pub fn expand<T: Scalar>(x: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    assert_eq!(
        x.rank(),
        target.len(),
        "shape error: expand {:?} to {target:?} (rank mismatch)",
        x.shape()
    );
    for (d, (&xs, &ts)) in x.shape().iter().zip(target.iter()).enumerate() {
        assert!(
            xs == ts || xs == 1,
            "shape error: expand axis {d}: {:?} to {target:?}",
            x.shape()
        );
    }
    let ist = strides(x.shape());
    let ost = strides(target);
    let xd = x.data();
    let numel: usize = target.iter().product();
    let mut out = vec![T::ZERO; numel];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for d in 0..target.len() {
            let coord = (flat / ost[d]) % target[d];
            if x.shape()[d] != 1 {
                src += coord * ist[d];
            }
        }
        *o = xd[src];
    }
    Tensor::from_vec(target, out)
}

pub fn expand_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let target = dy.shape();
    let ist = strides(x_shape);
    let ost = strides(target);
    let mut dx = vec![T::ZERO; x_shape.iter().product()];
    for (flat, &g) in dy.data().iter().enumerate() {
        let mut src = 0usize;
        for d in 0..target.len() {
            let coord = (flat / ost[d]) % target[d];
            if x_shape[d] != 1 {
                src += coord * ist[d];
            }
        }
        dx[src] += g;
    }
    Tensor::from_vec(x_shape, dx)
}

// ---------------------------------------------------------------------------
// spatial block ops: reflect pad, crop, grid paste
// ---------------------------------------------------------------------------

#[inline]
fn reflect_idx(i: isize, n: usize) -> usize {
    // edge-repeating reflection; for the 1-pixel pads used here this clamps
    if i < 0 {
        ((-i - 1) as usize).min(n - 1)
    } else if i as usize >= n {
        (2 * n - 1 - i as usize).max(0).min(n - 1)
    } else {
        i as usize
    }
}

/// Reflect-pad with per-side amounts `(top, bottom, left, right)`.
pub fn pad_reflect2d<T: Scalar>(
    x: &Tensor<T>,
    pads: (usize, usize, usize, usize),
) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (pt, pb, pl, pr) = pads;
    assert!(
        pt < h + 1 && pb < h + 1 && pl < w + 1 && pr < w + 1,
        "shape error: reflect pad {pads:?} too large for {h}x{w}"
    );
    let (oh, ow) = (h + pt + pb, w + pl + pr);
    let xd = x.data();
    let mut out = vec![T::ZERO; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            let sy = reflect_idx(oy as isize - pt as isize, h);
            for ox in 0..ow {
                let sx = reflect_idx(ox as isize - pl as isize, w);
                out[(ci * oh + oy) * ow + ox] = xd[(ci * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn pad_reflect2d_backward<T: Scalar>(
    x_shape: &[usize],
    pads: (usize, usize, usize, usize),
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (pt, _pb, pl, _pr) = pads;
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let dyd = dy.data();
    let mut dx = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        for oy in 0..oh {
            let sy = reflect_idx(oy as isize - pt as isize, h);
            for ox in 0..ow {
                let sx = reflect_idx(ox as isize - pl as isize, w);
                dx[(ci * h + sy) * w + sx] += dyd[(ci * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

pub fn crop2d<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
    let (c, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(
        y0 + h <= ih && x0 + w <= iw,
        "shape error: crop {h}x{w}@({y0},{x0}) exceeds input {ih}x{iw}"
    );
    let xd = x.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            let row = (ci * ih + y0 + y) * iw + x0;
            out.extend_from_slice(&xd[row..row + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

pub fn crop2d_backward<T: Scalar>(
    x_shape: &[usize],
    y0: usize,
    x0: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (c, ih, iw) = (x_shape[0], x_shape[1], x_shape[2]);
    let (h, w) = (dy.shape()[1], dy.shape()[2]);
    let dyd = dy.data();
    let mut dx = vec![T::ZERO; c * ih * iw];
    for ci in 0..c {
        for y in 0..h {
            let dst = (ci * ih + y0 + y) * iw + x0;
            let src = (ci * h + y) * w;
            for x in 0..w {
                dx[dst + x] += dyd[src + x];
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

/// Assemble a `gh x gw` grid of equally sized views back into one map.
/// Views are row-major in grid order.
pub fn paste_grid<T: Scalar>(views: &[&Tensor<T>], gh: usize, gw: usize) -> Tensor<T> {
    assert_eq!(views.len(), gh * gw, "shape error: paste_grid got {} views for {gh}x{gw}", views.len());
    let (c, vh, vw) = (views[0].shape()[0], views[0].shape()[1], views[0].shape()[2]);
    for v in views {
        assert_eq!(v.shape(), &[c, vh, vw], "shape error: paste_grid mixed view shapes");
    }
    let (oh, ow) = (gh * vh, gw * vw);
    let mut out = vec![T::ZERO; c * oh * ow];
    for gy in 0..gh {
        for gx in 0..gw {
            let vd = views[gy * gw + gx].data();
            for ci in 0..c {
                for y in 0..vh {
                    let dst = (ci * oh + gy * vh + y) * ow + gx * vw;
                    let src = (ci * vh + y) * vw;
                    out[dst..dst + vw].copy_from_slice(&vd[src..src + vw]);
                }
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

// ---------------------------------------------------------------------------
// selective scan
// ---------------------------------------------------------------------------

/// Forward recurrence `h_t = exp(A*dt_t) (.) h_{t-1} + (B_t dt_t) (.) x_t`,
/// `y_t[c] = sum_j C_t[j] h_t[c,j]`. Returns `(y, h_states)` with
/// `h_states = [L,d,n]` kept for the backward sweep.
pub fn scan_forward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    a: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(delta.shape(), &[l, d], "shape error: scan delta {:?} vs x {:?}", delta.shape(), x.shape());
    assert_eq!(b.shape(), &[l, n], "shape error: scan B {:?}", b.shape());
    assert_eq!(c.shape(), &[l, n], "shape error: scan C {:?}", c.shape());
    assert_eq!(a.shape(), &[d, n], "shape error: scan A {:?} vs [d={d},n={n}]", a.shape());
    let (xd, dd, bd, cd, ad) = (x.data(), delta.data(), b.data(), c.data(), a.data());
    let mut h = vec![T::ZERO; d * n];
    let mut h_states = vec![T::ZERO; l * d * n];
    let mut y = vec![T::ZERO; l * d];
    for t in 0..l {
        for ch in 0..d {
            let xt = xd[t * d + ch];
            let dt = dd[t * d + ch];
            let mut acc = T::ZERO;
            for j in 0..n {
                let abar = (ad[ch * n + j] * dt).exp();
                let bbar = bd[t * n + j] * dt;
                let hn = abar * h[ch * n + j] + bbar * xt;
                h[ch * n + j] = hn;
                h_states[(t * d + ch) * n + j] = hn;
                acc += cd[t * n + j] * hn;
            }
            y[t * d + ch] = acc;
        }
    }
    (Tensor::from_vec(&[l, d], y), Tensor::from_vec(&[l, d, n], h_states))
}

/// Reverse sweep of the scan. Gradient order matches `scan_forward` inputs.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    a: &Tensor<T>,
    h_states: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let n = b.shape()[1];
    let (xd, dd, bd, cd, ad, hd, dyd) =
        (x.data(), delta.data(), b.data(), c.data(), a.data(), h_states.data(), dy.data());
    let mut dx = vec![T::ZERO; l * d];
    let mut ddelta = vec![T::ZERO; l * d];
    let mut db = vec![T::ZERO; l * n];
    let mut dc = vec![T::ZERO; l * n];
    let mut da = vec![T::ZERO; d * n];
    let mut dh = vec![T::ZERO; d * n];
    for t in (0..l).rev() {
        for ch in 0..d {
            let xt = xd[t * d + ch];
            let dt = dd[t * d + ch];
            let g = dyd[t * d + ch];
            let mut dxt = T::ZERO;
            let mut ddt = T::ZERO;
            for j in 0..n {
                let aval = ad[ch * n + j];
                let abar = (aval * dt).exp();
                let bt = bd[t * n + j];
                let bbar = bt * dt;
                let h_t = hd[(t * d + ch) * n + j];
                let h_prev = if t > 0 { hd[((t - 1) * d + ch) * n + j] } else { T::ZERO };
                let dht = dh[ch * n + j] + g * cd[t * n + j];
                dc[t * n + j] += g * h_t;
                let dabar = dht * h_prev;
                let dbbar = dht * xt;
                dxt += dht * bbar;
                da[ch * n + j] += dabar * dt * abar;
                ddt += dabar * aval * abar + dbbar * bt;
                db[t * n + j] += dbbar * dt;
                dh[ch * n + j] = dht * abar;
            }
            dx[t * d + ch] += dxt;
            ddelta[t * d + ch] += ddt;
        }
    }
    (
        Tensor::from_vec(&[l, d], dx),
        Tensor::from_vec(&[l, d], ddelta),
        Tensor::from_vec(&[l, n], db),
        Tensor::from_vec(&[l, n], dc),
        Tensor::from_vec(&[d, n], da),
    )
}
