//! Reverse-mode automatic differentiation on a growable tape.
//!
//! Parameters live as leaves at the front of the tape; each training step
//! appends the forward graph, runs one backward sweep, and truncates back to
//! the leaves. Nodes are created strictly after their parents, so a single
//! reverse walk over ids is a valid topological order and the accumulation
//! order is deterministic.

use std::cell::RefCell;

use crate::kernels as k;
use crate::kernels::Conv2dSpec;
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Relu(usize),
    Sigmoid(usize),
    Silu(usize),
    Softplus(usize),
    Affine { x: usize, mul: T },
    Matmul(usize, usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, spec: Conv2dSpec },
    CausalConv1d { x: usize, w: usize, b: usize },
    MaxPool2d { x: usize, arg: Vec<u32> },
    AvgPool2d { x: usize, k: (usize, usize), stride: (usize, usize), pad: (usize, usize) },
    AdaptiveAvgPool { x: usize },
    UpsampleBilinear { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, saved: k::LayerNormSaved<T> },
    Softmax { x: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    GatherCols { x: usize, idx: Vec<usize> },
    ScatterCols { streams: Vec<(Vec<usize>, usize)> },
    PermuteRows { x: usize, inv: Vec<usize> },
    Permute { x: usize, axes: Vec<usize> },
    Reshape { x: usize },
    Expand { x: usize },
    Crop2d { x: usize, y0: usize, x0: usize },
    PadReflect2d { x: usize, pads: (usize, usize, usize, usize) },
    PasteGrid { views: Vec<usize>, gh: usize, gw: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    Scan { x: usize, delta: usize, b: usize, c: usize, a: usize, h_states: Tensor<T> },
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every node past `n`; existing `Var`s with id < n stay valid.
    pub fn truncate(&self, n: usize) {
        self.nodes.borrow_mut().truncate(n);
    }

    /// Replace a leaf's value (parameter updates). Shape must match.
    pub fn set_value(&self, var: Var<'_, T>, value: Tensor<T>) {
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(
            nodes[var.id].value.shape(),
            value.shape(),
            "shape error: set_value {:?} vs existing {:?}",
            value.shape(),
            nodes[var.id].value.shape()
        );
        nodes[var.id].value = value;
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn val(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar loss. Fills gradients for every node that
    /// participates, leaves included.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.numel(),
            1,
            "usage error: backward requires a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(&[1]).reshaped(nodes[loss.id].value.shape()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
            match &mut grads[id] {
                Some(existing) => *existing = existing.zip(&g, |a, b| a + b),
                slot @ None => *slot = Some(g),
            }
        }

        /// Reduce a full-shape gradient down to a scalar operand if needed.
        fn fit<T: Scalar>(g: Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
            if g.shape() == target.shape() {
                g
            } else {
                debug_assert!(target.is_scalar());
                Tensor::from_vec(target.shape(), vec![g.sum()])
            }
        }

        for id in (0..=loss.id).rev() {
            let Some(gy) = grads[id].clone() else { continue };
            let value = &nodes[id].value;
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, *a, fit(gy.clone(), av));
                    acc(&mut grads, *b, fit(gy, bv));
                }
                Op::Sub(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, *a, fit(gy.clone(), av));
                    acc(&mut grads, *b, fit(gy.map(|v| -v), bv));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = bin_apply(&gy, bv, |g, y| g * y);
                    let gb = bin_apply(&gy, av, |g, y| g * y);
                    acc(&mut grads, *a, fit(ga, av));
                    acc(&mut grads, *b, fit(gb, bv));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = bin_apply(&gy, bv, |g, y| g / y);
                    // -g * a / b^2
                    let num = bin_apply(&gy, av, |g, x| g * x);
                    let gb = bin_apply(&num, bv, |v, y| -v / (y * y));
                    acc(&mut grads, *a, fit(ga, av));
                    acc(&mut grads, *b, fit(gb, bv));
                }
                Op::Neg(x) => acc(&mut grads, *x, gy.map(|v| -v)),
                Op::Exp(x) => acc(&mut grads, *x, gy.zip(value, |g, y| g * y)),
                Op::Relu(x) => {
                    let xv = &nodes[*x].value;
                    acc(&mut grads, *x, gy.zip(xv, |g, v| if v > T::ZERO { g } else { T::ZERO }));
                }
                Op::Sigmoid(x) => {
                    acc(&mut grads, *x, gy.zip(value, |g, s| g * s * (T::ONE - s)));
                }
                Op::Silu(x) => {
                    let xv = &nodes[*x].value;
                    acc(
                        &mut grads,
                        *x,
                        gy.zip(xv, |g, v| {
                            let s = sigmoid(v);
                            g * (s + v * s * (T::ONE - s))
                        }),
                    );
                }
                Op::Softplus(x) => {
                    let xv = &nodes[*x].value;
                    acc(&mut grads, *x, gy.zip(xv, |g, v| g * sigmoid(v)));
                }
                Op::Affine { x, mul } => {
                    let m = *mul;
                    acc(&mut grads, *x, gy.map(|g| g * m));
                }
                Op::Matmul(a, b) => {
                    let (da, db) = k::matmul_backward(&nodes[*a].value, &nodes[*b].value, &gy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) = k::conv2d_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        b.is_some(),
                        *spec,
                        &gy,
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let (Some(bid), Some(db)) = (b, db) {
                        acc(&mut grads, *bid, db);
                    }
                }
                Op::CausalConv1d { x, w, b } => {
                    let (dx, dw, db) =
                        k::causal_dwconv1d_backward(&nodes[*x].value, &nodes[*w].value, &gy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::MaxPool2d { x, arg } => {
                    acc(&mut grads, *x, k::maxpool2d_backward(nodes[*x].value.shape(), arg, &gy));
                }
                Op::AvgPool2d { x, k: kk, stride, pad } => {
                    acc(
                        &mut grads,
                        *x,
                        k::avgpool2d_backward(nodes[*x].value.shape(), *kk, *stride, *pad, &gy),
                    );
                }
                Op::AdaptiveAvgPool { x } => {
                    acc(&mut grads, *x, k::adaptive_avgpool_backward(nodes[*x].value.shape(), &gy));
                }
                Op::UpsampleBilinear { x } => {
                    acc(&mut grads, *x, k::upsample_bilinear_backward(nodes[*x].value.shape(), &gy));
                }
                Op::LayerNorm { x, gamma, beta, saved } => {
                    let (dx, dg, db) = k::layer_norm_backward(saved, &nodes[*gamma].value, &gy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                }
                Op::Softmax { x, axis } => {
                    acc(&mut grads, *x, k::softmax_backward(value, *axis, &gy));
                }
                Op::Concat { parts, axis } => {
                    let shapes: Vec<Vec<usize>> =
                        parts.iter().map(|&p| nodes[p].value.shape().to_vec()).collect();
                    let gs = k::concat_backward(&shapes, *axis, &gy);
                    for (&p, g) in parts.iter().zip(gs) {
                        acc(&mut grads, p, g);
                    }
                }
                Op::GatherCols { x, idx } => {
                    let xv = &nodes[*x].value;
                    let (l, d) = (xv.shape()[0], xv.shape()[1]);
                    let mut dx = vec![T::ZERO; l * d];
                    for r in 0..l {
                        for (j, &i) in idx.iter().enumerate() {
                            dx[r * d + i] += gy.data()[r * idx.len() + j];
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_vec(&[l, d], dx));
                }
                Op::ScatterCols { streams } => {
                    for (idx, src) in streams {
                        acc(&mut grads, *src, k::gather_cols(&gy, idx));
                    }
                }
                Op::PermuteRows { x, inv } => {
                    acc(&mut grads, *x, k::permute_rows(&gy, inv));
                }
                Op::Permute { x, axes } => {
                    acc(&mut grads, *x, k::permute(&gy, &k::inverse_permutation(axes)));
                }
                Op::Reshape { x } => {
                    acc(&mut grads, *x, gy.reshaped(nodes[*x].value.shape()));
                }
                Op::Expand { x } => {
                    acc(&mut grads, *x, k::expand_backward(nodes[*x].value.shape(), &gy));
                }
                Op::Crop2d { x, y0, x0 } => {
                    acc(&mut grads, *x, k::crop2d_backward(nodes[*x].value.shape(), *y0, *x0, &gy));
                }
                Op::PadReflect2d { x, pads } => {
                    acc(
                        &mut grads,
                        *x,
                        k::pad_reflect2d_backward(nodes[*x].value.shape(), *pads, &gy),
                    );
                }
                Op::PasteGrid { views, gh, gw } => {
                    let (vh, vw) = {
                        let s = nodes[views[0]].value.shape();
                        (s[1], s[2])
                    };
                    for gy_i in 0..*gh {
                        for gx_i in 0..*gw {
                            let g = k::crop2d(&gy, gy_i * vh, gx_i * vw, vh, vw);
                            acc(&mut grads, views[gy_i * gw + gx_i], g);
                        }
                    }
                }
                Op::SumAll { x } => {
                    let g = gy.item();
                    acc(&mut grads, *x, Tensor::full(nodes[*x].value.shape(), g));
                }
                Op::MeanAll { x } => {
                    let n = nodes[*x].value.numel();
                    let g = gy.item() * T::from_f64(1.0 / n as f64);
                    acc(&mut grads, *x, Tensor::full(nodes[*x].value.shape(), g));
                }
                Op::Scan { x, delta, b, c, a, h_states } => {
                    let (dx, ddelta, db, dc, da) = k::scan_backward(
                        &nodes[*x].value,
                        &nodes[*delta].value,
                        &nodes[*b].value,
                        &nodes[*c].value,
                        &nodes[*a].value,
                        h_states,
                        &gy,
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *delta, ddelta);
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *c, dc);
                    acc(&mut grads, *a, da);
                }
            }
        }
        Gradients { grads }
    }
}

/// Elementwise combine allowing one side to be scalar.
fn bin_apply<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        a.zip(b, f)
    } else if b.is_scalar() {
        let bv = b.item();
        a.map(|x| f(x, bv))
    } else if a.is_scalar() {
        let av = a.item();
        b.map(|x| f(av, x))
    } else {
        panic!(
            "shape error: elementwise op on {:?} vs {:?} (only same-shape or scalar broadcast)",
            a.shape(),
            b.shape()
        );
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(self) -> Tensor<T> {
        self.tape.val(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn add(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = bin_apply(&self.value(), &o.value(), |a, b| a + b);
        self.tape.push(v, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = bin_apply(&self.value(), &o.value(), |a, b| a - b);
        self.tape.push(v, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = bin_apply(&self.value(), &o.value(), |a, b| a * b);
        self.tape.push(v, Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = bin_apply(&self.value(), &o.value(), |a, b| a / b);
        self.tape.push(v, Op::Div(self.id, o.id))
    }

    pub fn neg(self) -> Var<'t, T> {
        let v = self.value().map(|x| -x);
        self.tape.push(v, Op::Neg(self.id))
    }

    pub fn exp(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.exp());
        self.tape.push(v, Op::Exp(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.maxs(T::ZERO));
        self.tape.push(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().map(sigmoid);
        self.tape.push(v, Op::Sigmoid(self.id))
    }

    pub fn silu(self) -> Var<'t, T> {
        let v = self.value().map(|x| x * sigmoid(x));
        self.tape.push(v, Op::Silu(self.id))
    }

    pub fn softplus(self) -> Var<'t, T> {
        let v = self.value().map(softplus);
        self.tape.push(v, Op::Softplus(self.id))
    }

    /// `x * mul + add`, with compile-time constants (not differentiated).
    pub fn affine(self, mul: T, add: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * mul + add);
        self.tape.push(v, Op::Affine { x: self.id, mul })
    }

    pub fn matmul(self, o: Var<'t, T>) -> Var<'t, T> {
        let v = k::matmul(&self.value(), &o.value());
        self.tape.push(v, Op::Matmul(self.id, o.id))
    }

    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, spec: Conv2dSpec) -> Var<'t, T> {
        let bv = b.map(|b| b.value());
        let v = k::conv2d(&self.value(), &w.value(), bv.as_ref(), spec);
        self.tape.push(v, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), spec })
    }

    pub fn causal_conv1d(self, w: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
        let v = k::causal_dwconv1d(&self.value(), &w.value(), &b.value());
        self.tape.push(v, Op::CausalConv1d { x: self.id, w: w.id, b: b.id })
    }

    pub fn maxpool2d(
        self,
        k_: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var<'t, T> {
        let (v, arg) = k::maxpool2d(&self.value(), k_, stride, pad);
        self.tape.push(v, Op::MaxPool2d { x: self.id, arg })
    }

    pub fn avgpool2d(
        self,
        k_: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var<'t, T> {
        let v = k::avgpool2d(&self.value(), k_, stride, pad);
        self.tape.push(v, Op::AvgPool2d { x: self.id, k: k_, stride, pad })
    }

    pub fn adaptive_avgpool(self) -> Var<'t, T> {
        let v = k::adaptive_avgpool(&self.value());
        self.tape.push(v, Op::AdaptiveAvgPool { x: self.id })
    }

    pub fn upsample_bilinear(self, out_hw: (usize, usize)) -> Var<'t, T> {
        let v = k::upsample_bilinear(&self.value(), out_hw);
        self.tape.push(v, Op::UpsampleBilinear { x: self.id })
    }

    pub fn layer_norm(
        self,
        axes: &[usize],
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: f64,
    ) -> Var<'t, T> {
        let (v, saved) = k::layer_norm(&self.value(), axes, &gamma.value(), &beta.value(), eps);
        self.tape.push(v, Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, saved })
    }

    pub fn softmax(self, axis: usize) -> Var<'t, T> {
        let v = k::softmax(&self.value(), axis);
        self.tape.push(v, Op::Softmax { x: self.id, axis })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let v = self.value().reshaped(shape);
        self.tape.push(v, Op::Reshape { x: self.id })
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, T> {
        let v = k::permute(&self.value(), axes);
        self.tape.push(v, Op::Permute { x: self.id, axes: axes.to_vec() })
    }

    pub fn expand(self, target: &[usize]) -> Var<'t, T> {
        let v = k::expand(&self.value(), target);
        self.tape.push(v, Op::Expand { x: self.id })
    }

    pub fn gather_cols(self, idx: &[usize]) -> Var<'t, T> {
        let v = k::gather_cols(&self.value(), idx);
        self.tape.push(v, Op::GatherCols { x: self.id, idx: idx.to_vec() })
    }

    pub fn permute_rows(self, perm: &[usize]) -> Var<'t, T> {
        let v = k::permute_rows(&self.value(), perm);
        self.tape.push(v, Op::PermuteRows { x: self.id, inv: k::inverse_permutation(perm) })
    }

    pub fn crop2d(self, y0: usize, x0: usize, h: usize, w: usize) -> Var<'t, T> {
        let v = k::crop2d(&self.value(), y0, x0, h, w);
        self.tape.push(v, Op::Crop2d { x: self.id, y0, x0 })
    }

    pub fn pad_reflect2d(self, pads: (usize, usize, usize, usize)) -> Var<'t, T> {
        let v = k::pad_reflect2d(&self.value(), pads);
        self.tape.push(v, Op::PadReflect2d { x: self.id, pads })
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::SumAll { x: self.id })
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let val = self.value();
        let v = Tensor::scalar(val.sum() * T::from_f64(1.0 / val.numel() as f64));
        self.tape.push(v, Op::MeanAll { x: self.id })
    }
}

pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
    assert!(!parts.is_empty(), "shape error: concat of zero vars");
    let tape = parts[0].tape;
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().collect();
    let v = k::concat(&refs, axis);
    tape.push(v, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis })
}

/// Write disjoint column streams into a `[l, d]` tensor.
pub fn scatter_cols<'t, T: Scalar>(
    tape: &'t Tape<T>,
    l: usize,
    d: usize,
    streams: &[(&[usize], Var<'t, T>)],
) -> Var<'t, T> {
    let values: Vec<Tensor<T>> = streams.iter().map(|(_, v)| v.value()).collect();
    let kv: Vec<(&[usize], &Tensor<T>)> =
        streams.iter().zip(values.iter()).map(|((idx, _), t)| (*idx, t)).collect();
    let v = k::scatter_cols(l, d, &kv);
    tape.push(
        v,
        Op::ScatterCols {
            streams: streams.iter().map(|(idx, var)| (idx.to_vec(), var.id)).collect(),
        },
    )
}

pub fn paste_grid<'t, T: Scalar>(views: &[Var<'t, T>], gh: usize, gw: usize) -> Var<'t, T> {
    assert!(!views.is_empty(), "shape error: paste_grid of zero views");
    let tape = views[0].tape;
    let values: Vec<Tensor<T>> = views.iter().map(|v| v.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().collect();
    let v = k::paste_grid(&refs, gh, gw);
    tape.push(v, Op::PasteGrid { views: views.iter().map(|v| v.id).collect(), gh, gw })
}

/// Fused selective-scan node. `a` must be elementwise negative so that the
/// decay factor stays inside (0, 1) for positive `delta`.
pub fn scan<'t, T: Scalar>(
    x: Var<'t, T>,
    delta: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
    a: Var<'t, T>,
) -> Var<'t, T> {
    let tape = x.tape;
    let (y, h_states) = k::scan_forward(&x.value(), &delta.value(), &b.value(), &c.value(), &a.value());
    tape.push(
        y,
        Op::Scan { x: x.id, delta: delta.id, b: b.id, c: c.id, a: a.id, h_states },
    )
}

impl<'t, T: Scalar> std::ops::Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, o: Self) -> Self::Output {
        Var::add(self, o)
    }
}

impl<'t, T: Scalar> std::ops::Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, o: Self) -> Self::Output {
        Var::sub(self, o)
    }
}

impl<'t, T: Scalar> std::ops::Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, o: Self) -> Self::Output {
        Var::mul(self, o)
    }
}

impl<'t, T: Scalar> std::ops::Div for Var<'t, T> {
    type Output = Var<'t, T>;
    fn div(self, o: Self) -> Self::Output {
        Var::div(self, o)
    }
}

/// `x @ w + bias`, the bias broadcast across rows.
pub fn linear<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let y = x.matmul(w);
    let out_shape = y.shape();
    let d = *out_shape.last().unwrap();
    let mut bshape = vec![1; out_shape.len()];
    bshape[out_shape.len() - 1] = d;
    y.add(b.reshape(&bshape).expand(&out_shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{check_param_entries, pick_entries, FdSettings};
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.range(-1.0, 1.0)).collect())
    }

    /// Scalarize an output with fixed pseudorandom weights so every output
    /// element influences the objective.
    fn weighted_loss<'t>(out: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
        let mut rng = Rng::new(seed ^ 0xabcdef);
        let shape = out.shape();
        let w = rand_tensor(&mut rng, &shape);
        let wv = out.tape.leaf(w);
        out.mul(wv).sum_all()
    }

    /// fd-checks every input of a graph builder at up to 10 sampled entries.
    fn op_grad_check(
        name: &str,
        inputs: &[Tensor<f64>],
        builder: impl Fn(&Tape<f64>, &[Var<'_, f64>]) -> usize + Copy,
    ) {
        // `builder` returns the id of its output var to dodge lifetime gymnastics
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out_id = builder(&tape, &vars);
        let out = Var { tape: &tape, id: out_id };
        let loss = weighted_loss(out, 99);
        let grads = tape.backward(loss);

        let mut rng = Rng::new(7070);
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .unwrap_or_else(|| panic!("{name}: no gradient for input {i}"))
                .clone();
            let entries = pick_entries(&mut rng, input.numel(), 10);
            let cell = std::cell::RefCell::new(inputs.to_vec());
            let idx = i;
            let mut set = |t: Tensor<f64>| cell.borrow_mut()[idx] = t;
            let mut eval = || {
                let lt = Tape::new();
                let vs: Vec<Var<'_, f64>> =
                    cell.borrow().iter().map(|t| lt.leaf(t.clone())).collect();
                let o = builder(&lt, &vs);
                let o = Var { tape: &lt, id: o };
                weighted_loss(o, 99).value().item()
            };
            let fails = check_param_entries(
                input,
                &analytic,
                &entries,
                FdSettings::default(),
                &mut set,
                &mut eval,
            );
            assert!(fails.is_empty(), "{name}: input {i} failed fd check: {fails:?}");
        }
    }

    #[test]
    fn grad_matmul_2d() {
        let mut rng = Rng::new(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        op_grad_check("matmul2d", &[a, b], |_t, v| v[0].matmul(v[1]).id());
    }

    #[test]
    fn grad_matmul_batched_broadcast() {
        let mut rng = Rng::new(2);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        op_grad_check("matmul3d", &[a, b], |_t, v| v[0].matmul(v[1]).id());
    }

    #[test]
    fn grad_conv2d_variants() {
        let mut rng = Rng::new(3);
        for &(cin, cout, g, kh, kw, s, p) in &[
            (3usize, 4usize, 1usize, 3usize, 3usize, 1usize, 1usize),
            (4, 4, 4, 3, 3, 1, 1),
            (2, 3, 1, 1, 5, 1, 2),
            (4, 2, 2, 3, 3, 2, 1),
        ] {
            let x = rand_tensor(&mut rng, &[cin, 6, 7]);
            let w = rand_tensor(&mut rng, &[cout, cin / g, kh, kw]);
            let b = rand_tensor(&mut rng, &[cout]);
            let spec = Conv2dSpec { stride: (s, s), pad: (p, p), groups: g };
            op_grad_check("conv2d", &[x, w, b], move |_t, v| {
                v[0].conv2d(v[1], Some(v[2]), spec).id()
            });
        }
    }

    #[test]
    fn grad_causal_conv1d() {
        let mut rng = Rng::new(4);
        let x = rand_tensor(&mut rng, &[6, 3]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        op_grad_check("conv1d", &[x, w, b], |_t, v| v[0].causal_conv1d(v[1], v[2]).id());
    }

    #[test]
    fn grad_elementwise_suite() {
        let mut rng = Rng::new(5);
        // keep relu inputs away from the kink and div away from zero
        let x = rand_tensor(&mut rng, &[3, 4]).map(|v| v + if v >= 0.0 { 0.2 } else { -0.2 });
        let y = rand_tensor(&mut rng, &[3, 4]).map(|v| v + if v >= 0.0 { 0.5 } else { -0.5 });
        op_grad_check("add", &[x.clone(), y.clone()], |_t, v| v[0].add(v[1]).id());
        op_grad_check("sub", &[x.clone(), y.clone()], |_t, v| v[0].sub(v[1]).id());
        op_grad_check("mul", &[x.clone(), y.clone()], |_t, v| v[0].mul(v[1]).id());
        op_grad_check("div", &[x.clone(), y.clone()], |_t, v| v[0].div(v[1]).id());
        op_grad_check("neg", &[x.clone()], |_t, v| v[0].neg().id());
        op_grad_check("exp", &[x.clone()], |_t, v| v[0].exp().id());
        op_grad_check("relu", &[x.clone()], |_t, v| v[0].relu().id());
        op_grad_check("sigmoid", &[x.clone()], |_t, v| v[0].sigmoid().id());
        op_grad_check("silu", &[x.clone()], |_t, v| v[0].silu().id());
        op_grad_check("softplus", &[x.clone()], |_t, v| v[0].softplus().id());
        op_grad_check("affine", &[x.clone()], |_t, v| v[0].affine(1.5, -0.25).id());
        // scalar broadcast forms
        let s = Tensor::scalar(0.75);
        op_grad_check("add_scalar", &[x.clone(), s.clone()], |_t, v| v[0].add(v[1]).id());
        op_grad_check("mul_scalar", &[x.clone(), s.clone()], |_t, v| v[0].mul(v[1]).id());
        op_grad_check("div_scalar", &[x, s], |_t, v| v[0].div(v[1]).id());
    }

    #[test]
    fn silu_matches_definition() {
        let mut rng = Rng::new(6);
        let x = rand_tensor(&mut rng, &[32]);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let a = xv.silu().value();
        let b = xv.mul(xv.sigmoid()).value();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_pooling() {
        let mut rng = Rng::new(7);
        let x = rand_tensor(&mut rng, &[2, 6, 6]);
        op_grad_check("maxpool", &[x.clone()], |_t, v| {
            v[0].maxpool2d((3, 3), (1, 1), (1, 1)).id()
        });
        op_grad_check("avgpool_window", &[x.clone()], |_t, v| {
            v[0].avgpool2d((3, 3), (1, 1), (1, 1)).id()
        });
        op_grad_check("avgpool", &[x], |_t, v| v[0].adaptive_avgpool().id());
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 5.0, 2.0, 3.0]);
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let y = xv.maxpool2d((2, 2), (2, 2), (0, 0));
        let grads = tape.backward(y.sum_all());
        assert_eq!(grads.get(xv).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_upsample_layernorm_softmax() {
        let mut rng = Rng::new(8);
        let x = rand_tensor(&mut rng, &[2, 3, 3]);
        op_grad_check("upsample", &[x], |_t, v| v[0].upsample_bilinear((6, 7)).id());

        let x = rand_tensor(&mut rng, &[4, 5]);
        let g = rand_tensor(&mut rng, &[5]).map(|v| v + 1.5);
        let b = rand_tensor(&mut rng, &[5]);
        op_grad_check("layer_norm_rows", &[x.clone(), g, b], |_t, v| {
            v[0].layer_norm(&[1], v[1], v[2], 1e-5).id()
        });

        let xc = rand_tensor(&mut rng, &[3, 2, 2]);
        let gc = rand_tensor(&mut rng, &[3]).map(|v| v + 1.5);
        let bc = rand_tensor(&mut rng, &[3]);
        op_grad_check("layer_norm_channels", &[xc, gc, bc], |_t, v| {
            v[0].layer_norm(&[0], v[1], v[2], 1e-5).id()
        });

        op_grad_check("softmax", &[x], |_t, v| v[0].softmax(1).id());
    }

    #[test]
    fn grad_layout_ops() {
        let mut rng = Rng::new(9);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 2]);
        op_grad_check("concat", &[a.clone(), b], |_t, v| concat(&[v[0], v[1]], 1).id());
        op_grad_check("gather", &[a.clone()], |_t, v| v[0].gather_cols(&[2, 0]).id());

        let g = rand_tensor(&mut rng, &[4, 2]);
        let l = rand_tensor(&mut rng, &[4, 3]);
        op_grad_check("scatter", &[g, l], |t, v| {
            scatter_cols(t, 4, 5, &[(&[1, 3][..], v[0]), (&[0, 2, 4][..], v[1])]).id()
        });

        op_grad_check("permute_rows", &[a.clone()], |_t, v| v[0].permute_rows(&[1, 0]).id());
        let c = rand_tensor(&mut rng, &[2, 3, 4]);
        op_grad_check("permute", &[c.clone()], |_t, v| v[0].permute(&[2, 0, 1]).id());
        op_grad_check("reshape", &[c.clone()], |_t, v| v[0].reshape(&[6, 4]).id());
        let e = rand_tensor(&mut rng, &[3, 1, 1]);
        op_grad_check("expand", &[e], |_t, v| v[0].expand(&[3, 2, 4]).id());
        let s = rand_tensor(&mut rng, &[2, 5, 6]);
        op_grad_check("crop", &[s.clone()], |_t, v| v[0].crop2d(1, 2, 3, 3).id());
        op_grad_check("pad_reflect", &[s.clone()], |_t, v| v[0].pad_reflect2d((1, 1, 1, 1)).id());
        op_grad_check("pad_reflect_br", &[s], |_t, v| v[0].pad_reflect2d((0, 2, 0, 1)).id());

        let v1 = rand_tensor(&mut rng, &[2, 2, 2]);
        let v2 = rand_tensor(&mut rng, &[2, 2, 2]);
        op_grad_check("paste_grid", &[v1, v2], |_t, v| paste_grid(&[v[0], v[1]], 1, 2).id());
    }

    #[test]
    fn grad_scan() {
        let mut rng = Rng::new(10);
        let (l, d, n) = (6, 3, 2);
        let x = rand_tensor(&mut rng, &[l, d]);
        let delta = rand_tensor(&mut rng, &[l, d]).map(|v| v.abs() + 0.1);
        let b = rand_tensor(&mut rng, &[l, n]);
        let c = rand_tensor(&mut rng, &[l, n]);
        let a = rand_tensor(&mut rng, &[d, n]).map(|v| -(v.abs() + 0.2));
        op_grad_check("scan", &[x, delta, b, c, a], |_t, v| {
            scan(v[0], v[1], v[2], v[3], v[4]).id()
        });
    }

    #[test]
    fn grad_linear_helper() {
        let mut rng = Rng::new(11);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let b = rand_tensor(&mut rng, &[5]);
        op_grad_check("linear", &[x, w, b], |_t, v| linear(v[0], v[1], v[2]).id());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut rng = Rng::new(12);
        let x = rand_tensor(&mut rng, &[3, 3]);
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let grads = tape.backward(xv.sum_all());
        assert!(grads.get(xv).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_of_sum_square_is_two_x() {
        let mut rng = Rng::new(13);
        let x = rand_tensor(&mut rng, &[3, 3]);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let grads = tape.backward(xv.mul(xv).sum_all());
        for (g, v) in grads.get(xv).unwrap().data().iter().zip(x.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "usage error")]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let _ = tape.backward(x);
    }

    #[test]
    fn truncate_keeps_leaves_valid() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let mark = tape.len();
        let y = p.mul(p).sum_all();
        let _ = tape.backward(y);
        tape.truncate(mark);
        assert_eq!(tape.len(), 1);
        tape.set_value(p, Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let y2 = p.sum_all().value().item();
        assert_eq!(y2, 7.0);
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let mut rng = Rng::new(14);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let run = || {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            linear(xv, wv, tape.leaf(Tensor::zeros(&[4]))).silu().softmax(1).value()
        };
        assert!(run().bit_eq(&run()));
    }
}
