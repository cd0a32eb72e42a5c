//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass. Values are appended in evaluation
//! order, so walking the tape backwards is a reverse topological traversal.
//! Tapes are rebuilt every step and consumed by [`Tape::backward`].

pub mod conv;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};
use conv::{col2im_add, im2col, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    AddChannelBias(Var, Var),
    UpsampleNearest(Var, usize),
    Resize {
        x: Var,
        rows: Rc<Vec<T>>,
        cols: Rc<Vec<T>>,
    },
    PixelShuffle(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    Abs(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Mean(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    PadReplicate(Var, usize),
    Reshape(Var),
    TransposeLast2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf created with
/// [`Tape::param`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.044_715;

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

/// `(outer, dim, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed.get() {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `x`, with gradient flow to `x`'s ancestors severed.
    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        va.zip_map(&vb, f)
            .map_err(|_| Error::shape(format!("{what}: {:?} vs {:?}", va.shape(), vb.shape())))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        self.check_live()?;
        Ok(self.value(x).map(f))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape(a, b, "add", |x, y| x + y)?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape(a, b, "sub", |x, y| x - y)?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary_same_shape(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        let v = self.unary(x, |a| a * s)?;
        Ok(self.record(v, Op::Scale(x, s), &[x]))
    }

    pub fn add_scalar(&self, x: Var, s: T) -> Result<Var> {
        let v = self.unary(x, |a| a + s)?;
        Ok(self.record(v, Op::AddScalar(x), &[x]))
    }

    /// Product of two 2-D values.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let v = self.value(a).matmul(&self.value(b))?;
        Ok(self.record(v, Op::Matmul(a, b), &[a, b]))
    }

    /// Cross-correlation of `x (Cin, H, W)` with `w (Cout, Cin, k, k)` and
    /// zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check_live()?;
        let (value, geom, cols) = {
            let (xv, wv) = (self.value(x), self.value(w));
            let (cin, h, wd) = xv.dims3()?;
            let (cout, wcin, k, k2) = match wv.shape()[..] {
                [a, b, c, d] => (a, b, c, d),
                _ => return Err(Error::shape(format!("conv weight must be 4-D, got {:?}", wv.shape()))),
            };
            if wcin != cin || k != k2 {
                return Err(Error::shape(format!(
                    "conv weight {:?} does not fit input {:?}",
                    wv.shape(),
                    xv.shape()
                )));
            }
            if stride == 0 || h + 2 * padding < k || wd + 2 * padding < k {
                return Err(Error::shape(format!("conv k={k} stride={stride} pad={padding} on {h}x{wd}")));
            }
            let geom = ConvGeom {
                channels: cin,
                height: h,
                width: wd,
                kernel: k,
                stride,
                padding,
            };
            let (rows, n) = (geom.col_rows(), geom.col_cols());
            let cols = (!geom.is_pointwise()).then(|| im2col(xv.data(), &geom));
            let src = cols.as_deref().unwrap_or(xv.data());
            let mut out = vec![T::zero(); cout * n];
            gemm(cout, rows, n, wv.data(), (rows, 1), src, (n, 1), &mut out, (n, 1), false);
            let value = Tensor::new([cout, geom.out_height(), geom.out_width()], out)?;
            (value, geom, cols)
        };
        Ok(self.record(value, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    /// Adds `b (C)` to every element of channel `c` of `x (C, ...)`.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let value = {
            let (xv, bv) = (self.value(x), self.value(b));
            let c = xv.shape()[0];
            if bv.shape() != [c] {
                return Err(Error::shape(format!("bias {:?} for input {:?}", bv.shape(), xv.shape())));
            }
            let inner = xv.len() / c;
            let mut out = xv.clone();
            for (ch, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                let bias = bv.data()[ch];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            out
        };
        Ok(self.record(value, Op::AddChannelBias(x, b), &[x, b]))
    }

    /// Nearest-neighbour upsampling of `(C, H, W)` by an integer factor.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var> {
        self.check_live()?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        let value = {
            let xv = self.value(x);
            let (c, h, w) = xv.dims3()?;
            let (oh, ow) = (h * factor, w * factor);
            let src = xv.data();
            Tensor::from_fn([c, oh, ow], |i| {
                let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                src[(ch * h + y / factor) * w + xx / factor]
            })
        };
        Ok(self.record(value, Op::UpsampleNearest(x, factor), &[x]))
    }

    /// Bilinear resize of `(C, H, W)` to `(C, out_h, out_w)`.
    pub fn resize(&self, x: Var, out_h: usize, out_w: usize, antialias: bool) -> Result<Var> {
        self.check_live()?;
        let (value, rows, cols) = {
            let xv = self.value(x);
            let (c, h, w) = xv.dims3()?;
            if out_h == 0 || out_w == 0 {
                return Err(Error::invalid("zero-sized resize target"));
            }
            let rows: Vec<T> = crate::tensor::resample_matrix(h, out_h, antialias)
                .into_iter()
                .map(T::lit)
                .collect();
            let cols: Vec<T> = crate::tensor::resample_matrix(w, out_w, antialias)
                .into_iter()
                .map(T::lit)
                .collect();
            let value = crate::tensor::resize::apply_separable(xv.data(), c, h, w, &rows, out_h, &cols, out_w);
            (value, rows, cols)
        };
        Ok(self.record(
            value,
            Op::Resize {
                x,
                rows: Rc::new(rows),
                cols: Rc::new(cols),
            },
            &[x],
        ))
    }

    /// Sub-pixel rearrangement `(C*r*r, H, W) -> (C, r*H, r*W)`:
    /// `out[c, y*r+i, x*r+j] = in[c*r*r + i*r + j, y, x]`.
    pub fn pixel_shuffle(&self, x: Var, r: usize) -> Result<Var> {
        self.check_live()?;
        let value = {
            let xv = self.value(x);
            let (cr, h, w) = xv.dims3()?;
            if r == 0 || cr % (r * r) != 0 {
                return Err(Error::shape(format!("pixel shuffle r={r} on {cr} channels")));
            }
            let c = cr / (r * r);
            let (oh, ow) = (h * r, w * r);
            let src = xv.data();
            Tensor::from_fn([c, oh, ow], |idx| {
                let (ch, oy, ox) = (idx / (oh * ow), (idx / ow) % oh, idx % ow);
                let sub = ch * r * r + (oy % r) * r + ox % r;
                src[(sub * h + oy / r) * w + ox / r]
            })
        };
        Ok(self.record(value, Op::PixelShuffle(x, r), &[x]))
    }

    /// Normalizes each row of `x (N, D)` and applies `gamma (D)`, `beta (D)`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_live()?;
        let (value, xhat, inv_std) = {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            let (n, d) = xv.dims2()?;
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::shape(format!(
                    "layer norm affine {:?}/{:?} for width {d}",
                    gv.shape(),
                    bv.shape()
                )));
            }
            let mut xhat = vec![T::zero(); n * d];
            let mut inv_std = vec![T::zero(); n];
            let mut out = vec![T::zero(); n * d];
            let dn = T::lit(d as f64);
            for r in 0..n {
                let row = &xv.data()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new([n, d], out)?, xhat, inv_std)
        };
        Ok(self.record(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| gelu_parts(a).0)?;
        Ok(self.record(v, Op::Gelu(x), &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.check_live()?;
        let value = {
            let xv = self.value(x);
            let d = *xv.shape().last().unwrap();
            let mut out = xv.clone();
            for row in out.data_mut().chunks_mut(d) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            out
        };
        Ok(self.record(value, Op::Softmax(x), &[x]))
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        let v = self.unary(x, T::abs)?;
        Ok(self.record(v, Op::Abs(x), &[x]))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self, x: Var) -> Result<Var> {
        self.check_live()?;
        if self.value(x).data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        let v = self.unary(x, T::ln)?;
        Ok(self.record(v, Op::Log(x), &[x]))
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| a * a)?;
        Ok(self.record(v, Op::Square(x), &[x]))
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.check_live()?;
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        let v = self.unary(x, T::sqrt)?;
        Ok(self.record(v, Op::Sqrt(x), &[x]))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&self, x: Var) -> Result<Var> {
        self.check_live()?;
        let v = Tensor::scalar(self.value(x).mean());
        Ok(self.record(v, Op::Mean(x), &[x]))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.check_live()?;
        let v = Tensor::scalar(self.value(x).sum());
        Ok(self.record(v, Op::Sum(x), &[x]))
    }

    /// Concatenation along the first axis.
    pub fn concat(&self, xs: &[Var]) -> Result<Var> {
        self.check_live()?;
        if xs.is_empty() {
            return Err(Error::invalid("concat of nothing"));
        }
        let value = {
            let first = self.value(xs[0]).shape()[1..].to_vec();
            let mut lead = 0;
            let mut data = Vec::new();
            for &v in xs {
                let t = self.value(v);
                if t.shape()[1..] != first[..] {
                    return Err(Error::shape(format!("concat {:?} with trailing {:?}", t.shape(), first)));
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![lead];
            shape.extend(first);
            Tensor::new(shape, data)?
        };
        Ok(self.record(value, Op::Concat(xs.to_vec()), xs))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_live()?;
        let value = {
            let xv = self.value(x);
            if axis >= xv.ndim() || len == 0 || start + len > xv.shape()[axis] {
                return Err(Error::shape(format!(
                    "slice axis {axis} [{start}, {}) of {:?}",
                    start + len,
                    xv.shape()
                )));
            }
            let (outer, dim, inner) = split_axis(xv.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                data.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.record(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Replicate-pads the last two axes of `(C, H, W)` by `pad` on each side.
    pub fn pad_replicate(&self, x: Var, pad: usize) -> Result<Var> {
        self.check_live()?;
        let value = {
            let xv = self.value(x);
            let (c, h, w) = xv.dims3()?;
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            let src = xv.data();
            Tensor::from_fn([c, ph, pw], |i| {
                let (ch, y, xx) = (i / (ph * pw), (i / pw) % ph, i % pw);
                let sy = y.saturating_sub(pad).min(h - 1);
                let sx = xx.saturating_sub(pad).min(w - 1);
                src[(ch * h + sy) * w + sx]
            })
        };
        Ok(self.record(value, Op::PadReplicate(x, pad), &[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(v, Op::Reshape(x), &[x]))
    }

    /// Swaps the last two axes (batched transpose).
    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.check_live()?;
        let v = transpose_last2(&self.value(x))?;
        Ok(self.record(v, Op::TransposeLast2(x), &[x]))
    }

    /// Reverse pass from a one-element `root`. Consumes the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.check_live()?;
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got {:?}",
                nodes[root.0].value.shape()
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        let mut out = HashMap::new();
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape().to_vec(), T::one()));
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                out.insert(Var(id), g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads)?;
        }
        Ok(Gradients { grads: out })
    }
}

fn transpose_last2<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let nd = t.ndim();
    if nd < 2 {
        return Err(Error::shape(format!("transpose needs >= 2 axes, got {:?}", t.shape())));
    }
    let (a, b) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    let batch = t.len() / (a * b);
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    for n in 0..batch {
        let m = &src[n * a * b..(n + 1) * a * b];
        for j in 0..b {
            for i in 0..a {
                out.push(m[i * b + j]);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, out)
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()));
    f(slot.data_mut());
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let gd = g.data();
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| add_into(d, gd));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(gd).for_each(|(d, &s)| *d -= s));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * av[i];
                }
            });
        }
        Op::Scale(x, s) => {
            accumulate(nodes, grads, *x, |d| d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *s));
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |d| add_into(d, gd));
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = av.dims2()?;
            let n = bv.shape()[1];
            accumulate(nodes, grads, *a, |d| {
                gemm(m, n, k, gd, (n, 1), bv.data(), (1, n), d, (k, 1), true);
            });
            accumulate(nodes, grads, *b, |d| {
                gemm(k, m, n, av.data(), (1, k), gd, (n, 1), d, (n, 1), true);
            });
        }
        Op::Conv2d { x, w, geom, cols } => {
            let wv = val(*w);
            let cout = wv.shape()[0];
            let (rows, n) = (geom.col_rows(), geom.col_cols());
            let xv = val(*x);
            let src = cols.as_deref().unwrap_or(xv.data());
            accumulate(nodes, grads, *w, |d| {
                gemm(cout, n, rows, gd, (n, 1), src, (1, n), d, (rows, 1), true);
            });
            if nodes[x.0].requires_grad {
                if geom.is_pointwise() {
                    accumulate(nodes, grads, *x, |d| {
                        gemm(rows, cout, n, wv.data(), (1, rows), gd, (n, 1), d, (n, 1), true);
                    });
                } else {
                    let mut dcols = vec![T::zero(); rows * n];
                    gemm(rows, cout, n, wv.data(), (1, rows), gd, (n, 1), &mut dcols, (n, 1), false);
                    accumulate(nodes, grads, *x, |d| col2im_add(&dcols, geom, d));
                }
            }
        }
        Op::AddChannelBias(x, b) => {
            accumulate(nodes, grads, *x, |d| add_into(d, gd));
            let c = val(*b).len();
            let inner = gd.len() / c;
            accumulate(nodes, grads, *b, |d| {
                for (ch, chunk) in gd.chunks(inner).enumerate() {
                    d[ch] += chunk.iter().copied().sum::<T>();
                }
            });
        }
        Op::UpsampleNearest(x, f) => {
            let (c, h, w) = val(*x).dims3()?;
            let (oh, ow) = (h * f, w * f);
            accumulate(nodes, grads, *x, |d| {
                for (i, &gv) in gd.iter().enumerate() {
                    let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                    d[(ch * h + y / f) * w + xx / f] += gv;
                }
            });
            let _ = c;
        }
        Op::Resize { x, rows, cols } => {
            let (c, h, w) = val(*x).dims3()?;
            let (oh, ow) = (g.shape()[1], g.shape()[2]);
            accumulate(nodes, grads, *x, |d| {
                let mut tmp = vec![T::zero(); c * h * ow];
                for ch in 0..c {
                    gemm(
                        h,
                        oh,
                        ow,
                        rows,
                        (1, h),
                        &gd[ch * oh * ow..(ch + 1) * oh * ow],
                        (ow, 1),
                        &mut tmp[ch * h * ow..(ch + 1) * h * ow],
                        (ow, 1),
                        false,
                    );
                }
                gemm(c * h, ow, w, &tmp, (ow, 1), cols, (w, 1), d, (w, 1), true);
            });
        }
        Op::PixelShuffle(x, r) => {
            let (_, h, w) = val(*x).dims3()?;
            let (oh, ow) = (h * r, w * r);
            accumulate(nodes, grads, *x, |d| {
                for (idx, &gv) in gd.iter().enumerate() {
                    let (ch, oy, ox) = (idx / (oh * ow), (idx / ow) % oh, idx % ow);
                    let sub = ch * r * r + (oy % r) * r + ox % r;
                    d[(sub * h + oy / r) * w + ox / r] += gv;
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = val(*gamma).data();
            let dd = gam.len();
            let n = gd.len() / dd;
            accumulate(nodes, grads, *beta, |d| {
                for r in 0..n {
                    add_into(d, &gd[r * dd..(r + 1) * dd]);
                }
            });
            accumulate(nodes, grads, *gamma, |d| {
                for r in 0..n {
                    for j in 0..dd {
                        d[j] += gd[r * dd + j] * xhat[r * dd + j];
                    }
                }
            });
            accumulate(nodes, grads, *x, |d| {
                let dn = T::lit(dd as f64);
                for r in 0..n {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..dd {
                        let gx = gd[r * dd + j] * gam[j];
                        m1 += gx;
                        m2 += gx * xhat[r * dd + j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..dd {
                        let gx = gd[r * dd + j] * gam[j];
                        d[r * dd + j] += inv_std[r] * (gx - m1 - xhat[r * dd + j] * m2);
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * gelu_parts(xv[i]).1;
                }
            });
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let dd = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *x, |d| {
                for (r, (yr, gr)) in y.chunks(dd).zip(gd.chunks(dd)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..dd {
                        d[r * dd + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::Abs(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    let s = if xv[i] > T::zero() {
                        T::one()
                    } else if xv[i] < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    d[i] += gd[i] * s;
                }
            });
        }
        Op::Log(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] / xv[i];
                }
            });
        }
        Op::Square(x) => {
            let xv = val(*x).data();
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] * T::lit(2.0) * xv[i];
                }
            });
        }
        Op::Sqrt(x) => {
            let y = node.value.data();
            accumulate(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += gd[i] / (T::lit(2.0) * y[i]);
                }
            });
        }
        Op::Mean(x) => {
            let n = T::lit(val(*x).len() as f64);
            let gv = gd[0] / n;
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += gv));
        }
        Op::Sum(x) => {
            let gv = gd[0];
            accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v += gv));
        }
        Op::Concat(xs) => {
            let mut offset = 0;
            for &v in xs {
                let n = val(v).len();
                accumulate(nodes, grads, v, |d| add_into(d, &gd[offset..offset + n]));
                offset += n;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, dim, inner) = split_axis(val(*x).shape(), *axis);
            let len = g.shape()[*axis];
            accumulate(nodes, grads, *x, |d| {
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    add_into(
                        &mut d[base..base + len * inner],
                        &gd[o * len * inner..(o + 1) * len * inner],
                    );
                }
            });
        }
        Op::PadReplicate(x, pad) => {
            let (_, h, w) = val(*x).dims3()?;
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            accumulate(nodes, grads, *x, |d| {
                for (i, &gv) in gd.iter().enumerate() {
                    let (ch, y, xx) = (i / (ph * pw), (i / pw) % ph, i % pw);
                    let sy = y.saturating_sub(*pad).min(h - 1);
                    let sx = xx.saturating_sub(*pad).min(w - 1);
                    d[(ch * h + sy) * w + sx] += gv;
                }
            });
        }
        Op::TransposeLast2(x) => {
            let gt = transpose_last2(g)?;
            accumulate(nodes, grads, *x, |d| add_into(d, gt.data()));
        }
    }
    Ok(())
}
