//! Gradient tape.
//!
//! Every op appends a node holding its output value and what the backward
//! rule needs. [`Graph::backward`] walks the nodes in strict reverse
//! insertion order, so identical op sequences give bit-identical gradients.

use crate::kernels::{self, Conv2dGeom, MatRef};
use crate::{AdError, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    Sum,
    Mean,
    /// Gradient flows to the first maximal element (lowest index wins ties).
    Max,
    LogSumExp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    Reduce {
        x: Var,
        kind: Reduction,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: Conv2dGeom,
    },
    AdaptiveAvgPool {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Select {
        x: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only computation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> AdError {
    AdError::Shape {
        op,
        msg: format!("incompatible shapes {a:?} and {b:?}"),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source index in `x` for every output element of `permute(x, axes)`.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = counter
            .iter()
            .zip(axes)
            .map(|(&c, &a)| c * in_strides[a])
            .sum();
        idx.push(src);
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn make(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("internal shape bookkeeping")
    }

    // ---- linear algebra ------------------------------------------------

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.data(a), m, k),
            MatRef::new(self.data(b), k, n),
            &mut out,
            0.0,
        );
        Ok(self.derived(Self::make(vec![m, n], out), Op::Matmul(a, b), &[a, b]))
    }

    /// Batched matmul `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        for i in 0..bt {
            kernels::gemm(
                MatRef::new(&self.data(a)[i * m * k..(i + 1) * m * k], m, k),
                MatRef::new(&self.data(b)[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(self.derived(Self::make(vec![bt, m, n], out), Op::Bmm(a, b), &[a, b]))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(Self::make(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `[n]` vector to every trailing-axis row of `x: [..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(shape_err("add_bias", &sx, &sb));
        }
        let n = sb[0];
        let b = self.data(bias).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        Ok(self.derived(Self::make(sx, data), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.derived(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.derived(v, Op::AddScalar(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        self.derived(v, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.derived(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&a| a.is_nan() || a < 0.0) {
            return Err(AdError::Numeric("log of a negative or NaN value".into()));
        }
        let v = self.value(x).map(f64::ln);
        Ok(self.derived(v, Op::Log(x), &[x]))
    }

    // ---- normalisation -------------------------------------------------

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| AdError::Domain("softmax of a scalar".into()))?;
        if n == 0 {
            return Err(AdError::Domain("softmax over an empty axis".into()));
        }
        if self.data(x).iter().any(|a| a.is_nan()) {
            return Err(AdError::Numeric("NaN input to softmax_rows".into()));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.derived(Self::make(shape, out), Op::SoftmaxRows(x), &[x]))
    }

    /// Divides each trailing-axis vector by `max(‖v‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| AdError::Domain("l2_normalize of a scalar".into()))?;
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        if d > 0 {
            for row in out.chunks_mut(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
                row.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
        }
        Ok(self.derived(
            Self::make(shape, out),
            Op::L2Normalize { x, norms, eps },
            &[x],
        ))
    }

    // ---- reductions ----------------------------------------------------

    /// Reduces `axis` away.
    pub fn reduce(&mut self, x: Var, kind: Reduction, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AdError::Domain(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        if shape[axis] == 0 {
            return Err(AdError::Domain(format!(
                "reduction over empty axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduction::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| src[(o * len + j) * inner + i];
                let r = o * inner + i;
                out[r] = match kind {
                    Reduction::Sum => (0..len).map(at).sum(),
                    Reduction::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    Reduction::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax[r] = best;
                        at(best)
                    }
                    Reduction::LogSumExp => {
                        let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                        if m == f64::NEG_INFINITY {
                            m
                        } else {
                            m + (0..len).map(|j| (at(j) - m).exp()).sum::<f64>().ln()
                        }
                    }
                };
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let op = Op::Reduce {
            x,
            kind,
            outer,
            len,
            inner,
            argmax,
        };
        Ok(self.derived(Self::make(out_shape, out), op, &[x]))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(flat, Reduction::Sum, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(flat, Reduction::Mean, 0)
    }

    // ---- convolution and pooling ---------------------------------------

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]` plus `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sb != [sw[0]] || stride == 0 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geom = Conv2dGeom {
            batch: sx[0],
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let o = sw[0];
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let cols = kernels::im2col(self.data(x), &geom);
        let mut out_mat = vec![0.0; o * p];
        kernels::gemm(
            MatRef::new(self.data(w), o, k),
            MatRef::new(&cols, k, p),
            &mut out_mat,
            0.0,
        );
        let bias = self.data(b);
        let plane = ho * wo;
        let mut out = vec![0.0; geom.batch * o * plane];
        for oc in 0..o {
            let src = &out_mat[oc * p..(oc + 1) * p];
            for bi in 0..geom.batch {
                let dst = &mut out[(bi * o + oc) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(&src[bi * plane..(bi + 1) * plane]) {
                    *d = s + bias[oc];
                }
            }
        }
        let value = Self::make(vec![geom.batch, o, ho, wo], out);
        Ok(self.derived(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &[x, w, b],
        ))
    }

    fn check_pool_input(&self, x: Var, k: usize) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(AdError::Shape {
                op: "pool",
                msg: format!("cannot pool {s:?} with window {k}"),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Square-window max pooling over `[B, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [b, c, h, w] = self.check_pool_input(x, k)?;
        let (out, argmax) = kernels::max_pool(self.data(x), b * c, h, w, k, stride);
        let shape = vec![b, c, (h - k) / stride + 1, (w - k) / stride + 1];
        Ok(self.derived(Self::make(shape, out), Op::MaxPool { x, argmax }, &[x]))
    }

    /// Square-window average pooling over `[B, C, H, W]`, no padding.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [b, c, h, w] = self.check_pool_input(x, k)?;
        let geom = Conv2dGeom {
            batch: b,
            channels: c,
            height: h,
            width: w,
            kh: k,
            kw: k,
            stride,
            pad: 0,
        };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let src = self.data(x);
        let norm = (k * k) as f64;
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            s += src[p * h * w + (oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = s / norm;
                }
            }
        }
        Ok(self.derived(
            Self::make(vec![b, c, ho, wo], out),
            Op::AvgPool { x, geom },
            &[x],
        ))
    }

    /// Average pooling to a fixed `out_h × out_w` grid.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || out_h > s[2] || out_w > s[3] {
            return Err(AdError::Shape {
                op: "adaptive_avg_pool2d",
                msg: format!("cannot pool {s:?} to {out_h}x{out_w}"),
            });
        }
        let (h, w) = (s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![0.0; s[0] * s[1] * out_h * out_w];
        for p in 0..s[0] * s[1] {
            for oy in 0..out_h {
                let (y0, y1) = kernels::adaptive_window(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = kernels::adaptive_window(ox, w, out_w);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += src[p * h * w + yy * w + xx];
                        }
                    }
                    out[(p * out_h + oy) * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let value = Self::make(vec![s[0], s[1], out_h, out_w], out);
        Ok(self.derived(value, Op::AdaptiveAvgPool { x, out_h, out_w }, &[x]))
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.derived(v, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(AdError::Domain(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let idx = permute_index(&shape, axes);
        let src = self.data(x);
        let data = idx.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.derived(
            Self::make(out_shape, data),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(AdError::Domain(format!(
                "transpose needs rank 2, got {:?}",
                self.shape(x)
            )));
        }
        self.permute(x, &[1, 0])
    }

    /// Picks `x[i, idx[i]]` from `x: [m, n]`, giving `[m]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(AdError::Shape {
                op: "gather",
                msg: format!("{} indices for shape {s:?}", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= s[1]) {
            return Err(AdError::Domain(format!(
                "gather index {bad} out of range for {s:?}"
            )));
        }
        let src = self.data(x);
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * s[1] + j])
            .collect();
        Ok(self.derived(
            Self::make(vec![s[0]], data),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Rows `idx` of `x` along axis 0 (repeats allowed).
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(AdError::Domain("select on a scalar".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= s[0]) {
            return Err(AdError::Domain(format!(
                "select index {bad} out of range for {s:?}"
            )));
        }
        let width: usize = s[1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &j in idx {
            data.extend_from_slice(&src[j * width..(j + 1) * width]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.derived(
            Self::make(shape, data),
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(AdError::Domain(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Self::make(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let gm = MatRef::new(g, m, n);
                self.accumulate(grads, a, |ga| {
                    kernels::gemm(gm, MatRef::new(self.data(b), k, n).t(), ga, 1.0)
                });
                self.accumulate(grads, b, |gb| {
                    kernels::gemm(MatRef::new(self.data(a), m, k).t(), gm, gb, 1.0)
                });
            }
            &Op::Bmm(a, b) => {
                let (bt, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                self.accumulate(grads, a, |ga| {
                    for i in 0..bt {
                        kernels::gemm(
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::new(&self.data(b)[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..bt {
                        kernels::gemm(
                            MatRef::new(&self.data(a)[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |ga| add_into(ga, g));
                self.accumulate(grads, b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
                });
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                self.accumulate(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                });
            }
            &Op::Div(a, b) => {
                let db = self.data(b);
                self.accumulate(grads, a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / db[i];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * y[i] / db[i];
                    }
                });
            }
            &Op::AddBias(x, bias) => {
                self.accumulate(grads, x, |gx| add_into(gx, g));
                let n = self.value(bias).numel();
                self.accumulate(grads, bias, |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                });
            }
            &Op::Scale(x, c) => self.accumulate(grads, x, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)
            }),
            &Op::AddScalar(x) => self.accumulate(grads, x, |gx| add_into(gx, g)),
            &Op::Relu(x) => {
                let xd = self.data(x);
                self.accumulate(grads, x, |gx| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            &Op::Exp(x) => self.accumulate(grads, x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i];
                }
            }),
            &Op::Log(x) => {
                let xd = self.data(x);
                self.accumulate(grads, x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] / xd[i];
                    }
                });
            }
            &Op::SoftmaxRows(x) => {
                let n = *node.value.shape().last().unwrap();
                self.accumulate(grads, x, |gx| {
                    for ((gr, yr), dst) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms, eps } => {
                let d = *node.value.shape().last().unwrap();
                if d == 0 {
                    return;
                }
                self.accumulate(grads, *x, |gx| {
                    for (r, ((gr, yr), dst)) in g
                        .chunks(d)
                        .zip(y.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let n = norms[r];
                        let raw_norm = yr.iter().map(|v| v * v).sum::<f64>().sqrt() * n;
                        if raw_norm >= *eps {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                dst[j] += (gr[j] - yr[j] * dot) / n;
                            }
                        } else {
                            for j in 0..d {
                                dst[j] += gr[j] / n;
                            }
                        }
                    }
                });
            }
            Op::Reduce {
                x,
                kind,
                outer,
                len,
                inner,
                argmax,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let xd = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            let at = |j: usize| (o * len + j) * inner + i;
                            match kind {
                                Reduction::Sum => (0..len).for_each(|j| gx[at(j)] += g[r]),
                                Reduction::Mean => {
                                    (0..len).for_each(|j| gx[at(j)] += g[r] / len as f64)
                                }
                                Reduction::Max => gx[at(argmax[r])] += g[r],
                                Reduction::LogSumExp => {
                                    if y[r] == f64::NEG_INFINITY {
                                        continue;
                                    }
                                    for j in 0..len {
                                        gx[at(j)] += g[r] * (xd[at(j)] - y[r]).exp();
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let o = self.shape(*w)[0];
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let plane = geom.out_h() * geom.out_w();
                let mut g_mat = vec![0.0; o * p];
                for bi in 0..geom.batch {
                    for oc in 0..o {
                        let src = &g[(bi * o + oc) * plane..][..plane];
                        g_mat[oc * p + bi * plane..][..plane].copy_from_slice(src);
                    }
                }
                let gm = MatRef::new(&g_mat, o, p);
                self.accumulate(grads, *w, |gw| {
                    kernels::gemm(gm, MatRef::new(cols, k, p).t(), gw, 1.0)
                });
                self.accumulate(grads, *b, |gb| {
                    for oc in 0..o {
                        gb[oc] += g_mat[oc * p..(oc + 1) * p].iter().sum::<f64>();
                    }
                });
                if self.wants(*x) {
                    let mut dcols = vec![0.0; k * p];
                    kernels::gemm(MatRef::new(self.data(*w), o, k).t(), gm, &mut dcols, 0.0);
                    let dx = kernels::col2im(&dcols, geom);
                    self.accumulate(grads, *x, |gx| add_into(gx, &dx));
                }
            }
            Op::MaxPool { x, argmax } => self.accumulate(grads, *x, |gx| {
                for (v, &i) in g.iter().zip(argmax) {
                    gx[i] += v;
                }
            }),
            Op::AvgPool { x, geom } => {
                let (h, w) = (geom.height, geom.width);
                let (ho, wo, k, s) = (geom.out_h(), geom.out_w(), geom.kh, geom.stride);
                let norm = (k * k) as f64;
                self.accumulate(grads, *x, |gx| {
                    for p in 0..geom.batch * geom.channels {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = g[(p * ho + oy) * wo + ox] / norm;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        gx[p * h * w + (oy * s + ky) * w + ox * s + kx] += v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            &Op::AdaptiveAvgPool { x, out_h, out_w } => {
                let s = self.shape(x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                self.accumulate(grads, x, |gx| {
                    for p in 0..planes {
                        for oy in 0..out_h {
                            let (y0, y1) = kernels::adaptive_window(oy, h, out_h);
                            for ox in 0..out_w {
                                let (x0, x1) = kernels::adaptive_window(ox, w, out_w);
                                let v = g[(p * out_h + oy) * out_w + ox]
                                    / ((y1 - y0) * (x1 - x0)) as f64;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        gx[p * h * w + yy * w + xx] += v;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            &Op::Reshape(x) => self.accumulate(grads, x, |gx| add_into(gx, g)),
            Op::Permute { x, axes } => {
                let idx = permute_index(self.shape(*x), axes);
                self.accumulate(grads, *x, |gx| {
                    for (v, &i) in g.iter().zip(&idx) {
                        gx[i] += v;
                    }
                });
            }
            Op::Gather { x, idx } => {
                let n = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (i, &j) in idx.iter().enumerate() {
                        gx[i * n + j] += g[i];
                    }
                });
            }
            Op::Select { x, idx } => {
                let width: usize = self.shape(*x)[1..].iter().product();
                self.accumulate(grads, *x, |gx| {
                    for (r, &j) in idx.iter().enumerate() {
                        add_into(
                            &mut gx[j * width..(j + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
