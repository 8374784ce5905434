//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order. [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar loss with respect to every recorded node.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::float::{c, Float};
use crate::params::ParamStore;
use crate::roi::{self, RoiBox, SampleWeights};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Transpose(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x(Var),
    RoiAlign {
        x: Var,
        weights: Vec<SampleWeights>,
    },
    MeanLastAxis(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    FocalLoss {
        logits: Var,
        targets: Vec<T>,
        alpha: T,
        gamma: T,
    },
    IouLoss {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Geometry of a 2-D convolution over a `[C, H, W]` map.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the right length when `v` does not reach the loss.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); graph.value(v).numel()],
        }
    }
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let k = c::<T>(0.797_884_560_802_865_4);
    let a = c::<T>(0.044715);
    let half = c::<T>(0.5);
    let one = T::one();
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let val = half * x * (one + t);
    let du = k * (one + c::<T>(3.0) * a * x * x);
    let der = half * (one + t) + half * x * (one - t * t) * du;
    (val, der)
}

fn log_sigmoid<T: Float>(x: T) -> T {
    // log(1 / (1 + e^-x)) computed without overflow
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.is_finite(), "non-finite output on tape node {}", self.nodes.len());
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records the parameter `name` from `store`. Repeated requests for the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = &(String, Var)> {
        self.params.iter()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn zip_op(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(op, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x[.., n] + bias[n]`, broadcasting over leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(t, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s / c(n as f64)), Op::Mean(x))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        t
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| gelu_parts(v).0);
        self.push(t, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(T::zero()));
        self.push(t, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.exp());
        self.push(t, Op::Exp(x))
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(t, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(t, Op::LogSoftmax(x))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        let mut xhat = Vec::with_capacity(out.numel());
        let mut rstds = Vec::new();
        let nn: T = c(n as f64);
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let rstd = T::one() / (var + c(eps)).sqrt();
            rstds.push(rstd);
            for (j, v) in row.iter_mut().enumerate() {
                let h = (*v - mean) * rstd;
                xhat.push(h);
                *v = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd: rstds,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `out[i] = x.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range for {} values", src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Gather { x, index }))
    }

    /// Row `rows[i]` of the 2-D `x` for every `i`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("select_rows", format!("expected 2-D, got {s:?}")));
        }
        let n = s[1];
        let mut index = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::invalid("select_rows", format!("row {r} >= {}", s[0])));
            }
            index.extend(r * n..(r + 1) * n);
        }
        self.gather(x, index, &[rows.len(), n])
    }

    /// `x[i, cols[i]]` for every row `i`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || cols.len() != s[0] {
            return Err(Error::invalid(
                "pick",
                format!("{} indices for shape {s:?}", cols.len()),
            ));
        }
        let index = cols.iter().enumerate().map(|(i, &j)| i * s[1] + j).collect();
        self.gather(x, index, &[cols.len()])
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(xs.to_vec())))
    }

    /// `x[start..start+len]` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start + len > s[0] {
            return Err(Error::invalid(
                "slice_rows",
                format!("{start}..{} out of {}", start + len, s[0]),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceRows(x, start)))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::invalid(
                "slice_cols",
                format!("{start}..{} of shape {s:?}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&src[r * s[1] + start..r * s[1] + start + len]);
        }
        let t = Tensor::new(vec![s[0], len], data)?;
        Ok(self.push(t, Op::SliceCols(x, start)))
    }

    /// Concatenation of 2-D tensors along axis 1.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.shape(xs[0])[0];
        let mut widths = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::ConcatCols(xs.to_vec())))
    }

    fn conv_geom(&self, op: &'static str, x: Var, w: Var, stride: usize, pad: usize, transposed: bool) -> Result<ConvGeom> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let k = ws[2];
        let wc = if transposed { ws[0] } else { ws[1] };
        if wc != cin {
            return Err(Error::ShapeMismatch {
                op,
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (ho, wo) = if transposed {
            ((h - 1) * stride + k, (wd - 1) * stride + k)
        } else {
            if h + 2 * pad < k || wd + 2 * pad < k {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1)
        };
        Ok(ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Cross-correlation of `x: [Cin,H,W]` with `w: [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, w, stride, pad, false)?;
        let cout = self.shape(w)[0];
        self.check_bias("conv2d", b, cout)?;
        let cols = im2col(self.value(x).data(), &geom);
        let l = geom.ho * geom.wo;
        let ckk = geom.cin * geom.k * geom.k;
        let mut out = vec![T::zero(); cout * l];
        gemm_acc(self.value(w).data(), &cols, &mut out, cout, ckk, l);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (o, row) in out.chunks_mut(l).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[o]);
            }
        }
        let t = Tensor::new(vec![cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Transposed convolution of `x: [Cin,H,W]` with `w: [Cin,Cout,k,k]`, no padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let geom = self.conv_geom("conv_transpose2d", x, w, stride, 0, true)?;
        let cout = self.shape(w)[1];
        self.check_bias("conv_transpose2d", b, cout)?;
        let hw = geom.h * geom.w;
        let ckk = cout * geom.k * geom.k;
        let mut cols = vec![T::zero(); ckk * hw];
        gemm_tn_acc(self.value(w).data(), self.value(x).data(), &mut cols, ckk, geom.cin, hw);
        // the output plays the role of the "input image" of an im2col with the same kernel
        let out_geom = ConvGeom {
            cin: cout,
            h: geom.ho,
            w: geom.wo,
            k: geom.k,
            stride,
            pad: 0,
            ho: geom.h,
            wo: geom.w,
        };
        let mut out = vec![T::zero(); cout * geom.ho * geom.wo];
        col2im_acc(&cols, &out_geom, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            let l = geom.ho * geom.wo;
            for (o, row) in out.chunks_mut(l).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[o]);
            }
        }
        let t = Tensor::new(vec![cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }))
    }

    /// 2×2 max pooling with stride 2 over `[C,H,W]`.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::invalid("max_pool2d", format!("need even [C,H,W], got {s:?}")));
        }
        let (ch, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(ch * ho * wo);
        let mut argmax = Vec::with_capacity(ch * ho * wo);
        for cc in 0..ch {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = cc * h * w + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = cc * h * w + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![ch, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2d { x, argmax }))
    }

    /// Nearest-neighbour 2× upsampling of `[C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("upsample2x", format!("need [C,H,W], got {s:?}")));
        }
        let (ch, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(ch * 4 * h * w);
        for cc in 0..ch {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out.push(src[cc * h * w + (i / 2) * w + j / 2]);
                }
            }
        }
        let t = Tensor::new(vec![ch, 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2x(x)))
    }

    /// RoIAlign of `x: [C,H,W]` (a map at `stride` pixels per cell) over
    /// pixel-space boxes; output `[boxes, C, out*out]`.
    pub fn roi_align(&mut self, x: Var, boxes: &[RoiBox], stride: f64, out: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("roi_align", format!("need [C,H,W], got {s:?}")));
        }
        let (ch, h, w) = (s[0], s[1], s[2]);
        let weights = boxes
            .iter()
            .map(|b| roi::sample_weights(h, w, &b.scaled(1.0 / stride), out))
            .collect::<Result<Vec<_>>>()?;
        let src = self.value(x).data();
        let bins = out * out;
        let mut data = vec![T::zero(); boxes.len() * ch * bins];
        for (bi, wts) in weights.iter().enumerate() {
            for cc in 0..ch {
                let plane = &src[cc * h * w..(cc + 1) * h * w];
                for (bin, taps) in wts.bins.iter().enumerate() {
                    let mut acc = T::zero();
                    for &(idx, wt) in taps {
                        acc += plane[idx] * c(wt);
                    }
                    data[(bi * ch + cc) * bins + bin] = acc;
                }
            }
        }
        let t = Tensor::new(vec![boxes.len(), ch, bins], data)?;
        Ok(self.push(t, Op::RoiAlign { x, weights }))
    }

    /// Mean over the last axis.
    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::invalid("mean_last_axis", "scalar input"));
        }
        let k = s[s.len() - 1];
        let data = self
            .value(x)
            .data()
            .chunks(k)
            .map(|r| r.iter().copied().sum::<T>() / c(k as f64))
            .collect();
        let t = Tensor::new(s[..s.len() - 1].to_vec(), data)?;
        Ok(self.push(t, Op::MeanLastAxis(x)))
    }

    /// Scales every row of a 2-D tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("l2_normalize_rows", format!("need 2-D, got {s:?}")));
        }
        let mut t = self.value(x).clone();
        let mut norms = Vec::with_capacity(s[0]);
        for row in t.data_mut().chunks_mut(s[1]) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(c(1e-12));
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }))
    }

    /// Summed sigmoid focal loss; `targets` holds 0/1 per logit.
    pub fn focal_loss(&mut self, logits: Var, targets: Vec<T>, alpha: f64, gamma: f64) -> Result<Var> {
        let lv = self.value(logits).data();
        if lv.len() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "focal_loss",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (alpha, gamma) = (c::<T>(alpha), c::<T>(gamma));
        let mut total = T::zero();
        for (&x, &y) in lv.iter().zip(&targets) {
            total += focal_term(x, y, alpha, gamma).0;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::FocalLoss {
                logits,
                targets,
                alpha,
                gamma,
            },
        ))
    }

    /// Summed `-ln IoU` between predicted and target `(l,t,r,b)` distances,
    /// both measured from the same location. `pred` is `[n,4]`, strictly positive.
    pub fn iou_loss(&mut self, pred: Var, target: Vec<T>) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || s[1] != 4 || target.len() != s[0] * 4 {
            return Err(Error::ShapeMismatch {
                op: "iou_loss",
                lhs: s,
                rhs: vec![target.len()],
            });
        }
        let pv = self.value(pred).data();
        let mut total = T::zero();
        for (p, t) in pv.chunks(4).zip(target.chunks(4)) {
            total += -iou_ltrb(p, t).0.ln();
        }
        Ok(self.push(Tensor::scalar(total), Op::IouLoss { pred, target }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            // keep intermediate grads only where someone may ask for them
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                {
                    let ga = acc_buf(grads, *a, m * k, i);
                    gemm_nt_acc(g, bv, ga, m, n, k);
                }
                let gb = acc_buf(grads, *b, k * n, i);
                gemm_tn_acc(av, g, gb, k, m, n);
            }
            Op::Add(a, b) => {
                add_into(acc_buf(grads, *a, g.len(), i), g);
                add_into(acc_buf(grads, *b, g.len(), i), g);
            }
            Op::Sub(a, b) => {
                add_into(acc_buf(grads, *a, g.len(), i), g);
                let gb = acc_buf(grads, *b, g.len(), i);
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                {
                    let ga = acc_buf(grads, *a, g.len(), i);
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                let gb = acc_buf(grads, *b, g.len(), i);
                for k in 0..g.len() {
                    gb[k] += g[k] * av[k];
                }
            }
            Op::AddRow(x, b) => {
                add_into(acc_buf(grads, *x, g.len(), i), g);
                let n = self.value(*b).numel();
                let gb = acc_buf(grads, *b, n, i);
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
            Op::Scale(x, s) => {
                let gx = acc_buf(grads, *x, g.len(), i);
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc_buf(grads, *x, n, i).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / c(n.max(1) as f64);
                acc_buf(grads, *x, n, i).iter_mut().for_each(|d| *d += v);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = acc_buf(grads, *x, g.len(), i);
                for k in 0..g.len() {
                    gx[k] += g[k] * gelu_parts(xv[k]).1;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = acc_buf(grads, *x, g.len(), i);
                for k in 0..g.len() {
                    if xv[k] > T::zero() {
                        gx[k] += g[k];
                    }
                }
            }
            Op::Exp(x) => {
                let gx = acc_buf(grads, *x, g.len(), i);
                for k in 0..g.len() {
                    gx[k] += g[k] * out[k];
                }
            }
            Op::Softmax(x) => {
                let n = last_dim(node.value.shape());
                let gx = acc_buf(grads, *x, g.len(), i);
                for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for k in 0..n {
                        dr[k] += yr[k] * (gr[k] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = last_dim(node.value.shape());
                let gx = acc_buf(grads, *x, g.len(), i);
                for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: T = gr.iter().copied().sum();
                    for k in 0..n {
                        dr[k] += gr[k] - yr[k].exp() * s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = last_dim(node.value.shape());
                let gv = self.value(*gamma).data().to_vec();
                {
                    let gg = acc_buf(grads, *gamma, n, i);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for k in 0..n {
                            gg[k] += gr[k] * hr[k];
                        }
                    }
                }
                {
                    let gb = acc_buf(grads, *beta, n, i);
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                let nn: T = c(n as f64);
                let gx = acc_buf(grads, *x, g.len(), i);
                for (r, ((gr, hr), dr)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for k in 0..n {
                        let dh = gr[k] * gv[k];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[k];
                    }
                    for k in 0..n {
                        let dh = gr[k] * gv[k];
                        dr[k] += rstd[r] * (dh - sum_dh / nn - hr[k] * sum_dh_h / nn);
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                let gx = acc_buf(grads, *x, m * n, i);
                for a in 0..m {
                    for b in 0..n {
                        gx[a * n + b] += g[b * m + a];
                    }
                }
            }
            Op::Reshape(x) => add_into(acc_buf(grads, *x, g.len(), i), g),
            Op::Gather { x, index } => {
                let n = self.value(*x).numel();
                let gx = acc_buf(grads, *x, n, i);
                for (k, &idx) in index.iter().enumerate() {
                    gx[idx] += g[k];
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let n = self.value(*x).numel();
                    add_into(acc_buf(grads, *x, n, i), &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceRows(x, start) => {
                let s = self.shape(*x);
                let inner: usize = s[1..].iter().product();
                let n = self.value(*x).numel();
                let gx = acc_buf(grads, *x, n, i);
                add_into(&mut gx[start * inner..start * inner + g.len()], g);
            }
            Op::SliceCols(x, start) => {
                let s = self.shape(*x).to_vec();
                let len = last_dim(node.value.shape());
                let gx = acc_buf(grads, *x, s[0] * s[1], i);
                for r in 0..s[0] {
                    add_into(&mut gx[r * s[1] + start..r * s[1] + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::ConcatCols(xs) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut off = 0;
                for x in xs {
                    let w = self.shape(*x)[1];
                    let gx = acc_buf(grads, *x, m * w, i);
                    for r in 0..m {
                        add_into(&mut gx[r * w..(r + 1) * w], &g[r * n + off..r * n + off + w]);
                    }
                    off += w;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cout = self.shape(*w)[0];
                let l = geom.ho * geom.wo;
                let ckk = geom.cin * geom.k * geom.k;
                if let Some(b) = b {
                    let gb = acc_buf(grads, *b, cout, i);
                    for (o, row) in g.chunks(l).enumerate() {
                        gb[o] += row.iter().copied().sum::<T>();
                    }
                }
                {
                    let gw = acc_buf(grads, *w, cout * ckk, i);
                    gemm_nt_acc(g, cols, gw, cout, l, ckk);
                }
                let mut dcols = vec![T::zero(); ckk * l];
                gemm_tn_acc(self.value(*w).data(), g, &mut dcols, ckk, cout, l);
                let gx = acc_buf(grads, *x, geom.cin * geom.h * geom.w, i);
                col2im_acc(&dcols, geom, gx);
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let cout = self.shape(*w)[1];
                let l = geom.ho * geom.wo;
                let hw = geom.h * geom.w;
                let ckk = cout * geom.k * geom.k;
                if let Some(b) = b {
                    let gb = acc_buf(grads, *b, cout, i);
                    for (o, row) in g.chunks(l).enumerate() {
                        gb[o] += row.iter().copied().sum::<T>();
                    }
                }
                let out_geom = ConvGeom {
                    cin: cout,
                    h: geom.ho,
                    w: geom.wo,
                    k: geom.k,
                    stride: geom.stride,
                    pad: 0,
                    ho: geom.h,
                    wo: geom.w,
                };
                let dcols = im2col(g, &out_geom);
                {
                    let gx = acc_buf(grads, *x, geom.cin * hw, i);
                    gemm_acc(self.value(*w).data(), &dcols, gx, geom.cin, ckk, hw);
                }
                let gw = acc_buf(grads, *w, geom.cin * ckk, i);
                gemm_nt_acc(self.value(*x).data(), &dcols, gw, geom.cin, hw, ckk);
            }
            Op::MaxPool2d { x, argmax } => {
                let n = self.value(*x).numel();
                let gx = acc_buf(grads, *x, n, i);
                for (k, &idx) in argmax.iter().enumerate() {
                    gx[idx] += g[k];
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (ch, h, w) = (s[0], s[1], s[2]);
                let gx = acc_buf(grads, *x, ch * h * w, i);
                let mut k = 0;
                for cc in 0..ch {
                    for a in 0..2 * h {
                        for b in 0..2 * w {
                            gx[cc * h * w + (a / 2) * w + b / 2] += g[k];
                            k += 1;
                        }
                    }
                }
            }
            Op::RoiAlign { x, weights } => {
                let s = self.shape(*x).to_vec();
                let (ch, h, w) = (s[0], s[1], s[2]);
                let bins = node.value.shape()[2];
                let gx = acc_buf(grads, *x, ch * h * w, i);
                for (bi, wts) in weights.iter().enumerate() {
                    for cc in 0..ch {
                        let plane = &mut gx[cc * h * w..(cc + 1) * h * w];
                        for (bin, taps) in wts.bins.iter().enumerate() {
                            let gv = g[(bi * ch + cc) * bins + bin];
                            for &(idx, wt) in taps {
                                plane[idx] += gv * c(wt);
                            }
                        }
                    }
                }
            }
            Op::MeanLastAxis(x) => {
                let k = last_dim(self.shape(*x));
                let n = self.value(*x).numel();
                let inv: T = c(1.0 / k as f64);
                let gx = acc_buf(grads, *x, n, i);
                for (r, row) in gx.chunks_mut(k).enumerate() {
                    row.iter_mut().for_each(|d| *d += g[r] * inv);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = last_dim(node.value.shape());
                let gx = acc_buf(grads, *x, g.len(), i);
                for (r, ((gr, yr), dr)) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for k in 0..n {
                        dr[k] += (gr[k] - yr[k] * dot) / norms[r];
                    }
                }
            }
            Op::FocalLoss {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let lv = self.value(*logits).data();
                let gx = acc_buf(grads, *logits, lv.len(), i);
                for k in 0..lv.len() {
                    gx[k] += g[0] * focal_term(lv[k], targets[k], *alpha, *gamma).1;
                }
            }
            Op::IouLoss { pred, target } => {
                let pv = self.value(*pred).data();
                let gx = acc_buf(grads, *pred, pv.len(), i);
                for (r, (p, t)) in pv.chunks(4).zip(target.chunks(4)).enumerate() {
                    let (iou, d_iou) = iou_ltrb(p, t);
                    for k in 0..4 {
                        gx[r * 4 + k] += -g[0] * d_iou[k] / iou;
                    }
                }
            }
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn acc_buf<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, n: usize, consumer: usize) -> &mut [T] {
    assert!(v.0 < consumer, "tape order violated: node {} feeds node {consumer}", v.0);
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

/// `(loss, d loss / d logit)` of one sigmoid focal term.
fn focal_term<T: Float>(x: T, y: T, alpha: T, gamma: T) -> (T, T) {
    let one = T::one();
    let p = sigmoid(x);
    if y > c(0.5) {
        // -alpha (1-p)^gamma log p
        let q = one - p;
        let lp = log_sigmoid(x);
        let loss = -alpha * q.powf(gamma) * lp;
        // d/dx: alpha [gamma q^(gamma-1) p q log p - q^gamma q]
        let d = alpha * (gamma * q.powf(gamma) * p * lp - q.powf(gamma) * q);
        (loss, d)
    } else {
        // -(1-alpha) p^gamma log(1-p)
        let l1p = log_sigmoid(-x);
        let a = one - alpha;
        let loss = -a * p.powf(gamma) * l1p;
        let d = a * (-gamma * p.powf(gamma) * (one - p) * l1p + p.powf(gamma) * p);
        (loss, d)
    }
}

/// IoU of two `(l,t,r,b)` boxes sharing an anchor point, with its gradient
/// with respect to the first box.
fn iou_ltrb<T: Float>(p: &[T], t: &[T]) -> (T, [T; 4]) {
    let (pl, pt, pr, pb) = (p[0], p[1], p[2], p[3]);
    let (tl, tt, tr, tb) = (t[0], t[1], t[2], t[3]);
    let ap = (pl + pr) * (pt + pb);
    let at = (tl + tr) * (tt + tb);
    let iw = pl.min(tl) + pr.min(tr);
    let ih = pt.min(tt) + pb.min(tb);
    let inter = iw * ih;
    let union = ap + at - inter;
    let iou = inter / union;
    // d inter / d p
    let one = T::one();
    let zero = T::zero();
    let sel = |a: T, b: T| if a < b { one } else { zero };
    let di = [sel(pl, tl) * ih, sel(pt, tt) * iw, sel(pr, tr) * ih, sel(pb, tb) * iw];
    let da = [pt + pb, pl + pr, pt + pb, pl + pr];
    let mut d = [zero; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        d[k] = (di[k] * union - inter * du) / (union * union);
    }
    (iou, d)
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let l = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * g.k * g.k * l];
    for cc in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (cc * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        dst[oi * g.wo + oj] = x[(cc * g.h + ii as usize) * g.w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let l = g.ho * g.wo;
    for cc in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (cc * g.k + ki) * g.k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        x[(cc * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.wo + oj];
                    }
                }
            }
        }
    }
}
