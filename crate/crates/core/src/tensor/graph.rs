use crate::error::{Error, Result};

use super::Tensor;

/// Clamp applied to probabilities before any `ln(p)` or `ln(1 - p)`.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulByScalar(Var, Var),
    DivByScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    },
    AddBias(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    SmoothL1(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Norm(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    AvgPool(Var),
    Upsample2x(Var),
    CenterRows(Var),
    NormalizeRows(Var),
    RowNorms(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`; leaves the loss did not reach
    /// receive zeros.
    pub fn accumulate(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.numel()]),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

fn pool_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
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

    fn push(
        &mut self,
        op_name: &str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        tracked: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Binds a tensor; the node is tracked iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            tracked: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a tensor as an untracked constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Copies the value of `v` into an untracked node; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v).clone();
        self.nodes.push(Node {
            op: Op::Leaf,
            tracked: false,
            ..n
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::NotScalar(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone())
            .expect("graph values are finite and well-shaped")
    }

    fn unary(&mut self, name: &str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        self.push(name, shape, value, op, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let value = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = na.shape.clone();
        let tracked = na.tracked || nb.tracked;
        self.push(name, shape, value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        if self.node(s).value.len() != 1 {
            return Err(shape_err(op, self.shape(s), &[1]));
        }
        Ok(())
    }

    /// `a * s` for a one-element `s`.
    pub fn mul_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar("mul_by_scalar", s)?;
        let sv = self.node(s).value[0];
        let tracked = self.node(a).tracked || self.node(s).tracked;
        let n = self.node(a);
        let value = n.value.iter().map(|x| x * sv).collect();
        let shape = n.shape.clone();
        self.push(
            "mul_by_scalar",
            shape,
            value,
            Op::MulByScalar(a, s),
            tracked,
        )
    }

    /// `a / s` for a one-element `s`.
    pub fn div_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.expect_scalar("div_by_scalar", s)?;
        let sv = self.node(s).value[0];
        if sv == 0.0 {
            return Err(Error::NonFinite("div_by_scalar (division by zero)".into()));
        }
        let tracked = self.node(a).tracked || self.node(s).tracked;
        let n = self.node(a);
        let value = n.value.iter().map(|x| x / sv).collect();
        let shape = n.shape.clone();
        self.push(
            "div_by_scalar",
            shape,
            value,
            Op::DivByScalar(a, s),
            tracked,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
            }
        }
        let tracked = self.node(a).tracked || self.node(b).tracked;
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Invalid(format!(
                "transpose expects a matrix, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.node(a).value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let tracked = self.node(a).tracked;
        self.push("transpose", vec![c, r], out, Op::Transpose(a), tracked)
    }

    /// 2-D cross-correlation of `[n, c, h, w]` input with `[o, c, kh, kw]`
    /// weights, zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || stride == 0 {
            return Err(shape_err("conv2d", &si, &sw));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = match (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err("conv2d", &si, &sw)),
        };
        let x = &self.node(input).value;
        let wt = &self.node(weight).value;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                let dst = &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                for ic in 0..c {
                    let src = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wt[((oc * c + ic) * kh + ky) * kw + kx];
                            for y in 0..oh {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                                let drow = &mut dst[y * ow..(y + 1) * ow];
                                for (xo, d) in drow.iter_mut().enumerate() {
                                    let ix = (xo * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *d += wv * srow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let tracked = self.node(input).tracked || self.node(weight).tracked;
        self.push(
            "conv2d",
            vec![n, o, oh, ow],
            out,
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
            tracked,
        )
    }

    /// Adds `bias[c]` along axis 1 of a `[n, c, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(shape_err("add_bias", &sx, &sb));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let bv = &self.node(bias).value;
        let mut out = self.node(x).value.clone();
        for (chunk_idx, chunk) in out.chunks_mut(inner).enumerate() {
            let b = bv[chunk_idx % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let tracked = self.node(x).tracked || self.node(bias).tracked;
        self.push("add_bias", sx, out, Op::AddBias(x, bias), tracked)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary("leaky_relu", a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, Op::Ln(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Clamps probabilities to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn clamp_prob(&mut self, a: Var) -> Result<Var> {
        self.clamp(a, PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Elementwise smooth-l1 with threshold 1: `0.5 e^2` below 1, `|e| - 0.5` above.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary("smooth_l1", a, Op::SmoothL1(a), |e| {
            if e.abs() < 1.0 {
                0.5 * e * e
            } else {
                e.abs() - 0.5
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let s = n.value.iter().sum();
        let tracked = n.tracked;
        self.push("sum", vec![1], vec![s], Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let tracked = n.tracked;
        self.push("mean", vec![1], vec![s], Op::Mean(a), tracked)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if numel(sa) != numel(sb) {
            return Err(shape_err("dot", sa, sb));
        }
        let s = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x * y)
            .sum();
        let tracked = self.node(a).tracked || self.node(b).tracked;
        self.push("dot", vec![1], vec![s], Op::Dot(a, b), tracked)
    }

    /// Euclidean norm of all entries. The gradient at the origin is taken as zero.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let s = n.value.iter().map(|x| x * x).sum::<f64>().sqrt();
        let tracked = n.tracked;
        self.push("norm", vec![1], vec![s], Op::Norm(a), tracked)
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut value = Vec::new();
        let mut tracked = false;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat", self.shape(first), s));
            }
            lead += s[0];
            value.extend_from_slice(&self.node(p).value);
            tracked |= self.node(p).tracked;
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push("concat", shape, value, Op::Concat(parts.to_vec()), tracked)
    }

    /// Rows `start..end` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if start >= end || end > s[0] {
            return Err(Error::Invalid(format!(
                "slice {start}..{end} out of range for {s:?}"
            )));
        }
        let inner = numel(&s[1..]);
        let value = self.node(a).value[start * inner..end * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let tracked = self.node(a).tracked;
        self.push("slice", shape, value, Op::Slice(a, start), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if numel(s) != numel(shape) || shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("reshape", s, shape));
        }
        let value = self.node(a).value.clone();
        let tracked = self.node(a).tracked;
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a), tracked)
    }

    fn log_sum_exp(v: &[f64]) -> f64 {
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
    }

    /// Softmax over all entries, treated as one vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let lse = Self::log_sum_exp(&n.value);
        let value = n.value.iter().map(|x| (x - lse).exp()).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        self.push("softmax", shape, value, Op::Softmax(a), tracked)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let lse = Self::log_sum_exp(&n.value);
        let value = n.value.iter().map(|x| x - lse).collect();
        let (shape, tracked) = (n.shape.clone(), n.tracked);
        self.push("log_softmax", shape, value, Op::LogSoftmax(a), tracked)
    }

    /// Adaptive average pooling of `[n, c, h, w]` to `[n, c, oh, ow]`. Output
    /// cell `i` averages input rows `floor(i*h/oh)..ceil((i+1)*h/oh)`.
    pub fn adaptive_avg_pool2d(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || oh == 0 || ow == 0 || oh > s[2] || ow > s[3] {
            return Err(shape_err("adaptive_avg_pool2d", &s, &[oh, ow]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = &self.node(a).value;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = pool_bounds(i, h, oh);
                for j in 0..ow {
                    let (x0, x1) = pool_bounds(j, w, ow);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out[(p * oh + i) * ow + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let tracked = self.node(a).tracked;
        self.push(
            "adaptive_avg_pool2d",
            vec![s[0], s[1], oh, ow],
            out,
            Op::AvgPool(a),
            tracked,
        )
    }

    /// Nearest-neighbour 2x spatial upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Invalid(format!(
                "upsample2x expects rank 4, got {s:?}"
            )));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = &self.node(a).value;
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let tracked = self.node(a).tracked;
        self.push(
            "upsample2x",
            vec![s[0], s[1], 2 * h, 2 * w],
            out,
            Op::Upsample2x(a),
            tracked,
        )
    }

    fn matrix_dims(&self, op: &str, a: Var) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Invalid(format!("{op} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Subtracts each row's mean from that row.
    pub fn center_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("center_rows", a)?;
        let mut value = self.node(a).value.clone();
        for row in value.chunks_mut(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            row.iter_mut().for_each(|v| *v -= m);
        }
        let shape = self.shape(a).to_vec();
        let tracked = self.node(a).tracked;
        self.push("center_rows", shape, value, Op::CenterRows(a), tracked)
    }

    /// Scales each row to unit norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("normalize_rows", a)?;
        let mut value = self.node(a).value.clone();
        for row in value.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let shape = self.shape(a).to_vec();
        let tracked = self.node(a).tracked;
        self.push(
            "normalize_rows",
            shape,
            value,
            Op::NormalizeRows(a),
            tracked,
        )
    }

    /// Per-row Euclidean norms of a `[r, c]` matrix, shape `[r]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("row_norms", a)?;
        let value = self
            .node(a)
            .value
            .chunks(c)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let tracked = self.node(a).tracked;
        self.push("row_norms", vec![r], value, Op::RowNorms(a), tracked)
    }

    /// Reverse sweep from a scalar node. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NotScalar(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if ln.tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        let n = &self.nodes[v.0];
        if !n.tracked {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.node(a).value, &self.node(b).value);
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::MulByScalar(a, sc) => {
                let av = &self.node(a).value;
                let sv = self.node(sc).value[0];
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * sv);
                }
                if let Some(s) = self.slot(grads, sc) {
                    s[0] += g.iter().zip(av).map(|(g, x)| g * x).sum::<f64>();
                }
            }
            Op::DivByScalar(a, sc) => {
                let sv = self.node(sc).value[0];
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g / sv);
                }
                if let Some(s) = self.slot(grads, sc) {
                    // d(x/s)/ds = -y/s
                    s[0] -= g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / sv;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.node(a).value, &self.node(b).value);
                if let Some(s) = self.slot(grads, a) {
                    // dA = G B^T
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    // dB = A^T G
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            s[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, gv)| *d += x * gv);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => self.conv2d_backward(node, g, grads, input, weight, stride, pad),
            Op::AddBias(x, bias) => {
                let sx = self.shape(x);
                let c = sx[1];
                let inner: usize = sx[2..].iter().product();
                if let Some(s) = self.slot(grads, x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, bias) {
                    for (idx, chunk) in g.chunks(inner).enumerate() {
                        s[idx % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = &self.node(a).value;
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..s.len() {
                        s[i] += if av[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Ln(a) => {
                let av = &self.node(a).value;
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..s.len() {
                        s[i] += g[i] / av[i];
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.node(a).value;
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..s.len() {
                        if av[i] >= lo && av[i] <= hi {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::SmoothL1(a) => {
                let av = &self.node(a).value;
                if let Some(s) = self.slot(grads, a) {
                    for i in 0..s.len() {
                        let e = av[i];
                        s[i] += g[i] * if e.abs() < 1.0 { e } else { e.signum() };
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = self.slot(grads, a) {
                    let d = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|s| *s += d);
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (&self.node(a).value, &self.node(b).value);
                if let Some(s) = self.slot(grads, a) {
                    s.iter_mut().zip(bv).for_each(|(s, b)| *s += g[0] * b);
                }
                if let Some(s) = self.slot(grads, b) {
                    s.iter_mut().zip(av).for_each(|(s, a)| *s += g[0] * a);
                }
            }
            Op::Norm(a) => {
                let av = &self.node(a).value;
                if y[0] > 0.0 {
                    if let Some(s) = self.slot(grads, a) {
                        let k = g[0] / y[0];
                        s.iter_mut().zip(av).for_each(|(s, x)| *s += k * x);
                    }
                }
            }
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.node(p).value.len();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(s, g)| *s += g);
                    }
                    offset += len;
                }
            }
            Op::Slice(a, start) => {
                let inner = numel(&self.shape(a)[1..]);
                if let Some(s) = self.slot(grads, a) {
                    s[start * inner..start * inner + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, g)| *s += g);
                }
            }
            Op::Softmax(a) => {
                if let Some(s) = self.slot(grads, a) {
                    let gy: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    for i in 0..s.len() {
                        s[i] += y[i] * (g[i] - gy);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(s) = self.slot(grads, a) {
                    let gs: f64 = g.iter().sum();
                    for i in 0..s.len() {
                        s[i] += g[i] - y[i].exp() * gs;
                    }
                }
            }
            Op::AvgPool(a) => {
                let si = self.shape(a);
                let (h, w) = (si[2], si[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let planes = si[0] * si[1];
                if let Some(s) = self.slot(grads, a) {
                    for p in 0..planes {
                        for i in 0..oh {
                            let (y0, y1) = pool_bounds(i, h, oh);
                            for j in 0..ow {
                                let (x0, x1) = pool_bounds(j, w, ow);
                                let d = g[(p * oh + i) * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        s[(p * h + yy) * w + xx] += d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2x(a) => {
                let si = self.shape(a);
                let (planes, h, w) = (si[0] * si[1], si[2], si[3]);
                if let Some(s) = self.slot(grads, a) {
                    for p in 0..planes {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                s[(p * h + yy / 2) * w + xx / 2] +=
                                    g[(p * 2 * h + yy) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::CenterRows(a) => {
                let c = node.shape[1];
                if let Some(s) = self.slot(grads, a) {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                        let m = grow.iter().sum::<f64>() / c as f64;
                        srow.iter_mut().zip(grow).for_each(|(s, g)| *s += g - m);
                    }
                }
            }
            Op::NormalizeRows(a) => {
                let c = node.shape[1];
                let av = &self.node(a).value;
                if let Some(s) = self.slot(grads, a) {
                    for ((srow, grow), (xrow, yrow)) in s
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(av.chunks(c).zip(y.chunks(c)))
                    {
                        let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let gy: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for i in 0..c {
                            srow[i] += (grow[i] - yrow[i] * gy) / n;
                        }
                    }
                }
            }
            Op::RowNorms(a) => {
                let c = self.shape(a)[1];
                let av = &self.node(a).value;
                if let Some(s) = self.slot(grads, a) {
                    for (r, (srow, xrow)) in s.chunks_mut(c).zip(av.chunks(c)).enumerate() {
                        if y[r] > 0.0 {
                            let k = g[r] / y[r];
                            srow.iter_mut().zip(xrow).for_each(|(s, x)| *s += k * x);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    ) {
        let si = self.shape(input);
        let sw = self.shape(weight);
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = (node.shape[2], node.shape[3]);
        let x = &self.node(input).value;
        let wt = &self.node(weight).value;
        let taps = |y: usize, k: usize, size: usize| -> Option<usize> {
            let i = (y * stride + k) as isize - pad as isize;
            (i >= 0 && i < size as isize).then_some(i as usize)
        };
        if let Some(gw) = self.slot(grads, weight) {
            for b in 0..n {
                for oc in 0..o {
                    let gplane = &g[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                    for ic in 0..c {
                        let src = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = 0.0;
                                for yo in 0..oh {
                                    let Some(iy) = taps(yo, ky, h) else { continue };
                                    for xo in 0..ow {
                                        if let Some(ix) = taps(xo, kx, w) {
                                            acc += gplane[yo * ow + xo] * src[iy * w + ix];
                                        }
                                    }
                                }
                                gw[((oc * c + ic) * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if let Some(gi) = self.slot(grads, input) {
            for b in 0..n {
                for oc in 0..o {
                    let gplane = &g[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                    for ic in 0..c {
                        let dst = &mut gi[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = wt[((oc * c + ic) * kh + ky) * kw + kx];
                                for yo in 0..oh {
                                    let Some(iy) = taps(yo, ky, h) else { continue };
                                    for xo in 0..ow {
                                        if let Some(ix) = taps(xo, kx, w) {
                                            dst[iy * w + ix] += wv * gplane[yo * ow + xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
