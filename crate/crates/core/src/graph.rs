//! Define-by-run tape autodiff.
//!
//! A [`Graph`] is rebuilt for every forward pass: leaves are inserted first
//! (parameters, inputs, constants), ops append nodes in topological order,
//! and a single [`Graph::backward`] walk fills gradients for every node that
//! can reach a `requires_grad` leaf. Frozen parameters are inserted as plain
//! constants, so gradient flow stops at them exactly like a stop-gradient.
//!
//! Buffer allocations (values and gradients) are accounted on the graph so
//! the profiler can report a deterministic peak instead of OS RSS.

use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, broadcast_strides, reduce_to_shape, strides, Tensor};
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, c: S },
    AddScalar { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    LnClamped { a: Var, eps: S },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    MeanAxis { a: Var, axis: usize },
    SumAxis { a: Var, axis: usize },
    MaxAxis { a: Var, axis: usize },
    MeanAll { a: Var },
    SumAll { a: Var },
    MaxPool2 { a: Var },
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Conv3d { input: Var, kernel: Var, pad: [usize; 3] },
    GatherRows { a: Var, rows: Vec<usize> },
    Pick { a: Var, index: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { a: Var },
    SliceCols { a: Var, start: usize, len: usize },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
    bytes_live: usize,
    bytes_peak: usize,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            bytes_live: 0,
            bytes_peak: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Peak of accounted buffer bytes (values + gradients) over the graph's
    /// lifetime so far.
    pub fn peak_bytes(&self) -> usize {
        self.bytes_peak
    }

    pub fn live_bytes(&self) -> usize {
        self.bytes_live
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn account(&mut self, elements: usize) {
        self.bytes_live += elements * std::mem::size_of::<S>();
        if self.bytes_live > self.bytes_peak {
            self.bytes_peak = self.bytes_live;
        }
        debug_assert!(self.bytes_live <= self.bytes_peak);
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.account(value.numel());
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Ok(Var(id))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.account(value.numel());
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(id)
    }

    /// Non-trainable leaf; gradient flow stops here.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise and broadcast ----------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        let numel: usize = out_shape.iter().product();
        let data = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let so = strides(&out_shape);
            let mut data = Vec::with_capacity(numel);
            for flat in 0..numel {
                let mut ia = 0;
                let mut ib = 0;
                for d in 0..out_shape.len() {
                    let coord = (flat / so[d]) % out_shape[d];
                    ia += coord * sa[d];
                    ib += coord * sb[d];
                }
                data.push(f(va.data()[ia], vb.data()[ib]));
            }
            data
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(name, Tensor::new(out_shape, data)?, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let data: Vec<S> = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(name, value, op, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::of_f64(c);
        self.unary("scale", a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = S::of_f64(c);
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu_value, Op::Gelu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp { a })
    }

    /// ln(max(x, eps)); the clamp keeps log of a collapsed probability finite.
    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        let eps = S::of_f64(eps);
        self.unary(
            "ln_clamped",
            a,
            |x| if x < eps { eps.ln() } else { x.ln() },
            Op::LnClamped { a, eps },
        )
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dim(format!("matmul needs 2-d operands, got {sa:?} x {sb:?}")));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dim(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![S::zero(); m * n];
        mm_nn(va.data(), vb.data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("transpose needs a 2-d tensor, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data()[i * c + j];
            }
        }
        let needs = self.needs(a);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose { a }, needs)
    }

    // ---- shape ops ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let value = va.clone().reshaped(shape)?;
        let needs = self.needs(a);
        self.push("reshape", value, Op::Reshape { a }, needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat of zero tensors".into()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Dim(format!("concat axis {axis} out of rank {}", first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::Dim(format!(
                    "concat extents mismatch: {first:?} vs {s:?} on axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![S::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let k = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * k * inner..(o + 1) * k * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + k * inner].copy_from_slice(src);
            }
            offset += k;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            Tensor::new(out_shape, data)?,
            Op::Concat { parts: parts.to_vec(), axis },
            needs,
        )
    }

    /// Columns [start, start+len) of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("slice_cols needs a 2-d tensor, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        if start + len > c {
            return Err(Error::Dim(format!("slice_cols [{start}, {}) out of {c} columns", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&va.data()[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(a);
        self.push(
            "slice_cols",
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { a, start, len },
            needs,
        )
    }

    /// Row gather from a 2-d table; also the embedding lookup.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("gather_rows needs a 2-d tensor, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("gather_rows: row {bad} out of {r}")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&va.data()[i * c..(i + 1) * c]);
        }
        let needs = self.needs(a);
        self.push(
            "gather_rows",
            Tensor::new(vec![rows.len(), c], data)?,
            Op::GatherRows { a, rows: rows.to_vec() },
            needs,
        )
    }

    /// Single element by flat index, as a `[1]` tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if index >= va.numel() {
            return Err(Error::Input(format!("pick: index {index} out of {}", va.numel())));
        }
        let value = Tensor::scalar(va.data()[index]);
        let needs = self.needs(a);
        self.push("pick", value, Op::Pick { a, index }, needs)
    }

    // ---- reductions ----------------------------------------------------------

    fn reduce_axis(
        &mut self,
        name: &'static str,
        a: Var,
        axis: usize,
        op: Op<S>,
        mode: ReduceMode,
    ) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if axis >= s.len() {
            return Err(Error::Dim(format!("reduce axis {axis} out of rank {}", s.len())));
        }
        let (outer, k, inner) = split_axis(s, axis);
        let mut out_shape: Vec<usize> = s.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = match mode {
                    ReduceMode::Max => S::neg_infinity(),
                    _ => S::zero(),
                };
                for j in 0..k {
                    let x = va.data()[(o * k + j) * inner + i];
                    acc = match mode {
                        ReduceMode::Max => {
                            if x > acc {
                                x
                            } else {
                                acc
                            }
                        }
                        _ => acc + x,
                    };
                }
                if let ReduceMode::Mean = mode {
                    acc = acc / S::of_f64(k as f64);
                }
                data[o * inner + i] = acc;
            }
        }
        let needs = self.needs(a);
        self.push(name, Tensor::new(out_shape, data)?, op, needs)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", a, axis, Op::MeanAxis { a, axis }, ReduceMode::Mean)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", a, axis, Op::SumAxis { a, axis }, ReduceMode::Sum)
    }

    /// Max along an axis; ties resolve to the first occurrence in backward.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("max_axis", a, axis, Op::MaxAxis { a, axis }, ReduceMode::Max)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let n = S::of_f64(va.numel() as f64);
        let total: S = va.data().iter().copied().sum();
        let needs = self.needs(a);
        self.push("mean_all", Tensor::scalar(total / n), Op::MeanAll { a }, needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let total: S = va.data().iter().copied().sum();
        let needs = self.needs(a);
        self.push("sum_all", Tensor::scalar(total), Op::SumAll { a }, needs)
    }

    // ---- neural-net ops -------------------------------------------------------

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if axis >= s.len() {
            return Err(Error::Dim(format!("softmax axis {axis} out of rank {}", s.len())));
        }
        let (outer, k, inner) = split_axis(s, axis);
        let mut data = vec![S::zero(); va.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * k + j) * inner + i;
                let mut maxv = S::neg_infinity();
                for j in 0..k {
                    let x = va.data()[at(j)];
                    if x > maxv {
                        maxv = x;
                    }
                }
                let mut denom = S::zero();
                for j in 0..k {
                    let e = (va.data()[at(j)] - maxv).exp();
                    data[at(j)] = e;
                    denom += e;
                }
                for j in 0..k {
                    data[at(j)] = data[at(j)] / denom;
                }
            }
        }
        let needs = self.needs(a);
        self.push("softmax", Tensor::new(s.to_vec(), data)?, Op::Softmax { a, axis }, needs)
    }

    /// Per-vector normalization over the last axis with learnable scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let d = *vx.shape().last().ok_or_else(|| Error::Dim("layer_norm on rank-0".into()))?;
        if vg.numel() != d || vb.numel() != d {
            return Err(Error::Dim(format!(
                "layer_norm scale/shift need {d} entries, got {}/{}",
                vg.numel(),
                vb.numel()
            )));
        }
        let eps_s = S::of_f64(eps);
        let rows = vx.numel() / d;
        let mut data = vec![S::zero(); vx.numel()];
        let dn = S::of_f64(d as f64);
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>()
                / dn;
            let inv = (var + eps_s).sqrt().recip();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            Tensor::new(vx.shape().to_vec(), data)?,
            Op::LayerNorm { x, gamma, beta, eps: eps_s },
            needs,
        )
    }

    /// 2-d cross-correlation: input `[C_in, H, W]`, kernel `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vi, vk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (si, sk) = (vi.shape(), vk.shape());
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::Dim(format!("conv2d expects [C,H,W] and [O,C,kh,kw], got {si:?} and {sk:?}")));
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, ck, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if ci != ck {
            return Err(Error::Dim(format!("conv2d channels differ: input {ci}, kernel {ck}")));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if stride == 0 {
            return Err(Error::Input("conv2d stride 0".into()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![S::zero(); co * ho * wo];
        let idat = vi.data();
        let kdat = vk.data();
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::zero();
                    for ic in 0..ci {
                        for u in 0..kh {
                            let y = (oy * stride + u) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let x = (ox * stride + v) as isize - pad as isize;
                                if x < 0 || x >= w as isize {
                                    continue;
                                }
                                acc += idat[(ic * h + y as usize) * w + x as usize]
                                    * kdat[((oc * ci + ic) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel);
        self.push(
            "conv2d",
            Tensor::new(vec![co, ho, wo], out)?,
            Op::Conv2d { input, kernel, stride, pad },
            needs,
        )
    }

    /// 3-d cross-correlation, stride 1: input `[C, T, H, W]`,
    /// kernel `[C_out, C_in, kt, kh, kw]`, per-axis zero padding.
    pub fn conv3d(&mut self, input: Var, kernel: Var, pad: [usize; 3]) -> Result<Var> {
        let (vi, vk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (si, sk) = (vi.shape(), vk.shape());
        if si.len() != 4 || sk.len() != 5 {
            return Err(Error::Dim(format!(
                "conv3d expects [C,T,H,W] and [O,C,kt,kh,kw], got {si:?} and {sk:?}"
            )));
        }
        let (ci, t, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, ck, kt, kh, kw) = (sk[0], sk[1], sk[2], sk[3], sk[4]);
        if ci != ck {
            return Err(Error::Dim(format!("conv3d channels differ: input {ci}, kernel {ck}")));
        }
        let [pt, ph, pw] = pad;
        if kt > t + 2 * pt || kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(Error::Dim(format!(
                "conv3d kernel {kt}x{kh}x{kw} larger than padded input {}x{}x{}",
                t + 2 * pt,
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        let to = t + 2 * pt - kt + 1;
        let ho = h + 2 * ph - kh + 1;
        let wo = w + 2 * pw - kw + 1;
        let mut out = vec![S::zero(); co * to * ho * wo];
        let idat = vi.data();
        let kdat = vk.data();
        for oc in 0..co {
            for ot in 0..to {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = S::zero();
                        for ic in 0..ci {
                            for q in 0..kt {
                                let tt = (ot + q) as isize - pt as isize;
                                if tt < 0 || tt >= t as isize {
                                    continue;
                                }
                                for u in 0..kh {
                                    let y = (oy + u) as isize - ph as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let x = (ox + v) as isize - pw as isize;
                                        if x < 0 || x >= w as isize {
                                            continue;
                                        }
                                        acc += idat[((ic * t + tt as usize) * h + y as usize) * w
                                            + x as usize]
                                            * kdat[(((oc * ci + ic) * kt + q) * kh + u) * kw + v];
                                    }
                                }
                            }
                        }
                        out[((oc * to + ot) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernel);
        self.push(
            "conv3d",
            Tensor::new(vec![co, to, ho, wo], out)?,
            Op::Conv3d { input, kernel, pad },
            needs,
        )
    }

    /// 2x2 max-pool, stride 2, over `[C, H, W]`. H and W must be even.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let s = va.shape();
        if s.len() != 3 {
            return Err(Error::Dim(format!("max_pool2 expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dim(format!("max_pool2 needs even extents, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![S::zero(); c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = S::neg_infinity();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = va.data()[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = best;
                }
            }
        }
        let needs = self.needs(a);
        self.push("max_pool2", Tensor::new(vec![c, ho, wo], out)?, Op::MaxPool2 { a }, needs)
    }

    /// Mean negative log-likelihood of `targets` under log-softmax of the
    /// logit rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        let s = vl.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("cross_entropy expects [B,K] logits, got {s:?}")));
        }
        let (b, k) = (s[0], s[1]);
        if targets.len() != b {
            return Err(Error::Input(format!(
                "cross_entropy: {b} logit rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Input(format!("cross_entropy: target {bad} out of {k} classes")));
        }
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &vl.data()[r * k..(r + 1) * k];
            let maxv = row.iter().copied().fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
            let lse = row.iter().map(|&x| (x - maxv).exp()).sum::<S>().ln() + maxv;
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / S::of_f64(b as f64));
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            needs,
        )
    }

    // ---- backward ---------------------------------------------------------------

    fn add_grad(&mut self, v: Var, contribution: &[S]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        if self.nodes[v.0].grad.is_none() {
            let n = self.nodes[v.0].value.numel();
            self.account(n);
            self.nodes[v.0].grad = Some(vec![S::zero(); n]);
        }
        let g = self.nodes[v.0].grad.as_mut().unwrap();
        for (dst, &src) in g.iter_mut().zip(contribution) {
            *dst += src;
        }
    }

    /// Reverse pass from a scalar loss. One pass per recorded graph;
    /// calling it twice is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward called twice on one graph".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing reaches a trainable leaf
        }
        self.account(1);
        self.nodes[loss.0].grad = Some(vec![S::one()]);

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let grad = self.nodes[id].grad.clone().unwrap();
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, n) = {
                        let s = self.nodes[id].value.shape();
                        (s[0], s[1])
                    };
                    let k = self.nodes[a.0].value.shape()[1];
                    if self.needs(a) {
                        let mut da = vec![S::zero(); m * k];
                        mm_nt(&grad, self.nodes[b.0].value.data(), &mut da, m, n, k);
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![S::zero(); k * n];
                        mm_tn(self.nodes[a.0].value.data(), &grad, &mut db, m, k, n);
                        self.add_grad(b, &db);
                    }
                }
                Op::Transpose { a } => {
                    let s = self.nodes[id].value.shape().to_vec();
                    let (r, c) = (s[0], s[1]);
                    let mut da = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] = grad[i * c + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::Add { a, b } => {
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    if self.needs(a) {
                        let da = reduce_to_shape(&grad, &out_shape, self.nodes[a.0].value.shape());
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db = reduce_to_shape(&grad, &out_shape, self.nodes[b.0].value.shape());
                        self.add_grad(b, &db);
                    }
                }
                Op::Mul { a, b } | Op::Div { a, b } => {
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let numel: usize = out_shape.iter().product();
                    let sa = broadcast_strides(self.nodes[a.0].value.shape(), &out_shape);
                    let sb = broadcast_strides(self.nodes[b.0].value.shape(), &out_shape);
                    let so = strides(&out_shape);
                    let divide = matches!(self.nodes[id].op, Op::Div { .. });
                    let mut da_full = vec![S::zero(); numel];
                    let mut db_full = vec![S::zero(); numel];
                    for flat in 0..numel {
                        let mut ia = 0;
                        let mut ib = 0;
                        for d in 0..out_shape.len() {
                            let coord = (flat / so[d]) % out_shape[d];
                            ia += coord * sa[d];
                            ib += coord * sb[d];
                        }
                        let (x, y) = (self.nodes[a.0].value.data()[ia], self.nodes[b.0].value.data()[ib]);
                        if divide {
                            da_full[flat] = grad[flat] / y;
                            db_full[flat] = -grad[flat] * x / (y * y);
                        } else {
                            da_full[flat] = grad[flat] * y;
                            db_full[flat] = grad[flat] * x;
                        }
                    }
                    if self.needs(a) {
                        let da = reduce_to_shape(&da_full, &out_shape, self.nodes[a.0].value.shape());
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db = reduce_to_shape(&db_full, &out_shape, self.nodes[b.0].value.shape());
                        self.add_grad(b, &db);
                    }
                }
                Op::Scale { a, c } => {
                    let da: Vec<S> = grad.iter().map(|&g| g * c).collect();
                    self.add_grad(a, &da);
                }
                Op::AddScalar { a } => {
                    self.add_grad(a, &grad);
                }
                Op::Relu { a } => {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Gelu { a } => {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&g, &x)| g * gelu_derivative(x))
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Tanh { a } => {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[id].value.data())
                        .map(|(&g, &t)| g * (S::one() - t * t))
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Exp { a } => {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[id].value.data())
                        .map(|(&g, &e)| g * e)
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::LnClamped { a, eps } => {
                    let da: Vec<S> = grad
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&g, &x)| g / if x < eps { eps } else { x })
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Softmax { a, axis } => {
                    let s = self.nodes[id].value.shape().to_vec();
                    let (outer, k, inner) = split_axis(&s, axis);
                    let out = self.nodes[id].value.data();
                    let mut da = vec![S::zero(); out.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * k + j) * inner + i;
                            let mut dot = S::zero();
                            for j in 0..k {
                                dot += grad[at(j)] * out[at(j)];
                            }
                            for j in 0..k {
                                da[at(j)] = out[at(j)] * (grad[at(j)] - dot);
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.nodes[x.0].value.shape().last().unwrap();
                    let rows = self.nodes[x.0].value.numel() / d;
                    let dn = S::of_f64(d as f64);
                    let mut dx = vec![S::zero(); rows * d];
                    let mut dgamma = vec![S::zero(); d];
                    let mut dbeta = vec![S::zero(); d];
                    for r in 0..rows {
                        let row = &self.nodes[x.0].value.data()[r * d..(r + 1) * d];
                        let grow = &grad[r * d..(r + 1) * d];
                        let mean = row.iter().copied().sum::<S>() / dn;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
                        let inv = (var + eps).sqrt().recip();
                        let gamma_data = self.nodes[gamma.0].value.data();
                        let mut dxhat = vec![S::zero(); d];
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            dgamma[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                            dxhat[j] = grow[j] * gamma_data[j];
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat;
                        }
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            dx[r * d + j] =
                                inv / dn * (dn * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::MeanAxis { a, axis } | Op::SumAxis { a, axis } => {
                    let s = self.nodes[a.0].value.shape().to_vec();
                    let (outer, k, inner) = split_axis(&s, axis);
                    let is_mean = matches!(self.nodes[id].op, Op::MeanAxis { .. });
                    let w = if is_mean {
                        S::one() / S::of_f64(k as f64)
                    } else {
                        S::one()
                    };
                    let mut da = vec![S::zero(); outer * k * inner];
                    for o in 0..outer {
                        for j in 0..k {
                            for i in 0..inner {
                                da[(o * k + j) * inner + i] = grad[o * inner + i] * w;
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::MaxAxis { a, axis } => {
                    let s = self.nodes[a.0].value.shape().to_vec();
                    let (outer, k, inner) = split_axis(&s, axis);
                    let src = self.nodes[a.0].value.data();
                    let mut da = vec![S::zero(); src.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = 0usize;
                            let mut bestv = S::neg_infinity();
                            for j in 0..k {
                                let v = src[(o * k + j) * inner + i];
                                if v > bestv {
                                    bestv = v;
                                    best = j;
                                }
                            }
                            da[(o * k + best) * inner + i] = grad[o * inner + i];
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::MeanAll { a } => {
                    let n = self.nodes[a.0].value.numel();
                    let g = grad[0] / S::of_f64(n as f64);
                    self.add_grad(a, &vec![g; n]);
                }
                Op::SumAll { a } => {
                    let n = self.nodes[a.0].value.numel();
                    self.add_grad(a, &vec![grad[0]; n]);
                }
                Op::MaxPool2 { a } => {
                    let s = self.nodes[a.0].value.shape().to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (ho, wo) = (h / 2, w / 2);
                    let src = self.nodes[a.0].value.data();
                    let mut da = vec![S::zero(); src.len()];
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut best = (0usize, 0usize);
                                let mut bestv = S::neg_infinity();
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let v = src[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                                        if v > bestv {
                                            bestv = v;
                                            best = (dy, dx);
                                        }
                                    }
                                }
                                da[(ch * h + 2 * oy + best.0) * w + 2 * ox + best.1] +=
                                    grad[(ch * ho + oy) * wo + ox];
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::Conv2d { input, kernel, stride, pad } => {
                    let si = self.nodes[input.0].value.shape().to_vec();
                    let sk = self.nodes[kernel.0].value.shape().to_vec();
                    let so = self.nodes[id].value.shape().to_vec();
                    let (ci, h, w) = (si[0], si[1], si[2]);
                    let (co, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
                    let (ho, wo) = (so[1], so[2]);
                    let need_i = self.needs(input);
                    let need_k = self.needs(kernel);
                    let idat = self.nodes[input.0].value.data().to_vec();
                    let kdat = self.nodes[kernel.0].value.data().to_vec();
                    let mut di = vec![S::zero(); idat.len()];
                    let mut dk = vec![S::zero(); kdat.len()];
                    for oc in 0..co {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = grad[(oc * ho + oy) * wo + ox];
                                if g == S::zero() {
                                    continue;
                                }
                                for ic in 0..ci {
                                    for u in 0..kh {
                                        let y = (oy * stride + u) as isize - pad as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let x = (ox * stride + v) as isize - pad as isize;
                                            if x < 0 || x >= w as isize {
                                                continue;
                                            }
                                            let ii = (ic * h + y as usize) * w + x as usize;
                                            let ki = ((oc * ci + ic) * kh + u) * kw + v;
                                            if need_i {
                                                di[ii] += g * kdat[ki];
                                            }
                                            if need_k {
                                                dk[ki] += g * idat[ii];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_i {
                        self.add_grad(input, &di);
                    }
                    if need_k {
                        self.add_grad(kernel, &dk);
                    }
                }
                Op::Conv3d { input, kernel, pad } => {
                    let si = self.nodes[input.0].value.shape().to_vec();
                    let sk = self.nodes[kernel.0].value.shape().to_vec();
                    let so = self.nodes[id].value.shape().to_vec();
                    let (ci, t, h, w) = (si[0], si[1], si[2], si[3]);
                    let (co, _, kt, kh, kw) = (sk[0], sk[1], sk[2], sk[3], sk[4]);
                    let (to, ho, wo) = (so[1], so[2], so[3]);
                    let [pt, ph, pw] = pad;
                    let need_i = self.needs(input);
                    let need_k = self.needs(kernel);
                    let idat = self.nodes[input.0].value.data().to_vec();
                    let kdat = self.nodes[kernel.0].value.data().to_vec();
                    let mut di = vec![S::zero(); idat.len()];
                    let mut dk = vec![S::zero(); kdat.len()];
                    for oc in 0..co {
                        for ot in 0..to {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let g = grad[((oc * to + ot) * ho + oy) * wo + ox];
                                    if g == S::zero() {
                                        continue;
                                    }
                                    for ic in 0..ci {
                                        for q in 0..kt {
                                            let tt = (ot + q) as isize - pt as isize;
                                            if tt < 0 || tt >= t as isize {
                                                continue;
                                            }
                                            for u in 0..kh {
                                                let y = (oy + u) as isize - ph as isize;
                                                if y < 0 || y >= h as isize {
                                                    continue;
                                                }
                                                for v in 0..kw {
                                                    let x = (ox + v) as isize - pw as isize;
                                                    if x < 0 || x >= w as isize {
                                                        continue;
                                                    }
                                                    let ii = ((ic * t + tt as usize) * h
                                                        + y as usize)
                                                        * w
                                                        + x as usize;
                                                    let ki = (((oc * ci + ic) * kt + q) * kh + u)
                                                        * kw
                                                        + v;
                                                    if need_i {
                                                        di[ii] += g * kdat[ki];
                                                    }
                                                    if need_k {
                                                        dk[ki] += g * idat[ii];
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_i {
                        self.add_grad(input, &di);
                    }
                    if need_k {
                        self.add_grad(kernel, &dk);
                    }
                }
                Op::GatherRows { a, rows } => {
                    let c = self.nodes[a.0].value.shape()[1];
                    let mut da = vec![S::zero(); self.nodes[a.0].value.numel()];
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for j in 0..c {
                            da[src_r * c + j] += grad[out_r * c + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::Pick { a, index } => {
                    let mut da = vec![S::zero(); self.nodes[a.0].value.numel()];
                    da[index] = grad[0];
                    self.add_grad(a, &da);
                }
                Op::Concat { parts, axis } => {
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[axis];
                    let mut offset = 0usize;
                    for &p in &parts {
                        let k = self.nodes[p.0].value.shape()[axis];
                        if self.needs(p) {
                            let mut dp = vec![S::zero(); self.nodes[p.0].value.numel()];
                            for o in 0..outer {
                                let src_start = (o * total + offset) * inner;
                                dp[o * k * inner..(o + 1) * k * inner]
                                    .copy_from_slice(&grad[src_start..src_start + k * inner]);
                            }
                            self.add_grad(p, &dp);
                        }
                        offset += k;
                    }
                }
                Op::Reshape { a } => {
                    self.add_grad(a, &grad);
                }
                Op::SliceCols { a, start, len } => {
                    let s = self.nodes[a.0].value.shape().to_vec();
                    let (r, c) = (s[0], s[1]);
                    let mut da = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..len {
                            da[i * c + start + j] = grad[i * len + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
                Op::CrossEntropy { logits, targets } => {
                    let s = self.nodes[logits.0].value.shape().to_vec();
                    let (b, k) = (s[0], s[1]);
                    let src = self.nodes[logits.0].value.data();
                    let gscale = grad[0] / S::of_f64(b as f64);
                    let mut dl = vec![S::zero(); b * k];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &src[r * k..(r + 1) * k];
                        let maxv = row
                            .iter()
                            .copied()
                            .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
                        let denom: S = row.iter().map(|&x| (x - maxv).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - maxv).exp() / denom;
                            let onehot = if j == t { S::one() } else { S::zero() };
                            dl[r * k + j] = gscale * (p - onehot);
                        }
                    }
                    self.add_grad(logits, &dl);
                }
            }
        }
        Ok(())
    }
}

/// (outer, axis extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

enum ReduceMode {
    Mean,
    Sum,
    Max,
}

fn gelu_value<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of_f64(0.044715);
    let half = S::of_f64(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of_f64(0.044715);
    let half = S::of_f64(0.5);
    let three = S::of_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    let dinner = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * sech2 * dinner
}

/// C += A(m x k) * B(k x n)
fn mm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A(m x n) * B(k x n)^T, i.e. C[i,p] = sum_j A[i,j] B[p,j]
fn mm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            crow[p] += acc;
        }
    }
}

/// C += A(m x k)^T * B(m x n), i.e. C[p,j] = sum_i A[i,p] B[i,j]
fn mm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central finite differences of a scalar-valued graph builder.
    /// Rebuilds the graph per probe, mirroring define-by-run usage.
    fn numeric_grad(
        build: &dyn Fn(&mut Graph<f64>, &[Vec<f64>]) -> (Var, Vec<Var>),
        params: &[Vec<f64>],
        h: f64,
    ) -> Vec<Vec<f64>> {
        let eval = |data: &[Vec<f64>]| -> f64 {
            let mut g = Graph::new();
            let (loss, _) = build(&mut g, data);
            g.value(loss).item().unwrap()
        };
        params
            .iter()
            .enumerate()
            .map(|(p, vals)| {
                (0..vals.len())
                    .map(|i| {
                        let mut plus = params.to_vec();
                        plus[p][i] += h;
                        let mut minus = params.to_vec();
                        minus[p][i] -= h;
                        (eval(&plus) - eval(&minus)) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    fn check_grads(
        build: &dyn Fn(&mut Graph<f64>, &[Vec<f64>]) -> (Var, Vec<Var>),
        params: &[Vec<f64>],
        tol: f64,
    ) {
        let mut g = Graph::new();
        let (loss, vars) = build(&mut g, params);
        g.backward(loss).unwrap();
        let numeric = numeric_grad(build, params, 1e-5);
        for (i, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).expect("missing grad");
            for (j, (&a, &n)) in analytic.iter().zip(&numeric[i]).enumerate() {
                let denom = n.abs().max(a.abs()).max(1.0);
                assert!(
                    (a - n).abs() / denom <= tol,
                    "param {i} entry {j}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    // naive triple-loop product, independent of the graph implementation
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::eye(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let oracle = matmul_oracle(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(g.value(c).data(), &oracle[..]);
    }

    #[test]
    fn matmul_zero_factor() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(t(&[3, 4], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let c = g.matmul(z, b).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(c), &[2, 4]);
    }

    #[test]
    fn matmul_rejects_bad_inner() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 3], &(1..=9).map(|v| v as f64).collect::<Vec<_>>()));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_constant_interior() {
        // all-ones 3x3 kernel over constant c: every interior output is 9c
        let c = 2.5f64;
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 5, 5], c));
        let k = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        for &v in g.value(y).data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        let mut rng = crate::rng::Rng::new(42);
        let input: Vec<f64> = (0..16).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let kernel: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4, 4], &input));
        let k = g.constant(t(&[1, 1, 2, 2], &kernel));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        // direct sliding-window evaluation
        for oy in 0..3 {
            for ox in 0..3 {
                let mut want = 0.0;
                for u in 0..2 {
                    for v in 0..2 {
                        want += input[(oy + u) * 4 + ox + v] * kernel[u * 2 + v];
                    }
                }
                let got = g.value(y).data()[oy * 3 + ox];
                assert!((got - want).abs() < 1e-12, "at ({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_oversize_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 2]));
        let k = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 1, 0), Err(Error::Dim(_))));
    }

    #[test]
    fn conv3d_temporal_delta_is_identity() {
        // kernel [0,1,0] on the time axis, 1x1 spatial: output == input
        let mut rng = crate::rng::Rng::new(7);
        let input: Vec<f64> = (0..(3 * 2 * 2)).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 2, 2], &input));
        let k = g.constant(t(&[1, 1, 3, 1, 1], &[0.0, 1.0, 0.0]));
        let y = g.conv3d(x, k, [1, 0, 0]).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 2, 2]);
        for (a, b) in g.value(y).data().iter().zip(&input) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_constant_interior() {
        let c = 1.5f64;
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 5, 5, 5], c));
        let k = g.constant(Tensor::full(vec![1, 1, 3, 3, 3], 1.0));
        let y = g.conv3d(x, k, [0, 0, 0]).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 27.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_matches_brute_force_oracle() {
        let mut rng = crate::rng::Rng::new(11);
        let (t_ext, h, w) = (3, 4, 4);
        let input: Vec<f64> = (0..t_ext * h * w).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let kernel: Vec<f64> = (0..2 * 2 * 2).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[1, t_ext, h, w], &input));
        let k = g.constant(t(&[1, 1, 2, 2, 2], &kernel));
        let y = g.conv3d(x, k, [0, 0, 0]).unwrap();
        // six explicit loops
        for ot in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut want = 0.0;
                    for q in 0..2 {
                        for u in 0..2 {
                            for v in 0..2 {
                                want += input[((ot + q) * h + oy + u) * w + ox + v]
                                    * kernel[(q * 2 + u) * 2 + v];
                            }
                        }
                    }
                    let got = g.value(y).data()[(ot * 3 + oy) * 3 + ox];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 2.0f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        let got = g.value(y).data();
        assert!((got[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((got[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..6).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
            let shift = rng.uniform_in(-100.0, 100.0);
            let shifted: Vec<f64> = vals.iter().map(|&v| v + shift).collect();
            let mut g = Graph::new();
            let a = g.constant(t(&[2, 3], &vals));
            let b = g.constant(t(&[2, 3], &shifted));
            let sa = g.softmax(a, 1).unwrap();
            let sb = g.softmax(b, 1).unwrap();
            for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
                assert!((x - y).abs() < 1e-12);
            }
            for row in 0..2 {
                let sum: f64 = g.value(sa).data()[row * 3..(row + 1) * 3].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_shift_only() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::full(vec![1, 4], 3.7));
        let gamma = g.constant(Tensor::full(vec![4], 1.0));
        let beta = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9, "zero-variance row should normalize to ~0, got {v}");
        }
    }

    #[test]
    fn mean_reduce_simple() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = g.mean_axis(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[0.5; 6]), true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_shift() {
        // loss = (theta - 3)^2 at theta = 5 -> dloss/dtheta = 4
        let mut g = Graph::new();
        let theta = g.leaf(t(&[1], &[5.0]), true);
        let shifted = g.add_scalar(theta, -3.0).unwrap();
        let sq = g.mul(shifted, shifted).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(theta).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_reentry_is_contract_error() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[1.0]), true);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_rows_gradient_scatters_to_source_row() {
        let build = |g: &mut Graph<f64>, data: &[Vec<f64>]| {
            let table = g.leaf(t(&[5, 3], &data[0]), true);
            let picked = g.gather_rows(table, &[2]).unwrap();
            let loss = g.sum_all(picked).unwrap();
            (loss, vec![table])
        };
        let params = vec![(0..15).map(|v| v as f64 * 0.1).collect::<Vec<_>>()];
        check_grads(&build, &params, 1e-6);
        // and the grad touches only row 2
        let mut g = Graph::new();
        let (loss, vars) = build(&mut g, &params);
        g.backward(loss).unwrap();
        let grad = g.grad(vars[0]).unwrap();
        for (i, &v) in grad.iter().enumerate() {
            let row = i / 3;
            assert_eq!(v, if row == 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn unary_op_gradients_match_finite_differences() {
        let params = vec![vec![-1.4, -0.3, 0.2, 0.9, 2.1]];
        for name in ["relu", "gelu", "tanh", "exp", "ln"] {
            let build = move |g: &mut Graph<f64>, data: &[Vec<f64>]| {
                let x = g.leaf(t(&[5], &data[0]), true);
                let y = match name {
                    "relu" => g.relu(x).unwrap(),
                    "gelu" => g.gelu(x).unwrap(),
                    "tanh" => g.tanh(x).unwrap(),
                    "exp" => g.exp(x).unwrap(),
                    _ => {
                        let e = g.exp(x).unwrap(); // keep ln's domain positive
                        g.ln_clamped(e, 1e-12).unwrap()
                    }
                };
                let sq = g.mul(y, y).unwrap();
                let loss = g.sum_all(sq).unwrap();
                (loss, vec![x])
            };
            check_grads(&build, &params, 1e-4);
        }
    }

    #[test]
    fn broadcast_binary_gradients_match_finite_differences() {
        let params = vec![
            vec![0.3, -0.8, 1.2, 0.5, -0.1, 0.7],
            vec![1.3, -0.4, 0.9],
        ];
        for opname in ["add", "mul", "div"] {
            let build = move |g: &mut Graph<f64>, data: &[Vec<f64>]| {
                let a = g.leaf(t(&[2, 3], &data[0]), true);
                let b = g.leaf(t(&[3], &data[1]), true);
                let y = match opname {
                    "add" => g.add(a, b).unwrap(),
                    "mul" => g.mul(a, b).unwrap(),
                    _ => g.div(a, b).unwrap(),
                };
                let sq = g.mul(y, y).unwrap();
                let loss = g.mean_all(sq).unwrap();
                (loss, vec![a, b])
            };
            check_grads(&build, &params, 1e-4);
        }
    }

    #[test]
    fn softmax_layernorm_reduction_gradients() {
        let params = vec![
            vec![0.2, -1.0, 0.5, 1.5, 0.1, -0.6],
            vec![1.1, 0.9, 1.05],
            vec![0.0, 0.1, -0.1],
        ];
        let build = |g: &mut Graph<f64>, data: &[Vec<f64>]| {
            let x = g.leaf(t(&[2, 3], &data[0]), true);
            let gamma = g.leaf(t(&[3], &data[1]), true);
            let beta = g.leaf(t(&[3], &data[2]), true);
            let ln = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            let sm = g.softmax(ln, 1).unwrap();
            let picked = g.gather_rows(sm, &[0, 1]).unwrap();
            let m = g.mean_axis(picked, 1).unwrap();
            let s = g.mul(m, m).unwrap();
            let loss = g.sum_all(s).unwrap();
            (loss, vec![x, gamma, beta])
        };
        check_grads(&build, &params, 1e-4);
    }

    #[test]
    fn structural_op_gradients() {
        let params = vec![
            vec![0.4, -0.2, 0.8, 1.1, -0.9, 0.3],
            vec![0.7, 0.2],
        ];
        let build = |g: &mut Graph<f64>, data: &[Vec<f64>]| {
            let a = g.leaf(t(&[3, 2], &data[0]), true);
            let b = g.leaf(t(&[1, 2], &data[1]), true);
            let joined = g.concat(&[a, b], 0).unwrap();
            let tr = g.transpose(joined).unwrap(); // [2,4]
            let sliced = g.slice_cols(tr, 1, 2).unwrap(); // [2,2]
            let flat = g.reshape(sliced, vec![4]).unwrap();
            let one = g.pick(flat, 2).unwrap();
            let sq = g.mul(one, one).unwrap();
            let rest = g.sum_all(flat).unwrap();
            let both = g.add(sq, rest).unwrap();
            let loss = g.sum_all(both).unwrap();
            (loss, vec![a, b])
        };
        check_grads(&build, &params, 1e-4);
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = crate::rng::Rng::new(9);
        let params = vec![
            (0..(2 * 4 * 4)).map(|_| rng.uniform_in(-1.0, 1.0)).collect::<Vec<_>>(),
            (0..(2 * 2 * 3 * 3)).map(|_| rng.uniform_in(-0.5, 0.5)).collect::<Vec<_>>(),
        ];
        let build = |g: &mut Graph<f64>, data: &[Vec<f64>]| {
            let x = g.leaf(t(&[2, 4, 4], &data[0]), true);
            let k = g.leaf(t(&[2, 2, 3, 3], &data[1]), true);
            let y = g.conv2d(x, k, 1, 1).unwrap(); // [2,4,4]
            let p = g.max_pool2(y).unwrap(); // [2,2,2]
            let r = g.relu(p).unwrap();
            let loss = g.mean_all(r).unwrap();
            (loss, vec![x, k])
        };
        check_grads(&build, &params, 1e-4);
    }

    #[test]
    fn conv3d_gradients() {
        let mut rng = crate::rng::Rng::new(13);
        let params = vec![
            (0..(1 * 3 * 4 * 4)).map(|_| rng.uniform_in(-1.0, 1.0)).collect::<Vec<_>>(),
            (0..(1 * 1 * 3 * 3 * 3)).map(|_| rng.uniform_in(-0.5, 0.5)).collect::<Vec<_>>(),
        ];
        let build = |g: &mut Graph<f64>, data: &[Vec<f64>]| {
            let x = g.leaf(t(&[1, 3, 4, 4], &data[0]), true);
            let k = g.leaf(t(&[1, 1, 3, 3, 3], &data[1]), true);
            let y = g.conv3d(x, k, [1, 1, 1]).unwrap();
            let m = g.mean_all(y).unwrap();
            let sq = g.mul(m, m).unwrap();
            let loss = g.sum_all(sq).unwrap();
            (loss, vec![x, k])
        };
        check_grads(&build, &params, 1e-4);
    }

    #[test]
    fn max_axis_routes_gradient_to_first_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3, 2], &[1.0, 5.0, 7.0, 5.0, 7.0, 2.0]), true);
        let m = g.max_axis(x, 0).unwrap(); // per column max: [7 (row1), 5 (rows 0 and 1 tie)]
        let loss = g.sum_all(m).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        // column 0: max 7 at row 1; column 1: tie of 5 at rows 0,1 -> first (row 0)
        assert_eq!(grad, &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let logits = [2.0, 1.0, 0.1, 0.1, 2.0, 1.0];
        let mut g = Graph::new();
        let l = g.leaf(t(&[2, 3], &logits), true);
        let loss = g.cross_entropy(l, &[0, 1]).unwrap();
        let lse0 = (2.0f64.exp() + 1.0f64.exp() + 0.1f64.exp()).ln();
        let lse1 = (0.1f64.exp() + 2.0f64.exp() + 1.0f64.exp()).ln();
        let want = ((lse0 - 2.0) + (lse1 - 2.0)) / 2.0;
        assert!((g.value(loss).item().unwrap() - want).abs() < 1e-12);

        let build = |g: &mut Graph<f64>, data: &[Vec<f64>]| {
            let l = g.leaf(t(&[2, 3], &data[0]), true);
            let loss = g.cross_entropy(l, &[0, 1]).unwrap();
            (loss, vec![l])
        };
        check_grads(&build, &[logits.to_vec()], 1e-4);
    }

    #[test]
    fn frozen_leaf_gets_no_grad_and_blocks_nothing_else() {
        // frozen and trainable leaves in one graph: the frozen one stays
        // grad-free, the trainable one matches a run where the frozen values
        // are baked in as constants.
        let wf = [0.3, -0.7];
        let wt = [1.2, 0.4];
        let run = |freeze: bool| -> (Option<Vec<f64>>, Vec<f64>) {
            let mut g = Graph::new();
            let frozen = g.leaf(t(&[1, 2], &wf), !freeze);
            let trainable = g.leaf(t(&[2, 1], &wt), true);
            let y = g.matmul(frozen, trainable).unwrap();
            let sq = g.mul(y, y).unwrap();
            let loss = g.sum_all(sq).unwrap();
            g.backward(loss).unwrap();
            (
                g.grad(frozen).map(|s| s.to_vec()),
                g.grad(trainable).unwrap().to_vec(),
            )
        };
        let (gf_frozen, gt_frozen) = run(true);
        let (gf_free, gt_free) = run(false);
        assert!(gf_frozen.is_none(), "frozen leaf must receive no grad");
        assert!(gf_free.is_some());
        assert_eq!(gt_frozen, gt_free, "freezing must not change other grads");
    }

    #[test]
    fn nonfinite_forward_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1e308]));
        let doubled = g.add(x, x);
        if cfg!(debug_assertions) {
            assert!(matches!(doubled, Err(Error::NonFinite(_))));
        }
    }

    #[test]
    fn allocation_accounting_tracks_peak() {
        let mut g = Graph::<f64>::new();
        assert_eq!(g.peak_bytes(), 0);
        let x = g.leaf(Tensor::zeros(vec![100]), true);
        let y = g.relu(x).unwrap();
        let base = 200 * std::mem::size_of::<f64>();
        assert_eq!(g.peak_bytes(), base);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        // backward adds grads for x, y and the loss
        assert!(g.peak_bytes() >= base + 201 * std::mem::size_of::<f64>());
        assert!(g.live_bytes() <= g.peak_bytes());
    }
}
