use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Lower bound applied to probabilities before taking their log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One `-weight * ln(p[row, class])` term of a negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllPick {
    pub row: usize,
    pub class: usize,
    pub weight: f64,
}

/// One `weight * smooth_l1(pred[row, col..col+4] - target)` term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothL1Pick {
    pub row: usize,
    pub col: usize,
    pub target: [f64; 4],
    pub weight: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
    },
    AvgPool {
        input: Var,
        size: usize,
    },
    Relu(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    AddScaled {
        a: Var,
        wa: f64,
        b: Var,
        wb: f64,
    },
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
    ChannelsToRows {
        input: Var,
        group: usize,
    },
    Gather {
        input: Var,
        index: Vec<Option<usize>>,
    },
    Nll {
        input: Var,
        picks: Vec<NllPick>,
    },
    SmoothL1 {
        input: Var,
        picks: Vec<SmoothL1Pick>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A dynamically built computation graph. Nodes are appended in evaluation
/// order, so the node list is already a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Accumulated gradient of `v`, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects rank-4 input and kernel, got input {xs:?} and kernel {ks:?}"
            )));
        }
        if ks[1] != xs[1] {
            return Err(Error::Shape(format!(
                "conv2d kernel {ks:?} has {} input channels but input {xs:?} has {}",
                ks[1], xs[1]
            )));
        }
        if bs != [ks[0]] {
            return Err(Error::Shape(format!(
                "conv2d bias {bs:?} does not match kernel {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (h, w) = (xs[2], xs[3]);
        if ks[2] > h + 2 * padding || ks[3] > w + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d kernel {ks:?} larger than padded input {xs:?} (padding {padding})"
            )));
        }
        let geom = ConvGeom {
            c: xs[1],
            h,
            w,
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            out_h: (h + 2 * padding - ks[2]) / stride + 1,
            out_w: (w + 2 * padding - ks[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            xs[0],
            ks[0],
            &geom,
        );
        let value = Tensor::new([xs[0], ks[0], geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch: xs[0],
                out_channels: ks[0],
            },
            rg,
        ))
    }

    pub fn avgpool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("avgpool2d expects rank 4, got {xs:?}")));
        }
        if size == 0 || !xs[2].is_multiple_of(size) || !xs[3].is_multiple_of(size) {
            return Err(Error::Shape(format!(
                "avgpool2d size {size} does not divide spatial dims of {xs:?}"
            )));
        }
        let out = kernels::avgpool_forward(
            self.value(input).data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
            size,
        );
        let value = Tensor::new([xs[0], xs[1], xs[2] / size, xs[3] / size], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::AvgPool { input, size }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i].max(0.0));
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    /// `input[N,D] · weight[D,M] + bias[M]`
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::Shape(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {bs:?} do not compose"
            )));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let bias_v = self.value(bias).data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bias_v);
        }
        kernels::matmul_acc(
            self.value(input).data(),
            self.value(weight).data(),
            &mut out,
            n,
            d,
            m,
        );
        let value = Tensor::new([n, m], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let k = *x.shape().last().unwrap();
        if k < 2 {
            return Err(Error::Shape(format!(
                "softmax needs at least 2 classes on the last axis, got {:?}",
                x.shape()
            )));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    /// `wa·a + wb·b`, elementwise.
    pub fn add_scaled(&mut self, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add_scaled: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let value = Tensor::from_fn(av.shape().to_vec(), |i| {
            wa * av.data()[i] + wb * bv.data()[i]
        });
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::AddScaled { a, wa, b, wb }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mul: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let value = Tensor::from_fn(av.shape().to_vec(), |i| av.data()[i] * bv.data()[i]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).data().iter().sum());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sum(input), rg)
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Rearranges a dense head output `[N, A·g, H, W]` into one row per
    /// anchor, `[N·H·W·A, g]`, ordered by image, then cell (row-major), then
    /// anchor slot.
    pub fn channels_to_rows(&mut self, input: Var, group: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || group == 0 || !xs[1].is_multiple_of(group) {
            return Err(Error::Shape(format!(
                "channels_to_rows: {xs:?} is not [N, A*{group}, H, W]"
            )));
        }
        let (n, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let a = ch / group;
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for cell in 0..h * w {
                for slot in 0..a {
                    let row = (b * h * w + cell) * a + slot;
                    for j in 0..group {
                        out[row * group + j] = x[(b * ch + slot * group + j) * h * w + cell];
                    }
                }
            }
        }
        let value = Tensor::new([n * h * w * a, group], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::ChannelsToRows { input, group }, rg))
    }

    /// `out[i] = input[index[i]]`, or 0 where the index is `None`.
    pub fn gather(
        &mut self,
        input: Var,
        index: Vec<Option<usize>>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let x = self.value(input).data();
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= x.len()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for {} values",
                x.len()
            )));
        }
        let data = index.iter().map(|i| i.map_or(0.0, |i| x[i])).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Gather { input, index }, rg))
    }

    /// Weighted negative log-likelihood over picked entries of a
    /// probability matrix `[R, K]`. Probabilities are floored at
    /// [`PROB_FLOOR`]; floored entries pass no gradient.
    pub fn nll(&mut self, probs: Var, picks: Vec<NllPick>) -> Result<Var> {
        let p = self.value(probs);
        if p.rank() != 2 {
            return Err(Error::Shape(format!("nll expects [R, K], got {:?}", p.shape())));
        }
        let k = p.shape()[1];
        let mut total = 0.0;
        for pick in &picks {
            if pick.row >= p.shape()[0] || pick.class >= k {
                return Err(Error::Shape(format!(
                    "nll pick ({}, {}) outside {:?}",
                    pick.row,
                    pick.class,
                    p.shape()
                )));
            }
            total -= pick.weight * p.data()[pick.row * k + pick.class].max(PROB_FLOOR).ln();
        }
        let rg = self.any_grad(&[probs]);
        Ok(self.push(Tensor::scalar(total), Op::Nll { input: probs, picks }, rg))
    }

    /// Weighted smooth-L1 over picked 4-wide slices of a prediction matrix.
    pub fn smooth_l1(&mut self, preds: Var, picks: Vec<SmoothL1Pick>) -> Result<Var> {
        let p = self.value(preds);
        if p.rank() != 2 {
            return Err(Error::Shape(format!(
                "smooth_l1 expects [R, M], got {:?}",
                p.shape()
            )));
        }
        let m = p.shape()[1];
        let mut total = 0.0;
        for pick in &picks {
            if pick.row >= p.shape()[0] || pick.col + 4 > m {
                return Err(Error::Shape(format!(
                    "smooth_l1 pick ({}, {}..{}) outside {:?}",
                    pick.row,
                    pick.col,
                    pick.col + 4,
                    p.shape()
                )));
            }
            let base = pick.row * m + pick.col;
            for j in 0..4 {
                total += pick.weight * smooth_l1_scalar(p.data()[base + j] - pick.target[j]);
            }
        }
        let rg = self.any_grad(&[preds]);
        Ok(self.push(Tensor::scalar(total), Op::SmoothL1 { input: preds, picks }, rg))
    }

    /// Reverse pass from a scalar root. Gradients accumulate into every
    /// reached node that requires them; call [`Tape::zero_grads`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match node.grad.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {
                if self.nodes[$v.0].requires_grad {
                    let n = self.nodes[$v.0].value.numel();
                    let $buf: &mut Vec<f64> = grads[$v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body
                }
            };
        }
        let value_of = |v: Var| self.nodes[v.0].value.data();

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                out_channels,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let mut dx = self.nodes[input.0]
                    .requires_grad
                    .then(|| vec![0.0; self.nodes[input.0].value.numel()]);
                let mut dw = self.nodes[kernel.0]
                    .requires_grad
                    .then(|| vec![0.0; self.nodes[kernel.0].value.numel()]);
                let mut db = self.nodes[bias.0]
                    .requires_grad
                    .then(|| vec![0.0; self.nodes[bias.0].value.numel()]);
                kernels::conv2d_backward(
                    value_of(input),
                    value_of(kernel),
                    g,
                    *batch,
                    *out_channels,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(input, dx), (kernel, dw), (bias, db)] {
                    if let Some(d) = d {
                        acc!(v, |buf| add_into(buf, &d));
                    }
                }
            }
            Op::AvgPool { input, size } => {
                let s = self.nodes[input.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                acc!(*input, |buf| kernels::avgpool_backward_acc(
                    g, buf, planes, h, w, *size
                ));
            }
            Op::Relu(input) => {
                let x = value_of(*input);
                acc!(*input, |buf| {
                    for ((b, gv), xv) in buf.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *b += gv;
                        }
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.nodes[input.0].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let m = self.nodes[weight.0].value.shape()[1];
                acc!(*input, |buf| kernels::matmul_bt_acc(
                    g,
                    value_of(*weight),
                    buf,
                    n,
                    m,
                    d
                ));
                acc!(*weight, |buf| kernels::matmul_at_acc(
                    value_of(*input),
                    g,
                    buf,
                    n,
                    d,
                    m
                ));
                acc!(*bias, |buf| {
                    for row in g.chunks(m) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Softmax(input) => {
                let y = self.nodes[idx].value.data();
                let k = *self.nodes[idx].value.shape().last().unwrap();
                acc!(*input, |buf| {
                    for ((yr, gr), br) in y.chunks(k).zip(g.chunks(k)).zip(buf.chunks_mut(k)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::AddScaled { a, wa, b, wb } => {
                acc!(*a, |buf| {
                    for (bv, gv) in buf.iter_mut().zip(g) {
                        *bv += wa * gv;
                    }
                });
                acc!(*b, |buf| {
                    for (bv, gv) in buf.iter_mut().zip(g) {
                        *bv += wb * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (value_of(*a), value_of(*b));
                acc!(*a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                acc!(*b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Sum(input) => {
                acc!(*input, |buf| {
                    for bv in buf.iter_mut() {
                        *bv += g[0];
                    }
                });
            }
            Op::Reshape(input) => {
                acc!(*input, |buf| add_into(buf, g));
            }
            Op::ChannelsToRows { input, group } => {
                let s = self.nodes[input.0].value.shape();
                let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
                let a = ch / group;
                acc!(*input, |buf| {
                    for b in 0..n {
                        for cell in 0..h * w {
                            for slot in 0..a {
                                let row = (b * h * w + cell) * a + slot;
                                for j in 0..*group {
                                    buf[(b * ch + slot * group + j) * h * w + cell] +=
                                        g[row * group + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Gather { input, index } => {
                acc!(*input, |buf| {
                    for (gv, i) in g.iter().zip(index) {
                        if let Some(i) = i {
                            buf[*i] += gv;
                        }
                    }
                });
            }
            Op::Nll { input, picks } => {
                let p = &self.nodes[input.0].value;
                let k = p.shape()[1];
                acc!(*input, |buf| {
                    for pick in picks {
                        let at = pick.row * k + pick.class;
                        let pv = p.data()[at];
                        if pv > PROB_FLOOR {
                            buf[at] -= g[0] * pick.weight / pv;
                        }
                    }
                });
            }
            Op::SmoothL1 { input, picks } => {
                let p = &self.nodes[input.0].value;
                let m = p.shape()[1];
                acc!(*input, |buf| {
                    for pick in picks {
                        let base = pick.row * m + pick.col;
                        for j in 0..4 {
                            let r = p.data()[base + j] - pick.target[j];
                            buf[base + j] += g[0] * pick.weight * smooth_l1_grad(r);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
