use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    /// Exponential-linear unit with α = 1.
    ExpLin,
    Exp,
    Neg,
    Square,
    /// Smooth-L1 with β = 1.
    SmoothL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse H×W, keeping channels: `[C,H,W] -> [C,1,1]`.
    Spatial,
    /// Collapse channels, keeping the plane: `[C,H,W] -> [1,H,W]`.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Mean,
    Max,
}

/// How the smaller operand of a binary op maps onto the larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Small operand is `[C,1,1]`; `plane` = H·W.
    PerChannel { plane: usize },
    /// Small operand is `[1,H,W]`; `plane` = H·W.
    PerCell { plane: usize },
}

impl Bcast {
    #[inline]
    fn small_index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::PerChannel { plane } => i / plane,
            Bcast::PerCell { plane } => i % plane,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: usize, kernel: usize, bias: usize, geom: ConvGeometry },
    Reduce { input: usize, axis: Axis, mode: ReduceMode, argmax: Vec<usize> },
    Unary { input: usize, kind: Unary },
    Scale { input: usize, factor: f64 },
    Binary { a: usize, b: usize, kind: Binary, bcast: Bcast, a_is_big: bool },
    Matmul { a: usize, b: usize, m: usize, n: usize, p: usize },
    Concat { inputs: Vec<usize> },
    Slice { input: usize, start: usize, len: usize },
    PermuteChannels { input: usize, perm: Vec<usize> },
    SoftmaxChannels { input: usize },
    Sum { input: usize },
    Mean { input: usize },
    Reshape { input: usize },
    FocalBce { input: usize, dloss: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Some trainable leaf is reachable from this node.
    needs_grad: bool,
    trainable: bool,
}

/// Reverse-mode tape. Values are recorded in execution order; [`Tape::backward`]
/// replays them in reverse, visiting each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Number of gradient buffers held.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records a constant or frozen parameter: gradient flows through it but
    /// it never receives a gradient buffer.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (x, k, b) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value, &self.nodes[bias.0].value);
        let geom = ConvGeometry::check(x, k, b, padding)?;
        let out = kernels::conv2d(x, k, b, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                geom,
            },
            &[input.0, kernel.0, bias.0],
        ))
    }

    pub fn reduce(&mut self, input: Var, axis: Axis, mode: ReduceMode) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if x.rank() != 3 {
            return Err(Error::Shape {
                op: "reduce",
                dim: "rank",
                expected: 3,
                got: x.rank(),
            });
        }
        let (c, h, w) = x.dims3()?;
        let plane = h * w;
        let d = x.data();
        let (out, argmax) = match axis {
            Axis::Spatial => {
                if plane == 0 {
                    return Err(Error::EmptyAxis);
                }
                let mut out = Vec::with_capacity(c);
                let mut arg = Vec::new();
                for ch in 0..c {
                    let s = &d[ch * plane..(ch + 1) * plane];
                    match mode {
                        ReduceMode::Mean => out.push(s.iter().sum::<f64>() / plane as f64),
                        ReduceMode::Max => {
                            let (i, v) = first_argmax(s);
                            out.push(v);
                            arg.push(ch * plane + i);
                        }
                    }
                }
                (Tensor::new(&[c, 1, 1], out)?, arg)
            }
            Axis::Channel => {
                if c == 0 {
                    return Err(Error::EmptyAxis);
                }
                let mut out = vec![0.0; plane];
                let mut arg = Vec::new();
                match mode {
                    ReduceMode::Mean => {
                        for ch in 0..c {
                            for (o, v) in out.iter_mut().zip(&d[ch * plane..(ch + 1) * plane]) {
                                *o += v;
                            }
                        }
                        out.iter_mut().for_each(|o| *o /= c as f64);
                    }
                    ReduceMode::Max => {
                        arg = vec![0; plane];
                        out.copy_from_slice(&d[..plane]);
                        for ch in 1..c {
                            for i in 0..plane {
                                let v = d[ch * plane + i];
                                // strict: ties keep the earlier channel
                                if v > out[i] {
                                    out[i] = v;
                                    arg[i] = ch;
                                }
                            }
                        }
                        for (i, a) in arg.iter_mut().enumerate() {
                            *a = *a * plane + i;
                        }
                    }
                }
                (Tensor::new(&[1, h, w], out)?, arg)
            }
        };
        Ok(self.push(
            out,
            Op::Reduce {
                input: input.0,
                axis,
                mode,
                argmax,
            },
            &[input.0],
        ))
    }

    pub fn unary(&mut self, input: Var, kind: Unary) -> Var {
        let x = &self.nodes[input.0].value;
        let out = match kind {
            Unary::Sigmoid => x.map(kernels::sigmoid),
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::ExpLin => x.map(|v| if v > 0.0 { v } else { v.exp_m1() }),
            Unary::Exp => x.map(f64::exp),
            Unary::Neg => x.map(|v| -v),
            Unary::Square => x.map(|v| v * v),
            Unary::SmoothL1 => x.map(|v| kernels::smooth_l1(v, 1.0).0),
        };
        self.push(out, Op::Unary { input: input.0, kind }, &[input.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.nodes[input.0].value.map(|v| v * factor);
        self.push(out, Op::Scale { input: input.0, factor }, &[input.0])
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bcast, a_is_big) = if sa == sb {
            (Bcast::Same, true)
        } else {
            match (classify(&sa, &sb), classify(&sb, &sa)) {
                (Some(bc), _) => (bc, true),
                (None, Some(bc)) => (bc, false),
                _ => {
                    return Err(Error::Broadcast {
                        op: "binary",
                        lhs: sa,
                        rhs: sb,
                    })
                }
            }
        };
        let (big, small) = if a_is_big { (a, b) } else { (b, a) };
        let (bv, sv) = (&self.nodes[big.0].value, &self.nodes[small.0].value);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data = bv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = sv.data()[bcast.small_index(i)];
                if a_is_big {
                    f(x, y)
                } else {
                    f(y, x)
                }
            })
            .collect();
        let out = Tensor::new(bv.shape(), data)?;
        Ok(self.push(
            out,
            Op::Binary {
                a: a.0,
                b: b.0,
                kind,
                bcast,
                a_is_big,
            },
            &[a.0, b.0],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    /// `[m,n] x [n,p] -> [m,p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, n) = match av.shape() {
            &[m, n] => (m, n),
            s => return Err(Error::Shape { op: "matmul", dim: "lhs rank", expected: 2, got: s.len() }),
        };
        let (n2, p) = match bv.shape() {
            &[n2, p] => (n2, p),
            s => return Err(Error::Shape { op: "matmul", dim: "rhs rank", expected: 2, got: s.len() }),
        };
        if n != n2 {
            return Err(Error::Shape {
                op: "matmul",
                dim: "inner dimension",
                expected: n,
                got: n2,
            });
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for k in 0..n {
                let x = av.data()[i * n + k];
                for j in 0..p {
                    out[i * p + j] += x * bv.data()[k * p + j];
                }
            }
        }
        let out = Tensor::new(&[m, p], out)?;
        Ok(self.push(out, Op::Matmul { a: a.0, b: b.0, m, n, p }, &[a.0, b.0]))
    }

    /// Concatenates `[C_i,H,W]` tensors along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::EmptyAxis);
        }
        let (_, h, w) = self.value(inputs[0]).dims3()?;
        let mut data = Vec::new();
        let mut c_total = 0;
        for &v in inputs {
            let (c, hh, ww) = self.value(v).dims3()?;
            if hh != h {
                return Err(Error::Shape { op: "concat", dim: "height", expected: h, got: hh });
            }
            if ww != w {
                return Err(Error::Shape { op: "concat", dim: "width", expected: w, got: ww });
            }
            c_total += c;
            data.extend_from_slice(self.value(v).data());
        }
        let out = Tensor::new(&[c_total, h, w], data)?;
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(out, Op::Concat { inputs: idx.clone() }, &idx))
    }

    /// Channels `[start, start+len)` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).channels(start, len)?;
        Ok(self.push(out, Op::Slice { input: input.0, start, len }, &[input.0]))
    }

    /// Output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.dims3()?;
        if perm.len() != c {
            return Err(Error::Shape { op: "permute_channels", dim: "permutation length", expected: c, got: perm.len() });
        }
        let mut seen = vec![false; c];
        for &p in perm {
            if p >= c || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("permute_channels: not a permutation"));
            }
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(c * plane);
        for &p in perm {
            data.extend_from_slice(&x.data()[p * plane..(p + 1) * plane]);
        }
        let out = Tensor::new(&[c, h, w], data)?;
        Ok(self.push(out, Op::PermuteChannels { input: input.0, perm: perm.to_vec() }, &[input.0]))
    }

    /// Softmax over the leading (candidate) axis of `[N,H,W]`, independently per cell.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, h, w) = x.dims3()?;
        if n == 0 {
            return Err(Error::EmptyAxis);
        }
        let plane = h * w;
        let d = x.data();
        let mut out = vec![0.0; n * plane];
        for i in 0..plane {
            let mx = (0..n).map(|c| d[c * plane + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..n {
                let e = (d[c * plane + i] - mx).exp();
                out[c * plane + i] = e;
                z += e;
            }
            for c in 0..n {
                out[c * plane + i] /= z;
            }
        }
        let out = Tensor::new(&[n, h, w], out)?;
        Ok(self.push(out, Op::SoftmaxChannels { input: input.0 }, &[input.0]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input: input.0 }, &[input.0])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::scalar(x.sum() / x.len().max(1) as f64);
        self.push(out, Op::Mean { input: input.0 }, &[input.0])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { input: input.0 }, &[input.0]))
    }

    /// Elementwise focal binary cross-entropy of logits against fixed (soft) targets.
    pub fn focal_bce(&mut self, logits: Var, targets: &Tensor, gamma: f64) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(Error::Broadcast {
                op: "focal_bce",
                lhs: x.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let (vals, dloss): (Vec<f64>, Vec<f64>) = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&xi, &ti)| kernels::focal_bce(xi, ti, gamma))
            .unzip();
        let out = Tensor::new(x.shape(), vals)?;
        Ok(self.push(out, Op::FocalBce { input: logits.0, dloss }, &[logits.0]))
    }

    /// Reverse-mode sweep from a scalar `root`. Consumes the tape: a second call
    /// returns [`Error::StaleTape`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.value(root).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                dim: "root element count",
                expected: 1,
                got: self.value(root).len(),
            });
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        // keep buffers only for trainable leaves
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].trainable {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, g: Tensor) {
        if !self.nodes[target].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[target].value.shape());
        match &mut grads[target] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                if self.wants(*input) {
                    let gi = kernels::conv2d_grad_input(g, &self.nodes[*kernel].value, geom);
                    self.accumulate(grads, *input, gi);
                }
                if self.wants(*kernel) {
                    let gk = kernels::conv2d_grad_kernel(g, &self.nodes[*input].value, geom);
                    self.accumulate(grads, *kernel, gk);
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, kernels::conv2d_grad_bias(g, geom));
                }
            }
            Op::Reduce { input, axis, mode, argmax } => {
                let x = &self.nodes[*input].value;
                let (c, h, w) = x.dims3()?;
                let plane = h * w;
                let mut gi = vec![0.0; c * plane];
                match mode {
                    ReduceMode::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            gi[src] += g.data()[o];
                        }
                    }
                    ReduceMode::Mean => match axis {
                        Axis::Spatial => {
                            for ch in 0..c {
                                let v = g.data()[ch] / plane as f64;
                                gi[ch * plane..(ch + 1) * plane].fill(v);
                            }
                        }
                        Axis::Channel => {
                            for ch in 0..c {
                                for p in 0..plane {
                                    gi[ch * plane + p] = g.data()[p] / c as f64;
                                }
                            }
                        }
                    },
                }
                self.accumulate(grads, *input, Tensor::new(x.shape(), gi)?);
            }
            Op::Unary { input, kind } => {
                let x = &self.nodes[*input].value;
                let y = &node.value;
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| {
                        gv * match kind {
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::ExpLin => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    xv.exp()
                                }
                            }
                            Unary::Exp => yv,
                            Unary::Neg => -1.0,
                            Unary::Square => 2.0 * xv,
                            Unary::SmoothL1 => kernels::smooth_l1(xv, 1.0).1,
                        }
                    })
                    .collect();
                self.accumulate(grads, *input, Tensor::new(x.shape(), d)?);
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, *input, g.map(|v| v * factor));
            }
            Op::Binary { a, b, kind, bcast, a_is_big } => {
                let (big, small) = if *a_is_big { (*a, *b) } else { (*b, *a) };
                let (bv, sv) = (&self.nodes[big].value, &self.nodes[small].value);
                // sign applied to the gradient of each operand under subtraction
                let (sign_a, sign_b) = match kind {
                    Binary::Sub => (1.0, -1.0),
                    _ => (1.0, 1.0),
                };
                let (sign_big, sign_small) = if *a_is_big { (sign_a, sign_b) } else { (sign_b, sign_a) };
                if self.wants(big) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gv)| match kind {
                            Binary::Mul => gv * sv.data()[bcast.small_index(k)],
                            _ => sign_big * gv,
                        })
                        .collect();
                    self.accumulate(grads, big, Tensor::new(bv.shape(), d)?);
                }
                if self.wants(small) {
                    let mut d = vec![0.0; sv.len()];
                    for (k, &gv) in g.data().iter().enumerate() {
                        d[bcast.small_index(k)] += match kind {
                            Binary::Mul => gv * bv.data()[k],
                            _ => sign_small * gv,
                        };
                    }
                    self.accumulate(grads, small, Tensor::new(sv.shape(), d)?);
                }
            }
            Op::Matmul { a, b, m, n, p } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.wants(*a) {
                    // dA = G B^T
                    let mut d = vec![0.0; m * n];
                    for i in 0..*m {
                        for k in 0..*n {
                            d[i * n + k] = (0..*p).map(|j| g.data()[i * p + j] * bv.data()[k * p + j]).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(&[*m, *n], d)?);
                }
                if self.wants(*b) {
                    // dB = A^T G
                    let mut d = vec![0.0; n * p];
                    for k in 0..*n {
                        for j in 0..*p {
                            d[k * p + j] = (0..*m).map(|i| av.data()[i * n + k] * g.data()[i * p + j]).sum();
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[*n, *p], d)?);
                }
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.nodes[inp].value.len();
                    if self.wants(inp) {
                        let d = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, inp, Tensor::new(self.nodes[inp].value.shape(), d)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, start, len } => {
                let x = &self.nodes[*input].value;
                let (_, h, w) = x.dims3()?;
                let plane = h * w;
                let mut d = vec![0.0; x.len()];
                d[start * plane..(start + len) * plane].copy_from_slice(g.data());
                self.accumulate(grads, *input, Tensor::new(x.shape(), d)?);
            }
            Op::PermuteChannels { input, perm } => {
                let x = &self.nodes[*input].value;
                let (_, h, w) = x.dims3()?;
                let plane = h * w;
                let mut d = vec![0.0; x.len()];
                for (o, &p) in perm.iter().enumerate() {
                    d[p * plane..(p + 1) * plane].copy_from_slice(&g.data()[o * plane..(o + 1) * plane]);
                }
                self.accumulate(grads, *input, Tensor::new(x.shape(), d)?);
            }
            Op::SoftmaxChannels { input } => {
                let y = &node.value;
                let (n, h, w) = y.dims3()?;
                let plane = h * w;
                let mut d = vec![0.0; y.len()];
                for i in 0..plane {
                    let dot: f64 = (0..n).map(|c| y.data()[c * plane + i] * g.data()[c * plane + i]).sum();
                    for c in 0..n {
                        let k = c * plane + i;
                        d[k] = y.data()[k] * (g.data()[k] - dot);
                    }
                }
                self.accumulate(grads, *input, Tensor::new(y.shape(), d)?);
            }
            Op::Sum { input } => {
                let x = &self.nodes[*input].value;
                self.accumulate(grads, *input, Tensor::full(x.shape(), g.item()));
            }
            Op::Mean { input } => {
                let x = &self.nodes[*input].value;
                self.accumulate(grads, *input, Tensor::full(x.shape(), g.item() / x.len().max(1) as f64));
            }
            Op::Reshape { input } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                self.accumulate(grads, *input, g.clone().reshaped(&shape)?);
            }
            Op::FocalBce { input, dloss } => {
                let d = g.data().iter().zip(dloss).map(|(gv, dl)| gv * dl).collect();
                self.accumulate(grads, *input, Tensor::new(g.shape(), d)?);
            }
        }
        Ok(())
    }
}

/// First index (scan order) of the maximum; ties resolve to the earliest.
fn first_argmax(s: &[f64]) -> (usize, f64) {
    let mut best = (0, s[0]);
    for (i, &v) in s.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Broadcast class of `small` against `big`, if legal.
fn classify(big: &[usize], small: &[usize]) -> Option<Bcast> {
    match (big, small) {
        (&[c, h, w], &[c2, 1, 1]) if c == c2 && h * w > 1 => Some(Bcast::PerChannel { plane: h * w }),
        (&[c, h, w], &[1, h2, w2]) if h == h2 && w == w2 && c > 1 => Some(Bcast::PerCell { plane: h * w }),
        _ => None,
    }
}
