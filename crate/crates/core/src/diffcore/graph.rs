//! Define-then-run expression graphs with reverse-mode differentiation.

use super::params::GradientVector;
use super::real::{Dual, Real};
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Error, Result};

/// Index of a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Param(usize),
    Const(Tensor),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    Reshape(NodeId),
    MulChannel(NodeId, NodeId),
    AddChannel(NodeId, NodeId),
    Conv2d(NodeId, NodeId),
    MeanPool(NodeId, usize),
    Tanh(NodeId),
    Relu(NodeId),
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, temperature: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Records operations in topological order.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    param_shapes: Vec<Vec<usize>>,
}

impl GraphBuilder {
    pub fn new(param_shapes: Vec<Vec<usize>>) -> Self {
        Self { nodes: Vec::new(), param_shapes }
    }

    /// Builder whose parameter shapes mirror `like`.
    pub fn for_params(like: &GradientVector) -> Self {
        Self::new(like.shapes())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn param(&mut self, index: usize) -> Result<NodeId> {
        let shape = self
            .param_shapes
            .get(index)
            .ok_or_else(|| invalid(format!("parameter {index} not declared")))?
            .clone();
        Ok(self.push(Op::Param(index), shape))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(t), shape)
    }

    fn same(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), s)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        match (self.shape(a), self.shape(b)) {
            ([n, k], [k2, m]) if k == k2 => {
                let s = vec![*n, *m];
                Ok(self.push(Op::MatMul(a, b), s))
            }
            (sa, sb) => Err(shape_err(format!("matmul: {sa:?} x {sb:?}"))),
        }
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = self.shape(a).iter().product();
        if shape.iter().product::<usize>() != n || shape.contains(&0) {
            return Err(shape_err(format!("reshape {:?} -> {shape:?}", self.shape(a))));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    fn channel_check(&self, x: NodeId, c: NodeId, what: &str) -> Result<Vec<usize>> {
        let (sx, sc) = (self.shape(x), self.shape(c));
        if sx.len() < 2 || sc.len() != 1 || sx[1] != sc[0] {
            return Err(shape_err(format!("{what}: {sx:?} with per-channel {sc:?}")));
        }
        Ok(sx.to_vec())
    }

    /// `x[:, c, ...] * s[c]`
    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let shape = self.channel_check(x, s, "mul_channel")?;
        Ok(self.push(Op::MulChannel(x, s), shape))
    }

    /// `x[:, c, ...] + b[c]`
    pub fn add_channel(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.channel_check(x, b, "add_channel")?;
        Ok(self.push(Op::AddChannel(x, b), shape))
    }

    /// Stride-1 convolution with same padding; `w` is `[out, in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        match (self.shape(x), self.shape(w)) {
            ([n, ci, h, wd], [co, ci2, k, k2]) if ci == ci2 && k == k2 && k % 2 == 1 => {
                let s = vec![*n, *co, *h, *wd];
                Ok(self.push(Op::Conv2d(x, w), s))
            }
            (sx, sw) => Err(shape_err(format!("conv2d: input {sx:?}, kernel {sw:?}"))),
        }
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn mean_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        match self.shape(x) {
            [n, c, h, w] if k > 0 && h % k == 0 && w % k == 0 => {
                let s = vec![*n, *c, h / k, w / k];
                Ok(self.push(Op::MeanPool(x, k), s))
            }
            s => Err(shape_err(format!("mean_pool {k}: {s:?}"))),
        }
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Tanh(x), s)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::Relu(x), s)
    }

    /// Mean cross-entropy of `softmax(logits / temperature)` against `labels`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize], temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {temperature}")));
        }
        match self.shape(logits) {
            [n, c] if *n == labels.len() && labels.iter().all(|&y| y < *c) => {}
            s => {
                return Err(shape_err(format!("softmax_xent: logits {s:?}, {} labels", labels.len())))
            }
        }
        Ok(self.push(Op::SoftmaxXent { logits, labels: labels.to_vec(), temperature }, vec![1]))
    }

    pub fn finish(self, output: NodeId) -> Graph {
        Graph { nodes: self.nodes, param_shapes: self.param_shapes, output }
    }
}

/// A recorded computation from parameter leaves to an output node.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_shapes: Vec<Vec<usize>>,
    output: NodeId,
}

impl Graph {
    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.param_shapes
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_params(&self, params: &GradientVector) -> Result<()> {
        let shapes = params.shapes();
        if shapes != self.param_shapes {
            return Err(shape_err(format!("graph expects {:?}, got {shapes:?}", self.param_shapes)));
        }
        Ok(())
    }

    fn check_scalar(&self) -> Result<()> {
        let s = self.output_shape();
        if s.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(s.to_vec()));
        }
        Ok(())
    }

    /// Output tensor for the given parameters.
    pub fn forward(&self, params: &GradientVector) -> Result<Tensor> {
        self.check_params(params)?;
        let leaves: Vec<Tensor<f64>> = params.tensors().to_vec();
        let values = self.run_forward(&leaves);
        Ok(values[self.output.0].clone())
    }

    /// Scalar output value.
    pub fn evaluate(&self, params: &GradientVector) -> Result<f64> {
        self.check_scalar()?;
        Ok(self.forward(params)?.data()[0])
    }

    /// Output value and gradient with respect to every parameter.
    pub fn value_and_grad(&self, params: &GradientVector) -> Result<(f64, GradientVector)> {
        self.check_scalar()?;
        self.check_params(params)?;
        let leaves: Vec<Tensor<f64>> = params.tensors().to_vec();
        let (value, grads) = self.run_reverse(&leaves);
        Ok((value, GradientVector::new(grads)))
    }

    pub fn grad(&self, params: &GradientVector) -> Result<GradientVector> {
        Ok(self.value_and_grad(params)?.1)
    }

    /// Value, gradient `g` and exact Hessian-vector product `H v`.
    ///
    /// Runs the reverse pass on dual numbers seeded with tangent `v`, so the
    /// real parts carry `g` and the tangent parts carry `H v`.
    pub fn grad_and_hvp(
        &self,
        params: &GradientVector,
        v: &GradientVector,
    ) -> Result<(f64, GradientVector, GradientVector)> {
        self.check_scalar()?;
        self.check_params(params)?;
        params.check_same_shape(v)?;
        let leaves: Vec<Tensor<Dual>> = params
            .tensors()
            .iter()
            .zip(v.tensors())
            .map(|(p, t)| {
                let data = p.data().iter().zip(t.data()).map(|(&a, &b)| Dual::new(a, b)).collect();
                Tensor::new(p.shape().to_vec(), data).expect("shape checked")
            })
            .collect();
        let (value, grads) = self.run_reverse(&leaves);
        let mut g = Vec::with_capacity(grads.len());
        let mut hv = Vec::with_capacity(grads.len());
        for t in grads {
            let shape = t.shape().to_vec();
            let (re, eps): (Vec<f64>, Vec<f64>) = t.data().iter().map(|d| (d.re, d.eps)).unzip();
            g.push(Tensor::new(shape.clone(), re)?);
            hv.push(Tensor::new(shape, eps)?);
        }
        Ok((value.re, GradientVector::new(g), GradientVector::new(hv)))
    }

    pub fn hvp(&self, params: &GradientVector, v: &GradientVector) -> Result<GradientVector> {
        Ok(self.grad_and_hvp(params, v)?.2)
    }

    fn run_forward<T: Real>(&self, leaves: &[Tensor<T>]) -> Vec<Tensor<T>> {
        let mut vals: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = forward_op(&node.op, &node.shape, &vals, leaves);
            vals.push(v);
        }
        vals
    }

    fn run_reverse<T: Real>(&self, leaves: &[Tensor<T>]) -> (T, Vec<Tensor<T>>) {
        let vals = self.run_forward(leaves);
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[self.output.0] = Some(Tensor::full(&self.nodes[self.output.0].shape, T::one()));
        let mut grads: Vec<Tensor<T>> = self.param_shapes.iter().map(|s| Tensor::zeros(s)).collect();

        for idx in (0..=self.output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            backward_op(&node.op, &g, &vals, idx, &self.nodes, &mut adj, &mut grads);
        }
        (vals[self.output.0].data()[0], grads)
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut adj[id.0] {
        Some(a) => a.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn forward_op<T: Real>(op: &Op, shape: &[usize], vals: &[Tensor<T>], leaves: &[Tensor<T>]) -> Tensor<T> {
    let v = |id: &NodeId| &vals[id.0];
    match op {
        Op::Param(i) => leaves[*i].clone(),
        Op::Const(t) => t.lift(),
        Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y),
        Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y),
        Op::Scale(a, c) => v(a).map(|x| x.scale(*c)),
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::MatMul(a, b) => matmul(v(a), v(b), false, false),
        Op::Reshape(a) => v(a).clone().reshape(shape).expect("checked at build"),
        Op::MulChannel(x, s) => channel_apply(v(x), v(s), |a, b| a * b),
        Op::AddChannel(x, b) => channel_apply(v(x), v(b), |a, b| a + b),
        Op::Conv2d(x, w) => conv2d_forward(v(x), v(w)),
        Op::MeanPool(x, k) => mean_pool_forward(v(x), *k, shape),
        Op::Tanh(x) => v(x).map(Real::tanh),
        Op::Relu(x) => v(x).map(|a| if a.val() > 0.0 { a } else { T::zero() }),
        Op::SoftmaxXent { logits, labels, temperature } => {
            Tensor::scalar(softmax_xent(v(logits), labels, *temperature).0)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_op<T: Real>(
    op: &Op,
    g: &Tensor<T>,
    vals: &[Tensor<T>],
    idx: usize,
    nodes: &[Node],
    adj: &mut [Option<Tensor<T>>],
    grads: &mut [Tensor<T>],
) {
    let v = |id: &NodeId| &vals[id.0];
    match op {
        Op::Param(i) => grads[*i].add_assign(g),
        Op::Const(_) => {}
        Op::Add(a, b) => {
            accumulate(adj, *a, g.clone());
            accumulate(adj, *b, g.clone());
        }
        Op::Mul(a, b) => {
            let ga = g.zip_map(v(b), |x, y| x * y);
            let gb = g.zip_map(v(a), |x, y| x * y);
            accumulate(adj, *a, ga);
            accumulate(adj, *b, gb);
        }
        Op::Scale(a, c) => accumulate(adj, *a, g.map(|x| x.scale(*c))),
        Op::Sum(a) => {
            let s = g.data()[0];
            accumulate(adj, *a, Tensor::full(&nodes[a.0].shape, s));
        }
        Op::MatMul(a, b) => {
            accumulate(adj, *a, matmul(g, v(b), false, true));
            accumulate(adj, *b, matmul(v(a), g, true, false));
        }
        Op::Reshape(a) => {
            let r = g.clone().reshape(&nodes[a.0].shape).expect("checked at build");
            accumulate(adj, *a, r);
        }
        Op::MulChannel(x, s) => {
            let gx = channel_apply(g, v(s), |a, b| a * b);
            let gs = channel_reduce(&g.zip_map(v(x), |a, b| a * b), nodes[s.0].shape[0]);
            accumulate(adj, *x, gx);
            accumulate(adj, *s, gs);
        }
        Op::AddChannel(x, b) => {
            accumulate(adj, *x, g.clone());
            accumulate(adj, *b, channel_reduce(g, nodes[b.0].shape[0]));
        }
        Op::Conv2d(x, w) => {
            let (gx, gw) = conv2d_backward(v(x), v(w), g);
            accumulate(adj, *x, gx);
            accumulate(adj, *w, gw);
        }
        Op::MeanPool(x, k) => accumulate(adj, *x, mean_pool_backward(g, *k, &nodes[x.0].shape)),
        Op::Tanh(x) => {
            let y = &vals[idx];
            let gx = g.zip_map(y, |gi, yi| gi * (T::one() - yi * yi));
            accumulate(adj, *x, gx);
        }
        Op::Relu(x) => {
            let gx = g.zip_map(v(x), |gi, xi| if xi.val() > 0.0 { gi } else { T::zero() });
            accumulate(adj, *x, gx);
        }
        Op::SoftmaxXent { logits, labels, temperature } => {
            let (_, dz) = softmax_xent(v(logits), labels, *temperature);
            let s = g.data()[0];
            accumulate(adj, *logits, dz.map(|d| d * s));
        }
    }
}

/// `op(a) · op(b)` for 2-D tensors, where `op` optionally transposes.
fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
    let m = if tb { br } else { bc };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += aip * bd[j * bc + p];
                }
            } else {
                let brow = &bd[p * bc..(p + 1) * bc];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("matmul shape")
}

fn inner_size(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

fn channel_apply<T: Real>(x: &Tensor<T>, c: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let ch = x.shape()[1];
    let inner = inner_size(x.shape());
    let cd = c.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &xi)| f(xi, cd[(i / inner) % ch]))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn channel_reduce<T: Real>(g: &Tensor<T>, ch: usize) -> Tensor<T> {
    let inner = inner_size(g.shape());
    let mut out = vec![T::zero(); ch];
    for (i, &gi) in g.data().iter().enumerate() {
        out[(i / inner) % ch] += gi;
    }
    Tensor::new(vec![ch], out).expect("channel shape")
}

fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let &[n, ci, h, wd] = x.shape() else { unreachable!() };
    let &[co, _, k, _] = w.shape() else { unreachable!() };
    let pad = (k / 2) as isize;
    let (xd, wdt) = (x.data(), w.data());
    let mut out = vec![T::zero(); n * co * h * wd];
    for b in 0..n {
        for o in 0..co {
            let obase = ((b * co) + o) * h * wd;
            for c in 0..ci {
                let xbase = ((b * ci) + c) * h * wd;
                let wbase = ((o * ci) + c) * k * k;
                for p in 0..k {
                    for q in 0..k {
                        let wv = wdt[wbase + p * k + q];
                        let (dp, dq) = (p as isize - pad, q as isize - pad);
                        for i in 0..h {
                            let si = i as isize + dp;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..wd {
                                let sj = j as isize + dq;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                out[obase + i * wd + j] += wv * xd[xbase + si as usize * wd + sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, h, wd], out).expect("conv shape")
}

fn conv2d_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let &[n, ci, h, wd] = x.shape() else { unreachable!() };
    let &[co, _, k, _] = w.shape() else { unreachable!() };
    let pad = (k / 2) as isize;
    let (xd, wdt, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wdt.len()];
    for b in 0..n {
        for o in 0..co {
            let obase = ((b * co) + o) * h * wd;
            for c in 0..ci {
                let xbase = ((b * ci) + c) * h * wd;
                let wbase = ((o * ci) + c) * k * k;
                for p in 0..k {
                    for q in 0..k {
                        let wv = wdt[wbase + p * k + q];
                        let (dp, dq) = (p as isize - pad, q as isize - pad);
                        let mut acc = T::zero();
                        for i in 0..h {
                            let si = i as isize + dp;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..wd {
                                let sj = j as isize + dq;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                let gv = gd[obase + i * wd + j];
                                let xi = xbase + si as usize * wd + sj as usize;
                                acc += gv * xd[xi];
                                gx[xi] += gv * wv;
                            }
                        }
                        gw[wbase + p * k + q] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("conv grad shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("conv grad shape"),
    )
}

fn mean_pool_forward<T: Real>(x: &Tensor<T>, k: usize, out_shape: &[usize]) -> Tensor<T> {
    let &[n, c, h, w] = x.shape() else { unreachable!() };
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                out[nc * oh * ow + (i / k) * ow + j / k] += xd[nc * h * w + i * w + j];
            }
        }
    }
    for o in &mut out {
        *o = o.scale(inv);
    }
    Tensor::new(out_shape.to_vec(), out).expect("pool shape")
}

fn mean_pool_backward<T: Real>(g: &Tensor<T>, k: usize, in_shape: &[usize]) -> Tensor<T> {
    let &[n, c, h, w] = in_shape else { unreachable!() };
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let gd = g.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                out[nc * h * w + i * w + j] = gd[nc * oh * ow + (i / k) * ow + j / k].scale(inv);
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out).expect("pool shape")
}

/// Mean cross-entropy and its derivative with respect to the logits.
fn softmax_xent<T: Real>(z: &Tensor<T>, labels: &[usize], temperature: f64) -> (T, Tensor<T>) {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let inv_t = 1.0 / temperature;
    let inv_n = 1.0 / n as f64;
    let zd = z.data();
    let mut loss = T::zero();
    let mut dz = vec![T::zero(); n * c];
    for r in 0..n {
        let row = &zd[r * c..(r + 1) * c];
        let shift = row.iter().map(|v| v.val()).fold(f64::NEG_INFINITY, f64::max) * inv_t;
        let e: Vec<T> = row.iter().map(|&v| (v.scale(inv_t) - T::cst(shift)).exp()).collect();
        let s = e.iter().fold(T::zero(), |a, &b| a + b);
        let lse = s.ln() + T::cst(shift);
        loss += lse - row[labels[r]].scale(inv_t);
        for j in 0..c {
            let p = e[j] / s;
            let y = if j == labels[r] { T::one() } else { T::zero() };
            dz[r * c + j] = (p - y).scale(inv_t * inv_n);
        }
    }
    (loss.scale(inv_n), Tensor::new(vec![n, c], dz).expect("logit shape"))
}
