use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{broadcast_zip, reduce_to, Tensor};

/// Handle to a node on a `Tape`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose2(NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// rhs broadcast over trailing axes of lhs
    BAdd(NodeId, NodeId),
    BMul(NodeId, NodeId),
    BDiv(NodeId, NodeId),
    Scale(NodeId, T),
    Exp(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId, NodeId, NodeId, T),
    L2NormRows(NodeId),
    SumAll(NodeId),
    MeanAxis(NodeId, usize),
    SumLastKeep(NodeId),
    PermuteRows(NodeId, Vec<usize>),
    DepthwiseConv(NodeId, NodeId, NodeId, (usize, usize)),
    NarrowLast(NodeId, usize, usize),
    ConcatLast(Vec<NodeId>),
    /// divide by a single-element node (learnable temperature)
    DivScalarNode(NodeId, NodeId),
    CrossEntropy(NodeId, Vec<usize>),
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Append-only record of executed primitives. Construction is the forward
/// pass; `backward` walks the record once in reverse. Nodes only reference
/// earlier nodes, so truncating back to a prefix (see `truncate`) leaves a
/// valid tape — the benchmark harness uses that to reuse registered inputs.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Result of `backward`: per-node gradients, populated for every node that
/// influences the loss and requires gradients.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node from `len` onward. The prefix stays valid because
    /// nodes never reference later nodes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or probed tensor).
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t, true)
    }

    /// Non-differentiated input (data, fixed random features, tables).
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v, self.needs(a) || self.needs(b)))
    }

    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose_last2()?;
        Ok(self.push(Op::Transpose2(a), v, self.needs(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v, self.needs(a)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, self.needs(a) || self.needs(b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v, self.needs(a) || self.needs(b)))
    }

    pub fn badd(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip(self.value(a), self.value(b), "badd", |x, y| x + y)?;
        Ok(self.push(Op::BAdd(a, b), v, self.needs(a) || self.needs(b)))
    }

    pub fn bmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip(self.value(a), self.value(b), "bmul", |x, y| x * y)?;
        Ok(self.push(Op::BMul(a, b), v, self.needs(a) || self.needs(b)))
    }

    pub fn bdiv(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = broadcast_zip(self.value(a), self.value(b), "bdiv", |x, y| x / y)?;
        Ok(self.push(Op::BDiv(a, b), v, self.needs(a) || self.needs(b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(a).scale(c)?;
        Ok(self.push(Op::Scale(a, c), v, self.needs(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.exp());
        v.ensure_finite("exp")?;
        Ok(self.push(Op::Exp(a), v, self.needs(a)))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).gelu()?;
        Ok(self.push(Op::Gelu(a), v, self.needs(a)))
    }

    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).softmax_last()?;
        Ok(self.push(Op::Softmax(a), v, self.needs(a)))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<NodeId> {
        let v = self
            .value(x)
            .layer_norm(self.value(gamma), self.value(beta), eps)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm(x, gamma, beta, eps), v, needs))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).l2_normalize_rows()?;
        Ok(self.push(Op::L2NormRows(a), v, self.needs(a)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = T::zero();
        for &v in self.value(a).data() {
            s = s + v;
        }
        let v = Tensor::scalar(s);
        v.ensure_finite("sum_all")?;
        Ok(self.push(Op::SumAll(a), v, self.needs(a)))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a).mean_axis(axis)?;
        Ok(self.push(Op::MeanAxis(a, axis), v, self.needs(a)))
    }

    pub fn sum_last_keep(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).sum_last_keep()?;
        Ok(self.push(Op::SumLastKeep(a), v, self.needs(a)))
    }

    pub fn permute_rows(&mut self, a: NodeId, perm: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).permute_rows(&perm)?;
        let needs = self.needs(a);
        Ok(self.push(Op::PermuteRows(a, perm), v, needs))
    }

    pub fn depthwise_conv3x3(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        grid: (usize, usize),
    ) -> Result<NodeId> {
        let v = self
            .value(x)
            .depthwise_conv3x3(grid, self.value(kernel), self.value(bias))?;
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(Op::DepthwiseConv(x, kernel, bias, grid), v, needs))
    }

    pub fn narrow_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).narrow_last(start, len)?;
        let needs = self.needs(a);
        Ok(self.push(Op::NarrowLast(a, start, len), v, needs))
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_last(&tensors)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatLast(parts.to_vec()), v, needs))
    }

    /// Divide by a single-element node; used for learnable temperatures.
    pub fn div_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::Contract(format!(
                "div_scalar_node divisor must be a single element, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.value(s).data()[0];
        if sv == T::zero() {
            return Err(Error::Numeric("division by zero temperature".into()));
        }
        let v = self.value(a).scale(T::one() / sv)?;
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(Op::DivScalarNode(a, s), v, needs))
    }

    /// Mean cross-entropy between rows of `logits` [B, K] and integer
    /// labels, computed through a fused log-softmax.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy expects [batch, classes], got {:?}",
                lv.shape()
            )));
        }
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "{} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of {k} classes")));
        }
        let mut total = T::zero();
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for &v in row {
                sum = sum + (v - mx).exp();
            }
            total = total + (mx + sum.ln()) - row[y];
        }
        let v = Tensor::scalar(total / T::from_f64(b as f64));
        v.ensure_finite("cross_entropy")?;
        Ok(self.push(
            Op::CrossEntropy(logits, labels.to_vec()),
            v,
            self.needs(logits),
        ))
    }

    /// Reverse pass from a scalar-valued node. Returns gradients for every
    /// contributing node that requires them; visiting order is the exact
    /// reverse of construction order, so accumulation is deterministic.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || grads[idx].is_none() {
                continue;
            }
            let g = match self.nodes[idx].op {
                Op::Leaf => continue, // keep gradient for the caller
                _ => grads[idx].take().unwrap(),
            };
            self.backprop_node(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        id: NodeId,
        contribution: Tensor<T>,
    ) -> Result<()> {
        if !self.needs(id) {
            return Ok(());
        }
        grads[id.0] = Some(match grads[id.0].take() {
            Some(existing) => existing.add(&contribution)?,
            None => contribution,
        });
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = self.value(*b).transpose_last2()?;
                    let da = g.matmul(&bt)?;
                    let da = if da.shape() == self.shape(*a) {
                        da
                    } else {
                        reduce_to(&da, self.shape(*a))
                    };
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose_last2()?;
                    let db = at.matmul(g)?;
                    let db = if db.shape() == self.shape(*b) {
                        db
                    } else {
                        reduce_to(&db, self.shape(*b))
                    };
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Transpose2(a) => {
                self.accumulate(grads, *a, g.transpose_last2()?)?;
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.shape(*a))?)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::BAdd(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs(*b) {
                    self.accumulate(grads, *b, reduce_to(g, self.shape(*b)))?;
                }
            }
            Op::BMul(a, b) => {
                if self.needs(*a) {
                    let da = broadcast_zip(g, self.value(*b), "bmul_bwd", |x, y| x * y)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let ga = g.mul(self.value(*a))?;
                    self.accumulate(grads, *b, reduce_to(&ga, self.shape(*b)))?;
                }
            }
            Op::BDiv(a, b) => {
                if self.needs(*a) {
                    let da = broadcast_zip(g, self.value(*b), "bdiv_bwd", |x, y| x / y)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let ga = g.mul(self.value(*a))?;
                    let t = broadcast_zip(&ga, self.value(*b), "bdiv_bwd", |x, y| {
                        -(x / (y * y))
                    })?;
                    self.accumulate(grads, *b, reduce_to(&t, self.shape(*b)))?;
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.scale(*c)?)?;
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.mul(&node.value)?)?;
            }
            Op::Gelu(a) => {
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::from_f64(0.5);
                let x = self.value(*a);
                let deriv = x.map(|v| {
                    let phi_cdf = half * (T::one() + (v * inv_sqrt2).erf());
                    let pdf = (-(v * v) * half).exp() * inv_sqrt2pi;
                    phi_cdf + v * pdf
                });
                self.accumulate(grads, *a, g.mul(&deriv)?)?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut out = vec![T::zero(); y.numel()];
                for ((gs, ys), os) in g
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(out.chunks_mut(c))
                {
                    let mut dot = T::zero();
                    for (&gv, &yv) in gs.iter().zip(ys) {
                        dot = dot + gv * yv;
                    }
                    for ((o, &gv), &yv) in os.iter_mut().zip(gs).zip(ys) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out)?)?;
            }
            Op::LayerNorm(x, gamma, beta, eps) => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let c = *xv.shape().last().unwrap();
                let cn = T::from_f64(c as f64);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (row_i, (src, gs)) in
                    xv.data().chunks(c).zip(g.data().chunks(c)).enumerate()
                {
                    let mut mean = T::zero();
                    for &v in src {
                        mean = mean + v;
                    }
                    mean = mean / cn;
                    let mut var = T::zero();
                    for &v in src {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var / cn;
                    let inv = T::one() / (var + *eps).sqrt();
                    // xhat, g*gamma, and the two row means the gradient needs
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    let mut xhat = vec![T::zero(); c];
                    let mut gg = vec![T::zero(); c];
                    for j in 0..c {
                        xhat[j] = (src[j] - mean) * inv;
                        gg[j] = gs[j] * gv.data()[j];
                        m1 = m1 + gg[j];
                        m2 = m2 + gg[j] * xhat[j];
                    }
                    m1 = m1 / cn;
                    m2 = m2 / cn;
                    let drow = &mut dx[row_i * c..(row_i + 1) * c];
                    for j in 0..c {
                        drow[j] = inv * (gg[j] - m1 - xhat[j] * m2);
                        dgamma[j] = dgamma[j] + gs[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gs[j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?)?;
            }
            Op::L2NormRows(a) => {
                let xv = self.value(*a);
                let y = &node.value;
                let c = *xv.shape().last().unwrap();
                let guard = T::from_f64(1e-12);
                let mut dx = vec![T::zero(); xv.numel()];
                for (((src, ys), gs), os) in xv
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let mut sq = T::zero();
                    for &v in src {
                        sq = sq + v * v;
                    }
                    let norm = sq.sqrt();
                    if norm > guard {
                        let mut dot = T::zero();
                        for (&gv, &yv) in gs.iter().zip(ys) {
                            dot = dot + gv * yv;
                        }
                        let inv = T::one() / norm;
                        for ((o, &gv), &yv) in os.iter_mut().zip(gs).zip(ys) {
                            *o = (gv - yv * dot) * inv;
                        }
                    } else {
                        let inv = T::one() / guard;
                        for (o, &gv) in os.iter_mut().zip(gs) {
                            *o = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(xv.shape().to_vec(), dx)?)?;
            }
            Op::SumAll(a) => {
                let seed = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), seed))?;
            }
            Op::MeanAxis(a, axis) => {
                let in_shape = self.shape(*a);
                let mid = in_shape[*axis];
                let inv = T::one() / T::from_f64(mid as f64);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut dx = vec![T::zero(); outer * mid * inner];
                for o in 0..outer {
                    let gsrc = &g.data()[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        let dst = &mut dx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        for (d, &gv) in dst.iter_mut().zip(gsrc) {
                            *d = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(in_shape.to_vec(), dx)?)?;
            }
            Op::SumLastKeep(a) => {
                let in_shape = self.shape(*a);
                let c = *in_shape.last().unwrap();
                let mut dx = vec![T::zero(); self.value(*a).numel()];
                for (chunk, &gv) in dx.chunks_mut(c).zip(g.data()) {
                    for d in chunk.iter_mut() {
                        *d = gv;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(in_shape.to_vec(), dx)?)?;
            }
            Op::PermuteRows(a, perm) => {
                let mut inverse = vec![0usize; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inverse[p] = j;
                }
                self.accumulate(grads, *a, g.permute_rows(&inverse)?)?;
            }
            Op::DepthwiseConv(x, kernel, bias, grid) => {
                let (gh, gw) = *grid;
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let c = *xv.shape().last().unwrap();
                let n = gh * gw;
                let batch = xv.numel() / (n * c);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dk = vec![T::zero(); kv.numel()];
                let mut db = vec![T::zero(); c];
                for b in 0..batch {
                    let src = &xv.data()[b * n * c..(b + 1) * n * c];
                    let gsl = &g.data()[b * n * c..(b + 1) * n * c];
                    let dsl = &mut dx[b * n * c..(b + 1) * n * c];
                    for y in 0..gh {
                        for xx in 0..gw {
                            let grow = &gsl[(y * gw + xx) * c..(y * gw + xx + 1) * c];
                            for (ch, &gv) in grow.iter().enumerate() {
                                db[ch] = db[ch] + gv;
                            }
                            for dy in 0..3usize {
                                let sy = y as isize + dy as isize - 1;
                                if sy < 0 || sy >= gh as isize {
                                    continue;
                                }
                                for dxo in 0..3usize {
                                    let sx = xx as isize + dxo as isize - 1;
                                    if sx < 0 || sx >= gw as isize {
                                        continue;
                                    }
                                    let soff = (sy as usize * gw + sx as usize) * c;
                                    for ch in 0..c {
                                        let w = kv.data()[ch * 9 + dy * 3 + dxo];
                                        dsl[soff + ch] = dsl[soff + ch] + w * grow[ch];
                                        dk[ch * 9 + dy * 3 + dxo] = dk[ch * 9 + dy * 3 + dxo]
                                            + src[soff + ch] * grow[ch];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                self.accumulate(grads, *kernel, Tensor::new(vec![c, 3, 3], dk)?)?;
                self.accumulate(grads, *bias, Tensor::new(vec![c], db)?)?;
            }
            Op::NarrowLast(a, start, len) => {
                let in_shape = self.shape(*a);
                let c = *in_shape.last().unwrap();
                let rows = self.value(*a).numel() / c;
                let mut dx = vec![T::zero(); self.value(*a).numel()];
                for r in 0..rows {
                    dx[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *a, Tensor::new(in_shape.to_vec(), dx)?)?;
            }
            Op::ConcatLast(parts) => {
                let total_c = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / total_c;
                let mut offset = 0;
                for &p in parts {
                    let pc = *self.shape(p).last().unwrap();
                    if self.needs(p) {
                        let mut dp = vec![T::zero(); rows * pc];
                        for r in 0..rows {
                            dp[r * pc..(r + 1) * pc].copy_from_slice(
                                &g.data()[r * total_c + offset..r * total_c + offset + pc],
                            );
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), dp)?)?;
                    }
                    offset += pc;
                }
            }
            Op::DivScalarNode(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.scale(T::one() / sv)?)?;
                }
                if self.needs(*s) {
                    let mut dot = T::zero();
                    for (&gv, &yv) in g.data().iter().zip(node.value.data()) {
                        dot = dot + gv * yv;
                    }
                    let ds = -(dot / sv);
                    self.accumulate(grads, *s, Tensor::scalar(ds))?;
                }
            }
            Op::CrossEntropy(logits, labels) => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let b = lv.shape()[0];
                let seed = g.data()[0] / T::from_f64(b as f64);
                let probs = lv.softmax_last()?;
                let mut dl = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * k + y] = dl[i * k + y] - T::one();
                }
                for v in dl.iter_mut() {
                    *v = *v * seed;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?)?;
            }
        }
        Ok(())
    }
}

/// Summary of one finite-difference comparison run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub probes: usize,
    pub precision: &'static str,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max_rel={:.3e} mean_rel={:.3e} probes={} precision={}",
            self.name, self.max_rel, self.mean_rel, self.probes, self.precision
        )
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the tape gradient of `build` (a scalar function of one leaf
/// tensor) against central differences at `probes` randomly chosen
/// coordinates. 64-bit only; h around 1e-5 balances truncation against
/// roundoff for unit-scale inputs.
pub fn finite_diff_check<F>(
    name: &str,
    x: &Tensor<f64>,
    h: f64,
    probes: usize,
    rng: &mut Rng,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    if probes == 0 {
        return Err(Error::Contract("finite_diff_check needs probes >= 1".into()));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let loss = build(&mut tape, xid)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract(format!(
            "{name}: check function must be scalar-valued"
        )));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xid)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |pt: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(pt.clone());
        let l = build(&mut t, id)?;
        let v = t.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name}: non-finite value near probe")));
        }
        Ok(v)
    };

    let mut coords: Vec<usize> = (0..x.numel()).collect();
    if coords.len() > probes {
        rng.shuffle(&mut coords);
        coords.truncate(probes);
    }
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    for &i in &coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let fp = eval(&xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fm = eval(&xm)?;
        let numeric = (fp - fm) / (2.0 * h);
        let r = rel_error(analytic.data()[i], numeric);
        max_rel = max_rel.max(r);
        sum_rel += r;
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel,
        mean_rel: sum_rel / coords.len() as f64,
        probes: coords.len(),
        precision: "f64",
    })
}
