//! Tape-style reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so parents always precede their
//! children and [`Graph::backward`] simply walks the tape in reverse.
//!
//! ```
//! use marginlab::autodiff::Graph;
//! use marginlab::Tensor;
//!
//! let mut g = Graph::new();
//! let theta = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.square(theta);
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(theta).unwrap().data(), &[2.0, 4.0]);
//! ```

mod spatial;

use rand::Rng;

pub use spatial::{LrnParams, Padding};
use spatial::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::{
    axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, gemm, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    MaxScalar(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    MaxAbsAxis {
        input: NodeId,
        /// Linear input index chosen for each output element.
        selected: Vec<usize>,
    },
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        filters: NodeId,
        geom: ConvGeom,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Lrn {
        input: NodeId,
        params: LrnParams,
        base: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Tensor,
        targets: Tensor,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation graph. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for each of `params`, zero-filled where the root does not
    /// depend on the parameter. Shapes match the parameters exactly.
    pub fn collect(&self, graph: &Graph, params: &[NodeId]) -> Vec<Tensor> {
        params
            .iter()
            .map(|&p| match self.get(p) {
                Some(g) => g.clone(),
                None => Tensor::zeros(graph.value(p).shape().to_vec()),
            })
            .collect()
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as data.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let out = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
                Error::shape(
                    "broadcast",
                    format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
                )
            })?;
            let sa = broadcast_strides(ta.shape(), &out);
            let sb = broadcast_strides(tb.shape(), &out);
            let mut res = Tensor::zeros(out.clone());
            let data = res.data_mut();
            for_each_broadcast(&out, &sa, &sb, |i, oa, ob| {
                data[i] = f(ta.data()[oa], tb.data()[ob]);
            });
            res
        };
        Ok(self.push_op(value, Op::Binary(kind, a, b), &[a, b]))
    }

    /// Elementwise `a + b` with broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x + c);
        self.push_op(value, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x * c);
        self.push_op(value, Op::MulScalar(a, c), &[a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x * x);
        self.push_op(value, Op::Square(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push_op(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push_op(value, Op::Log(a), &[a])
    }

    /// `max(0, x)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(value, Op::Relu(a), &[a])
    }

    /// `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn max_scalar(&mut self, a: NodeId, floor: f64) -> NodeId {
        let value = self.value(a).map(|x| if x > floor { x } else { floor });
        self.push_op(value, Op::MaxScalar(a, floor), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        Ok(self.push_op(value, Op::Mean(a), &[a]))
    }

    fn reduce_axis(&self, a: NodeId, axis: usize, op: &'static str) -> Result<(Tensor, usize)> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let mut out = Tensor::zeros(shape);
        let data = out.data_mut();
        for o in 0..outer {
            for k in 0..len {
                let src = &t.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok((out, len))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (value, _) = self.reduce_axis(a, axis, "sum_axis")?;
        Ok(self.push_op(value, Op::SumAxis(a, axis), &[a]))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (value, len) = self.reduce_axis(a, axis, "mean_axis")?;
        if len == 0 {
            return Err(Error::shape("mean_axis", "empty axis"));
        }
        let value = value.scale(1.0 / len as f64);
        Ok(self.push_op(value, Op::MeanAxis(a, axis), &[a]))
    }

    /// Maximum absolute value along `axis` (kept with extent 1). The gradient
    /// is routed to the selected element times its sign; ties pick the
    /// lowest index.
    pub fn max_abs_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape(
                "reduce_max_abs",
                format!("axis {axis} out of range for {:?}", t.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        if len == 0 {
            return Err(Error::shape("reduce_max_abs", "empty axis"));
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let mut values = Vec::with_capacity(outer * inner);
        let mut selected = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if t.data()[idx].abs() > t.data()[best].abs() {
                        best = idx;
                    }
                }
                values.push(t.data()[best].abs());
                selected.push(best);
            }
        }
        let value = Tensor::new(shape, values)?;
        Ok(self.push_op(value, Op::MaxAbsAxis { input: a, selected }, &[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape();
        if shape.len() == 2 {
            return Ok(a);
        }
        let n = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product::<usize>();
        self.reshape(a, [n, rest])
    }

    /// NHWC cross-correlation with `kh×kw×C×F` filters.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        filters: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let geom = ConvGeom::new(
            self.value(input).shape(),
            self.value(filters).shape(),
            stride,
            padding,
        )?;
        let value = spatial::conv2d_forward(self.value(input), self.value(filters), &geom);
        Ok(self.push_op(
            value,
            Op::Conv2d {
                input,
                filters,
                geom,
            },
            &[input, filters],
        ))
    }

    /// Valid-padding NHWC max-pool.
    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (value, argmax) = spatial::maxpool_forward(self.value(input), window, stride)?;
        Ok(self.push_op(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Cross-channel local response normalization.
    pub fn lrn(&mut self, input: NodeId, params: LrnParams) -> Result<NodeId> {
        let (value, base) = spatial::lrn_forward(self.value(input), &params)?;
        Ok(self.push_op(
            value,
            Op::Lrn {
                input,
                params,
                base,
            },
            &[input],
        ))
    }

    /// Mean over rows of `-Σ_k t_k log softmax(z)_k`, via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        let z = self.value(logits);
        let (m, k) = z.dims2()?;
        if targets.shape() != z.shape() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs targets {:?}", z.shape(), targets.shape()),
            ));
        }
        if m == 0 || k == 0 {
            return Err(Error::shape("softmax_cross_entropy", "empty batch"));
        }
        let mut probs = Vec::with_capacity(m * k);
        let mut total = 0.0;
        for i in 0..m {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (v, t) in row.iter().zip(targets.row(i)) {
                let log_p = v - lse;
                total -= t * log_p;
                probs.push(log_p.exp());
            }
        }
        let value = Tensor::scalar(total / m as f64);
        let probs = Tensor::new([m, k], probs)?;
        Ok(self.push_op(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.clone(),
            },
            &[logits],
        ))
    }

    /// Inverted dropout: kept units are scaled by `1/keep`. `keep == 1`
    /// returns `input` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, keep: f64, rng: &mut R) -> Result<NodeId> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout keep probability must be in (0, 1], got {keep}"
            )));
        }
        if keep == 1.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Dropout { input, mask }, &[input]))
    }

    /// Reverse-mode sweep from a single-element `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.shape().to_vec()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |id: NodeId, delta: Tensor| {
            if !self.needs(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("matmul lhs");
                let n = tb.dims2().expect("matmul rhs").1;
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                    acc(*a, Tensor::new([m, k], da).expect("shape"));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                    acc(*b, Tensor::new([k, n], db).expect("shape"));
                }
            }
            Op::Binary(kind, a, b) => {
                let (da, db) = binary_grads(*kind, g, self.value(*a), self.value(*b));
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulScalar(a, c) => acc(*a, g.scale(*c)),
            Op::Square(a) => acc(*a, zip_map(g, self.value(*a), |g, x| 2.0 * x * g)),
            Op::Exp(a) => acc(*a, zip_map(g, &node.value, |g, y| g * y)),
            Op::Log(a) => acc(*a, zip_map(g, self.value(*a), |g, x| g / x)),
            Op::Relu(a) => acc(
                *a,
                zip_map(g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::MaxScalar(a, floor) => acc(
                *a,
                zip_map(g, self.value(*a), |g, x| if x > *floor { g } else { 0.0 }),
            ),
            Op::Sum(a) => {
                let gv = g.data()[0];
                acc(*a, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.data()[0] / t.numel() as f64;
                acc(*a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.value(*a).shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let scale = match node.op {
                    Op::MeanAxis(..) => 1.0 / len as f64,
                    _ => 1.0,
                };
                let mut d = Tensor::zeros(shape.to_vec());
                let dd = d.data_mut();
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            dd[(o * len + k) * inner + i] = g.data()[o * inner + i] * scale;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::MaxAbsAxis { input, selected } => {
                let x = self.value(*input);
                let mut d = Tensor::zeros(x.shape().to_vec());
                for (o, &sel) in selected.iter().enumerate() {
                    let v = x.data()[sel];
                    let sign = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    d.data_mut()[sel] += g.data()[o] * sign;
                }
                acc(*input, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.clone().reshape(shape).expect("reshape grad"));
            }
            Op::Conv2d {
                input,
                filters,
                geom,
            } => {
                let (di, df) = spatial::conv2d_backward(
                    g,
                    self.value(*input),
                    self.value(*filters),
                    geom,
                    self.needs(*input),
                    self.needs(*filters),
                );
                if let Some(di) = di {
                    acc(*input, di);
                }
                if let Some(df) = df {
                    acc(*filters, df);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut d = Tensor::zeros(self.value(*input).shape().to_vec());
                for (o, &src) in argmax.iter().enumerate() {
                    d.data_mut()[src] += g.data()[o];
                }
                acc(*input, d);
            }
            Op::Lrn {
                input,
                params,
                base,
            } => acc(
                *input,
                spatial::lrn_backward(g, self.value(*input), base, params),
            ),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let (m, k) = probs.dims2().expect("probs");
                let gv = g.data()[0] / m as f64;
                let mut d = Vec::with_capacity(m * k);
                for i in 0..m {
                    let mass: f64 = targets.row(i).iter().sum();
                    for (p, t) in probs.row(i).iter().zip(targets.row(i)) {
                        d.push(gv * (p * mass - t));
                    }
                }
                acc(*logits, Tensor::new([m, k], d).expect("shape"));
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(
                    *input,
                    Tensor::new(g.shape().to_vec(), data).expect("shape"),
                );
            }
        }
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("zip_map shape")
}

fn binary_grads(kind: Binary, g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let partials = |x: f64, y: f64| -> (f64, f64) {
        match kind {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (y, x),
            Binary::Div => (1.0 / y, -x / (y * y)),
        }
    };
    if a.shape() == b.shape() {
        let mut da = Vec::with_capacity(a.numel());
        let mut db = Vec::with_capacity(b.numel());
        for ((&gv, &x), &y) in g.data().iter().zip(a.data()).zip(b.data()) {
            let (pa, pb) = partials(x, y);
            da.push(gv * pa);
            db.push(gv * pb);
        }
        return (
            Tensor::new(a.shape().to_vec(), da).expect("shape"),
            Tensor::new(b.shape().to_vec(), db).expect("shape"),
        );
    }
    let out = g.shape();
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut da = Tensor::zeros(a.shape().to_vec());
    let mut db = Tensor::zeros(b.shape().to_vec());
    {
        let (dda, ddb) = (da.data_mut(), db.data_mut());
        for_each_broadcast(out, &sa, &sb, |i, oa, ob| {
            let (pa, pb) = partials(a.data()[oa], b.data()[ob]);
            dda[oa] += g.data()[i] * pa;
            ddb[ob] += g.data()[i] * pb;
        });
    }
    (da, db)
}
