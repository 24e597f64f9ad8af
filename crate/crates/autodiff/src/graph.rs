//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse, accumulating gradients
//! into every node that (transitively) depends on a trainable leaf.
//!
//! Operations assume well-formed shapes and panic on mismatch; callers that
//! take shapes from user data validate before building the graph.

use crate::error::NnError;
use crate::kernels;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MulConst(NodeId, Vec<T>),
    Affine { x: NodeId, scale: T },
    Ln { x: NodeId, eps: T },
    Sqrt(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    SumItems(NodeId),
    SelectChannel { x: NodeId, channel: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, k: usize },
    ConvTranspose2x2 { x: NodeId, w: NodeId, b: NodeId },
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    ConcatChannels(NodeId, NodeId),
    SoftmaxChannels(NodeId),
    Norm { x: NodeId, gamma: NodeId, beta: NodeId, stats: kernels::NormCache<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, or zeros of `len` when it received none.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<T> {
        self.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); len])
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// First element of a node's value; the value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    fn data(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> NodeId {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        self.derived(value, op, &[a, b])
    }

    fn map(&mut self, x: NodeId, op: Op<T>, f: impl Fn(T) -> T) -> NodeId {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.derived(value, op, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "div");
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: NodeId, c: Vec<T>) -> NodeId {
        assert_eq!(c.len(), self.value(x).numel(), "mul_const: length mismatch");
        let data = self.data(x).iter().zip(&c).map(|(&v, &k)| v * k).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        self.derived(value, Op::MulConst(x, c), &[x])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        self.map(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: NodeId, scale: T) -> NodeId {
        self.affine(x, scale, T::zero())
    }

    /// `ln(x + eps)`.
    pub fn ln(&mut self, x: NodeId, eps: T) -> NodeId {
        self.map(x, Op::Ln { x, eps }, |v| (v + eps).ln())
    }

    /// Square root whose derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Per-item sums over everything but the leading axis, shape `[B]`.
    pub fn sum_items(&mut self, x: NodeId) -> NodeId {
        let b = self.shape(x)[0];
        let per = self.value(x).numel() / b;
        let data: Vec<T> = self.data(x).chunks(per).map(|c| c.iter().copied().sum()).collect();
        let value = Tensor::new(vec![b], data).expect("b items");
        self.derived(value, Op::SumItems(x), &[x])
    }

    /// Channel `channel` of a `[B, C, H, W]` node, shape `[B, 1, H, W]`.
    pub fn select_channel(&mut self, x: NodeId, channel: usize) -> NodeId {
        let [b, c, h, w] = self.value(x).dims4();
        assert!(channel < c, "select_channel: channel out of range");
        let hw = h * w;
        let src = self.data(x);
        let mut data = Vec::with_capacity(b * hw);
        for i in 0..b {
            let off = (i * c + channel) * hw;
            data.extend_from_slice(&src[off..off + hw]);
        }
        let value = Tensor::new(vec![b, 1, h, w], data).expect("channel slice");
        self.derived(value, Op::SelectChannel { x, channel }, &[x])
    }

    /// Stride-1 convolution with zero padding `k / 2`; `k` is 1 or 3.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xs = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be [co, ci, k, k]");
        assert_eq!(ws[1], xs[1], "conv2d: input channels mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        assert_eq!(self.shape(b), &[ws[0]], "conv2d: bias length");
        let k = ws[2];
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.data(b), k);
        self.derived(out, Op::Conv2d { x, w, b, k }, &[x, w, b])
    }

    /// Transposed convolution, kernel 2, stride 2; weight `[ci, co, 2, 2]`.
    pub fn conv_transpose2x2(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xs = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws, vec![xs[1], ws[1], 2, 2], "conv_transpose2x2 weight shape");
        assert_eq!(self.shape(b), &[ws[1]], "conv_transpose2x2: bias length");
        let out = kernels::conv_t2_forward(self.value(x), self.value(w), self.data(b));
        self.derived(out, Op::ConvTranspose2x2 { x, w, b }, &[x, w, b])
    }

    /// 2×2 max pooling, stride 2. Spatial dims must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let (out, argmax) = kernels::max_pool2_forward(self.value(x));
        self.derived(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = kernels::concat_channels(self.value(a), self.value(b));
        self.derived(out, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        let out = kernels::softmax_channels(self.value(x));
        self.derived(out, Op::SoftmaxChannels(x), &[x])
    }

    /// Group normalization with per-channel affine.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let (out, stats) = kernels::group_norm_forward(
            self.value(x),
            self.data(gamma),
            self.data(beta),
            groups,
        );
        self.derived(out, Op::Norm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    /// Batch normalization using the statistics of this batch. Returns the
    /// node and the per-channel `(mean, biased variance)`.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> (NodeId, Vec<(T, T)>) {
        let (out, stats, moments) =
            kernels::batch_norm_train_forward(self.value(x), self.data(gamma), self.data(beta));
        (self.derived(out, Op::Norm { x, gamma, beta, stats }, &[x, gamma, beta]), moments)
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        var: &[T],
    ) -> NodeId {
        let (out, stats) = kernels::batch_norm_eval_forward(
            self.value(x),
            self.data(gamma),
            self.data(beta),
            mean,
            var,
        );
        self.derived(out, Op::Norm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NnError> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(NnError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if !self.wants(id) {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); self.value(id).numel()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g - d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(vb) {
                        *g = *g + d * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(va) {
                        *g = *g + d * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(vb) {
                        *g = *g + d / y;
                    }
                });
                acc(*b, &mut |g| {
                    for (((g, &d), &x), &y) in g.iter_mut().zip(gy).zip(va).zip(vb) {
                        *g = *g - d * x / (y * y);
                    }
                });
            }
            Op::MulConst(x, c) => acc(*x, &mut |g| {
                for ((g, &d), &k) in g.iter_mut().zip(gy).zip(c) {
                    *g = *g + d * k;
                }
            }),
            Op::Affine { x, scale } => acc(*x, &mut |g| {
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d * *scale)
            }),
            Op::Ln { x, eps } => {
                let vx = self.data(*x);
                acc(*x, &mut |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(vx) {
                        *g = *g + d / (v + *eps);
                    }
                })
            }
            Op::Sqrt(x) => {
                let out = node.value.data();
                acc(*x, &mut |g| {
                    for ((g, &d), &s) in g.iter_mut().zip(gy).zip(out) {
                        if s > T::zero() {
                            *g = *g + d / (T::lit(2.0) * s);
                        }
                    }
                })
            }
            Op::Relu(x) => {
                let vx = self.data(*x);
                acc(*x, &mut |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(vx) {
                        if v > T::zero() {
                            *g = *g + d;
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g = *g + gy[0])),
            Op::SumItems(x) => acc(*x, &mut |g| {
                let per = g.len() / gy.len();
                for (chunk, &d) in g.chunks_mut(per).zip(gy) {
                    chunk.iter_mut().for_each(|g| *g = *g + d);
                }
            }),
            Op::SelectChannel { x, channel } => {
                let [b, c, h, w] = self.value(*x).dims4();
                let hw = h * w;
                acc(*x, &mut |g| {
                    for i in 0..b {
                        let off = (i * c + channel) * hw;
                        add_into(&mut g[off..off + hw], &gy[i * hw..(i + 1) * hw]);
                    }
                })
            }
            Op::Conv2d { x, w, b, k } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let need_x = self.wants(*x);
                let (gx, gw, gb) = kernels::conv2d_backward(vx, vw, gy, *k, need_x);
                if let Some(gx) = gx {
                    acc(*x, &mut |g| add_into(g, &gx));
                }
                acc(*w, &mut |g| add_into(g, &gw));
                acc(*b, &mut |g| add_into(g, &gb));
            }
            Op::ConvTranspose2x2 { x, w, b } => {
                let (gx, gw, gb) =
                    kernels::conv_t2_backward(self.value(*x), self.value(*w), gy, self.wants(*x));
                if let Some(gx) = gx {
                    acc(*x, &mut |g| add_into(g, &gx));
                }
                acc(*w, &mut |g| add_into(g, &gw));
                acc(*b, &mut |g| add_into(g, &gb));
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |g| {
                for (&idx, &d) in argmax.iter().zip(gy) {
                    g[idx as usize] = g[idx as usize] + d;
                }
            }),
            Op::ConcatChannels(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4();
                let cb = self.value(*b).dims4()[1];
                let hw = h * w;
                let ct = ca + cb;
                acc(*a, &mut |g| {
                    for i in 0..n {
                        add_into(
                            &mut g[i * ca * hw..(i + 1) * ca * hw],
                            &gy[i * ct * hw..(i * ct + ca) * hw],
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..n {
                        add_into(
                            &mut g[i * cb * hw..(i + 1) * cb * hw],
                            &gy[(i * ct + ca) * hw..(i + 1) * ct * hw],
                        );
                    }
                });
            }
            Op::SoftmaxChannels(x) => {
                let gx = kernels::softmax_channels_backward(&node.value, gy);
                acc(*x, &mut |g| add_into(g, &gx));
            }
            Op::Norm { x, gamma, beta, stats } => {
                let (gx, gg, gb) =
                    kernels::norm_backward(stats, self.data(*gamma), gy, self.value(*x).dims4());
                acc(*x, &mut |g| add_into(g, &gx));
                acc(*gamma, &mut |g| add_into(g, &gg));
                acc(*beta, &mut |g| add_into(g, &gb));
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
