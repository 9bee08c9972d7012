//! A small reverse-mode differentiation engine.
//!
//! A [`Program`] is a topologically ordered list of tensor operations
//! built once per (configuration, input shape) combination and executed
//! many times. Runtime inputs enter through [`Op::Feed`] nodes; frozen
//! data (e.g. fixed filter banks) is baked in as [`Op::Constant`] nodes.
//!
//! All arithmetic is f64. Gradients flow only into nodes from which a
//! requested target is reachable; everything else is skipped.

use std::collections::BTreeMap;

use crate::kernels::{self, ConvSpec};
use crate::tensor::Tensor;

/// Handle to a node in a [`Program`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
pub enum Op {
    /// Runtime input, bound at execution time.
    Feed,
    /// Value baked into the program; never differentiated.
    Constant(Tensor),
    /// Parents: input, weight (kh, kw, cin/groups, cout), optional bias.
    Conv2d(ConvSpec),
    PixelUnshuffle { r: usize },
    PixelShuffle { r: usize },
    /// Parents: input, gamma, beta. Normalizes across the last dimension.
    LayerNorm { eps: f64 },
    ChannelReorder { groups: usize },
    /// Keep channels `from..to` of the last dimension.
    SliceLast { from: usize, to: usize },
    /// Concatenate all parents along the last dimension.
    ConcatLast,
    MatMul,
    Transpose,
    Reshape,
    SoftmaxRows,
    NormalizeRows { eps: f64 },
    Add,
    Sub,
    Mul,
    Div,
    /// Parents: tensor, scalar node; tensor * scalar.
    ScalarMul,
    /// Parents: tensor, scalar node; tensor + scalar.
    ScalarAdd,
    AddConst(f64),
    MulConst(f64),
    Sigmoid,
    Tanh,
    Abs,
    /// sqrt(x + eps), defined for x >= 0.
    SqrtEps(f64),
    MeanAll,
    SumAll,
    Clamp01,
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
}

/// Incrementally builds a [`Program`]. Shape errors are programmer
/// errors and panic with the offending node index.
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, parents, shape });
        id
    }

    pub fn feed(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Feed, vec![], shape.to_vec())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), vec![], shape)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: ConvSpec,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv input must be (h, w, c)");
        assert_eq!(ws.len(), 4, "conv weight must be (kh, kw, cin/g, cout)");
        assert_eq!(
            ws[2] * spec.groups,
            xs[2],
            "conv channel mismatch: weight {ws:?} on input {xs:?} with {} groups",
            spec.groups
        );
        assert_eq!(ws[3] % spec.groups, 0, "cout must divide by groups");
        let ho = kernels::conv_out_dim(xs[0], ws[0], spec.stride, spec.pad);
        let wo = kernels::conv_out_dim(xs[1], ws[1], spec.stride, spec.pad);
        let mut parents = vec![x, w];
        if let Some(bias) = b {
            assert_eq!(self.shape(bias), &[ws[3]], "bias shape mismatch");
            parents.push(bias);
        }
        self.push(Op::Conv2d(spec), parents, vec![ho, wo, ws[3]])
    }

    pub fn pixel_unshuffle(&mut self, x: NodeId, r: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        assert!(s[0] % r == 0 && s[1] % r == 0, "unshuffle needs h, w divisible by {r}");
        self.push(
            Op::PixelUnshuffle { r },
            vec![x],
            vec![s[0] / r, s[1] / r, s[2] * r * r],
        )
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        assert!(s[2] % (r * r) == 0, "shuffle needs channels divisible by {}", r * r);
        self.push(
            Op::PixelShuffle { r },
            vec![x],
            vec![s[0] * r, s[1] * r, s[2] / (r * r)],
        )
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], s)
    }

    pub fn channel_reorder(&mut self, x: NodeId, groups: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.last().unwrap() % groups, 0);
        self.push(Op::ChannelReorder { groups }, vec![x], s)
    }

    pub fn slice_last(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let mut s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        assert!(from < to && to <= c, "slice {from}..{to} out of range for {c} channels");
        *s.last_mut().unwrap() = to - from;
        self.push(Op::SliceLast { from, to }, vec![x], s)
    }

    pub fn concat_last(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let mut s = self.shape(xs[0]).to_vec();
        let mut c = 0;
        for &x in xs {
            let xs_ = self.shape(x);
            assert_eq!(&xs_[..xs_.len() - 1], &s[..s.len() - 1], "concat prefix mismatch");
            c += xs_.last().unwrap();
        }
        *s.last_mut().unwrap() = c;
        self.push(Op::ConcatLast, xs.to_vec(), s)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        self.push(Op::MatMul, vec![a, b], vec![sa[0], sb[1]])
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        self.push(Op::Transpose, vec![x], vec![s[1], s[0]])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let n: usize = self.shape(x).iter().product();
        assert_eq!(n, shape.iter().product::<usize>(), "reshape volume mismatch");
        self.push(Op::Reshape, vec![x], shape.to_vec())
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        self.push(Op::SoftmaxRows, vec![x], s)
    }

    pub fn normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        self.push(Op::NormalizeRows { eps }, vec![x], s)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        assert_eq!(self.shape(b), s.as_slice(), "elementwise shape mismatch");
        self.push(op, vec![a, b], s)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div, a, b)
    }

    pub fn scalar_mul(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s).iter().product::<usize>(), 1, "scale must be scalar");
        let shape = self.shape(x).to_vec();
        self.push(Op::ScalarMul, vec![x, s], shape)
    }

    pub fn scalar_add(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s).iter().product::<usize>(), 1, "shift must be scalar");
        let shape = self.shape(x).to_vec();
        self.push(Op::ScalarAdd, vec![x, s], shape)
    }

    pub fn add_const(&mut self, x: NodeId, k: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::AddConst(k), vec![x], s)
    }

    pub fn mul_const(&mut self, x: NodeId, k: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(Op::MulConst(k), vec![x], s)
    }

    fn unary(&mut self, op: Op, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.push(op, vec![x], s)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, x)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Abs, x)
    }

    pub fn sqrt_eps(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.unary(Op::SqrtEps(eps), x)
    }

    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Clamp01, x)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanAll, vec![x], vec![1])
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll, vec![x], vec![1])
    }

    /// x * silu(gate) where silu(g) = g * sigmoid(g).
    pub fn silu_gate(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let sg = self.sigmoid(gate);
        let silu = self.mul(gate, sg);
        self.mul(x, silu)
    }

    pub fn finish(self) -> Program {
        let mut last_use = vec![usize::MAX; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for p in &n.parents {
                last_use[p.0] = i;
            }
        }
        Program { nodes: self.nodes, last_use }
    }
}

/// A finished computation ready to run.
pub struct Program {
    nodes: Vec<Node>,
    last_use: Vec<usize>,
}

/// Node values retained from a forward pass.
pub struct Execution {
    values: Vec<Option<Tensor>>,
}

impl Execution {
    /// Value of `id`; panics if it was freed or never computed.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("node value not retained for this execution")
    }
}

impl Program {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Run the program keeping every intermediate (needed for backward).
    pub fn forward(&self, feeds: &BTreeMap<NodeId, Tensor>) -> Execution {
        self.run(feeds, None)
    }

    /// Run the program freeing intermediates as soon as their last
    /// consumer has executed; only `keep` nodes survive. Use for
    /// inference where memory matters and no backward pass follows.
    pub fn forward_inference(
        &self,
        feeds: &BTreeMap<NodeId, Tensor>,
        keep: &[NodeId],
    ) -> Execution {
        self.run(feeds, Some(keep))
    }

    fn run(&self, feeds: &BTreeMap<NodeId, Tensor>, keep: Option<&[NodeId]>) -> Execution {
        let mut values: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            let out = self.eval_node(i, node, &values, feeds);
            debug_assert_eq!(out.shape(), node.shape.as_slice(), "node {i} shape drift");
            values[i] = Some(out);
            if let Some(keep) = keep {
                for p in &node.parents {
                    if self.last_use[p.0] == i && !keep.contains(p) {
                        values[p.0] = None;
                    }
                }
            }
        }
        if let Some(keep) = keep {
            for (i, v) in values.iter_mut().enumerate() {
                let id = NodeId(i);
                if !keep.contains(&id) && self.last_use[i] == usize::MAX {
                    *v = None; // terminal nodes nobody asked for
                }
                let _ = v;
            }
        }
        Execution { values }
    }

    fn eval_node(
        &self,
        idx: usize,
        node: &Node,
        values: &[Option<Tensor>],
        feeds: &BTreeMap<NodeId, Tensor>,
    ) -> Tensor {
        let val = |id: NodeId| values[id.0].as_ref().expect("parent value missing");
        let p = &node.parents;
        match &node.op {
            Op::Feed => {
                let t = feeds
                    .get(&NodeId(idx))
                    .unwrap_or_else(|| panic!("feed {idx} not bound"));
                assert_eq!(t.shape(), node.shape.as_slice(), "feed {idx} shape mismatch");
                t.clone()
            }
            Op::Constant(t) => t.clone(),
            Op::Conv2d(spec) => {
                let b = p.get(2).map(|&id| val(id));
                kernels::conv2d(val(p[0]), val(p[1]), b, *spec)
            }
            Op::PixelUnshuffle { r } => kernels::pixel_unshuffle_t(val(p[0]), *r),
            Op::PixelShuffle { r } => kernels::pixel_shuffle_t(val(p[0]), *r),
            Op::LayerNorm { eps } => kernels::layer_norm(val(p[0]), val(p[1]), val(p[2]), *eps),
            Op::ChannelReorder { groups } => kernels::channel_reorder_t(val(p[0]), *groups, false),
            Op::SliceLast { from, to } => {
                let x = val(p[0]);
                let c = *x.shape().last().unwrap();
                let keep = to - from;
                let mut out = Tensor::zeros(&node.shape);
                for (orow, xrow) in out
                    .data_mut()
                    .chunks_exact_mut(keep)
                    .zip(x.data().chunks_exact(c))
                {
                    orow.copy_from_slice(&xrow[*from..*to]);
                }
                out
            }
            Op::ConcatLast => {
                let c_out = *node.shape.last().unwrap();
                let mut out = Tensor::zeros(&node.shape);
                let mut offset = 0;
                for &pid in p {
                    let x = val(pid);
                    let c = *x.shape().last().unwrap();
                    for (orow, xrow) in out
                        .data_mut()
                        .chunks_exact_mut(c_out)
                        .zip(x.data().chunks_exact(c))
                    {
                        orow[offset..offset + c].copy_from_slice(xrow);
                    }
                    offset += c;
                }
                out
            }
            Op::MatMul => val(p[0]).matmul(val(p[1])),
            Op::Transpose => val(p[0]).transposed(),
            Op::Reshape => val(p[0]).clone().reshaped(&node.shape).unwrap(),
            Op::SoftmaxRows => kernels::softmax_rows(val(p[0])),
            Op::NormalizeRows { eps } => kernels::normalize_rows(val(p[0]), *eps),
            Op::Add => zip_map(val(p[0]), val(p[1]), |a, b| a + b),
            Op::Sub => zip_map(val(p[0]), val(p[1]), |a, b| a - b),
            Op::Mul => zip_map(val(p[0]), val(p[1]), |a, b| a * b),
            Op::Div => zip_map(val(p[0]), val(p[1]), |a, b| a / b),
            Op::ScalarMul => {
                let s = val(p[1]).item();
                map(val(p[0]), |a| a * s)
            }
            Op::ScalarAdd => {
                let s = val(p[1]).item();
                map(val(p[0]), |a| a + s)
            }
            Op::AddConst(k) => map(val(p[0]), |a| a + k),
            Op::MulConst(k) => map(val(p[0]), |a| a * k),
            Op::Sigmoid => map(val(p[0]), |a| 1.0 / (1.0 + (-a).exp())),
            Op::Tanh => map(val(p[0]), f64::tanh),
            Op::Abs => map(val(p[0]), f64::abs),
            Op::SqrtEps(eps) => map(val(p[0]), |a| (a + eps).sqrt()),
            Op::MeanAll => {
                let x = val(p[0]);
                Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
            }
            Op::SumAll => Tensor::scalar(val(p[0]).data().iter().sum()),
            Op::Clamp01 => map(val(p[0]), |a| a.clamp(0.0, 1.0)),
        }
    }

    /// Reverse-mode gradients of scalar node `loss` with respect to each
    /// node in `wrt`. Nodes in `wrt` that `loss` does not depend on get a
    /// zero gradient of their shape. `exec` must come from [`forward`].
    ///
    /// [`forward`]: Program::forward
    pub fn backward(
        &self,
        exec: &Execution,
        loss: NodeId,
        wrt: &[NodeId],
    ) -> BTreeMap<NodeId, Tensor> {
        assert_eq!(
            self.nodes[loss.0].shape.iter().product::<usize>(),
            1,
            "loss must be scalar"
        );
        // propagate "a wrt node is reachable from here" forward
        let mut needs = vec![false; self.nodes.len()];
        for &w in wrt {
            needs[w.0] = true;
        }
        for i in 0..self.nodes.len() {
            if !needs[i] {
                needs[i] = self.nodes[i].parents.iter().any(|p| needs[p.0]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&self.nodes[loss.0].shape, 1.0));

        for i in (0..=loss.0).rev() {
            if !needs[i] {
                grads[i] = None;
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let keep_own = wrt.contains(&NodeId(i));
            self.accumulate_parents(i, &dy, exec, &needs, &mut grads);
            if keep_own {
                grads[i] = Some(dy);
            }
        }

        wrt.iter()
            .map(|&w| {
                let g = grads[w.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[w.0].shape));
                (w, g)
            })
            .collect()
    }

    fn accumulate_parents(
        &self,
        idx: usize,
        dy: &Tensor,
        exec: &Execution,
        needs: &[bool],
        grads: &mut Vec<Option<Tensor>>,
    ) {
        let node = &self.nodes[idx];
        let p = &node.parents;
        let val = |id: NodeId| exec.value(id);
        let add = |id: NodeId, g: Tensor, grads: &mut Vec<Option<Tensor>>| {
            if !needs[id.0] {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Feed | Op::Constant(_) => {}
            Op::Conv2d(spec) => {
                if needs[p[0].0] {
                    let dx = kernels::conv2d_grad_input(dy, val(p[1]), val(p[0]).shape(), *spec);
                    add(p[0], dx, grads);
                }
                if needs[p[1].0] {
                    let dw =
                        kernels::conv2d_grad_weight(dy, val(p[0]), val(p[1]).shape(), *spec);
                    add(p[1], dw, grads);
                }
                if let Some(&b) = p.get(2) {
                    if needs[b.0] {
                        add(b, kernels::conv2d_grad_bias(dy), grads);
                    }
                }
            }
            Op::PixelUnshuffle { r } => add(p[0], kernels::pixel_shuffle_t(dy, *r), grads),
            Op::PixelShuffle { r } => add(p[0], kernels::pixel_unshuffle_t(dy, *r), grads),
            Op::LayerNorm { eps } => {
                let (dx, dgamma, dbeta) =
                    kernels::layer_norm_grad(dy, val(p[0]), val(p[1]), *eps);
                add(p[0], dx, grads);
                add(p[1], dgamma, grads);
                add(p[2], dbeta, grads);
            }
            Op::ChannelReorder { groups } => {
                add(p[0], kernels::channel_reorder_t(dy, *groups, true), grads)
            }
            Op::SliceLast { from, to } => {
                let xs = val(p[0]).shape();
                let c = *xs.last().unwrap();
                let keep = to - from;
                let mut dx = Tensor::zeros(xs);
                for (dxrow, dyrow) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(dy.data().chunks_exact(keep))
                {
                    dxrow[*from..*to].copy_from_slice(dyrow);
                }
                add(p[0], dx, grads);
            }
            Op::ConcatLast => {
                let c_out = *node.shape.last().unwrap();
                let mut offset = 0;
                for &pid in p {
                    let c = *self.nodes[pid.0].shape.last().unwrap();
                    if needs[pid.0] {
                        let mut dx = Tensor::zeros(&self.nodes[pid.0].shape);
                        for (dxrow, dyrow) in dx
                            .data_mut()
                            .chunks_exact_mut(c)
                            .zip(dy.data().chunks_exact(c_out))
                        {
                            dxrow.copy_from_slice(&dyrow[offset..offset + c]);
                        }
                        add(pid, dx, grads);
                    }
                    offset += c;
                }
            }
            Op::MatMul => {
                if needs[p[0].0] {
                    add(p[0], dy.matmul(&val(p[1]).transposed()), grads);
                }
                if needs[p[1].0] {
                    add(p[1], val(p[0]).transposed().matmul(dy), grads);
                }
            }
            Op::Transpose => add(p[0], dy.transposed(), grads),
            Op::Reshape => {
                let dx = dy.clone().reshaped(&self.nodes[p[0].0].shape).unwrap();
                add(p[0], dx, grads);
            }
            Op::SoftmaxRows => {
                add(p[0], kernels::softmax_rows_grad(dy, val(NodeId(idx))), grads)
            }
            Op::NormalizeRows { eps } => {
                add(p[0], kernels::normalize_rows_grad(dy, val(p[0]), *eps), grads)
            }
            Op::Add => {
                add(p[0], dy.clone(), grads);
                add(p[1], dy.clone(), grads);
            }
            Op::Sub => {
                add(p[0], dy.clone(), grads);
                if needs[p[1].0] {
                    add(p[1], map(dy, |v| -v), grads);
                }
            }
            Op::Mul => {
                if needs[p[0].0] {
                    add(p[0], zip_map(dy, val(p[1]), |g, b| g * b), grads);
                }
                if needs[p[1].0] {
                    add(p[1], zip_map(dy, val(p[0]), |g, a| g * a), grads);
                }
            }
            Op::Div => {
                if needs[p[0].0] {
                    add(p[0], zip_map(dy, val(p[1]), |g, b| g / b), grads);
                }
                if needs[p[1].0] {
                    let a = val(p[0]);
                    let b = val(p[1]);
                    let mut g = Tensor::zeros(b.shape());
                    for (((gv, dyv), av), bv) in g
                        .data_mut()
                        .iter_mut()
                        .zip(dy.data())
                        .zip(a.data())
                        .zip(b.data())
                    {
                        *gv = -dyv * av / (bv * bv);
                    }
                    add(p[1], g, grads);
                }
            }
            Op::ScalarMul => {
                let s = val(p[1]).item();
                if needs[p[0].0] {
                    add(p[0], map(dy, |g| g * s), grads);
                }
                if needs[p[1].0] {
                    let t = val(p[0]);
                    let ds: f64 = dy.data().iter().zip(t.data()).map(|(g, v)| g * v).sum();
                    add(p[1], Tensor::full(&self.nodes[p[1].0].shape, ds), grads);
                }
            }
            Op::ScalarAdd => {
                add(p[0], dy.clone(), grads);
                if needs[p[1].0] {
                    let ds: f64 = dy.data().iter().sum();
                    add(p[1], Tensor::full(&self.nodes[p[1].0].shape, ds), grads);
                }
            }
            Op::AddConst(_) => add(p[0], dy.clone(), grads),
            Op::MulConst(k) => {
                let k = *k;
                add(p[0], map(dy, |g| g * k), grads);
            }
            Op::Sigmoid => {
                let y = val(NodeId(idx));
                add(p[0], zip_map(dy, y, |g, yv| g * yv * (1.0 - yv)), grads);
            }
            Op::Tanh => {
                let y = val(NodeId(idx));
                add(p[0], zip_map(dy, y, |g, yv| g * (1.0 - yv * yv)), grads);
            }
            Op::Abs => {
                let x = val(p[0]);
                add(
                    p[0],
                    zip_map(dy, x, |g, xv| {
                        if xv > 0.0 {
                            g
                        } else if xv < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                    grads,
                );
            }
            Op::SqrtEps(_) => {
                let y = val(NodeId(idx));
                add(p[0], zip_map(dy, y, |g, yv| g / (2.0 * yv)), grads);
            }
            Op::MeanAll => {
                let n = self.nodes[p[0].0].shape.iter().product::<usize>() as f64;
                let g = dy.item() / n;
                add(p[0], Tensor::full(&self.nodes[p[0].0].shape, g), grads);
            }
            Op::SumAll => {
                let g = dy.item();
                add(p[0], Tensor::full(&self.nodes[p[0].0].shape, g), grads);
            }
            Op::Clamp01 => {
                // pass-through on the closed interval so parameters whose
                // output sits exactly on a bound still receive signal
                let x = val(p[0]);
                add(
                    p[0],
                    zip_map(dy, x, |g, xv| if (0.0..=1.0).contains(&xv) { g } else { 0.0 }),
                    grads,
                );
            }
        }
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = f(*v);
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = Tensor::zeros(a.shape());
    for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = f(*x, *y);
    }
    out
}

/// Central-difference derivative of scalar node `loss` with respect to
/// component `idx` of feed `wrt`, evaluated by running the forward pass
/// twice. Useful for validating analytic gradients.
pub fn finite_diff(
    program: &Program,
    feeds: &BTreeMap<NodeId, Tensor>,
    loss: NodeId,
    wrt: NodeId,
    idx: usize,
    step: f64,
) -> f64 {
    let eval = |delta: f64| {
        let mut fs = feeds.clone();
        let t = fs.get_mut(&wrt).expect("wrt must be a bound feed");
        t.data_mut()[idx] += delta;
        let exec = program.forward(&fs);
        exec.value(loss).item()
    };
    (eval(step) - eval(-step)) / (2.0 * step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every component of every feed against central differences.
    fn gradcheck(
        build: impl Fn(&mut GraphBuilder, &[NodeId]) -> NodeId,
        feed_shapes: &[&[usize]],
        seed: u64,
        tol: f64,
    ) {
        let mut gb = GraphBuilder::new();
        let feeds_ids: Vec<NodeId> = feed_shapes.iter().map(|s| gb.feed(s)).collect();
        let out = build(&mut gb, &feeds_ids);
        let loss = gb.mean_all(out);
        let program = gb.finish();

        let mut feeds = BTreeMap::new();
        for (i, (&id, shape)) in feeds_ids.iter().zip(feed_shapes).enumerate() {
            feeds.insert(id, rand_t(shape, seed + i as u64));
        }
        let exec = program.forward(&feeds);
        let grads = program.backward(&exec, loss, &feeds_ids);
        for &id in &feeds_ids {
            let g = &grads[&id];
            for idx in 0..g.len() {
                let fd = finite_diff(&program, &feeds, loss, id, idx, 1e-4);
                let a = g.data()[idx];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "feed {id:?} [{idx}]: analytic {a} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_conv_stride_pad() {
        gradcheck(
            |gb, f| gb.conv2d(f[0], f[1], Some(f[2]), ConvSpec { stride: 2, pad: 1, groups: 1 }),
            &[&[5, 5, 2], &[3, 3, 2, 3], &[3]],
            1,
            1e-5,
        );
    }

    #[test]
    fn grad_conv_depthwise() {
        gradcheck(
            |gb, f| gb.conv2d(f[0], f[1], None, ConvSpec { stride: 1, pad: 1, groups: 4 }),
            &[&[4, 4, 4], &[3, 3, 1, 4]],
            2,
            1e-5,
        );
    }

    #[test]
    fn grad_conv_pointwise() {
        gradcheck(
            |gb, f| gb.conv2d(f[0], f[1], Some(f[2]), ConvSpec { stride: 1, pad: 0, groups: 1 }),
            &[&[3, 3, 4], &[1, 1, 4, 6], &[6]],
            3,
            1e-5,
        );
    }

    #[test]
    fn grad_shuffles() {
        gradcheck(|gb, f| gb.pixel_unshuffle(f[0], 2), &[&[4, 4, 3]], 4, 1e-6);
        gradcheck(|gb, f| gb.pixel_shuffle(f[0], 2), &[&[2, 2, 8]], 5, 1e-6);
    }

    #[test]
    fn grad_layer_norm() {
        gradcheck(
            |gb, f| {
                let ln = gb.layer_norm(f[0], f[1], f[2], 1e-6);
                gb.mul(ln, ln) // square so the mean has curvature in x
            },
            &[&[2, 2, 6], &[6], &[6]],
            6,
            1e-4,
        );
    }

    #[test]
    fn grad_reorder_slice_concat() {
        gradcheck(
            |gb, f| {
                let r = gb.channel_reorder(f[0], 2);
                let a = gb.slice_last(r, 0, 2);
                let b = gb.slice_last(r, 2, 4);
                let cat = gb.concat_last(&[a, b, f[1]]);
                gb.mul(cat, cat)
            },
            &[&[2, 2, 4], &[2, 2, 3]],
            7,
            1e-5,
        );
    }

    #[test]
    fn grad_matmul_transpose() {
        gradcheck(
            |gb, f| {
                let t = gb.transpose(f[1]);
                let m = gb.matmul(f[0], t);
                gb.mul(m, m)
            },
            &[&[3, 4], &[2, 4]],
            8,
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_and_normalize() {
        gradcheck(
            |gb, f| {
                let s = gb.softmax_rows(f[0]);
                gb.mul(s, s)
            },
            &[&[3, 5]],
            9,
            1e-4,
        );
        gradcheck(
            |gb, f| {
                let n = gb.normalize_rows(f[0], 1e-8);
                gb.mul(n, n)
            },
            &[&[3, 5]],
            10,
            1e-4,
        );
    }

    #[test]
    fn grad_elementwise_chain() {
        gradcheck(
            |gb, f| {
                let a = gb.add(f[0], f[1]);
                let s = gb.sub(a, f[2]);
                let m = gb.mul(s, f[0]);
                let shifted = gb.add_const(f[2], 3.0); // keep divisor away from 0
                gb.div(m, shifted)
            },
            &[&[2, 3], &[2, 3], &[2, 3]],
            11,
            1e-5,
        );
    }

    #[test]
    fn grad_scalar_broadcast() {
        gradcheck(
            |gb, f| {
                let m = gb.mean_all(f[0]);
                let neg = gb.mul_const(m, -1.0);
                let centered = gb.scalar_add(f[0], neg);
                let scaled = gb.scalar_mul(centered, f[1]);
                gb.mul(scaled, scaled)
            },
            &[&[2, 3], &[1]],
            12,
            1e-5,
        );
    }

    #[test]
    fn grad_activations() {
        gradcheck(
            |gb, f| {
                let s = gb.sigmoid(f[0]);
                let t = gb.tanh(s);
                let a = gb.abs(f[1]);
                let q = gb.mul(a, a);
                let r = gb.sqrt_eps(q, 1e-3);
                let g = gb.silu_gate(t, f[1]);
                gb.add(g, r)
            },
            &[&[2, 4], &[2, 4]],
            13,
            1e-4,
        );
    }

    #[test]
    fn grad_sum_and_const_ops() {
        gradcheck(
            |gb, f| {
                let k = gb.mul_const(f[0], 2.5);
                let s = gb.add_const(k, -0.25);
                let t = gb.mul(s, s);
                gb.sum_all(t)
            },
            &[&[3, 3]],
            14,
            1e-5,
        );
    }

    #[test]
    fn clamp_gradient_mask() {
        let mut gb = GraphBuilder::new();
        let x = gb.feed(&[4]);
        let c = gb.clamp01(x);
        let loss = gb.sum_all(c);
        let program = gb.finish();
        let mut feeds = BTreeMap::new();
        feeds.insert(x, Tensor::from_vec(&[4], vec![-0.5, 0.0, 0.7, 1.3]).unwrap());
        let exec = program.forward(&feeds);
        let grads = program.backward(&exec, loss, &[x]);
        assert_eq!(grads[&x].data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn gradient_skips_unreachable_feeds() {
        let mut gb = GraphBuilder::new();
        let x = gb.feed(&[3]);
        let unused = gb.feed(&[2]);
        let sq = gb.mul(x, x);
        let loss = gb.sum_all(sq);
        let program = gb.finish();
        let mut feeds = BTreeMap::new();
        feeds.insert(x, Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        feeds.insert(unused, Tensor::from_vec(&[2], vec![5.0, 6.0]).unwrap());
        let exec = program.forward(&feeds);
        let grads = program.backward(&exec, loss, &[x, unused]);
        assert_eq!(grads[&x].data(), &[2.0, 4.0, 6.0]);
        // untouched by the loss: gradient exists and is exactly zero
        assert_eq!(grads[&unused].data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut gb = GraphBuilder::new();
        let x = gb.feed(&[2]);
        let k = gb.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let m = gb.mul(x, k);
        let loss = gb.sum_all(m);
        let program = gb.finish();
        let mut feeds = BTreeMap::new();
        feeds.insert(x, Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let exec = program.forward(&feeds);
        let grads = program.backward(&exec, loss, &[x]);
        assert_eq!(grads[&x].data(), &[3.0, 4.0]);
    }

    #[test]
    fn inference_mode_frees_intermediates_but_keeps_requested() {
        let mut gb = GraphBuilder::new();
        let x = gb.feed(&[8]);
        let a = gb.mul(x, x);
        let b = gb.add_const(a, 1.0);
        let out = gb.tanh(b);
        let program = gb.finish();
        let mut feeds = BTreeMap::new();
        feeds.insert(x, Tensor::full(&[8], 0.5));
        let exec = program.forward_inference(&feeds, &[out]);
        let y = exec.value(out);
        assert_eq!(y.len(), 8);
        assert!((y.data()[0] - (1.25f64).tanh()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        let mut gb = GraphBuilder::new();
        let x = gb.feed(&[16, 16, 8]);
        let w = gb.feed(&[3, 3, 8, 8]);
        let c = gb.conv2d(x, w, None, ConvSpec { stride: 1, pad: 1, groups: 1 });
        let t = gb.tanh(c);
        let loss = gb.mean_all(t);
        let program = gb.finish();
        let mut feeds = BTreeMap::new();
        feeds.insert(x, rand_t(&[16, 16, 8], 21));
        feeds.insert(w, rand_t(&[3, 3, 8, 8], 22));
        let a = program.forward(&feeds).value(loss).item();
        let b = program.forward(&feeds).value(loss).item();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
