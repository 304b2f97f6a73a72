//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates gradients for every parameter leaf.
//!
//! An inference graph ([`Graph::inference`]) records nothing, so intermediate
//! activations are freed as soon as their `Var` handles drop.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};
use std::rc::Rc;

use crate::error::{dim_err, LaffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Identifies a learnable tensor inside a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// A value flowing through a graph.
#[derive(Clone, Debug)]
pub struct Var<T> {
    node: Option<NodeId>,
    value: Rc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }

    /// The single element of a scalar-shaped value.
    pub fn item(&self) -> T {
        self.value.data()[0]
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    GlobalMaxPool { x: NodeId, argmax: Vec<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ChannelScale { x: NodeId, s: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Scale(NodeId, T),
    Offset(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Blur { x: NodeId, taps: Rc<Vec<T>> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Blur { .. } => "blur",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    /// Digest of every piecewise branch taken, when tracking.
    branches: Option<RefCell<DefaultHasher>>,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct GradStore<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    /// Sets the gradient of `id`, replacing any previous value.
    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Scalar> Default for GradStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph that supports [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            branches: None,
        }
    }

    /// A forward-only graph.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            branches: None,
        }
    }

    /// A forward-only graph that digests which side of every kink each
    /// element falls on (ReLU and `abs` signs, max-pool winners). Two
    /// evaluations with equal digests lie on one smooth piece.
    pub fn branch_tracking() -> Self {
        Self {
            branches: Some(RefCell::new(DefaultHasher::new())),
            ..Self::inference()
        }
    }

    pub fn branch_digest(&self) -> Option<u64> {
        self.branches.as_ref().map(|h| h.borrow().finish())
    }

    fn note_signs(&self, x: &Tensor<T>) {
        if let Some(h) = &self.branches {
            let mut h = h.borrow_mut();
            for &v in x.data() {
                h.write_u8(u8::from(v > T::zero()) | (u8::from(v < T::zero()) << 1));
            }
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Result<Var<T>> {
        if !value.is_finite() {
            return Err(LaffError::Numeric {
                node: format!("{} (node {})", op.name(), self.len()),
                detail: "non-finite value in forward output".into(),
            });
        }
        let value = Rc::new(value);
        if !self.recording {
            return Ok(Var { node: None, value });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => op_inputs(&op).iter().any(|&i| nodes[i].requires_grad),
        };
        let id = nodes.len();
        nodes.push(Node {
            op,
            value: Rc::clone(&value),
            requires_grad,
        });
        Ok(Var {
            node: Some(id),
            value,
        })
    }

    fn id(&self, v: &Var<T>) -> NodeId {
        // Vars created by an inference graph carry no node; in a recording
        // graph every Var has one.
        v.node.unwrap_or(usize::MAX)
    }

    /// A constant leaf. No gradient flows into it.
    pub fn input(&self, t: Tensor<T>) -> Var<T> {
        self.push(Op::Input, t).expect("inputs must be finite")
    }

    /// A constant leaf, rejecting non-finite data.
    pub fn try_input(&self, t: Tensor<T>) -> Result<Var<T>> {
        self.push(Op::Input, t)
    }

    /// A learnable leaf whose gradient is reported under `id`.
    pub fn param(&self, id: ParamId, t: Tensor<T>) -> Result<Var<T>> {
        self.push(Op::Param(id), t)
    }

    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, padding: usize) -> Result<Var<T>> {
        if x.value.rank() != 4 || w.value.rank() != 4 {
            return Err(dim_err!(
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ));
        }
        let geom = ConvGeom::new(x.value.dims4(), w.value.dims4(), padding as isize)?;
        if let Some(b) = b {
            if b.value.len() != geom.cout {
                return Err(dim_err!(
                    "conv bias has {} entries for {} output channels",
                    b.value.len(),
                    geom.cout
                ));
            }
        }
        let out = kernels::conv2d(
            x.value.data(),
            w.value.data(),
            b.map(|b| b.value.data()),
            &geom,
        );
        let shape = vec![geom.batch, geom.cout, geom.ho, geom.wo];
        self.push(
            Op::Conv2d {
                x: self.id(x),
                w: self.id(w),
                b: b.map(|b| self.id(b)),
                geom,
            },
            Tensor::from_parts(shape, out),
        )
    }

    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(dim_err!("linear expects [B, Cin] and [Cout, Cin], got {xs:?} and {ws:?}"));
        }
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        if ws[1] != cin {
            return Err(dim_err!("linear weight expects {} inputs, got {cin}", ws[1]));
        }
        if let Some(b) = b {
            if b.value.len() != cout {
                return Err(dim_err!("linear bias has {} entries for {cout} outputs", b.value.len()));
            }
        }
        let out = kernels::linear(
            x.value.data(),
            w.value.data(),
            b.map(|b| b.value.data()),
            batch,
            cin,
            cout,
        );
        self.push(
            Op::Linear {
                x: self.id(x),
                w: self.id(w),
                b: b.map(|b| self.id(b)),
            },
            Tensor::from_parts(vec![batch, cout], out),
        )
    }

    /// `[B, C, H, W] -> [B, C]` maximum over each spatial plane.
    pub fn global_max_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        if x.value.rank() != 4 {
            return Err(dim_err!("global_max_pool expects rank 4, got {:?}", x.shape()));
        }
        let [b, c, h, w] = x.value.dims4();
        let (vals, argmax) = kernels::global_max_pool(x.value.data(), b * c, h * w);
        if let Some(hs) = &self.branches {
            let mut hs = hs.borrow_mut();
            argmax.iter().for_each(|&i| hs.write_usize(i));
        }
        self.push(
            Op::GlobalMaxPool { x: self.id(x), argmax },
            Tensor::from_parts(vec![b, c], vals),
        )
    }

    fn binary(&self, a: &Var<T>, b: &Var<T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<T>> {
        let out = a.value.zip_map(&b.value, f)?;
        self.push(op, out)
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(a, b, |x, y| x + y, Op::Add(self.id(a), self.id(b)))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(a, b, |x, y| x - y, Op::Sub(self.id(a), self.id(b)))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(a, b, |x, y| x * y, Op::Mul(self.id(a), self.id(b)))
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(a, b, |x, y| x / y, Op::Div(self.id(a), self.id(b)))
    }

    /// `out[b,c,h,w] = x[b,c,h,w] * s[b,c]`.
    pub fn channel_scale(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let [b, c, h, w] = x.value.dims4();
        if x.value.rank() != 4 || s.shape() != [b, c] {
            return Err(dim_err!(
                "channel_scale needs x [B,C,H,W] and s [B,C], got {:?} and {:?}",
                x.shape(),
                s.shape()
            ));
        }
        let plane = h * w;
        let sd = s.value.data();
        let data = x
            .value
            .data()
            .chunks(plane)
            .zip(sd)
            .flat_map(|(pl, &sc)| pl.iter().map(move |&v| v * sc))
            .collect();
        self.push(
            Op::ChannelScale { x: self.id(x), s: self.id(s) },
            Tensor::from_parts(x.shape().to_vec(), data),
        )
    }

    pub fn activation(&self, x: &Var<T>, kind: Activation) -> Result<Var<T>> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.note_signs(&x.value);
        self.push(Op::Relu(self.id(x)), x.value.map(|v| v.max(T::zero())))
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        self.push(Op::Sigmoid(self.id(x)), x.value.map(sigmoid))
    }

    pub fn exp(&self, x: &Var<T>) -> Result<Var<T>> {
        self.push(Op::Exp(self.id(x)), x.value.map(|v| v.exp()))
    }

    pub fn sqrt(&self, x: &Var<T>) -> Result<Var<T>> {
        self.push(Op::Sqrt(self.id(x)), x.value.map(|v| v.sqrt()))
    }

    pub fn abs(&self, x: &Var<T>) -> Result<Var<T>> {
        self.note_signs(&x.value);
        self.push(Op::Abs(self.id(x)), x.value.map(|v| v.abs()))
    }

    pub fn scale(&self, x: &Var<T>, c: T) -> Result<Var<T>> {
        self.push(Op::Scale(self.id(x), c), x.value.map(|v| v * c))
    }

    pub fn offset(&self, x: &Var<T>, c: T) -> Result<Var<T>> {
        self.push(Op::Offset(self.id(x)), x.value.map(|v| v + c))
    }

    pub fn sum(&self, x: &Var<T>) -> Result<Var<T>> {
        self.push(Op::Sum(self.id(x)), Tensor::scalar(x.value.sum()))
    }

    pub fn mean(&self, x: &Var<T>) -> Result<Var<T>> {
        self.push(Op::Mean(self.id(x)), Tensor::scalar(x.value.mean()))
    }

    pub fn reduce(&self, x: &Var<T>, kind: Reduction) -> Result<Var<T>> {
        match kind {
            Reduction::Sum => self.sum(x),
            Reduction::Mean => self.mean(x),
        }
    }

    /// Per-plane "valid" correlation with the outer product `taps ⊗ taps`.
    pub fn blur_valid(&self, x: &Var<T>, taps: Rc<Vec<T>>) -> Result<Var<T>> {
        let [b, c, h, w] = x.value.dims4();
        let n = taps.len();
        if h < n || w < n {
            return Err(dim_err!("{h}x{w} plane is smaller than the {n}x{n} window"));
        }
        let out = kernels::blur_valid(x.value.data(), b * c, h, w, &taps);
        self.push(
            Op::Blur { x: self.id(x), taps },
            Tensor::from_parts(vec![b, c, h + 1 - n, w + 1 - n], out),
        )
    }

    /// Gradients of `sum(seed ⊙ output)` with respect to every parameter leaf.
    pub fn backward(&self, output: &Var<T>, seed: &Tensor<T>) -> Result<GradStore<T>> {
        if !self.recording {
            return Err(LaffError::State(
                "backward called on an inference graph (nothing was recorded)".into(),
            ));
        }
        let out_id = output
            .node
            .ok_or_else(|| LaffError::State("output var does not belong to a recording graph".into()))?;
        let nodes = self.nodes.borrow();
        if out_id >= nodes.len() || !Rc::ptr_eq(&nodes[out_id].value, &output.value) {
            return Err(LaffError::State("output var was recorded by a different graph".into()));
        }
        if seed.shape() != output.shape() {
            return Err(dim_err!(
                "seed shape {:?} differs from output shape {:?}",
                seed.shape(),
                output.shape()
            ));
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(out_id + 1);
        grads.resize_with(out_id + 1, || None);
        grads[out_id] = Some(seed.clone());
        let mut store = BTreeMap::new();

        for id in (0..=out_id).rev() {
            let Some(up) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if !up.is_finite() {
                return Err(LaffError::Numeric {
                    node: format!("{} (node {id})", node.op.name()),
                    detail: "non-finite gradient".into(),
                });
            }
            let mut send = |target: NodeId, g: Tensor<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.accumulate(&g),
                    slot => *slot = Some(g),
                }
            };
            let val = |i: NodeId| -> &Tensor<T> { &nodes[i].value };

            match &node.op {
                Op::Input => {}
                Op::Param(pid) => match store.get_mut(pid) {
                    Some(acc) => Tensor::accumulate(acc, &up),
                    None => {
                        store.insert(*pid, up);
                    }
                },
                Op::Conv2d { x, w, b, geom } => {
                    if nodes[*w].requires_grad || b.is_some_and(|b| nodes[b].requires_grad) {
                        let (dw, db) = kernels::conv2d_weight_grad(val(*x).data(), up.data(), geom);
                        if let Some(b) = b {
                            send(*b, Tensor::from_parts(val(*b).shape().to_vec(), db));
                        }
                        send(*w, Tensor::from_parts(val(*w).shape().to_vec(), dw));
                    }
                    if nodes[*x].requires_grad {
                        let dx = kernels::conv2d_input_grad(val(*w).data(), up.data(), geom);
                        send(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = val(*x);
                    let ws = val(*w);
                    let (batch, cin) = (xs.shape()[0], xs.shape()[1]);
                    let cout = ws.shape()[0];
                    let u = up.data();
                    if nodes[*x].requires_grad {
                        let mut dx = vec![T::zero(); batch * cin];
                        for bi in 0..batch {
                            for o in 0..cout {
                                let g = u[bi * cout + o];
                                for c in 0..cin {
                                    dx[bi * cin + c] = dx[bi * cin + c] + g * ws.data()[o * cin + c];
                                }
                            }
                        }
                        send(*x, Tensor::from_parts(xs.shape().to_vec(), dx));
                    }
                    if nodes[*w].requires_grad {
                        let mut dw = vec![T::zero(); cout * cin];
                        for bi in 0..batch {
                            for o in 0..cout {
                                let g = u[bi * cout + o];
                                for c in 0..cin {
                                    dw[o * cin + c] = dw[o * cin + c] + g * xs.data()[bi * cin + c];
                                }
                            }
                        }
                        send(*w, Tensor::from_parts(ws.shape().to_vec(), dw));
                    }
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); cout];
                        for bi in 0..batch {
                            for o in 0..cout {
                                db[o] = db[o] + u[bi * cout + o];
                            }
                        }
                        send(*b, Tensor::from_parts(vec![cout], db));
                    }
                }
                Op::GlobalMaxPool { x, argmax } => {
                    let xs = val(*x);
                    let [_, _, h, w] = xs.dims4();
                    let mut dx = vec![T::zero(); xs.len()];
                    for (plane, (&i, &g)) in argmax.iter().zip(up.data()).enumerate() {
                        dx[plane * h * w + i] = g;
                    }
                    send(*x, Tensor::from_parts(xs.shape().to_vec(), dx));
                }
                Op::Add(a, b) => {
                    send(*a, up.clone());
                    send(*b, up);
                }
                Op::Sub(a, b) => {
                    send(*b, up.map(|v| -v));
                    send(*a, up);
                }
                Op::Mul(a, b) => {
                    send(*a, up.zip_map(val(*b), |g, y| g * y)?);
                    send(*b, up.zip_map(val(*a), |g, x| g * x)?);
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    send(*a, up.zip_map(bv, |g, y| g / y)?);
                    // d(a/b)/db = -out / b
                    let db = up
                        .zip_map(&node.value, |g, q| g * q)?
                        .zip_map(bv, |gq, y| -gq / y)?;
                    send(*b, db);
                }
                Op::ChannelScale { x, s } => {
                    let xs = val(*x);
                    let sv = val(*s);
                    let [_, _, h, w] = xs.dims4();
                    let plane = h * w;
                    if nodes[*x].requires_grad {
                        let dx = up
                            .data()
                            .chunks(plane)
                            .zip(sv.data())
                            .flat_map(|(pl, &sc)| pl.iter().map(move |&g| g * sc))
                            .collect();
                        send(*x, Tensor::from_parts(xs.shape().to_vec(), dx));
                    }
                    if nodes[*s].requires_grad {
                        let ds = up
                            .data()
                            .chunks(plane)
                            .zip(xs.data().chunks(plane))
                            .map(|(g, xv)| g.iter().zip(xv).fold(T::zero(), |a, (&g, &x)| a + g * x))
                            .collect();
                        send(*s, Tensor::from_parts(sv.shape().to_vec(), ds));
                    }
                }
                Op::Relu(x) => {
                    send(*x, up.zip_map(val(*x), |g, v| if v > T::zero() { g } else { T::zero() })?);
                }
                Op::Sigmoid(x) => {
                    send(*x, up.zip_map(&node.value, |g, s| g * s * (T::one() - s))?);
                }
                Op::Exp(x) => {
                    send(*x, up.zip_map(&node.value, |g, e| g * e)?);
                }
                Op::Sqrt(x) => {
                    let two = T::one() + T::one();
                    send(*x, up.zip_map(&node.value, |g, r| g / (two * r))?);
                }
                Op::Abs(x) => {
                    // subgradient 0 at the origin
                    send(*x, up.zip_map(val(*x), |g, v| g * sign(v))?);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    send(*x, up.map(|g| g * c));
                }
                Op::Offset(x) => send(*x, up),
                Op::Sum(x) => {
                    let g = up.data()[0];
                    send(*x, Tensor::from_parts(val(*x).shape().to_vec(), vec![g; val(*x).len()]));
                }
                Op::Mean(x) => {
                    let n = T::from_usize(val(*x).len()).unwrap();
                    let g = up.data()[0] / n;
                    send(*x, Tensor::from_parts(val(*x).shape().to_vec(), vec![g; val(*x).len()]));
                }
                Op::Blur { x, taps } => {
                    let [b, c, h, w] = val(*x).dims4();
                    let dx = kernels::blur_valid_grad(up.data(), b * c, h, w, taps);
                    send(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
            }
        }

        for (pid, g) in &store {
            if !g.is_finite() {
                return Err(LaffError::Numeric {
                    node: format!("param {}", pid.0),
                    detail: "non-finite gradient".into(),
                });
            }
        }
        Ok(GradStore { grads: store })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

fn op_inputs<T>(op: &Op<T>) -> Vec<NodeId> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::GlobalMaxPool { x, .. } | Op::Blur { x, .. } => vec![*x],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::ChannelScale { x, s } => vec![*x, *s],
        Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Exp(x)
        | Op::Sqrt(x)
        | Op::Abs(x)
        | Op::Scale(x, _)
        | Op::Offset(x)
        | Op::Sum(x)
        | Op::Mean(x) => vec![*x],
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    // split by sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_pointwise_conv() {
        let g = Graph::<f64>::inference();
        let x = g.input(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let w = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv2d(&x, &w, Some(&b), 0).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn box_filter_window_sums() {
        let g = Graph::<f64>::inference();
        let x = g.input(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let w = g.input(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv2d(&x, &w, Some(&b), 1).unwrap();
        let expected = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(y.value().data(), &expected);
        // one centre, four edge and four corner windows
        let oracle: f64 = (0..3i32)
            .flat_map(|r| (0..3i32).map(move |c| (r, c)))
            .map(|(r, c)| {
                let rows = (r - 1).max(0)..=(r + 1).min(2);
                let cols = (c - 1).max(0)..=(c + 1).min(2);
                (rows.count() * cols.count()) as f64
            })
            .sum::<f64>()
            / 9.0;
        assert_eq!(oracle, 49.0 / 9.0);
        let m = g.mean(&y).unwrap();
        assert!((m.item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn same_padding_preserves_table_sizes() {
        let g = Graph::<f32>::inference();
        let x = g.input(Tensor::zeros(&[1, 16, 256, 256]).unwrap());
        let w = g.input(Tensor::zeros(&[16, 16, 3, 3]).unwrap());
        let y = g.conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(y.shape(), &[1, 16, 256, 256]);
        let p = g.global_max_pool(&y).unwrap();
        assert_eq!(p.shape(), &[1, 16]);
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 3, 8, 8]).unwrap());
        let w = g.input(Tensor::zeros(&[16, 4, 3, 3]).unwrap());
        assert!(matches!(g.conv2d(&x, &w, None, 1), Err(LaffError::Dimension(_))));
        let w = g.input(Tensor::zeros(&[16, 3, 4, 4]).unwrap());
        assert!(matches!(g.conv2d(&x, &w, None, 1), Err(LaffError::Config(_))));
    }

    #[test]
    fn linear_examples() {
        let g = Graph::<f64>::inference();
        let x = g.input(t(&[1, 2], &[1.0, 2.0]));
        let w = g.input(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
        let b = g.input(t(&[2], &[0.0, 1.0]));
        let y = g.linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.value().data(), &[3.0, 3.0]);

        let mut eye = vec![0.0; 256];
        for i in 0..16 {
            eye[i * 16 + i] = 1.0;
        }
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.37 - 2.0).collect();
        let x = g.input(t(&[1, 16], &v));
        let w = g.input(t(&[16, 16], &eye));
        assert_eq!(g.linear(&x, &w, None).unwrap().value().data(), &v[..]);
    }

    #[test]
    fn max_pool_examples() {
        let g = Graph::<f64>::inference();
        let x = g.input(Tensor::full(&[2, 3, 4, 5], 0.3).unwrap());
        let p = g.global_max_pool(&x).unwrap();
        assert!(p.value().data().iter().all(|&v| v == 0.3));
        let x = g.input(t(&[1, 1, 1, 3], &[-5.0, 2.0, 0.0]));
        assert_eq!(g.global_max_pool(&x).unwrap().item(), 2.0);
    }

    #[test]
    fn activations() {
        let g = Graph::<f64>::inference();
        let x = g.input(t(&[4], &[-1.0, 2.0, 0.0, 3f64.ln()]));
        assert_eq!(g.relu(&x).unwrap().value().data()[..2], [0.0, 2.0]);
        let s = g.sigmoid(&x).unwrap();
        assert_eq!(s.value().data()[2], 0.5);
        assert!((s.value().data()[3] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn channel_scale_identities() {
        let g = Graph::<f64>::inference();
        let data: Vec<f64> = (0..24).map(|i| i as f64 - 7.5).collect();
        let x = g.input(t(&[2, 3, 2, 2], &data));
        let ones = g.input(Tensor::ones(&[2, 3]).unwrap());
        let zeros = g.input(Tensor::zeros(&[2, 3]).unwrap());
        assert_eq!(g.channel_scale(&x, &ones).unwrap().value(), x.value());
        assert!(g.channel_scale(&x, &zeros).unwrap().value().data().iter().all(|&v| v == 0.0));
        let bad = g.input(Tensor::ones(&[2, 4]).unwrap());
        assert!(g.channel_scale(&x, &bad).is_err());
    }

    #[test]
    fn reductions() {
        let g = Graph::<f64>::inference();
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(g.reduce(&x, Reduction::Mean).unwrap().item(), 2.0);
        let z = g.input(Tensor::zeros(&[5]).unwrap());
        assert_eq!(g.reduce(&z, Reduction::Sum).unwrap().item(), 0.0);
    }

    #[test]
    fn square_sum_gradient_is_twice_x() {
        let g = Graph::<f64>::new();
        let x = g.param(ParamId(0), t(&[4], &[1.0, -2.0, 0.5, 3.0])).unwrap();
        let sq = g.mul(&x, &x).unwrap();
        let s = g.sum(&sq).unwrap();
        let grads = g.backward(&s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn channel_scale_gradient_wrt_scale() {
        let g = Graph::<f64>::new();
        let xd: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
        let ud: Vec<f64> = (0..8).map(|i| 1.0 + i as f64).collect();
        let x = g.input(t(&[1, 2, 2, 2], &xd));
        let s = g.param(ParamId(1), t(&[1, 2], &[0.3, -0.7])).unwrap();
        let y = g.channel_scale(&x, &s).unwrap();
        let grads = g.backward(&y, &t(&[1, 2, 2, 2], &ud)).unwrap();
        let ds = grads.get(ParamId(1)).unwrap().data();
        for c in 0..2 {
            let expected: f64 = (0..4).map(|i| xd[c * 4 + i] * ud[c * 4 + i]).sum();
            assert!((ds[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_accumulate_across_paths() {
        let g = Graph::<f64>::new();
        let x = g.param(ParamId(0), t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.add(&x, &x).unwrap();
        let z = g.add(&y, &x).unwrap();
        let s = g.sum(&z).unwrap();
        let grads = g.backward(&s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let g = Graph::<f64>::new();
        let x = g.param(ParamId(0), t(&[1, 1, 2, 2], &[1.0, 4.0, 4.0, 0.0])).unwrap();
        let p = g.global_max_pool(&x).unwrap();
        let grads = g.backward(&p, &t(&[1, 1], &[2.5])).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn backward_state_and_seed_errors() {
        let g = Graph::<f64>::inference();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let s = g.sum(&x).unwrap();
        assert!(matches!(g.backward(&s, &Tensor::scalar(1.0)), Err(LaffError::State(_))));

        let g = Graph::<f64>::new();
        let x = g.param(ParamId(0), t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(&x, &Tensor::scalar(1.0)), Err(LaffError::Dimension(_))));

        let other = Graph::<f64>::new();
        let y = other.param(ParamId(0), t(&[2], &[1.0, 2.0])).unwrap();
        let _pad = g.sum(&x).unwrap();
        assert!(matches!(g.backward(&y, &t(&[2], &[1.0, 1.0])), Err(LaffError::State(_))));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let g = Graph::<f64>::new();
        let x = g.input(t(&[1], &[-1.0]));
        let err = g.sqrt(&x).unwrap_err();
        assert!(matches!(err, LaffError::Numeric { .. }), "{err}");
    }

    #[test]
    fn non_finite_gradient_names_node() {
        let g = Graph::<f64>::new();
        let x = g.param(ParamId(0), t(&[1], &[0.0])).unwrap();
        let r = g.sqrt(&x).unwrap();
        let s = g.sum(&r).unwrap();
        match g.backward(&s, &Tensor::scalar(1.0)) {
            Err(LaffError::Numeric { node, .. }) => assert!(node.contains("param"), "{node}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
