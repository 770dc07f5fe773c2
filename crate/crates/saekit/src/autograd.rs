//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] appends one node per recorded operation; node ids are strictly
//! increasing, so every node comes after all of its inputs. [`Tape::backward`]
//! seeds the scalar loss with gradient one and walks the tape once in reverse,
//! applying each op's pullback and adding gradients together wherever a value
//! fans out into several consumers. Every gradient tensor produced along the
//! way is checked for NaN/inf and backward fails loudly (naming the op kind)
//! instead of letting a poisoned update reach the optimizer.
//!
//! [`Var`] is a `Copy` handle borrowing its tape, so values can be threaded
//! through forward code with plain assignment. Operations live on [`Tape`] as
//! methods; fallible ones (shape checks) return `Result`.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::nn::{self, loss, BnSaved, BnStats, ConvGeom, ConvTGeom, PoolGeom};
use crate::scalar::Scalar;
use crate::tensor::{Axis, Tensor};

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// Cheap handle to one tape node.
pub struct Var<'t, E: Scalar = f32> {
    tape: &'t Tape<E>,
    id: VarId,
}

impl<E: Scalar> Clone for Var<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<E: Scalar> Copy for Var<'_, E> {}

impl<E: Scalar> Var<'_, E> {
    pub fn id(self) -> VarId {
        self.id
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    /// Clones the forward value out of the tape.
    pub fn value(self) -> Tensor<E> {
        self.tape.nodes.borrow()[self.id.0].value.clone()
    }
}

/// What a node computed; carries whatever the pullback needs beyond the
/// input values (which backward reads straight off the tape).
enum Op<E: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(E),
    AddScalar(E),
    Matmul,
    Linear { has_bias: bool },
    Relu,
    Softmax,
    Reshape { from: Vec<usize> },
    Concat { axis: Axis, extents: Vec<usize> },
    SumAll,
    MeanAll,
    Conv2d { geom: ConvGeom },
    ConvT { geom: ConvTGeom },
    BnTrain { saved: BnSaved<E> },
    BnEval { xhat: Tensor<E>, inv_std: Vec<E> },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    AdaptiveAvg { in_shape: Vec<usize> },
    CrossEntropy { labels: Vec<usize>, probs: Tensor<E> },
    BceLogits { targets: Tensor<E>, sig: Tensor<E> },
}

impl<E: Scalar> Op<E> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Matmul => "matmul",
            Op::Linear { .. } => "linear",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT { .. } => "conv_transpose2d",
            Op::BnTrain { .. } => "batchnorm2d(train)",
            Op::BnEval { .. } => "batchnorm2d(eval)",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AdaptiveAvg { .. } => "adaptive_avgpool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node<E: Scalar> {
    op: Op<E>,
    inputs: Vec<VarId>,
    value: Tensor<E>,
    requires_grad: bool,
}

/// Gradients keyed by [`VarId`], as returned by [`Tape::backward`].
///
/// Leaves created with `requires_grad` that never reached the loss hold a
/// zero tensor, so every registered parameter has a defined gradient.
#[derive(Debug)]
pub struct Gradients<E: Scalar = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out, leaving `None`; the optimizer uses this to
    /// avoid cloning large tensors.
    pub fn take(&mut self, id: VarId) -> Option<Tensor<E>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// The recording. Interior mutability lets forward code hold many `Var`s
/// (shared borrows of the tape) while still appending nodes.
pub struct Tape<E: Scalar = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Enters a tensor onto the tape. Parameters and anything else that
    /// needs a gradient pass `requires_grad = true`; plain data passes false.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<'_, E> {
        self.record(Op::Leaf, vec![], value, requires_grad)
    }

    fn record(
        &self,
        op: Op<E>,
        inputs: Vec<VarId>,
        value: Tensor<E>,
        requires_grad: bool,
    ) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        let id = VarId(nodes.len());
        nodes.push(Node { op, inputs, value, requires_grad });
        Var { tape: self, id }
    }

    fn push(&self, op: Op<E>, inputs: Vec<VarId>, value: Tensor<E>) -> Var<'_, E> {
        let requires = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|i| nodes[i.0].requires_grad)
        };
        self.record(op, inputs, value, requires)
    }

    /// Mixing vars across tapes is a programming error, caught eagerly.
    fn owned(&self, vs: &[VarId]) -> usize {
        let n = self.nodes.borrow().len();
        for v in vs {
            assert!(v.0 < n, "var does not belong to this tape");
        }
        n
    }

    fn check_tape(&self, v: Var<'_, E>) -> Result<()> {
        if !std::ptr::eq(self, v.tape) {
            return Err(Error::TapeMismatch);
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    /// Elementwise sum. The right side may also be a scalar (shape [1]) or a
    /// per-channel vector against an N x C x H x W left side.
    pub fn add(&self, a: Var<'_, E>, b: Var<'_, E>) -> Result<Var<'_, E>> {
        self.owned(&[a.id, b.id]);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id.0].value.add(&nodes[b.id.0].value)?
        };
        Ok(self.push(Op::Add, vec![a.id, b.id], value))
    }

    /// Elementwise difference, with the same right-side broadcasting as
    /// [`Tape::add`].
    pub fn sub(&self, a: Var<'_, E>, b: Var<'_, E>) -> Result<Var<'_, E>> {
        self.owned(&[a.id, b.id]);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id.0].value.sub(&nodes[b.id.0].value)?
        };
        Ok(self.push(Op::Sub, vec![a.id, b.id], value))
    }

    /// Elementwise product, with the same right-side broadcasting as
    /// [`Tape::add`].
    pub fn mul(&self, a: Var<'_, E>, b: Var<'_, E>) -> Result<Var<'_, E>> {
        self.owned(&[a.id, b.id]);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id.0].value.mul(&nodes[b.id.0].value)?
        };
        Ok(self.push(Op::Mul, vec![a.id, b.id], value))
    }

    pub fn scale(&self, a: Var<'_, E>, k: E) -> Var<'_, E> {
        self.owned(&[a.id]);
        let value = self.nodes.borrow()[a.id.0].value.scale(k);
        self.push(Op::Scale(k), vec![a.id], value)
    }

    pub fn add_scalar(&self, a: Var<'_, E>, k: E) -> Var<'_, E> {
        self.owned(&[a.id]);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id.0].value.map(|v| v + k)
        };
        self.push(Op::AddScalar(k), vec![a.id], value)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&self, a: Var<'_, E>, b: Var<'_, E>) -> Result<Var<'_, E>> {
        self.owned(&[a.id, b.id]);
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.id.0].value.matmul(&nodes[b.id.0].value)?
        };
        Ok(self.push(Op::Matmul, vec![a.id, b.id], value))
    }

    /// x W^T + b, the fully connected layer.
    pub fn linear(
        &self,
        x: Var<'_, E>,
        w: Var<'_, E>,
        b: Option<Var<'_, E>>,
    ) -> Result<Var<'_, E>> {
        let mut ids = vec![x.id, w.id];
        if let Some(b) = b {
            ids.push(b.id);
        }
        self.owned(&ids);
        let value = {
            let nodes = self.nodes.borrow();
            let bt = b.map(|b| b.id.0);
            nn::linear(
                &nodes[x.id.0].value,
                &nodes[w.id.0].value,
                bt.map(|i| &nodes[i].value),
            )?
        };
        Ok(self.push(Op::Linear { has_bias: b.is_some() }, ids, value))
    }

    // ---- activations -----------------------------------------------------

    pub fn relu(&self, x: Var<'_, E>) -> Var<'_, E> {
        self.owned(&[x.id]);
        let value = nn::relu(&self.nodes.borrow()[x.id.0].value);
        self.push(Op::Relu, vec![x.id], value)
    }

    /// Row softmax of N x C logits.
    pub fn softmax(&self, x: Var<'_, E>) -> Result<Var<'_, E>> {
        self.owned(&[x.id]);
        let value = nn::softmax(&self.nodes.borrow()[x.id.0].value)?;
        Ok(self.push(Op::Softmax, vec![x.id], value))
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&self, x: Var<'_, E>, shape: Vec<usize>) -> Result<Var<'_, E>> {
        self.owned(&[x.id]);
        let (from, value) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.id.0].value;
            (v.shape().to_vec(), v.reshape(shape)?)
        };
        Ok(self.push(Op::Reshape { from }, vec![x.id], value))
    }

    pub fn concat(&self, parts: &[Var<'_, E>], axis: Axis) -> Result<Var<'_, E>> {
        let ids: Vec<VarId> = parts.iter().map(|p| p.id).collect();
        self.owned(&ids);
        let (extents, value) = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor<E>> = ids.iter().map(|i| &nodes[i.0].value).collect();
            let extents = tensors.iter().map(|t| t.shape()[axis.0]).collect();
            (extents, Tensor::concat(&tensors, axis)?)
        };
        Ok(self.push(Op::Concat { axis, extents }, ids, value))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&self, x: Var<'_, E>) -> Var<'_, E> {
        self.owned(&[x.id]);
        let value = Tensor::scalar(self.nodes.borrow()[x.id.0].value.sum_all());
        self.push(Op::SumAll, vec![x.id], value)
    }

    pub fn mean_all(&self, x: Var<'_, E>) -> Var<'_, E> {
        self.owned(&[x.id]);
        let value = Tensor::scalar(self.nodes.borrow()[x.id.0].value.mean_all());
        self.push(Op::MeanAll, vec![x.id], value)
    }

    // ---- spatial layers --------------------------------------------------

    pub fn conv2d(
        &self,
        x: Var<'_, E>,
        w: Var<'_, E>,
        b: Option<Var<'_, E>>,
        geom: &ConvGeom,
    ) -> Result<Var<'_, E>> {
        let mut ids = vec![x.id, w.id];
        if let Some(b) = b {
            ids.push(b.id);
        }
        self.owned(&ids);
        let value = {
            let nodes = self.nodes.borrow();
            let bt = b.map(|b| b.id.0);
            nn::conv2d(
                &nodes[x.id.0].value,
                &nodes[w.id.0].value,
                bt.map(|i| &nodes[i].value),
                geom,
            )?
        };
        Ok(self.push(Op::Conv2d { geom: geom.clone() }, ids, value))
    }

    pub fn conv_transpose2d(
        &self,
        x: Var<'_, E>,
        w: Var<'_, E>,
        geom: &ConvTGeom,
    ) -> Result<Var<'_, E>> {
        self.owned(&[x.id, w.id]);
        let value = {
            let nodes = self.nodes.borrow();
            nn::conv_transpose2d(&nodes[x.id.0].value, &nodes[w.id.0].value, geom)?
        };
        Ok(self.push(Op::ConvT { geom: geom.clone() }, vec![x.id, w.id], value))
    }

    /// Training-mode batch norm. Returns the output plus the batch statistics
    /// so the caller can fold them into running mean/var; the tape itself
    /// never mutates buffers.
    pub fn batchnorm2d_train(
        &self,
        x: Var<'_, E>,
        gamma: Var<'_, E>,
        beta: Var<'_, E>,
        eps: f64,
    ) -> Result<(Var<'_, E>, BnStats<E>)> {
        self.owned(&[x.id, gamma.id, beta.id]);
        let (value, saved, stats) = {
            let nodes = self.nodes.borrow();
            nn::batchnorm2d_train(
                &nodes[x.id.0].value,
                &nodes[gamma.id.0].value,
                &nodes[beta.id.0].value,
                eps,
            )?
        };
        let var = self.push(Op::BnTrain { saved }, vec![x.id, gamma.id, beta.id], value);
        Ok((var, stats))
    }

    /// Eval-mode batch norm against fixed running statistics (plain tensors,
    /// not vars: no gradient flows into them).
    pub fn batchnorm2d_eval(
        &self,
        x: Var<'_, E>,
        gamma: Var<'_, E>,
        beta: Var<'_, E>,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
    ) -> Result<Var<'_, E>> {
        self.owned(&[x.id, gamma.id, beta.id]);
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            nn::batchnorm2d_eval(
                &nodes[x.id.0].value,
                &nodes[gamma.id.0].value,
                &nodes[beta.id.0].value,
                running_mean,
                running_var,
                eps,
            )?
        };
        Ok(self.push(
            Op::BnEval { xhat, inv_std },
            vec![x.id, gamma.id, beta.id],
            value,
        ))
    }

    pub fn maxpool2d(&self, x: Var<'_, E>, geom: &PoolGeom) -> Result<Var<'_, E>> {
        self.owned(&[x.id]);
        let (in_shape, value, argmax) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id.0].value;
            let (v, a) = nn::maxpool2d(xv, geom)?;
            (xv.shape().to_vec(), v, a)
        };
        Ok(self.push(Op::MaxPool { argmax, in_shape }, vec![x.id], value))
    }

    pub fn adaptive_avgpool_1x1(&self, x: Var<'_, E>) -> Result<Var<'_, E>> {
        self.owned(&[x.id]);
        let (in_shape, value) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id.0].value;
            (xv.shape().to_vec(), nn::adaptive_avgpool_1x1(xv)?)
        };
        Ok(self.push(Op::AdaptiveAvg { in_shape }, vec![x.id], value))
    }

    // ---- losses ----------------------------------------------------------

    /// Mean cross-entropy of N x C logits against integer labels.
    pub fn cross_entropy(&self, logits: Var<'_, E>, labels: &[usize]) -> Result<Var<'_, E>> {
        self.owned(&[logits.id]);
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let (l, p) = loss::cross_entropy(&nodes[logits.id.0].value, labels)?;
            (Tensor::scalar(l), p)
        };
        Ok(self.push(
            Op::CrossEntropy { labels: labels.to_vec(), probs },
            vec![logits.id],
            value,
        ))
    }

    /// Mean binary cross-entropy of logits against hard 0/1 targets.
    pub fn bce_with_logits(&self, logits: Var<'_, E>, targets: &Tensor<E>) -> Result<Var<'_, E>> {
        self.owned(&[logits.id]);
        let (value, sig) = {
            let nodes = self.nodes.borrow();
            let (l, s) = loss::bce_with_logits(&nodes[logits.id.0].value, targets)?;
            (Tensor::scalar(l), s)
        };
        Ok(self.push(
            Op::BceLogits { targets: targets.clone(), sig },
            vec![logits.id],
            value,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns one gradient per reachable
    /// node; requires-grad leaves the loss never touched get explicit zeros.
    pub fn backward(&self, loss_var: Var<'_, E>) -> Result<Gradients<E>> {
        self.check_tape(loss_var)?;
        let nodes = self.nodes.borrow();
        let lid = loss_var.id.0;
        if nodes[lid].value.shape() != [1] {
            return Err(Error::NonScalarLoss {
                shape: nodes[lid].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[lid] = Some(Tensor::scalar(E::ONE));

        for id in (0..=lid).rev() {
            let node = &nodes[id];
            if !node.requires_grad || grads[id].is_none() {
                continue;
            }
            let g = grads[id].as_ref().unwrap().clone();
            backprop_node(&nodes, id, &g, &mut grads)?;
        }

        // An optimizer may legitimately own parameters that this particular
        // loss never touched (ablated branches); give them zero gradients
        // rather than absent ones.
        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec())?);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Sums a full-shape gradient down to a broadcast operand's shape: identity
/// for same shapes, total sum for scalars, per-channel sums for C vectors.
fn reduce_to_shape<E: Scalar>(g: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    if g.shape() == target {
        return g.clone();
    }
    if target == [1] {
        return Tensor::scalar(g.sum_all());
    }
    // Per-channel: g is N x C x H x W, target is [C].
    let (n, c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let hw = h * w;
    let mut out = vec![E::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mut acc = E::ZERO;
            for &v in &g.data()[base..base + hw] {
                acc += v;
            }
            out[ci] += acc;
        }
    }
    Tensor::from_raw(vec![c], out)
}

/// a b^T for a: m x n, b: k x n. Used for dA in the matmul pullback.
fn matmul_nt<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![E::ZERO; m * k];
    for i in 0..m {
        let arow = &a.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b.data()[p * n..(p + 1) * n];
            let mut acc = E::ZERO;
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::from_raw(vec![m, k], out)
}

/// a^T b for a: m x k, b: m x n. Used for dB in the matmul pullback.
fn matmul_tn<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![E::ZERO; k * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let brow = &b.data()[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![k, n], out)
}

/// Applies one node's pullback and accumulates into `grads`. Split out of
/// `backward` to keep the borrow of the node list readable.
fn backprop_node<E: Scalar>(
    nodes: &[Node<E>],
    id: usize,
    g: &Tensor<E>,
    grads: &mut [Option<Tensor<E>>],
) -> Result<()> {
    let node = &nodes[id];
    let ins = &node.inputs;
    let val = |vid: VarId| &nodes[vid.0].value;

    // Collected as (input index, gradient) then accumulated in one place so
    // the fan-out addition and NaN screen are uniform across ops.
    let mut contribs: Vec<(VarId, Tensor<E>)> = Vec::with_capacity(ins.len());

    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            contribs.push((ins[0], g.clone()));
            contribs.push((ins[1], reduce_to_shape(g, val(ins[1]).shape())));
        }
        Op::Sub => {
            contribs.push((ins[0], g.clone()));
            contribs.push((
                ins[1],
                reduce_to_shape(g, val(ins[1]).shape()).scale(E::ZERO - E::ONE),
            ));
        }
        Op::Mul => {
            let (a, b) = (val(ins[0]), val(ins[1]));
            contribs.push((ins[0], g.mul(b)?));
            contribs.push((ins[1], reduce_to_shape(&g.mul(a)?, b.shape())));
        }
        Op::Scale(k) => contribs.push((ins[0], g.scale(*k))),
        Op::AddScalar(_) => contribs.push((ins[0], g.clone())),
        Op::Matmul => {
            let (a, b) = (val(ins[0]), val(ins[1]));
            contribs.push((ins[0], matmul_nt(g, b)));
            contribs.push((ins[1], matmul_tn(a, g)));
        }
        Op::Linear { has_bias } => {
            let (dx, dw, db) = nn::linear_backward(val(ins[0]), val(ins[1]), *has_bias, g)?;
            contribs.push((ins[0], dx));
            contribs.push((ins[1], dw));
            if let Some(db) = db {
                contribs.push((ins[2], db));
            }
        }
        Op::Relu => contribs.push((ins[0], nn::relu_backward(val(ins[0]), g)?)),
        Op::Softmax => contribs.push((ins[0], nn::softmax_backward(&node.value, g)?)),
        Op::Reshape { from } => contribs.push((ins[0], g.reshape(from.clone())?)),
        Op::Concat { axis, extents } => {
            let mut start = 0;
            for (vid, &ext) in ins.iter().zip(extents) {
                contribs.push((*vid, g.slice(*axis, start, ext)?));
                start += ext;
            }
        }
        Op::SumAll => {
            let seed = g.scalar_value()?;
            contribs.push((ins[0], Tensor::full(val(ins[0]).shape().to_vec(), seed)?));
        }
        Op::MeanAll => {
            let x = val(ins[0]);
            let seed = g.scalar_value()? / E::from_f64(x.len() as f64);
            contribs.push((ins[0], Tensor::full(x.shape().to_vec(), seed)?));
        }
        Op::Conv2d { geom } => {
            let (dx, dw, db) = nn::conv2d_backward(val(ins[0]), val(ins[1]), geom, g)?;
            contribs.push((ins[0], dx));
            contribs.push((ins[1], dw));
            if let Some(db) = db {
                contribs.push((ins[2], db));
            }
        }
        Op::ConvT { geom } => {
            let (dx, dw) = nn::conv_transpose2d_backward(val(ins[0]), val(ins[1]), geom, g)?;
            contribs.push((ins[0], dx));
            contribs.push((ins[1], dw));
        }
        Op::BnTrain { saved } => {
            let (dx, dgamma, dbeta) = nn::batchnorm2d_train_backward(saved, val(ins[1]), g)?;
            contribs.push((ins[0], dx));
            contribs.push((ins[1], dgamma));
            contribs.push((ins[2], dbeta));
        }
        Op::BnEval { xhat, inv_std } => {
            let (dx, dgamma, dbeta) =
                nn::batchnorm2d_eval_backward(xhat, inv_std, val(ins[1]), g)?;
            contribs.push((ins[0], dx));
            contribs.push((ins[1], dgamma));
            contribs.push((ins[2], dbeta));
        }
        Op::MaxPool { argmax, in_shape } => {
            contribs.push((ins[0], nn::maxpool2d_backward(in_shape, argmax, g)?));
        }
        Op::AdaptiveAvg { in_shape } => {
            contribs.push((ins[0], nn::adaptive_avgpool_1x1_backward(in_shape, g)?));
        }
        Op::CrossEntropy { labels, probs } => {
            let up = g.scalar_value()?;
            contribs.push((ins[0], loss::cross_entropy_backward(probs, labels, up)));
        }
        Op::BceLogits { targets, sig } => {
            let up = g.scalar_value()?;
            contribs.push((ins[0], loss::bce_with_logits_backward(sig, targets, up)));
        }
    }

    let kind = node.op.kind();
    for (vid, contrib) in contribs {
        if !nodes[vid.0].requires_grad {
            continue;
        }
        if !contrib.all_finite() {
            return Err(Error::NonFiniteGrad { op_kind: kind });
        }
        grads[vid.0] = Some(match grads[vid.0].take() {
            Some(prev) => prev.add(&contrib)?,
            None => contrib,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn product_rule_hand_case() {
        // loss = sum((x + y) * x); d/dx = 2x + y, d/dy = x.
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), true);
        let y = tape.leaf(t(vec![3], vec![10.0, 20.0, 30.0]), true);
        let s = tape.add(x, y).unwrap();
        let p = tape.mul(s, x).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x.id()).unwrap().data(), &[12.0, 24.0, 36.0]);
        assert_eq!(grads.get(y.id()).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates_additively() {
        // x feeds the loss twice: loss = sum(x + x) so dx = 2.
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![2], vec![5.0, 7.0]), true);
        let s = tape.add(x, x).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x.id()).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient_per_channel() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3, 2, 2]).unwrap(), true);
        let b = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), true);
        let s = tape.add(x, b).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        // Each channel's bias sees N * H * W = 8 unit gradients.
        assert_eq!(grads.get(b.id()).unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn scalar_operand_gets_summed_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let k = tape.leaf(Tensor::scalar(10.0), true);
        let p = tape.mul(x, k).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x.id()).unwrap().data(), &[10.0; 4]);
        // dk = sum(x).
        assert_eq!(grads.get(k.id()).unwrap().data(), &[10.0]);
    }

    #[test]
    fn sub_negates_right_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(vec![2], vec![3.0, 4.0]), true);
        let b = tape.leaf(t(vec![2], vec![1.0, 1.0]), true);
        let d = tape.sub(a, b).unwrap();
        let loss = tape.sum_all(d);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a.id()).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b.id()).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn matmul_gradients_match_transpose_formulas() {
        // loss = sum(A B): dA = 1 B^T, dB = A^T 1.
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let b = tape.leaf(t(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]), true);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        // Row sums of B per column of A.
        assert_eq!(grads.get(a.id()).unwrap().data(), &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
        // Column sums of A per row of B.
        assert_eq!(grads.get(b.id()).unwrap().data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn relu_gate_blocks_negative_and_kink_coordinates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![3], vec![-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x.id()).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_spreads_reciprocal_count() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![4], vec![1.0, 2.0, 3.0, 4.0]), true);
        let m = tape.mean_all(x);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x.id()).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn concat_routes_gradient_slices_back() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(vec![1, 2], vec![1.0, 2.0]), true);
        let b = tape.leaf(t(vec![1, 3], vec![3.0, 4.0, 5.0]), true);
        let cat = tape.concat(&[a, b], Axis(1)).unwrap();
        let doubled = tape.scale(cat, 2.0);
        let loss = tape.sum_all(doubled);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a.id()).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get(b.id()).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn reshape_routes_gradient_through_unchanged() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let flat = tape.reshape(x, vec![4]).unwrap();
        let sq = tape.mul(flat, flat).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x.id()).unwrap();
        assert_eq!(gx.shape(), &[2, 2]);
        assert_eq!(gx.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn disconnected_leaf_gets_explicit_zeros() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let unused = tape.leaf(t(vec![3], vec![0.0, 0.0, 0.0]), true);
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused.id()).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_leaf_gets_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let c = tape.leaf(t(vec![2], vec![3.0, 4.0]), false);
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x.id()).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c.id()).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn cross_tape_backward_is_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let _ = t1.leaf(Tensor::scalar(1.0), true);
        let x2 = t2.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(t1.backward(x2), Err(Error::TapeMismatch)));
    }

    #[test]
    fn non_finite_gradient_names_the_op() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let blown = tape.scale(x, f64::INFINITY);
        let loss = tape.sum_all(blown);
        match tape.backward(loss) {
            Err(Error::NonFiniteGrad { op_kind }) => assert_eq!(op_kind, "scale"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_node_produces_probs_minus_onehot() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 2]).unwrap(), true);
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!((loss.value().data()[0] - 2.0f64.ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits.id()).unwrap();
        assert!((g.data()[0] + 0.5).abs() < 1e-12);
        assert!((g.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bce_node_produces_sig_minus_target_over_len() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![2]).unwrap(), true);
        let targets = t(vec![2], vec![1.0, 0.0]);
        let loss = tape.bce_with_logits(logits, &targets).unwrap();
        assert!((loss.value().data()[0] - 2.0f64.ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits.id()).unwrap();
        assert!((g.data()[0] + 0.25).abs() < 1e-12);
        assert!((g.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn deep_chain_composes() {
        // loss = mean(relu(x W^T + b)) on a tiny net; compare to hand calc.
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(vec![1, 2], vec![1.0, -1.0]), false);
        let w = tape.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), true);
        let b = tape.leaf(t(vec![2], vec![0.5, 0.5]), true);
        let h = tape.linear(x, w, Some(b)).unwrap();
        // h = [1.5, -0.5]; relu -> [1.5, 0]; mean = 0.75.
        let r = tape.relu(h);
        let loss = tape.mean_all(r);
        assert!((loss.value().data()[0] - 0.75).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        // Only the first output unit is live; d/db = [0.5, 0].
        assert_eq!(grads.get(b.id()).unwrap().data(), &[0.5, 0.0]);
        assert_eq!(grads.get(w.id()).unwrap().data(), &[0.5, -0.5, 0.0, 0.0]);
    }
}
