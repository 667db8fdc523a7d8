use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Deliberate adjoint corruption, used to confirm the gradient checker
/// actually detects broken backward rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    FlipGeluAdjoint,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared: bool,
    },
    Transpose(usize, Vec<usize>),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Expand {
        x: usize,
        copies: usize,
    },
    GatherRows {
        table: usize,
        rows: Vec<usize>,
    },
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    Pick {
        x: usize,
        flat: Vec<usize>,
    },
    LnClamped {
        x: usize,
        floor: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Ordered operation record. Nodes are appended as operations execute, so
/// the vector order is a topological order of the graph.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
    consumed: Cell<bool>,
    fault: Option<Fault>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S> fmt::Debug for Tape<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the requires-grad leaves after a backward pass.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            fault: None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var<'_, S> {
        debug_assert!(value.is_finite(), "non-finite forward value from {:?}", op_name(&op));
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Ops that cannot reach a requires-grad leaf are stored as constants.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var { tape: self, id }
    }

    fn same_tape(&self, other: &Var<'_, S>) -> bool {
        std::ptr::eq(self, other.tape)
    }

    /// Reverse pass from a scalar loss. A tape supports one backward pass.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        if !self.same_tape(&loss) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract("tape already consumed by a backward pass".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(&nodes, node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &nodes[id];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, nodes: &[Node<S>], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let wants = |id: usize| nodes[id].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &x in &[*a, *b] {
                    if wants(x) {
                        axpy(slot(grads, x, g.len()), g, S::one());
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = nodes[*b].value.data();
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = nodes[*a].value.data();
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, s) => axpy(slot(grads, *x, g.len()), g, *s),
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared,
            } => {
                if wants(a) {
                    let bv = nodes[b].value.data();
                    let ga = slot(grads, a, batch * m * k);
                    if shared {
                        // dA = dC · Bᵀ
                        S::gemm(batch * m, n, k, g, (n as isize, 1), bv, (1, n as isize), S::one(), ga);
                    } else {
                        for i in 0..batch {
                            S::gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                (n as isize, 1),
                                &bv[i * k * n..],
                                (1, n as isize),
                                S::one(),
                                &mut ga[i * m * k..(i + 1) * m * k],
                            );
                        }
                    }
                }
                if wants(b) {
                    let av = nodes[a].value.data();
                    if shared {
                        let gb = slot(grads, b, k * n);
                        // dB = Aᵀ · dC
                        S::gemm(k, batch * m, n, av, (1, k as isize), g, (n as isize, 1), S::one(), gb);
                    } else {
                        let gb = slot(grads, b, batch * k * n);
                        for i in 0..batch {
                            S::gemm(
                                k,
                                m,
                                n,
                                &av[i * m * k..],
                                (1, k as isize),
                                &g[i * m * n..],
                                (n as isize, 1),
                                S::one(),
                                &mut gb[i * k * n..(i + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Transpose(x, perm) => {
                let inv = kernels::inverse_perm(perm);
                let (_, back) = kernels::transpose(node.value.shape(), g, &inv);
                axpy(slot(grads, *x, g.len()), &back, S::one());
            }
            Op::Reshape(x) => axpy(slot(grads, *x, g.len()), g, S::one()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let row = g.len() / outer.max(1);
                let mut offset = 0;
                for &x in inputs {
                    let xs = nodes[x].value.shape();
                    let chunk: usize = xs[*axis..].iter().product();
                    if wants(x) {
                        let gx = slot(grads, x, nodes[x].value.len());
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            axpy(&mut gx[o * chunk..(o + 1) * chunk], src, S::one());
                        }
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { x, axis, start } => {
                let xs = nodes[x].value.shape();
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = node.value.shape()[axis];
                let gx = slot(grads, x, nodes[x].value.len());
                for o in 0..outer {
                    let dst = (o * xs[axis] + start) * inner;
                    let src = o * len * inner;
                    axpy(&mut gx[dst..dst + len * inner], &g[src..src + len * inner], S::one());
                }
            }
            &Op::Expand { x, copies } => {
                let n = nodes[x].value.len();
                let gx = slot(grads, x, n);
                for c in 0..copies {
                    axpy(gx, &g[c * n..(c + 1) * n], S::one());
                }
            }
            Op::GatherRows { table, rows } => {
                let t = &nodes[*table].value;
                let width = t.len() / t.shape()[0];
                let gt = slot(grads, *table, t.len());
                for (i, &r) in rows.iter().enumerate() {
                    axpy(&mut gt[r * width..(r + 1) * width], &g[i * width..(i + 1) * width], S::one());
                }
            }
            Op::Gelu(x) => {
                let xv = nodes[*x].value.data();
                let sign = if self.fault == Some(Fault::FlipGeluAdjoint) {
                    -S::one()
                } else {
                    S::one()
                };
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += sign * g[i] * kernels::gelu_grad(xv[i]);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                let gx = slot(grads, *x, g.len());
                for r in 0..g.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: S = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = nodes[*gamma].value.data();
                let d = gam.len();
                let rows = g.len() / d;
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, *beta, d);
                    for r in 0..rows {
                        axpy(gb, &g[r * d..(r + 1) * d], S::one());
                    }
                }
                if wants(*x) {
                    let dn = S::from_usize(d).unwrap();
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![S::zero(); d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= dn;
                        mean_dx /= dn;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            &Op::MeanAxis { x, axis } => {
                let xs = nodes[x].value.shape();
                let outer: usize = xs[..axis].iter().product();
                let len = xs[axis];
                let inner: usize = xs[axis + 1..].iter().product();
                let inv = S::one() / S::from_usize(len).unwrap();
                let gx = slot(grads, x, nodes[x].value.len());
                for o in 0..outer {
                    for a in 0..len {
                        let dst = (o * len + a) * inner;
                        axpy(&mut gx[dst..dst + inner], &g[o * inner..(o + 1) * inner], inv);
                    }
                }
            }
            Op::SumAll(x) => {
                let gx = slot(grads, *x, nodes[*x].value.len());
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::MeanAll(x) => {
                let n = nodes[*x].value.len();
                let s = g[0] / S::from_usize(n).unwrap();
                slot(grads, *x, n).iter_mut().for_each(|v| *v += s);
            }
            Op::Pick { x, flat } => {
                let gx = slot(grads, *x, nodes[*x].value.len());
                for (i, &f) in flat.iter().enumerate() {
                    gx[f] += g[i];
                }
            }
            Op::LnClamped { x, floor } => {
                let xv = nodes[*x].value.data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > *floor {
                        gx[i] += g[i] / xv[i];
                    }
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], id: usize, len: usize) -> &mut Vec<S> {
    grads[id].get_or_insert_with(|| vec![S::zero(); len])
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S], alpha: S) {
    debug_assert_eq!(dst.len(), src.len());
    if alpha == S::one() {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += alpha * s;
        }
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul { .. } => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Expand { .. } => "expand",
        Op::GatherRows { .. } => "gather_rows",
        Op::Gelu(..) => "gelu",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::MeanAxis { .. } => "mean_axis",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::Pick { .. } => "pick",
        Op::LnClamped { .. } => "ln",
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn value_ref(&self) -> Ref<'t, Tensor<S>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn check_tape(&self, other: &Var<'_, S>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op}: operands live on different tapes")))
        }
    }

    fn rg(ids: &[&Var<'_, S>]) -> bool {
        ids.iter().any(|v| v.requires_grad())
    }

    fn binary(
        &self,
        other: &Var<'t, S>,
        op: &'static str,
        f: impl Fn(S, S) -> S,
        make: impl FnOnce(usize, usize) -> Op<S>,
    ) -> Result<Var<'t, S>> {
        self.check_tape(other, op)?;
        let value = {
            let a = self.value_ref();
            let b = other.value_ref();
            if a.shape() != b.shape() {
                return Err(Error::dim(
                    op,
                    format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
                ));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, Self::rg(&[self, other]), make(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn mul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, s: S) -> Var<'t, S> {
        let value = self.value_ref().map(|x| x * s);
        self.tape.push(value, self.requires_grad(), Op::Scale(self.id, s))
    }

    /// `[..., m, k] · [..., k, n]`. A rank-2 right operand is shared across
    /// all leading batch dimensions of the left operand.
    pub fn matmul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        self.check_tape(other, "matmul")?;
        let (value, op) = {
            let a = self.value_ref();
            let b = other.value_ref();
            let (sa, sb) = (a.shape(), b.shape());
            let err = || Error::dim("matmul", format!("cannot multiply {:?} by {:?}", sa, sb));
            if sa.len() < 2 || sb.len() < 2 {
                return Err(err());
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != k2 {
                return Err(err());
            }
            let lead = &sa[..sa.len() - 2];
            let shared = sb.len() == 2;
            if !shared && lead != &sb[..sb.len() - 2] {
                return Err(err());
            }
            let batch: usize = lead.iter().product();
            let data = kernels::matmul(a.data(), b.data(), batch, m, k, n, shared);
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            (
                Tensor::new(shape, data)?,
                Op::MatMul {
                    a: self.id,
                    b: other.id,
                    batch,
                    m,
                    k,
                    n,
                    shared,
                },
            )
        };
        Ok(self.tape.push(value, Self::rg(&[self, other]), op))
    }

    pub fn transpose(&self, perm: &[usize]) -> Result<Var<'t, S>> {
        let value = self.value_ref().permuted(perm)?;
        Ok(self
            .tape
            .push(value, self.requires_grad(), Op::Transpose(self.id, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Result<Var<'t, S>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("t", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.transpose(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>> {
        let value = self.value().reshaped(shape.to_vec())?;
        Ok(self.tape.push(value, self.requires_grad(), Op::Reshape(self.id)))
    }

    pub fn concat(parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tape = first.tape;
        for p in parts {
            first.check_tape(p, "concat")?;
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let s0 = &shapes[0];
        if axis >= s0.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {:?}", s0)));
        }
        for s in &shapes {
            let ok = s.len() == s0.len()
                && s.iter()
                    .zip(s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("shapes {:?} and {:?} incompatible on axis {axis}", s0, s),
                ));
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let mut shape = s0.clone();
        shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        {
            let values: Vec<_> = parts.iter().map(|p| p.value_ref()).collect();
            for o in 0..outer {
                for (v, s) in values.iter().zip(&shapes) {
                    let chunk: usize = s[axis..].iter().product();
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let op = Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        };
        Ok(tape.push(Tensor::new(shape, data)?, rg, op))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        let value = {
            let x = self.value_ref();
            let s = x.shape();
            if axis >= s.len() || start + len > s[axis] {
                return Err(Error::dim(
                    "slice",
                    format!("range {start}..{} on axis {axis} of {:?}", start + len, s),
                ));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * s[axis] + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(
            value,
            self.requires_grad(),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Explicit expansion: repeats the whole tensor under new leading axes.
    pub fn expand_leading(&self, lead: &[usize]) -> Var<'t, S> {
        let copies: usize = lead.iter().product();
        let value = {
            let x = self.value_ref();
            let mut data = Vec::with_capacity(copies * x.len());
            for _ in 0..copies {
                data.extend_from_slice(x.data());
            }
            let mut shape = lead.to_vec();
            shape.extend_from_slice(x.shape());
            Tensor::new(shape, data).expect("expand shape")
        };
        self.tape.push(
            value,
            self.requires_grad(),
            Op::Expand {
                x: self.id,
                copies,
            },
        )
    }

    /// Selects rows along axis 0.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t, S>> {
        let value = {
            let t = self.value_ref();
            let s = t.shape();
            if s.is_empty() {
                return Err(Error::dim("gather_rows", "scalar table"));
            }
            let width = t.len() / s[0].max(1);
            let mut data = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                if r >= s[0] {
                    return Err(Error::dim(
                        "gather_rows",
                        format!("row {r} out of range for {:?}", s),
                    ));
                }
                data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
            }
            let mut shape = s.to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(
            value,
            self.requires_grad(),
            Op::GatherRows {
                table: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn gelu(&self) -> Var<'t, S> {
        let value = self.value_ref().map(kernels::gelu);
        self.tape.push(value, self.requires_grad(), Op::Gelu(self.id))
    }

    pub fn softmax_lastdim(&self) -> Result<Var<'t, S>> {
        let value = {
            let mut v = self.value();
            let n = *v
                .shape()
                .last()
                .ok_or_else(|| Error::dim("softmax", "scalar input"))?;
            if n == 0 {
                return Err(Error::dim("softmax", "empty last axis"));
            }
            kernels::softmax_rows(v.data_mut(), n);
            v
        };
        Ok(self.tape.push(value, self.requires_grad(), Op::Softmax(self.id)))
    }

    pub fn layernorm(&self, gamma: &Var<'t, S>, beta: &Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
        self.check_tape(gamma, "layernorm")?;
        self.check_tape(beta, "layernorm")?;
        if eps <= S::zero() {
            return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let (value, xhat, rstd) = {
            let x = self.value_ref();
            let g = gamma.value_ref();
            let b = beta.value_ref();
            let d = *x.shape().last().unwrap_or(&0);
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::dim(
                    "layernorm",
                    format!("input {:?} with gamma {:?}, beta {:?}", x.shape(), g.shape(), b.shape()),
                ));
            }
            let (out, xhat, rstd) = kernels::layernorm_rows(x.data(), g.data(), b.data(), eps);
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = Self::rg(&[self, gamma, beta]);
        Ok(self.tape.push(
            value,
            rg,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, S>> {
        let value = {
            let x = self.value_ref();
            let s = x.shape();
            if axis >= s.len() || s[axis] == 0 {
                return Err(Error::dim("mean_axis", format!("axis {axis} of {:?}", s)));
            }
            let outer: usize = s[..axis].iter().product();
            let len = s[axis];
            let inner: usize = s[axis + 1..].iter().product();
            let inv = S::one() / S::from_usize(len).unwrap();
            let mut data = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                    axpy(&mut data[o * inner..(o + 1) * inner], src, S::one());
                }
            }
            data.iter_mut().for_each(|v| *v *= inv);
            let mut shape = s.to_vec();
            shape.remove(axis);
            Tensor::new(shape, data)?
        };
        Ok(self
            .tape
            .push(value, self.requires_grad(), Op::MeanAxis { x: self.id, axis }))
    }

    pub fn sum(&self) -> Var<'t, S> {
        let s: S = self.value_ref().data().iter().copied().sum();
        self.tape
            .push(Tensor::scalar(s), self.requires_grad(), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t, S>> {
        let m = {
            let x = self.value_ref();
            if x.is_empty() {
                return Err(Error::dim("mean", "empty tensor"));
            }
            x.data().iter().copied().sum::<S>() / S::from_usize(x.len()).unwrap()
        };
        Ok(self
            .tape
            .push(Tensor::scalar(m), self.requires_grad(), Op::MeanAll(self.id)))
    }

    /// Gathers elements by flat row-major offset into a 1-D tensor.
    pub fn pick(&self, flat: &[usize]) -> Result<Var<'t, S>> {
        let value = {
            let x = self.value_ref();
            let mut data = Vec::with_capacity(flat.len());
            for &f in flat {
                data.push(*x.data().get(f).ok_or_else(|| {
                    Error::dim("pick", format!("offset {f} out of range for {:?}", x.shape()))
                })?);
            }
            Tensor::new(vec![flat.len()], data)?
        };
        Ok(self.tape.push(
            value,
            self.requires_grad(),
            Op::Pick {
                x: self.id,
                flat: flat.to_vec(),
            },
        ))
    }

    /// `ln(max(x, floor))`; zero gradient where clamped.
    pub fn ln_clamped(&self, floor: S) -> Var<'t, S> {
        let value = self.value_ref().map(|x| x.max(floor).ln());
        self.tape
            .push(value, self.requires_grad(), Op::LnClamped { x: self.id, floor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(Tensor::eye(2));
        assert_eq!(i.matmul(&a).unwrap().value().data(), &[1., 2., 3., 4.]);
        let p = tape.constant(t(&[2, 2], &[0., 1., 1., 0.]));
        assert_eq!(a.matmul(&p).unwrap().value().data(), &[2., 1., 4., 3.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[4, 3, 2]));
        let d = tape.constant(Tensor::zeros(&[5, 2, 2]));
        assert!(c.matmul(&d).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        assert_eq!(x.softmax_lastdim().unwrap().value().data(), &[0.5, 0.5]);
        let y = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let s = y.softmax_lastdim().unwrap().value();
        for (got, want) in s.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let tape = Tape::new();
        let base = [0.3, -1.2, 2.0, 0.0];
        let x = tape.constant(t(&[4], &base));
        let shifted: Vec<f64> = base.iter().map(|v| v + 17.5).collect();
        let y = tape.constant(t(&[4], &shifted));
        let a = x.softmax_lastdim().unwrap().value();
        let b = y.softmax_lastdim().unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn layernorm_examples() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::full(&[4], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::full(&[4], 5.0));
        let out = c.layernorm(&ones, &zeros, 1e-5).unwrap().value();
        assert_eq!(out.data(), &[0.0; 4]);

        let x = tape.constant(t(&[2], &[1., 3.]));
        let g = tape.constant(t(&[2], &[2., 2.]));
        let b = tape.constant(t(&[2], &[1., 1.]));
        let out = x.layernorm(&g, &b, 1e-300).unwrap().value();
        assert!((out.data()[0] + 1.0).abs() < 1e-12);
        assert!((out.data()[1] - 3.0).abs() < 1e-12);

        assert!(x.layernorm(&g, &b, 0.0).is_err());
    }

    #[test]
    fn layernorm_output_has_zero_mean() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.7).sin() * 4.0));
        let ones = tape.constant(Tensor::full(&[5], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[5]));
        let out = x.layernorm(&ones, &zeros, 1e-5).unwrap().value();
        for row in out.data().chunks(5) {
            assert!(row.iter().sum::<f64>().abs() / 5.0 < 1e-10);
        }
    }

    #[test]
    fn concat_shapes_and_errors() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 5]));
        assert_eq!(Var::concat(&[a, b], 1).unwrap().shape(), vec![2, 8]);
        assert!(Var::concat(&[a, b], 0).is_err());
    }

    #[test]
    fn mean_axis_of_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 4, 2], 2.5));
        let m = x.mean_axis(1).unwrap().value();
        assert_eq!(m.shape(), &[3, 2]);
        assert!(m.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 0.5]), true);
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 0.5]), true);
        let loss = x.mul(&x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., -4., 1.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let l = x.sum();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let c = tape.constant(t(&[2], &[3., 4.]));
        let l = x.mul(&c).unwrap().sum();
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3., 4.]);
    }

    #[test]
    fn cross_tape_operands_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.constant(Tensor::zeros(&[2]));
        let b = t2.constant(Tensor::zeros(&[2]));
        assert!(matches!(a.add(&b), Err(Error::Contract(_))));
    }
}
