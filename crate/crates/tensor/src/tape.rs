//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value, so node order
//! is a topological order. [`Tape::backward`] walks the list once in reverse.
//! A tape supports a single backward pass; a second call fails with
//! [`TensorError::TapeConsumed`]. Gradients are returned per parameter and
//! added into a [`ParamStore`] with [`ParamStore::accumulate`], so
//! accumulating several tapes before one optimizer step is an ordered sum.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::ops::{self, Conv2dParams, ConvPlan, Elementwise, Reduce};
use crate::{ParamId, ParamStore, Scalar, Shape4, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

/// Backward rule for an operation defined outside this crate.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, given the gradient of the output.
    /// `None` means "no gradient flows to this input".
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        plan: ConvPlan,
    },
    Upsample2x {
        input: usize,
    },
    LeakyRelu {
        input: usize,
        slope: T,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Elementwise {
        a: usize,
        b: usize,
        kind: Elementwise,
    },
    Scale {
        input: usize,
        k: T,
    },
    Reduce {
        input: usize,
        kind: Reduce,
    },
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the parameters it reached.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_param: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::ForeignVar(v.id));
        }
        Ok(v.id)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.nodes[v.id].param = Some(id);
        v
    }

    /// Record a parameter under an explicit value, e.g. a fake-quantized copy
    /// whose gradient should flow straight through to `id`.
    pub fn param_with_value(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.id].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("variable from another tape")].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.value(v).shape()
    }

    fn check_finite(value: &Tensor<T>, op: &'static str) -> Result<()> {
        if value.all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, params: Conv2dParams) -> Result<Var> {
        let (i, w) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let plan = ConvPlan::new(self.nodes[i].value.shape(), self.nodes[w].value.shape(), params)?;
        if let Some(b) = b {
            let n = self.nodes[b].value.len();
            if n != plan.out_shape().c {
                return Err(TensorError::Conv(format!(
                    "bias has {n} values for {} output channels",
                    plan.out_shape().c
                )));
            }
        }
        let value = ops::conv2d_planned(
            &plan,
            &self.nodes[i].value,
            &self.nodes[w].value,
            b.map(|b| &self.nodes[b].value),
        );
        Self::check_finite(&value, "conv2d")?;
        let rg = self.rg(i) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input: i,
                weight: w,
                bias: b,
                plan,
            },
            rg,
        ))
    }

    pub fn bilinear_upsample2x(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = ops::bilinear_upsample2x(&self.nodes[i].value)?;
        let rg = self.rg(i);
        Ok(self.push(value, Op::Upsample2x { input: i }, rg))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Result<Var> {
        let i = self.idx(input)?;
        if !(slope >= T::ZERO && slope < T::ONE) {
            return Err(TensorError::Invalid {
                op: "leaky_relu",
                reason: format!("slope {slope} outside [0, 1)"),
            });
        }
        let value = ops::leaky_relu(&self.nodes[i].value, slope);
        let rg = self.rg(i);
        Ok(self.push(value, Op::LeakyRelu { input: i, slope }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let value = ops::concat_channels(&self.nodes[a].value, &self.nodes[b].value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let value = ops::elementwise(&self.nodes[a].value, &self.nodes[b].value, kind)?;
        Self::check_finite(&value, "elementwise")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Elementwise { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn scale(&mut self, input: Var, k: T) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.nodes[i].value.map(|x| x * k);
        Self::check_finite(&value, "scale")?;
        let rg = self.rg(i);
        Ok(self.push(value, Op::Scale { input: i, k }, rg))
    }

    pub fn reduce(&mut self, input: Var, kind: Reduce) -> Result<Var> {
        let i = self.idx(input)?;
        let value = ops::reduce(&self.nodes[i].value, kind);
        Self::check_finite(&value, "reduce")?;
        let rg = self.rg(i);
        Ok(self.push(value, Op::Reduce { input: i, kind }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, Reduce::Sum)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, Reduce::Mean)
    }

    /// Record an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, rule: Box<dyn CustomOp<T>>) -> Result<Var> {
        let ids = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: rule.name() });
        }
        let rg = ids.iter().any(|&i| self.rg(i));
        Ok(self.push(value, Op::Custom { inputs: ids, rule }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.nodes[root].value.shape();
        if !shape.is_scalar() {
            return Err(TensorError::NotScalar { op: "backward", shape });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(T::ONE));
        let mut out = Gradients::default();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            if let Some(pid) = node.param {
                let slot = out.by_param.entry(pid).or_insert_with(|| Tensor::zeros(g.shape()));
                for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
                continue;
            }
            let rg = |j: usize| self.nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    plan,
                } => {
                    let r = ops::conv2d_backward_planned(
                        plan,
                        &self.nodes[*input].value,
                        &self.nodes[*weight].value,
                        &g,
                        (rg(*input), rg(*weight), bias.is_some_and(rg)),
                    );
                    if let Some(gi) = r.input {
                        add_into(&mut grads[*input], gi);
                    }
                    if let Some(gw) = r.weight {
                        add_into(&mut grads[*weight], gw);
                    }
                    if let (Some(b), Some(gb)) = (bias, r.bias) {
                        let shape = self.nodes[*b].value.shape();
                        add_into(&mut grads[*b], gb.reshape(shape)?);
                    }
                }
                Op::Upsample2x { input } => {
                    let gi = ops::bilinear_upsample2x_backward(self.nodes[*input].value.shape(), &g);
                    add_into(&mut grads[*input], gi);
                }
                Op::LeakyRelu { input, slope } => {
                    let gi = ops::leaky_relu_backward(&self.nodes[*input].value, &g, *slope);
                    add_into(&mut grads[*input], gi);
                }
                Op::Concat { a, b } => {
                    let (ga, gb) = ops::split_channels(&g, self.nodes[*a].value.shape().c);
                    if rg(*a) {
                        add_into(&mut grads[*a], ga);
                    }
                    if rg(*b) {
                        add_into(&mut grads[*b], gb);
                    }
                }
                Op::Elementwise { a, b, kind } => {
                    let (a, b) = (*a, *b);
                    let (ga, gb) = match kind {
                        Elementwise::Add => (g.clone(), g),
                        Elementwise::Sub => (g.clone(), g.map(|x| -x)),
                        Elementwise::Mul => (
                            ops::elementwise(&g, &self.nodes[b].value, Elementwise::Mul)?,
                            ops::elementwise(&g, &self.nodes[a].value, Elementwise::Mul)?,
                        ),
                    };
                    if rg(a) {
                        add_into(&mut grads[a], ga);
                    }
                    if rg(b) {
                        add_into(&mut grads[b], gb);
                    }
                }
                Op::Scale { input, k } => {
                    let k = *k;
                    add_into(&mut grads[*input], g.map(|x| x * k));
                }
                Op::Reduce { input, kind } => {
                    let s = self.nodes[*input].value.shape();
                    let g0 = g.data()[0];
                    let v = match kind {
                        Reduce::Sum => g0,
                        Reduce::Mean => g0 / T::from_f64(s.numel().max(1) as f64),
                    };
                    add_into(&mut grads[*input], Tensor::full(s, v));
                }
                Op::Custom { inputs, rule } => {
                    let vals: Vec<&Tensor<T>> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let gs = rule.backward(&vals, &node.value, &g);
                    for (&j, gj) in inputs.iter().zip(gs) {
                        if let Some(gj) = gj {
                            if gj.shape() != self.nodes[j].value.shape() {
                                return Err(TensorError::ShapeMismatch {
                                    op: rule.name(),
                                    expected: self.nodes[j].value.shape(),
                                    got: gj.shape(),
                                });
                            }
                            if rg(j) {
                                add_into(&mut grads[j], gj);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// [`Tape::backward`] followed by accumulation into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let g = self.backward(loss)?;
        store.accumulate(&g)
    }
}
