use crate::ssm::scan::{Discretization, ScanCache, ScanShape};
use crate::tensor::{Tensor, TensorError, TensorResult};

use super::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a scalar operand is broadcast in a binary elementwise op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bcast {
    None,
    ScalarLeft,
    ScalarRight,
}

/// A recorded operation together with whatever its backward rule needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    BlockLinear {
        xs: Vec<Var>,
        widths: Vec<usize>,
        w: Var,
        bias: Option<Var>,
        rows: usize,
        dout: usize,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Exp {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Silu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    MeanPoolTime {
        x: Var,
        batch: usize,
        len: usize,
        ch: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        in_chunk: usize,
        start: usize,
        width: usize,
    },
    SumN {
        xs: Vec<Var>,
    },
    Conv1d {
        x: Var,
        k: Var,
        bias: Var,
        batch: usize,
        len: usize,
        cin: usize,
        cout: usize,
        width: usize,
    },
    DepthwiseConv {
        x: Var,
        k: Var,
        bias: Var,
        batch: usize,
        len: usize,
        ch: usize,
        width: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Scan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        shape: ScanShape,
        mode: Discretization,
        cache: ScanCache,
    },
    ScalePerSample {
        x: Var,
        s: Var,
        per: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Bce {
        logits: Var,
        labels: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::BlockLinear { .. } => "block_linear",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Exp { .. } => "exp",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Silu { .. } => "silu",
            Op::Softplus { .. } => "softplus",
            Op::Softmax { .. } => "softmax",
            Op::MeanPoolTime { .. } => "mean_pool_time",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SumN { .. } => "sum_n",
            Op::Conv1d { .. } => "conv1d",
            Op::DepthwiseConv { .. } => "depthwise_causal_conv",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Scan { .. } => "selective_scan",
            Op::ScalePerSample { .. } => "scale_per_sample",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Bce { .. } => "bce_with_logits",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Deliberate errors that can be injected into backward rules to verify
/// that the gradient checker notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Drops the `-⟨g, y⟩` term of the softmax Jacobian.
    Softmax,
    /// Halves the gradient flowing to the right operand of matmul/linear.
    MatMul,
    /// Ignores the state carried backwards through the scan.
    Scan,
}

impl std::str::FromStr for BackwardFault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "matmul" => Ok(Self::MatMul),
            "scan" => Ok(Self::Scan),
            other => Err(format!("unknown fault '{other}' (expected softmax, matmul or scan)")),
        }
    }
}

/// Append-only tape of operations recorded during a forward pass.
///
/// Every node's inputs precede it, so a reverse sweep over the node list is
/// a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_lookup: Vec<Option<Var>>,
    pub(crate) fault: Option<BackwardFault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Self { fault, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        tensor.zero_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    /// Records (once per graph) the parameter `id` of `store` as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_lookup.len() <= id.0 {
            self.param_lookup.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_lookup[id.0] {
            return v;
        }
        let mut t = store.get(id).clone();
        t.zero_grad();
        let rg = t.requires_grad();
        let v = self.push(t, Op::Leaf, rg);
        self.param_lookup[id.0] = Some(v);
        self.params.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    ///
    /// Gradients accumulate into the leaves: calling `backward` twice without
    /// [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            super::backward::backward_node(self, i, &g, &mut grads);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Parameters registered through [`Graph::param`], in registration order.
    pub fn params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    /// Adds the gradient of every registered parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

/// Adds `g` into the gradient slot of `v` when `v` needs one.
pub(crate) fn accum(graph: &Graph, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    if !graph.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
