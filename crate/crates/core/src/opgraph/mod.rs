//! Operator-graph IR with FLOP and off-chip byte accounting.
//!
//! A graph is a flat list of tensors and operators. Tensors without a producer
//! are external inputs (activations, weights, constants); tensors without
//! consumers, or explicitly flagged with `output`, are written back off-chip.
//! The graph is plain data so that malformed graphs can be loaded and
//! reported on by [`validate_graph`] instead of failing at construction.

mod intensity;
mod io;
mod validate;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use intensity::{
    boundary_bytes, classify_roofline, operational_intensity, IntensityReport, KernelIntensity, RooflineBound,
};
pub use io::{GraphFile, OperatorRecord, TensorRecord, GRAPH_SCHEMA};
pub use validate::{validate_graph, validate_partition, Issue, ValidationReport};

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DType {
    BF16,
    FP32,
    INT32,
}

impl DType {
    pub fn bytes_per_element(self) -> u64 {
        match self {
            DType::BF16 => 2,
            DType::FP32 | DType::INT32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub id: String,
    pub shape: Vec<u64>,
    pub dtype: DType,
    /// Forces an off-chip write even when the tensor also has consumers.
    pub output: bool,
}

impl TensorSpec {
    pub fn new(id: impl Into<String>, shape: &[u64], dtype: DType) -> Self {
        TensorSpec {
            id: id.into(),
            shape: shape.to_vec(),
            dtype,
            output: false,
        }
    }

    pub fn elements(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> u64 {
        self.elements() * self.dtype.bytes_per_element()
    }
}

/// Operator kinds understood by the FLOP model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    /// Batched matrix multiply `[..., M, K] x [..., K, N] -> [..., M, N]`.
    /// Either operand may omit the batch dimensions (broadcast).
    Gemm,
    /// Pointwise op with numpy-style broadcasting of inputs onto the output shape.
    Elementwise { op: String, flops_per_element: u64 },
    /// Axis permutation; `None` reverses the axes.
    Transpose { perm: Option<Vec<usize>> },
    /// Sum-like reduction along one axis.
    Reduce { axis: i64, keepdim: bool },
    /// Row softmax over the last axis.
    Softmax,
    /// Anything else, charged per output element.
    Other { flops_per_element: u64 },
}

/// FLOPs per element charged for a softmax: max, subtract, exp, sum, divide.
pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 5;

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Gemm => "Gemm",
            OpKind::Elementwise { .. } => "Elementwise",
            OpKind::Transpose { .. } => "Transpose",
            OpKind::Reduce { .. } => "Reduce",
            OpKind::Softmax => "Softmax",
            OpKind::Other { .. } => "Other",
        }
    }

    pub fn elementwise(op: &str) -> Self {
        OpKind::Elementwise {
            op: op.to_string(),
            flops_per_element: 1,
        }
    }

    pub fn is_transpose(&self) -> bool {
        matches!(self, OpKind::Transpose { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operator {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Operator {
    pub fn new(id: impl Into<String>, kind: OpKind, inputs: &[&str], outputs: &[&str]) -> Self {
        Operator {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A dataflow graph of tensor operators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpGraph {
    pub name: String,
    tensors: Vec<TensorSpec>,
    operators: Vec<Operator>,
    tensor_index: HashMap<String, usize>,
    op_index: HashMap<String, usize>,
}

impl OpGraph {
    pub fn new(name: impl Into<String>) -> Self {
        OpGraph {
            name: name.into(),
            ..Default::default()
        }
    }

    /// Adds a tensor. Duplicate ids are kept (and later reported by validation);
    /// lookups resolve to the first definition.
    pub fn add_tensor(&mut self, t: TensorSpec) -> &mut Self {
        self.tensor_index.entry(t.id.clone()).or_insert(self.tensors.len());
        self.tensors.push(t);
        self
    }

    pub fn tensor_spec(&mut self, id: &str, shape: &[u64], dtype: DType) -> &mut Self {
        self.add_tensor(TensorSpec::new(id, shape, dtype))
    }

    pub fn add_op(&mut self, op: Operator) -> &mut Self {
        self.op_index.entry(op.id.clone()).or_insert(self.operators.len());
        self.operators.push(op);
        self
    }

    pub fn op(&mut self, id: &str, kind: OpKind, inputs: &[&str], outputs: &[&str]) -> &mut Self {
        self.add_op(Operator::new(id, kind, inputs, outputs))
    }

    /// Marks a tensor as a graph output.
    pub fn mark_output(&mut self, id: &str) -> &mut Self {
        if let Some(&i) = self.tensor_index.get(id) {
            self.tensors[i].output = true;
        }
        self
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    pub fn tensor(&self, id: &str) -> Option<&TensorSpec> {
        self.tensor_index.get(id).map(|&i| &self.tensors[i])
    }

    pub fn operator(&self, id: &str) -> Option<&Operator> {
        self.op_index.get(id).map(|&i| &self.operators[i])
    }

    pub fn op_position(&self, id: &str) -> Option<usize> {
        self.op_index.get(id).copied()
    }

    pub(crate) fn require_tensor(&self, id: &str) -> Result<&TensorSpec> {
        self.tensor(id)
            .ok_or_else(|| Error::invalid(format!("unknown tensor `{id}`")))
    }

    /// The operator writing `tensor`, if any.
    pub fn producer(&self, tensor: &str) -> Option<&Operator> {
        self.operators.iter().find(|op| op.outputs.iter().any(|o| o == tensor))
    }

    /// Operators reading `tensor`, in insertion order, without duplicates.
    pub fn consumers(&self, tensor: &str) -> Vec<&Operator> {
        self.operators
            .iter()
            .filter(|op| op.inputs.iter().any(|i| i == tensor))
            .collect()
    }

    /// Tensors with no producer.
    pub fn external_inputs(&self) -> Vec<&TensorSpec> {
        let produced = self.produced_set();
        self.tensors
            .iter()
            .filter(|t| !produced.contains(t.id.as_str()))
            .collect()
    }

    /// Produced tensors that leave the graph: flagged outputs and tensors no one reads.
    pub fn graph_outputs(&self) -> Vec<&TensorSpec> {
        let produced = self.produced_set();
        let consumed: HashSet<&str> = self
            .operators
            .iter()
            .flat_map(|op| op.inputs.iter().map(String::as_str))
            .collect();
        self.tensors
            .iter()
            .filter(|t| produced.contains(t.id.as_str()) && (t.output || !consumed.contains(t.id.as_str())))
            .collect()
    }

    fn produced_set(&self) -> HashSet<&str> {
        self.operators
            .iter()
            .flat_map(|op| op.outputs.iter().map(String::as_str))
            .collect()
    }

    /// Successor lists over operator positions (producer -> consumer).
    pub(crate) fn op_successors(&self) -> Vec<Vec<usize>> {
        let mut producer_of: HashMap<&str, usize> = HashMap::new();
        for (i, op) in self.operators.iter().enumerate() {
            for o in &op.outputs {
                producer_of.entry(o.as_str()).or_insert(i);
            }
        }
        let mut succ = vec![Vec::new(); self.operators.len()];
        for (j, op) in self.operators.iter().enumerate() {
            for input in &op.inputs {
                if let Some(&i) = producer_of.get(input.as_str()) {
                    if i != j && !succ[i].contains(&j) {
                        succ[i].push(j);
                    }
                }
            }
        }
        succ
    }

    /// Topological order of operator positions. Among ready operators the
    /// earliest-inserted goes first, so a graph built in dependency order
    /// keeps its insertion order.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let succ = self.op_successors();
        let mut indeg = vec![0usize; self.operators.len()];
        for s in &succ {
            for &j in s {
                indeg[j] += 1;
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = indeg
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| Reverse(i))
            .collect();
        let mut order = Vec::with_capacity(self.operators.len());
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(Reverse(j));
                }
            }
        }
        if order.len() != self.operators.len() {
            return Err(Error::invalid("graph contains a cycle"));
        }
        Ok(order)
    }

    pub fn total_flops(&self) -> Result<u64> {
        self.operators.iter().map(|op| op_flops(op, self)).sum()
    }
}

/// Resolves a possibly negative axis against a rank.
pub(crate) fn normalize_axis(axis: i64, rank: usize) -> Option<usize> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    (0..r).contains(&a).then_some(a as usize)
}

/// Default transpose permutation: reversed axes.
pub(crate) fn transpose_perm(perm: &Option<Vec<usize>>, rank: usize) -> Vec<usize> {
    perm.clone().unwrap_or_else(|| (0..rank).rev().collect())
}

/// Shape bookkeeping for a Gemm: `(batch, m, k, n)`.
pub(crate) fn gemm_dims(op: &Operator, g: &OpGraph) -> Result<(u64, u64, u64, u64)> {
    if op.inputs.len() != 2 || op.outputs.len() != 1 {
        return Err(Error::invalid(format!(
            "Gemm `{}` needs 2 inputs and 1 output (arity)",
            op.id
        )));
    }
    let a = &g.require_tensor(&op.inputs[0])?.shape;
    let b = &g.require_tensor(&op.inputs[1])?.shape;
    let c = &g.require_tensor(&op.outputs[0])?.shape;
    if a.len() < 2 || b.len() < 2 || c.len() < 2 {
        return Err(Error::invalid(format!(
            "Gemm `{}` operands must be at least 2-D",
            op.id
        )));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    let out_batch = &c[..c.len() - 2];
    let conform_batch = |x: &[u64]| {
        let xb = &x[..x.len() - 2];
        xb.is_empty() || xb == out_batch
    };
    if k != k2 || c[c.len() - 2] != m || c[c.len() - 1] != n || !conform_batch(a) || !conform_batch(b) {
        return Err(Error::invalid(format!(
            "Gemm `{}` shapes {:?} x {:?} -> {:?} do not conform",
            op.id, a, b, c
        )));
    }
    Ok((out_batch.iter().product(), m, k, n))
}

/// FLOPs performed by one operator.
///
/// Gemm counts a multiply and an add per MAC (`2*M*K*N` per batch);
/// reductions count `n - 1` adds per output; transposes are free.
pub fn op_flops(op: &Operator, g: &OpGraph) -> Result<u64> {
    let out_elems = || -> Result<u64> {
        op.outputs
            .iter()
            .map(|o| g.require_tensor(o).map(TensorSpec::elements))
            .sum()
    };
    match &op.kind {
        OpKind::Gemm => {
            let (batch, m, k, n) = gemm_dims(op, g)?;
            Ok(2 * batch * m * k * n)
        }
        OpKind::Elementwise { flops_per_element, .. } => Ok(out_elems()? * flops_per_element),
        OpKind::Transpose { .. } => Ok(0),
        OpKind::Reduce { axis, .. } => {
            let input = g.require_tensor(
                op.inputs
                    .first()
                    .ok_or_else(|| Error::invalid(format!("Reduce `{}` has no input", op.id)))?,
            )?;
            let ax = normalize_axis(*axis, input.shape.len())
                .ok_or_else(|| Error::invalid(format!("Reduce `{}` axis {axis} out of range", op.id)))?;
            let n = input.shape[ax];
            Ok(out_elems()? * n.saturating_sub(1))
        }
        OpKind::Softmax => Ok(out_elems()? * SOFTMAX_FLOPS_PER_ELEMENT),
        OpKind::Other { flops_per_element } => Ok(out_elems()? * flops_per_element),
    }
}

/// A grouping of operators into kernels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub kernels: Vec<Vec<String>>,
}

impl Partition {
    /// One kernel per operator, in topological order.
    pub fn unfused(g: &OpGraph) -> Result<Self> {
        let order = g.topological_order()?;
        Ok(Partition {
            kernels: order.into_iter().map(|i| vec![g.operators()[i].id.clone()]).collect(),
        })
    }

    /// Every operator in one kernel.
    pub fn single(g: &OpGraph) -> Self {
        Partition {
            kernels: vec![g.operators().iter().map(|o| o.id.clone()).collect()],
        }
    }

    pub fn from_groups(groups: &[&[&str]]) -> Self {
        Partition {
            kernels: groups
                .iter()
                .map(|k| k.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_graph(m: u64, k: u64, n: u64) -> OpGraph {
        let mut g = OpGraph::new("gemm");
        g.tensor_spec("a", &[m, k], DType::BF16)
            .tensor_spec("b", &[k, n], DType::BF16)
            .tensor_spec("c", &[m, n], DType::BF16)
            .op("g", OpKind::Gemm, &["a", "b"], &["c"]);
        g
    }

    #[test]
    fn gemm_flops_32_cube() {
        let g = gemm_graph(32, 32, 32);
        assert_eq!(op_flops(&g.operators()[0], &g).unwrap(), 65536);
    }

    #[test]
    fn transpose_is_free() {
        let mut g = OpGraph::new("t");
        g.tensor_spec("x", &[7, 9, 3], DType::FP32)
            .tensor_spec("y", &[3, 9, 7], DType::FP32)
            .op("t", OpKind::Transpose { perm: None }, &["x"], &["y"]);
        assert_eq!(op_flops(&g.operators()[0], &g).unwrap(), 0);
    }

    #[test]
    fn elementwise_mul_one_flop_per_element() {
        let mut g = OpGraph::new("m");
        g.tensor_spec("x", &[128, 128], DType::BF16)
            .tensor_spec("w", &[128, 128], DType::BF16)
            .tensor_spec("y", &[128, 128], DType::BF16)
            .op("mul", OpKind::elementwise("mul"), &["x", "w"], &["y"]);
        assert_eq!(op_flops(&g.operators()[0], &g).unwrap(), 16384);
    }

    #[test]
    fn reduce_counts_n_minus_one_per_output() {
        let mut g = OpGraph::new("r");
        g.tensor_spec("x", &[4, 10], DType::FP32)
            .tensor_spec("y", &[4, 1], DType::FP32)
            .op(
                "r",
                OpKind::Reduce {
                    axis: -1,
                    keepdim: true,
                },
                &["x"],
                &["y"],
            );
        assert_eq!(op_flops(&g.operators()[0], &g).unwrap(), 4 * 9);
    }

    #[test]
    fn batched_gemm_with_broadcast_weight() {
        let mut g = OpGraph::new("bg");
        g.tensor_spec("a", &[16, 8], DType::BF16)
            .tensor_spec("w", &[4, 8, 2], DType::BF16)
            .tensor_spec("c", &[4, 16, 2], DType::BF16)
            .op("g", OpKind::Gemm, &["a", "w"], &["c"]);
        assert_eq!(op_flops(&g.operators()[0], &g).unwrap(), 2 * 4 * 16 * 8 * 2);
    }

    #[test]
    fn nonconforming_gemm_is_an_error() {
        let mut g = gemm_graph(4, 5, 6);
        g.tensor_spec("bad", &[7, 6], DType::BF16)
            .op("g2", OpKind::Gemm, &["a", "bad"], &["c"]);
        assert!(op_flops(&g.operators()[1], &g).is_err());
    }

    #[test]
    fn topological_order_keeps_insertion_order_when_possible() {
        let mut g = OpGraph::new("chain");
        g.tensor_spec("x", &[2], DType::FP32)
            .tensor_spec("y", &[2], DType::FP32)
            .tensor_spec("z", &[2], DType::FP32)
            .op("b", OpKind::elementwise("neg"), &["y"], &["z"])
            .op("a", OpKind::elementwise("neg"), &["x"], &["y"]);
        assert_eq!(g.topological_order().unwrap(), vec![1, 0]);
    }
}
