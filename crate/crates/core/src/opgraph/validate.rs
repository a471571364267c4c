use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::Serialize;

use super::{gemm_dims, normalize_axis, transpose_perm, OpGraph, OpKind, Partition};
use crate::error::{Error, Result};

/// One violated structural rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    /// Short rule name, e.g. `arity`, `shape`, `dangling`, `cycle`.
    pub code: &'static str,
    /// Id of the offending tensor or operator.
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.code, self.subject, self.message)
    }
}

/// Outcome of a structural check. Errors make the input unusable, warnings do not.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.errors.iter().chain(&self.warnings).any(|i| i.code == code)
    }

    pub(crate) fn error(&mut self, code: &'static str, subject: &str, message: impl Into<String>) {
        self.errors.push(Issue {
            code,
            subject: subject.to_string(),
            message: message.into(),
        });
    }

    pub(crate) fn warn(&mut self, code: &'static str, subject: &str, message: impl Into<String>) {
        self.warnings.push(Issue {
            code,
            subject: subject.to_string(),
            message: message.into(),
        });
    }

    /// Converts a failed report into an [`Error::Invalid`] listing every error.
    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let msgs: Vec<String> = self.errors.iter().map(Issue::to_string).collect();
            Err(Error::Invalid(msgs.join("; ")))
        }
    }
}

fn broadcastable(input: &[u64], output: &[u64]) -> bool {
    input.len() <= output.len()
        && input
            .iter()
            .rev()
            .zip(output.iter().rev())
            .all(|(&i, &o)| i == o || i == 1)
}

/// Checks every structural invariant of a graph. Never fails; problems are listed.
pub fn validate_graph(g: &OpGraph) -> ValidationReport {
    let mut r = ValidationReport::default();

    let mut seen = HashSet::new();
    for t in g.tensors() {
        if !seen.insert(t.id.as_str()) {
            r.error("duplicate", &t.id, "tensor id defined more than once");
        }
        if t.shape.is_empty() {
            r.error("shape", &t.id, "tensor shape is empty");
        } else if t.shape.contains(&0) {
            r.error("shape", &t.id, format!("zero extent in {:?}", t.shape));
        }
    }
    let mut seen_ops = HashSet::new();
    let mut producers: HashMap<&str, Vec<&str>> = HashMap::new();
    for op in g.operators() {
        if !seen_ops.insert(op.id.as_str()) {
            r.error("duplicate", &op.id, "operator id defined more than once");
        }
        for id in op.inputs.iter().chain(&op.outputs) {
            if g.tensor(id).is_none() {
                r.error("dangling", &op.id, format!("references unknown tensor `{id}`"));
            }
        }
        for o in &op.outputs {
            producers.entry(o.as_str()).or_default().push(op.id.as_str());
        }
    }
    let mut multi: Vec<_> = producers.iter().filter(|(_, p)| p.len() > 1).collect();
    multi.sort();
    for (t, p) in multi {
        r.error("multi-producer", t, format!("produced by {}", p.join(", ")));
    }

    if g.topological_order().is_err() {
        r.error("cycle", &g.name, "operator graph is not acyclic");
    }

    for op in g.operators() {
        check_operator(g, op, &mut r);
    }
    r
}

fn check_operator(g: &OpGraph, op: &super::Operator, r: &mut ValidationReport) {
    let resolved = op.inputs.iter().chain(&op.outputs).all(|id| g.tensor(id).is_some());
    let arity = |r: &mut ValidationReport, ins: usize, outs: usize| {
        if op.inputs.len() != ins || op.outputs.len() != outs {
            r.error(
                "arity",
                &op.id,
                format!(
                    "{} expects {ins} input(s) and {outs} output(s), found {} and {}",
                    op.kind.name(),
                    op.inputs.len(),
                    op.outputs.len()
                ),
            );
            false
        } else {
            true
        }
    };
    match &op.kind {
        OpKind::Gemm => {
            if arity(r, 2, 1) && resolved {
                if let Err(e) = gemm_dims(op, g) {
                    r.error("shape", &op.id, e.to_string());
                }
            }
        }
        OpKind::Elementwise { .. } => {
            if op.inputs.is_empty() || op.outputs.len() != 1 {
                r.error("arity", &op.id, "Elementwise expects >= 1 input and 1 output");
            } else if resolved {
                let out = &g.tensor(&op.outputs[0]).unwrap().shape;
                for i in &op.inputs {
                    let s = &g.tensor(i).unwrap().shape;
                    if !broadcastable(s, out) {
                        r.error(
                            "shape",
                            &op.id,
                            format!("input `{i}` {s:?} does not broadcast to {out:?}"),
                        );
                    }
                }
            }
        }
        OpKind::Transpose { perm } => {
            if arity(r, 1, 1) && resolved {
                let s = &g.tensor(&op.inputs[0]).unwrap().shape;
                let out = &g.tensor(&op.outputs[0]).unwrap().shape;
                let p = transpose_perm(perm, s.len());
                let mut sorted = p.clone();
                sorted.sort_unstable();
                if sorted != (0..s.len()).collect::<Vec<_>>() {
                    r.error(
                        "shape",
                        &op.id,
                        format!("{p:?} is not a permutation of rank {}", s.len()),
                    );
                } else {
                    let expect: Vec<u64> = p.iter().map(|&a| s[a]).collect();
                    if &expect != out {
                        r.error("shape", &op.id, format!("expected output {expect:?}, found {out:?}"));
                    }
                }
            }
        }
        OpKind::Reduce { axis, keepdim } => {
            if arity(r, 1, 1) && resolved {
                let s = &g.tensor(&op.inputs[0]).unwrap().shape;
                let out = &g.tensor(&op.outputs[0]).unwrap().shape;
                match normalize_axis(*axis, s.len()) {
                    None => r.error("shape", &op.id, format!("axis {axis} out of range")),
                    Some(a) => {
                        let mut expect = s.clone();
                        if *keepdim {
                            expect[a] = 1;
                        } else {
                            expect.remove(a);
                        }
                        if expect.is_empty() {
                            expect.push(1);
                        }
                        if &expect != out {
                            r.error("shape", &op.id, format!("expected output {expect:?}, found {out:?}"));
                        }
                    }
                }
            }
        }
        OpKind::Softmax => {
            if arity(r, 1, 1) && resolved {
                let s = &g.tensor(&op.inputs[0]).unwrap().shape;
                let out = &g.tensor(&op.outputs[0]).unwrap().shape;
                if s != out {
                    r.error("shape", &op.id, "softmax must preserve shape");
                }
            }
        }
        OpKind::Other { .. } => {
            if op.outputs.is_empty() {
                r.error("arity", &op.id, "operator has no outputs");
            }
        }
    }
}

/// Checks that `p` is a partition of `g` into connected, convex kernels.
pub fn validate_partition(g: &OpGraph, p: &Partition) -> Result<()> {
    let n = g.operators().len();
    let mut owner = vec![usize::MAX; n];
    for (k, kernel) in p.kernels.iter().enumerate() {
        if kernel.is_empty() {
            return Err(Error::invalid(format!("kernel {k} is empty")));
        }
        for id in kernel {
            let i = g
                .op_position(id)
                .ok_or_else(|| Error::invalid(format!("kernel {k} names unknown operator `{id}`")))?;
            if owner[i] != usize::MAX {
                return Err(Error::invalid(format!("operator `{id}` assigned to two kernels")));
            }
            owner[i] = k;
        }
    }
    if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::invalid(format!(
            "operator `{}` not covered by the partition",
            g.operators()[i].id
        )));
    }

    let succ = g.op_successors();
    let mut pred = vec![Vec::new(); n];
    for (i, s) in succ.iter().enumerate() {
        for &j in s {
            pred[j].push(i);
        }
    }
    let reach = |start: &[usize], edges: &[Vec<usize>]| {
        let mut seen = vec![false; n];
        let mut q: VecDeque<usize> = start.iter().copied().collect();
        while let Some(i) = q.pop_front() {
            for &j in &edges[i] {
                if !seen[j] {
                    seen[j] = true;
                    q.push_back(j);
                }
            }
        }
        seen
    };

    for (k, kernel) in p.kernels.iter().enumerate() {
        let members: Vec<usize> = kernel.iter().map(|id| g.op_position(id).unwrap()).collect();
        let down = reach(&members, &succ);
        let up = reach(&members, &pred);
        if let Some(i) = (0..n).find(|&i| owner[i] != k && down[i] && up[i]) {
            return Err(Error::invalid(format!(
                "kernel {k} is not convex: a path leaves through `{}` and re-enters",
                g.operators()[i].id
            )));
        }
        // weak connectivity over producer/consumer edges inside the kernel
        let inside: HashSet<usize> = members.iter().copied().collect();
        let mut seen = HashSet::from([members[0]]);
        let mut q = VecDeque::from([members[0]]);
        while let Some(i) = q.pop_front() {
            for &j in succ[i].iter().chain(&pred[i]) {
                if inside.contains(&j) && seen.insert(j) {
                    q.push_back(j);
                }
            }
        }
        if seen.len() != inside.len() {
            return Err(Error::invalid(format!("kernel {k} is not connected")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::opgraph::{DType, OpKind, Partition};

    #[test]
    fn monarch_fixture_is_valid() {
        let r = validate_graph(&fixtures::monarch());
        assert!(r.is_ok(), "{:?}", r.errors);
    }

    #[test]
    fn empty_graph_is_valid() {
        assert!(validate_graph(&OpGraph::new("empty")).is_ok());
    }

    #[test]
    fn gemm_with_three_inputs_reports_arity() {
        let mut g = OpGraph::new("bad");
        g.tensor_spec("a", &[2, 2], DType::BF16)
            .tensor_spec("b", &[2, 2], DType::BF16)
            .tensor_spec("c", &[2, 2], DType::BF16)
            .tensor_spec("d", &[2, 2], DType::BF16)
            .op("g", OpKind::Gemm, &["a", "b", "c"], &["d"]);
        let r = validate_graph(&g);
        assert!(!r.is_ok());
        assert!(r.has_code("arity"));
    }

    #[test]
    fn dangling_and_multi_producer_are_reported_not_thrown() {
        let mut g = OpGraph::new("bad");
        g.tensor_spec("a", &[2], DType::FP32)
            .tensor_spec("b", &[2], DType::FP32)
            .op("p1", OpKind::elementwise("neg"), &["a"], &["b"])
            .op("p2", OpKind::elementwise("neg"), &["ghost"], &["b"]);
        let r = validate_graph(&g);
        assert!(r.has_code("dangling"));
        assert!(r.has_code("multi-producer"));
    }

    #[test]
    fn cycle_is_reported() {
        let mut g = OpGraph::new("loop");
        g.tensor_spec("a", &[2], DType::FP32)
            .tensor_spec("b", &[2], DType::FP32)
            .op("x", OpKind::elementwise("neg"), &["a"], &["b"])
            .op("y", OpKind::elementwise("neg"), &["b"], &["a"]);
        assert!(validate_graph(&g).has_code("cycle"));
    }

    #[test]
    fn bad_transpose_shape() {
        let mut g = OpGraph::new("t");
        g.tensor_spec("a", &[2, 3], DType::FP32)
            .tensor_spec("b", &[2, 3], DType::FP32)
            .op("t", OpKind::Transpose { perm: None }, &["a"], &["b"]);
        assert!(validate_graph(&g).has_code("shape"));
    }

    #[test]
    fn non_convex_partition_rejected() {
        let g = fixtures::monarch();
        let p = Partition::from_groups(&[&["gemm0", "gemm1"], &["mul", "transpose"]]);
        let err = validate_partition(&g, &p).unwrap_err().to_string();
        assert!(err.contains("convex"), "{err}");
    }

    #[test]
    fn uncovered_and_duplicate_partitions_rejected() {
        let g = fixtures::monarch();
        let p = Partition::from_groups(&[&["gemm0", "mul"], &["transpose"]]);
        assert!(validate_partition(&g, &p).is_err());
        let p = Partition::from_groups(&[&["gemm0", "mul"], &["mul", "transpose", "gemm1"]]);
        assert!(validate_partition(&g, &p).is_err());
    }

    #[test]
    fn disconnected_kernel_rejected() {
        let mut g = OpGraph::new("par");
        g.tensor_spec("a", &[2], DType::FP32)
            .tensor_spec("b", &[2], DType::FP32)
            .tensor_spec("c", &[2], DType::FP32)
            .tensor_spec("d", &[2], DType::FP32)
            .op("x", OpKind::elementwise("neg"), &["a"], &["b"])
            .op("y", OpKind::elementwise("neg"), &["c"], &["d"]);
        let p = Partition::from_groups(&[&["x", "y"]]);
        assert!(validate_partition(&g, &p).is_err());
    }
}
