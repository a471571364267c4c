use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{DType, OpGraph, OpKind, Operator, TensorSpec};
use crate::error::{Error, Result};

/// Schema tag carried by graph files.
pub const GRAPH_SCHEMA: &str = "opgraph_v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub id: String,
    pub shape: Vec<u64>,
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub output: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorRecord {
    pub id: String,
    pub kind: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub attrs: Map<String, Value>,
}

/// On-disk form of an [`OpGraph`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphFile {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    pub tensors: Vec<TensorRecord>,
    pub operators: Vec<OperatorRecord>,
    /// Tensors at which hinted fusion must start a new kernel.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fusion_hints: Vec<String>,
}

fn attr_u64(attrs: &Map<String, Value>, key: &str, default: u64) -> Result<u64> {
    match attrs.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| Error::invalid(format!("attribute `{key}` must be a non-negative integer"))),
    }
}

impl OperatorRecord {
    fn to_operator(&self) -> Result<Operator> {
        let a = &self.attrs;
        let kind = match self.kind.as_str() {
            "Gemm" => OpKind::Gemm,
            "Elementwise" => OpKind::Elementwise {
                op: a.get("op").and_then(Value::as_str).unwrap_or("unknown").to_string(),
                flops_per_element: attr_u64(a, "flops_per_element", 1)?,
            },
            "Transpose" => OpKind::Transpose {
                perm: match a.get("perm") {
                    None => None,
                    Some(v) => Some(serde_json::from_value(v.clone())?),
                },
            },
            "Reduce" => OpKind::Reduce {
                axis: a.get("axis").and_then(Value::as_i64).unwrap_or(-1),
                keepdim: a.get("keepdim").and_then(Value::as_bool).unwrap_or(true),
            },
            "Softmax" => OpKind::Softmax,
            "Other" => OpKind::Other {
                flops_per_element: attr_u64(a, "flops_per_element", 0)?,
            },
            other => {
                return Err(Error::invalid(format!(
                    "operator `{}` has unknown kind `{other}`",
                    self.id
                )))
            }
        };
        Ok(Operator {
            id: self.id.clone(),
            kind,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        })
    }

    fn from_operator(op: &Operator) -> Self {
        let attrs = match &op.kind {
            OpKind::Gemm | OpKind::Softmax => Map::new(),
            OpKind::Elementwise { op, flops_per_element } => json!({"op": op, "flops_per_element": flops_per_element})
                .as_object()
                .cloned()
                .unwrap(),
            OpKind::Transpose { perm } => match perm {
                Some(p) => json!({ "perm": p }).as_object().cloned().unwrap(),
                None => Map::new(),
            },
            OpKind::Reduce { axis, keepdim } => json!({"axis": axis, "keepdim": keepdim}).as_object().cloned().unwrap(),
            OpKind::Other { flops_per_element } => json!({ "flops_per_element": flops_per_element })
                .as_object()
                .cloned()
                .unwrap(),
        };
        OperatorRecord {
            id: op.id.clone(),
            kind: op.kind.name().to_string(),
            inputs: op.inputs.clone(),
            outputs: op.outputs.clone(),
            attrs,
        }
    }
}

impl GraphFile {
    pub fn into_graph(self) -> Result<OpGraph> {
        if self.schema != GRAPH_SCHEMA {
            return Err(Error::invalid(format!(
                "expected schema `{GRAPH_SCHEMA}`, found `{}`",
                self.schema
            )));
        }
        for h in &self.fusion_hints {
            if !self.tensors.iter().any(|t| &t.id == h) {
                return Err(Error::invalid(format!("fusion hint `{h}` names no tensor")));
            }
        }
        let mut g = OpGraph::new(self.name);
        for t in self.tensors {
            g.add_tensor(TensorSpec {
                id: t.id,
                shape: t.shape,
                dtype: t.dtype,
                output: t.output,
            });
        }
        for op in &self.operators {
            g.add_op(op.to_operator()?);
        }
        Ok(g)
    }

    pub fn from_graph(g: &OpGraph) -> Self {
        GraphFile {
            schema: GRAPH_SCHEMA.to_string(),
            name: g.name.clone(),
            tensors: g
                .tensors()
                .iter()
                .map(|t| TensorRecord {
                    id: t.id.clone(),
                    shape: t.shape.clone(),
                    dtype: t.dtype,
                    output: t.output,
                })
                .collect(),
            operators: g.operators().iter().map(OperatorRecord::from_operator).collect(),
            fusion_hints: Vec::new(),
        }
    }

    pub fn with_hints(mut self, hints: &[&str]) -> Self {
        self.fusion_hints = hints.iter().map(|h| h.to_string()).collect();
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl OpGraph {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<GraphFile>(s)?.into_graph()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GraphFile::from_graph(self)).expect("graph serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn round_trips_fixtures() {
        for g in [
            fixtures::monarch(),
            fixtures::decoder_prefill(),
            fixtures::decoder_decode(),
        ] {
            let back = OpGraph::from_json(&g.to_json()).unwrap();
            assert_eq!(back.tensors(), g.tensors());
            assert_eq!(back.operators(), g.operators());
        }
    }

    #[test]
    fn rejects_wrong_schema_and_unknown_kind() {
        let bad = r#"{"schema":"opgraph_v0","tensors":[],"operators":[]}"#;
        assert!(OpGraph::from_json(bad).is_err());
        let bad = r#"{"schema":"opgraph_v1","tensors":[{"id":"a","shape":[1],"dtype":"BF16"}],
            "operators":[{"id":"x","kind":"Conv","inputs":["a"],"outputs":["a"]}]}"#;
        let err = OpGraph::from_json(bad).unwrap_err().to_string();
        assert!(err.contains("unknown kind"), "{err}");
    }

    #[test]
    fn parses_minimal_document() {
        let doc = r#"{"schema":"opgraph_v1","tensors":[
            {"id":"a","shape":[32,32],"dtype":"BF16"},
            {"id":"b","shape":[32,32],"dtype":"BF16"},
            {"id":"c","shape":[32,32],"dtype":"FP32"}],
          "operators":[{"id":"g","kind":"Gemm","inputs":["a","b"],"outputs":["c"],"attrs":{"M":32,"K":32,"N":32}}]}"#;
        let g = OpGraph::from_json(doc).unwrap();
        assert_eq!(g.total_flops().unwrap(), 65536);
        assert_eq!(g.tensor("c").unwrap().bytes(), 4096);
    }
}
