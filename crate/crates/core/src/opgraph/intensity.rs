use std::collections::HashSet;

use serde::Serialize;

use super::{op_flops, validate_partition, OpGraph, Partition};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelIntensity {
    pub ops: Vec<String>,
    pub flops: u64,
    pub boundary_bytes: u64,
    /// FLOPs per off-chip byte; infinite when the kernel moves no bytes.
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensityReport {
    pub kernels: Vec<KernelIntensity>,
    pub total_flops: u64,
    pub total_bytes: u64,
    pub aggregate: f64,
}

/// Where a kernel sits relative to the roofline ridge point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RooflineBound {
    MemoryBound,
    ComputeBound,
}

/// `oi < balance` is memory bound; a tie counts as compute bound.
pub fn classify_roofline(oi: f64, machine_balance: f64) -> RooflineBound {
    if oi < machine_balance {
        RooflineBound::MemoryBound
    } else {
        RooflineBound::ComputeBound
    }
}

fn ratio(flops: u64, bytes: u64) -> f64 {
    if bytes == 0 {
        f64::INFINITY
    } else {
        flops as f64 / bytes as f64
    }
}

/// Off-chip bytes moved by a kernel given as a set of operator ids.
///
/// Every tensor read by the kernel but produced elsewhere (or external) is
/// loaded once; every tensor produced inside and read elsewhere, or leaving
/// the graph, is stored once. Tensors living entirely inside cost nothing.
pub fn boundary_bytes(g: &OpGraph, kernel: &HashSet<&str>) -> u64 {
    let outputs: HashSet<&str> = g.graph_outputs().iter().map(|t| t.id.as_str()).collect();
    let mut bytes = 0;
    for t in g.tensors() {
        let id = t.id.as_str();
        let produced_inside = g.producer(id).is_some_and(|p| kernel.contains(p.id.as_str()));
        let consumers = g.consumers(id);
        let read_inside = consumers.iter().any(|c| kernel.contains(c.id.as_str()));
        let read_outside = consumers.iter().any(|c| !kernel.contains(c.id.as_str()));
        if read_inside && !produced_inside {
            bytes += t.bytes();
        }
        if produced_inside && (read_outside || outputs.contains(id)) {
            bytes += t.bytes();
        }
    }
    bytes
}

/// Per-kernel and aggregate operational intensity of a partition.
pub fn operational_intensity(g: &OpGraph, p: &Partition) -> Result<IntensityReport> {
    validate_partition(g, p)?;
    let mut kernels = Vec::with_capacity(p.kernels.len());
    for ops in &p.kernels {
        let set: HashSet<&str> = ops.iter().map(String::as_str).collect();
        let mut flops = 0;
        for id in ops {
            flops += op_flops(g.operator(id).expect("validated"), g)?;
        }
        let bytes = boundary_bytes(g, &set);
        kernels.push(KernelIntensity {
            ops: ops.clone(),
            flops,
            boundary_bytes: bytes,
            intensity: ratio(flops, bytes),
        });
    }
    let total_flops = kernels.iter().map(|k| k.flops).sum();
    let total_bytes = kernels.iter().map(|k| k.boundary_bytes).sum();
    Ok(IntensityReport {
        kernels,
        total_flops,
        total_bytes,
        aggregate: ratio(total_flops, total_bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::opgraph::{DType, OpKind};

    #[test]
    fn single_gemm_unfused() {
        let mut g = OpGraph::new("gemm");
        g.tensor_spec("a", &[32, 32], DType::BF16)
            .tensor_spec("b", &[32, 32], DType::BF16)
            .tensor_spec("c", &[32, 32], DType::BF16)
            .op("g", OpKind::Gemm, &["a", "b"], &["c"]);
        let r = operational_intensity(&g, &Partition::unfused(&g).unwrap()).unwrap();
        assert_eq!(r.total_flops, 65536);
        assert_eq!(r.total_bytes, 6144);
        assert!((r.aggregate - 10.666_666).abs() < 1e-5);
    }

    #[test]
    fn roofline_classification() {
        assert_eq!(classify_roofline(39.5, 150.0), RooflineBound::MemoryBound);
        assert_eq!(classify_roofline(410.4, 150.0), RooflineBound::ComputeBound);
        assert_eq!(classify_roofline(150.0, 150.0), RooflineBound::ComputeBound);
    }

    #[test]
    fn monarch_levels_strictly_increase() {
        let g = fixtures::monarch();
        let levels: Vec<f64> = fixtures::monarch_partitions()
            .iter()
            .map(|p| operational_intensity(&g, p).unwrap().aggregate)
            .collect();
        assert!(levels[0] < levels[1] && levels[1] < levels[2], "{levels:?}");
    }

    #[test]
    fn fused_oi_is_total_over_graph_io() {
        let g = fixtures::monarch();
        let r = operational_intensity(&g, &Partition::single(&g)).unwrap();
        let io: u64 = g.external_inputs().iter().map(|t| t.bytes()).sum::<u64>()
            + g.graph_outputs().iter().map(|t| t.bytes()).sum::<u64>();
        assert_eq!(r.total_bytes, io);
    }

    #[test]
    fn shared_external_input_counted_per_kernel() {
        let mut g = OpGraph::new("fan");
        g.tensor_spec("x", &[4], DType::FP32)
            .tensor_spec("y", &[4], DType::FP32)
            .tensor_spec("z", &[4], DType::FP32)
            .op("a", OpKind::elementwise("neg"), &["x"], &["y"])
            .op("b", OpKind::elementwise("neg"), &["x"], &["z"]);
        let r = operational_intensity(&g, &Partition::unfused(&g).unwrap()).unwrap();
        assert_eq!(r.total_bytes, 4 * 16);
    }

    #[test]
    fn invalid_partition_is_an_error() {
        let g = fixtures::monarch();
        assert!(operational_intensity(&g, &Partition::from_groups(&[&["gemm0"]])).is_err());
    }
}
