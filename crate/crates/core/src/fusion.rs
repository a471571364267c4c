//! Streaming-dataflow fusion planner.
//!
//! A graph is cut into kernels by growing each kernel greedily along a
//! topological order. Within a kernel every non-transpose operator becomes a
//! pipeline stage with its own compute units, every tensor becomes a stage
//! buffer spread over enough memory units for its capacity and bandwidth, and
//! transposes disappear into buffer access patterns.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::arch::TileConfig;
use crate::error::{Error, Result};
use crate::opgraph::{
    boundary_bytes, gemm_dims, op_flops, transpose_perm, validate_graph, validate_partition, OpGraph, OpKind,
    Partition, TensorSpec,
};

/// Schema tag for plan dumps.
pub const PLAN_SCHEMA: &str = "fusionplan_v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "boundaries")]
pub enum FusionPolicy {
    /// Grow kernels until a tile resource would overflow.
    Maximal,
    /// One kernel per operator.
    Unfused,
    /// Maximal growth, but always cut where one of these tensors is consumed.
    Hinted(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Data,
    Tensor,
    PipelineStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub op: String,
    pub pcu_alloc: u32,
    pub parallelism: Parallelism,
    pub flops: u64,
    /// Output tiles of the operator.
    pub tiles: u64,
    /// Most compute units the stage can use: one per output tile, times the
    /// reduction chunks for a Gemm.
    pub max_units: u64,
    /// Kernel steps per second this stage sustains given its compute and buffers.
    pub stage_throughput: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferReason {
    Bandwidth,
    Capacity,
    Both,
}

/// How a logical buffer's addresses are spread over its memory units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// Unit `i` accepts addresses in `ranges[i]` (half-open).
    Ranges(Vec<(u64, u64)>),
    /// Unit `(addr / granule) % units` accepts the address.
    BankBits { granule: u64, units: u32 },
}

impl Interleave {
    /// Splits `[0, bytes)` into `units` contiguous ranges.
    pub fn ranges(bytes: u64, units: u32) -> Self {
        let units = units.max(1) as u64;
        let chunk = bytes.div_ceil(units).max(1);
        Interleave::Ranges(
            (0..units)
                .map(|i| ((i * chunk).min(bytes), ((i + 1) * chunk).min(bytes)))
                .collect(),
        )
    }

    pub fn units(&self) -> u32 {
        match self {
            Interleave::Ranges(r) => r.len() as u32,
            Interleave::BankBits { units, .. } => *units,
        }
    }

    /// Owning unit of an address, or `None` when no unit accepts it.
    pub fn owner(&self, addr: u64) -> Option<u32> {
        match self {
            Interleave::Ranges(r) => r.iter().position(|&(lo, hi)| lo <= addr && addr < hi).map(|i| i as u32),
            Interleave::BankBits { granule, units } => Some(((addr / (*granule).max(1)) % *units as u64) as u32),
        }
    }
}

/// An axis permutation applied when reading or writing a buffer.
/// `perm[i]` is the stored axis that becomes view axis `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessPattern {
    pub perm: Vec<usize>,
}

impl AccessPattern {
    pub fn identity(rank: usize) -> Self {
        AccessPattern {
            perm: (0..rank).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// The pattern that reads `self`'s view through a further permutation.
    pub fn then(&self, perm: &[usize]) -> Self {
        AccessPattern {
            perm: perm.iter().map(|&a| self.perm[a]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferRole {
    /// Streamed in from off-chip.
    Input,
    /// Off-chip operand reused by every tile (Gemm right-hand side).
    Weight,
    /// Lives only inside the kernel.
    Intermediate,
    /// Streamed out to off-chip.
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferPlan {
    /// The stored tensor.
    pub tensor: String,
    /// Tensors folded into this buffer as views.
    pub aliases: Vec<String>,
    pub role: BufferRole,
    pub bytes: u64,
    /// SRAM held by the buffer.
    pub footprint_bytes: u64,
    /// Whether the whole tensor is held on-chip (as opposed to a double-buffered tile window).
    pub resident: bool,
    pub pmu_alloc: u32,
    pub reason: BufferReason,
    pub interleave: Interleave,
    pub access_pattern_read: AccessPattern,
    pub access_pattern_write: AccessPattern,
    /// Stage writing the buffer, if inside the kernel.
    pub producer: Option<String>,
    /// Stages reading the buffer.
    pub consumers: Vec<String>,
}

impl BufferPlan {
    pub fn names(&self, tensor: &str) -> bool {
        self.tensor == tensor || self.aliases.iter().any(|a| a == tensor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedKernel {
    pub ops: Vec<String>,
    pub stages: Vec<StagePlan>,
    pub buffers: Vec<BufferPlan>,
    pub boundary_inputs: Vec<String>,
    pub boundary_outputs: Vec<String>,
    pub flops: u64,
    pub boundary_bytes: u64,
    /// Steps the pipeline takes to stream the kernel.
    pub tiles: u64,
}

impl FusedKernel {
    pub fn sram_bytes(&self) -> u64 {
        self.buffers.iter().map(|b| b.footprint_bytes).sum()
    }

    pub fn pcu_total(&self) -> u32 {
        self.stages.iter().map(|s| s.pcu_alloc).sum()
    }

    pub fn pmu_total(&self) -> u32 {
        self.buffers.iter().map(|b| b.pmu_alloc).sum()
    }

    pub fn buffer_for(&self, tensor: &str) -> Option<&BufferPlan> {
        self.buffers.iter().find(|b| b.names(tensor))
    }

    pub fn intensity(&self) -> f64 {
        if self.boundary_bytes == 0 {
            f64::INFINITY
        } else {
            self.flops as f64 / self.boundary_bytes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub schema: String,
    pub graph: String,
    pub policy: FusionPolicy,
    pub kernels: Vec<FusedKernel>,
}

impl FusionPlan {
    pub fn partition(&self) -> Partition {
        Partition {
            kernels: self.kernels.iter().map(|k| k.ops.clone()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: FusionPlan = serde_json::from_str(s)?;
        if plan.schema != PLAN_SCHEMA {
            return Err(Error::invalid(format!(
                "expected schema `{PLAN_SCHEMA}`, found `{}`",
                plan.schema
            )));
        }
        Ok(plan)
    }
}

/// Compute demand of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageDemand {
    pub flops: u64,
    /// Upper bound on useful units.
    pub max_units: u64,
}

/// Splits `budget` compute units across stages in proportion to their FLOPs.
///
/// Largest-remainder rounding; every stage gets at least one unit and no
/// stage exceeds its demand. The total is `min(budget, sum of demands)`.
/// Equal remainders go to the earlier stage.
pub fn allocate_stage_compute(stages: &[StageDemand], budget: u32) -> Result<Vec<u32>> {
    let n = stages.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if (budget as usize) < n {
        return Err(Error::infeasible(format!(
            "PCU count: {n} stages need at least {n} compute units, budget is {budget}"
        )));
    }
    let caps: Vec<u64> = stages.iter().map(|s| s.max_units.max(1)).collect();
    let demand = caps.iter().fold(0u64, |a, &c| a.saturating_add(c));
    let target = demand.min(budget as u64);
    let total_flops: u64 = stages.iter().map(|s| s.flops).sum();
    let quota: Vec<f64> = stages
        .iter()
        .map(|s| {
            if total_flops == 0 {
                budget as f64 / n as f64
            } else {
                budget as f64 * s.flops as f64 / total_flops as f64
            }
        })
        .collect();

    let mut alloc: Vec<u64> = quota
        .iter()
        .zip(&caps)
        .map(|(&q, &c)| (q.floor() as u64).clamp(1, c))
        .collect();
    let mut sum: u64 = alloc.iter().sum();
    while sum < target {
        // largest deficit first; ties to the lower index
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if alloc[i] >= caps[i] {
                continue;
            }
            let deficit = quota[i] - alloc[i] as f64;
            if best.is_none_or(|(_, d)| deficit > d) {
                best = Some((i, deficit));
            }
        }
        let (i, _) = best.expect("target never exceeds total demand");
        alloc[i] += 1;
        sum += 1;
    }
    while sum > target {
        // the most over-served stage gives a unit back; ties to the higher index
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if alloc[i] <= 1 {
                continue;
            }
            let excess = alloc[i] as f64 - quota[i];
            if best.is_none_or(|(_, e)| excess >= e) {
                best = Some((i, excess));
            }
        }
        let (i, _) = best.expect("target is at least the stage count");
        alloc[i] -= 1;
        sum -= 1;
    }
    Ok(alloc.into_iter().map(|a| a as u32).collect())
}

/// Sizes a buffer holding all of `t` that must deliver `required_bw` bytes/s.
pub fn partition_stage_buffer(t: &TensorSpec, required_bw: f64, tile: &TileConfig) -> BufferPlan {
    let (pmu_alloc, reason) = size_buffer(t.bytes(), required_bw, 0.0, tile);
    BufferPlan {
        tensor: t.id.clone(),
        aliases: Vec::new(),
        role: BufferRole::Intermediate,
        bytes: t.bytes(),
        footprint_bytes: t.bytes(),
        resident: true,
        pmu_alloc,
        reason,
        interleave: interleave_for(t.bytes(), pmu_alloc, reason, tile),
        access_pattern_read: AccessPattern::identity(t.shape.len()),
        access_pattern_write: AccessPattern::identity(t.shape.len()),
        producer: None,
        consumers: Vec::new(),
    }
}

fn ceil_units(need: f64, per_unit: f64) -> u32 {
    if need <= 0.0 {
        0
    } else {
        // guard against 2.0000000001 style rounding
        ((need / per_unit) - 1e-9).ceil().max(1.0) as u32
    }
}

fn size_buffer(footprint: u64, read_bw: f64, write_bw: f64, tile: &TileConfig) -> (u32, BufferReason) {
    let cap_units = ceil_units(footprint as f64, tile.pmu_capacity_bytes).max(1);
    let bw_units = ceil_units(read_bw, tile.pmu_read_bw)
        .max(ceil_units(write_bw, tile.pmu_write_bw))
        .max(1);
    let reason = match (cap_units > 1, bw_units > 1) {
        (true, true) => BufferReason::Both,
        (false, true) => BufferReason::Bandwidth,
        _ => BufferReason::Capacity,
    };
    (cap_units.max(bw_units), reason)
}

fn interleave_for(footprint: u64, units: u32, reason: BufferReason, tile: &TileConfig) -> Interleave {
    match reason {
        BufferReason::Bandwidth => Interleave::BankBits {
            granule: (tile.tile_elements * 2).max(1),
            units,
        },
        _ => Interleave::ranges(footprint, units),
    }
}

fn tiles_of(t: &TensorSpec, tile: &TileConfig) -> u64 {
    t.elements().div_ceil(tile.tile_elements.max(1)).max(1)
}

fn window_bytes(t: &TensorSpec, tile: &TileConfig) -> u64 {
    2 * t.elements().min(tile.tile_elements) * t.dtype.bytes_per_element()
}

/// Removes transpose stages, turning each into an access pattern on the
/// buffer that stores its input. FLOPs and boundary bytes are unchanged.
pub fn fold_transpose(g: &OpGraph, kernel: &FusedKernel) -> Result<FusedKernel> {
    let mut k = kernel.clone();
    let transposes: Vec<String> = k
        .stages
        .iter()
        .filter(|s| g.operator(&s.op).is_some_and(|o| o.kind.is_transpose()))
        .map(|s| s.op.clone())
        .collect();
    for op_id in transposes {
        let op = g.operator(&op_id).expect("stage names a graph operator");
        let OpKind::Transpose { perm } = &op.kind else {
            unreachable!()
        };
        let (src, dst) = (&op.inputs[0], &op.outputs[0]);
        let rank = g.require_tensor(src)?.shape.len();
        let perm = transpose_perm(perm, rank);
        let dst_idx = k
            .buffers
            .iter()
            .position(|b| b.names(dst))
            .ok_or_else(|| Error::invalid(format!("no buffer for `{dst}`")))?;
        let dst_buf = k.buffers.remove(dst_idx);
        let src_buf = k
            .buffers
            .iter_mut()
            .find(|b| b.names(src))
            .ok_or_else(|| Error::invalid(format!("no buffer for `{src}`")))?;
        // the view `src` is read through; `src` may itself be an alias
        let base = if src_buf.tensor == *src {
            AccessPattern::identity(rank)
        } else {
            src_buf.access_pattern_read.clone()
        };
        let view = base.then(&perm);
        src_buf.consumers.retain(|c| c != &op_id);
        src_buf.consumers.extend(dst_buf.consumers.iter().cloned());
        src_buf.aliases.push(dst.clone());
        src_buf.aliases.extend(dst_buf.aliases.iter().cloned());
        if dst_buf.role == BufferRole::Output {
            src_buf.access_pattern_write = view.clone();
            src_buf.role = BufferRole::Output;
        }
        if !dst_buf.consumers.is_empty() || dst_buf.role != BufferRole::Output {
            src_buf.access_pattern_read = view;
        }
        if !src_buf.access_pattern_read.is_identity() || !src_buf.access_pattern_write.is_identity() {
            // reordering needs the whole tensor on-chip
            src_buf.resident = true;
            src_buf.footprint_bytes = src_buf.footprint_bytes.max(src_buf.bytes);
        }
        k.stages.retain(|s| s.op != op_id);
    }
    Ok(k)
}

/// Stage and buffer skeleton of a kernel: transposes still present as stages,
/// compute not yet allocated, buffers sized for capacity only.
fn kernel_skeleton(g: &OpGraph, ops: &[usize], tile: &TileConfig) -> Result<FusedKernel> {
    let all_ops = g.operators();
    let op_ids: Vec<String> = ops.iter().map(|&i| all_ops[i].id.clone()).collect();
    let in_kernel: HashSet<&str> = op_ids.iter().map(String::as_str).collect();
    let graph_outputs: HashSet<&str> = g.graph_outputs().iter().map(|t| t.id.as_str()).collect();

    let mut stages = Vec::new();
    let mut flops = 0;
    let mut tiles = 1;
    for &i in ops {
        let op = &all_ops[i];
        let f = op_flops(op, g)?;
        flops += f;
        let out_tiles = op
            .outputs
            .iter()
            .map(|o| g.require_tensor(o).map(|t| tiles_of(t, tile)))
            .sum::<Result<u64>>()?;
        tiles = tiles.max(out_tiles);
        let max_units = match op.kind {
            OpKind::Gemm => {
                let (_, _, kdim, _) = gemm_dims(op, g)?;
                let side = (tile.tile_elements as f64).sqrt().max(1.0) as u64;
                out_tiles * kdim.div_ceil(side)
            }
            _ => out_tiles,
        };
        stages.push(StagePlan {
            op: op.id.clone(),
            pcu_alloc: 1,
            parallelism: Parallelism::PipelineStage,
            flops: f,
            tiles: out_tiles,
            max_units,
            stage_throughput: 0.0,
        });
    }

    // tensors in first-touch order
    let mut seen = HashSet::new();
    let mut tensors = Vec::new();
    for &i in ops {
        for t in all_ops[i].inputs.iter().chain(&all_ops[i].outputs) {
            if seen.insert(t.as_str()) {
                tensors.push(t.as_str());
            }
        }
    }
    let mut buffers = Vec::new();
    let mut boundary_inputs = Vec::new();
    let mut boundary_outputs = Vec::new();
    for id in tensors {
        let t = g.require_tensor(id)?;
        let producer = g.producer(id).filter(|p| in_kernel.contains(p.id.as_str()));
        let consumers: Vec<String> = g
            .consumers(id)
            .into_iter()
            .filter(|c| in_kernel.contains(c.id.as_str()))
            .map(|c| c.id.clone())
            .collect();
        let leaves = producer.is_some()
            && (graph_outputs.contains(id) || g.consumers(id).iter().any(|c| !in_kernel.contains(c.id.as_str())));
        let rhs_operand = g
            .consumers(id)
            .iter()
            .any(|c| in_kernel.contains(c.id.as_str()) && c.kind == OpKind::Gemm && c.inputs[1] == id);
        let role = match (producer.is_some(), leaves) {
            (false, _) if rhs_operand => BufferRole::Weight,
            (false, _) => BufferRole::Input,
            (true, true) => BufferRole::Output,
            (true, false) => BufferRole::Intermediate,
        };
        if role == BufferRole::Input || role == BufferRole::Weight {
            boundary_inputs.push(id.to_string());
        }
        if leaves {
            boundary_outputs.push(id.to_string());
        }
        // produced right-hand operands are re-read by every tile: hold them whole
        let resident = producer.is_some() && rhs_operand;
        let footprint = if resident { t.bytes() } else { window_bytes(t, tile) };
        buffers.push(BufferPlan {
            tensor: id.to_string(),
            aliases: Vec::new(),
            role,
            bytes: t.bytes(),
            footprint_bytes: footprint,
            resident,
            pmu_alloc: 1,
            reason: BufferReason::Capacity,
            interleave: Interleave::ranges(footprint, 1),
            access_pattern_read: AccessPattern::identity(t.shape.len()),
            access_pattern_write: AccessPattern::identity(t.shape.len()),
            producer: producer.map(|p| p.id.clone()),
            consumers,
        });
    }
    let set: HashSet<&str> = op_ids.iter().map(String::as_str).collect();
    Ok(FusedKernel {
        boundary_bytes: boundary_bytes(g, &set),
        ops: op_ids,
        stages,
        buffers,
        boundary_inputs,
        boundary_outputs,
        flops,
        tiles,
    })
}

/// Completes a folded skeleton: weight residency, compute allocation, buffer
/// bandwidth sizing and stage throughputs.
fn finish_kernel(mut k: FusedKernel, tile: &TileConfig) -> Result<FusedKernel> {
    let sram = tile.sram_total_bytes as u64;
    let mut used = k.sram_bytes();
    if used > sram {
        return Err(Error::infeasible(format!(
            "SRAM capacity: kernel [{}] needs {used} bytes, tile has {sram}",
            k.ops.join(", ")
        )));
    }
    // persist weights while they fit, largest reuse first
    let mut weights: Vec<usize> = (0..k.buffers.len())
        .filter(|&i| k.buffers[i].role == BufferRole::Weight && !k.buffers[i].resident)
        .collect();
    weights.sort_by_key(|&i| std::cmp::Reverse(k.buffers[i].bytes));
    for i in weights {
        let b = &mut k.buffers[i];
        let extra = b.bytes.saturating_sub(b.footprint_bytes);
        if used + extra <= sram {
            used += extra;
            b.footprint_bytes = b.bytes;
            b.resident = true;
        }
    }

    let demands: Vec<StageDemand> = k
        .stages
        .iter()
        .map(|s| StageDemand {
            flops: s.flops,
            max_units: s.max_units,
        })
        .collect();
    let alloc = allocate_stage_compute(&demands, tile.pcu_count)?;
    let steps = k.tiles as f64;
    let compute_rate: Vec<f64> = k
        .stages
        .iter()
        .zip(&alloc)
        .map(|(s, &a)| {
            if s.flops == 0 {
                f64::INFINITY
            } else {
                a as f64 * tile.pcu_peak_flops / (s.flops as f64 / steps)
            }
        })
        .collect();
    // buffers are provisioned to keep up with the slowest compute stage
    let mut target = compute_rate.iter().copied().fold(f64::INFINITY, f64::min);
    if !target.is_finite() {
        let max_step_bytes = k.buffers.iter().map(|b| b.bytes).max().unwrap_or(1) as f64 / steps;
        target = tile.link_bw / max_step_bytes.max(1.0);
    }

    for b in &mut k.buffers {
        let step_bytes = b.bytes as f64 / steps;
        let read_bw = if b.consumers.is_empty() {
            0.0
        } else {
            target * step_bytes
        };
        let write_bw = target * step_bytes;
        let (units, reason) = size_buffer(b.footprint_bytes, read_bw, write_bw, tile);
        b.pmu_alloc = units;
        b.reason = reason;
    }
    let cap_units: u32 = k
        .buffers
        .iter()
        .map(|b| ceil_units(b.footprint_bytes as f64, tile.pmu_capacity_bytes).max(1))
        .sum();
    if cap_units > tile.pmu_count {
        return Err(Error::infeasible(format!(
            "PMU count: kernel [{}] needs {cap_units} memory units for capacity, tile has {}",
            k.ops.join(", "),
            tile.pmu_count
        )));
    }
    let total: u32 = k.pmu_total();
    if total > tile.pmu_count {
        // shrink bandwidth-driven allocations proportionally, never below capacity needs
        let spare = (tile.pmu_count - cap_units) as f64;
        let extra_total = (total - cap_units) as f64;
        for b in &mut k.buffers {
            let cap = ceil_units(b.footprint_bytes as f64, tile.pmu_capacity_bytes).max(1);
            let extra = (b.pmu_alloc - cap) as f64;
            b.pmu_alloc = cap + (extra * spare / extra_total).floor() as u32;
        }
    }
    for b in &mut k.buffers {
        b.interleave = interleave_for(b.footprint_bytes, b.pmu_alloc, b.reason, tile);
    }

    for (i, s) in k.stages.iter_mut().enumerate() {
        s.pcu_alloc = alloc[i];
        let mut rate = compute_rate[i];
        for b in &k.buffers {
            let step_bytes = (b.bytes as f64 / steps).max(1.0);
            if b.consumers.contains(&s.op) {
                rate = rate.min(b.pmu_alloc as f64 * tile.pmu_read_bw / step_bytes);
            }
            if b.producer.as_deref() == Some(s.op.as_str()) {
                rate = rate.min(b.pmu_alloc as f64 * tile.pmu_write_bw / step_bytes);
            }
        }
        s.stage_throughput = rate;
        s.parallelism = if s.pcu_alloc == 1 {
            Parallelism::PipelineStage
        } else {
            Parallelism::Data
        };
    }
    Ok(k)
}

/// Builds one fully planned kernel from a set of operator positions.
pub fn build_kernel(g: &OpGraph, ops: &[usize], tile: &TileConfig) -> Result<FusedKernel> {
    let skeleton = kernel_skeleton(g, ops, tile)?;
    let folded = fold_transpose(g, &skeleton)?;
    let mut k = finish_kernel(folded, tile)?;
    for s in &mut k.stages {
        if s.pcu_alloc > 1 && g.operator(&s.op).is_some_and(|o| o.kind == OpKind::Gemm) {
            s.parallelism = Parallelism::Tensor;
        }
    }
    Ok(k)
}

/// Checks whether the operators could share one kernel on this tile.
fn fits(g: &OpGraph, ops: &[usize], tile: &TileConfig) -> Result<()> {
    let stage_count = ops.iter().filter(|&&i| !g.operators()[i].kind.is_transpose()).count();
    if stage_count > tile.pcu_count as usize {
        return Err(Error::infeasible(format!(
            "PCU count: {stage_count} stages exceed {} compute units",
            tile.pcu_count
        )));
    }
    let k = fold_transpose(g, &kernel_skeleton(g, ops, tile)?)?;
    let sram = k.sram_bytes();
    if sram as f64 > tile.sram_total_bytes {
        return Err(Error::infeasible(format!(
            "SRAM capacity: needs {sram} bytes, tile has {}",
            tile.sram_total_bytes
        )));
    }
    let cap_units: u32 = k
        .buffers
        .iter()
        .map(|b| ceil_units(b.footprint_bytes as f64, tile.pmu_capacity_bytes).max(1))
        .sum();
    if cap_units > tile.pmu_count {
        return Err(Error::infeasible(format!(
            "PMU count: needs {cap_units} memory units, tile has {}",
            tile.pmu_count
        )));
    }
    Ok(())
}

/// Partitions `g` into fused kernels under `policy`.
pub fn plan_fusion(g: &OpGraph, tile: &TileConfig, policy: &FusionPolicy) -> Result<FusionPlan> {
    validate_graph(g).into_result()?;
    let order = g.topological_order()?;
    let succ = g.op_successors();
    let hints: HashSet<&str> = match policy {
        FusionPolicy::Hinted(h) => h.iter().map(String::as_str).collect(),
        _ => HashSet::new(),
    };
    let mut producer_pos: HashMap<&str, usize> = HashMap::new();
    for (i, op) in g.operators().iter().enumerate() {
        for o in &op.outputs {
            producer_pos.insert(o.as_str(), i);
        }
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for &i in &order {
        if let Err(e) = fits(g, &[i], tile) {
            return Err(Error::infeasible(format!(
                "operator `{}` alone exceeds the tile: {e}",
                g.operators()[i].id
            )));
        }
        let join = !current.is_empty()
            && *policy != FusionPolicy::Unfused
            && current.iter().any(|&c| succ[c].contains(&i))
            && !g.operators()[i].inputs.iter().any(|t| {
                hints.contains(t.as_str()) && producer_pos.get(t.as_str()).is_some_and(|p| current.contains(p))
            })
            && {
                let mut candidate = current.clone();
                candidate.push(i);
                fits(g, &candidate, tile).is_ok()
            };
        if join {
            current.push(i);
        } else {
            if !current.is_empty() {
                groups.push(std::mem::take(&mut current));
            }
            current.push(i);
        }
    }
    if !current.is_empty() {
        groups.push(current);
    }

    let kernels = groups
        .iter()
        .map(|ops| build_kernel(g, ops, tile))
        .collect::<Result<Vec<_>>>()?;
    let plan = FusionPlan {
        schema: PLAN_SCHEMA.to_string(),
        graph: g.name.clone(),
        policy: policy.clone(),
        kernels,
    };
    check_plan(g, &plan, tile)?;
    Ok(plan)
}

/// Builds a plan for an explicit partition.
pub fn plan_partition(g: &OpGraph, p: &Partition, tile: &TileConfig) -> Result<FusionPlan> {
    validate_partition(g, p)?;
    let order = g.topological_order()?;
    let rank: HashMap<usize, usize> = order.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let mut kernels = Vec::new();
    for ops in &p.kernels {
        let mut pos: Vec<usize> = ops.iter().map(|id| g.op_position(id).unwrap()).collect();
        pos.sort_by_key(|i| rank[i]);
        kernels.push(build_kernel(g, &pos, tile)?);
    }
    Ok(FusionPlan {
        schema: PLAN_SCHEMA.to_string(),
        graph: g.name.clone(),
        policy: FusionPolicy::Hinted(Vec::new()),
        kernels,
    })
}

/// Verifies the structural invariants of a plan against its graph and tile.
pub fn check_plan(g: &OpGraph, plan: &FusionPlan, tile: &TileConfig) -> Result<()> {
    validate_partition(g, &plan.partition())?;
    let order = g.topological_order()?;
    let rank: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(r, &i)| (g.operators()[i].id.as_str(), r))
        .collect();
    for (n, k) in plan.kernels.iter().enumerate() {
        if k.sram_bytes() as f64 > tile.sram_total_bytes {
            return Err(Error::infeasible(format!("kernel {n} exceeds SRAM")));
        }
        if k.pcu_total() > tile.pcu_count {
            return Err(Error::infeasible(format!("kernel {n} exceeds PCU count")));
        }
        if k.stages.iter().any(|s| s.pcu_alloc == 0) {
            return Err(Error::invalid(format!("kernel {n} has a stage without compute")));
        }
        if k.stages
            .iter()
            .any(|s| g.operator(&s.op).is_some_and(|o| o.kind.is_transpose()))
        {
            return Err(Error::invalid(format!("kernel {n} keeps a transpose as a stage")));
        }
        if k.stages
            .windows(2)
            .any(|w| rank[w[0].op.as_str()] > rank[w[1].op.as_str()])
        {
            return Err(Error::invalid(format!(
                "kernel {n} stages are not in topological order"
            )));
        }
    }
    Ok(())
}

/// Unfused kernel count over fused kernel count.
pub fn kernel_call_ratio(unfused: &FusionPlan, fused: &FusionPlan) -> f64 {
    unfused.kernels.len() as f64 / fused.kernels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::sn40l_tile;
    use crate::fixtures;
    use crate::opgraph::{operational_intensity, DType};

    fn demand(flops: u64) -> StageDemand {
        StageDemand {
            flops,
            max_units: u64::MAX,
        }
    }

    #[test]
    fn largest_remainder_tie_goes_to_earlier_stage() {
        let a = allocate_stage_compute(&[demand(45), demand(10), demand(45)], 10).unwrap();
        assert_eq!(a, vec![5, 1, 4]);
    }

    #[test]
    fn single_stage_gets_everything() {
        assert_eq!(allocate_stage_compute(&[demand(3)], 7).unwrap(), vec![7]);
    }

    #[test]
    fn equal_shares_split_evenly() {
        assert_eq!(allocate_stage_compute(&[demand(8), demand(8)], 4).unwrap(), vec![2, 2]);
    }

    #[test]
    fn budget_below_stage_count_is_infeasible() {
        let err = allocate_stage_compute(&[demand(1), demand(1), demand(1)], 2).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn allocation_respects_demand_caps() {
        let stages = [
            StageDemand {
                flops: 1000,
                max_units: 2,
            },
            StageDemand {
                flops: 10,
                max_units: 3,
            },
        ];
        assert_eq!(allocate_stage_compute(&stages, 100).unwrap(), vec![2, 3]);
    }

    #[test]
    fn tiny_stage_still_gets_one_unit() {
        let a = allocate_stage_compute(&[demand(1_000_000), demand(1), demand(1_000_000)], 10).unwrap();
        assert_eq!(a.iter().sum::<u32>(), 10);
        assert_eq!(a[1], 1);
    }

    fn small_tile() -> TileConfig {
        let mut t = sn40l_tile();
        t.pmu_capacity_bytes = 1000.0;
        t.pmu_read_bw = 1e9;
        t
    }

    #[test]
    fn bandwidth_partitioned_buffer() {
        let t = TensorSpec::new("i0", &[100], DType::BF16);
        let b = partition_stage_buffer(&t, 2e9, &small_tile());
        assert_eq!((b.pmu_alloc, b.reason), (2, BufferReason::Bandwidth));
    }

    #[test]
    fn capacity_partitioned_buffer() {
        let t = TensorSpec::new("s", &[2000], DType::BF16);
        let b = partition_stage_buffer(&t, 1e6, &small_tile());
        assert_eq!((b.pmu_alloc, b.reason), (4, BufferReason::Capacity));
        assert_eq!(
            b.interleave,
            Interleave::Ranges(vec![(0, 1000), (1000, 2000), (2000, 3000), (3000, 4000)])
        );
    }

    #[test]
    fn both_bounds_take_the_max() {
        let t = TensorSpec::new("t", &[2000], DType::BF16);
        let b = partition_stage_buffer(&t, 3e9, &small_tile());
        assert_eq!((b.pmu_alloc, b.reason), (4, BufferReason::Both));
    }

    #[test]
    fn monarch_maximal_is_one_kernel_three_stages() {
        let g = fixtures::monarch();
        let plan = plan_fusion(&g, &sn40l_tile(), &FusionPolicy::Maximal).unwrap();
        assert_eq!(plan.kernels.len(), 1);
        let k = &plan.kernels[0];
        assert_eq!(k.ops.len(), 4);
        let stage_ops: Vec<&str> = k.stages.iter().map(|s| s.op.as_str()).collect();
        assert_eq!(stage_ops, ["gemm0", "mul", "gemm1"]);
        let t = k.buffer_for("t2").unwrap();
        assert_eq!(t.tensor, "t1");
        assert_eq!(t.access_pattern_read.perm, vec![1, 0]);
        assert!(t.consumers.contains(&"gemm1".to_string()));
        // Gemm stages get the bulk of the compute
        assert!(k.stages[0].pcu_alloc > k.stages[1].pcu_alloc);
        assert!(k.stages[2].pcu_alloc > k.stages[1].pcu_alloc);
    }

    #[test]
    fn monarch_unfused_is_four_kernels() {
        let g = fixtures::monarch();
        let plan = plan_fusion(&g, &sn40l_tile(), &FusionPolicy::Unfused).unwrap();
        assert_eq!(plan.kernels.len(), 4);
        // the lone transpose becomes a transposed write with no stages
        let tk = &plan.kernels[2];
        assert!(tk.stages.is_empty());
        assert_eq!(tk.buffers.len(), 1);
        assert_eq!(tk.buffers[0].access_pattern_write.perm, vec![1, 0]);
    }

    #[test]
    fn fold_preserves_intensity_and_is_identity_without_transposes() {
        let g = fixtures::monarch();
        let tile = sn40l_tile();
        let all: Vec<usize> = (0..4).collect();
        let sk = kernel_skeleton(&g, &all, &tile).unwrap();
        let folded = fold_transpose(&g, &sk).unwrap();
        assert_eq!(folded.flops, sk.flops);
        assert_eq!(folded.boundary_bytes, sk.boundary_bytes);
        assert_eq!(folded.intensity(), sk.intensity());
        assert_eq!(folded.stages.len(), 3);

        let plain = kernel_skeleton(&g, &[0, 1], &tile).unwrap();
        assert_eq!(fold_transpose(&g, &plain).unwrap(), plain);
    }

    #[test]
    fn double_transpose_composes_to_identity() {
        let mut g = OpGraph::new("tt");
        g.tensor_spec("a", &[4, 8], DType::BF16)
            .tensor_spec("b", &[8, 4], DType::BF16)
            .tensor_spec("c", &[4, 8], DType::BF16)
            .tensor_spec("d", &[4, 8], DType::BF16)
            .op("t1", OpKind::Transpose { perm: None }, &["a"], &["b"])
            .op("t2", OpKind::Transpose { perm: None }, &["b"], &["c"])
            .op("neg", OpKind::elementwise("neg"), &["c"], &["d"]);
        let tile = sn40l_tile();
        let k = fold_transpose(&g, &kernel_skeleton(&g, &[0, 1, 2], &tile).unwrap()).unwrap();
        let buf = k.buffer_for("c").unwrap();
        assert_eq!(buf.tensor, "a");
        assert!(buf.access_pattern_read.is_identity());
        assert_eq!(k.stages.len(), 1);
    }

    #[test]
    fn three_dim_transposes_compose() {
        let p = AccessPattern::identity(3).then(&[0, 2, 1]).then(&[1, 0, 2]);
        // view axis i reads stored axis p[i]
        assert_eq!(p.perm, vec![2, 0, 1]);
    }

    #[test]
    fn hinted_decoder_prefill_is_three_kernels() {
        let g = fixtures::decoder_prefill();
        let hints = fixtures::DECODER_HINTS.iter().map(|s| s.to_string()).collect();
        let plan = plan_fusion(&g, &sn40l_tile(), &FusionPolicy::Hinted(hints)).unwrap();
        assert_eq!(plan.kernels.len(), 3);
        let unfused = plan_fusion(&g, &sn40l_tile(), &FusionPolicy::Unfused).unwrap();
        assert_eq!(kernel_call_ratio(&unfused, &plan), 11.0);
    }

    #[test]
    fn maximal_never_loses_intensity() {
        let tile = sn40l_tile();
        for g in [
            fixtures::monarch(),
            fixtures::decoder_prefill(),
            fixtures::decoder_decode(),
        ] {
            let fused = plan_fusion(&g, &tile, &FusionPolicy::Maximal).unwrap();
            let unfused = plan_fusion(&g, &tile, &FusionPolicy::Unfused).unwrap();
            assert!(fused.kernels.len() <= unfused.kernels.len());
            let a = operational_intensity(&g, &fused.partition()).unwrap().aggregate;
            let b = operational_intensity(&g, &unfused.partition()).unwrap().aggregate;
            assert!(a >= b, "{}: {a} < {b}", g.name);
        }
    }

    #[test]
    fn plan_json_round_trip() {
        let g = fixtures::monarch();
        let plan = plan_fusion(&g, &sn40l_tile(), &FusionPolicy::Maximal).unwrap();
        let back = FusionPlan::from_json(&plan.to_json()).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn oversized_single_operator_is_infeasible() {
        let mut tile = sn40l_tile();
        tile.sram_total_bytes = 1024.0;
        tile.pmu_count = 2;
        tile.pmu_capacity_bytes = 512.0;
        let g = fixtures::single_gemm(64, 64, 64);
        let err = plan_fusion(&g, &tile, &FusionPolicy::Maximal).unwrap_err();
        assert!(err.to_string().contains("SRAM"), "{err}");
    }

    /// Three chained Gemms whose intermediates are each re-read whole by the
    /// next Gemm and each take 60% of SRAM.
    fn gemm_chain() -> (OpGraph, TileConfig) {
        let mut g = OpGraph::new("chain");
        for t in ["a", "w1", "t1", "w2", "t2", "w3", "out"] {
            g.tensor_spec(t, &[64, 64], DType::BF16);
        }
        g.op("g1", OpKind::Gemm, &["a", "w1"], &["t1"])
            .op("g2", OpKind::Gemm, &["w2", "t1"], &["t2"])
            .op("g3", OpKind::Gemm, &["w3", "t2"], &["out"]);
        let mut tile = sn40l_tile();
        tile.tile_elements = 16;
        tile.sram_total_bytes = (64.0 * 64.0 * 2.0 / 0.6f64).floor();
        tile.pmu_capacity_bytes = 1024.0;
        (g, tile)
    }

    #[test]
    fn greedy_matches_exhaustive_prefix_search() {
        let (g, tile) = gemm_chain();
        let intermediate = 64 * 64 * 2u64;
        let window = 2 * 16 * 2u64;
        // prefix of length n holds n-1 whole intermediates plus streamed windows
        let footprint = |n: usize| -> u64 {
            let inputs = 2 * n as u64; // left and right operand per Gemm, minus chained ones
            let chained = n as u64 - 1;
            chained * intermediate + (inputs - chained + 1) * window
        };
        let best = (1..=3)
            .filter(|&n| footprint(n) as f64 <= tile.sram_total_bytes)
            .max()
            .unwrap();
        assert_eq!(best, 2);
        let plan = plan_fusion(&g, &tile, &FusionPolicy::Maximal).unwrap();
        assert_eq!(plan.kernels.len(), 2);
        assert_eq!(plan.kernels[0].ops.len(), best);
        assert_eq!(plan.kernels[0].sram_bytes(), footprint(best));
        check_plan(&g, &plan, &tile).unwrap();
    }
}
