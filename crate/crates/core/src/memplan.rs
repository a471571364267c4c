//! Static HBM planning for a compiled model.
//!
//! Symbols get closed lifetimes `[first_def, last_use]` over kernel positions.
//! Symbols whose lifetimes do not overlap may share addresses. When the
//! peak exceeds HBM, the symbols with the smallest aggregate transfer move to
//! DDR, weights last.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionPlan;
use crate::opgraph::{OpGraph, OpKind};
use crate::perf::RunSchedule;

/// Schema tag for plan files.
pub const MEMPLAN_SCHEMA: &str = "memplan_v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolKind {
    Weight,
    Activation,
    Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    /// Schedule position.
    pub kernel: usize,
    pub bytes: u64,
    pub write: bool,
}

/// A symbol as declared by the compiler, before lifetime analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolDecl {
    pub id: String,
    pub size: u64,
    pub kind: SymbolKind,
    pub read_only: bool,
    pub accesses: Vec<Access>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Symbol {
    pub id: String,
    pub size: u64,
    pub kind: SymbolKind,
    pub read_only: bool,
    pub accesses: Vec<Access>,
    pub first_def: usize,
    pub last_use: usize,
    pub aggregate_transfer: u64,
}

impl Symbol {
    pub fn overlaps(&self, other: &Symbol) -> bool {
        self.first_def <= other.last_use && other.first_def <= self.last_use
    }
}

/// Computes lifetimes over the schedule.
///
/// A read-only symbol is resident for the whole run. Anything else lives
/// from its first write to its last access and must be written before it is read.
pub fn lifetimes(schedule: &RunSchedule, decls: &[SymbolDecl]) -> Result<Vec<Symbol>> {
    let len = schedule.kernels.len();
    if len == 0 {
        return Err(Error::invalid("run schedule is empty"));
    }
    decls
        .iter()
        .map(|d| {
            if let Some(a) = d.accesses.iter().find(|a| a.kernel >= len) {
                return Err(Error::invalid(format!(
                    "symbol `{}` accessed at position {} past the schedule end {}",
                    d.id,
                    a.kernel,
                    len - 1
                )));
            }
            let (first_def, last_use) = if d.read_only {
                (0, len - 1)
            } else {
                let def = d
                    .accesses
                    .iter()
                    .filter(|a| a.write)
                    .map(|a| a.kernel)
                    .min()
                    .ok_or_else(|| Error::invalid(format!("symbol `{}` is read but never written", d.id)))?;
                if let Some(a) = d.accesses.iter().find(|a| !a.write && a.kernel < def) {
                    return Err(Error::invalid(format!(
                        "symbol `{}` read at position {} before its definition at {def}",
                        d.id, a.kernel
                    )));
                }
                (def, d.accesses.iter().map(|a| a.kernel).max().unwrap_or(def))
            };
            Ok(Symbol {
                id: d.id.clone(),
                size: d.size,
                kind: d.kind,
                read_only: d.read_only,
                accesses: d.accesses.clone(),
                first_def,
                last_use,
                aggregate_transfer: d.accesses.iter().map(|a| a.bytes).sum(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tier {
    Hbm,
    Ddr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolPlacement {
    pub id: String,
    pub tier: Tier,
    pub offset: u64,
    pub size: u64,
    pub first_def: usize,
    pub last_use: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPlanResult {
    pub schema: String,
    pub symbols: Vec<SymbolPlacement>,
    pub peak_hbm: u64,
    pub hbm_capacity: u64,
    /// Bytes over capacity; zero once the plan fits.
    pub deficit: u64,
    pub spills: Vec<String>,
    pub spill_bytes: u64,
    pub ddr_used: u64,
    pub warnings: Vec<String>,
}

impl MemoryPlanResult {
    pub fn fits(&self) -> bool {
        self.deficit == 0
    }

    pub fn placement(&self, id: &str) -> Option<&SymbolPlacement> {
        self.symbols.iter().find(|s| s.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: MemoryPlanResult = serde_json::from_str(s)?;
        if plan.schema != MEMPLAN_SCHEMA {
            return Err(Error::invalid(format!(
                "expected schema `{MEMPLAN_SCHEMA}`, found `{}`",
                plan.schema
            )));
        }
        Ok(plan)
    }
}

fn first_fit(symbols: &[&Symbol]) -> (Vec<(usize, u64)>, u64) {
    let mut order: Vec<usize> = (0..symbols.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (symbols[a], symbols[b]);
        x.first_def
            .cmp(&y.first_def)
            .then(y.size.cmp(&x.size))
            .then(x.id.cmp(&y.id))
    });
    let mut placed: Vec<(usize, u64)> = Vec::with_capacity(symbols.len());
    let mut peak = 0;
    for i in order {
        let s = symbols[i];
        let mut busy: Vec<(u64, u64)> = placed
            .iter()
            .filter(|&&(j, _)| symbols[j].overlaps(s))
            .map(|&(j, off)| (off, off + symbols[j].size))
            .collect();
        busy.sort_unstable();
        let mut offset = 0;
        for (lo, hi) in busy {
            if lo >= offset + s.size {
                break;
            }
            offset = offset.max(hi);
        }
        peak = peak.max(offset + s.size);
        placed.push((i, offset));
    }
    (placed, peak)
}

/// First-fit HBM offsets in `(first_def, size desc, id)` order.
///
/// Never fails: a plan over capacity carries its deficit.
pub fn assign_addresses(symbols: &[Symbol], hbm_capacity: u64) -> MemoryPlanResult {
    let refs: Vec<&Symbol> = symbols.iter().collect();
    let (placed, peak) = first_fit(&refs);
    let mut offsets = vec![0; symbols.len()];
    for (i, off) in placed {
        offsets[i] = off;
    }
    MemoryPlanResult {
        schema: MEMPLAN_SCHEMA.to_string(),
        symbols: symbols
            .iter()
            .zip(offsets)
            .map(|(s, offset)| SymbolPlacement {
                id: s.id.clone(),
                tier: Tier::Hbm,
                offset,
                size: s.size,
                first_def: s.first_def,
                last_use: s.last_use,
            })
            .collect(),
        peak_hbm: peak,
        hbm_capacity,
        deficit: peak.saturating_sub(hbm_capacity),
        spills: Vec::new(),
        spill_bytes: 0,
        ddr_used: 0,
        warnings: Vec::new(),
    }
}

fn hbm_peak(symbols: &[Symbol], spilled: &HashSet<usize>) -> u64 {
    let rest: Vec<&Symbol> = symbols
        .iter()
        .enumerate()
        .filter(|(i, _)| !spilled.contains(i))
        .map(|(_, s)| s)
        .collect();
    first_fit(&rest).1
}

/// Moves symbols to DDR until the rest fits in HBM.
///
/// Candidates are taken in ascending aggregate transfer, non-weights before
/// weights. After the shortest fitting prefix is found, any spilled symbol
/// that can return to HBM without breaking capacity is returned, so every
/// remaining spill is necessary.
pub fn select_spills(symbols: &[Symbol], hbm_capacity: u64, ddr_capacity: u64) -> Result<MemoryPlanResult> {
    let mut order: Vec<usize> = (0..symbols.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&symbols[a], &symbols[b]);
        (x.kind == SymbolKind::Weight)
            .cmp(&(y.kind == SymbolKind::Weight))
            .then(x.aggregate_transfer.cmp(&y.aggregate_transfer))
            .then(x.id.cmp(&y.id))
    });
    let mut spilled: Vec<usize> = Vec::new();
    let mut set = HashSet::new();
    let mut candidates = order.into_iter();
    while hbm_peak(symbols, &set) > hbm_capacity {
        let Some(c) = candidates.next() else {
            return Err(Error::infeasible(format!(
                "model does not fit: {} bytes of HBM even with every symbol in DDR",
                hbm_peak(symbols, &set)
            )));
        };
        spilled.push(c);
        set.insert(c);
    }
    // return unnecessary spills, largest transfer first
    loop {
        let mut changed = false;
        for k in (0..spilled.len()).rev() {
            let c = spilled[k];
            set.remove(&c);
            if hbm_peak(symbols, &set) <= hbm_capacity {
                spilled.remove(k);
                changed = true;
            } else {
                set.insert(c);
            }
        }
        if !changed {
            break;
        }
    }

    let rest: Vec<&Symbol> = symbols
        .iter()
        .enumerate()
        .filter(|(i, _)| !set.contains(i))
        .map(|(_, s)| s)
        .collect();
    let (placed, peak) = first_fit(&rest);
    let hbm_offsets: BTreeMap<&str, u64> = placed.iter().map(|&(j, off)| (rest[j].id.as_str(), off)).collect();
    let mut ddr_cursor = 0;
    let mut placements = Vec::with_capacity(symbols.len());
    let mut warnings = Vec::new();
    for (i, s) in symbols.iter().enumerate() {
        let (tier, offset) = if set.contains(&i) {
            let off = ddr_cursor;
            ddr_cursor += s.size;
            if s.kind == SymbolKind::Weight {
                warnings.push(format!("weight `{}` spilled to DDR", s.id));
            }
            (Tier::Ddr, off)
        } else {
            (Tier::Hbm, hbm_offsets[s.id.as_str()])
        };
        placements.push(SymbolPlacement {
            id: s.id.clone(),
            tier,
            offset,
            size: s.size,
            first_def: s.first_def,
            last_use: s.last_use,
        });
    }
    if ddr_cursor > ddr_capacity {
        return Err(Error::infeasible(format!(
            "spilled symbols need {ddr_cursor} bytes of DDR, capacity is {ddr_capacity}"
        )));
    }
    let mut spills: Vec<String> = spilled.iter().map(|&i| symbols[i].id.clone()).collect();
    spills.sort_by_key(|id| {
        let s = symbols.iter().find(|s| &s.id == id).unwrap();
        (s.kind == SymbolKind::Weight, s.aggregate_transfer, s.id.clone())
    });
    Ok(MemoryPlanResult {
        schema: MEMPLAN_SCHEMA.to_string(),
        symbols: placements,
        peak_hbm: peak,
        hbm_capacity,
        deficit: 0,
        spills,
        spill_bytes: ddr_cursor,
        ddr_used: ddr_cursor,
        warnings,
    })
}

/// Assigns addresses and spills only if needed.
pub fn plan_memory(symbols: &[Symbol], hbm_capacity: u64, ddr_capacity: u64) -> Result<MemoryPlanResult> {
    let plan = assign_addresses(symbols, hbm_capacity);
    if plan.fits() {
        Ok(plan)
    } else {
        select_spills(symbols, hbm_capacity, ddr_capacity)
    }
}

/// Pairs of symbols that are co-live in the same tier with overlapping ranges.
pub fn overlap_violations(symbols: &[Symbol], plan: &MemoryPlanResult) -> Vec<(String, String)> {
    let mut bad = Vec::new();
    for (i, a) in plan.symbols.iter().enumerate() {
        for b in &plan.symbols[i + 1..] {
            let live = a.first_def <= b.last_use && b.first_def <= a.last_use;
            let space = a.offset < b.offset + b.size && b.offset < a.offset + a.size;
            if a.tier == b.tier && live && space && a.size > 0 && b.size > 0 {
                bad.push((a.id.clone(), b.id.clone()));
            }
        }
    }
    debug_assert_eq!(symbols.len(), plan.symbols.len());
    bad
}

/// Symbols of a fused plan: every tensor crossing a kernel boundary.
///
/// Graph inputs are read-only (weights when used as a Gemm right-hand side);
/// everything else is an activation written by its producing kernel.
pub fn symbols_from_plan(g: &OpGraph, plan: &FusionPlan) -> Result<(RunSchedule, Vec<SymbolDecl>)> {
    let mut decls: BTreeMap<String, SymbolDecl> = BTreeMap::new();
    let external: HashSet<&str> = g.external_inputs().iter().map(|t| t.id.as_str()).collect();
    for (pos, k) in plan.kernels.iter().enumerate() {
        for (ids, write) in [(&k.boundary_inputs, false), (&k.boundary_outputs, true)] {
            for id in ids {
                let t = g.require_tensor(id)?;
                let read_only = external.contains(id.as_str());
                let weight = read_only
                    && g.consumers(id)
                        .iter()
                        .any(|c| c.kind == OpKind::Gemm && c.inputs[1] == *id);
                let d = decls.entry(id.clone()).or_insert_with(|| SymbolDecl {
                    id: id.clone(),
                    size: t.bytes(),
                    kind: if weight {
                        SymbolKind::Weight
                    } else {
                        SymbolKind::Activation
                    },
                    read_only,
                    accesses: Vec::new(),
                });
                d.accesses.push(Access {
                    kernel: pos,
                    bytes: t.bytes(),
                    write,
                });
            }
        }
    }
    let schedule = RunSchedule {
        kernels: plan.kernels.iter().map(|k| k.ops.join("+")).collect(),
        orchestration: crate::arch::Orchestration::Hardware,
    };
    Ok((schedule, decls.into_values().collect()))
}
