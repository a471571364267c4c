//! Kernel and run timing.
//!
//! A fused kernel is modeled as a chain of pipeline stages (an off-chip
//! memory stage followed by the compute stages) streaming `tiles` steps.
//! The analytical estimate is checked against a tile-level discrete-event
//! simulation of the same chain with double-buffered handoff.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Orchestration, PlatformConfig, TierKind};
use crate::error::{Error, Result};
use crate::fabric::{kernel_flows, link_utilization, route, MeshTopology, Placement, SiteKind};
use crate::fusion::{FusedKernel, FusionPlan};

/// Slots in each inter-stage buffer.
pub const BUFFER_SLOTS: u64 = 2;

/// One stage of a linear pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeStage {
    pub name: String,
    /// Tiles per second when never starved or blocked.
    pub throughput: f64,
    /// Delay from finishing a tile to it being available downstream, seconds.
    pub latency: f64,
}

impl PipeStage {
    pub fn new(name: impl Into<String>, throughput: f64, latency: f64) -> Self {
        PipeStage {
            name: name.into(),
            throughput,
            latency,
        }
    }

    /// Service time plus handoff: how long one tile spends in this stage.
    pub fn tile_latency(&self) -> f64 {
        1.0 / self.throughput + self.latency
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub stages: Vec<PipeStage>,
    pub tiles: u64,
}

impl Pipeline {
    /// Rate stage `i` can sustain, including the credit loop to its consumer:
    /// with two slots a producer can run at most two tiles ahead.
    pub fn effective_throughput(&self, i: usize) -> f64 {
        let s = &self.stages[i];
        if i + 1 == self.stages.len() {
            s.throughput
        } else {
            s.throughput.min(BUFFER_SLOTS as f64 / s.tile_latency())
        }
    }

    /// Index of the slowest stage; ties go to the earliest.
    pub fn bottleneck(&self) -> usize {
        (0..self.stages.len())
            .min_by(|&a, &b| {
                self.effective_throughput(a)
                    .total_cmp(&self.effective_throughput(b))
                    .then(a.cmp(&b))
            })
            .expect("pipeline has stages")
    }

    /// Steady state at the bottleneck rate, plus the time for the first tile
    /// to cross every stage less the one bottleneck service already counted.
    pub fn analytic(&self) -> PipelineTiming {
        let r = self.effective_throughput(self.bottleneck());
        let n = self.tiles as f64;
        let first: f64 = self.stages.iter().map(PipeStage::tile_latency).sum();
        let steady = n / r;
        let fill_drain = first - 1.0 / r;
        PipelineTiming {
            steady_state: steady,
            fill_drain,
            total: steady + fill_drain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineTiming {
    pub steady_state: f64,
    pub fill_drain: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Start,
    Finish,
    Arrive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    /// Stage index.
    pub entity: usize,
    pub tile: u64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<Event>,
    /// Arrival time of the last tile out of the last stage.
    pub completion: f64,
}

#[derive(Debug)]
struct Queued {
    time: f64,
    entity: usize,
    seq: u64,
    tile: u64,
    kind: EventKind,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.entity.cmp(&other.entity))
            .then(self.seq.cmp(&other.seq))
    }
}

/// Schedules an event: (heap, time, stage, tile, kind).
type Push<'a> = dyn FnMut(&mut BinaryHeap<Reverse<Queued>>, f64, usize, u64, EventKind) + 'a;

/// Tile-level discrete-event simulation of a pipeline.
///
/// Stage `i` starts tile `j` once the tile has arrived, the stage is idle and
/// the downstream buffer has a free slot (the consumer has started tile
/// `j - 2`). Service takes `1/throughput`, stretched by a uniform factor in
/// `[1, 1 + jitter)` drawn from the seeded generator.
pub fn simulate(p: &Pipeline, jitter: f64, seed: u64) -> EventTrace {
    let ns = p.stages.len();
    let n = p.tiles;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heap: BinaryHeap<Reverse<Queued>> = BinaryHeap::new();
    let mut seq = 0;
    let mut push = |heap: &mut BinaryHeap<Reverse<Queued>>, time, entity, tile, kind| {
        seq += 1;
        heap.push(Reverse(Queued {
            time,
            entity,
            seq,
            tile,
            kind,
        }));
    };
    let mut arrived = vec![0u64; ns];
    arrived[0] = n;
    let mut started = vec![0u64; ns];
    let mut busy = vec![false; ns];
    let mut events = Vec::new();
    let mut completion = 0.0;

    // try to start stage i at time t; returns whether it did
    let try_start = |i: usize,
                     t: f64,
                     started: &mut Vec<u64>,
                     busy: &mut Vec<bool>,
                     arrived: &Vec<u64>,
                     heap: &mut BinaryHeap<Reverse<Queued>>,
                     events: &mut Vec<Event>,
                     rng: &mut ChaCha8Rng,
                     push: &mut Push<'_>|
     -> bool {
        let j = started[i];
        let room = i + 1 == ns || started[i + 1] + BUFFER_SLOTS > j;
        if busy[i] || j >= n || arrived[i] <= j || !room {
            return false;
        }
        busy[i] = true;
        started[i] += 1;
        events.push(Event {
            time: t,
            entity: i,
            tile: j,
            kind: EventKind::Start,
        });
        let stretch = if jitter > 0.0 {
            1.0 + rng.gen::<f64>() * jitter
        } else {
            1.0
        };
        push(heap, t + stretch / p.stages[i].throughput, i, j, EventKind::Finish);
        true
    };

    if ns > 0 && n > 0 {
        try_start(
            0,
            0.0,
            &mut started,
            &mut busy,
            &arrived,
            &mut heap,
            &mut events,
            &mut rng,
            &mut push,
        );
    }
    while let Some(Reverse(e)) = heap.pop() {
        events.push(Event {
            time: e.time,
            entity: e.entity,
            tile: e.tile,
            kind: e.kind,
        });
        let i = e.entity;
        match e.kind {
            EventKind::Finish => {
                busy[i] = false;
                push(&mut heap, e.time + p.stages[i].latency, i, e.tile, EventKind::Arrive);
                let mut s = i;
                // each start frees a slot for the stage before it
                while try_start(
                    s,
                    e.time,
                    &mut started,
                    &mut busy,
                    &arrived,
                    &mut heap,
                    &mut events,
                    &mut rng,
                    &mut push,
                ) && s > 0
                {
                    s -= 1;
                }
            }
            EventKind::Arrive => {
                if i + 1 == ns {
                    completion = e.time;
                    continue;
                }
                arrived[i + 1] += 1;
                let mut s = i + 1;
                while try_start(
                    s,
                    e.time,
                    &mut started,
                    &mut busy,
                    &arrived,
                    &mut heap,
                    &mut events,
                    &mut rng,
                    &mut push,
                ) && s > 0
                {
                    s -= 1;
                }
            }
            EventKind::Start => unreachable!("starts are recorded, not queued"),
        }
    }
    EventTrace { events, completion }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Compute,
    Memory,
    PipelineBottleneck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierBytes {
    pub tier: TierKind,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCost {
    pub kernel: String,
    pub flops: u64,
    pub tier_bytes: Vec<TierBytes>,
    pub stage_throughputs: Vec<f64>,
    pub tiles: u64,
    pub fill_drain_latency: f64,
    pub est_time: f64,
    pub bound: Bound,
    /// What limits the slowest stage.
    pub binding: String,
    pub pipeline: Pipeline,
}

impl KernelCost {
    pub fn boundary_bytes(&self) -> u64 {
        self.tier_bytes.iter().map(|t| t.bytes).sum()
    }
}

fn kernel_name(k: &FusedKernel) -> String {
    match k.ops.as_slice() {
        [one] => one.clone(),
        [first, .., last] => format!("{first}..{last}"),
        [] => String::from("empty"),
    }
}

/// Estimates one kernel on one socket, with all boundary traffic on HBM.
pub fn estimate_kernel_time(
    k: &FusedKernel,
    placement: Option<&Placement>,
    platform: &PlatformConfig,
) -> Result<KernelCost> {
    let tiers = [TierBytes {
        tier: TierKind::Hbm,
        bytes: k.boundary_bytes,
    }];
    estimate_kernel_time_tiers(k, placement, platform, &tiers)
}

/// Estimates one kernel with boundary traffic split across memory tiers.
pub fn estimate_kernel_time_tiers(
    k: &FusedKernel,
    placement: Option<&Placement>,
    platform: &PlatformConfig,
    tier_bytes: &[TierBytes],
) -> Result<KernelCost> {
    let tile = platform
        .tile
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("platform `{}` has no dataflow tile", platform.name)))?;
    let tiles = k.tiles.max(1) as f64;

    // link congestion slows the stages whose flows cross hot links
    let mut link_factor = vec![1.0f64; k.stages.len()];
    if let Some(p) = placement {
        let mesh = MeshTopology::from_tile(tile);
        let flows = kernel_flows(k, p);
        let routes = route(&flows);
        let report = link_utilization(&routes, &mesh);
        for (si, s) in k.stages.iter().enumerate() {
            let pcus: Vec<_> = p.sites_of(&s.op, SiteKind::Pcu).collect();
            for (f, r) in flows.iter().zip(&routes) {
                if pcus.contains(&f.src) || f.dsts.iter().any(|d| pcus.contains(d)) {
                    let worst = r.links.iter().map(|&l| report.utilization(l)).fold(1.0, f64::max);
                    link_factor[si] = link_factor[si].max(worst);
                }
            }
        }
    }

    // per-tile rates, then the binding resource of each stage
    let mut raw: Vec<(String, f64, &'static str)> = Vec::new();
    let mem_time: f64 = tier_bytes
        .iter()
        .map(|tb| {
            let bw = platform.tier(tb.tier).map_or(0.0, |t| t.bandwidth_bytes_per_s);
            if tb.bytes == 0 {
                Ok(0.0)
            } else if bw <= 0.0 {
                Err(Error::infeasible(format!(
                    "no {:?} bandwidth for kernel traffic",
                    tb.tier
                )))
            } else {
                Ok(tb.bytes as f64 / bw)
            }
        })
        .sum::<Result<f64>>()?;
    if mem_time > 0.0 {
        raw.push(("memory".into(), tiles / mem_time, "memory bandwidth"));
    }
    for (si, s) in k.stages.iter().enumerate() {
        let compute = if s.flops == 0 {
            f64::INFINITY
        } else {
            s.pcu_alloc as f64 * tile.pcu_peak_flops / (s.flops as f64 / tiles)
        };
        let rate = s.stage_throughput / link_factor[si];
        if rate.is_nan() || rate <= 0.0 {
            return Err(Error::infeasible(format!(
                "stage `{}` has zero throughput (compute units {}, buffers or links saturated)",
                s.op, s.pcu_alloc
            )));
        }
        let binding = if link_factor[si] > 1.0 && rate < compute {
            "link bandwidth"
        } else if rate >= compute * (1.0 - 1e-12) {
            "compute"
        } else {
            "buffer bandwidth"
        };
        raw.push((s.op.clone(), rate, binding));
    }
    if raw.is_empty() {
        raw.push(("idle".into(), f64::MAX, "compute"));
    }

    // group tiles into steps so the bottleneck's service per step covers the
    // handoff latency; finer steps would only measure the credit loop
    let slowest = raw.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let bottleneck_time = tiles / slowest;
    let latency = tile.stage_latency_s;
    let n = if latency > 0.0 {
        ((bottleneck_time / latency).floor() as u64).clamp(1, k.tiles.max(1))
    } else {
        k.tiles.max(1)
    };
    let scale = tiles / n as f64;
    let stages: Vec<PipeStage> = raw
        .iter()
        .map(|(name, r, _)| PipeStage::new(name.clone(), r / scale, latency))
        .collect();
    let binding_of: Vec<&str> = raw.iter().map(|r| r.2).collect();
    let pipeline = Pipeline { stages, tiles: n };
    let timing = pipeline.analytic();
    let b = pipeline.bottleneck();
    let credit_bound = pipeline.effective_throughput(b) < pipeline.stages[b].throughput;
    let binding = if credit_bound { "stage latency" } else { binding_of[b] };
    let bound = match binding {
        "compute" => Bound::Compute,
        "memory bandwidth" => Bound::Memory,
        _ => Bound::PipelineBottleneck,
    };
    let alloc_peak = k.pcu_total().max(1) as f64 * tile.pcu_peak_flops;
    let est = timing.total.max(k.flops as f64 / alloc_peak).max(mem_time);
    Ok(KernelCost {
        kernel: kernel_name(k),
        flops: k.flops,
        tier_bytes: tier_bytes.to_vec(),
        stage_throughputs: pipeline.stages.iter().map(|s| s.throughput).collect(),
        tiles: n,
        fill_drain_latency: timing.fill_drain,
        est_time: est,
        bound,
        binding: binding.to_string(),
        pipeline,
    })
}

/// DES measurement of the same pipeline the estimate used.
pub fn simulate_pipeline(cost: &KernelCost, seed: u64) -> EventTrace {
    simulate(&cost.pipeline, 0.0, seed)
}

/// Costs for every kernel of a plan.
pub fn estimate_plan(
    plan: &FusionPlan,
    placements: Option<&[Placement]>,
    platform: &PlatformConfig,
) -> Result<Vec<KernelCost>> {
    plan.kernels
        .iter()
        .enumerate()
        .map(|(i, k)| estimate_kernel_time(k, placements.map(|p| &p[i]), platform))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSchedule {
    pub kernels: Vec<String>,
    pub orchestration: Orchestration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTime {
    pub kernel: String,
    pub launch_overhead: f64,
    pub exec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEstimate {
    pub orchestration: Orchestration,
    pub total: f64,
    pub breakdown: Vec<KernelTime>,
}

/// Sums launch overhead and execution over the schedule, in order.
pub fn estimate_run(s: &RunSchedule, costs: &[KernelCost], platform: &PlatformConfig) -> Result<RunEstimate> {
    if s.kernels.is_empty() {
        return Err(Error::invalid("run schedule is empty"));
    }
    let overhead = platform.launch_overhead(s.orchestration);
    let breakdown = s
        .kernels
        .iter()
        .map(|name| {
            let c = costs
                .iter()
                .find(|c| &c.kernel == name)
                .ok_or_else(|| Error::invalid(format!("no cost for kernel `{name}`")))?;
            Ok(KernelTime {
                kernel: name.clone(),
                launch_overhead: overhead,
                exec: c.est_time,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunEstimate {
        orchestration: s.orchestration,
        total: breakdown.iter().map(|k| k.launch_overhead + k.exec).sum(),
        breakdown,
    })
}

/// Schedule running every kernel's cost once, in order.
pub fn schedule_of(costs: &[KernelCost], orchestration: Orchestration) -> RunSchedule {
    RunSchedule {
        kernels: costs.iter().map(|c| c.kernel.clone()).collect(),
        orchestration,
    }
}

/// Ratio of software- to hardware-orchestrated run time for the same kernels.
pub fn orchestration_speedup(costs: &[KernelCost], platform: &PlatformConfig) -> Result<f64> {
    let so = estimate_run(&schedule_of(costs, Orchestration::Software), costs, platform)?;
    let ho = estimate_run(&schedule_of(costs, Orchestration::Hardware), costs, platform)?;
    Ok(so.total / ho.total)
}

/// Upper bound on memory-bound decode: every token streams the model and its KV.
pub fn decode_throughput_bound(
    model_bytes_per_token: f64,
    kv_bytes_per_token: f64,
    platform: &PlatformConfig,
    hbm_utilization: f64,
) -> Result<f64> {
    if !(hbm_utilization > 0.0 && hbm_utilization <= 1.0) {
        return Err(Error::invalid(format!(
            "HBM utilization must be in (0, 1], got {hbm_utilization}"
        )));
    }
    let bw = platform.aggregate_bandwidth(TierKind::Hbm);
    Ok(bw * hbm_utilization / (model_bytes_per_token + kv_bytes_per_token))
}

/// CSV with one row per kernel: `kernel,flops,bytes,bound,est_time,des_time,delta_pct`.
pub fn perf_csv(costs: &[KernelCost], seed: u64) -> String {
    let mut out = String::from("kernel,flops,bytes,bound,est_time,des_time,delta_pct\n");
    for c in costs {
        let des = simulate_pipeline(c, seed).completion;
        let model = c.pipeline.analytic().total;
        let delta = if des > 0.0 { 100.0 * (model - des) / des } else { 0.0 };
        writeln!(
            out,
            "{},{},{},{:?},{:.9},{:.9},{:.3}",
            c.kernel,
            c.flops,
            c.boundary_bytes(),
            c.bound,
            c.est_time,
            des,
            delta
        )
        .unwrap();
    }
    out
}
