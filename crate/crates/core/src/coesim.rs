//! Composition-of-Experts serving simulation.
//!
//! Requests are routed to experts, experts are copied from the capacity tier
//! (DDR, or host memory on GPU nodes) into an HBM pool managed with LRU
//! eviction, and each request is charged router, switch and execute time.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write;
use std::io::BufRead;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{PlatformConfig, PlatformKind, TierKind};
use crate::error::{Error, Result};
use crate::memplan::MemoryPlanResult;
use crate::perf::decode_throughput_bound;

/// Default expert: 7B parameters in BF16.
pub const DEFAULT_PARAMS: u64 = 7_000_000_000;
/// Key and value bytes per position for a 32-layer, 4096-wide BF16 model.
pub const DEFAULT_KV_BYTES_PER_POSITION: u64 = 2 * 32 * 4096 * 2;
/// HBM held back on every accelerator for the router and KV cache.
pub const DEFAULT_HBM_RESERVE: f64 = 10e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    pub id: String,
    pub param_count: u64,
    pub bytes: u64,
    /// Bytes copied into HBM on a switch.
    pub hbm_segment_bytes: u64,
    /// Bytes that stay in the capacity tier while the expert runs.
    pub ddr_segment_bytes: u64,
    /// Share of the HBM segment never written, so never copied back.
    pub read_only_fraction: f64,
    /// Weight bytes streamed per generated token.
    pub weight_bytes_per_token: u64,
    pub kv_bytes_per_position: u64,
}

impl ExpertModel {
    /// A BF16 model of `params` parameters held entirely in HBM while running.
    pub fn bf16(id: impl Into<String>, params: u64) -> Self {
        ExpertModel {
            id: id.into(),
            param_count: params,
            bytes: 2 * params,
            hbm_segment_bytes: 2 * params,
            ddr_segment_bytes: 0,
            read_only_fraction: 1.0,
            weight_bytes_per_token: 2 * params,
            kv_bytes_per_position: DEFAULT_KV_BYTES_PER_POSITION,
        }
    }

    /// Segment sizes taken from a compiled memory plan.
    pub fn from_manifest(id: impl Into<String>, params: u64, plan: &MemoryPlanResult) -> Self {
        let mut e = Self::bf16(id, params);
        e.hbm_segment_bytes = plan.peak_hbm;
        e.ddr_segment_bytes = plan.ddr_used;
        e.bytes = plan.peak_hbm + plan.ddr_used;
        e
    }
}

impl Default for ExpertModel {
    fn default() -> Self {
        Self::bf16("expert", DEFAULT_PARAMS)
    }
}

/// How the router's own execution is charged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RouterCost {
    /// One decode step of a model this size, once per batch.
    DecodePass { bytes: u64 },
    /// A flat time per batch.
    Fixed { seconds: f64 },
}

impl Default for RouterCost {
    fn default() -> Self {
        RouterCost::DecodePass {
            bytes: 2 * DEFAULT_PARAMS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoEConfig {
    /// Explicit experts; when empty, `expert_count` copies of `expert`.
    pub experts: Vec<ExpertModel>,
    pub expert_count: usize,
    pub expert: ExpertModel,
    pub router: RouterCost,
    pub batch_size: usize,
    pub output_tokens: u64,
    pub prompt_tokens: u64,
    pub tp_degree: u32,
    /// Per accelerator.
    pub hbm_reserve_bytes: f64,
    /// Overrides the platform's decode HBM utilization.
    pub decode_utilization: Option<f64>,
    /// Overrides the platform's prefill efficiency.
    pub prefill_efficiency: Option<f64>,
}

impl Default for CoEConfig {
    fn default() -> Self {
        CoEConfig {
            experts: Vec::new(),
            expert_count: 150,
            expert: ExpertModel::default(),
            router: RouterCost::default(),
            batch_size: 8,
            output_tokens: 20,
            prompt_tokens: 3072,
            tp_degree: 8,
            hbm_reserve_bytes: DEFAULT_HBM_RESERVE,
            decode_utilization: None,
            prefill_efficiency: None,
        }
    }
}

impl CoEConfig {
    pub fn with_experts(count: usize) -> Self {
        CoEConfig {
            expert_count: count,
            ..Self::default()
        }
    }

    pub fn experts(&self) -> Vec<ExpertModel> {
        if !self.experts.is_empty() {
            return self.experts.clone();
        }
        (0..self.expert_count)
            .map(|i| ExpertModel {
                id: format!("E{i}"),
                ..self.expert.clone()
            })
            .collect()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: CoEConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.tp_degree == 0 {
            return Err(Error::Config("tp_degree must be at least 1".into()));
        }
        if self.experts().is_empty() {
            return Err(Error::Config("no experts configured".into()));
        }
        for e in self.experts() {
            if !(0.0..=1.0).contains(&e.read_only_fraction) {
                return Err(Error::Config(format!(
                    "expert `{}` read_only_fraction outside [0, 1]",
                    e.id
                )));
            }
        }
        Ok(())
    }

    fn check_platform(&self, platform: &PlatformConfig) -> Result<()> {
        self.validate()?;
        if self.tp_degree > platform.sockets {
            return Err(Error::Config(format!(
                "tp_degree {} exceeds the {} sockets of `{}`",
                self.tp_degree, platform.sockets, platform.name
            )));
        }
        Ok(())
    }

    /// HBM left for expert weights across the tensor-parallel group.
    pub fn expert_pool_bytes(&self, platform: &PlatformConfig) -> f64 {
        let per_socket = platform.hbm().capacity_bytes;
        self.tp_degree as f64 * (per_socket - self.hbm_reserve_bytes).max(0.0)
    }

    fn tp_platform(&self, platform: &PlatformConfig) -> PlatformConfig {
        platform.with_sockets(self.tp_degree)
    }

    fn decode_utilization(&self, platform: &PlatformConfig) -> f64 {
        self.decode_utilization.unwrap_or(platform.decode_hbm_utilization)
    }

    /// Router time charged once per batch.
    pub fn router_time(&self, platform: &PlatformConfig) -> Result<f64> {
        match self.router {
            RouterCost::Fixed { seconds } => Ok(seconds),
            RouterCost::DecodePass { bytes } => {
                let tp = self.tp_platform(platform);
                Ok(1.0 / decode_throughput_bound(bytes as f64, 0.0, &tp, self.decode_utilization(platform))?)
            }
        }
    }

    /// Prefill over the prompt plus decode of every output token.
    pub fn execute_time(&self, e: &ExpertModel, platform: &PlatformConfig) -> Result<f64> {
        let tp = self.tp_platform(platform);
        let eff = self.prefill_efficiency.unwrap_or(platform.prefill_efficiency);
        let prefill = 2.0 * e.param_count as f64 * self.prompt_tokens as f64 / (tp.aggregate_peak_flops() * eff);
        // mean context over the generated tokens
        let kv = e.kv_bytes_per_position as f64 * (self.prompt_tokens as f64 + self.output_tokens as f64 / 2.0);
        let rate = decode_throughput_bound(
            e.weight_bytes_per_token as f64,
            kv,
            &tp,
            self.decode_utilization(platform),
        )?;
        Ok(prefill + self.output_tokens as f64 / rate)
    }
}

/// Time to bring an expert's HBM segment in from the capacity tier.
pub fn switch_time(e: &ExpertModel, platform: &PlatformConfig) -> f64 {
    e.hbm_segment_bytes as f64 / platform.model_ingress_bw
}

/// Bytes written back when `e` is evicted.
pub fn copy_back_bytes(e: &ExpertModel) -> u64 {
    (e.hbm_segment_bytes as f64 * (1.0 - e.read_only_fraction)).round() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingTrace {
    pub requests: Vec<Request>,
}

impl ServingTrace {
    /// `n` requests drawn uniformly over `experts` with a seeded generator.
    pub fn uniform(experts: &[ExpertModel], n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ServingTrace {
            requests: (0..n as u64)
                .map(|i| Request {
                    request_id: i,
                    tag: None,
                    expert_id: Some(experts[rng.gen_range(0..experts.len())].id.clone()),
                    seed: None,
                })
                .collect(),
        }
    }

    /// Reads line-delimited JSON records; blank lines are skipped.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut requests = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Request =
                serde_json::from_str(&line).map_err(|e| Error::invalid(format!("trace line {}: {e}", n + 1)))?;
            requests.push(r);
        }
        if requests.is_empty() {
            return Err(Error::invalid("trace has no requests"));
        }
        Ok(ServingTrace { requests })
    }

    pub fn to_jsonl(&self) -> String {
        self.requests
            .iter()
            .map(|r| serde_json::to_string(r).expect("request serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum RoutingPolicy {
    /// Tag to expert id.
    FixedMap { map: BTreeMap<String, String> },
    /// Draw an expert index from these weights; requests carrying their own
    /// seed draw from a generator seeded with it.
    SeededCategorical { weights: Vec<f64>, seed: u64 },
}

/// Stateful router stub.
pub struct Router<'a> {
    policy: &'a RoutingPolicy,
    experts: &'a [ExpertModel],
    known: HashSet<&'a str>,
    rng: ChaCha8Rng,
}

impl<'a> Router<'a> {
    pub fn new(policy: &'a RoutingPolicy, experts: &'a [ExpertModel]) -> Result<Self> {
        let seed = match policy {
            RoutingPolicy::SeededCategorical { weights, seed } => {
                if weights.len() != experts.len() {
                    return Err(Error::Config(format!(
                        "{} routing weights for {} experts",
                        weights.len(),
                        experts.len()
                    )));
                }
                *seed
            }
            RoutingPolicy::FixedMap { .. } => 0,
        };
        Ok(Router {
            policy,
            experts,
            known: experts.iter().map(|e| e.id.as_str()).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Expert id for a request; an explicit `expert_id` wins over the policy.
    pub fn route(&mut self, req: &Request) -> Result<String> {
        let id = match (&req.expert_id, self.policy) {
            (Some(id), _) => id.clone(),
            (None, RoutingPolicy::FixedMap { map }) => {
                let tag = req
                    .tag
                    .as_deref()
                    .ok_or_else(|| Error::invalid(format!("request {} has neither tag nor expert", req.request_id)))?;
                map.get(tag)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("no expert mapped for tag `{tag}`")))?
            }
            (None, RoutingPolicy::SeededCategorical { weights, .. }) => {
                let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("routing weights: {e}")))?;
                let i = match req.seed {
                    Some(s) => dist.sample(&mut ChaCha8Rng::seed_from_u64(s)),
                    None => dist.sample(&mut self.rng),
                };
                self.experts[i].id.clone()
            }
        };
        if !self.known.contains(id.as_str()) {
            return Err(Error::invalid(format!("unknown expert `{id}`")));
        }
        Ok(id)
    }
}

/// Routes a single request under `policy`.
pub fn route_request(req: &Request, policy: &RoutingPolicy, experts: &[ExpertModel]) -> Result<String> {
    Router::new(policy, experts)?.route(req)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLatency {
    pub request_id: u64,
    pub expert: String,
    pub batch: usize,
    pub hit: bool,
    pub router_s: f64,
    pub switch_s: f64,
    pub execute_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub requests: Vec<RequestLatency>,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub copyback_bytes: u64,
    /// Experts loaded, in order.
    pub loads: Vec<String>,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.requests.iter().map(|r| r.total_s).sum()
    }

    /// Sum over requests from batch `skip` onward.
    pub fn total_after(&self, skip: usize) -> f64 {
        self.requests
            .iter()
            .filter(|r| r.batch >= skip)
            .map(|r| r.total_s)
            .sum()
    }

    /// Mean of per-batch totals from batch `skip` onward.
    pub fn mean_batch_latency(&self, skip: usize) -> f64 {
        let mut per_batch: BTreeMap<usize, f64> = BTreeMap::new();
        for r in self.requests.iter().filter(|r| r.batch >= skip) {
            *per_batch.entry(r.batch).or_default() += r.total_s;
        }
        if per_batch.is_empty() {
            0.0
        } else {
            per_batch.values().sum::<f64>() / per_batch.len() as f64
        }
    }

    pub fn switch_total(&self) -> f64 {
        self.requests.iter().map(|r| r.switch_s).sum()
    }

    pub fn execute_total(&self) -> f64 {
        self.requests.iter().map(|r| r.execute_s).sum()
    }

    pub fn router_total(&self) -> f64 {
        self.requests.iter().map(|r| r.router_s).sum()
    }

    /// `request_id,router_s,switch_s,execute_s,total_s`
    pub fn requests_csv(&self) -> String {
        let mut out = String::from("request_id,router_s,switch_s,execute_s,total_s\n");
        for r in &self.requests {
            writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{:.9}",
                r.request_id, r.router_s, r.switch_s, r.execute_s, r.total_s
            )
            .unwrap();
        }
        out
    }

    /// `hits,misses,evictions,copyback_bytes`
    pub fn summary_csv(&self) -> String {
        format!(
            "hits,misses,evictions,copyback_bytes\n{},{},{},{}\n",
            self.hits, self.misses, self.evictions, self.copyback_bytes
        )
    }
}

/// LRU set of HBM-resident experts, bounded in bytes.
#[derive(Debug, Clone)]
pub struct ExpertCache {
    capacity: f64,
    used: f64,
    clock: u64,
    /// Expert id to (last use, bytes).
    resident: HashMap<String, (u64, u64)>,
    /// Last use to expert id, oldest first.
    order: BTreeMap<u64, String>,
}

impl ExpertCache {
    pub fn new(capacity_bytes: f64) -> Self {
        ExpertCache {
            capacity: capacity_bytes,
            used: 0.0,
            clock: 0,
            resident: HashMap::new(),
            order: BTreeMap::new(),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.resident.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn touch(&mut self, id: &str) {
        self.clock += 1;
        if let Some(e) = self.resident.get_mut(id) {
            self.order.remove(&e.0);
            e.0 = self.clock;
            self.order.insert(self.clock, id.to_string());
        }
    }

    /// Makes room for `bytes` and inserts `id`, returning the evicted ids.
    /// Pinned experts are evicted only when nothing else is left.
    pub fn insert(&mut self, id: &str, bytes: u64, pinned: &HashSet<String>) -> Vec<String> {
        let mut evicted = Vec::new();
        while self.used + bytes as f64 > self.capacity && !self.resident.is_empty() {
            let victim = self
                .order
                .values()
                .find(|k| !pinned.contains(k.as_str()))
                .or_else(|| self.order.values().next())
                .cloned()
                .expect("nonempty");
            let (t, b) = self.resident.remove(&victim).expect("ordered ids are resident");
            self.order.remove(&t);
            self.used -= b as f64;
            evicted.push(victim);
        }
        self.clock += 1;
        self.resident.insert(id.to_string(), (self.clock, bytes));
        self.order.insert(self.clock, id.to_string());
        self.used += bytes as f64;
        evicted
    }
}

/// Serves a trace batch by batch.
///
/// Each batch runs the router once (its time split evenly over the batch),
/// copies in every expert the batch needs that is not resident, evicting
/// least-recently-used experts, then executes its requests one after another.
pub fn serve_trace(
    trace: &ServingTrace,
    config: &CoEConfig,
    platform: &PlatformConfig,
    policy: Option<&RoutingPolicy>,
) -> Result<LatencyBreakdown> {
    config.check_platform(platform)?;
    let experts = config.experts();
    let by_id: HashMap<&str, &ExpertModel> = experts.iter().map(|e| (e.id.as_str(), e)).collect();
    let pool = config.expert_pool_bytes(platform);
    for e in &experts {
        if e.hbm_segment_bytes as f64 > pool {
            return Err(Error::infeasible(format!(
                "expert `{}` needs {} HBM bytes, only {pool:.0} usable",
                e.id, e.hbm_segment_bytes
            )));
        }
    }
    check_capacity(&experts, config, platform)?;

    let default_policy = RoutingPolicy::FixedMap { map: BTreeMap::new() };
    let mut router = Router::new(policy.unwrap_or(&default_policy), &experts)?;
    let router_batch = config.router_time(platform)?;
    let mut exec_cache: HashMap<&str, f64> = HashMap::new();
    let mut cache = ExpertCache::new(pool);
    let mut out = LatencyBreakdown {
        requests: Vec::with_capacity(trace.requests.len()),
        hits: 0,
        misses: 0,
        evictions: 0,
        copyback_bytes: 0,
        loads: Vec::new(),
    };

    for (b, batch) in trace.requests.chunks(config.batch_size).enumerate() {
        let routed: Vec<String> = batch.iter().map(|r| router.route(r)).collect::<Result<_>>()?;
        let pinned: HashSet<String> = routed.iter().cloned().collect();
        let router_each = router_batch / batch.len() as f64;
        let mut switch_of: Vec<f64> = vec![0.0; batch.len()];
        let mut hit_of = vec![true; batch.len()];
        // the first request naming a cold expert pays for its copy
        for (i, id) in routed.iter().enumerate() {
            let e = by_id[id.as_str()];
            if cache.contains(id) {
                cache.touch(id);
                continue;
            }
            let evicted = cache.insert(id, e.hbm_segment_bytes, &pinned);
            let mut t = switch_time(e, platform);
            for v in &evicted {
                let cb = copy_back_bytes(by_id[v.as_str()]);
                out.copyback_bytes += cb;
                t += cb as f64 / platform.model_ingress_bw;
            }
            out.evictions += evicted.len() as u64;
            out.loads.push(id.clone());
            switch_of[i] = t;
            hit_of[i] = false;
        }
        for (i, (req, id)) in batch.iter().zip(&routed).enumerate() {
            let e = by_id[id.as_str()];
            let exec = match exec_cache.get(e.id.as_str()) {
                Some(&t) => t,
                None => {
                    let t = config.execute_time(e, platform)?;
                    exec_cache.insert(e.id.as_str(), t);
                    t
                }
            };
            if hit_of[i] {
                out.hits += 1;
            } else {
                out.misses += 1;
            }
            out.requests.push(RequestLatency {
                request_id: req.request_id,
                expert: id.clone(),
                batch: b,
                hit: hit_of[i],
                router_s: router_each,
                switch_s: switch_of[i],
                execute_s: exec,
                total_s: router_each + switch_of[i] + exec,
            });
        }
    }
    Ok(out)
}

/// Rejects expert sets that do not fit the node's memory at all.
fn check_capacity(experts: &[ExpertModel], config: &CoEConfig, platform: &PlatformConfig) -> Result<()> {
    let total: f64 = experts.iter().map(|e| e.bytes as f64).sum();
    let (room, what) = match platform.kind {
        PlatformKind::Rdu => (platform.aggregate_capacity(TierKind::Ddr), "DDR"),
        PlatformKind::Gpu => (
            config.expert_pool_bytes(platform) + platform.aggregate_capacity(TierKind::Host),
            "HBM plus host memory",
        ),
    };
    if total > room {
        return Err(Error::infeasible(format!(
            "{} experts need {total:.0} bytes, `{}` has {room:.0} bytes of {what}",
            experts.len(),
            platform.name
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub experts: usize,
    pub mean_batch_latency_s: f64,
    pub miss_rate: f64,
}

/// Steady-state mean batch latency for each expert count.
///
/// Every count is served a uniform trace of `warmup_batches + batches`
/// batches from the same seed; the warm-up batches are excluded.
pub fn latency_curve(
    counts: &[usize],
    config: &CoEConfig,
    platform: &PlatformConfig,
    warmup_batches: usize,
    batches: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("expert counts must be strictly ascending"));
    }
    counts
        .iter()
        .map(|&n| {
            let cfg = CoEConfig {
                experts: Vec::new(),
                expert_count: n,
                ..config.clone()
            };
            let experts = cfg.experts();
            let trace = ServingTrace::uniform(&experts, (warmup_batches + batches) * cfg.batch_size, seed);
            let r = serve_trace(&trace, &cfg, platform, None)?;
            let measured: Vec<&RequestLatency> = r.requests.iter().filter(|q| q.batch >= warmup_batches).collect();
            let misses = measured.iter().filter(|q| !q.hit).count();
            Ok(CurvePoint {
                experts: n,
                mean_batch_latency_s: r.mean_batch_latency(warmup_batches),
                miss_rate: misses as f64 / measured.len().max(1) as f64,
            })
        })
        .collect()
}

/// First count whose latency jumps by more than `threshold` (relative) over
/// the previous count, considering only unit steps.
pub fn find_discontinuity(curve: &[CurvePoint], threshold: f64) -> Option<usize> {
    curve
        .windows(2)
        .find(|w| {
            w[1].experts == w[0].experts + 1
                && (w[1].mean_batch_latency_s - w[0].mean_batch_latency_s) / w[0].mean_batch_latency_s > threshold
        })
        .map(|w| w[1].experts)
}

/// Largest relative step between consecutive unit-step counts.
pub fn max_relative_step(curve: &[CurvePoint]) -> f64 {
    curve
        .windows(2)
        .filter(|w| w[1].experts == w[0].experts + 1)
        .map(|w| (w[1].mean_batch_latency_s - w[0].mean_batch_latency_s) / w[0].mean_batch_latency_s)
        .fold(0.0, f64::max)
}

/// `experts,mean_batch_latency_s,miss_rate`
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("experts,mean_batch_latency_s,miss_rate\n");
    for p in curve {
        writeln!(out, "{},{:.9},{:.6}", p.experts, p.mean_batch_latency_s, p.miss_rate).unwrap();
    }
    out
}

/// Machines needed to hold `num_experts` without giving up TP8 latency:
/// all in HBM for GPU nodes, in DDR (switching into HBM) for RDU nodes.
pub fn footprint(num_experts: u64, expert_bytes: u64, platform: &PlatformConfig) -> Result<u64> {
    if num_experts == 0 {
        return Err(Error::invalid("need at least one expert"));
    }
    let per_machine = match platform.kind {
        PlatformKind::Gpu => platform.aggregate_capacity(TierKind::Hbm),
        PlatformKind::Rdu => platform.aggregate_capacity(TierKind::Ddr),
    };
    if per_machine <= 0.0 {
        return Err(Error::invalid(format!("`{}` has no expert capacity", platform.name)));
    }
    let total = num_experts as f64 * expert_bytes as f64;
    Ok(((total / per_machine).ceil() as u64).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::builtin_platform;
    use proptest::prelude::*;

    fn trace(ids: &[&str]) -> ServingTrace {
        ServingTrace {
            requests: ids
                .iter()
                .enumerate()
                .map(|(i, &id)| Request {
                    request_id: i as u64,
                    tag: None,
                    expert_id: Some(id.to_string()),
                    seed: None,
                })
                .collect(),
        }
    }

    /// Two 14 GB experts, a pool sized for `fit` of them, one request per batch.
    fn small(fit: usize) -> (CoEConfig, PlatformConfig) {
        let p = builtin_platform("sn40l_node").unwrap();
        let per_socket = p.hbm().capacity_bytes;
        let cfg = CoEConfig {
            expert_count: 2,
            batch_size: 1,
            tp_degree: 1,
            // leaves room for `fit` experts and a bit
            hbm_reserve_bytes: per_socket - (fit as f64 * 14e9 + 1e9),
            ..CoEConfig::default()
        };
        (cfg, p)
    }

    #[test]
    fn switch_times_and_ratios() {
        let e = ExpertModel::default();
        let rdu = switch_time(&e, &builtin_platform("sn40l_node").unwrap());
        let a100 = switch_time(&e, &builtin_platform("dgx_a100").unwrap());
        let h100 = switch_time(&e, &builtin_platform("dgx_h100").unwrap());
        assert!((rdu - 0.014).abs() < 1e-12);
        assert!((a100 - 0.4375).abs() < 1e-12);
        assert!((h100 - 0.21875).abs() < 1e-12);
        assert!((a100 / rdu - 31.25).abs() < 1e-9);
        assert!((h100 / rdu - 15.625).abs() < 1e-9);
    }

    #[test]
    fn lru_thrash_and_hit() {
        let (cfg, p) = small(1);
        let r = serve_trace(&trace(&["E0", "E1", "E0"]), &cfg, &p, None).unwrap();
        assert_eq!((r.misses, r.hits), (3, 0));
        let (cfg, p) = small(2);
        let r = serve_trace(&trace(&["E0", "E1", "E0"]), &cfg, &p, None).unwrap();
        assert_eq!((r.misses, r.hits), (2, 1));
        assert_eq!(r.requests[2].switch_s, 0.0);
    }

    #[test]
    fn breakdown_adds_up() {
        let p = builtin_platform("dgx_a100").unwrap();
        let cfg = CoEConfig::default();
        let t = ServingTrace::uniform(&cfg.experts(), 64, 3);
        let r = serve_trace(&t, &cfg, &p, None).unwrap();
        for q in &r.requests {
            assert_eq!(q.total_s, q.router_s + q.switch_s + q.execute_s);
        }
        let distinct: HashSet<&str> = r.requests.iter().map(|q| q.expert.as_str()).collect();
        assert!(r.misses as usize >= distinct.len());
    }

    #[test]
    fn copy_back_only_for_writable_bytes() {
        let (mut cfg, p) = small(1);
        let t = trace(&["E0", "E1", "E0", "E1"]);
        assert_eq!(serve_trace(&t, &cfg, &p, None).unwrap().copyback_bytes, 0);
        cfg.expert.read_only_fraction = 0.75;
        let r = serve_trace(&t, &cfg, &p, None).unwrap();
        assert_eq!(r.evictions, 3);
        assert_eq!(r.copyback_bytes, 3 * 3_500_000_000);
    }

    #[test]
    fn fixed_map_routing() {
        let experts: Vec<ExpertModel> = (0..10).map(|i| ExpertModel::bf16(format!("E{i}"), 1)).collect();
        let policy = RoutingPolicy::FixedMap {
            map: [("math".to_string(), "E7".to_string())].into(),
        };
        let req = |tag: &str| Request {
            request_id: 0,
            tag: Some(tag.into()),
            expert_id: None,
            seed: None,
        };
        assert_eq!(route_request(&req("math"), &policy, &experts).unwrap(), "E7");
        assert!(route_request(&req("poetry"), &policy, &experts).is_err());
        let bad = Request {
            expert_id: Some("E99".into()),
            ..req("math")
        };
        assert!(route_request(&bad, &policy, &experts).is_err());
    }

    #[test]
    fn seeded_routing_is_reproducible() {
        let experts = CoEConfig::default().experts();
        let policy = RoutingPolicy::SeededCategorical {
            weights: vec![1.0; 150],
            seed: 42,
        };
        let reqs: Vec<Request> = (0..50)
            .map(|i| Request {
                request_id: i,
                tag: None,
                expert_id: None,
                seed: None,
            })
            .collect();
        let run = || {
            let mut r = Router::new(&policy, &experts).unwrap();
            reqs.iter().map(|q| r.route(q).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().collect::<HashSet<_>>().len() > 10);
    }

    #[test]
    fn oversized_expert_is_infeasible() {
        let p = builtin_platform("dgx_a100").unwrap();
        let cfg = CoEConfig {
            expert: ExpertModel::bf16("huge", 400_000_000_000),
            expert_count: 1,
            ..CoEConfig::default()
        };
        let err = serve_trace(&trace(&["E0"]), &cfg, &p, None).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn footprints() {
        let e = 14_000_000_000;
        assert_eq!(footprint(850, e, &builtin_platform("dgx_a100").unwrap()).unwrap(), 19);
        assert_eq!(footprint(850, e, &builtin_platform("dgx_h100").unwrap()).unwrap(), 19);
        assert_eq!(footprint(850, e, &builtin_platform("sn40l_node").unwrap()).unwrap(), 1);
        for p in crate::arch::BUILTIN_PLATFORMS {
            assert_eq!(footprint(1, e, &builtin_platform(p).unwrap()).unwrap(), 1);
        }
    }

    #[test]
    fn single_expert_is_flat_after_warmup() {
        let p = builtin_platform("dgx_a100").unwrap();
        let cfg = CoEConfig::with_experts(1);
        let r = serve_trace(&ServingTrace::uniform(&cfg.experts(), 40, 0), &cfg, &p, None).unwrap();
        let later: Vec<f64> = r.requests[8..].iter().map(|q| q.total_s).collect();
        assert!(later.iter().all(|&t| t == later[0]));
    }

    #[test]
    fn jsonl_round_trip() {
        let t = trace(&["E0", "E1"]);
        let back = ServingTrace::from_jsonl(t.to_jsonl().as_bytes()).unwrap();
        assert_eq!(back, t);
        assert!(ServingTrace::from_jsonl("".as_bytes()).is_err());
        let tagged = ServingTrace::from_jsonl(r#"{"request_id":3,"tag":"math"}"#.as_bytes()).unwrap();
        assert_eq!(tagged.requests[0].tag.as_deref(), Some("math"));
    }

    proptest! {
        #[test]
        fn footprint_matches_closed_form(n in 1u64..5000, gb in 1u64..200) {
            let bytes = gb * 1_000_000_000;
            let dgx = builtin_platform("dgx_a100").unwrap();
            let rdu = builtin_platform("sn40l_node").unwrap();
            prop_assert_eq!(footprint(n, bytes, &dgx).unwrap(), (n * bytes).div_ceil(640_000_000_000));
            prop_assert_eq!(footprint(n, bytes, &rdu).unwrap(), (n * bytes).div_ceil(12_000_000_000_000));
        }

        #[test]
        fn more_hbm_never_more_misses(seed in any::<u64>(), fit in 2usize..7) {
            let p = builtin_platform("sn40l_node").unwrap();
            let per_socket = p.hbm().capacity_bytes;
            let mk = |fit: usize| CoEConfig {
                expert_count: 8,
                batch_size: 1,
                tp_degree: 1,
                hbm_reserve_bytes: per_socket - (fit as f64 * 14e9 + 1e9),
                ..CoEConfig::default()
            };
            let t = ServingTrace::uniform(&mk(fit).experts(), 60, seed);
            let a = serve_trace(&t, &mk(fit), &p, None).unwrap();
            let b = serve_trace(&t, &mk(fit - 1), &p, None).unwrap();
            prop_assert!(a.misses <= b.misses);
        }

        #[test]
        fn faster_ingress_never_slower(seed in any::<u64>(), factor in 1.0f64..8.0) {
            let p = builtin_platform("dgx_a100").unwrap();
            let mut fast = p.clone();
            fast.model_ingress_bw *= factor;
            let cfg = CoEConfig::with_experts(60);
            let t = ServingTrace::uniform(&cfg.experts(), 80, seed);
            let slow = serve_trace(&t, &cfg, &p, None).unwrap().total();
            let quick = serve_trace(&t, &cfg, &fast, None).unwrap().total();
            prop_assert!(quick <= slow);
        }
    }
}
