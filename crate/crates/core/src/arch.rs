//! Machine descriptions: the reconfigurable tile, memory tiers, and whole
//! platforms (an 8-socket dataflow node and two 8-GPU comparison nodes).
//!
//! Per-socket quantities are stored; node aggregates are derived.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opgraph::ValidationReport;

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

/// Schema tag for platform files.
pub const PLATFORM_SCHEMA: &str = "arch_v1";

/// Names accepted by [`builtin_platform`].
pub const BUILTIN_PLATFORMS: [&str; 3] = ["sn40l_node", "dgx_a100", "dgx_h100"];

/// One socket's reconfigurable tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    pub pcu_count: u32,
    pub pmu_count: u32,
    /// BF16 FLOP/s of one compute unit.
    pub pcu_peak_flops: f64,
    pub pmu_capacity_bytes: f64,
    pub pmu_read_bw: f64,
    pub pmu_write_bw: f64,
    pub mesh_rows: u32,
    pub mesh_cols: u32,
    /// Bytes/s of one vector-fabric link.
    pub link_bw: f64,
    pub sram_total_bytes: f64,
    /// Pipeline depth of one stage, in seconds, added to every tile it handles.
    pub stage_latency_s: f64,
    /// Elements per streamed tile (32x32 by default).
    pub tile_elements: u64,
}

impl TileConfig {
    pub fn peak_flops(&self) -> f64 {
        self.pcu_count as f64 * self.pcu_peak_flops
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TierKind {
    Sram,
    Hbm,
    Ddr,
    Host,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryTier {
    pub kind: TierKind,
    pub capacity_bytes: f64,
    pub bandwidth_bytes_per_s: f64,
}

/// Whether experts overflow into accelerator-attached DDR or host memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlatformKind {
    Rdu,
    Gpu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformConfig {
    pub name: String,
    pub kind: PlatformKind,
    pub sockets: u32,
    pub peak_flops_per_socket: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<TileConfig>,
    /// Off-chip tiers of one socket.
    pub tiers: Vec<MemoryTier>,
    /// Aggregate bytes/s for copying expert weights into HBM.
    pub model_ingress_bw: f64,
    /// Roofline ridge point in FLOPs/byte.
    pub machine_balance: f64,
    pub launch_overhead_so: f64,
    pub launch_overhead_ho: f64,
    pub allreduce_alpha_s: f64,
    pub allreduce_beta_bytes_per_s: f64,
    /// Fraction of HBM bandwidth sustained during decode.
    pub decode_hbm_utilization: f64,
    /// Fraction of peak FLOPs sustained during prefill.
    pub prefill_efficiency: f64,
}

impl PlatformConfig {
    pub fn tier(&self, kind: TierKind) -> Option<&MemoryTier> {
        self.tiers.iter().find(|t| t.kind == kind)
    }

    pub fn hbm(&self) -> &MemoryTier {
        self.tier(TierKind::Hbm).expect("every platform has an HBM tier")
    }

    /// The tier experts live in when they are not in HBM.
    pub fn capacity_tier(&self) -> Option<&MemoryTier> {
        match self.kind {
            PlatformKind::Rdu => self.tier(TierKind::Ddr),
            PlatformKind::Gpu => self.tier(TierKind::Host),
        }
    }

    pub fn aggregate_capacity(&self, kind: TierKind) -> f64 {
        self.tier(kind).map_or(0.0, |t| t.capacity_bytes * self.sockets as f64)
    }

    pub fn aggregate_bandwidth(&self, kind: TierKind) -> f64 {
        self.tier(kind)
            .map_or(0.0, |t| t.bandwidth_bytes_per_s * self.sockets as f64)
    }

    pub fn aggregate_peak_flops(&self) -> f64 {
        self.peak_flops_per_socket * self.sockets as f64
    }

    pub fn launch_overhead(&self, orchestration: Orchestration) -> f64 {
        match orchestration {
            Orchestration::Software => self.launch_overhead_so,
            Orchestration::Hardware => self.launch_overhead_ho,
        }
    }

    /// Latency of one allreduce of `bytes` across the sockets.
    pub fn allreduce_time(&self, bytes: f64) -> f64 {
        if self.sockets <= 1 {
            0.0
        } else {
            self.allreduce_alpha_s + bytes / self.allreduce_beta_bytes_per_s
        }
    }

    /// A copy with a different socket count (e.g. two nodes' worth).
    pub fn with_sockets(&self, sockets: u32) -> Self {
        PlatformConfig {
            sockets,
            ..self.clone()
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let file: PlatformFile = toml::from_str(s)?;
        if file.version != PLATFORM_SCHEMA {
            return Err(Error::invalid(format!(
                "expected version `{PLATFORM_SCHEMA}`, found `{}`",
                file.version
            )));
        }
        Ok(file.platform)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&PlatformFile {
            version: PLATFORM_SCHEMA.to_string(),
            platform: self.clone(),
        })
        .expect("platform serializes")
    }

    /// Resolves a builtin name, otherwise reads a platform file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUILTIN_PLATFORMS.contains(&name_or_path) {
            return builtin_platform(name_or_path);
        }
        let path = Path::new(name_or_path);
        if path.exists() {
            Self::from_toml(&std::fs::read_to_string(path)?)
        } else {
            Err(Error::invalid(format!(
                "unknown platform `{name_or_path}` (builtins: {})",
                BUILTIN_PLATFORMS.join(", ")
            )))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlatformFile {
    version: String,
    #[serde(flatten)]
    platform: PlatformConfig,
}

/// Kernel launch scheduling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orchestration {
    #[serde(rename = "SO")]
    Software,
    #[serde(rename = "HO")]
    Hardware,
}

const CLOCK_HZ: f64 = 1.6e9;

/// The SN40L socket's tile: 1040 compute and 1040 memory units on a 40x54
/// mesh whose outer two columns host the AGCUs.
pub fn sn40l_tile() -> TileConfig {
    let pcu_count = 1040;
    TileConfig {
        pcu_count,
        pmu_count: 1040,
        pcu_peak_flops: 638e12 / pcu_count as f64,
        pmu_capacity_bytes: 520e6 / 1040.0,
        pmu_read_bw: 64.0 * CLOCK_HZ,
        pmu_write_bw: 64.0 * CLOCK_HZ,
        mesh_rows: 40,
        mesh_cols: 54,
        link_bw: 64.0 * CLOCK_HZ,
        sram_total_bytes: 520e6,
        stage_latency_s: 128.0 / CLOCK_HZ,
        tile_elements: 32 * 32,
    }
}

fn gpu_node(name: &str, peak: f64, hbm_bw: f64, ingress: f64) -> PlatformConfig {
    PlatformConfig {
        name: name.to_string(),
        kind: PlatformKind::Gpu,
        sockets: 8,
        peak_flops_per_socket: peak,
        tile: None,
        tiers: vec![
            MemoryTier {
                kind: TierKind::Hbm,
                capacity_bytes: 80e9,
                bandwidth_bytes_per_s: hbm_bw,
            },
            // 2 TB of host DRAM per node, shared by 8 GPUs
            MemoryTier {
                kind: TierKind::Host,
                capacity_bytes: 250e9,
                bandwidth_bytes_per_s: 51.2e9,
            },
        ],
        model_ingress_bw: ingress,
        machine_balance: peak / hbm_bw,
        launch_overhead_so: 100e-6,
        launch_overhead_ho: 5e-6,
        allreduce_alpha_s: 20e-6,
        allreduce_beta_bytes_per_s: 300e9,
        decode_hbm_utilization: 0.5,
        prefill_efficiency: 0.4,
    }
}

/// Returns one of the canonical platforms by name.
pub fn builtin_platform(name: &str) -> Result<PlatformConfig> {
    match name {
        "sn40l_node" => {
            let tile = sn40l_tile();
            Ok(PlatformConfig {
                name: name.to_string(),
                kind: PlatformKind::Rdu,
                sockets: 8,
                peak_flops_per_socket: tile.peak_flops(),
                tile: Some(tile),
                tiers: vec![
                    MemoryTier {
                        kind: TierKind::Hbm,
                        capacity_bytes: 64.0 * GIB,
                        bandwidth_bytes_per_s: 1.8e12,
                    },
                    MemoryTier {
                        kind: TierKind::Ddr,
                        capacity_bytes: 1.5e12,
                        bandwidth_bytes_per_s: 200e9,
                    },
                ],
                model_ingress_bw: 1e12,
                machine_balance: 638e12 / 1.8e12,
                launch_overhead_so: 100e-6,
                launch_overhead_ho: 5e-6,
                allreduce_alpha_s: 5e-6,
                allreduce_beta_bytes_per_s: 100e9,
                decode_hbm_utilization: 0.85,
                prefill_efficiency: 0.4,
            })
        }
        "dgx_a100" => Ok(gpu_node(name, 300e12, 2.0e12, 32e9)),
        "dgx_h100" => Ok(gpu_node(name, 989e12, 3.35e12, 64e9)),
        other => Err(Error::invalid(format!(
            "unknown platform `{other}` (builtins: {})",
            BUILTIN_PLATFORMS.join(", ")
        ))),
    }
}

fn rel_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Checks positivity and consistency of a platform. Implausible but legal
/// combinations become warnings.
pub fn validate_platform(p: &PlatformConfig) -> ValidationReport {
    let mut r = ValidationReport::default();
    let name = p.name.as_str();
    if p.sockets == 0 {
        r.error("positivity", name, "socket count must be positive");
    }
    for (field, v) in [
        ("peak_flops_per_socket", p.peak_flops_per_socket),
        ("model_ingress_bw", p.model_ingress_bw),
        ("machine_balance", p.machine_balance),
        ("launch_overhead_so", p.launch_overhead_so),
        ("launch_overhead_ho", p.launch_overhead_ho),
        ("allreduce_beta_bytes_per_s", p.allreduce_beta_bytes_per_s),
        ("decode_hbm_utilization", p.decode_hbm_utilization),
        ("prefill_efficiency", p.prefill_efficiency),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            r.error("positivity", name, format!("{field} must be positive, got {v}"));
        }
    }
    if p.allreduce_alpha_s < 0.0 {
        r.error("positivity", name, "allreduce_alpha_s must be non-negative");
    }
    for (field, v) in [
        ("decode_hbm_utilization", p.decode_hbm_utilization),
        ("prefill_efficiency", p.prefill_efficiency),
    ] {
        if v > 1.0 {
            r.error("range", name, format!("{field} must be at most 1, got {v}"));
        }
    }
    for t in &p.tiers {
        if !(t.capacity_bytes > 0.0 && t.bandwidth_bytes_per_s > 0.0) {
            r.error(
                "positivity",
                name,
                format!("{:?} tier capacity and bandwidth must be positive", t.kind),
            );
        }
    }
    if p.tier(TierKind::Hbm).is_none() {
        r.error("tiers", name, "platform has no HBM tier");
    }
    match p.capacity_tier() {
        None => r.warn("tiers", name, "no capacity tier: experts must all fit in HBM"),
        Some(src) => {
            let source_bw = src.bandwidth_bytes_per_s * p.sockets as f64;
            if p.model_ingress_bw > source_bw {
                let tier = match src.kind {
                    TierKind::Ddr => "DDR",
                    _ => "host",
                };
                r.warn(
                    "ingress",
                    name,
                    format!(
                        "ingress exceeds {tier} aggregate ({:.3e} > {:.3e} B/s)",
                        p.model_ingress_bw, source_bw
                    ),
                );
            }
        }
    }
    if let Some(t) = &p.tile {
        if t.pcu_count == 0 || t.pmu_count == 0 {
            r.error("positivity", name, "tile unit counts must be positive");
        }
        for (field, v) in [
            ("pcu_peak_flops", t.pcu_peak_flops),
            ("pmu_capacity_bytes", t.pmu_capacity_bytes),
            ("pmu_read_bw", t.pmu_read_bw),
            ("pmu_write_bw", t.pmu_write_bw),
            ("link_bw", t.link_bw),
        ] {
            if v.is_nan() || v <= 0.0 {
                r.error("positivity", name, format!("tile {field} must be positive"));
            }
        }
        if t.tile_elements == 0 {
            r.error("positivity", name, "tile_elements must be positive");
        }
        if !rel_eq(t.sram_total_bytes, t.pmu_count as f64 * t.pmu_capacity_bytes) {
            r.error(
                "tile",
                name,
                "sram_total_bytes must equal pmu_count * pmu_capacity_bytes",
            );
        }
        if !rel_eq(t.peak_flops(), p.peak_flops_per_socket) {
            r.error("tile", name, "pcu_count * pcu_peak_flops must equal the socket peak");
        }
        if (t.mesh_rows as u64 * t.mesh_cols as u64) < (t.pcu_count + t.pmu_count) as u64 {
            r.error("tile", name, "mesh has fewer sites than compute plus memory units");
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sn40l_hbm_bandwidth_and_pmu_capacity() {
        let p = builtin_platform("sn40l_node").unwrap();
        assert_eq!(p.hbm().bandwidth_bytes_per_s, 1.8e12);
        assert_eq!(p.tile.as_ref().unwrap().pmu_capacity_bytes, 500_000.0);
    }

    #[test]
    fn a100_balance_is_150() {
        let p = builtin_platform("dgx_a100").unwrap();
        assert_eq!(p.machine_balance, 150.0);
    }

    #[test]
    fn node_aggregates() {
        let p = builtin_platform("sn40l_node").unwrap();
        assert_eq!(p.aggregate_capacity(TierKind::Hbm), 8.0 * 64.0 * GIB);
        assert_eq!(p.aggregate_capacity(TierKind::Ddr), 12e12);
        let a = builtin_platform("dgx_a100").unwrap();
        assert_eq!(a.aggregate_capacity(TierKind::Hbm), 640e9);
        assert_eq!(a.model_ingress_bw, 32e9);
        let h = builtin_platform("dgx_h100").unwrap();
        assert_eq!(h.aggregate_capacity(TierKind::Hbm), 640e9);
        assert_eq!(h.model_ingress_bw, 64e9);
    }

    #[test]
    fn builtins_self_validate() {
        for name in BUILTIN_PLATFORMS {
            let r = validate_platform(&builtin_platform(name).unwrap());
            assert!(r.is_ok(), "{name}: {:?}", r.errors);
            assert!(r.warnings.is_empty(), "{name}: {:?}", r.warnings);
        }
    }

    #[test]
    fn excessive_ingress_warns() {
        let mut p = builtin_platform("sn40l_node").unwrap();
        p.model_ingress_bw = 2e12;
        let r = validate_platform(&p);
        assert!(r.is_ok());
        assert!(r
            .warnings
            .iter()
            .any(|w| w.message.contains("ingress exceeds DDR aggregate")));
    }

    #[test]
    fn zero_sockets_is_an_error() {
        let p = builtin_platform("dgx_h100").unwrap().with_sockets(0);
        assert!(!validate_platform(&p).is_ok());
    }

    #[test]
    fn unknown_builtin() {
        assert!(builtin_platform("tpu_v9").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let p = builtin_platform("sn40l_node").unwrap();
        let text = p.to_toml();
        assert!(text.contains("arch_v1"));
        assert_eq!(PlatformConfig::from_toml(&text).unwrap(), p);
        let bad = text.replace("arch_v1", "arch_v0");
        assert!(PlatformConfig::from_toml(&bad).is_err());
    }
}
