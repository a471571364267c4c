//! End-to-end runs of the `coeflow` binary over the shipped fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coeflow::fusion::FusionPlan;
use coeflow::memplan::MemoryPlanResult;
use tempfile::TempDir;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
        .display()
        .to_string()
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coeflow"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// Data rows of a CSV output, without the manifest comment or header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or_else(|_| panic!("not a number: {s}"))
}

#[test]
fn analyze_unfused_monarch_is_memory_bound_on_a100() {
    let d = TempDir::new().unwrap();
    let m = fixture("monarch.json");
    ok(
        d.path(),
        &[
            "analyze",
            "--graph",
            &m,
            "--platform",
            "dgx_a100",
            "--partition",
            "unfused",
        ],
    );
    let r = rows(&d.path().join("analyze.csv"));
    let agg = r.iter().find(|r| r[0] == "aggregate").unwrap();
    assert_eq!(agg[5], "MemoryBound");
    let unfused_oi = num(&agg[4]);

    ok(
        d.path(),
        &[
            "analyze",
            "--graph",
            &m,
            "--platform",
            "dgx_a100",
            "--partition",
            "maximal",
        ],
    );
    let r = rows(&d.path().join("analyze.csv"));
    assert_eq!(r.len(), 2, "one kernel plus the aggregate row");
    assert!(num(&r[1][4]) > unfused_oi);
    assert_eq!(r[1][5], "ComputeBound");
}

#[test]
fn missing_file_exits_2() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["analyze", "--graph", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not/here.json"));
    let o = run(
        d.path(),
        &["analyze", "--graph", &fixture("monarch.json"), "--platform", "tpu"],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = run(
        d.path(),
        &["fuse", "--graph", &fixture("monarch.json"), "--policy", "hinted"],
    );
    assert_eq!(o.status.code(), Some(2), "hinted without hints");
}

fn so_over_ho(dir: &Path, graph: &str) -> (f64, f64, f64) {
    ok(dir, &["estimate", "--graph", &fixture(graph)]);
    let r = rows(&dir.join("estimate.csv"));
    let fused = r.iter().find(|r| r[0] == "fused").unwrap();
    (num(&fused[2]), num(&fused[3]), num(&fused[4]))
}

#[test]
fn estimate_orchestration_trend() {
    let d = TempDir::new().unwrap();
    let (_, _, decode) = so_over_ho(d.path(), "decoder_decode.json");
    let (_, _, prefill) = so_over_ho(d.path(), "decoder_prefill.json");
    assert!(decode > prefill, "decode {decode} prefill {prefill}");
    let (so, ho, _) = so_over_ho(d.path(), "single_gemm.json");
    let p = coeflow::arch::builtin_platform("sn40l_node").unwrap();
    let delta = p.launch_overhead_so - p.launch_overhead_ho;
    assert!(((so - ho) - delta).abs() < 1e-8, "SO {so} HO {ho}");
}

#[test]
fn estimate_reports_fusion_speedup_on_monarch() {
    let d = TempDir::new().unwrap();
    let out = ok(
        d.path(),
        &["estimate", "--graph", &fixture("monarch.json"), "--orchestration", "so"],
    );
    let line = out.lines().find(|l| l.starts_with("fusion speedup (SO)")).unwrap();
    let speedup = num(line.rsplit(' ').next().unwrap());
    assert!(speedup > 1.0, "{line}");
    assert!(d.path().join("perf.csv").exists());
}

#[test]
fn fuse_pnr_and_memplan_outputs_load_back() {
    let d = TempDir::new().unwrap();
    let g = fixture("decoder_prefill.json");
    ok(d.path(), &["fuse", "--graph", &g]);
    let plan = FusionPlan::from_json(&std::fs::read_to_string(d.path().join("fusion_plan.json")).unwrap()).unwrap();
    assert_eq!(plan.kernels.len(), 3);

    ok(d.path(), &["memplan", "--graph", &g]);
    let mp = MemoryPlanResult::from_json(&std::fs::read_to_string(d.path().join("memplan.json")).unwrap()).unwrap();
    assert!(mp.fits());

    ok(d.path(), &["pnr", "--graph", &fixture("monarch.json"), "--seed", "3"]);
    let routes = rows(&d.path().join("routes.csv"));
    assert!(!routes.is_empty());
    assert!(d.path().join("placement.json").exists());
}

#[test]
fn memplan_without_room_exits_3() {
    let d = TempDir::new().unwrap();
    let o = run(
        d.path(),
        &[
            "memplan",
            "--graph",
            &fixture("decoder_prefill.json"),
            "--hbm-bytes",
            "1000",
            "--ddr-bytes",
            "1000",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
}

fn switch_and_execute(dir: &Path, platform: &str) -> (f64, f64) {
    ok(
        dir,
        &[
            "serve",
            "--config",
            &fixture("coe_150.json"),
            "--platform",
            platform,
            "--requests",
            "200",
        ],
    );
    let r = rows(&dir.join("requests.csv"));
    let switch: f64 = r.iter().map(|r| num(&r[2])).sum();
    let execute: f64 = r.iter().map(|r| num(&r[3])).sum();
    let summary = rows(&dir.join("summary.csv"));
    let (hits, misses) = (num(&summary[0][0]), num(&summary[0][1]));
    assert_eq!(hits + misses, 200.0);
    (switch, execute)
}

#[test]
fn serve_breakdown_shape() {
    let d = TempDir::new().unwrap();
    let (s, e) = switch_and_execute(d.path(), "sn40l_node");
    assert!(s < e, "sn40l switch {s} execute {e}");
    let (s, e) = switch_and_execute(d.path(), "dgx_a100");
    assert!(s > e, "dgx switch {s} execute {e}");
}

#[test]
fn serve_beyond_ddr_exits_3() {
    let d = TempDir::new().unwrap();
    let o = run(d.path(), &["serve", "--experts", "900"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("DDR"));
}

#[test]
fn serve_tagged_trace_with_routing_map() {
    let d = TempDir::new().unwrap();
    let trace = d.path().join("trace.jsonl");
    std::fs::write(
        &trace,
        "{\"request_id\":0,\"tag\":\"math\"}\n{\"request_id\":1,\"expert_id\":\"E3\"}\n{\"request_id\":2,\"tag\":\"math\"}\n",
    )
    .unwrap();
    let routing = d.path().join("routing.json");
    std::fs::write(&routing, r#"{"policy":"fixed_map","map":{"math":"E7"}}"#).unwrap();
    let t = trace.display().to_string();
    let r = routing.display().to_string();
    ok(d.path(), &["serve", "--trace", &t, "--routing", &r]);
    let s = rows(&d.path().join("summary.csv"));
    // one batch of three: E7 and E3 are copied in, the second E7 request hits
    assert_eq!((num(&s[0][0]), num(&s[0][1])), (1.0, 2.0));

    // a tag without a routing map is invalid input
    let o = run(d.path(), &["serve", "--trace", &t]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn footprint_matches_fleet_sizes() {
    let d = TempDir::new().unwrap();
    ok(
        d.path(),
        &[
            "footprint",
            "--counts",
            "50,150,850",
            "--platforms",
            "sn40l_node,dgx_a100",
        ],
    );
    let r = rows(&d.path().join("footprint.csv"));
    let get = |n: &str, p: &str| num(&r.iter().find(|r| r[0] == n && r[1] == p).unwrap()[2]);
    assert_eq!(get("850", "dgx_a100"), 19.0);
    assert_eq!(get("850", "sn40l_node"), 1.0);
    assert_eq!(get("50", "sn40l_node"), 1.0);
}

#[test]
fn sweep_marks_dgx_oom_without_host_tier() {
    let d = TempDir::new().unwrap();
    let args = [
        "sweep",
        "--counts",
        "150",
        "--platforms",
        "dgx_a100",
        "--batches",
        "20",
        "--warmup-batches",
        "5",
    ];
    ok(d.path(), &args);
    let r = rows(&d.path().join("sweep.csv"));
    assert_eq!(r[0][5], "ok");
    let mut no_host = args.to_vec();
    no_host.push("--no-host-tier");
    ok(d.path(), &no_host);
    let r = rows(&d.path().join("sweep.csv"));
    assert_eq!(r[0][5], "infeasible");
}

#[test]
fn outputs_are_byte_identical_across_runs_and_job_counts() {
    let d = TempDir::new().unwrap();
    let sweep = |jobs: &str| {
        ok(
            d.path(),
            &[
                "sweep",
                "--counts",
                "38-44",
                "--platforms",
                "dgx_a100,sn40l_node",
                "--batches",
                "30",
                "--jobs",
                jobs,
            ],
        );
        std::fs::read(d.path().join("sweep.csv")).unwrap()
    };
    assert_eq!(sweep("1"), sweep("4"));
    let serve = || {
        ok(d.path(), &["serve", "--requests", "64", "--seed", "9"]);
        std::fs::read(d.path().join("requests.csv")).unwrap()
    };
    assert_eq!(serve(), serve());
}

#[test]
fn manifest_is_embedded_in_outputs() {
    let d = TempDir::new().unwrap();
    let m = fixture("monarch.json");
    ok(d.path(), &["fuse", "--graph", &m, "--seed", "5"]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("fusion_plan.json")).unwrap()).unwrap();
    assert_eq!(v["manifest"]["command"], "fuse");
    assert_eq!(v["manifest"]["seed"], 5);
    assert_eq!(v["manifest"]["inputs"][0], m.as_str());
    ok(d.path(), &["footprint"]);
    let text = std::fs::read_to_string(d.path().join("footprint.csv")).unwrap();
    assert!(text.starts_with("# manifest: {\"command\":\"footprint\""));
}
