//! Subcommand implementations.

use std::fmt::Write;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use coeflow::arch::{sn40l_tile, Orchestration, PlatformConfig, TierKind, TileConfig};
use coeflow::coesim::{
    find_discontinuity, footprint, latency_curve, serve_trace, CoEConfig, CurvePoint, RoutingPolicy, ServingTrace,
};
use coeflow::fabric::{kernel_flows, link_utilization, place, route, route_csv, MeshTopology};
use coeflow::fusion::{kernel_call_ratio, plan_fusion, FusionPlan, FusionPolicy};
use coeflow::memplan::{lifetimes, plan_memory, symbols_from_plan};
use coeflow::opgraph::{classify_roofline, operational_intensity, GraphFile, OpGraph, Partition};
use coeflow::perf::{estimate_plan, estimate_run, perf_csv, schedule_of, KernelCost};

use crate::output::{parse_counts, OutDir, RunManifest, Table};
use crate::{Cli, Command, GraphArgs, OrchestrationArg, PolicyArg};

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    anyhow::ensure!(g.jobs > 0, coeflow::Error::Invalid("--jobs must be at least 1".into()));
    match &cli.command {
        Command::Analyze { graph, partition } => analyze(cli, graph, *partition),
        Command::Fuse { graph, policy } => fuse(cli, graph, *policy),
        Command::Pnr { graph, policy } => pnr(cli, graph, *policy),
        Command::Estimate {
            graph,
            policy,
            orchestration,
            placed,
        } => estimate(cli, graph, *policy, *orchestration, *placed),
        Command::Memplan {
            graph,
            policy,
            hbm_bytes,
            ddr_bytes,
        } => memplan(cli, graph, *policy, *hbm_bytes, *ddr_bytes),
        Command::Serve {
            trace,
            config,
            routing,
            experts,
            requests,
        } => serve(
            cli,
            trace.as_deref(),
            config.as_deref(),
            routing.as_deref(),
            *experts,
            *requests,
        ),
        Command::Footprint {
            counts,
            platforms,
            expert_bytes,
        } => footprint_cmd(cli, counts, platforms, *expert_bytes),
        Command::Sweep {
            counts,
            platforms,
            config,
            warmup_batches,
            batches,
            no_host_tier,
        } => sweep(
            cli,
            counts,
            platforms,
            config.as_deref(),
            *warmup_batches,
            *batches,
            *no_host_tier,
        ),
    }
}

fn platform(cli: &Cli) -> Result<PlatformConfig> {
    Ok(PlatformConfig::resolve(&cli.global.platform)?)
}

fn manifest(cli: &Cli, command: &str, inputs: Vec<String>) -> RunManifest {
    RunManifest::new(command, inputs, &cli.global.platform, cli.global.seed, &cli.global.out)
}

/// Manifest for commands that take a platform list instead of `--platform`.
fn manifest_over(cli: &Cli, command: &str, inputs: Vec<String>, platforms: &[PlatformConfig]) -> RunManifest {
    let names: Vec<&str> = platforms.iter().map(|p| p.name.as_str()).collect();
    RunManifest::new(command, inputs, &names.join(","), cli.global.seed, &cli.global.out)
}

struct LoadedGraph {
    graph: OpGraph,
    hints: Vec<String>,
    path: String,
}

fn load_graph(args: &GraphArgs) -> Result<LoadedGraph> {
    let path = args.graph.display().to_string();
    let file = GraphFile::load(&args.graph).with_context(|| format!("reading graph {path}"))?;
    let hints = if args.hints.is_empty() {
        file.fusion_hints.clone()
    } else {
        args.hints.clone()
    };
    let graph = file.into_graph().with_context(|| format!("loading graph {path}"))?;
    coeflow::opgraph::validate_graph(&graph)
        .into_result()
        .with_context(|| format!("validating graph {path}"))?;
    Ok(LoadedGraph { graph, hints, path })
}

/// Hinted when the graph carries hints, maximal otherwise.
fn policy_of(arg: Option<PolicyArg>, hints: &[String]) -> Result<FusionPolicy> {
    let arg = arg.unwrap_or(if hints.is_empty() {
        PolicyArg::Maximal
    } else {
        PolicyArg::Hinted
    });
    Ok(match arg {
        PolicyArg::Unfused => FusionPolicy::Unfused,
        PolicyArg::Maximal => FusionPolicy::Maximal,
        PolicyArg::Hinted => {
            anyhow::ensure!(
                !hints.is_empty(),
                coeflow::Error::Invalid("hinted fusion needs --hints or hints in the graph file".into())
            );
            FusionPolicy::Hinted(hints.to_vec())
        }
    })
}

fn tile_of(p: &PlatformConfig) -> Result<TileConfig> {
    p.tile.clone().ok_or_else(|| {
        coeflow::Error::Invalid(format!("platform `{}` has no dataflow tile to fuse onto", p.name)).into()
    })
}

fn analyze(cli: &Cli, args: &GraphArgs, partition: PolicyArg) -> Result<()> {
    let p = platform(cli)?;
    let lg = load_graph(args)?;
    let part = match partition {
        PolicyArg::Unfused => Partition::unfused(&lg.graph)?,
        other => {
            // intensity does not depend on the target, so GPU targets borrow the default tile
            let tile = p.tile.clone().unwrap_or_else(sn40l_tile);
            plan_fusion(&lg.graph, &tile, &policy_of(Some(other), &lg.hints)?)?.partition()
        }
    };
    let report = operational_intensity(&lg.graph, &part)?;
    let balance = p.machine_balance;

    let mut table = Table::new(&["kernel", "ops", "flops", "bytes", "oi", "bound"]);
    let mut csv = String::from("kernel,ops,flops,bytes,oi,bound\n");
    for (i, k) in report.kernels.iter().enumerate() {
        let bound = format!("{:?}", classify_roofline(k.intensity, balance));
        let ops = k.ops.join("+");
        table.row(vec![
            i.to_string(),
            ops.clone(),
            k.flops.to_string(),
            k.boundary_bytes.to_string(),
            format!("{:.3}", k.intensity),
            bound.clone(),
        ]);
        writeln!(
            csv,
            "{i},{ops},{},{},{:.6},{bound}",
            k.flops, k.boundary_bytes, k.intensity
        )?;
    }
    let bound = format!("{:?}", classify_roofline(report.aggregate, balance));
    table.row(vec![
        "aggregate".into(),
        format!("{} kernels", report.kernels.len()),
        report.total_flops.to_string(),
        report.total_bytes.to_string(),
        format!("{:.3}", report.aggregate),
        bound.clone(),
    ]);
    writeln!(
        csv,
        "aggregate,,{},{},{:.6},{bound}",
        report.total_flops, report.total_bytes, report.aggregate
    )?;
    println!("machine balance {balance:.1} FLOP/B on {}", p.name);
    table.print();

    let mut out = OutDir::create(&cli.global.out, manifest(cli, "analyze", vec![lg.path]))?;
    out.csv("analyze.csv", &csv)?;
    out.report();
    Ok(())
}

fn plan(cli: &Cli, args: &GraphArgs, policy: Option<PolicyArg>) -> Result<(LoadedGraph, PlatformConfig, FusionPlan)> {
    let p = platform(cli)?;
    let lg = load_graph(args)?;
    let tile = tile_of(&p)?;
    let plan = plan_fusion(&lg.graph, &tile, &policy_of(policy, &lg.hints)?)?;
    Ok((lg, p, plan))
}

fn fuse(cli: &Cli, args: &GraphArgs, policy: Option<PolicyArg>) -> Result<()> {
    let (lg, _, plan) = plan(cli, args, policy)?;
    let mut table = Table::new(&["kernel", "ops", "stages", "pcu", "pmu", "sram_bytes", "oi"]);
    for (i, k) in plan.kernels.iter().enumerate() {
        table.row(vec![
            i.to_string(),
            k.ops.join("+"),
            k.stages.len().to_string(),
            k.pcu_total().to_string(),
            k.pmu_total().to_string(),
            k.sram_bytes().to_string(),
            format!("{:.3}", k.intensity()),
        ]);
    }
    table.print();
    let mut out = OutDir::create(&cli.global.out, manifest(cli, "fuse", vec![lg.path]))?;
    out.json("fusion_plan.json", &plan)?;
    out.report();
    Ok(())
}

fn pnr(cli: &Cli, args: &GraphArgs, policy: Option<PolicyArg>) -> Result<()> {
    let (lg, p, plan) = plan(cli, args, policy)?;
    let mesh = MeshTopology::from_tile(&tile_of(&p)?);
    let placements = place(&plan, &mesh, cli.global.seed)?;
    let mut table = Table::new(&["kernel", "ops", "units", "wirelength", "links", "max_util"]);
    let mut csv = String::new();
    for (i, (k, pl)) in plan.kernels.iter().zip(&placements).enumerate() {
        let routes = route(&kernel_flows(k, pl));
        let report = link_utilization(&routes, &mesh);
        table.row(vec![
            i.to_string(),
            k.ops.join("+"),
            pl.units.len().to_string(),
            pl.wirelength.to_string(),
            report.links.len().to_string(),
            format!("{:.3}", report.max_utilization()),
        ]);
        for (n, line) in route_csv(&routes, &mesh).lines().enumerate() {
            if n == 0 {
                if i == 0 {
                    writeln!(csv, "kernel,{line}")?;
                }
            } else {
                writeln!(csv, "{i},{line}")?;
            }
        }
    }
    table.print();
    let mut out = OutDir::create(&cli.global.out, manifest(cli, "pnr", vec![lg.path]))?;
    out.json("placement.json", &placements)?;
    out.csv("routes.csv", &csv)?;
    out.report();
    Ok(())
}

fn costs_of(plan: &FusionPlan, p: &PlatformConfig, placed: bool, seed: u64) -> Result<Vec<KernelCost>> {
    if placed {
        let mesh = MeshTopology::from_tile(&tile_of(p)?);
        let placements = place(plan, &mesh, seed)?;
        Ok(estimate_plan(plan, Some(&placements), p)?)
    } else {
        Ok(estimate_plan(plan, None, p)?)
    }
}

fn estimate(
    cli: &Cli,
    args: &GraphArgs,
    policy: Option<PolicyArg>,
    orchestration: OrchestrationArg,
    placed: bool,
) -> Result<()> {
    let (lg, p, fused) = plan(cli, args, policy)?;
    let unfused = plan_fusion(&lg.graph, &tile_of(&p)?, &FusionPolicy::Unfused)?;
    let seed = cli.global.seed;
    let fused_costs = costs_of(&fused, &p, placed, seed)?;
    let unfused_costs = costs_of(&unfused, &p, placed, seed)?;

    let mut table = Table::new(&["plan", "kernels", "so_s", "ho_s", "so_over_ho"]);
    let mut csv = String::from("plan,kernels,so_s,ho_s,so_over_ho\n");
    let mut totals = Vec::new();
    for (name, costs) in [("unfused", &unfused_costs), ("fused", &fused_costs)] {
        let so = estimate_run(&schedule_of(costs, Orchestration::Software), costs, &p)?.total;
        let ho = estimate_run(&schedule_of(costs, Orchestration::Hardware), costs, &p)?.total;
        table.row(vec![
            name.into(),
            costs.len().to_string(),
            format!("{so:.6e}"),
            format!("{ho:.6e}"),
            format!("{:.3}", so / ho),
        ]);
        writeln!(csv, "{name},{},{so:.9},{ho:.9},{:.6}", costs.len(), so / ho)?;
        totals.push((so, ho));
    }
    table.print();
    let ratio = kernel_call_ratio(&unfused, &fused);
    let (so_speedup, ho_speedup) = (totals[0].0 / totals[1].0, totals[0].1 / totals[1].1);
    match orchestration {
        OrchestrationArg::So => println!("fusion speedup (SO) {so_speedup:.3}"),
        OrchestrationArg::Ho => println!("fusion speedup (HO) {ho_speedup:.3}"),
        OrchestrationArg::Both => println!("fusion speedup SO {so_speedup:.3}, HO {ho_speedup:.3}"),
    }
    println!("kernel call ratio {ratio:.3}");
    println!("HO over SO speedup (fused) {:.3}", totals[1].0 / totals[1].1);
    writeln!(
        csv,
        "# fusion_speedup_so={so_speedup:.6} fusion_speedup_ho={ho_speedup:.6} kernel_call_ratio={ratio:.6}"
    )?;

    let mut out = OutDir::create(&cli.global.out, manifest(cli, "estimate", vec![lg.path]))?;
    out.csv("estimate.csv", &csv)?;
    out.csv("perf.csv", &perf_csv(&fused_costs, seed))?;
    out.report();
    Ok(())
}

fn memplan(cli: &Cli, args: &GraphArgs, policy: Option<PolicyArg>, hbm: Option<u64>, ddr: Option<u64>) -> Result<()> {
    let (lg, p, plan) = plan(cli, args, policy)?;
    let hbm = hbm.unwrap_or(p.hbm().capacity_bytes as u64);
    let ddr = ddr.unwrap_or_else(|| p.tier(TierKind::Ddr).map_or(0, |t| t.capacity_bytes as u64));
    let (schedule, decls) = symbols_from_plan(&lg.graph, &plan)?;
    let symbols = lifetimes(&schedule, &decls)?;
    let result = plan_memory(&symbols, hbm, ddr)?;
    println!(
        "{} symbols, peak HBM {} of {} bytes, {} spilled ({} bytes)",
        result.symbols.len(),
        result.peak_hbm,
        result.hbm_capacity,
        result.spills.len(),
        result.spill_bytes
    );
    for w in &result.warnings {
        println!("warning: {w}");
    }
    let mut out = OutDir::create(&cli.global.out, manifest(cli, "memplan", vec![lg.path]))?;
    out.json("memplan.json", &result)?;
    out.report();
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<CoEConfig> {
    match path {
        None => Ok(CoEConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(coeflow::Error::from)?;
            Ok(CoEConfig::from_json(&text).with_context(|| format!("reading config {}", p.display()))?)
        }
    }
}

fn serve(
    cli: &Cli,
    trace: Option<&Path>,
    config: Option<&Path>,
    routing: Option<&Path>,
    experts: Option<usize>,
    requests: usize,
) -> Result<()> {
    let p = platform(cli)?;
    let mut cfg = load_config(config)?;
    if let Some(n) = experts {
        cfg.experts.clear();
        cfg.expert_count = n;
    }
    cfg.validate()?;
    let policy: Option<RoutingPolicy> = match routing {
        None => None,
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(coeflow::Error::from)?;
            Some(serde_json::from_str(&text).map_err(coeflow::Error::from)?)
        }
    };
    let mut inputs = Vec::new();
    let trace = match trace {
        Some(path) => {
            inputs.push(path.display().to_string());
            let f = File::open(path).map_err(coeflow::Error::from)?;
            ServingTrace::from_jsonl(BufReader::new(f))?
        }
        None => ServingTrace::uniform(&cfg.experts(), requests, cli.global.seed),
    };
    inputs.extend(config.map(|c| c.display().to_string()));
    inputs.extend(routing.map(|c| c.display().to_string()));

    let r = serve_trace(&trace, &cfg, &p, policy.as_ref())?;
    let total = r.total();
    println!(
        "{} requests on {}: total {:.3} s, switch {:.1}%, execute {:.1}%, router {:.1}%",
        r.requests.len(),
        p.name,
        total,
        100.0 * r.switch_total() / total,
        100.0 * r.execute_total() / total,
        100.0 * r.router_total() / total
    );
    println!(
        "hits {} misses {} evictions {} copy-back {} bytes",
        r.hits, r.misses, r.evictions, r.copyback_bytes
    );
    let mut out = OutDir::create(&cli.global.out, manifest(cli, "serve", inputs))?;
    out.csv("requests.csv", &r.requests_csv())?;
    out.csv("summary.csv", &r.summary_csv())?;
    out.report();
    Ok(())
}

fn resolve_all(names: &[String], no_host_tier: bool) -> Result<Vec<PlatformConfig>> {
    names
        .iter()
        .map(|n| {
            let mut p = PlatformConfig::resolve(n.trim())?;
            if no_host_tier {
                p.tiers.retain(|t| t.kind != TierKind::Host);
            }
            Ok(p)
        })
        .collect()
}

fn footprint_cmd(cli: &Cli, counts: &[String], platforms: &[String], expert_bytes: u64) -> Result<()> {
    let counts = parse_counts(counts).map_err(|e| coeflow::Error::Invalid(format!("{e:#}")))?;
    let platforms = resolve_all(platforms, false)?;
    let mut table = Table::new(&["experts", "platform", "machines"]);
    let mut csv = String::from("experts,platform,machines\n");
    for &n in &counts {
        for p in &platforms {
            let m = footprint(n as u64, expert_bytes, p)?;
            table.row(vec![n.to_string(), p.name.clone(), m.to_string()]);
            writeln!(csv, "{n},{},{m}", p.name)?;
        }
    }
    table.print();
    let mut out = OutDir::create(&cli.global.out, manifest_over(cli, "footprint", vec![], &platforms))?;
    out.csv("footprint.csv", &csv)?;
    out.report();
    Ok(())
}

/// Runs `f` over `0..n` on up to `jobs` threads, keeping results in index order.
fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("no worker panicked")[i] = Some(v);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|v| v.expect("every index ran"))
        .collect()
}

fn sweep(
    cli: &Cli,
    counts: &[String],
    platforms: &[String],
    config: Option<&Path>,
    warmup: usize,
    batches: usize,
    no_host_tier: bool,
) -> Result<()> {
    let counts = parse_counts(counts).map_err(|e| coeflow::Error::Invalid(format!("{e:#}")))?;
    let platforms = resolve_all(platforms, no_host_tier)?;
    let cfg = load_config(config)?;
    anyhow::ensure!(
        batches > 0,
        coeflow::Error::Invalid("--batches must be at least 1".into())
    );
    let expert_bytes = cfg.expert.bytes;
    let jobs: Vec<(usize, usize)> = (0..platforms.len())
        .flat_map(|p| counts.iter().map(move |&c| (p, c)))
        .collect();
    let results = parallel_map(jobs.len(), cli.global.jobs, |i| {
        let (pi, n) = jobs[i];
        latency_curve(&[n], &cfg, &platforms[pi], warmup, batches, cli.global.seed).map(|c| c[0])
    });

    let mut csv = String::from("experts,platform,machines,mean_batch_latency_s,miss_rate,status\n");
    let mut curves: Vec<Vec<CurvePoint>> = vec![Vec::new(); platforms.len()];
    for (&(pi, n), r) in jobs.iter().zip(results) {
        let p = &platforms[pi];
        let machines = footprint(n as u64, expert_bytes, p)?;
        match r {
            Ok(pt) => {
                writeln!(
                    csv,
                    "{n},{},{machines},{:.9},{:.6},ok",
                    p.name, pt.mean_batch_latency_s, pt.miss_rate
                )?;
                curves[pi].push(pt);
            }
            Err(coeflow::Error::Infeasible(_)) => writeln!(csv, "{n},{},{machines},,,infeasible", p.name)?,
            Err(e) => return Err(e.into()),
        }
    }
    let mut table = Table::new(&["platform", "points", "infeasible", "knee"]);
    for (p, c) in platforms.iter().zip(&curves) {
        table.row(vec![
            p.name.clone(),
            c.len().to_string(),
            (counts.len() - c.len()).to_string(),
            find_discontinuity(c, 0.10).map_or("none".into(), |k| k.to_string()),
        ]);
    }
    table.print();
    let inputs = config.map(|c| vec![c.display().to_string()]).unwrap_or_default();
    let mut out = OutDir::create(&cli.global.out, manifest_over(cli, "sweep", inputs, &platforms))?;
    out.csv("sweep.csv", &csv)?;
    out.report();
    Ok(())
}
