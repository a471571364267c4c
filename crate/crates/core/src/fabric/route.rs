use std::collections::{BTreeMap, HashSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Coord, MeshTopology, Placement, SiteKind};
use crate::fusion::{BufferRole, FusedKernel};

/// A directed link between neighboring switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub from: Coord,
    pub to: Coord,
}

impl std::fmt::Display for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})->({},{})", self.from.x, self.from.y, self.to.x, self.to.y)
    }
}

/// A stream of data from one site to one or more sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub id: u32,
    pub src: Coord,
    pub dsts: Vec<Coord>,
    /// Bytes/s the flow must carry.
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRoute {
    pub id: u32,
    pub src: Coord,
    pub dsts: Vec<Coord>,
    /// Tree links, deduplicated, in the order first used.
    pub links: Vec<Link>,
    pub demand: f64,
    pub throttle_weight: f64,
}

/// X-then-Y dimension-order path.
pub(super) fn dor_path(src: Coord, dst: Coord) -> Vec<Link> {
    let mut links = Vec::with_capacity(src.manhattan(dst) as usize);
    let mut c = src;
    while c.x != dst.x {
        let next = Coord::new(if dst.x > c.x { c.x + 1 } else { c.x - 1 }, c.y);
        links.push(Link { from: c, to: next });
        c = next;
    }
    while c.y != dst.y {
        let next = Coord::new(c.x, if dst.y > c.y { c.y + 1 } else { c.y - 1 });
        links.push(Link { from: c, to: next });
        c = next;
    }
    links
}

/// Routes each flow as the union of its dimension-order paths.
pub fn route(flows: &[Flow]) -> Vec<FlowRoute> {
    flows
        .iter()
        .map(|f| {
            let mut seen = HashSet::new();
            let mut links = Vec::new();
            for &d in &f.dsts {
                for l in dor_path(f.src, d) {
                    if seen.insert(l) {
                        links.push(l);
                    }
                }
            }
            FlowRoute {
                id: f.id,
                src: f.src,
                dsts: f.dsts.clone(),
                links,
                demand: f.demand,
                throttle_weight: 1.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkLoad {
    pub link: Link,
    /// Throttled demand, bytes/s.
    pub demand: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkReport {
    /// Loaded links in coordinate order.
    pub links: Vec<LinkLoad>,
    /// Links above capacity.
    pub hotspots: Vec<Link>,
}

impl LinkReport {
    pub fn max_utilization(&self) -> f64 {
        self.links.iter().map(|l| l.utilization).fold(0.0, f64::max)
    }

    pub fn utilization(&self, link: Link) -> f64 {
        self.links
            .iter()
            .find(|l| l.link == link)
            .map_or(0.0, |l| l.utilization)
    }
}

/// Per-link demand over capacity, with links above 1.0 flagged.
pub fn link_utilization(routes: &[FlowRoute], mesh: &MeshTopology) -> LinkReport {
    let mut demand: BTreeMap<Link, f64> = BTreeMap::new();
    for r in routes {
        for &l in &r.links {
            *demand.entry(l).or_default() += r.demand * r.throttle_weight;
        }
    }
    let links: Vec<LinkLoad> = demand
        .into_iter()
        .map(|(link, d)| LinkLoad {
            link,
            demand: d,
            utilization: d / mesh.link_bw,
        })
        .collect();
    let hotspots = links.iter().filter(|l| l.utilization > 1.0).map(|l| l.link).collect();
    LinkReport { links, hotspots }
}

/// Sets each flow's weight so no link it crosses exceeds capacity: a flow on
/// a link at utilization `u > 1` is scaled by `1/u`.
pub fn throttle(routes: &[FlowRoute], mesh: &MeshTopology) -> Vec<FlowRoute> {
    let report = link_utilization(routes, mesh);
    let util: BTreeMap<Link, f64> = report.links.iter().map(|l| (l.link, l.utilization)).collect();
    routes
        .iter()
        .map(|r| {
            let worst = r.links.iter().map(|l| util[l]).fold(1.0, f64::max);
            FlowRoute {
                throttle_weight: r.throttle_weight / worst,
                ..r.clone()
            }
        })
        .collect()
}

/// CSV with one row per (flow, link): `flow_id,link,demand,utilization`.
pub fn route_csv(routes: &[FlowRoute], mesh: &MeshTopology) -> String {
    let report = link_utilization(routes, mesh);
    let mut out = String::from("flow_id,link,demand,utilization\n");
    for r in routes {
        for &l in &r.links {
            writeln!(
                out,
                "{},{},{},{:.6}",
                r.id,
                l,
                r.demand * r.throttle_weight,
                report.utilization(l)
            )
            .unwrap();
        }
    }
    out
}

/// Data-movement flows of a placed kernel.
///
/// Streamed buffers pair producer and consumer units round-robin with buffer
/// units; resident buffers multicast from each unit to every consumer unit;
/// boundary buffers exchange data with their port.
pub fn kernel_flows(k: &FusedKernel, p: &Placement) -> Vec<Flow> {
    let steps = k.tiles.max(1) as f64;
    let mut flows = Vec::new();
    let mut push = |src: Coord, dsts: Vec<Coord>, demand: f64| {
        let dsts: Vec<Coord> = dsts.into_iter().filter(|&d| d != src).collect();
        if !dsts.is_empty() && demand > 0.0 {
            flows.push(Flow {
                id: flows.len() as u32,
                src,
                dsts,
                demand,
            });
        }
    };
    let rate = |op: &str| k.stages.iter().find(|s| s.op == op).map_or(0.0, |s| s.stage_throughput);
    let max_rate = k.stages.iter().map(|s| s.stage_throughput).fold(0.0, f64::max);
    for b in &k.buffers {
        let units: Vec<Coord> = p.sites_of(&b.tensor, SiteKind::Pmu).collect();
        if units.is_empty() {
            continue;
        }
        let step_bytes = b.bytes as f64 / steps;
        if let Some(prod) = &b.producer {
            let pcus: Vec<Coord> = p.sites_of(prod, SiteKind::Pcu).collect();
            let pairs = pcus.len().max(units.len());
            let bw = rate(prod) * step_bytes / pairs as f64;
            for i in 0..pairs {
                push(pcus[i % pcus.len()], vec![units[i % units.len()]], bw);
            }
        }
        for cons in &b.consumers {
            let pcus: Vec<Coord> = p.sites_of(cons, SiteKind::Pcu).collect();
            let bw = rate(cons) * step_bytes;
            if b.resident {
                for &u in &units {
                    push(u, pcus.clone(), bw / units.len() as f64);
                }
            } else {
                let pairs = pcus.len().max(units.len());
                for i in 0..pairs {
                    push(units[i % units.len()], vec![pcus[i % pcus.len()]], bw / pairs as f64);
                }
            }
        }
        for port in p.sites_of(&b.tensor, SiteKind::Agcu) {
            let bw = max_rate * step_bytes / units.len() as f64;
            for &u in &units {
                match b.role {
                    BufferRole::Output => push(u, vec![port], bw),
                    _ => push(port, vec![u], bw),
                }
            }
        }
    }
    flows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh() -> MeshTopology {
        MeshTopology::checkerboard(8, 8, 100.0)
    }

    fn flow(id: u32, src: (u32, u32), dsts: &[(u32, u32)], demand: f64) -> Flow {
        Flow {
            id,
            src: Coord::new(src.0, src.1),
            dsts: dsts.iter().map(|&(x, y)| Coord::new(x, y)).collect(),
            demand,
        }
    }

    #[test]
    fn unicast_goes_x_then_y() {
        let r = route(&[flow(0, (0, 0), &[(2, 3)], 1.0)]);
        let l = &r[0].links;
        assert_eq!(l.len(), 5);
        assert!(l[..2].iter().all(|l| l.from.y == 0 && l.to.y == 0));
        assert!(l[2..].iter().all(|l| l.from.x == 2 && l.to.x == 2));
    }

    #[test]
    fn multicast_shares_the_common_prefix() {
        let r = route(&[flow(0, (0, 0), &[(3, 0), (3, 2)], 1.0)]);
        assert_eq!(r[0].links.len(), 5);
        let separate: usize = route(&[flow(0, (0, 0), &[(3, 0)], 1.0), flow(1, (0, 0), &[(3, 2)], 1.0)])
            .iter()
            .map(|r| r.links.len())
            .sum();
        assert_eq!(separate, 8);
    }

    #[test]
    fn self_route_is_empty() {
        assert!(route(&[flow(0, (1, 1), &[(1, 1)], 1.0)])[0].links.is_empty());
    }

    #[test]
    fn shared_link_overflow_and_throttle() {
        let flows = [flow(0, (0, 0), &[(1, 0)], 60.0), flow(1, (0, 0), &[(1, 0)], 60.0)];
        let routes = route(&flows);
        let rep = link_utilization(&routes, &mesh());
        assert!((rep.max_utilization() - 1.2).abs() < 1e-12);
        assert_eq!(rep.hotspots.len(), 1);

        let mut halved = routes.clone();
        halved.iter_mut().for_each(|r| r.throttle_weight = 0.5);
        let rep = link_utilization(&halved, &mesh());
        assert!((rep.max_utilization() - 0.6).abs() < 1e-12);
        assert!(rep.hotspots.is_empty());

        let fixed = link_utilization(&throttle(&routes, &mesh()), &mesh());
        assert!(fixed.max_utilization() <= 1.0 + 1e-12);
    }

    #[test]
    fn disjoint_routes_do_not_add_up() {
        let flows = [flow(0, (0, 0), &[(3, 0)], 50.0), flow(1, (0, 1), &[(3, 1)], 70.0)];
        let rep = link_utilization(&route(&flows), &mesh());
        assert!((rep.max_utilization() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn csv_has_a_row_per_link() {
        let routes = route(&[flow(0, (0, 0), &[(2, 0)], 10.0)]);
        let csv = route_csv(&routes, &mesh());
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("flow_id,link,demand,utilization\n0,(0,0)->(1,0),10,0.100000"));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]

        #[test]
        fn multicast_never_exceeds_unicast_sum(
            src in (0u32..8, 0u32..8),
            dsts in proptest::collection::vec((0u32..8, 0u32..8), 1..5),
        ) {
            let tree = route(&[flow(0, src, &dsts, 1.0)]).remove(0);
            let paths: Vec<Vec<Link>> = dsts
                .iter()
                .map(|&(x, y)| dor_path(Coord::new(src.0, src.1), Coord::new(x, y)))
                .collect();
            for (p, &(x, y)) in paths.iter().zip(&dsts) {
                proptest::prop_assert_eq!(p.len() as u64, Coord::new(src.0, src.1).manhattan(Coord::new(x, y)));
            }
            let sum: usize = paths.iter().map(Vec::len).sum();
            let mut shared = false;
            for i in 0..paths.len() {
                for j in i + 1..paths.len() {
                    shared |= paths[i].iter().any(|l| paths[j].contains(l));
                }
            }
            proptest::prop_assert!(tree.links.len() <= sum);
            proptest::prop_assert_eq!(tree.links.len() == sum, !shared);
            proptest::prop_assert_eq!(route(&[flow(0, src, &dsts, 1.0)]).remove(0), tree);
        }
    }
}
