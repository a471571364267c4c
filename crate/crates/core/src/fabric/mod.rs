//! On-chip mechanics: mesh placement, dimension-order routing with multicast,
//! link congestion, packet reordering, diagonal banking and range predication.

mod memory;
mod route;

pub use memory::{
    check_ranges, diagonal_bank_address, predicate_partition, reorder_stream, Packet, ReorderOutput, Reorderer,
};
pub use route::{
    kernel_flows, link_utilization, route, route_csv, throttle, Flow, FlowRoute, Link, LinkLoad, LinkReport,
};

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::TileConfig;
use crate::error::{Error, Result};
use crate::fusion::{BufferRole, FusedKernel, FusionPlan};

/// Mesh site coordinate: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: u32,
    pub y: u32,
}

impl Coord {
    pub const fn new(x: u32, y: u32) -> Self {
        Coord { x, y }
    }

    pub fn manhattan(self, other: Coord) -> u64 {
        (self.x.abs_diff(other.x) + self.y.abs_diff(other.y)) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SiteKind {
    Pcu,
    Pmu,
    Agcu,
}

/// A 2-D mesh of switches, each hosting one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshTopology {
    pub rows: u32,
    pub cols: u32,
    /// Vector-fabric bandwidth of each directed link, bytes/s.
    pub link_bw: f64,
    sites: Vec<SiteKind>,
}

impl MeshTopology {
    /// Alternating compute and memory units, compute at even `x + y`.
    pub fn checkerboard(rows: u32, cols: u32, link_bw: f64) -> Self {
        let sites = (0..rows * cols)
            .map(|i| {
                let (x, y) = (i % cols, i / cols);
                if (x + y) % 2 == 0 {
                    SiteKind::Pcu
                } else {
                    SiteKind::Pmu
                }
            })
            .collect();
        MeshTopology {
            rows,
            cols,
            link_bw,
            sites,
        }
    }

    /// Checkerboard interior with address-generation ports on the edge columns.
    pub fn with_edge_ports(rows: u32, cols: u32, link_bw: f64) -> Self {
        let mut m = Self::checkerboard(rows, cols, link_bw);
        for y in 0..rows {
            for x in [0, cols - 1] {
                m.sites[(y * cols + x) as usize] = SiteKind::Agcu;
            }
        }
        // keep the interior balanced between compute and memory
        for y in 0..rows {
            for x in 1..cols.saturating_sub(1) {
                m.sites[(y * cols + x) as usize] = if (x - 1 + y) % 2 == 0 {
                    SiteKind::Pcu
                } else {
                    SiteKind::Pmu
                };
            }
        }
        m
    }

    pub fn from_tile(tile: &TileConfig) -> Self {
        Self::with_edge_ports(tile.mesh_rows, tile.mesh_cols, tile.link_bw)
    }

    pub fn kind(&self, c: Coord) -> SiteKind {
        self.sites[(c.y * self.cols + c.x) as usize]
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.x < self.cols && c.y < self.rows
    }

    pub fn count(&self, kind: SiteKind) -> usize {
        self.sites.iter().filter(|&&k| k == kind).count()
    }

    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.rows).flat_map(move |y| (0..self.cols).map(move |x| Coord::new(x, y)))
    }

    fn neighbors(&self, c: Coord) -> impl Iterator<Item = Coord> + '_ {
        let (x, y) = (c.x as i64, c.y as i64);
        [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)]
            .into_iter()
            .filter(move |&(a, b)| a >= 0 && b >= 0 && a < self.cols as i64 && b < self.rows as i64)
            .map(|(a, b)| Coord::new(a as u32, b as u32))
    }
}

/// One physical unit of a plan entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedUnit {
    /// Stage operator id or buffer tensor id.
    pub entity: String,
    pub kind: SiteKind,
    pub unit: u32,
    pub site: Coord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub units: Vec<PlacedUnit>,
    pub wirelength: u64,
}

impl Placement {
    pub fn sites_of<'a>(&'a self, entity: &'a str, kind: SiteKind) -> impl Iterator<Item = Coord> + 'a {
        self.units
            .iter()
            .filter(move |u| u.entity == entity && u.kind == kind)
            .map(|u| u.site)
    }
}

/// Total Manhattan length of all buffer-unit to stage-unit and port to
/// buffer-unit connections of a kernel.
pub fn wirelength(k: &FusedKernel, p: &Placement) -> u64 {
    let mut total = 0;
    for b in &k.buffers {
        let units: Vec<Coord> = p.sites_of(&b.tensor, SiteKind::Pmu).collect();
        let stages = b.producer.iter().chain(&b.consumers);
        for s in stages {
            for pcu in p.sites_of(s, SiteKind::Pcu) {
                total += units.iter().map(|&u| u.manhattan(pcu)).sum::<u64>();
            }
        }
        for port in p.sites_of(&b.tensor, SiteKind::Agcu) {
            total += units.iter().map(|&u| u.manhattan(port)).sum::<u64>();
        }
    }
    total
}

struct Pending {
    entity: String,
    kind: SiteKind,
    units: u32,
    /// Indices into the pending list this entity connects to, with weights.
    links: Vec<(usize, f64)>,
}

/// Places one kernel on the mesh with a seeded greedy breadth-first heuristic.
///
/// Entities are visited in pipeline order (a stage's input buffers, the
/// stage, then its outputs). Each unit goes to the free site of its kind that
/// minimizes weighted distance to the centroids of already-placed neighbors,
/// searching outward from that centroid; equal-cost sites are broken by the seed.
pub fn place_kernel(k: &FusedKernel, mesh: &MeshTopology, seed: u64) -> Result<Placement> {
    let mut ents = Entities {
        kernel: k,
        use_ports: mesh.count(SiteKind::Agcu) > 0,
        order: Vec::new(),
        index: HashMap::new(),
    };
    for s in &k.stages {
        let ins: Vec<usize> = (0..k.buffers.len())
            .filter(|&b| k.buffers[b].consumers.contains(&s.op))
            .map(|b| ents.buffer(b))
            .collect();
        let si = ents.add(&s.op, SiteKind::Pcu, s.pcu_alloc);
        for bi in ins {
            ents.connect(bi, si);
        }
        for b in 0..k.buffers.len() {
            if k.buffers[b].producer.as_deref() == Some(s.op.as_str()) {
                let bi = ents.buffer(b);
                ents.connect(bi, si);
            }
        }
    }
    // stage-less kernels (a lone folded transpose) still place their buffers
    for b in 0..k.buffers.len() {
        ents.buffer(b);
    }
    let order = ents.order;

    for kind in [SiteKind::Pcu, SiteKind::Pmu, SiteKind::Agcu] {
        let need: u32 = order.iter().filter(|e| e.kind == kind).map(|e| e.units).sum();
        let have = mesh.count(kind);
        if need as usize > have {
            return Err(Error::infeasible(format!(
                "placement needs {need} {kind:?} sites, mesh has {have}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = vec![false; (mesh.rows * mesh.cols) as usize];
    let mut placed: Vec<Vec<Coord>> = vec![Vec::new(); order.len()];
    let center = Coord::new(mesh.cols / 2, mesh.rows / 2);
    let mut units = Vec::new();
    for e in 0..order.len() {
        for unit in 0..order[e].units {
            let anchors: Vec<(f64, f64, f64)> = order[e]
                .links
                .iter()
                .filter(|(j, _)| !placed[*j].is_empty())
                .map(|&(j, w)| {
                    let n = placed[j].len() as f64;
                    let cx = placed[j].iter().map(|c| c.x as f64).sum::<f64>() / n;
                    let cy = placed[j].iter().map(|c| c.y as f64).sum::<f64>() / n;
                    (cx, cy, w * n)
                })
                .collect();
            let start = if anchors.is_empty() {
                placed[e].last().copied().unwrap_or(center)
            } else {
                let w: f64 = anchors.iter().map(|a| a.2).sum();
                let cx = anchors.iter().map(|a| a.0 * a.2).sum::<f64>() / w;
                let cy = anchors.iter().map(|a| a.1 * a.2).sum::<f64>() / w;
                Coord::new(cx.round() as u32, cy.round() as u32)
            };
            let cost = |c: Coord| -> f64 {
                if anchors.is_empty() {
                    c.manhattan(start) as f64
                } else {
                    anchors
                        .iter()
                        .map(|&(x, y, w)| w * ((c.x as f64 - x).abs() + (c.y as f64 - y).abs()))
                        .sum()
                }
            };
            let site =
                nearest_free(mesh, &taken, start, order[e].kind, cost, &mut rng).expect("site counts checked above");
            taken[(site.y * mesh.cols + site.x) as usize] = true;
            placed[e].push(site);
            units.push(PlacedUnit {
                entity: order[e].entity.clone(),
                kind: order[e].kind,
                unit,
                site,
            });
        }
    }
    let mut p = Placement { units, wirelength: 0 };
    p.wirelength = wirelength(k, &p);
    Ok(p)
}

struct Entities<'a> {
    kernel: &'a FusedKernel,
    use_ports: bool,
    order: Vec<Pending>,
    index: HashMap<(String, SiteKind), usize>,
}

impl Entities<'_> {
    fn add(&mut self, entity: &str, kind: SiteKind, units: u32) -> usize {
        if let Some(&i) = self.index.get(&(entity.to_string(), kind)) {
            return i;
        }
        self.order.push(Pending {
            entity: entity.to_string(),
            kind,
            units,
            links: Vec::new(),
        });
        self.index.insert((entity.to_string(), kind), self.order.len() - 1);
        self.order.len() - 1
    }

    fn buffer(&mut self, b: usize) -> usize {
        let buf = &self.kernel.buffers[b];
        let fresh = !self.index.contains_key(&(buf.tensor.clone(), SiteKind::Pmu));
        let bi = self.add(&buf.tensor, SiteKind::Pmu, buf.pmu_alloc);
        if fresh && self.use_ports && buf.role != BufferRole::Intermediate {
            let pi = self.add(&buf.tensor, SiteKind::Agcu, 1);
            self.connect(bi, pi);
        }
        bi
    }

    fn connect(&mut self, a: usize, b: usize) {
        self.order[a].links.push((b, 1.0));
        self.order[b].links.push((a, 1.0));
    }
}

/// Breadth-first search from `start` over the mesh; among the free sites of
/// `kind` in the first two rings that contain any, picks the cheapest.
fn nearest_free(
    mesh: &MeshTopology,
    taken: &[bool],
    start: Coord,
    kind: SiteKind,
    cost: impl Fn(Coord) -> f64,
    rng: &mut ChaCha8Rng,
) -> Option<Coord> {
    let mut seen = vec![false; taken.len()];
    let mut queue = VecDeque::from([(start, 0u64)]);
    seen[(start.y * mesh.cols + start.x) as usize] = true;
    let mut found: Vec<Coord> = Vec::new();
    let mut first_ring = None;
    while let Some((c, d)) = queue.pop_front() {
        if first_ring.is_some_and(|r| d > r + 1) {
            break;
        }
        let i = (c.y * mesh.cols + c.x) as usize;
        if !taken[i] && mesh.kind(c) == kind {
            first_ring.get_or_insert(d);
            found.push(c);
        }
        for n in mesh.neighbors(c) {
            let j = (n.y * mesh.cols + n.x) as usize;
            if !seen[j] {
                seen[j] = true;
                queue.push_back((n, d + 1));
            }
        }
    }
    found.shuffle(rng);
    found.into_iter().min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
}

/// Places every kernel of a plan; kernels run one at a time so each gets the whole mesh.
pub fn place(plan: &FusionPlan, mesh: &MeshTopology, seed: u64) -> Result<Vec<Placement>> {
    plan.kernels.iter().map(|k| place_kernel(k, mesh, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::sn40l_tile;
    use crate::fixtures;
    use crate::fusion::{plan_fusion, FusionPolicy};

    #[test]
    fn sn40l_mesh_has_every_unit() {
        let tile = sn40l_tile();
        let m = MeshTopology::from_tile(&tile);
        assert_eq!(m.count(SiteKind::Pcu), tile.pcu_count as usize);
        assert_eq!(m.count(SiteKind::Pmu), tile.pmu_count as usize);
        assert_eq!(m.count(SiteKind::Agcu), 2 * tile.mesh_rows as usize);
    }

    #[test]
    fn monarch_places_deterministically() {
        let g = fixtures::monarch();
        let tile = sn40l_tile();
        let plan = plan_fusion(&g, &tile, &FusionPolicy::Maximal).unwrap();
        let mesh = MeshTopology::from_tile(&tile);
        let a = place(&plan, &mesh, 7).unwrap();
        let b = place(&plan, &mesh, 7).unwrap();
        assert_eq!(a, b);
        let mut sites: Vec<Coord> = a[0].units.iter().map(|u| u.site).collect();
        let n = sites.len();
        sites.sort();
        sites.dedup();
        assert_eq!(sites.len(), n, "placement must be injective");
        for u in &a[0].units {
            assert_eq!(mesh.kind(u.site), u.kind);
        }
    }
}
