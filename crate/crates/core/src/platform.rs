//! Engine mesh and NoC link model.
//!
//! Engines sit on a `mesh_w x mesh_h` grid; links connect Manhattan
//! neighbours and are modeled directionally (a->b and b->a are distinct),
//! so a bidirectional mesh has `2 * (2*W*H - W - H)` links. Routing is
//! dimension-ordered (X then Y), which realises the Manhattan-distance
//! communication cost exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::TaskDag;
use crate::tile::EngineSpec;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlatformError {
    #[error("node {0} has no placement")]
    UnplacedNode(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EngineCoord {
    pub x: u32,
    pub y: u32,
}

impl EngineCoord {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// A directed mesh link between two neighbouring engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId {
    pub from: EngineCoord,
    pub to: EngineCoord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformConfig {
    pub mesh_w: u32,
    pub mesh_h: u32,
    pub engine: EngineSpec,
    /// Link bandwidth, bits per timeslot.
    pub link_bw: u64,
    /// Weight-reload path bandwidth, bits per timeslot.
    pub reconfig_bw: u64,
    /// DRAM bandwidth, bits per timeslot (activation spills, LTS staging).
    pub dram_bw: u64,
    pub hop_energy_pj_per_bit: f64,
    pub dram_energy_pj_per_bit: f64,
    pub mac_energy_pj: f64,
    /// Bits per activation element on inter-engine transfers.
    pub act_bits: u64,
    /// Per-engine buffer capacity in storage elements, gating layer
    /// concatenation and split-axis selection.
    pub engine_buffer: u64,
}

impl PlatformConfig {
    /// Edge preset: 64 MACs per engine at 700 MHz.
    pub fn edge() -> Self {
        Self::preset(128, 128, 64)
    }

    /// Cloud preset: 128 MACs per engine at 700 MHz.
    pub fn cloud() -> Self {
        Self::preset(128, 128, 128)
    }

    /// Desk-scale preset on a small mesh, 64 MACs per engine.
    pub fn desk(mesh_w: u32, mesh_h: u32) -> Self {
        Self::preset(mesh_w, mesh_h, 64)
    }

    fn preset(mesh_w: u32, mesh_h: u32, pe_count: u64) -> Self {
        Self {
            mesh_w,
            mesh_h,
            engine: EngineSpec { pe_count, clock_hz: 700e6 },
            link_bw: 512,
            reconfig_bw: 512,
            dram_bw: 256,
            hop_energy_pj_per_bit: 0.64,
            dram_energy_pj_per_bit: 8.0,
            mac_energy_pj: 1.0,
            act_bits: 8,
            engine_buffer: 1 << 16,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "edge" => Some(Self::edge()),
            "cloud" => Some(Self::cloud()),
            "desk4" => Some(Self::desk(4, 4)),
            "desk8" => Some(Self::desk(8, 8)),
            _ => None,
        }
    }

    pub fn engine_count(&self) -> usize {
        self.mesh_w as usize * self.mesh_h as usize
    }

    pub fn contains(&self, c: EngineCoord) -> bool {
        c.x < self.mesh_w && c.y < self.mesh_h
    }

    pub fn coord_of(&self, index: usize) -> EngineCoord {
        EngineCoord::new((index % self.mesh_w as usize) as u32, (index / self.mesh_w as usize) as u32)
    }

    pub fn index_of(&self, c: EngineCoord) -> usize {
        c.y as usize * self.mesh_w as usize + c.x as usize
    }

    pub fn neighbors(&self, c: EngineCoord) -> Vec<EngineCoord> {
        let mut out = Vec::with_capacity(4);
        if c.x > 0 {
            out.push(EngineCoord::new(c.x - 1, c.y));
        }
        if c.x + 1 < self.mesh_w {
            out.push(EngineCoord::new(c.x + 1, c.y));
        }
        if c.y > 0 {
            out.push(EngineCoord::new(c.x, c.y - 1));
        }
        if c.y + 1 < self.mesh_h {
            out.push(EngineCoord::new(c.x, c.y + 1));
        }
        out
    }

    /// All directed links, ordered by (from, to) linear indices; the
    /// position in this list is the link's canonical index.
    pub fn links(&self) -> Vec<LinkId> {
        let mut links = Vec::new();
        for i in 0..self.engine_count() {
            let from = self.coord_of(i);
            for to in self.neighbors(from) {
                links.push(LinkId { from, to });
            }
        }
        links.sort_by_key(|l| (self.index_of(l.from), self.index_of(l.to)));
        links
    }

    pub fn link_index(&self, link: LinkId) -> Option<usize> {
        // neighbours only
        if manhattan_distance(link.from, link.to) != 1
            || !self.contains(link.from)
            || !self.contains(link.to)
        {
            return None;
        }
        self.links().binary_search_by_key(
            &(self.index_of(link.from), self.index_of(link.to)),
            |l| (self.index_of(l.from), self.index_of(l.to)),
        ).ok()
    }

    pub fn is_valid_link(&self, link: LinkId) -> bool {
        self.contains(link.from)
            && self.contains(link.to)
            && manhattan_distance(link.from, link.to) == 1
    }
}

pub fn manhattan_distance(a: EngineCoord, b: EngineCoord) -> u64 {
    (a.x.abs_diff(b.x) + a.y.abs_diff(b.y)) as u64
}

/// Dimension-ordered route from `a` to `b`: first along x, then along y.
pub fn xy_route(a: EngineCoord, b: EngineCoord) -> Vec<LinkId> {
    let mut route = Vec::with_capacity(manhattan_distance(a, b) as usize);
    let mut cur = a;
    while cur.x != b.x {
        let next = EngineCoord::new(if b.x > cur.x { cur.x + 1 } else { cur.x - 1 }, cur.y);
        route.push(LinkId { from: cur, to: next });
        cur = next;
    }
    while cur.y != b.y {
        let next = EngineCoord::new(cur.x, if b.y > cur.y { cur.y + 1 } else { cur.y - 1 });
        route.push(LinkId { from: cur, to: next });
        cur = next;
    }
    route
}

/// Total communication cost of a placed DAG: the sum of Manhattan
/// distances over all edges.
pub fn dag_comm_cost(
    placements: &std::collections::HashMap<usize, EngineCoord>,
    dag: &TaskDag,
) -> Result<u64, PlatformError> {
    let mut cost = 0u64;
    for &(src, dst) in &dag.edges {
        let a = placements.get(&src).ok_or(PlatformError::UnplacedNode(src))?;
        let b = placements.get(&dst).ok_or(PlatformError::UnplacedNode(dst))?;
        cost += manhattan_distance(*a, *b);
    }
    Ok(cost)
}
