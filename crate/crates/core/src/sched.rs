//! Sparse scheduling tensors and the constraint validator.
//!
//! A compute entry realises one set bit of the five-dimensional tensor
//! X[d, i, n, t, p]: tile group `i` of stage `n` in task `d` starts at
//! timeslot `t` on engine `p` and occupies it for the stage's slot
//! length. A transfer realises a run of set bits of Y[d, i, k, t, l]:
//! edge `k` moves one tile's bits over its route, spread over
//! `floor((bw-1)/BW) + 1` slots at link bandwidth `BW`.
//!
//! The validator re-checks a schedule against the constraint families:
//! tile-compute (exactly one execution inside the tile's window), tile
//! order (producers finish before consumers start), deadline (final tile
//! finishes within the task's deadline), engine capacity (no more than P
//! engines busy in any slot) and link bandwidth (per-link per-slot load
//! within BW). Violations are data, merged in a deterministic
//! (kind, slot, subject) order; an empty list certifies feasibility.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::SlaClass;
use crate::platform::PlatformConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedError {
    #[error("task {0}: final tile has no schedule entry")]
    FinalTileUnscheduled(usize),
    #[error("task {0} missing from the schedule context")]
    UnknownTask(usize),
}

/// Identity of one tile: task `d`, tile group `i`, stage `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileRef {
    pub task: usize,
    pub group: u64,
    pub stage: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComputeEntry {
    pub tile: TileRef,
    pub start: u64,
    pub engine: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComputeSchedule {
    pub entries: Vec<ComputeEntry>,
}

impl ComputeSchedule {
    pub fn entries_for(&self, tile: TileRef) -> impl Iterator<Item = &ComputeEntry> {
        self.entries.iter().filter(move |e| e.tile == tile)
    }

    /// Start slots per tile, indexed once for the validator's passes.
    fn index(&self) -> std::collections::HashMap<TileRef, Vec<u64>> {
        let mut by_tile: std::collections::HashMap<TileRef, Vec<u64>> =
            std::collections::HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            by_tile.entry(e.tile).or_default().push(e.start);
        }
        by_tile
    }
}

fn start_in_window(index: &std::collections::HashMap<TileRef, Vec<u64>>, tile: TileRef, window: (u64, u64)) -> Option<u64> {
    index
        .get(&tile)?
        .iter()
        .copied()
        .filter(|&t| t >= window.0 && t <= window.1)
        .min()
}

/// One edge transfer: tile-group `group` of edge `edge` starts on every
/// link of `route` at `start` and occupies them for the bandwidth
/// profile of `bits`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub task: usize,
    pub group: u64,
    pub edge: usize,
    pub start: u64,
    pub bits: u64,
    /// Canonical link indices on the platform.
    pub route: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommSchedule {
    pub transfers: Vec<Transfer>,
}

/// Validation-side description of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Slot length of one tile on this stage.
    pub slot_latency: u64,
    pub tiles: u64,
    /// First row of this stage in the original layer row space (H splits
    /// shift it) and that space's total row count.
    pub row_base: u64,
    pub rows_total: u64,
    /// Kernel reach in producer rows when this stage consumes.
    pub halo: u64,
    pub out_bits_per_tile: u64,
    pub weight_bits: u64,
    pub macs_per_tile: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEdge {
    pub src: usize,
    pub dst: usize,
    /// Bits one tile transfer carries.
    pub bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: usize,
    /// Stages in topological order.
    pub stages: Vec<StageSpec>,
    pub edges: Vec<StageEdge>,
    pub arrival: u64,
    /// Relative deadline in slots.
    pub deadline: u64,
    pub priority: u32,
    pub critical: bool,
    pub sla_class: SlaClass,
    /// Tile lifetime window [S, L].
    pub window: (u64, u64),
}

impl TaskSpec {
    pub fn deadline_slot(&self) -> u64 {
        self.arrival + self.deadline
    }

    pub fn final_tile(&self) -> TileRef {
        let stage = self.stages.len() - 1;
        TileRef { task: self.task, group: self.stages[stage].tiles - 1, stage }
    }

    pub fn all_tiles(&self) -> impl Iterator<Item = TileRef> + '_ {
        self.stages.iter().enumerate().flat_map(move |(n, s)| {
            (0..s.tiles).map(move |i| TileRef { task: self.task, group: i, stage: n })
        })
    }

    pub fn total_weight_bits(&self) -> u64 {
        self.stages.iter().map(|s| s.weight_bits).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleContext {
    pub tasks: BTreeMap<usize, TaskSpec>,
    /// End of the scheduling period; default tile window upper bound.
    pub period_end: u64,
}

impl ScheduleContext {
    pub fn slot_latency(&self, tile: TileRef) -> Option<u64> {
        self.tasks.get(&tile.task).and_then(|t| t.stages.get(tile.stage)).map(|s| s.slot_latency)
    }
}

/// Producer tile group that the consumer's `i`-th tile depends on, for
/// an edge `src -> dst`: the consumer row scaled into the producer row
/// space plus the consumer's kernel halo, clamped into the producer
/// part's local range.
pub fn feeder_tile(src: &StageSpec, dst: &StageSpec, i: u64) -> u64 {
    let g = dst.row_base + i;
    let scaled = if dst.rows_total == 0 {
        0
    } else {
        ((g as u128 * src.rows_total as u128) / dst.rows_total as u128) as u64
    };
    let wanted = scaled + dst.halo;
    wanted.clamp(src.row_base, src.row_base + src.tiles - 1) - src.row_base
}

/// Tile-level precedence pairs of one task: within-stage chains plus
/// cross-stage feeder dependencies.
pub fn tile_deps(spec: &TaskSpec) -> Vec<(TileRef, TileRef)> {
    let mut deps = Vec::new();
    for (n, s) in spec.stages.iter().enumerate() {
        for i in 1..s.tiles {
            deps.push((
                TileRef { task: spec.task, group: i - 1, stage: n },
                TileRef { task: spec.task, group: i, stage: n },
            ));
        }
    }
    for e in &spec.edges {
        let src = &spec.stages[e.src];
        let dst = &spec.stages[e.dst];
        for i in 0..dst.tiles {
            deps.push((
                TileRef { task: spec.task, group: feeder_tile(src, dst, i), stage: e.src },
                TileRef { task: spec.task, group: i, stage: e.dst },
            ));
        }
    }
    deps
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// Tile executed zero or more than one time inside its window.
    TileCompute { tile: TileRef, count: usize },
    /// Producer does not finish before the consumer starts.
    TileOrder { src: TileRef, dst: TileRef, src_finish: u64, dst_start: u64 },
    /// Final tile finishes after the task's deadline.
    Deadline { task: usize, finish: u64, deadline_slot: u64 },
    /// More engines busy at `t` than exist.
    EngineCapacity { t: u64, active: u64, limit: u64 },
    /// Per-link load at `t` exceeds the link bandwidth.
    LinkBandwidth { link: usize, t: u64, load: u64, cap: u64 },
}

impl Violation {
    fn sort_key(&self) -> (u8, u64, usize, u64, usize) {
        match *self {
            Violation::TileCompute { tile, .. } => (0, 0, tile.task, tile.group, tile.stage),
            Violation::TileOrder { dst, .. } => (1, dst.group, dst.task, dst.group, dst.stage),
            Violation::Deadline { task, finish, .. } => (2, finish, task, 0, 0),
            Violation::EngineCapacity { t, .. } => (3, t, 0, 0, 0),
            Violation::LinkBandwidth { link, t, .. } => (4, t, link, 0, 0),
        }
    }
}

impl PartialOrd for Violation {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Violation {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

/// Eq. 4 family: every expected tile has exactly one entry inside its
/// lifetime window.
pub fn check_tile_compute(x: &ComputeSchedule, ctx: &ScheduleContext) -> Vec<Violation> {
    let index = x.index();
    let mut out = Vec::new();
    for spec in ctx.tasks.values() {
        for tile in spec.all_tiles() {
            let count = index
                .get(&tile)
                .map(|starts| {
                    starts.iter().filter(|&&t| t >= spec.window.0 && t <= spec.window.1).count()
                })
                .unwrap_or(0);
            if count != 1 {
                out.push(Violation::TileCompute { tile, count });
            }
        }
    }
    out.sort();
    out
}

/// Eq. 5 family: for every precedence pair a < b with both sides
/// scheduled, start(a) + len(a) <= start(b).
pub fn check_tile_order(x: &ComputeSchedule, ctx: &ScheduleContext) -> Vec<Violation> {
    let index = x.index();
    let mut out = Vec::new();
    for spec in ctx.tasks.values() {
        for (a, b) in tile_deps(spec) {
            let (Some(ta), Some(tb)) = (
                start_in_window(&index, a, spec.window),
                start_in_window(&index, b, spec.window),
            ) else {
                continue; // unscheduled tiles are the compute check's concern
            };
            let len_a = spec.stages[a.stage].slot_latency;
            if ta + len_a > tb {
                out.push(Violation::TileOrder { src: a, dst: b, src_finish: ta + len_a, dst_start: tb });
            }
        }
    }
    out.sort();
    out
}

/// Eq. 6: the final tile of the task finishes within the deadline.
/// On-time means finish - arrival <= deadline.
pub fn check_deadline(x: &ComputeSchedule, spec: &TaskSpec) -> Result<Vec<Violation>, SchedError> {
    let tile = spec.final_tile();
    let start = start_in_window(&x.index(), tile, spec.window)
        .ok_or(SchedError::FinalTileUnscheduled(spec.task))?;
    let finish = start + spec.stages[tile.stage].slot_latency;
    if finish > spec.deadline_slot() {
        Ok(vec![Violation::Deadline { task: spec.task, finish, deadline_slot: spec.deadline_slot() }])
    } else {
        Ok(Vec::new())
    }
}

fn check_deadline_indexed(
    index: &std::collections::HashMap<TileRef, Vec<u64>>,
    spec: &TaskSpec,
) -> Option<Violation> {
    let tile = spec.final_tile();
    let start = start_in_window(index, tile, spec.window)?;
    let finish = start + spec.stages[tile.stage].slot_latency;
    (finish > spec.deadline_slot()).then_some(Violation::Deadline {
        task: spec.task,
        finish,
        deadline_slot: spec.deadline_slot(),
    })
}

/// Eq. 7: at every slot, the number of active entries (spans counted)
/// must not exceed the engine count.
pub fn check_engine_capacity(
    x: &ComputeSchedule,
    engine_count: u64,
    ctx: &ScheduleContext,
) -> Vec<Violation> {
    let mut active: BTreeMap<u64, u64> = BTreeMap::new();
    for e in &x.entries {
        let len = ctx.slot_latency(e.tile).unwrap_or(1);
        for t in e.start..e.start + len {
            *active.entry(t).or_default() += 1;
        }
    }
    let mut out: Vec<Violation> = active
        .into_iter()
        .filter(|&(_, a)| a > engine_count)
        .map(|(t, a)| Violation::EngineCapacity { t, active: a, limit: engine_count })
        .collect();
    out.sort();
    out
}

/// Eqs. 9 and 11: the per-slot bandwidth profile of a `bw`-bit transfer
/// over a link of capacity `cap`. `R = floor((bw-1)/cap)` full-bandwidth
/// slots followed by the remainder `bw - R*cap` (the exact-multiple case
/// sends a full slot rather than zero bits).
pub fn bandwidth_profile(bw: u64, cap: u64) -> Vec<u64> {
    let r = (bw - 1) / cap;
    let mut profile = vec![cap; r as usize];
    profile.push(bw - r * cap);
    profile
}

/// Eq. 8: per-link, per-slot load summed over active transfer profiles
/// stays within the link bandwidth.
pub fn check_link_bandwidth(y: &CommSchedule, platform: &PlatformConfig) -> Vec<Violation> {
    let cap = platform.link_bw;
    let mut load: BTreeMap<(usize, u64), u64> = BTreeMap::new();
    for tr in &y.transfers {
        let profile = bandwidth_profile(tr.bits, cap);
        for &link in &tr.route {
            for (off, &units) in profile.iter().enumerate() {
                *load.entry((link, tr.start + off as u64)).or_default() += units;
            }
        }
    }
    let mut out: Vec<Violation> = load
        .into_iter()
        .filter(|&(_, l)| l > cap)
        .map(|((link, t), l)| Violation::LinkBandwidth { link, t, load: l, cap })
        .collect();
    out.sort();
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Manhattan communication cost per task (sum of route hops over
    /// distinct edges).
    pub comm_cost: BTreeMap<usize, u64>,
}

impl ValidationReport {
    pub fn feasible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Run every constraint family and report the merged violation list plus
/// per-task communication cost metadata.
pub fn validate_all(
    x: &ComputeSchedule,
    y: &CommSchedule,
    ctx: &ScheduleContext,
    platform: &PlatformConfig,
) -> ValidationReport {
    let mut violations = check_tile_compute(x, ctx);
    violations.extend(check_tile_order(x, ctx));
    let index = x.index();
    for spec in ctx.tasks.values() {
        // an unscheduled final tile is already a TileCompute violation
        violations.extend(check_deadline_indexed(&index, spec));
    }
    violations.extend(check_engine_capacity(x, platform.engine_count() as u64, ctx));
    violations.extend(check_link_bandwidth(y, platform));
    violations.sort();

    let mut comm_cost: BTreeMap<usize, u64> = BTreeMap::new();
    let mut seen_edges = std::collections::BTreeSet::new();
    for tr in &y.transfers {
        if seen_edges.insert((tr.task, tr.edge)) {
            *comm_cost.entry(tr.task).or_default() += tr.route.len() as u64;
        }
    }
    for task in ctx.tasks.keys() {
        comm_cost.entry(*task).or_default();
    }

    ValidationReport { violations, comm_cost }
}

/// Finish slot of each task as implied by the compute schedule alone.
pub fn implied_finish_times(x: &ComputeSchedule, ctx: &ScheduleContext) -> BTreeMap<usize, u64> {
    let mut out = BTreeMap::new();
    for e in &x.entries {
        if let Some(len) = ctx.slot_latency(e.tile) {
            let finish = e.start + len;
            let cur = out.entry(e.tile.task).or_insert(0);
            *cur = (*cur).max(finish);
        }
    }
    out
}

/// Per-engine instruction streams and per-link transfer streams derived
/// from the two schedules.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTable {
    /// engine -> ordered (slot, tile) pairs.
    pub engine_streams: BTreeMap<usize, Vec<(u64, TileRef)>>,
    /// link -> ordered (slot, (task, group, edge), units) records.
    pub link_streams: BTreeMap<usize, Vec<(u64, (usize, u64, usize), u64)>>,
}

impl ScheduleTable {
    pub fn build(x: &ComputeSchedule, y: &CommSchedule, platform: &PlatformConfig) -> Self {
        let mut engine_streams: BTreeMap<usize, Vec<(u64, TileRef)>> = BTreeMap::new();
        for e in &x.entries {
            engine_streams.entry(e.engine).or_default().push((e.start, e.tile));
        }
        for stream in engine_streams.values_mut() {
            stream.sort_unstable();
        }
        let mut link_streams: BTreeMap<usize, Vec<(u64, (usize, u64, usize), u64)>> =
            BTreeMap::new();
        for tr in &y.transfers {
            let profile = bandwidth_profile(tr.bits, platform.link_bw);
            for &link in &tr.route {
                let stream = link_streams.entry(link).or_default();
                for (off, &units) in profile.iter().enumerate() {
                    stream.push((tr.start + off as u64, (tr.task, tr.group, tr.edge), units));
                }
            }
        }
        for stream in link_streams.values_mut() {
            stream.sort_unstable();
        }
        Self { engine_streams, link_streams }
    }

    /// Line-oriented text form, one record per entry, stable field order:
    /// `C d i n t p` for compute, `Y d i k t l` for communication.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        for (&engine, stream) in &self.engine_streams {
            for &(t, tile) in stream {
                lines.push(format!("C {} {} {} {} {}", tile.task, tile.group, tile.stage, t, engine));
            }
        }
        for (&link, stream) in &self.link_streams {
            for &(t, (task, group, edge), _) in stream {
                lines.push(format!("Y {} {} {} {} {}", task, group, edge, t, link));
            }
        }
        lines.sort();
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}
