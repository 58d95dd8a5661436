//! Layer Concatenate and Split: balance per-stage tile latencies before
//! mapping.
//!
//! A task DAG becomes a pipeline of segments, one stage per
//! compute-bearing layer in topological order, with elementwise layers
//! fused into their predecessor. Balancing triggers when the coefficient
//! of variation of stage latencies exceeds a threshold (15% by default)
//! and then greedily applies the best of:
//!
//!   - concatenating a chain-linked pair of small segments whose merged
//!     buffer need fits the engine buffer, or
//!   - splitting the maximum-latency segment in two, along W when the
//!     buffer allows (H keeps per-tile latency, so it never wins the
//!     CV comparison), falling back to the channel axis otherwise.
//!
//! Channel splits produce partial sums and are flagged
//! `needs_accumulation`. Every accepted move strictly decreases the CV;
//! the loop stops at the threshold, at a fixed point, or after
//! `4 * initial_len` moves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{LayerKind, TaskDag};
use crate::tile::{self, EngineSpec, LatencyTable};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LcsError {
    #[error("empty input")]
    EmptyInput,
    #[error("zero mean")]
    ZeroMean,
    #[error("segment contains a non-conv member (layer {0})")]
    UnsupportedKind(usize),
    #[error("elementwise layer {0} has no predecessor to fuse into")]
    LeadingElementwise(usize),
    #[error("task {0} has no compute-bearing layer")]
    NoComputeLayer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitAxis {
    H,
    W,
    C,
}

/// A layer, or a split part of one, carried by a pipeline segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePart {
    pub layer_id: usize,
    /// Dimensions after any splits applied to this part.
    pub kind: LayerKind,
    /// Tiles (output rows) this part emits.
    pub tiles: u64,
    /// First row of this part in the layer's original row space.
    pub row_base: u64,
    /// Row count of the original, unsplit layer.
    pub rows_total: u64,
    pub fill_cycles: u64,
    /// Latency override carried from the external cost table, if any;
    /// scaled proportionally on splits.
    pub override_cycles: Option<u64>,
    pub weight_bits: u64,
    pub needs_accumulation: bool,
    /// Elementwise layers fused into this part (zero added latency).
    pub fused_elementwise: Vec<usize>,
}

impl StagePart {
    pub fn tile_cycles(&self, engine: &EngineSpec) -> u64 {
        if let Some(c) = self.override_cycles {
            return c.max(1);
        }
        let macs = match self.kind {
            LayerKind::Conv(d) => d.w_o * d.c_o * d.k_h * d.k_w * d.c_in,
            LayerKind::MatMul(d) => d.n_k * d.heads * d.d_k,
            LayerKind::Elementwise => 0,
        };
        macs.div_ceil(engine.pe_count) + self.fill_cycles
    }

    pub fn tile_macs(&self) -> u64 {
        match self.kind {
            LayerKind::Conv(d) => d.w_o * d.c_o * d.k_h * d.k_w * d.c_in,
            LayerKind::MatMul(d) => d.n_k * d.heads * d.d_k,
            LayerKind::Elementwise => 0,
        }
    }

    /// Output bits of one tile leaving this part.
    pub fn tile_out_bits(&self, act_bits: u64) -> u64 {
        match self.kind {
            LayerKind::Conv(d) => d.w_o * d.c_o * act_bits,
            LayerKind::MatMul(d) => d.n_k * d.heads * act_bits,
            LayerKind::Elementwise => 0,
        }
    }

    /// Kernel reach in producer rows when this part consumes.
    pub fn halo(&self) -> u64 {
        match self.kind {
            LayerKind::Conv(d) => (d.k_h - 1).div_ceil(2),
            _ => 0,
        }
    }
}

/// A pipeline stage: a contiguous run of parts executed on one engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub seg_id: usize,
    pub members: Vec<StagePart>,
}

impl Segment {
    /// Per-tile latency of the stage in slots: the sum of member tile
    /// slot-lengths.
    pub fn stage_latency(&self, engine: &EngineSpec, base: u64) -> u64 {
        self.members.iter().map(|m| tile::slots_for(m.tile_cycles(engine), base)).sum()
    }

    /// Tiles this stage emits downstream (its last member's rows).
    pub fn tiles(&self) -> u64 {
        self.members.last().map_or(1, |m| m.tiles)
    }

    pub fn weight_bits(&self) -> u64 {
        self.members.iter().map(|m| m.weight_bits).sum()
    }

    pub fn tile_macs(&self) -> u64 {
        self.members.iter().map(|m| m.tile_macs()).sum()
    }

    pub fn all_conv(&self) -> bool {
        self.members.iter().all(|m| matches!(m.kind, LayerKind::Conv(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuterAxis {
    H,
    W,
}

/// Minimal buffer need of a segment under a ping-pong double-buffered
/// dataflow with the given outer loop axis:
///
///   outer H: sum(K_h * W_o * C_in) + 2 * max(K_h * K_w * C_in)
///   outer W: sum(K_h * H_o * C_in) + 2 * max(K_h * K_w * C_in)
pub fn buffer_size(seg: &Segment, outer: OuterAxis) -> Result<u64, LcsError> {
    let mut fmap = 0u64;
    let mut wmax = 0u64;
    for m in &seg.members {
        let d = match m.kind {
            LayerKind::Conv(d) => d,
            _ => return Err(LcsError::UnsupportedKind(m.layer_id)),
        };
        fmap += match outer {
            OuterAxis::H => d.k_h * d.w_o * d.c_in,
            OuterAxis::W => d.k_h * d.h_o * d.c_in,
        };
        wmax = wmax.max(d.k_h * d.k_w * d.c_in);
    }
    Ok(fmap + 2 * wmax)
}

/// Population coefficient of variation, sigma / mu.
pub fn coefficient_of_variation(stage_latencies: &[u64]) -> Result<f64, LcsError> {
    if stage_latencies.is_empty() {
        return Err(LcsError::EmptyInput);
    }
    let n = stage_latencies.len() as f64;
    let mean = stage_latencies.iter().map(|&v| v as f64).sum::<f64>() / n;
    if mean == 0.0 {
        return Err(LcsError::ZeroMean);
    }
    let var = stage_latencies
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(var.sqrt() / mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub task_id: usize,
    pub segments: Vec<Segment>,
    /// Data-dependency edges between segment indices.
    pub edges: Vec<(usize, usize)>,
    pub base: u64,
    pub engine: EngineSpec,
}

impl Pipeline {
    pub fn stage_latencies(&self) -> Vec<u64> {
        self.segments.iter().map(|s| s.stage_latency(&self.engine, self.base)).collect()
    }

    pub fn cv(&self) -> Result<f64, LcsError> {
        coefficient_of_variation(&self.stage_latencies())
    }

    /// Total MAC count over all stages; exactly conserved by balancing.
    pub fn total_macs(&self) -> u64 {
        self.segments
            .iter()
            .map(|s| s.members.iter().map(|m| m.tile_macs() * m.tiles).sum::<u64>())
            .sum()
    }

    fn renumber(&mut self) {
        for (i, s) in self.segments.iter_mut().enumerate() {
            s.seg_id = i;
        }
        self.edges.sort_unstable();
        self.edges.dedup();
    }

    fn preds(&self, seg: usize) -> Vec<usize> {
        self.edges.iter().filter(|&&(_, d)| d == seg).map(|&(s, _)| s).collect()
    }

    fn succs(&self, seg: usize) -> Vec<usize> {
        self.edges.iter().filter(|&&(s, _)| s == seg).map(|&(_, d)| d).collect()
    }
}

/// Build the initial pipeline from a task DAG: one segment per
/// compute-bearing layer in deterministic topological order, elementwise
/// layers fused into their last predecessor's segment.
pub fn build_pipeline(
    dag: &TaskDag,
    engine: &EngineSpec,
    base: u64,
    table: Option<&LatencyTable>,
) -> Result<Pipeline, LcsError> {
    let order = crate::graph::topo_sort(dag).map_err(|_| LcsError::NoComputeLayer(dag.task_id))?;
    let mut seg_of_layer: Vec<Option<usize>> = vec![None; dag.nodes.len()];
    let mut segments: Vec<Segment> = Vec::new();

    for &layer_id in &order {
        let node = &dag.nodes[layer_id];
        match node.kind {
            LayerKind::Elementwise => {
                // fuse into the last predecessor's segment
                let host = dag
                    .edges
                    .iter()
                    .filter(|&&(_, d)| d == layer_id)
                    .filter_map(|&(s, _)| seg_of_layer[s])
                    .max()
                    .ok_or(LcsError::LeadingElementwise(layer_id))?;
                segments[host]
                    .members
                    .last_mut()
                    .expect("segment has a member")
                    .fused_elementwise
                    .push(layer_id);
                seg_of_layer[layer_id] = Some(host);
            }
            _ => {
                let tiles = tile::tiles_of_layer(node).map_err(|_| LcsError::NoComputeLayer(dag.task_id))?;
                let part = StagePart {
                    layer_id,
                    kind: node.kind,
                    tiles,
                    row_base: 0,
                    rows_total: tiles,
                    fill_cycles: node.fill_override.unwrap_or_else(|| tile::default_fill(node)),
                    override_cycles: table.and_then(|t| t.cycles_by_layer.get(&layer_id).copied()),
                    weight_bits: node.weight_bits,
                    needs_accumulation: false,
                    fused_elementwise: Vec::new(),
                };
                let seg_id = segments.len();
                segments.push(Segment { seg_id, members: vec![part] });
                seg_of_layer[layer_id] = Some(seg_id);
            }
        }
    }
    if segments.is_empty() {
        return Err(LcsError::NoComputeLayer(dag.task_id));
    }

    let mut edges = Vec::new();
    for &(src, dst) in &dag.edges {
        let (a, b) = (seg_of_layer[src].unwrap(), seg_of_layer[dst].unwrap());
        if a != b {
            edges.push((a, b));
        }
    }
    let mut p = Pipeline { task_id: dag.task_id, segments, edges, base, engine: *engine };
    p.renumber();
    Ok(p)
}

/// One balancing move.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Move {
    Concat { a: usize, b: usize },
    Split(SplitPlan),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seg: usize,
    /// Layer whose axis is divided (the segment's first member).
    pub layer_id: usize,
    pub axis: SplitAxis,
    pub parts: u32,
    pub needs_accumulation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub applied: Move,
    pub cv_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub cv_before: f64,
    pub cv_after: f64,
    pub latencies_before: Vec<u64>,
    pub latencies_after: Vec<u64>,
    pub moves: Vec<MoveRecord>,
    /// True when the loop stopped because no move improved the CV.
    pub fixed_point: bool,
    pub threshold: f64,
}

fn div_axis(extent: u64) -> (u64, u64) {
    let hi = extent.div_ceil(2);
    (hi, extent - hi)
}

fn split_part(part: &StagePart, axis: SplitAxis) -> Option<(StagePart, StagePart)> {
    let mut p1 = part.clone();
    let mut p2 = part.clone();
    match (&mut p1.kind, &mut p2.kind, axis) {
        (LayerKind::Conv(d1), LayerKind::Conv(d2), SplitAxis::W) => {
            if d1.w_o < 2 {
                return None;
            }
            let (hi, lo) = div_axis(d1.w_o);
            d1.w_o = hi;
            d2.w_o = lo;
        }
        (LayerKind::Conv(d1), LayerKind::Conv(d2), SplitAxis::C) => {
            if d1.c_in < 2 {
                return None;
            }
            let (hi, lo) = div_axis(d1.c_in);
            d1.c_in = hi;
            d2.c_in = lo;
            p1.needs_accumulation = true;
            p2.needs_accumulation = true;
        }
        (LayerKind::Conv(d1), LayerKind::Conv(d2), SplitAxis::H) => {
            if part.tiles < 2 {
                return None;
            }
            let (hi, lo) = div_axis(part.tiles);
            d1.h_o = hi;
            d2.h_o = lo;
            p1.tiles = hi;
            p2.tiles = lo;
            p2.row_base = part.row_base + hi;
        }
        (LayerKind::MatMul(_), LayerKind::MatMul(_), SplitAxis::H) => {
            if part.tiles < 2 {
                return None;
            }
            let (hi, lo) = div_axis(part.tiles);
            p1.tiles = hi;
            p2.tiles = lo;
            p2.row_base = part.row_base + hi;
        }
        _ => return None,
    }
    if let Some(c) = part.override_cycles {
        match axis {
            SplitAxis::H => {}
            _ => {
                p1.override_cycles = Some(c.div_ceil(2).max(1));
                p2.override_cycles = Some((c / 2).max(1));
            }
        }
    }
    Some((p1, p2))
}

fn apply_split(p: &Pipeline, seg: usize, axis: SplitAxis) -> Option<Pipeline> {
    let target = &p.segments[seg];
    let mut parts1 = Vec::with_capacity(target.members.len());
    let mut parts2 = Vec::with_capacity(target.members.len());
    // channel splits are only coherent for single-member segments:
    // mid-chain channels are produced inside the segment
    if axis == SplitAxis::C && target.members.len() != 1 {
        return None;
    }
    for m in &target.members {
        let (a, b) = split_part(m, axis)?;
        parts1.push(a);
        parts2.push(b);
    }
    let mut out = p.clone();
    out.segments[seg] = Segment { seg_id: seg, members: parts1 };
    let new_id = out.segments.len();
    out.segments.push(Segment { seg_id: new_id, members: parts2 });
    let mut extra = Vec::new();
    for &(s, d) in &out.edges {
        if s == seg {
            extra.push((new_id, d));
        }
        if d == seg {
            extra.push((s, new_id));
        }
    }
    out.edges.extend(extra);
    out.renumber();
    Some(out)
}

fn apply_concat(p: &Pipeline, a: usize, b: usize) -> Pipeline {
    let mut out = p.clone();
    let b_members = std::mem::take(&mut out.segments[b].members);
    out.segments[a].members.extend(b_members);
    // redirect b's edges onto a, then drop b
    let mut edges = Vec::new();
    for &(s, d) in &out.edges {
        let s2 = if s == b { a } else { s };
        let d2 = if d == b { a } else { d };
        if s2 != d2 {
            edges.push((s2, d2));
        }
    }
    out.segments.remove(b);
    let fix = |i: usize| if i > b { i - 1 } else { i };
    out.edges = edges.into_iter().map(|(s, d)| (fix(s), fix(d))).collect();
    out.renumber();
    out
}

fn concat_eligible(p: &Pipeline, a: usize, b: usize, capacity: u64, mean: f64) -> bool {
    if !p.edges.contains(&(a, b)) {
        return false;
    }
    // chain-linked only
    if p.succs(a).len() != 1 || p.preds(b).len() != 1 {
        return false;
    }
    let lat = p.stage_latencies();
    // the paper merges layers whose workload is relatively small
    if lat[a] as f64 > mean || lat[b] as f64 > mean {
        return false;
    }
    let mut merged = p.segments[a].clone();
    merged.members.extend(p.segments[b].members.iter().cloned());
    match buffer_size(&merged, OuterAxis::H) {
        Ok(need) => need <= capacity,
        Err(_) => true, // buffer model only covers conv segments
    }
}

fn split_buffer_fits(p: &Pipeline, seg: usize, axis: SplitAxis, capacity: u64) -> bool {
    match apply_split(p, seg, axis) {
        Some(after) => {
            let last = after.segments.len() - 1;
            for idx in [seg, last] {
                if after.segments[idx].all_conv() {
                    match buffer_size(&after.segments[idx], OuterAxis::H) {
                        Ok(need) if need > capacity => return false,
                        _ => {}
                    }
                }
            }
            true
        }
        None => false,
    }
}

/// The best strictly-CV-improving move available, if any.
pub fn best_move(p: &Pipeline, capacity: u64) -> Option<(Move, Pipeline, f64)> {
    let lat = p.stage_latencies();
    let mean = lat.iter().map(|&v| v as f64).sum::<f64>() / lat.len() as f64;
    let mut best: Option<(Move, Pipeline, f64)> = None;

    let mut consider = |mv: Move, after: Pipeline| {
        if let Ok(cv) = after.cv() {
            let better = match &best {
                Some((_, _, best_cv)) => cv < *best_cv,
                None => true,
            };
            if better {
                best = Some((mv, after, cv));
            }
        }
    };

    // concatenation candidates, best pair by resulting CV
    let mut pairs: Vec<(usize, usize)> = p
        .edges
        .iter()
        .copied()
        .filter(|&(a, b)| concat_eligible(p, a, b, capacity, mean))
        .collect();
    pairs.sort_unstable();
    for (a, b) in pairs {
        consider(Move::Concat { a, b }, apply_concat(p, a, b));
    }

    // Split of the maximum-latency segment. Only W and C divide the
    // per-tile latency; an H (or matmul query-row) split keeps every
    // part at the original rate and merely pads the latency list, so it
    // is never offered as a balancing move. Spatial W is preferred when
    // the buffer allows, channel axis otherwise.
    let max_seg = (0..lat.len()).max_by_key(|&i| (lat[i], std::cmp::Reverse(i)))?;
    let is_matmul = p.segments[max_seg]
        .members
        .iter()
        .any(|m| matches!(m.kind, LayerKind::MatMul(_)));
    let axes: Vec<SplitAxis> = if is_matmul {
        Vec::new()
    } else if split_buffer_fits(p, max_seg, SplitAxis::W, capacity) {
        vec![SplitAxis::W]
    } else {
        [SplitAxis::C]
            .into_iter()
            .filter(|&ax| split_buffer_fits(p, max_seg, ax, capacity))
            .collect()
    };
    for ax in axes {
        if let Some(after) = apply_split(p, max_seg, ax) {
            let plan = SplitPlan {
                seg: max_seg,
                layer_id: p.segments[max_seg].members[0].layer_id,
                axis: ax,
                parts: 2,
                needs_accumulation: ax == SplitAxis::C,
            };
            consider(Move::Split(plan), after);
        }
    }

    best
}

/// Rebalance the pipeline. Returns the (possibly unchanged) pipeline and
/// a report of the moves taken; never increases the CV.
pub fn balance(pipeline: &Pipeline, capacity: u64, threshold: f64) -> (Pipeline, BalanceReport) {
    let latencies_before = pipeline.stage_latencies();
    let cv_before = pipeline.cv().unwrap_or(0.0);
    let mut report = BalanceReport {
        cv_before,
        cv_after: cv_before,
        latencies_before,
        latencies_after: pipeline.stage_latencies(),
        moves: Vec::new(),
        fixed_point: false,
        threshold,
    };
    if cv_before <= threshold {
        return (pipeline.clone(), report);
    }
    let mut cur = pipeline.clone();
    let mut cur_cv = cv_before;
    let budget = 4 * pipeline.segments.len();
    while report.moves.len() < budget {
        match best_move(&cur, capacity) {
            Some((mv, after, cv)) if cv < cur_cv => {
                report.moves.push(MoveRecord { applied: mv, cv_after: cv });
                cur = after;
                cur_cv = cv;
                if cur_cv <= threshold {
                    break;
                }
            }
            _ => {
                report.fixed_point = true;
                break;
            }
        }
    }
    report.cv_after = cur_cv;
    report.latencies_after = cur.stage_latencies();
    (cur, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvDims, LayerNode, SlaClass, TaskDag};

    #[test]
    fn cv_examples() {
        assert_eq!(coefficient_of_variation(&[10, 10, 10]).unwrap(), 0.0);
        let cv = coefficient_of_variation(&[2, 4, 6]).unwrap();
        assert!((cv - 0.408_248_290_463_863).abs() < 1e-12);
        let cv = coefficient_of_variation(&[1, 100]).unwrap();
        assert!((cv - 49.5 / 50.5).abs() < 1e-12);
        assert_eq!(coefficient_of_variation(&[]).unwrap_err(), LcsError::EmptyInput);
        assert_eq!(coefficient_of_variation(&[0, 0]).unwrap_err(), LcsError::ZeroMean);
    }

    fn conv_part(layer_id: usize, d: ConvDims) -> StagePart {
        StagePart {
            layer_id,
            kind: LayerKind::Conv(d),
            tiles: d.h_o,
            row_base: 0,
            rows_total: d.h_o,
            fill_cycles: 0,
            override_cycles: None,
            weight_bits: 0,
            needs_accumulation: false,
            fused_elementwise: Vec::new(),
        }
    }

    #[test]
    fn buffer_size_examples() {
        // two layers (R=3, S=3, W=8, H=8) with C=4 and C=8
        let seg = Segment {
            seg_id: 0,
            members: vec![
                conv_part(0, ConvDims { w_o: 8, h_o: 8, c_o: 4, k_h: 3, k_w: 3, c_in: 4 }),
                conv_part(1, ConvDims { w_o: 8, h_o: 8, c_o: 8, k_h: 3, k_w: 3, c_in: 8 }),
            ],
        };
        assert_eq!(buffer_size(&seg, OuterAxis::H).unwrap(), 432);
        assert_eq!(buffer_size(&seg, OuterAxis::W).unwrap(), 432); // W_i = H_i here

        let unit = Segment {
            seg_id: 0,
            members: vec![conv_part(0, ConvDims { w_o: 1, h_o: 1, c_o: 1, k_h: 1, k_w: 1, c_in: 1 })],
        };
        assert_eq!(buffer_size(&unit, OuterAxis::H).unwrap(), 3);

        let bad = Segment {
            seg_id: 0,
            members: vec![StagePart {
                kind: LayerKind::Elementwise,
                ..conv_part(5, ConvDims { w_o: 1, h_o: 1, c_o: 1, k_h: 1, k_w: 1, c_in: 1 })
            }],
        };
        assert_eq!(buffer_size(&bad, OuterAxis::H).unwrap_err(), LcsError::UnsupportedKind(5));
    }

    /// Chain pipeline whose stage latencies (at pe=1, base=1, fill=0)
    /// equal the given per-tile MAC counts.
    fn chain_pipeline(macs: &[u64]) -> Pipeline {
        let engine = EngineSpec { pe_count: 1, clock_hz: 700e6 };
        let nodes: Vec<LayerNode> = macs
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                let mut l = LayerNode::conv(
                    i,
                    ConvDims { w_o: m, h_o: 4, c_o: 1, k_h: 1, k_w: 1, c_in: 1 },
                    64,
                );
                l.fill_override = Some(0);
                l
            })
            .collect();
        let dag = TaskDag {
            task_id: 0,
            nodes,
            edges: (0..macs.len() - 1).map(|i| (i, i + 1)).collect(),
            deadline: 10_000,
            arrival: 0,
            priority: 1,
            critical: false,
            sla_class: SlaClass::Vision,
        };
        build_pipeline(&dag, &engine, 1, None).unwrap()
    }

    #[test]
    fn balance_below_threshold_is_identity() {
        let p = chain_pipeline(&[10, 10, 10]);
        let (out, report) = balance(&p, u64::MAX, 0.15);
        assert_eq!(out, p);
        assert!(report.moves.is_empty());
        assert_eq!(report.cv_after, report.cv_before);
    }

    #[test]
    fn balance_concat_then_split() {
        let p = chain_pipeline(&[2, 2, 12]);
        let (out, report) = balance(&p, u64::MAX, 0.15);
        let mut lat = out.stage_latencies();
        lat.sort_unstable();
        assert_eq!(lat, vec![4, 6, 6]);
        assert!(report.fixed_point, "no further improving move at [4,6,6]");
        assert!((report.cv_after - 0.176_776_695_296_636_89).abs() < 1e-9);
        assert!(report.cv_after < report.cv_before);
        // first move merged the two small stages, second split the big one
        assert!(matches!(report.moves[0].applied, Move::Concat { .. }));
        assert!(matches!(report.moves[1].applied, Move::Split(SplitPlan { axis: SplitAxis::W, .. })));
        // work is conserved exactly
        assert_eq!(out.total_macs(), p.total_macs());
    }

    #[test]
    fn split_falls_back_to_channel_axis_when_buffer_blocks() {
        // [1, 32]: big layer w_o=8, c_in=4, k=1: W-part buffer 24, C-part 20
        let engine = EngineSpec { pe_count: 1, clock_hz: 700e6 };
        let mut small = LayerNode::conv(0, ConvDims { w_o: 1, h_o: 4, c_o: 1, k_h: 1, k_w: 1, c_in: 1 }, 0);
        small.fill_override = Some(0);
        let mut big = LayerNode::conv(1, ConvDims { w_o: 8, h_o: 4, c_o: 1, k_h: 1, k_w: 1, c_in: 4 }, 0);
        big.fill_override = Some(0);
        let dag = TaskDag {
            task_id: 0,
            nodes: vec![small, big],
            edges: vec![(0, 1)],
            deadline: 10_000,
            arrival: 0,
            priority: 1,
            critical: false,
            sla_class: SlaClass::Vision,
        };
        let p = build_pipeline(&dag, &engine, 1, None).unwrap();
        let (_, report) = balance(&p, 22, 0.15);
        let split = report
            .moves
            .iter()
            .find_map(|m| match &m.applied {
                Move::Split(plan) => Some(plan.clone()),
                _ => None,
            })
            .expect("a split move");
        assert_eq!(split.axis, SplitAxis::C);
        assert!(split.needs_accumulation);

        // with ample buffer the same layer splits along W instead
        let (_, report) = balance(&p, u64::MAX, 0.15);
        let split = report
            .moves
            .iter()
            .find_map(|m| match &m.applied {
                Move::Split(plan) => Some(plan.clone()),
                _ => None,
            })
            .expect("a split move");
        assert_eq!(split.axis, SplitAxis::W);
        assert!(!split.needs_accumulation);
    }

    #[test]
    fn balance_never_increases_cv_and_conserves_work() {
        for macs in [&[3u64, 17, 2, 9][..], &[1, 1, 30], &[5, 40, 5, 40, 5]] {
            let p = chain_pipeline(macs);
            let before_cv = p.cv().unwrap();
            let (out, report) = balance(&p, u64::MAX, 0.15);
            assert!(report.cv_after <= before_cv + 1e-12);
            assert_eq!(out.total_macs(), p.total_macs());
            let mut last = report.cv_before;
            for m in &report.moves {
                assert!(m.cv_after < last);
                last = m.cv_after;
            }
        }
    }

    #[test]
    fn elementwise_fuses_into_predecessor() {
        let engine = EngineSpec { pe_count: 1, clock_hz: 700e6 };
        let mut conv = LayerNode::conv(0, ConvDims { w_o: 2, h_o: 4, c_o: 1, k_h: 1, k_w: 1, c_in: 1 }, 0);
        conv.fill_override = Some(0);
        let relu = LayerNode::elementwise(1);
        let mut conv2 = LayerNode::conv(2, ConvDims { w_o: 2, h_o: 4, c_o: 1, k_h: 1, k_w: 1, c_in: 1 }, 0);
        conv2.fill_override = Some(0);
        let dag = TaskDag {
            task_id: 0,
            nodes: vec![conv, relu, conv2],
            edges: vec![(0, 1), (1, 2)],
            deadline: 100,
            arrival: 0,
            priority: 1,
            critical: false,
            sla_class: SlaClass::Vision,
        };
        let p = build_pipeline(&dag, &engine, 1, None).unwrap();
        assert_eq!(p.segments.len(), 2);
        assert_eq!(p.segments[0].members[0].fused_elementwise, vec![1]);
        assert_eq!(p.edges, vec![(0, 1)]);
    }
}
