//! Per-tile latency model and the global timeslot.
//!
//! A tile is one output row of a layer. Its single-engine latency in
//! cycles is
//!
//!   conv:   ceil(W_o * C_o * K_h * K_w * C_in / pe_count) + filling_time
//!   matmul: ceil(N_k * h * d_k / pe_count) + filling_time
//!
//! The minimum tile latency across a workload's compute-bearing layers
//! defines the engine timeslot; every other tile then spans
//! `ceil(latency / timeslot)` slots.
//!
//! Filling time defaults to a pipeline-depth proxy, `min(K_h*K_w, 8)`
//! for convolutions and `min(d_k, 8)` for matmuls, and can be overridden
//! per layer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{LayerKind, LayerNode, WorkloadSet};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TileError {
    #[error("layer {0} is not compute-bearing")]
    NotComputeBearing(usize),
    #[error("workload has no compute-bearing layer")]
    EmptyWorkload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineSpec {
    /// MACs per engine.
    pub pe_count: u64,
    pub clock_hz: f64,
}

/// Per-layer tile cost after quantisation to timeslots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileCost {
    pub layer_id: usize,
    /// Timeslots one tile occupies on its engine.
    pub t_slots: u64,
    /// Filling-time component, in slots (rounded up).
    pub fill: u64,
    /// Tiles the layer emits (one per output row).
    pub tiles_total: u64,
}

/// Optional per-layer latency override in cycles, standing in for an
/// external single-engine cost model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub cycles_by_layer: HashMap<usize, u64>,
}

impl LatencyTable {
    /// Parse a line-oriented table: `layer_id cycles` per line, `#`
    /// comments and blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cycles_by_layer = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let id = parts
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| format!("line {}: expected layer id", lineno + 1))?;
            let cycles = parts
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| format!("line {}: expected cycle count", lineno + 1))?;
            if parts.next().is_some() {
                return Err(format!("line {}: trailing fields", lineno + 1));
            }
            cycles_by_layer.insert(id, cycles);
        }
        Ok(Self { cycles_by_layer })
    }
}

pub fn default_fill(layer: &LayerNode) -> u64 {
    match layer.kind {
        LayerKind::Conv(d) => (d.k_h * d.k_w).min(8),
        LayerKind::MatMul(d) => d.d_k.min(8),
        LayerKind::Elementwise => 0,
    }
}

/// MACs in one tile of the layer.
pub fn tile_macs(layer: &LayerNode) -> Result<u64, TileError> {
    match layer.kind {
        LayerKind::Conv(d) => Ok(d.w_o * d.c_o * d.k_h * d.k_w * d.c_in),
        LayerKind::MatMul(d) => Ok(d.n_k * d.heads * d.d_k),
        LayerKind::Elementwise => Err(TileError::NotComputeBearing(layer.id)),
    }
}

/// Single-engine latency of one tile, in cycles.
pub fn tile_latency(layer: &LayerNode, engine: &EngineSpec) -> Result<u64, TileError> {
    let macs = tile_macs(layer)?;
    let fill = layer.fill_override.unwrap_or_else(|| default_fill(layer));
    Ok(macs.div_ceil(engine.pe_count) + fill)
}

/// Tiles a layer emits: one per output row (conv) or query row (matmul).
pub fn tiles_of_layer(layer: &LayerNode) -> Result<u64, TileError> {
    match layer.kind {
        LayerKind::Conv(d) => Ok(d.h_o),
        LayerKind::MatMul(d) => Ok(d.n_q),
        LayerKind::Elementwise => Err(TileError::NotComputeBearing(layer.id)),
    }
}

/// The engine timeslot: the minimum tile latency over all
/// compute-bearing layers of the workload.
pub fn base_timeslot(workload: &WorkloadSet, engine: &EngineSpec) -> Result<u64, TileError> {
    workload
        .tasks
        .iter()
        .flat_map(|t| t.nodes.iter())
        .filter(|n| n.kind.is_compute_bearing())
        .map(|n| tile_latency(n, engine))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .min()
        .ok_or(TileError::EmptyWorkload)
}

/// Slots a latency spans at a given timeslot granularity.
pub fn slots_for(latency_cycles: u64, base: u64) -> u64 {
    latency_cycles.div_ceil(base)
}

/// Tile cost of a layer quantised to `base`-cycle slots, honouring the
/// override table when it lists the layer.
pub fn tile_cost(
    layer: &LayerNode,
    engine: &EngineSpec,
    base: u64,
    table: Option<&LatencyTable>,
) -> Result<TileCost, TileError> {
    let cycles = match table.and_then(|t| t.cycles_by_layer.get(&layer.id)) {
        Some(&c) => c.max(1),
        None => tile_latency(layer, engine)?,
    };
    let fill_cycles = layer.fill_override.unwrap_or_else(|| default_fill(layer));
    Ok(TileCost {
        layer_id: layer.id,
        t_slots: slots_for(cycles, base),
        fill: fill_cycles.div_ceil(base),
        tiles_total: tiles_of_layer(layer)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AttnDims, ConvDims};

    fn engine(pe: u64) -> EngineSpec {
        EngineSpec { pe_count: pe, clock_hz: 700e6 }
    }

    fn conv_layer(w_o: u64, h_o: u64, c_o: u64, k: u64, c_in: u64, fill: u64) -> LayerNode {
        let mut l = LayerNode::conv(0, ConvDims { w_o, h_o, c_o, k_h: k, k_w: k, c_in }, 0);
        l.fill_override = Some(fill);
        l
    }

    #[test]
    fn conv_latency() {
        // ceil(4*8*3*3*8 / 64) + 4 = 36 + 4 = 40
        let l = conv_layer(4, 8, 8, 3, 8, 4);
        assert_eq!(tile_latency(&l, &engine(64)).unwrap(), 40);
    }

    #[test]
    fn matmul_latency() {
        // ceil(16*2*8 / 64) + 2 = 4 + 2 = 6
        let mut l = LayerNode::matmul(0, AttnDims { n_q: 16, n_k: 16, heads: 2, d_k: 8 }, 0);
        l.fill_override = Some(2);
        assert_eq!(tile_latency(&l, &engine(64)).unwrap(), 6);
    }

    #[test]
    fn unit_conv_latency() {
        let l = conv_layer(1, 1, 1, 1, 1, 0);
        assert_eq!(tile_latency(&l, &engine(1)).unwrap(), 1);
    }

    #[test]
    fn elementwise_rejected() {
        let l = LayerNode::elementwise(3);
        assert_eq!(tile_latency(&l, &engine(8)).unwrap_err(), TileError::NotComputeBearing(3));
        assert_eq!(tiles_of_layer(&l).unwrap_err(), TileError::NotComputeBearing(3));
    }

    fn workload_of(layers: Vec<LayerNode>) -> WorkloadSet {
        use crate::graph::{ComplexityClass, SlaClass, TaskDag};
        let n = layers.len();
        WorkloadSet {
            tasks: vec![TaskDag {
                task_id: 0,
                nodes: layers.into_iter().enumerate().map(|(i, mut l)| {
                    l.id = i;
                    l
                }).collect(),
                edges: (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
                deadline: 100,
                arrival: 0,
                priority: 1,
                critical: false,
                sla_class: SlaClass::Vision,
            }],
            complexity_class: ComplexityClass::Simple,
        }
    }

    #[test]
    fn base_timeslot_is_min_latency() {
        let a = conv_layer(4, 8, 8, 3, 8, 4); // 40 cycles
        let mut b = LayerNode::matmul(1, AttnDims { n_q: 16, n_k: 16, heads: 2, d_k: 8 }, 0);
        b.fill_override = Some(2); // 6 cycles
        let w = workload_of(vec![a, b]);
        let base = base_timeslot(&w, &engine(64)).unwrap();
        assert_eq!(base, 6);
        assert_eq!(slots_for(40, base), 7);
    }

    #[test]
    fn base_timeslot_singleton_and_tie() {
        let a = conv_layer(4, 8, 8, 3, 8, 4);
        let w = workload_of(vec![a]);
        assert_eq!(base_timeslot(&w, &engine(64)).unwrap(), 40);
        assert_eq!(slots_for(40, 40), 1);

        let w = workload_of(vec![a, a]);
        assert_eq!(base_timeslot(&w, &engine(64)).unwrap(), 40);
    }

    #[test]
    fn base_timeslot_empty_workload() {
        let w = workload_of(vec![]);
        assert_eq!(base_timeslot(&w, &engine(64)).unwrap_err(), TileError::EmptyWorkload);
    }

    #[test]
    fn tiles_per_layer() {
        let l = conv_layer(4, 8, 8, 3, 8, 4);
        assert_eq!(tiles_of_layer(&l).unwrap(), 8);
        let m = LayerNode::matmul(0, AttnDims { n_q: 16, n_k: 16, heads: 2, d_k: 8 }, 0);
        assert_eq!(tiles_of_layer(&m).unwrap(), 16);
        let one = conv_layer(1, 1, 1, 1, 1, 0);
        assert_eq!(tiles_of_layer(&one).unwrap(), 1);
    }

    #[test]
    fn latency_table_override() {
        let table = LatencyTable::parse("# layer cycles\n0 13\n2 7\n").unwrap();
        let l = conv_layer(4, 8, 8, 3, 8, 4);
        let cost = tile_cost(&l, &engine(64), 5, Some(&table)).unwrap();
        assert_eq!(cost.t_slots, 3); // ceil(13 / 5)
        let cost = tile_cost(&l, &engine(64), 5, None).unwrap();
        assert_eq!(cost.t_slots, 8); // ceil(40 / 5)
    }

    #[test]
    fn latency_table_rejects_garbage() {
        assert!(LatencyTable::parse("0 abc").is_err());
        assert!(LatencyTable::parse("0 1 2").is_err());
    }

    #[test]
    fn monotone_in_dims_and_pe() {
        let base = conv_layer(4, 8, 8, 3, 8, 4);
        let lat = tile_latency(&base, &engine(64)).unwrap();
        for grow in [
            conv_layer(5, 8, 8, 3, 8, 4),
            conv_layer(4, 8, 9, 3, 8, 4),
            conv_layer(4, 8, 8, 3, 9, 4),
        ] {
            assert!(tile_latency(&grow, &engine(64)).unwrap() >= lat);
        }
        assert!(tile_latency(&base, &engine(128)).unwrap() <= lat);
    }

    #[test]
    fn no_work_lost_to_rounding() {
        // sum of slot-quantised work must cover total MACs / pe_count
        let layers = vec![
            conv_layer(4, 8, 8, 3, 8, 4),
            conv_layer(2, 4, 4, 1, 16, 0),
            conv_layer(7, 3, 5, 3, 3, 2),
        ];
        let eng = engine(64);
        let w = workload_of(layers.clone());
        let base = base_timeslot(&w, &eng).unwrap();
        let mut slot_work = 0u64;
        let mut macs = 0u64;
        for l in &layers {
            let lat = tile_latency(l, &eng).unwrap();
            let tiles = tiles_of_layer(l).unwrap();
            slot_work += slots_for(lat, base) * tiles;
            macs += tile_macs(l).unwrap() * tiles;
        }
        assert!(slot_work * base >= macs.div_ceil(eng.pe_count));
    }
}
