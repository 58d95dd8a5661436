//! Task DAGs of DNN layers.
//!
//! A [`TaskDag`] is one DNN inference task: an acyclic graph of
//! [`LayerNode`]s with a deadline, an arrival timeslot and a priority
//! level. Layer dimensions follow the per-tile cost model conventions:
//! convolutions carry output width/height, output channels, kernel size
//! and input channels; attention matmuls carry query rows, key count,
//! heads and per-head dimension.

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csr::CsrMatrix;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("task {task}: cycle detected involving node {node}")]
    CycleDetected { task: usize, node: usize },
    #[error("task {task}: edge ({src}, {dst}) references a missing node")]
    InvalidEdge { task: usize, src: usize, dst: usize },
    #[error("task {task}: {what}")]
    InvalidField { task: usize, what: String },
    #[error("duplicate task id {0}")]
    DuplicateTaskId(usize),
}

/// Convolution dimensions (output featuremap and kernel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvDims {
    pub w_o: u64,
    pub h_o: u64,
    pub c_o: u64,
    pub k_h: u64,
    pub k_w: u64,
    pub c_in: u64,
}

/// Attention matmul dimensions: `n_q` query rows, `n_k` keys, `heads`
/// attention heads and `d_k` per-head reduction size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnDims {
    pub n_q: u64,
    pub n_k: u64,
    pub heads: u64,
    pub d_k: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv(ConvDims),
    MatMul(AttnDims),
    Elementwise,
}

impl LayerKind {
    pub fn is_compute_bearing(&self) -> bool {
        !matches!(self, LayerKind::Elementwise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: usize,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Weight bits resident on the engine running this layer; the
    /// save/restore cost of a preemption is proportional to this.
    pub weight_bits: u64,
    /// Per-layer filling-time override in cycles.
    pub fill_override: Option<u64>,
}

impl LayerNode {
    pub fn conv(id: usize, dims: ConvDims, weight_bits: u64) -> Self {
        Self { id, kind: LayerKind::Conv(dims), weight_bits, fill_override: None }
    }

    pub fn matmul(id: usize, dims: AttnDims, weight_bits: u64) -> Self {
        Self { id, kind: LayerKind::MatMul(dims), weight_bits, fill_override: None }
    }

    pub fn elementwise(id: usize) -> Self {
        Self { id, kind: LayerKind::Elementwise, weight_bits: 0, fill_override: None }
    }

    fn dims_valid(&self) -> bool {
        match self.kind {
            LayerKind::Conv(d) => {
                d.w_o >= 1 && d.h_o >= 1 && d.c_o >= 1 && d.k_h >= 1 && d.k_w >= 1 && d.c_in >= 1
            }
            LayerKind::MatMul(d) => d.n_q >= 1 && d.n_k >= 1 && d.heads >= 1 && d.d_k >= 1,
            LayerKind::Elementwise => true,
        }
    }
}

/// SLA class of a task template, deciding which satisfaction threshold
/// applies (99% vision, 97% translation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SlaClass {
    #[default]
    Vision,
    Translation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDag {
    pub task_id: usize,
    pub nodes: Vec<LayerNode>,
    pub edges: Vec<(usize, usize)>,
    /// Relative deadline in timeslots, counted from arrival.
    pub deadline: u64,
    /// Arrival timeslot.
    pub arrival: u64,
    pub priority: u32,
    pub critical: bool,
    #[serde(default)]
    pub sla_class: SlaClass,
}

impl TaskDag {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.deadline == 0 {
            return Err(GraphError::InvalidField {
                task: self.task_id,
                what: "deadline must be > 0".into(),
            });
        }
        if self.priority == 0 {
            return Err(GraphError::InvalidField {
                task: self.task_id,
                what: "priority must be >= 1".into(),
            });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(GraphError::InvalidField {
                    task: self.task_id,
                    what: format!("node ids must be dense and ordered, got {} at {}", node.id, i),
                });
            }
            if !node.dims_valid() {
                return Err(GraphError::InvalidField {
                    task: self.task_id,
                    what: format!("node {} has a dimension < 1", node.id),
                });
            }
        }
        for &(src, dst) in &self.edges {
            if src >= self.nodes.len() || dst >= self.nodes.len() {
                return Err(GraphError::InvalidEdge { task: self.task_id, src, dst });
            }
        }
        topo_sort(self).map(|_| ())
    }

    pub fn adjacency(&self) -> CsrMatrix {
        CsrMatrix::from_edges(self.nodes.len(), &self.edges)
    }

    pub fn total_weight_bits(&self) -> u64 {
        self.nodes.iter().map(|n| n.weight_bits).sum()
    }
}

/// Topological order of the task's nodes; ties broken by ascending node
/// id so the result is deterministic.
pub fn topo_sort(dag: &TaskDag) -> Result<Vec<usize>, GraphError> {
    let n = dag.nodes.len();
    let mut in_deg = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(src, dst) in &dag.edges {
        if src >= n || dst >= n {
            return Err(GraphError::InvalidEdge { task: dag.task_id, src, dst });
        }
        succ[src].push(dst);
        in_deg[dst] += 1;
    }
    // min-heap on node id
    let mut ready: BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
        .filter(|&v| in_deg[v] == 0)
        .map(std::cmp::Reverse)
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse(v)) = ready.pop() {
        order.push(v);
        for &w in &succ[v] {
            in_deg[w] -= 1;
            if in_deg[w] == 0 {
                ready.push(std::cmp::Reverse(w));
            }
        }
    }
    if order.len() != n {
        let node = (0..n).find(|&v| in_deg[v] > 0).unwrap_or(0);
        return Err(GraphError::CycleDetected { task: dag.task_id, node });
    }
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ComplexityClass {
    #[default]
    Simple,
    Middle,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSet {
    pub tasks: Vec<TaskDag>,
    pub complexity_class: ComplexityClass,
}

impl WorkloadSet {
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = std::collections::BTreeSet::new();
        for task in &self.tasks {
            if !seen.insert(task.task_id) {
                return Err(GraphError::DuplicateTaskId(task.task_id));
            }
            task.validate()?;
        }
        Ok(())
    }
}

/// Small conv-chain task used across the crate's tests.
#[cfg(test)]
pub(crate) fn chain_task(task_id: usize, n: usize) -> TaskDag {
    let nodes = (0..n)
        .map(|i| {
            LayerNode::conv(i, ConvDims { w_o: 4, h_o: 4, c_o: 4, k_h: 3, k_w: 3, c_in: 4 }, 1024)
        })
        .collect();
    let edges = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    TaskDag {
        task_id,
        nodes,
        edges,
        deadline: 1000,
        arrival: 0,
        priority: 1,
        critical: false,
        sla_class: SlaClass::Vision,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use super::chain_task;

    #[test]
    fn topo_chain() {
        let dag = chain_task(0, 3);
        assert_eq!(topo_sort(&dag).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn topo_diamond() {
        let mut dag = chain_task(0, 4);
        dag.edges = vec![(0, 1), (0, 2), (1, 3), (2, 3)];
        let order = topo_sort(&dag).unwrap();
        assert_eq!(order, vec![0, 1, 2, 3]);
        // brute force: the output must satisfy every edge
        let pos: Vec<usize> = {
            let mut p = vec![0; 4];
            for (i, &v) in order.iter().enumerate() {
                p[v] = i;
            }
            p
        };
        for &(a, b) in &dag.edges {
            assert!(pos[a] < pos[b]);
        }
    }

    #[test]
    fn topo_self_loop() {
        let mut dag = chain_task(7, 1);
        dag.edges = vec![(0, 0)];
        assert_eq!(
            topo_sort(&dag).unwrap_err(),
            GraphError::CycleDetected { task: 7, node: 0 }
        );
    }

    #[test]
    fn topo_len_iff_acyclic() {
        let mut dag = chain_task(0, 3);
        dag.edges = vec![(0, 1), (1, 2), (2, 0)];
        assert!(topo_sort(&dag).is_err());
        dag.edges = vec![(0, 1), (1, 2)];
        assert_eq!(topo_sort(&dag).unwrap().len(), 3);
    }

    #[test]
    fn validate_rejects_bad_fields() {
        let mut dag = chain_task(0, 2);
        dag.deadline = 0;
        assert!(matches!(dag.validate(), Err(GraphError::InvalidField { .. })));

        let mut dag = chain_task(0, 2);
        dag.priority = 0;
        assert!(matches!(dag.validate(), Err(GraphError::InvalidField { .. })));

        let mut dag = chain_task(0, 2);
        dag.edges.push((0, 9));
        assert!(matches!(dag.validate(), Err(GraphError::InvalidEdge { .. })));
    }

    #[test]
    fn workload_rejects_duplicate_ids() {
        let w = WorkloadSet {
            tasks: vec![chain_task(1, 2), chain_task(1, 2)],
            complexity_class: ComplexityClass::Simple,
        };
        assert_eq!(w.validate().unwrap_err(), GraphError::DuplicateTaskId(1));
    }
}
