//! MCTS-accelerated Ullmann subgraph isomorphism over CSR matrices.
//!
//! Given a task DAG `A` (n x n) and a preemptible DAG `B` (m x m), the
//! search looks for an injective mapping `M` (n x m, one 1 per row, at
//! most one per column) such that every edge of `A` maps onto an edge of
//! `B`: the containment test computes `C = M^T A M` by sparse products
//! and checks `C` against `B` entry-for-entry, rewarding +1 on success
//! and -1 otherwise.
//!
//! The tree search selects by the UCB rule `Q/N + C*sqrt(ln N_parent / N)`,
//! expands one uniformly-sampled untried action per iteration (swapping
//! the images of two rows or moving a row to a free column), evaluates
//! the child's mapping, and backpropagates the reward. Mappings already
//! met elsewhere in the tree are never expanded twice, so on small
//! instances the search degenerates gracefully into an exhaustive sweep
//! of the mapping space and a -1 return is definitive once the tree
//! closes.
//!
//! A classical Ullmann backtracking matcher with a degree-pruned
//! candidate matrix serves as the independent ground truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::collections::HashSet;

use crate::csr::CsrMatrix;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum McuError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("instance too large for the exhaustive oracle (|A| <= {max_a}, |B| <= {max_b})")]
    SizeLimitExceeded { max_a: usize, max_b: usize },
}

/// Injective row -> column assignment, the sparse realization of the
/// mapping matrix M.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mapping {
    assign: Vec<usize>,
    n_cols: usize,
}

impl Mapping {
    pub fn new(assign: Vec<usize>, n_cols: usize) -> Self {
        debug_assert!(assign.iter().all(|&c| c < n_cols));
        debug_assert!({
            let mut seen = vec![false; n_cols];
            assign.iter().all(|&c| !std::mem::replace(&mut seen[c], true))
        });
        Self { assign, n_cols }
    }

    pub fn image_of(&self, row: usize) -> usize {
        self.assign[row]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assign
    }

    pub fn n_rows(&self) -> usize {
        self.assign.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// The mapping as an n x m CSR matrix with exactly one 1 per row.
    pub fn to_csr(&self) -> CsrMatrix {
        let row_ptr = (0..=self.assign.len()).collect();
        CsrMatrix::new(self.assign.len(), self.n_cols, row_ptr, self.assign.clone())
            .expect("injective assignment is a valid CSR")
    }

    fn used_columns(&self) -> Vec<bool> {
        let mut used = vec![false; self.n_cols];
        for &c in &self.assign {
            used[c] = true;
        }
        used
    }
}

/// A neighbourhood action on a mapping: exchange the images of two rows,
/// or move one row's image to an unused column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Swap(usize, usize),
    Move { row: usize, to_col: usize },
}

/// All actions whose application yields a distinct valid mapping, in
/// deterministic order: swaps by (i, j), then moves by (row, col).
pub fn generate_actions(m: &Mapping) -> Vec<Action> {
    let n = m.n_rows();
    let mut actions = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            actions.push(Action::Swap(i, j));
        }
    }
    let used = m.used_columns();
    for row in 0..n {
        for (col, &u) in used.iter().enumerate() {
            if !u {
                actions.push(Action::Move { row, to_col: col });
            }
        }
    }
    actions
}

pub fn apply_action(m: &Mapping, action: Action) -> Mapping {
    let mut assign = m.assign.clone();
    match action {
        Action::Swap(i, j) => assign.swap(i, j),
        Action::Move { row, to_col } => assign[row] = to_col,
    }
    Mapping { assign, n_cols: m.n_cols }
}

/// UCB selection score. Unvisited children score infinity so they are
/// explored first.
pub fn ucb_score(q: f64, n: u64, parent_n: u64, c: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    q / n as f64 + c * ((parent_n as f64).ln() / n as f64).sqrt()
}

/// Containment evaluation: C = M^T A M in CSR, +1 iff C is contained in
/// B, else -1. Stays sparse throughout.
pub fn evaluate(m: &Mapping, a: &CsrMatrix, b: &CsrMatrix) -> Result<i32, McuError> {
    if a.n_rows() != a.n_cols() || b.n_rows() != b.n_cols() {
        return Err(McuError::ShapeMismatch("A and B must be square".into()));
    }
    if m.n_rows() != a.n_rows() || m.n_cols() != b.n_rows() {
        return Err(McuError::ShapeMismatch(format!(
            "mapping {}x{} against A {} and B {}",
            m.n_rows(),
            m.n_cols(),
            a.n_rows(),
            b.n_rows()
        )));
    }
    let mc = m.to_csr();
    let c = mc
        .transpose()
        .multiply(a)
        .map_err(|e| McuError::ShapeMismatch(e.to_string()))?
        .multiply(&mc)
        .map_err(|e| McuError::ShapeMismatch(e.to_string()))?;
    let contained = c.is_contained_in(b).map_err(|e| McuError::ShapeMismatch(e.to_string()))?;
    Ok(if contained { 1 } else { -1 })
}

/// Greedy degree-ordered initial mapping: rows sorted by descending
/// total degree, each assigned the lowest-index unused column whose
/// total degree is no smaller, falling back to the lowest-index unused
/// column.
pub fn initial_mapping(a: &CsrMatrix, b: &CsrMatrix) -> Mapping {
    let n = a.n_rows();
    let m = b.n_rows();
    let a_in = a.in_degrees();
    let b_in = b.in_degrees();
    let deg_a: Vec<usize> = (0..n).map(|v| a.out_degree(v) + a_in[v]).collect();
    let deg_b: Vec<usize> = (0..m).map(|v| b.out_degree(v) + b_in[v]).collect();
    let mut rows: Vec<usize> = (0..n).collect();
    rows.sort_by_key(|&v| (std::cmp::Reverse(deg_a[v]), v));
    let mut used = vec![false; m];
    let mut assign = vec![0usize; n];
    for &row in &rows {
        let pick = (0..m)
            .find(|&c| !used[c] && deg_b[c] >= deg_a[row])
            .or_else(|| (0..m).find(|&c| !used[c]))
            .expect("n <= m guarantees a free column");
        used[pick] = true;
        assign[row] = pick;
    }
    Mapping { assign, n_cols: m }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McuParams {
    pub max_iterations: u64,
    /// UCB exploration constant; sqrt(2) by default.
    pub exploration: f64,
    pub seed: u64,
}

impl Default for McuParams {
    fn default() -> Self {
        Self { max_iterations: 10_000, exploration: std::f64::consts::SQRT_2, seed: 0 }
    }
}

/// One node of the search tree.
#[derive(Debug, Clone)]
pub struct SearchNode {
    pub mapping: Mapping,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Visit count.
    pub n: u64,
    /// Accumulated reward.
    pub q: i64,
    /// Reward of this node's own mapping.
    pub reward: i32,
    /// Simulations executed at this node itself.
    pub own_sims: u64,
    /// Actions not yet expanded.
    pub untried: Vec<Action>,
    /// True once the whole subtree is exhausted.
    pub closed: bool,
}

impl SearchNode {
    pub fn terminal(&self) -> bool {
        self.untried.is_empty() && self.children.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McuOutcome {
    pub mapping: Option<Mapping>,
    pub reward: i32,
    /// Evaluations performed (each iteration evaluates one mapping).
    pub iterations: u64,
    /// True when the search provably swept every reachable mapping.
    pub exhausted: bool,
}

fn backpropagate(nodes: &mut [SearchNode], mut idx: usize, r: i32) {
    loop {
        nodes[idx].n += 1;
        nodes[idx].q += r as i64;
        match nodes[idx].parent {
            Some(p) => idx = p,
            None => break,
        }
    }
}

/// Close `idx` if it has nothing left to expand and no open children,
/// then propagate closure upward.
fn close_upward(nodes: &mut [SearchNode], mut idx: usize) {
    loop {
        let node = &nodes[idx];
        if !node.untried.is_empty() || node.children.iter().any(|&c| !nodes[c].closed) {
            return;
        }
        nodes[idx].closed = true;
        match nodes[idx].parent {
            Some(p) => idx = p,
            None => return,
        }
    }
}

/// Seeded random injective mapping, used to diversify restarts when
/// enumerating alternative embeddings.
pub fn random_injective(n: usize, m: usize, rng: &mut impl Rng) -> Mapping {
    let mut cols: Vec<usize> = (0..m).collect();
    cols.shuffle(rng);
    Mapping::new(cols[..n].to_vec(), m)
}

/// MCU subgraph isomorphism search. Runs up to `params.max_iterations`
/// select/expand/simulate/backpropagate rounds, exits early on the first
/// +1 reward, and returns the best mapping found. Deterministic for a
/// fixed seed.
pub fn mcu_search(a: &CsrMatrix, b: &CsrMatrix, params: &McuParams) -> McuOutcome {
    mcu_search_tree(a, b, params).0
}

/// Like [`mcu_search`] but also returns the final tree for inspection.
pub fn mcu_search_tree(
    a: &CsrMatrix,
    b: &CsrMatrix,
    params: &McuParams,
) -> (McuOutcome, SearchTree) {
    mcu_search_rooted(a, b, params, None)
}

/// Search from an explicit root mapping instead of the greedy
/// degree-ordered one.
pub fn mcu_search_rooted(
    a: &CsrMatrix,
    b: &CsrMatrix,
    params: &McuParams,
    root: Option<Mapping>,
) -> (McuOutcome, SearchTree) {
    let n = a.n_rows();
    let m = b.n_rows();
    if n > m {
        return (
            McuOutcome { mapping: None, reward: -1, iterations: 0, exhausted: true },
            SearchTree { nodes: Vec::new() },
        );
    }
    if n == 0 {
        // the empty DAG embeds anywhere
        return (
            McuOutcome {
                mapping: Some(Mapping::new(Vec::new(), m)),
                reward: 1,
                iterations: 0,
                exhausted: true,
            },
            SearchTree { nodes: Vec::new() },
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();

    let root_mapping = root.unwrap_or_else(|| initial_mapping(a, b));
    seen.insert(root_mapping.assignment().to_vec());
    let root_reward = evaluate(&root_mapping, a, b).expect("conformable shapes");
    let mut nodes = vec![SearchNode {
        mapping: root_mapping.clone(),
        parent: None,
        children: Vec::new(),
        n: 0,
        q: 0,
        reward: root_reward,
        own_sims: 1,
        untried: generate_actions(&root_mapping),
        closed: false,
    }];
    backpropagate(&mut nodes, 0, root_reward);
    let mut iterations = 1u64;
    let mut best = (root_mapping, root_reward);

    if root_reward == 1 {
        return (
            McuOutcome { mapping: Some(best.0), reward: 1, iterations, exhausted: false },
            SearchTree { nodes },
        );
    }

    'search: while iterations < params.max_iterations {
        if nodes[0].closed {
            break;
        }
        // Select: descend through fully-expanded nodes by UCB over open
        // children; ties break on the earliest child.
        let mut v = 0usize;
        while nodes[v].untried.is_empty() {
            let open: Vec<usize> =
                nodes[v].children.iter().copied().filter(|&c| !nodes[c].closed).collect();
            if open.is_empty() {
                break;
            }
            let parent_n = nodes[v].n;
            v = open
                .iter()
                .copied()
                .map(|c| {
                    (ucb_score(nodes[c].q as f64, nodes[c].n, parent_n, params.exploration), c)
                })
                .fold((f64::NEG_INFINITY, usize::MAX), |acc, (s, c)| {
                    if s > acc.0 {
                        (s, c)
                    } else {
                        acc
                    }
                })
                .1;
        }

        // Expand: draw untried actions uniformly until one yields an
        // unseen mapping.
        let mut expanded = None;
        while !nodes[v].untried.is_empty() {
            let pick = rng.random_range(0..nodes[v].untried.len());
            let action = nodes[v].untried.swap_remove(pick);
            let mapping = apply_action(&nodes[v].mapping, action);
            if seen.insert(mapping.assignment().to_vec()) {
                expanded = Some(mapping);
                break;
            }
        }

        match expanded {
            Some(mapping) => {
                let reward = evaluate(&mapping, a, b).expect("conformable shapes");
                let untried = generate_actions(&mapping);
                let u = nodes.len();
                nodes.push(SearchNode {
                    mapping: mapping.clone(),
                    parent: Some(v),
                    children: Vec::new(),
                    n: 0,
                    q: 0,
                    reward,
                    own_sims: 1,
                    untried,
                    closed: false,
                });
                nodes[v].children.push(u);
                backpropagate(&mut nodes, u, reward);
                iterations += 1;
                if reward > best.1 {
                    best = (mapping, reward);
                }
                if reward == 1 {
                    break 'search;
                }
            }
            None => {
                // nothing new under v: close it (and any exhausted
                // ancestors) and try again without spending an iteration
                close_upward(&mut nodes, v);
            }
        }
    }

    let exhausted = nodes[0].closed;
    let reward = best.1;
    let outcome = McuOutcome {
        mapping: if reward == 1 { Some(best.0) } else { None },
        reward,
        iterations,
        exhausted,
    };
    (outcome, SearchTree { nodes })
}

/// Statistics from the backtracking matcher.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacktrackStats {
    /// Candidate (row, column) assignments tried.
    pub expansions: u64,
}

/// Plain Ullmann backtracking with a degree-pruned candidate matrix and
/// forward adjacency pruning against already-assigned rows.
pub fn ullmann_backtrack(a: &CsrMatrix, b: &CsrMatrix) -> (Option<Vec<usize>>, BacktrackStats) {
    let n = a.n_rows();
    let m = b.n_rows();
    let mut stats = BacktrackStats::default();
    if n > m {
        return (None, stats);
    }
    let a_in = a.in_degrees();
    let b_in = b.in_degrees();
    // candidate matrix: M0[i][j] = 1 iff B node j can host A node i
    let candidates: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..m)
                .filter(|&j| b.out_degree(j) >= a.out_degree(i) && b_in[j] >= a_in[i])
                .collect()
        })
        .collect();

    fn consistent(a: &CsrMatrix, b: &CsrMatrix, assign: &[usize], row: usize, col: usize) -> bool {
        for (prev_row, &prev_col) in assign.iter().enumerate() {
            if a.get(prev_row, row) && !b.get(prev_col, col) {
                return false;
            }
            if a.get(row, prev_row) && !b.get(col, prev_col) {
                return false;
            }
        }
        true
    }

    fn recurse(
        a: &CsrMatrix,
        b: &CsrMatrix,
        candidates: &[Vec<usize>],
        assign: &mut Vec<usize>,
        used: &mut [bool],
        stats: &mut BacktrackStats,
    ) -> bool {
        let row = assign.len();
        if row == a.n_rows() {
            return true;
        }
        for &col in &candidates[row] {
            if used[col] {
                continue;
            }
            stats.expansions += 1;
            if !consistent(a, b, assign, row, col) {
                continue;
            }
            assign.push(col);
            used[col] = true;
            if recurse(a, b, candidates, assign, used, stats) {
                return true;
            }
            assign.pop();
            used[col] = false;
        }
        false
    }

    let mut assign: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; m];
    if recurse(a, b, &candidates, &mut assign, &mut used, &mut stats) {
        (Some(assign), stats)
    } else {
        (None, stats)
    }
}

pub const ORACLE_MAX_A: usize = 10;
pub const ORACLE_MAX_B: usize = 12;

/// Exhaustive ground truth for desk-scale instances: exact existence
/// answer plus a witness mapping when one exists.
pub fn ullmann_oracle(
    a: &CsrMatrix,
    b: &CsrMatrix,
) -> Result<(bool, Option<Vec<usize>>), McuError> {
    if a.n_rows() > ORACLE_MAX_A || b.n_rows() > ORACLE_MAX_B {
        return Err(McuError::SizeLimitExceeded { max_a: ORACLE_MAX_A, max_b: ORACLE_MAX_B });
    }
    let (witness, _) = ullmann_backtrack(a, b);
    Ok((witness.is_some(), witness))
}

/// Seeded random DAG on `n` nodes with edge probability `p` (edges only
/// forward, so always acyclic).
pub fn random_dag(n: usize, p: f64, rng: &mut impl Rng) -> CsrMatrix {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    CsrMatrix::from_edges(n, &edges)
}

/// Seeded random pair (A, B) where B is guaranteed to contain A under a
/// hidden planted embedding.
pub fn planted_pair(
    n: usize,
    m: usize,
    p_a: f64,
    p_extra: f64,
    rng: &mut impl Rng,
) -> (CsrMatrix, CsrMatrix) {
    let a = random_dag(n, p_a, rng);
    let mut slots: Vec<usize> = (0..m).collect();
    slots.shuffle(rng);
    let embed = &slots[..n];
    let mut edges: Vec<(usize, usize)> =
        a.iter_entries().map(|(i, j)| (embed[i], embed[j])).collect();
    for i in 0..m {
        for j in 0..m {
            if i != j && rng.random::<f64>() < p_extra {
                edges.push((i, j));
            }
        }
    }
    (a, CsrMatrix::from_edges(m, &edges))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> CsrMatrix {
        CsrMatrix::from_edges(n, &(0..n - 1).map(|i| (i, i + 1)).collect::<Vec<_>>())
    }

    fn cycle(n: usize) -> CsrMatrix {
        CsrMatrix::from_edges(n, &(0..n).map(|i| (i, (i + 1) % n)).collect::<Vec<_>>())
    }

    #[test]
    fn ucb_examples() {
        let s = ucb_score(2.0, 2, 4, 1.414);
        assert!((s - (1.0 + 1.414 * (4.0f64.ln() / 2.0).sqrt())).abs() < 1e-12);
        assert!((s - 2.177).abs() < 1e-3);
        assert_eq!(ucb_score(0.0, 1, 1, 1.0), 0.0); // ln 1 = 0
        assert_eq!(ucb_score(0.0, 0, 5, 1.0), f64::INFINITY);
    }

    #[test]
    fn evaluate_examples() {
        // 2-node path into a directed triangle: 0->0, 1->1 works
        let a = path(2);
        let b = cycle(3);
        let m = Mapping::new(vec![0, 1], 3);
        assert_eq!(evaluate(&m, &a, &b).unwrap(), 1);
        // brute force: at least one of the 6 injective maps succeeds
        let mut wins = 0;
        for c0 in 0..3 {
            for c1 in 0..3 {
                if c0 != c1 {
                    let m = Mapping::new(vec![c0, c1], 3);
                    if evaluate(&m, &a, &b).unwrap() == 1 {
                        wins += 1;
                    }
                }
            }
        }
        assert!(wins >= 1);

        // 3-cycle into a 3-path: all 6 permutations fail
        let a = cycle(3);
        let b = path(3);
        for p in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let m = Mapping::new(p.to_vec(), 3);
            assert_eq!(evaluate(&m, &a, &b).unwrap(), -1);
        }

        // self-containment under the identity
        let g = cycle(4);
        let id = Mapping::new(vec![0, 1, 2, 3], 4);
        assert_eq!(evaluate(&id, &g, &g).unwrap(), 1);

        // shape mismatch
        let m = Mapping::new(vec![0], 3);
        assert!(matches!(evaluate(&m, &path(2), &b), Err(McuError::ShapeMismatch(_))));
    }

    #[test]
    fn action_enumeration() {
        // n=2, m=2 identity: a single swap
        let m = Mapping::new(vec![0, 1], 2);
        assert_eq!(generate_actions(&m), vec![Action::Swap(0, 1)]);

        // n=1, m=3: two moves to the unused columns
        let m = Mapping::new(vec![0], 3);
        assert_eq!(
            generate_actions(&m),
            vec![Action::Move { row: 0, to_col: 1 }, Action::Move { row: 0, to_col: 2 }]
        );

        // n=m=1: terminal
        let m = Mapping::new(vec![0], 1);
        assert!(generate_actions(&m).is_empty());
    }

    #[test]
    fn actions_preserve_mapping_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..5usize);
            let m = rng.random_range(n..7usize);
            let mut cols: Vec<usize> = (0..m).collect();
            cols.shuffle(&mut rng);
            let mapping = Mapping::new(cols[..n].to_vec(), m);
            for action in generate_actions(&mapping) {
                let next = apply_action(&mapping, action);
                // row sums are 1 by construction; column sums <= 1:
                let mut seen = vec![false; m];
                for &c in next.assignment() {
                    assert!(!seen[c], "column used twice after {:?}", action);
                    seen[c] = true;
                }
                assert_ne!(next, mapping, "action must change the mapping");
            }
        }
    }

    #[test]
    fn search_finds_embedding() {
        let a = path(2);
        let b = cycle(3);
        let out =
            mcu_search(&a, &b, &McuParams { max_iterations: 200, seed: 7, ..Default::default() });
        assert_eq!(out.reward, 1);
        let m = out.mapping.unwrap();
        assert_eq!(evaluate(&m, &a, &b).unwrap(), 1, "soundness re-check");
    }

    #[test]
    fn search_rejects_impossible() {
        let a = cycle(3);
        let b = path(3);
        let out =
            mcu_search(&a, &b, &McuParams { max_iterations: 200, seed: 1, ..Default::default() });
        assert_eq!(out.reward, -1);
        assert!(out.mapping.is_none());
        assert!(out.exhausted, "3 -> 3 space is tiny; the tree must close");
    }

    #[test]
    fn search_trivial_cases() {
        let g = CsrMatrix::from_edges(1, &[]);
        let out = mcu_search(&g, &g, &McuParams::default());
        assert_eq!(out.reward, 1);
        assert_eq!(out.iterations, 1);

        // |A| > |B| short-circuits
        let out = mcu_search(&path(3), &path(2), &McuParams::default());
        assert_eq!(out.reward, -1);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn search_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = planted_pair(4, 6, 0.4, 0.15, &mut rng);
        let params = McuParams { max_iterations: 3000, seed: 42, ..Default::default() };
        let o1 = mcu_search(&a, &b, &params);
        let o2 = mcu_search(&a, &b, &params);
        assert_eq!(o1, o2);
    }

    #[test]
    fn backprop_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = planted_pair(3, 5, 0.5, 0.1, &mut rng);
        let (out, tree) = mcu_search_tree(
            &a,
            &b,
            &McuParams { max_iterations: 50, seed: 9, ..Default::default() },
        );
        // root visit count equals completed iterations
        assert_eq!(tree.nodes[0].n, out.iterations);
        // every node's N is its own simulations plus its children's
        for node in &tree.nodes {
            let child_sum: u64 = node.children.iter().map(|&c| tree.nodes[c].n).sum();
            assert_eq!(node.n, node.own_sims + child_sum);
            assert!(node.q.unsigned_abs() <= node.n);
        }
    }

    #[test]
    fn oracle_examples() {
        let (exists, witness) = ullmann_oracle(&path(2), &cycle(3)).unwrap();
        assert!(exists);
        let w = witness.unwrap();
        assert_eq!(evaluate(&Mapping::new(w, 3), &path(2), &cycle(3)).unwrap(), 1);

        let (exists, _) = ullmann_oracle(&cycle(3), &path(3)).unwrap();
        assert!(!exists);

        // G embeds in G
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let g = random_dag(6, 0.3, &mut rng);
            let (exists, _) = ullmann_oracle(&g, &g).unwrap();
            assert!(exists);
        }

        assert!(matches!(
            ullmann_oracle(&path(11), &path(12)),
            Err(McuError::SizeLimitExceeded { .. })
        ));
    }

    #[test]
    fn agreement_with_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut misses = 0;
        let cases = 120;
        for case in 0..cases {
            let n = rng.random_range(2..=5usize);
            let m = rng.random_range(n..=8usize);
            let a = random_dag(n, 0.4, &mut rng);
            let b = random_dag(m, 0.35, &mut rng);
            let (exists, _) = ullmann_oracle(&a, &b).unwrap();
            let out = mcu_search(
                &a,
                &b,
                &McuParams { max_iterations: 5000, seed: 1000 + case, ..Default::default() },
            );
            if exists && out.reward != 1 {
                misses += 1;
            }
            // soundness: a +1 answer is always backed by a real witness
            assert!(!(!exists && out.reward == 1), "false positive");
        }
        assert_eq!(misses, 0, "{misses}/{cases} budget misses at T=5000");
    }
}
