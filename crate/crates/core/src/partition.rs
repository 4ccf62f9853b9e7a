//! Balanced k-way partitioning and the multiscale partition series.
//!
//! The partitioner follows the usual multilevel recipe: heavy-edge matching
//! shrinks the graph, greedy region growing splits the coarsest graph, and a
//! k-way Kernighan–Lin/Fiduccia–Mattheyses boundary pass with rollback
//! refines the split while it is projected back to the original nodes.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::SpatialGraph;
use crate::tensor::Tensor;

/// Largest-part tolerance relative to `ceil(n / p)`.
pub const DEFAULT_BALANCE: f64 = 1.3;

const INITIAL_TRIALS: usize = 8;
const REFINE_PASSES: usize = 8;

/// Node-to-subgraph assignment plus the padded `p×m` layout used by attention.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub n: usize,
    pub p: usize,
    /// Size of the largest subgraph.
    pub m: usize,
    pub balance_factor: f64,
    pub seed: u64,
    /// Total weight of edges whose endpoints lie in different subgraphs.
    pub edge_cut: f64,
    pub assign: Vec<usize>,
    /// Set when the largest subgraph exceeds `balance_factor · ceil(n/p)`.
    pub over_balance: bool,
    /// `max size / ceil(n/p)`.
    pub achieved_balance: f64,
    gather: Arc<[Option<usize>]>,
    slots: Arc<[Option<usize>]>,
}

impl PartitionPlan {
    /// Builds a plan from an assignment, validating it and deriving the layout.
    ///
    /// Subgraph members are laid out in ascending node order.
    pub fn from_assignment(
        assign: Vec<usize>,
        p: usize,
        balance_factor: f64,
        seed: u64,
        edge_cut: f64,
    ) -> Result<Self> {
        let n = assign.len();
        if p == 0 || p > n {
            return Err(Error::Input(format!("subgraph count {p} must lie in 1..={n}")));
        }
        if let Some(&bad) = assign.iter().find(|&&a| a >= p) {
            return Err(Error::Contract(format!("assignment names subgraph {bad} but p = {p}")));
        }
        let mut members = vec![Vec::new(); p];
        for (node, &part) in assign.iter().enumerate() {
            members[part].push(node);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("subgraph {empty} is empty")));
        }
        let m = members.iter().map(Vec::len).max().unwrap_or(0);
        let mut gather = vec![None; p * m];
        let mut slots = vec![None; p * m];
        for (part, nodes) in members.iter().enumerate() {
            for (pos, &node) in nodes.iter().enumerate() {
                gather[part * m + pos] = Some(node);
            }
        }
        for (slot, entry) in gather.iter().enumerate() {
            slots[slot] = entry.map(|_| slot);
        }
        let ideal = n.div_ceil(p);
        let achieved_balance = m as f64 / ideal as f64;
        let over_balance = m as f64 > balance_factor * ideal as f64;
        Ok(Self {
            n,
            p,
            m,
            balance_factor,
            seed,
            edge_cut,
            assign,
            over_balance,
            achieved_balance,
            gather: gather.into(),
            slots: slots.into(),
        })
    }

    /// `p·m` table, row-major by subgraph: node id per slot, `None` for padding.
    pub fn gather(&self) -> &Arc<[Option<usize>]> {
        &self.gather
    }

    /// Slot validity, `p·m` entries.
    pub fn mask(&self) -> Vec<bool> {
        self.gather.iter().map(Option::is_some).collect()
    }

    /// Identity index over valid slots, `None` over padding (re-zeroes padded rows).
    pub fn valid_slots(&self) -> &Arc<[Option<usize>]> {
        &self.slots
    }

    /// For each node, its flat slot `part · m + position`.
    pub fn slot_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n];
        for (slot, node) in self.gather.iter().enumerate() {
            if let Some(node) = node {
                out[*node] = slot;
            }
        }
        out
    }

    /// Member node ids per subgraph, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        self.gather.chunks(self.m.max(1)).map(|row| row.iter().flatten().copied().collect()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }

    /// Checks every structural invariant of the plan.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0u32; self.n];
        for node in self.gather.iter().flatten() {
            seen[*node] += 1;
        }
        if let Some(node) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Contract(format!("node {node} appears {} times in the layout", seen[node])));
        }
        for (slot, node) in self.gather.iter().enumerate() {
            if let Some(node) = node {
                if self.assign[*node] != slot / self.m {
                    return Err(Error::Contract(format!("node {node} sits in the wrong subgraph row")));
                }
            }
        }
        if self.sizes().contains(&0) {
            return Err(Error::Contract("empty subgraph".into()));
        }
        let ideal = self.n.div_ceil(self.p) as f64;
        if !self.over_balance && self.m as f64 > self.balance_factor * ideal {
            return Err(Error::Contract("balance exceeded without over_balance flag".into()));
        }
        Ok(())
    }
}

/// Sum of weights of edges whose endpoints have different labels.
pub fn edge_cut(g: &SpatialGraph, assign: &[usize]) -> f64 {
    g.edges().iter().filter(|e| assign[e.0] != assign[e.1]).map(|e| e.2).sum()
}

/// Gathers node rows of `x: [n×D]` into the padded `[p×m×D]` layout.
pub fn apply_plan(x: &Tensor, plan: &PartitionPlan) -> Result<Tensor> {
    let [n, d] = *x.shape() else {
        return Err(shape_err("apply_plan", format!("expected [n, D], got {:?}", x.shape())));
    };
    if n != plan.n {
        return Err(shape_err("apply_plan", format!("input has {n} rows, plan covers {}", plan.n)));
    }
    let mut out = Tensor::zeros(&[plan.p, plan.m, d]);
    for (slot, node) in plan.gather.iter().enumerate() {
        if let Some(node) = node {
            out.data_mut()[slot * d..(slot + 1) * d].copy_from_slice(&x.data()[node * d..(node + 1) * d]);
        }
    }
    Ok(out)
}

/// Inverse of [`apply_plan`]: restores node order and drops padded slots.
pub fn revert_plan(y: &Tensor, plan: &PartitionPlan) -> Result<Tensor> {
    let [p, m, d] = *y.shape() else {
        return Err(shape_err("revert_plan", format!("expected [p, m, D], got {:?}", y.shape())));
    };
    if p != plan.p || m != plan.m {
        return Err(shape_err("revert_plan", format!("layout {p}x{m} does not match plan {}x{}", plan.p, plan.m)));
    }
    let mut out = Tensor::zeros(&[plan.n, d]);
    for (slot, node) in plan.gather.iter().enumerate() {
        if let Some(node) = node {
            out.data_mut()[node * d..(node + 1) * d].copy_from_slice(&y.data()[slot * d..(slot + 1) * d]);
        }
    }
    Ok(out)
}

/// Weighted working graph for the multilevel scheme.
#[derive(Clone)]
struct WorkGraph {
    vwgt: Vec<usize>,
    adj: Vec<Vec<(usize, f64)>>,
}

impl WorkGraph {
    fn from_spatial(g: &SpatialGraph) -> Self {
        let adj = (0..g.n()).map(|i| g.neighbors(i).to_vec()).collect();
        Self { vwgt: vec![1; g.n()], adj }
    }

    fn n(&self) -> usize {
        self.vwgt.len()
    }

    fn cut(&self, part: &[usize]) -> f64 {
        let mut total = 0.0;
        for (u, list) in self.adj.iter().enumerate() {
            for &(v, w) in list {
                if v > u && part[u] != part[v] {
                    total += w;
                }
            }
        }
        total
    }
}

/// Heavy-edge matching; returns the contracted graph and fine→coarse map.
fn coarsen_once(g: &WorkGraph, rng: &mut ChaCha8Rng, max_vwgt: usize) -> (WorkGraph, Vec<usize>) {
    let n = g.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut mate = vec![usize::MAX; n];
    for &u in &order {
        if mate[u] != usize::MAX {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &(v, w) in &g.adj[u] {
            if mate[v] != usize::MAX || g.vwgt[u] + g.vwgt[v] > max_vwgt {
                continue;
            }
            if best.is_none_or(|(bv, bw)| w > bw || (w == bw && v < bv)) {
                best = Some((v, w));
            }
        }
        match best {
            Some((v, _)) => {
                mate[u] = v;
                mate[v] = u;
            }
            None => mate[u] = u,
        }
    }
    let mut cmap = vec![usize::MAX; n];
    let mut members: Vec<[usize; 2]> = Vec::new();
    for u in 0..n {
        if cmap[u] == usize::MAX {
            cmap[u] = members.len();
            cmap[mate[u]] = members.len();
            members.push([u, mate[u]]);
        }
    }
    let coarse_n = members.len();
    let mut vwgt = vec![0; coarse_n];
    for u in 0..n {
        vwgt[cmap[u]] += g.vwgt[u];
    }
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); coarse_n];
    let mut pos = vec![usize::MAX; coarse_n];
    for (cu, pair) in members.iter().enumerate() {
        let owned = if pair[0] == pair[1] { &pair[..1] } else { &pair[..] };
        let list = &mut adj[cu];
        for &u in owned {
            for &(v, w) in &g.adj[u] {
                let cv = cmap[v];
                if cv == cu {
                    continue;
                }
                if pos[cv] == usize::MAX {
                    pos[cv] = list.len();
                    list.push((cv, w));
                } else {
                    list[pos[cv]].1 += w;
                }
            }
        }
        for &(cv, _) in list.iter() {
            pos[cv] = usize::MAX;
        }
        list.sort_by_key(|e| e.0);
    }
    (WorkGraph { vwgt, adj }, cmap)
}

/// Balanced k-way partition of `g` into `p` subgraphs.
///
/// Deterministic for a fixed `seed`. Subgraph ids are ordered by their
/// smallest member. When balance cannot be met the plan is returned with
/// `over_balance` set.
pub fn partition_kway(g: &SpatialGraph, p: usize, balance_factor: f64, seed: u64) -> Result<PartitionPlan> {
    let n = g.n();
    if p == 0 || p > n {
        return Err(Error::Input(format!("cannot split {n} nodes into {p} subgraphs")));
    }
    if !(balance_factor >= 1.0) || !balance_factor.is_finite() {
        return Err(Error::Input(format!("balance factor must be >= 1, got {balance_factor}")));
    }
    let assign: Vec<usize> = if p == 1 {
        vec![0; n]
    } else if p == n {
        (0..n).collect()
    } else {
        multilevel(g, p, balance_factor, seed)
    };
    let assign = canonical_labels(&assign, p);
    let cut = edge_cut(g, &assign);
    PartitionPlan::from_assignment(assign, p, balance_factor, seed, cut)
}

fn multilevel(g: &SpatialGraph, p: usize, balance_factor: f64, seed: u64) -> Vec<usize> {
    let n = g.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_part = (libm::floor(balance_factor * n.div_ceil(p) as f64) as usize).max(1);
    let coarsen_to = (4 * p).max(64);
    let max_vwgt = (libm::ceil(1.5 * n as f64 / coarsen_to as f64) as usize).max(1);

    let mut levels: Vec<(WorkGraph, Vec<usize>)> = Vec::new();
    let mut current = WorkGraph::from_spatial(g);
    while current.n() > coarsen_to {
        let (coarse, cmap) = coarsen_once(&current, &mut rng, max_vwgt);
        if coarse.n() * 20 > current.n() * 19 {
            break;
        }
        levels.push((core::mem::replace(&mut current, coarse), cmap));
    }

    let mut part = initial_partition(&current, p, max_part, &mut rng);
    while let Some((fine, cmap)) = levels.pop() {
        part = cmap.iter().map(|&c| part[c]).collect();
        current = fine;
        enforce_balance(&current, &mut part, p, max_part);
        refine(&current, &mut part, p, max_part);
    }
    part
}

fn initial_partition(g: &WorkGraph, p: usize, max_part: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut best: Option<(bool, f64, Vec<usize>)> = None;
    for trial in 0..INITIAL_TRIALS {
        let mut part = grow_regions(g, p, trial, rng);
        enforce_balance(g, &mut part, p, max_part);
        refine(g, &mut part, p, max_part);
        let balanced = part_weights(g, &part, p).iter().all(|&w| w <= max_part);
        let cut = g.cut(&part);
        let better = match &best {
            None => true,
            Some((b_ok, b_cut, _)) => (balanced && !b_ok) || (balanced == *b_ok && cut < *b_cut),
        };
        if better {
            best = Some((balanced, cut, part));
        }
    }
    best.map(|b| b.2).expect("at least one trial")
}

/// Greedy graph growing: each region absorbs its most strongly attached frontier vertex.
fn grow_regions(g: &WorkGraph, p: usize, trial: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.n();
    let mut part = vec![usize::MAX; n];
    let mut remaining: usize = g.vwgt.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    if trial > 0 {
        order.shuffle(rng);
    }
    for region in 0..p - 1 {
        let target = remaining.div_ceil(p - region);
        let start = match trial {
            0 => peripheral(g, &part, order.iter().copied().find(|&u| part[u] == usize::MAX).expect("unassigned")),
            _ => order.iter().copied().find(|&u| part[u] == usize::MAX).expect("unassigned"),
        };
        let mut weight = 0;
        let mut attach = vec![0.0f64; n];
        let mut frontier: BTreeSet<Key> = BTreeSet::new();
        let mut next = Some(start);
        while let Some(u) = next {
            part[u] = region;
            weight += g.vwgt[u];
            frontier.remove(&Key(attach[u], u));
            for &(v, w) in &g.adj[u] {
                if part[v] == usize::MAX {
                    frontier.remove(&Key(attach[v], v));
                    attach[v] += w;
                    frontier.insert(Key(attach[v], v));
                }
            }
            if weight >= target {
                break;
            }
            next = frontier.iter().next_back().map(|k| k.1).or_else(|| {
                // Disconnected remainder: jump to the next unassigned vertex.
                order.iter().copied().find(|&v| part[v] == usize::MAX)
            });
            // Leave at least one vertex for each later region.
            let unassigned = part.iter().filter(|&&x| x == usize::MAX).count();
            if unassigned <= p - 1 - region {
                break;
            }
        }
        remaining -= weight;
    }
    for x in part.iter_mut().filter(|x| **x == usize::MAX) {
        *x = p - 1;
    }
    part
}

/// Farthest unassigned vertex (BFS hops) from `start` within its unassigned component.
fn peripheral(g: &WorkGraph, part: &[usize], start: usize) -> usize {
    let mut dist = vec![usize::MAX; g.n()];
    let mut queue = VecDeque::from([start]);
    dist[start] = 0;
    let mut last = start;
    while let Some(u) = queue.pop_front() {
        last = u;
        for &(v, _) in &g.adj[u] {
            if dist[v] == usize::MAX && part[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    last
}

fn part_weights(g: &WorkGraph, part: &[usize], p: usize) -> Vec<usize> {
    let mut w = vec![0; p];
    for (u, &q) in part.iter().enumerate() {
        w[q] += g.vwgt[u];
    }
    w
}

fn part_counts(part: &[usize], p: usize) -> Vec<usize> {
    let mut c = vec![0; p];
    for &q in part {
        c[q] += 1;
    }
    c
}

fn connectivity(g: &WorkGraph, part: &[usize], u: usize, q: usize) -> f64 {
    g.adj[u].iter().filter(|&&(v, _)| part[v] == q).map(|&(_, w)| w).sum()
}

/// Fills empty parts and drains overweight parts with the cheapest available moves.
fn enforce_balance(g: &WorkGraph, part: &mut [usize], p: usize, max_part: usize) {
    let n = g.n();
    let mut counts = part_counts(part, p);
    let mut weights = part_weights(g, part, p);
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..p).filter(|&q| counts[q] > 1).max_by_key(|&q| (weights[q], core::cmp::Reverse(q)));
        let Some(donor) = donor else { break };
        let u = (0..n)
            .filter(|&u| part[u] == donor)
            .min_by(|&a, &b| {
                connectivity(g, part, a, donor).total_cmp(&connectivity(g, part, b, donor)).then(a.cmp(&b))
            })
            .expect("donor has members");
        part[u] = empty;
        counts[donor] -= 1;
        counts[empty] += 1;
        weights[donor] -= g.vwgt[u];
        weights[empty] += g.vwgt[u];
    }

    // Bounded so a pathological graph cannot loop forever.
    for _ in 0..4 * n {
        let Some(over) = (0..p).filter(|&q| weights[q] > max_part).max_by_key(|&q| weights[q]) else {
            break;
        };
        let mut best: Option<(f64, usize, usize)> = None;
        for u in (0..n).filter(|&u| part[u] == over) {
            if counts[over] <= 1 {
                break;
            }
            let own = connectivity(g, part, u, over);
            for q in 0..p {
                if q == over || weights[q] + g.vwgt[u] > max_part.max(weights[over] - g.vwgt[u]) {
                    continue;
                }
                let gain = connectivity(g, part, u, q) - own;
                let cand = (gain, u, q);
                if best.is_none_or(|b| gain > b.0 || (gain == b.0 && (u, q) < (b.1, b.2))) {
                    best = Some(cand);
                }
            }
        }
        let Some((_, u, q)) = best else { break };
        part[u] = q;
        counts[over] -= 1;
        counts[q] += 1;
        weights[over] -= g.vwgt[u];
        weights[q] += g.vwgt[u];
    }
}

/// Total order on `(gain, vertex)` for priority sets.
#[derive(Clone, Copy, Debug)]
struct Key(f64, usize);

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        // Higher gain first at the back; lower vertex id wins ties.
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

/// Best admissible move of `u`: `(gain, target part)`.
fn best_move(
    g: &WorkGraph,
    part: &[usize],
    weights: &[usize],
    counts: &[usize],
    max_part: usize,
    u: usize,
) -> Option<(f64, usize)> {
    let from = part[u];
    if counts[from] <= 1 {
        return None;
    }
    let mut conn: Vec<(usize, f64)> = Vec::new();
    let mut own = 0.0;
    for &(v, w) in &g.adj[u] {
        let q = part[v];
        if q == from {
            own += w;
        } else if let Some(e) = conn.iter_mut().find(|e| e.0 == q) {
            e.1 += w;
        } else {
            conn.push((q, w));
        }
    }
    let mut best: Option<(f64, usize)> = None;
    for (q, w) in conn {
        if weights[q] + g.vwgt[u] > max_part {
            continue;
        }
        let gain = w - own;
        if best.is_none_or(|(bg, bq)| gain > bg || (gain == bg && (weights[q], q) < (weights[bq], bq))) {
            best = Some((gain, q));
        }
    }
    best
}

/// k-way FM passes: greedily move boundary vertices (negative gains allowed),
/// each at most once per pass, then roll back to the best prefix.
fn refine(g: &WorkGraph, part: &mut [usize], p: usize, max_part: usize) {
    let n = g.n();
    let max_stall = 50.max(n / 10);
    for _ in 0..REFINE_PASSES {
        let mut weights = part_weights(g, part, p);
        let mut counts = part_counts(part, p);
        let mut locked = vec![false; n];
        let mut queue: BTreeSet<Key> = BTreeSet::new();
        let mut current: Vec<Option<(f64, usize)>> = vec![None; n];
        for u in 0..n {
            if g.adj[u].iter().any(|&(v, _)| part[v] != part[u]) {
                current[u] = best_move(g, part, &weights, &counts, max_part, u);
                if let Some((gain, _)) = current[u] {
                    queue.insert(Key(gain, u));
                }
            }
        }
        let mut history: Vec<(usize, usize)> = Vec::new();
        let mut cumulative = 0.0;
        let mut best_gain = 0.0;
        let mut best_len = 0;
        while let Some(Key(gain, u)) = queue.pop_last() {
            // Moves elsewhere may have changed sizes since this entry was queued.
            let fresh = best_move(g, part, &weights, &counts, max_part, u);
            if fresh != current[u] {
                current[u] = fresh;
                if let Some((g2, _)) = fresh {
                    queue.insert(Key(g2, u));
                }
                continue;
            }
            let Some((_, to)) = current[u] else { continue };
            let from = part[u];
            part[u] = to;
            locked[u] = true;
            current[u] = None;
            weights[from] -= g.vwgt[u];
            weights[to] += g.vwgt[u];
            counts[from] -= 1;
            counts[to] += 1;
            history.push((u, from));
            cumulative += gain;
            if cumulative > best_gain + 1e-12 {
                best_gain = cumulative;
                best_len = history.len();
            }
            if history.len() - best_len > max_stall {
                break;
            }
            for &(v, _) in &g.adj[u] {
                if locked[v] {
                    continue;
                }
                if let Some((old, _)) = current[v] {
                    queue.remove(&Key(old, v));
                }
                current[v] = best_move(g, part, &weights, &counts, max_part, v);
                if let Some((gain, _)) = current[v] {
                    queue.insert(Key(gain, v));
                }
            }
        }
        for &(u, from) in history[best_len..].iter().rev() {
            part[u] = from;
        }
        if best_len == 0 {
            break;
        }
    }
}

/// Renumbers parts in order of their smallest member.
fn canonical_labels(assign: &[usize], p: usize) -> Vec<usize> {
    let mut relabel = vec![usize::MAX; p];
    let mut next = 0;
    for &q in assign {
        if relabel[q] == usize::MAX {
            relabel[q] = next;
            next += 1;
        }
    }
    // Labels that never occur keep order after the used ones.
    for r in relabel.iter_mut().filter(|r| **r == usize::MAX) {
        *r = next;
        next += 1;
    }
    assign.iter().map(|&q| relabel[q]).collect()
}

/// Per-block partitions with subgraph counts halving (ceil) from one block to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSeries {
    pub plans: Vec<PartitionPlan>,
    /// `merges[i][s]` is the subgraph of `plans[i + 1]` that absorbs subgraph `s` of `plans[i]`.
    pub merges: Vec<Vec<usize>>,
}

impl ScaleSeries {
    pub fn levels(&self) -> usize {
        self.plans.len()
    }

    /// Checks the halving relation and that each coarse subgraph is the union of its merged parts.
    pub fn validate(&self) -> Result<()> {
        for plan in &self.plans {
            plan.validate()?;
        }
        for (i, merge) in self.merges.iter().enumerate() {
            let (fine, coarse) = (&self.plans[i], &self.plans[i + 1]);
            if coarse.p != fine.p.div_ceil(2) {
                return Err(Error::Contract(format!(
                    "level {} has {} subgraphs, expected {}",
                    i + 1,
                    coarse.p,
                    fine.p.div_ceil(2)
                )));
            }
            if merge.len() != fine.p {
                return Err(Error::Contract(format!(
                    "merge map {i} has {} entries for {} subgraphs",
                    merge.len(),
                    fine.p
                )));
            }
            for node in 0..fine.n {
                if merge[fine.assign[node]] != coarse.assign[node] {
                    return Err(Error::Contract(format!(
                        "node {node} breaks nesting between levels {i} and {}",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Inter-subgraph cut weights, `p×p` symmetric.
pub fn cut_matrix(g: &SpatialGraph, assign: &[usize], p: usize) -> Vec<f64> {
    let mut w = vec![0.0; p * p];
    for (a, b, weight) in g.edges() {
        let (pa, pb) = (assign[a], assign[b]);
        if pa != pb {
            w[pa * p + pb] += weight;
            w[pb * p + pa] += weight;
        }
    }
    w
}

/// Pairs subgraphs greedily by largest shared cut weight (ties: lowest indices).
///
/// Returns the fine→coarse map; coarse ids follow the smallest fine id in
/// each pair. An odd subgraph out keeps its own coarse id.
pub fn pair_merge(cut: &[f64], p: usize) -> Vec<usize> {
    let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (a + 1..p).map(move |b| (a, b))).collect();
    pairs.sort_by(|x, y| cut[y.0 * p + y.1].total_cmp(&cut[x.0 * p + x.1]).then(x.cmp(y)));
    let mut mate = vec![usize::MAX; p];
    for (a, b) in pairs {
        if mate[a] == usize::MAX && mate[b] == usize::MAX {
            mate[a] = b;
            mate[b] = a;
        }
    }
    let mut map = vec![usize::MAX; p];
    let mut next = 0;
    for s in 0..p {
        if map[s] == usize::MAX {
            map[s] = next;
            if mate[s] != usize::MAX {
                map[mate[s]] = next;
            }
            next += 1;
        }
    }
    map
}

/// Partition series for `l` stacked blocks, starting from `p0` subgraphs.
pub fn build_scale_series(
    g: &SpatialGraph,
    p0: usize,
    l: usize,
    balance_factor: f64,
    seed: u64,
) -> Result<ScaleSeries> {
    if p0 == 0 || l == 0 {
        return Err(Error::Input(format!("need p0 >= 1 and l >= 1, got p0={p0}, l={l}")));
    }
    let max_levels = (usize::BITS - p0.leading_zeros()) as usize;
    if l > max_levels {
        return Err(Error::Input(format!(
            "{l} levels need at least {} initial subgraphs; with p0 = {p0} the maximum feasible level count is {max_levels}",
            1usize << (l - 1)
        )));
    }
    let first = partition_kway(g, p0, balance_factor, seed)?;
    let mut plans = vec![first];
    let mut merges = Vec::new();
    for _ in 1..l {
        let prev = plans.last().expect("non-empty");
        let cut = cut_matrix(g, &prev.assign, prev.p);
        let map = pair_merge(&cut, prev.p);
        let p = prev.p.div_ceil(2);
        let assign: Vec<usize> = prev.assign.iter().map(|&s| map[s]).collect();
        let edge_cut = edge_cut(g, &assign);
        let plan = PartitionPlan::from_assignment(assign, p, balance_factor, seed, edge_cut)?;
        merges.push(map);
        plans.push(plan);
    }
    Ok(ScaleSeries { plans, merges })
}
