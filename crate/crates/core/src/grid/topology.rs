//! Bus/branch connectivity: adjacency lists, island labelling, bridge
//! detection and per-island reference selection.

use std::cmp::Reverse;
use std::collections::{BTreeSet, VecDeque};

use super::GridCase;
use crate::error::TopologyError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Link {
    /// Branch position in `GridCase::branches`.
    pub branch: usize,
    /// Bus position at the far end.
    pub far: usize,
}

/// Adjacency of in-service branches plus island labels for every bus.
#[derive(Clone, Debug)]
pub struct LinkNet {
    adjacency: Vec<Vec<Link>>,
    island_of: Vec<usize>,
    islands: Vec<Vec<usize>>,
    in_service: Vec<bool>,
}

impl LinkNet {
    /// Builds the index using only branches for which `in_service` holds.
    pub fn build(case: &GridCase, in_service: impl Fn(usize) -> bool) -> Self {
        let n = case.n_buses();
        let mut adjacency = vec![Vec::new(); n];
        let mut active = vec![false; case.n_branches()];
        for k in 0..case.n_branches() {
            if !in_service(k) {
                continue;
            }
            active[k] = true;
            let (f, t) = case.terminals(k);
            adjacency[f].push(Link { branch: k, far: t });
            adjacency[t].push(Link { branch: k, far: f });
        }

        let mut island_of = vec![usize::MAX; n];
        let mut islands = Vec::new();
        for start in 0..n {
            if island_of[start] != usize::MAX {
                continue;
            }
            let label = islands.len();
            let mut members = vec![start];
            island_of[start] = label;
            let mut queue = VecDeque::from([start]);
            while let Some(b) = queue.pop_front() {
                for link in &adjacency[b] {
                    if island_of[link.far] == usize::MAX {
                        island_of[link.far] = label;
                        members.push(link.far);
                        queue.push_back(link.far);
                    }
                }
            }
            members.sort_unstable();
            islands.push(members);
        }

        LinkNet { adjacency, island_of, islands, in_service: active }
    }

    pub fn adjacency(&self, bus: usize) -> &[Link] {
        &self.adjacency[bus]
    }

    pub fn degree(&self, bus: usize) -> usize {
        self.adjacency[bus].len()
    }

    pub fn island_of(&self, bus: usize) -> usize {
        self.island_of[bus]
    }

    pub fn islands(&self) -> &[Vec<usize>] {
        &self.islands
    }

    pub fn n_islands(&self) -> usize {
        self.islands.len()
    }

    pub fn branch_in_service(&self, branch: usize) -> bool {
        self.in_service[branch]
    }

    pub fn n_buses(&self) -> usize {
        self.adjacency.len()
    }
}

/// Adjacency from in-service branches.
pub fn build_linknet(case: &GridCase) -> LinkNet {
    LinkNet::build(case, |k| case.branches[k].status)
}

/// Branch ids whose removal increases the island count (graph bridges).
/// Parallel circuits between the same bus pair are never bridges.
pub fn find_radial_branches(case: &GridCase, idx: &LinkNet) -> BTreeSet<u32> {
    let n = idx.n_buses();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut timer = 0;
    let mut bridges = BTreeSet::new();

    // Iterative Tarjan: (bus, entering branch, next adjacency slot).
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(&mut (bus, via, ref mut slot)) = stack.last_mut() {
            if let Some(link) = idx.adjacency(bus).get(*slot).copied() {
                *slot += 1;
                if Some(link.branch) == via {
                    continue;
                }
                if disc[link.far] == usize::MAX {
                    disc[link.far] = timer;
                    low[link.far] = timer;
                    timer += 1;
                    stack.push((link.far, Some(link.branch), 0));
                } else {
                    low[bus] = low[bus].min(disc[link.far]);
                }
            } else {
                stack.pop();
                if let (Some(&(parent, _, _)), Some(branch)) = (stack.last(), via) {
                    low[parent] = low[parent].min(low[bus]);
                    if low[bus] > disc[parent] {
                        bridges.insert(case.branches[branch].id);
                    }
                }
            }
        }
    }
    bridges
}

/// Reference bus of an island: the generator bus maximizing
/// (total in-service p_max, node degree), ties to the lowest bus id.
pub fn select_reference_bus(
    idx: &LinkNet,
    case: &GridCase,
    island: usize,
) -> Result<usize, TopologyError> {
    let mut capacity = vec![0.0f64; case.n_buses()];
    let mut has_gen = vec![false; case.n_buses()];
    for (k, g) in case.generators.iter().enumerate() {
        if g.status {
            let b = case.generator_bus(k);
            capacity[b] += g.p_max;
            has_gen[b] = true;
        }
    }
    idx.islands()[island]
        .iter()
        .copied()
        .filter(|&b| has_gen[b])
        .max_by(|&a, &b| {
            capacity[a]
                .total_cmp(&capacity[b])
                .then(idx.degree(a).cmp(&idx.degree(b)))
                .then(Reverse(case.buses[a].id).cmp(&Reverse(case.buses[b].id)))
        })
        .ok_or_else(|| TopologyError::DeadIsland {
            island,
            buses: idx.islands()[island].iter().map(|&b| case.buses[b].id).collect(),
        })
}
