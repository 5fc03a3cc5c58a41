//! Louvain-based graph partitioning into client shards, plus the node- and
//! topology-variation perturbations used for heterogeneity studies.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedTadError, Result};
use crate::graph::{build_graph, Graph};
use crate::reliability::ReliabilityVector;

/// Node-to-client assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    #[serde(rename = "K")]
    pub k: usize,
    pub assignments: Vec<usize>,
}

/// One client's induced subgraph with locally re-indexed split sets.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub graph: Graph,
    /// local index -> global node id
    pub global_ids: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub reliability: Option<ReliabilityVector>,
}

// ---------------------------------------------------------------------------
// Louvain
// ---------------------------------------------------------------------------

/// Weighted multigraph level used during coarsening.
struct LevelGraph {
    /// neighbor -> weight, excluding self
    adj: Vec<BTreeMap<usize, f64>>,
    /// self-loop weight (counted twice in strength, as usual)
    self_loop: Vec<f64>,
    total_weight: f64, // m: sum of edge weights, self-loops included once
}

impl LevelGraph {
    fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    fn strength(&self, u: usize) -> f64 {
        self.adj[u].values().sum::<f64>() + 2.0 * self.self_loop[u]
    }
}

/// Modularity of a community labeling on an unweighted [`Graph`].
pub fn modularity(g: &Graph, communities: &[usize]) -> f64 {
    let m = g.num_edges() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let ncomm = communities.iter().max().map_or(0, |&c| c + 1);
    let mut intra = vec![0.0f64; ncomm];
    let mut tot = vec![0.0f64; ncomm];
    for u in 0..g.num_nodes {
        tot[communities[u]] += g.degree(u) as f64;
        for &v in g.neighbors(u) {
            if communities[u] == communities[v] {
                intra[communities[u]] += 0.5; // each intra edge seen twice
            }
        }
    }
    (0..ncomm)
        .map(|c| intra[c] / m - (tot[c] / (2.0 * m)).powi(2))
        .sum()
}

fn level_modularity(lg: &LevelGraph, comm: &[usize]) -> f64 {
    let m = lg.total_weight;
    let ncomm = comm.iter().max().map_or(0, |&c| c + 1);
    let mut intra = vec![0.0f64; ncomm];
    let mut tot = vec![0.0f64; ncomm];
    for u in 0..lg.num_nodes() {
        tot[comm[u]] += lg.strength(u);
        intra[comm[u]] += lg.self_loop[u];
        for (&v, &w) in &lg.adj[u] {
            if comm[u] == comm[v] {
                intra[comm[u]] += 0.5 * w;
            }
        }
    }
    (0..ncomm)
        .map(|c| intra[c] / m - (tot[c] / (2.0 * m)).powi(2))
        .sum()
}

/// One pass of local moving. Returns the (renumbered) communities and whether
/// anything moved.
fn local_moving(lg: &LevelGraph, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    let n = lg.num_nodes();
    let m2 = 2.0 * lg.total_weight;
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot: Vec<f64> = (0..n).map(|u| lg.strength(u)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut moved_any = false;
    loop {
        let mut moved = false;
        for &u in &order {
            let ku = lg.strength(u);
            let cur = comm[u];
            tot[cur] -= ku;
            // weights from u to each neighboring community
            let mut to_comm: BTreeMap<usize, f64> = BTreeMap::new();
            to_comm.insert(cur, 0.0);
            for (&v, &w) in &lg.adj[u] {
                *to_comm.entry(comm[v]).or_insert(0.0) += w;
            }
            let mut best = cur;
            let mut best_gain = to_comm[&cur] - tot[cur] * ku / m2;
            for (&c, &w_uc) in &to_comm {
                let gain = w_uc - tot[c] * ku / m2;
                if gain > best_gain + 1e-7 {
                    best = c;
                    best_gain = gain;
                }
            }
            tot[best] += ku;
            if best != cur {
                comm[u] = best;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    // renumber to 0..k
    let mut remap = BTreeMap::new();
    for c in comm.iter_mut() {
        let next = remap.len();
        let id = *remap.entry(*c).or_insert(next);
        *c = id;
    }
    (comm, moved_any)
}

fn coarsen(lg: &LevelGraph, comm: &[usize]) -> LevelGraph {
    let k = comm.iter().max().map_or(0, |&c| c + 1);
    let mut adj: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
    let mut self_loop = vec![0.0f64; k];
    for u in 0..lg.num_nodes() {
        self_loop[comm[u]] += lg.self_loop[u];
        for (&v, &w) in &lg.adj[u] {
            if comm[u] == comm[v] {
                self_loop[comm[u]] += 0.5 * w;
            } else {
                *adj[comm[u]].entry(comm[v]).or_insert(0.0) += w;
            }
        }
    }
    // self_loop accumulated intra edges twice (u->v and v->u), each at 0.5
    LevelGraph {
        adj,
        self_loop,
        total_weight: lg.total_weight,
    }
}

/// Modularity-maximizing Louvain community detection. Node visit order is
/// shuffled by `seed`; the result is deterministic for a fixed seed.
pub fn louvain(g: &Graph, seed: u64) -> Result<Vec<usize>> {
    if g.num_edges() == 0 {
        return Err(FedTadError::Partition(
            "louvain requires a graph with at least one edge".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lg = LevelGraph {
        adj: (0..g.num_nodes)
            .map(|u| g.neighbors(u).iter().map(|&v| (v, 1.0)).collect())
            .collect(),
        self_loop: vec![0.0; g.num_nodes],
        total_weight: g.num_edges() as f64,
    };
    // node -> community, refined across levels
    let mut membership: Vec<usize> = (0..g.num_nodes).collect();
    let mut q = level_modularity(&lg, &(0..g.num_nodes).collect::<Vec<_>>());
    loop {
        let (comm, moved) = local_moving(&lg, &mut rng);
        if !moved {
            break;
        }
        let new_q = level_modularity(&lg, &comm);
        for c in membership.iter_mut() {
            *c = comm[*c];
        }
        lg = coarsen(&lg, &comm);
        if new_q - q < 1e-7 {
            break;
        }
        q = new_q;
    }
    Ok(membership)
}

// ---------------------------------------------------------------------------
// Community -> client assignment
// ---------------------------------------------------------------------------

/// Greedy balanced packing: communities sorted largest-first, each assigned
/// to the currently smallest client. If there are fewer communities than `K`,
/// the largest is split in half (by node order) until there are enough.
pub fn assign_communities(communities: &[usize], k: usize, _seed: u64) -> Result<Partition> {
    let n = communities.len();
    if k < 1 || k > n {
        return Err(FedTadError::Partition(format!(
            "client count {} outside [1, {}]",
            k, n
        )));
    }
    let ncomm = communities.iter().max().map_or(0, |&c| c + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); ncomm];
    for (node, &c) in communities.iter().enumerate() {
        groups[c].push(node);
    }
    groups.retain(|g| !g.is_empty());
    while groups.len() < k {
        groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
        let big = groups.remove(0);
        let mid = big.len() / 2;
        let (a, b) = big.split_at(mid.max(1));
        groups.push(a.to_vec());
        if !b.is_empty() {
            groups.push(b.to_vec());
        }
    }
    // largest first; ties by first node id for determinism
    groups.sort_by_key(|g| (std::cmp::Reverse(g.len()), g[0]));
    let mut assignments = vec![0usize; n];
    let mut sizes = vec![0usize; k];
    for group in &groups {
        let target = (0..k).min_by_key(|&c| (sizes[c], c)).unwrap();
        for &node in group {
            assignments[node] = target;
        }
        sizes[target] += group.len();
    }
    Ok(Partition { k, assignments })
}

// ---------------------------------------------------------------------------
// Shard induction
// ---------------------------------------------------------------------------

/// Largest-remainder apportionment of `n` items over the three split ratios;
/// ties go to train, then val, then test.
fn apportion(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let r = [ratios.0, ratios.1, ratios.2];
    let exact: Vec<f64> = r.iter().map(|&x| x * n as f64).collect();
    let mut out = [0usize; 3];
    let mut used = 0;
    for i in 0..3 {
        out[i] = exact[i].floor() as usize;
        used += out[i];
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut rest = n - used;
    for &i in &order {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

/// Induce per-client subgraphs and stratified-by-class train/val/test splits.
pub fn induce_shards(
    g: &Graph,
    partition: &Partition,
    split_ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let sum = split_ratios.0 + split_ratios.1 + split_ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(FedTadError::Partition(format!(
            "split ratios sum to {}, expected 1",
            sum
        )));
    }
    let mut shards = Vec::with_capacity(partition.k);
    for client in 0..partition.k {
        let global_ids: Vec<usize> = (0..g.num_nodes)
            .filter(|&u| partition.assignments[u] == client)
            .collect();
        if global_ids.is_empty() {
            return Err(FedTadError::Partition(format!("client {} is empty", client)));
        }
        let mut local_of = vec![usize::MAX; g.num_nodes];
        for (local, &global) in global_ids.iter().enumerate() {
            local_of[global] = local;
        }
        let mut edges = Vec::new();
        for &u in &global_ids {
            for &v in g.neighbors(u) {
                if u < v && local_of[v] != usize::MAX {
                    edges.push((local_of[u], local_of[v]));
                }
            }
        }
        let features: Vec<Vec<f64>> = global_ids
            .iter()
            .map(|&u| g.features.row(u).to_vec())
            .collect();
        let labels: Vec<i64> = global_ids.iter().map(|&u| g.labels[u]).collect();
        let sub = build_graph(&edges, features, labels, g.num_classes)?;

        // per-class stratified split of labeled nodes
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (client as u64).wrapping_mul(0x9e3779b9));
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); g.num_classes];
        for local in 0..sub.num_nodes {
            if let Some(c) = sub.label(local) {
                by_class[c].push(local);
            }
        }
        if by_class.iter().all(|v| v.is_empty()) {
            return Err(FedTadError::Partition(format!(
                "client {} has no labeled nodes; try a different seed or K",
                client
            )));
        }
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for nodes in by_class.iter_mut() {
            nodes.shuffle(&mut rng);
            let [nt, nv, _] = apportion(nodes.len(), split_ratios);
            train.extend_from_slice(&nodes[..nt]);
            val.extend_from_slice(&nodes[nt..nt + nv]);
            test.extend_from_slice(&nodes[nt + nv..]);
        }
        if train.is_empty() {
            return Err(FedTadError::Partition(format!(
                "client {} has an empty train split; try a different seed or K",
                client
            )));
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        shards.push(ClientShard {
            client_id: client,
            graph: sub,
            global_ids,
            train_idx: train,
            val_idx: val,
            test_idx: test,
            reliability: None,
        });
    }
    Ok(shards)
}

// ---------------------------------------------------------------------------
// §-style decoupling perturbations
// ---------------------------------------------------------------------------

/// Remove every edge, keeping features, labels and splits untouched.
pub fn simulate_node_variation(shards: Vec<ClientShard>) -> Vec<ClientShard> {
    shards
        .into_iter()
        .map(|s| {
            let g = &s.graph;
            let features = (0..g.num_nodes).map(|u| g.features.row(u).to_vec()).collect();
            let edgeless = build_graph(&[], features, g.labels.clone(), g.num_classes)
                .expect("edgeless rebuild cannot fail");
            ClientShard {
                graph: edgeless,
                ..s
            }
        })
        .collect()
}

/// Give `k` clients a copy of `base` with `edges_to_add` uniformly sampled
/// previously-absent edges each; client 0 keeps the unperturbed copy when
/// `keep_first_unperturbed` is set.
pub fn simulate_topology_variation(
    base: &ClientShard,
    k: usize,
    edges_to_add: usize,
    keep_first_unperturbed: bool,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    let g = &base.graph;
    let n = g.num_nodes;
    let max_edges = n * (n - 1) / 2;
    let capacity = max_edges - g.num_edges();
    if edges_to_add > capacity {
        return Err(FedTadError::Partition(format!(
            "cannot add {} edges, only {} absent pairs remain",
            edges_to_add, capacity
        )));
    }
    let mut out = Vec::with_capacity(k);
    for client in 0..k {
        if edges_to_add == 0 || (keep_first_unperturbed && client == 0) {
            let mut copy = base.clone();
            copy.client_id = client;
            out.push(copy);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((client as u64) << 32));
        let mut existing: std::collections::BTreeSet<(usize, usize)> =
            g.edge_list().into_iter().collect();
        let mut added = 0;
        while added < edges_to_add {
            let u = rng.gen_range(0..n);
            let v = rng.gen_range(0..n);
            if u == v {
                continue;
            }
            let e = (u.min(v), u.max(v));
            if existing.insert(e) {
                added += 1;
            }
        }
        let edges: Vec<(usize, usize)> = existing.into_iter().collect();
        let features = (0..n).map(|u| g.features.row(u).to_vec()).collect();
        let perturbed = build_graph(&edges, features, g.labels.clone(), g.num_classes)?;
        let mut shard = base.clone();
        shard.client_id = client;
        shard.graph = perturbed;
        out.push(shard);
    }
    Ok(out)
}
