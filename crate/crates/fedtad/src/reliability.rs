//! Client-side measurement: class-wise homophily and class-wise knowledge
//! reliability from topology-aware node embeddings.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{diffusion_diagonals, transition_matrix, Graph};
use crate::partition::ClientShard;

/// Per-class nonnegative reliability scores uploaded by a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityVector {
    pub phi: Vec<f64>,
}

impl ReliabilityVector {
    pub fn num_classes(&self) -> usize {
        self.phi.len()
    }
}

/// Fraction of edges incident to class `c` whose both endpoints are class
/// `c`. `None` when no edge touches the class.
pub fn class_homophily(g: &Graph, c: usize) -> Option<f64> {
    let mut both = 0usize;
    let mut any = 0usize;
    for (u, v) in g.edge_list() {
        let lu = g.label(u) == Some(c);
        let lv = g.label(v) == Some(c);
        if lu && lv {
            both += 1;
        }
        if lu || lv {
            any += 1;
        }
    }
    if any == 0 {
        None
    } else {
        Some(both as f64 / any as f64)
    }
}

/// Node features concatenated with the return-probability profile of walk
/// lengths `1..=p`. Width is always `F + p`.
pub fn hybrid_embeddings(g: &Graph, p: usize) -> Array2<f64> {
    let diag = diffusion_diagonals(&transition_matrix(g), p);
    let n = g.num_nodes;
    let f = g.feature_dim;
    let mut out = Array2::zeros((n, f + p));
    out.slice_mut(ndarray::s![.., ..f]).assign(&g.features);
    out.slice_mut(ndarray::s![.., f..]).assign(&diag);
    out
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt() + 1e-12;
    let nb = b.dot(&b).sqrt() + 1e-12;
    a.dot(&b) / (na * nb)
}

/// Class-wise knowledge reliability: for each class, the sum over labeled
/// train nodes of that class of the mean neighbor cosine similarity of
/// hybrid embeddings. Isolated nodes contribute 0; negative per-node means
/// are clamped at 0.
pub fn knowledge_reliability(shard: &ClientShard, p: usize) -> ReliabilityVector {
    let g = &shard.graph;
    let emb = hybrid_embeddings(g, p);
    let mut phi = vec![0.0f64; g.num_classes];
    for &i in &shard.train_idx {
        let c = match g.label(i) {
            Some(c) => c,
            None => continue,
        };
        let neighbors = g.neighbors(i);
        if neighbors.is_empty() {
            continue;
        }
        let mean: f64 = neighbors
            .iter()
            .map(|&j| cosine(emb.row(i), emb.row(j)))
            .sum::<f64>()
            / neighbors.len() as f64;
        phi[c] += mean.max(0.0);
    }
    ReliabilityVector { phi }
}

/// Multiplicative Gaussian perturbation of the uploaded scores, clamped at 0.
pub fn perturb_reliability(
    phi: &ReliabilityVector,
    noise_level: f64,
    seed: u64,
) -> ReliabilityVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = phi
        .phi
        .iter()
        .map(|&v| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            (v * (1.0 + noise_level * eps)).max(0.0)
        })
        .collect();
    ReliabilityVector { phi }
}
