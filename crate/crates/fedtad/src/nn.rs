//! The two trainable networks: a 2-layer GCN classifier and the conditional
//! feature generator, plus their losses and the KNN pseudo-adjacency.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedTadError, Result};
use crate::graph::CsrMatrix;
use crate::tensor::{Tape, Var};

/// Flat, ordered collection of named parameter tensors; the unit exchanged
/// between clients and server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub entries: Vec<WeightEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// row-major values
    pub values: Vec<f64>,
}

impl WeightEntry {
    pub fn from_array(name: &str, a: &Array2<f64>) -> Self {
        WeightEntry {
            name: name.to_string(),
            shape: [a.nrows(), a.ncols()],
            values: a.iter().cloned().collect(),
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.values.clone())
            .expect("weight entry shape consistent")
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s))
}

// ---------------------------------------------------------------------------
// GCN
// ---------------------------------------------------------------------------

/// Two-layer GCN: `A * relu(A * dropout(X) * W1) * W2`.
#[derive(Debug, Clone)]
pub struct GcnModel {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub dropout: f64,
}

/// Tape handles for the trainable GCN parameters of one forward pass.
pub struct GcnVars {
    pub w1: Var,
    pub w2: Var,
}

impl GcnModel {
    pub fn new(feature_dim: usize, hidden: usize, num_classes: usize, dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GcnModel {
            w1: glorot(feature_dim, hidden, &mut rng),
            w2: glorot(hidden, num_classes, &mut rng),
            dropout,
        }
    }

    pub fn weights(&self) -> ModelWeights {
        ModelWeights {
            entries: vec![
                WeightEntry::from_array("gcn.w1", &self.w1),
                WeightEntry::from_array("gcn.w2", &self.w2),
            ],
        }
    }

    pub fn set_weights(&mut self, w: &ModelWeights) -> Result<()> {
        if w.entries.len() != 2 {
            return Err(FedTadError::Tensor(format!(
                "expected 2 gcn weight tensors, got {}",
                w.entries.len()
            )));
        }
        self.w1 = w.entries[0].to_array();
        self.w2 = w.entries[1].to_array();
        Ok(())
    }

    pub fn from_weights(w: &ModelWeights, dropout: f64) -> Result<Self> {
        let mut m = GcnModel {
            w1: Array2::zeros((1, 1)),
            w2: Array2::zeros((1, 1)),
            dropout,
        };
        m.set_weights(w)?;
        Ok(m)
    }

    /// Forward pass on the tape. `x` may itself carry gradient (pseudo
    /// features from the generator). When `trainable` is false the weights
    /// enter as constants.
    pub fn forward(
        &self,
        tape: &Tape,
        norm_adj: Rc<CsrMatrix>,
        x: Var,
        train_mode: bool,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Option<GcnVars>)> {
        let (w1, w2) = if trainable {
            (tape.leaf(self.w1.clone()), tape.leaf(self.w2.clone()))
        } else {
            (tape.constant(self.w1.clone()), tape.constant(self.w2.clone()))
        };
        let x = if train_mode {
            tape.dropout(x, self.dropout, rng)?
        } else {
            x
        };
        let h = tape.spmm(norm_adj.clone(), tape.matmul(x, w1)?)?;
        let h = tape.relu(h)?;
        let logits = tape.spmm(norm_adj, tape.matmul(h, w2)?)?;
        let vars = trainable.then_some(GcnVars { w1, w2 });
        Ok((logits, vars))
    }
}

/// Mean over `mask` of `-log softmax(logits)[label]`.
pub fn masked_cross_entropy(
    tape: &Tape,
    logits: Var,
    labels: &[i64],
    mask: &[usize],
) -> Result<Var> {
    if mask.is_empty() {
        return Err(FedTadError::Tensor("cross entropy over an empty mask".into()));
    }
    let picked = tape.select_rows(logits, mask)?;
    let probs = tape.row_softmax(picked)?;
    let probs = tape.clamp_min(probs, 1e-12)?;
    let logp = tape.log(probs)?;
    let classes: Vec<usize> = mask
        .iter()
        .map(|&i| {
            let l = labels[i];
            if l < 0 {
                Err(FedTadError::Tensor(format!(
                    "cross entropy mask includes unlabeled node {}",
                    i
                )))
            } else {
                Ok(l as usize)
            }
        })
        .collect::<Result<_>>()?;
    let nll = tape.gather_cols(logp, &classes)?;
    let mean = tape.mean(nll)?;
    tape.scale(mean, -1.0)
}

/// Accuracy of argmax predictions over a node mask.
pub fn accuracy(logits: &Array2<f64>, labels: &[i64], mask: &[usize]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for &i in mask {
        let row = logits.row(i);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j as i64)
            .unwrap();
        if pred == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / mask.len() as f64
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Conditional feature generator: 2-layer MLP over `z (+) onehot(y)`.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub noise_dim: usize,
    pub num_classes: usize,
}

pub struct GeneratorVars {
    pub params: [Var; 4],
}

impl GeneratorModel {
    pub fn new(noise_dim: usize, num_classes: usize, hidden: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GeneratorModel {
            w1: glorot(noise_dim + num_classes, hidden, &mut rng),
            b1: Array2::zeros((1, hidden)),
            w2: glorot(hidden, feature_dim, &mut rng),
            b2: Array2::zeros((1, feature_dim)),
            noise_dim,
            num_classes,
        }
    }

    pub fn weights(&self) -> ModelWeights {
        ModelWeights {
            entries: vec![
                WeightEntry::from_array("gen.w1", &self.w1),
                WeightEntry::from_array("gen.b1", &self.b1),
                WeightEntry::from_array("gen.w2", &self.w2),
                WeightEntry::from_array("gen.b2", &self.b2),
            ],
        }
    }

    /// Forward the concatenated `[z | onehot(y)]` input through the MLP.
    pub fn forward(
        &self,
        tape: &Tape,
        input: Var,
        trainable: bool,
    ) -> Result<(Var, Option<GeneratorVars>)> {
        let mk = |a: &Array2<f64>| {
            if trainable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let (w1, b1, w2, b2) = (mk(&self.w1), mk(&self.b1), mk(&self.w2), mk(&self.b2));
        let h = tape.add_row(tape.matmul(input, w1)?, b1)?;
        let h = tape.relu(h)?;
        let out = tape.add_row(tape.matmul(h, w2)?, b2)?;
        let vars = trainable.then_some(GeneratorVars {
            params: [w1, b1, w2, b2],
        });
        Ok((out, vars))
    }
}

/// Label-balanced pseudo labels: floor(B/C) per class, remainder to the
/// lowest class ids, sorted ascending.
pub fn balanced_labels(b: usize, num_classes: usize) -> Vec<usize> {
    let per = b / num_classes;
    let extra = b % num_classes;
    let mut labels = Vec::with_capacity(b);
    for c in 0..num_classes {
        let n = per + usize::from(c < extra);
        labels.extend(std::iter::repeat(c).take(n));
    }
    labels
}

/// Build the `[z | onehot(y)]` generator input for `b` pseudo nodes.
/// Deterministic for a fixed seed.
pub fn generator_input(
    noise_dim: usize,
    num_classes: usize,
    b: usize,
    seed: u64,
) -> (Array2<f64>, Vec<usize>) {
    if b < num_classes {
        crate::util::log(&format!(
            "warning: {} pseudo nodes for {} classes leaves some classes empty",
            b, num_classes
        ));
    }
    let labels = balanced_labels(b, num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = Array2::zeros((b, noise_dim + num_classes));
    for i in 0..b {
        for j in 0..noise_dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            input[[i, j]] = z;
        }
        input[[i, noise_dim + labels[i]]] = 1.0;
    }
    (input, labels)
}

/// Sample pseudo features and labels from the generator (no gradient path).
pub fn generate_features(
    gen: &GeneratorModel,
    b: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let (input, labels) = generator_input(gen.noise_dim, gen.num_classes, b, seed);
    let tape = Tape::new();
    let inp = tape.constant(input);
    let (out, _) = gen.forward(&tape, inp, false)?;
    Ok((tape.value(out), labels))
}

// ---------------------------------------------------------------------------
// KNN pseudo-adjacency
// ---------------------------------------------------------------------------

/// TopK inner-product adjacency over pseudo features: self excluded,
/// symmetrized by union, ties broken by lowest column index. The sigmoid of
/// the similarity is monotone, so selection runs on raw inner products.
pub fn knn_adjacency(x: &Array2<f64>, k: usize) -> Result<CsrMatrix> {
    let b = x.nrows();
    if k >= b {
        return Err(FedTadError::Tensor(format!(
            "knn degree {} must be below node count {}",
            k, b
        )));
    }
    let sims = x.dot(&x.t());
    let mut pairs = std::collections::BTreeSet::new();
    for u in 0..b {
        let mut order: Vec<usize> = (0..b).filter(|&v| v != u).collect();
        order.sort_by(|&a, &c| {
            sims[[u, c]]
                .partial_cmp(&sims[[u, a]])
                .unwrap()
                .then(a.cmp(&c))
        });
        for &v in order.iter().take(k) {
            pairs.insert((u.min(v), u.max(v)));
        }
    }
    let mut triplets = Vec::with_capacity(pairs.len() * 2);
    for &(u, v) in &pairs {
        triplets.push((u, v, 1.0));
        triplets.push((v, u, 1.0));
    }
    Ok(CsrMatrix::from_triplets(b, b, triplets))
}

/// Mean pairwise cosine similarity of the rows (diagonal included).
pub fn diversity_loss(tape: &Tape, x: Var) -> Result<Var> {
    let sims = tape.cosine_similarity_matrix(x)?;
    tape.mean(sims)
}
