//! Communication-round state machine: client selection, local training,
//! FedAvg aggregation, optional distillation post-processing, evaluation.

use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, DistillTraceRow, FedTadServer};
use crate::error::{FedTadError, Result};
use crate::graph::gcn_normalize;
use crate::nn::{accuracy, masked_cross_entropy, GcnModel, ModelWeights};
use crate::partition::ClientShard;
use crate::reliability::{knowledge_reliability, perturb_reliability};
use crate::tensor::{OptimKind, Optimizer, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostProcessor {
    None,
    FedTad,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_fraction: f64,
    pub num_clients: usize,
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    #[serde(default = "default_aggregator")]
    pub aggregator: String,
    pub post_processor: PostProcessor,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default = "default_split")]
    pub split_ratios: (f64, f64, f64),
    #[serde(default = "default_walk")]
    pub walk_length: usize,
    #[serde(default)]
    pub reliability_noise: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_hidden() -> usize {
    64
}
fn default_dropout() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    1e-2
}
fn default_wd() -> f64 {
    5e-4
}
fn default_optimizer() -> String {
    "adam".into()
}
fn default_aggregator() -> String {
    "fedavg".into()
}
fn default_split() -> (f64, f64, f64) {
    (0.2, 0.4, 0.4)
}
fn default_walk() -> usize {
    5
}
fn default_workers() -> usize {
    1
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(FedTadError::Config("rounds must be >= 1".into()));
        }
        if self.local_epochs < 1 {
            return Err(FedTadError::Config("local_epochs must be >= 1".into()));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(FedTadError::Config(
                "client_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.aggregator != "fedavg" {
            return Err(FedTadError::Config(format!(
                "unknown aggregator '{}'",
                self.aggregator
            )));
        }
        if self.optimizer != "adam" && self.optimizer != "sgd" {
            return Err(FedTadError::Config(format!(
                "unknown optimizer '{}'",
                self.optimizer
            )));
        }
        if self.post_processor == PostProcessor::FedTad {
            self.distill.validate()?;
        }
        Ok(())
    }

    fn optim_kind(&self) -> OptimKind {
        if self.optimizer == "sgd" {
            OptimKind::Sgd
        } else {
            OptimKind::Adam
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub global_test_acc: f64,
    pub mean_local_val_acc: f64,
    pub seconds: f64,
}

pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_weights: ModelWeights,
    pub distill_trace: Vec<DistillTraceRow>,
    /// reliability vectors as uploaded (after optional noise)
    pub uploaded_reliability: Vec<crate::reliability::ReliabilityVector>,
}

/// Uniform sample without replacement of ceil(fraction * k) clients,
/// deterministic per (seed, round).
pub fn select_clients(k: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let m = ((fraction * k as f64).ceil() as usize).clamp(1, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((round as u64).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95)));
    let mut ids: Vec<usize> = (0..k).collect();
    ids.shuffle(&mut rng);
    let mut chosen: Vec<usize> = ids.into_iter().take(m).collect();
    chosen.sort_unstable();
    chosen
}

/// Hyperparameters needed by one local training call.
#[derive(Debug, Clone, Copy)]
pub struct LocalTrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimKind,
    pub dropout: f64,
}

/// Full-batch local training from a copy of the global weights; the global
/// weights themselves are untouched.
pub fn local_update(
    shard: &ClientShard,
    global_weights: &ModelWeights,
    params: LocalTrainParams,
    seed: u64,
) -> Result<ModelWeights> {
    let mut model = GcnModel::from_weights(global_weights, params.dropout)?;
    let norm_adj = Rc::new(gcn_normalize(&shard.graph).matrix.clone());
    let mut opt = match params.optimizer {
        OptimKind::Adam => Optimizer::adam(params.learning_rate, params.weight_decay),
        OptimKind::Sgd => Optimizer::sgd(params.learning_rate, params.weight_decay),
    };
    for epoch in 0..params.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
        let tape = Tape::new();
        let x = tape.constant(shard.graph.features.clone());
        let (logits, vars) = model.forward(&tape, norm_adj.clone(), x, true, true, &mut rng)?;
        let vars = vars.expect("trainable local model");
        let loss = masked_cross_entropy(&tape, logits, &shard.graph.labels, &shard.train_idx)?;
        tape.backward(loss).map_err(|e| {
            FedTadError::Tensor(format!("client {}: {}", shard.client_id, e))
        })?;
        let grads = vec![tape.grad(vars.w1)?, tape.grad(vars.w2)?];
        let mut ps = vec![
            std::mem::take(&mut model.w1),
            std::mem::take(&mut model.w2),
        ];
        opt.step(&mut ps, &grads)?;
        model.w2 = ps.pop().unwrap();
        model.w1 = ps.pop().unwrap();
    }
    Ok(model.weights())
}

/// Node-count-weighted average of local weights; summation runs in the given
/// (ascending client id) order.
pub fn fedavg_aggregate(
    weights_list: &[ModelWeights],
    node_counts: &[usize],
) -> Result<ModelWeights> {
    if weights_list.is_empty() {
        return Err(FedTadError::Tensor("fedavg over an empty client set".into()));
    }
    if weights_list.len() != node_counts.len() {
        return Err(FedTadError::Tensor(format!(
            "{} weight sets for {} node counts",
            weights_list.len(),
            node_counts.len()
        )));
    }
    let total: usize = node_counts.iter().sum();
    let first = &weights_list[0];
    for w in weights_list.iter().skip(1) {
        for (a, b) in first.entries.iter().zip(&w.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(FedTadError::Tensor(format!(
                    "weight tensor mismatch: {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
    }
    let mut out = first.clone();
    for entry in out.entries.iter_mut() {
        entry.values.iter_mut().for_each(|v| *v = 0.0);
    }
    for (w, &count) in weights_list.iter().zip(node_counts) {
        let coeff = count as f64 / total as f64;
        for (acc, src) in out.entries.iter_mut().zip(&w.entries) {
            for (a, &s) in acc.values.iter_mut().zip(&src.values) {
                *a += coeff * s;
            }
        }
    }
    Ok(out)
}

/// Eval-mode logits for one shard.
fn shard_logits(model: &GcnModel, shard: &ClientShard) -> Result<ndarray::Array2<f64>> {
    let norm_adj = Rc::new(gcn_normalize(&shard.graph).matrix.clone());
    let tape = Tape::new();
    let x = tape.constant(shard.graph.features.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, _) = model.forward(&tape, norm_adj, x, false, false, &mut rng)?;
    Ok(tape.value(logits))
}

/// Accuracy of the global model over the union of all clients' test masks,
/// each client evaluated on its own subgraph.
pub fn evaluate_global(weights: &ModelWeights, shards: &[ClientShard]) -> Result<(f64, f64)> {
    let model = GcnModel::from_weights(weights, 0.0)?;
    let mut test_hits = 0.0;
    let mut test_total = 0usize;
    let mut val_accs = Vec::new();
    for shard in shards {
        let logits = shard_logits(&model, shard)?;
        let acc = accuracy(&logits, &shard.graph.labels, &shard.test_idx);
        test_hits += acc * shard.test_idx.len() as f64;
        test_total += shard.test_idx.len();
        if !shard.val_idx.is_empty() {
            val_accs.push(accuracy(&logits, &shard.graph.labels, &shard.val_idx));
        }
    }
    let test_acc = if test_total == 0 {
        0.0
    } else {
        test_hits / test_total as f64
    };
    let val_acc = if val_accs.is_empty() {
        0.0
    } else {
        val_accs.iter().sum::<f64>() / val_accs.len() as f64
    };
    Ok((test_acc, val_acc))
}

fn run_local_updates(
    shards: &[ClientShard],
    selected: &[usize],
    global: &ModelWeights,
    params: LocalTrainParams,
    cfg_seed: u64,
    round: usize,
    workers: usize,
) -> Result<Vec<ModelWeights>> {
    let seed_of = |client: usize| {
        cfg_seed
            .wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add((round as u64) << 20)
            .wrapping_add(client as u64)
    };
    if workers <= 1 || selected.len() <= 1 {
        return selected
            .iter()
            .map(|&c| local_update(&shards[c], global, params, seed_of(c)))
            .collect();
    }
    // deterministic: each client's result lands in its slot regardless of
    // worker scheduling
    let mut results: Vec<Option<Result<ModelWeights>>> = Vec::new();
    results.resize_with(selected.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in selected
            .iter()
            .enumerate()
            .collect::<Vec<_>>()
            .chunks((selected.len() + workers - 1) / workers)
        {
            let chunk: Vec<(usize, usize)> = chunk.iter().map(|&(i, &c)| (i, c)).collect();
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|(i, c)| (i, local_update(&shards[c], global, params, seed_of(c))))
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Execute the whole federation: client-side reliability initialization,
/// then `rounds` cycles of select / local update / aggregate / optional
/// refine / evaluate.
pub fn run_federation(shards: &mut [ClientShard], cfg: &FedConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if shards.is_empty() {
        return Err(FedTadError::Config("no client shards".into()));
    }
    let feature_dim = shards[0].graph.feature_dim;
    let num_classes = shards[0].graph.num_classes;

    // client-side initialization: reliability measured once before round 1
    let mut uploaded = Vec::with_capacity(shards.len());
    for (k, shard) in shards.iter_mut().enumerate() {
        let mut phi = knowledge_reliability(shard, cfg.walk_length);
        if cfg.reliability_noise > 0.0 {
            phi = perturb_reliability(&phi, cfg.reliability_noise, cfg.seed.wrapping_add(k as u64));
        }
        shard.reliability = Some(phi.clone());
        uploaded.push(phi);
    }

    let mut global = GcnModel::new(feature_dim, cfg.hidden_dim, num_classes, cfg.dropout, cfg.seed)
        .weights();
    let mut server = (cfg.post_processor == PostProcessor::FedTad).then(|| {
        FedTadServer::new(cfg.distill.clone(), feature_dim, num_classes, 0.0, cfg.seed)
    });
    let params = LocalTrainParams {
        epochs: cfg.local_epochs,
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        optimizer: cfg.optim_kind(),
        dropout: cfg.dropout,
    };

    let mut records = Vec::with_capacity(cfg.rounds);
    let mut trace = Vec::new();
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let wrap = |e: FedTadError| FedTadError::Round {
            round,
            source: Box::new(e),
        };
        let selected = select_clients(shards.len(), cfg.client_fraction, round, cfg.seed);
        let locals = run_local_updates(
            shards, &selected, &global, params, cfg.seed, round, cfg.workers,
        )
        .map_err(wrap)?;
        let node_counts: Vec<usize> = selected.iter().map(|&c| shards[c].graph.num_nodes).collect();
        global = fedavg_aggregate(&locals, &node_counts).map_err(wrap)?;
        if let Some(server) = server.as_mut() {
            let phi: Vec<_> = selected.iter().map(|&c| uploaded[c].clone()).collect();
            global = server
                .refine(&global, &locals, &phi, round, &mut trace)
                .map_err(wrap)?;
        }
        let (test_acc, val_acc) = evaluate_global(&global, shards).map_err(wrap)?;
        records.push(RoundRecord {
            round,
            selected,
            global_test_acc: test_acc,
            mean_local_val_acc: val_acc,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(RunOutput {
        records,
        final_weights: global,
        distill_trace: trace,
        uploaded_reliability: uploaded,
    })
}
