//! Server-side post-processing: pseudo-graph generation and the adversarial
//! generation/distillation loop that refines the aggregated global model.

use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedTadError, Result};
use crate::graph::{normalize_csr, CsrMatrix};
use crate::nn::{generator_input, knn_adjacency, GcnModel, GeneratorModel, ModelWeights};
use crate::reliability::ReliabilityVector;
use crate::tensor::{Optimizer, Tape, Var};

/// Pseudo graph: generated features, KNN adjacency, balanced labels.
#[derive(Debug, Clone)]
pub struct PseudoGraph {
    pub features: Array2<f64>,
    pub adjacency: CsrMatrix,
    pub labels: Vec<usize>,
    pub norm_adj: Rc<CsrMatrix>,
}

impl PseudoGraph {
    pub fn from_features(features: Array2<f64>, labels: Vec<usize>, k: usize) -> Result<Self> {
        let adjacency = knn_adjacency(&features, k)?;
        let norm_adj = Rc::new(normalize_csr(&adjacency, features.nrows()).matrix);
        Ok(PseudoGraph {
            features,
            adjacency,
            labels,
            norm_adj,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// outer server-side iterations per round
    pub outer_iters: usize,
    pub gen_iters: usize,
    pub distill_iters: usize,
    /// pseudo node count; 0 selects 4 * num_classes
    #[serde(default)]
    pub pseudo_nodes: usize,
    pub knn_k: usize,
    pub gen_lr: f64,
    pub distill_lr: f64,
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    #[serde(default = "default_gen_hidden")]
    pub gen_hidden: usize,
}

fn default_noise_dim() -> usize {
    32
}

fn default_gen_hidden() -> usize {
    256
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda1: 1e-2,
            lambda2: 1e-2,
            outer_iters: 3,
            gen_iters: 3,
            distill_iters: 5,
            pseudo_nodes: 0,
            knn_k: 5,
            gen_lr: 1e-3,
            distill_lr: 1e-3,
            noise_dim: default_noise_dim(),
            gen_hidden: default_gen_hidden(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters < 1 || self.gen_iters < 1 || self.distill_iters < 1 {
            return Err(FedTadError::Config(
                "distill iteration counts must be >= 1".into(),
            ));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(FedTadError::Config("distill trade-offs must be >= 0".into()));
        }
        Ok(())
    }

    pub fn effective_pseudo_nodes(&self, num_classes: usize) -> usize {
        if self.pseudo_nodes == 0 {
            4 * num_classes
        } else {
            self.pseudo_nodes
        }
    }
}

/// Per-class reliability mixture weights over clients. Columns with positive
/// total reliability sum to 1; all-zero columns mark classes skipped in the
/// losses.
#[derive(Debug, Clone)]
pub struct ReliabilityWeights {
    /// rho[k][c]
    pub rho: Vec<Vec<f64>>,
}

impl ReliabilityWeights {
    pub fn new(phi_list: &[ReliabilityVector]) -> Self {
        let c = phi_list.first().map_or(0, |p| p.num_classes());
        let mut totals = vec![0.0f64; c];
        for phi in phi_list {
            for (j, &v) in phi.phi.iter().enumerate() {
                totals[j] += v;
            }
        }
        let rho = phi_list
            .iter()
            .map(|phi| {
                phi.phi
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| if totals[j] > 0.0 { v / totals[j] } else { 0.0 })
                    .collect()
            })
            .collect();
        ReliabilityWeights { rho }
    }

    pub fn active_classes(&self) -> Vec<usize> {
        let c = self.rho.first().map_or(0, |r| r.len());
        (0..c)
            .filter(|&j| self.rho.iter().any(|r| r[j] > 0.0))
            .collect()
    }
}

fn class_groups(labels: &[usize], classes: &[usize]) -> Vec<(usize, Vec<usize>)> {
    classes
        .iter()
        .filter_map(|&c| {
            let idx: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .map(|(i, _)| i)
                .collect();
            (!idx.is_empty()).then_some((c, idx))
        })
        .collect()
}

fn add_terms(tape: &Tape, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it
        .next()
        .ok_or_else(|| FedTadError::Tensor("empty loss sum".into()))?;
    it.try_fold(first, |acc, t| tape.add(acc, t))
}

/// Reliability-weighted cross entropy of every local model on the pseudo
/// nodes; gradients flow only through the pseudo features.
fn semantic_loss_terms(
    tape: &Tape,
    local_logits: &[Var],
    labels: &[usize],
    rho: &ReliabilityWeights,
) -> Result<Vec<Var>> {
    let groups = class_groups(labels, &rho.active_classes());
    let mut terms = Vec::new();
    for (k, &logits) in local_logits.iter().enumerate() {
        for (c, idx) in &groups {
            let w = rho.rho[k][*c];
            if w == 0.0 {
                continue;
            }
            let rows = tape.select_rows(logits, idx)?;
            let probs = tape.clamp_min(tape.row_softmax(rows)?, 1e-12)?;
            let logp = tape.log(probs)?;
            let picked = tape.gather_cols(logp, &vec![*c; idx.len()])?;
            let ce = tape.scale(tape.sum(picked)?, -w)?;
            terms.push(ce);
        }
    }
    Ok(terms)
}

/// Reliability-weighted KL(global || local) over pseudo nodes.
fn divergence_loss_terms(
    tape: &Tape,
    global_logits: Var,
    local_logits: &[Var],
    labels: &[usize],
    rho: &ReliabilityWeights,
) -> Result<Vec<Var>> {
    let groups = class_groups(labels, &rho.active_classes());
    let mut terms = Vec::new();
    for (k, &logits) in local_logits.iter().enumerate() {
        for (c, idx) in &groups {
            let w = rho.rho[k][*c];
            if w == 0.0 {
                continue;
            }
            let p = tape.clamp_min(
                tape.row_softmax(tape.select_rows(global_logits, idx)?)?,
                1e-12,
            )?;
            let q = tape.clamp_min(tape.row_softmax(tape.select_rows(logits, idx)?)?, 1e-12)?;
            let log_ratio = tape.sub(tape.log(p)?, tape.log(q)?)?;
            let kl = tape.sum(tape.mul(p, log_ratio)?)?;
            terms.push(tape.scale(kl, w)?);
        }
    }
    Ok(terms)
}

/// KL(p || q) of two discrete distributions with q clamped at 1e-12.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * (pi / qi.max(1e-12)).ln()
            }
        })
        .sum()
}

fn forward_locals(
    tape: &Tape,
    locals: &[GcnModel],
    pg_adj: Rc<CsrMatrix>,
    x: Var,
) -> Result<Vec<Var>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval mode: rng unused
    locals
        .iter()
        .map(|m| {
            m.forward(tape, pg_adj.clone(), x, false, false, &mut rng)
                .map(|(logits, _)| logits)
        })
        .collect()
}

/// Standalone semantic loss evaluation on a fixed pseudo graph.
pub fn semantic_loss(
    locals: &[GcnModel],
    rho: &ReliabilityWeights,
    pg: &PseudoGraph,
) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.constant(pg.features.clone());
    let logits = forward_locals(&tape, locals, pg.norm_adj.clone(), x)?;
    let terms = semantic_loss_terms(&tape, &logits, &pg.labels, rho)?;
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(tape.scalar_value(add_terms(&tape, terms)?))
}

/// Standalone divergence loss evaluation on a fixed pseudo graph.
pub fn divergence_loss(
    global: &GcnModel,
    locals: &[GcnModel],
    rho: &ReliabilityWeights,
    pg: &PseudoGraph,
) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.constant(pg.features.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (global_logits, _) = global.forward(&tape, pg.norm_adj.clone(), x, false, false, &mut rng)?;
    let logits = forward_locals(&tape, locals, pg.norm_adj.clone(), x)?;
    let terms = divergence_loss_terms(&tape, global_logits, &logits, &pg.labels, rho)?;
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(tape.scalar_value(add_terms(&tape, terms)?))
}

/// One `distill_trace.csv` row.
#[derive(Debug, Clone)]
pub struct DistillTraceRow {
    pub round: usize,
    pub outer_iter: usize,
    pub semantic: f64,
    pub diversity: f64,
    pub divergence: f64,
}

/// Server-side distiller. The generator and its optimizer state persist
/// across communication rounds.
pub struct FedTadServer {
    pub cfg: DistillConfig,
    pub generator: GeneratorModel,
    gen_opt: Optimizer,
    num_classes: usize,
    dropout: f64,
    seed: u64,
}

impl FedTadServer {
    pub fn new(cfg: DistillConfig, feature_dim: usize, num_classes: usize, dropout: f64, seed: u64) -> Self {
        let generator = GeneratorModel::new(
            cfg.noise_dim,
            num_classes,
            cfg.gen_hidden,
            feature_dim,
            seed ^ 0xfeed,
        );
        let gen_opt = Optimizer::adam(cfg.gen_lr, 0.0);
        FedTadServer {
            cfg,
            generator,
            gen_opt,
            num_classes,
            dropout,
            seed,
        }
    }

    /// Run the adversarial refinement loop of one round and return the
    /// refined global weights.
    pub fn refine(
        &mut self,
        global: &ModelWeights,
        locals: &[ModelWeights],
        phi_list: &[ReliabilityVector],
        round: usize,
        trace: &mut Vec<DistillTraceRow>,
    ) -> Result<ModelWeights> {
        let rho = ReliabilityWeights::new(phi_list);
        if rho.active_classes().is_empty() || locals.is_empty() {
            return Ok(global.clone());
        }
        let local_models: Vec<GcnModel> = locals
            .iter()
            .map(|w| GcnModel::from_weights(w, self.dropout))
            .collect::<Result<_>>()?;
        let mut global_model = GcnModel::from_weights(global, self.dropout)?;
        // plain SGD keeps the distillation step proportional to the actual
        // global/local disagreement: near-agreement means near-zero movement,
        // while Adam would still take full-size normalized steps
        let mut distill_opt = Optimizer::sgd(self.cfg.distill_lr, 0.0);
        let b = self.cfg.effective_pseudo_nodes(self.num_classes);
        let cfg = self.cfg.clone();

        for outer in 1..=cfg.outer_iters {
            let noise_seed = self
                .seed
                .wrapping_add((round as u64).wrapping_mul(0x9e37_79b9))
                .wrapping_add(outer as u64);
            let (input, labels) = generator_input(cfg.noise_dim, self.num_classes, b, noise_seed);
            // adjacency is frozen for the whole outer iteration
            let (x0, _) = crate::nn::generate_features(&self.generator, b, noise_seed)?;
            let adjacency = knn_adjacency(&x0, cfg.knn_k)?;
            let norm_adj = Rc::new(normalize_csr(&adjacency, b).matrix);

            let mut last = (0.0, 0.0, 0.0);
            for _ in 0..cfg.gen_iters {
                let tape = Tape::new();
                let inp = tape.constant(input.clone());
                let (x_hat, gen_vars) = self.generator.forward(&tape, inp, true)?;
                let gen_vars = gen_vars.expect("trainable generator vars");
                let local_logits = forward_locals(&tape, &local_models, norm_adj.clone(), x_hat)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (global_logits, _) = global_model.forward(
                    &tape,
                    norm_adj.clone(),
                    x_hat,
                    false,
                    false,
                    &mut rng,
                )?;
                let sem_terms = semantic_loss_terms(&tape, &local_logits, &labels, &rho)?;
                let div_terms =
                    divergence_loss_terms(&tape, global_logits, &local_logits, &labels, &rho)?;
                let l_sem = add_terms(&tape, sem_terms)?;
                let l_diverg = add_terms(&tape, div_terms)?;
                let l_div = crate::nn::diversity_loss(&tape, x_hat)?;
                // ascend l_diverg - l1*l_sem - l2*l_div by descending its negation
                let objective = tape.sub(
                    tape.add(
                        tape.scale(l_sem, cfg.lambda1)?,
                        tape.scale(l_div, cfg.lambda2)?,
                    )?,
                    l_diverg,
                )?;
                last = (
                    tape.scalar_value(l_sem),
                    tape.scalar_value(l_div),
                    tape.scalar_value(l_diverg),
                );
                tape.backward(objective).map_err(|e| FedTadError::Distill {
                    iter: outer,
                    msg: format!(
                        "generator step: {} (sem {:.4}, div {:.4}, diverg {:.4})",
                        e, last.0, last.1, last.2
                    ),
                })?;
                let grads: Vec<Array2<f64>> = gen_vars
                    .params
                    .iter()
                    .map(|&v| tape.grad(v))
                    .collect::<Result<_>>()?;
                let mut params = vec![
                    std::mem::take(&mut self.generator.w1),
                    std::mem::take(&mut self.generator.b1),
                    std::mem::take(&mut self.generator.w2),
                    std::mem::take(&mut self.generator.b2),
                ];
                self.gen_opt.step(&mut params, &grads)?;
                self.generator.b2 = params.pop().unwrap();
                self.generator.w2 = params.pop().unwrap();
                self.generator.b1 = params.pop().unwrap();
                self.generator.w1 = params.pop().unwrap();
            }

            // distillation phase on features from the current generator
            let (x_final, _) = crate::nn::generate_features(&self.generator, b, noise_seed)?;
            for _ in 0..cfg.distill_iters {
                let tape = Tape::new();
                let x = tape.constant(x_final.clone());
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (global_logits, gvars) =
                    global_model.forward(&tape, norm_adj.clone(), x, false, true, &mut rng)?;
                let gvars = gvars.expect("trainable global vars");
                let local_logits = forward_locals(&tape, &local_models, norm_adj.clone(), x)?;
                let div_terms =
                    divergence_loss_terms(&tape, global_logits, &local_logits, &labels, &rho)?;
                let l_diverg = add_terms(&tape, div_terms)?;
                last.2 = tape.scalar_value(l_diverg);
                tape.backward(l_diverg).map_err(|e| FedTadError::Distill {
                    iter: outer,
                    msg: format!("distill step: {}", e),
                })?;
                let grads = vec![tape.grad(gvars.w1)?, tape.grad(gvars.w2)?];
                // when global and locals already agree the true gradient is
                // zero and anything left is rounding noise; stepping on it
                // would let Adam's normalization walk away from the fixed
                // point, so treat it as no signal
                let grad_norm: f64 = grads
                    .iter()
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                let param_norm: f64 = [&global_model.w1, &global_model.w2]
                    .iter()
                    .map(|w| w.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if grad_norm <= 1e-10 * (1.0 + param_norm) {
                    continue;
                }
                let mut params = vec![
                    std::mem::take(&mut global_model.w1),
                    std::mem::take(&mut global_model.w2),
                ];
                distill_opt.step(&mut params, &grads)?;
                global_model.w2 = params.pop().unwrap();
                global_model.w1 = params.pop().unwrap();
            }
            trace.push(DistillTraceRow {
                round,
                outer_iter: outer,
                semantic: last.0,
                diversity: last.1,
                divergence: last.2,
            });
        }
        Ok(global_model.weights())
    }
}
