//! Experiment driver: `partition`, `analyze`, and `run` subcommands.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use fedtad::config::{load_config, ExperimentConfig};
use fedtad::dataset::load_dataset;
use fedtad::error::{FedTadError, Result};
use fedtad::federation::{run_federation, RunOutput};
use fedtad::graph::Graph;
use fedtad::partition::{assign_communities, induce_shards, louvain, ClientShard, Partition};
use fedtad::reliability::{class_homophily, knowledge_reliability};
use fedtad::util;

#[derive(Parser)]
#[command(name = "fedtad", about = "Subgraph federated learning simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a dataset into K client subgraphs via Louvain communities
    Partition {
        /// Dataset JSON file
        #[arg(long)]
        dataset: PathBuf,
        /// Number of clients
        #[arg(short = 'k', long)]
        clients: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Report per-client label histograms, homophily and reliability
    Analyze {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(short = 'k', long)]
        clients: usize,
        /// Random-walk length for hybrid embeddings
        #[arg(short = 'p', long, default_value_t = 5)]
        walk_length: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a full experiment described by a config file
    Run {
        /// Experiment config JSON
        #[arg(long)]
        config: PathBuf,
        /// Override the federation seed
        #[arg(long)]
        seed: Option<u64>,
        /// Cap on parallel client updates
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Partition {
            dataset,
            clients,
            seed,
            out,
        } => cmd_partition(&dataset, clients, seed, &out),
        Command::Analyze {
            dataset,
            clients,
            walk_length,
            seed,
            out,
        } => cmd_analyze(&dataset, clients, walk_length, seed, &out),
        Command::Run {
            config,
            seed,
            workers,
            out,
        } => cmd_run(&config, seed, workers, &out),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| FedTadError::io(out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| FedTadError::Config(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| FedTadError::io(path, e))
}

fn partition_dataset(
    graph: &Graph,
    clients: usize,
    seed: u64,
    split: (f64, f64, f64),
) -> Result<(Partition, Vec<ClientShard>)> {
    let communities = louvain(graph, seed)?;
    let partition = assign_communities(&communities, clients, seed)?;
    let shards = induce_shards(graph, &partition, split, seed)?;
    Ok((partition, shards))
}

pub fn cmd_partition(dataset: &Path, clients: usize, seed: u64, out: &Path) -> Result<()> {
    let bundle = load_dataset(dataset)?;
    let (partition, shards) = partition_dataset(&bundle.graph, clients, seed, (0.2, 0.4, 0.4))?;
    ensure_dir(out)?;
    write_json(&out.join("partition.json"), &partition)?;
    let summary: Vec<_> = shards
        .iter()
        .map(|s| {
            json!({
                "client": s.client_id,
                "nodes": s.graph.num_nodes,
                "edges": s.graph.num_edges(),
                "train": s.train_idx.len(),
                "val": s.val_idx.len(),
                "test": s.test_idx.len(),
            })
        })
        .collect();
    write_json(&out.join("shards.json"), &summary)?;
    for s in &shards {
        println!(
            "client {}: {} nodes, {} edges, split {}/{}/{}",
            s.client_id,
            s.graph.num_nodes,
            s.graph.num_edges(),
            s.train_idx.len(),
            s.val_idx.len(),
            s.test_idx.len()
        );
    }
    Ok(())
}

pub fn cmd_analyze(
    dataset: &Path,
    clients: usize,
    walk_length: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let bundle = load_dataset(dataset)?;
    let (_, shards) = partition_dataset(&bundle.graph, clients, seed, (0.2, 0.4, 0.4))?;
    let num_classes = bundle.graph.num_classes;
    let mut report = Vec::new();
    let mut reliability_rows = Vec::new();
    for shard in &shards {
        let mut hist = vec![0usize; num_classes];
        for &l in &shard.graph.labels {
            if l >= 0 {
                hist[l as usize] += 1;
            }
        }
        let homophily: Vec<Option<f64>> = (0..num_classes)
            .map(|c| class_homophily(&shard.graph, c))
            .collect();
        let phi = knowledge_reliability(shard, walk_length);
        report.push(json!({
            "client": shard.client_id,
            "label_histogram": hist,
            "homophily": homophily,
            "reliability": phi.phi,
        }));
        reliability_rows.push(json!({"client": shard.client_id, "phi": phi.phi}));
    }
    ensure_dir(out)?;
    write_json(&out.join("analysis.json"), &report)?;
    write_json(&out.join("reliability.json"), &reliability_rows)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn write_metrics_csv(path: &Path, output: &RunOutput) -> Result<()> {
    let mut text = String::from("round,global_test_acc,mean_local_val_acc,seconds\n");
    for r in &output.records {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.3}\n",
            r.round, r.global_test_acc, r.mean_local_val_acc, r.seconds
        ));
    }
    std::fs::write(path, text).map_err(|e| FedTadError::io(path, e))
}

fn write_trace_csv(path: &Path, output: &RunOutput) -> Result<()> {
    let mut text = String::from("round,outer_iter,semantic,diversity,divergence\n");
    for r in &output.distill_trace {
        text.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.round, r.outer_iter, r.semantic, r.diversity, r.divergence
        ));
    }
    std::fs::write(path, text).map_err(|e| FedTadError::io(path, e))
}

pub fn cmd_run(
    config_path: &Path,
    seed_override: Option<u64>,
    workers_override: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg: ExperimentConfig = load_config(config_path)?;
    if let Some(seed) = seed_override {
        cfg.federation.seed = seed;
    }
    if let Some(w) = workers_override {
        cfg.federation.workers = w.max(1);
    }
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let bundle = cfg.dataset.resolve(base_dir)?;
    util::log(&format!(
        "dataset '{}': {} nodes, {} edges, {} classes",
        bundle.name,
        bundle.graph.num_nodes,
        bundle.graph.num_edges(),
        bundle.graph.num_classes
    ));

    let (partition, mut shards) = partition_dataset(
        &bundle.graph,
        cfg.federation.num_clients,
        cfg.federation.seed,
        cfg.federation.split_ratios,
    )?;
    util::log(&format!(
        "partitioned into {} shards: {:?}",
        shards.len(),
        shards.iter().map(|s| s.graph.num_nodes).collect::<Vec<_>>()
    ));

    let output = run_federation(&mut shards, &cfg.federation)?;

    ensure_dir(out)?;
    write_json(&out.join("partition.json"), &partition)?;
    let reliability_rows: Vec<_> = output
        .uploaded_reliability
        .iter()
        .enumerate()
        .map(|(k, phi)| json!({"client": k, "phi": phi.phi}))
        .collect();
    write_json(&out.join("reliability.json"), &reliability_rows)?;
    write_metrics_csv(&out.join("metrics.csv"), &output)?;
    if !output.distill_trace.is_empty() {
        write_trace_csv(&out.join("distill_trace.csv"), &output)?;
    }
    write_json(&out.join("checkpoint.json"), &output.final_weights)?;

    let final_acc = output.records.last().map(|r| r.global_test_acc).unwrap_or(0.0);
    let best_acc = output
        .records
        .iter()
        .map(|r| r.global_test_acc)
        .fold(0.0f64, f64::max);
    let summary = json!({
        "name": cfg.name,
        "final_test_acc": final_acc,
        "best_test_acc": best_acc,
        "rounds": output.records.len(),
        "config": cfg,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{}: final test acc {:.4}, best {:.4} over {} rounds",
        cfg.name,
        final_acc,
        best_acc,
        output.records.len()
    );
    Ok(())
}
