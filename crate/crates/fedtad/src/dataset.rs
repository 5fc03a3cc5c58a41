//! On-disk dataset format (meta.json + CSV triple) and a stochastic block
//! model generator for controllable fixtures.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedTadError, Result};
use crate::graph::{build_graph, Graph, UNLABELED};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub name: String,
}

/// A named graph, optionally with a global train/val/test split.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub graph: Graph,
    pub name: String,
    pub split: Option<GlobalSplit>,
}

#[derive(Debug, Clone)]
pub struct GlobalSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stochastic block model spec: one block per class, Gaussian features
/// centered at `separation * e_class`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmSpec {
    pub nodes_per_class: Vec<usize>,
    pub num_classes: usize,
    pub intra_prob: f64,
    pub inter_prob: f64,
    pub feature_dim: usize,
    pub class_center_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_label_rate")]
    pub label_rate: f64,
    #[serde(default)]
    pub name: Option<String>,
}

fn default_label_rate() -> f64 {
    1.0
}

impl SbmSpec {
    fn validate(&self) -> Result<()> {
        if self.nodes_per_class.len() != self.num_classes {
            return Err(FedTadError::Config(format!(
                "sbm: {} per-class counts for {} classes",
                self.nodes_per_class.len(),
                self.num_classes
            )));
        }
        for p in [self.intra_prob, self.inter_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FedTadError::Config(format!("sbm: probability {} outside [0,1]", p)));
            }
        }
        if self.class_center_separation < 0.0 {
            return Err(FedTadError::Config("sbm: negative class separation".into()));
        }
        if !(0.0..=1.0).contains(&self.label_rate) {
            return Err(FedTadError::Config("sbm: label_rate outside [0,1]".into()));
        }
        Ok(())
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| FedTadError::io(path.display().to_string(), e))
}

/// Load a dataset directory holding `meta.json`, `edges.csv`, `features.csv`
/// and `labels.csv`.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&read_to_string(&meta_path)?)
        .map_err(|e| FedTadError::Config(format!("{}: {}", meta_path.display(), e)))?;

    let edges_path = dir.join("edges.csv");
    let mut edges = Vec::new();
    for (lineno, line) in read_to_string(&edges_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| FedTadError::Parse {
                file: edges_path.display().to_string(),
                line: lineno + 1,
                msg: format!("invalid node id '{}'", s.trim()),
            })
        };
        let mut it = line.splitn(2, ',');
        let u = parse(it.next().unwrap_or(""))?;
        let v = parse(it.next().ok_or_else(|| FedTadError::Parse {
            file: edges_path.display().to_string(),
            line: lineno + 1,
            msg: "expected 'u,v'".into(),
        })?)?;
        edges.push((u, v));
    }

    let features_path = dir.join("features.csv");
    let mut features = Vec::new();
    for (lineno, line) in read_to_string(&features_path)?.lines().enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| FedTadError::Parse {
                    file: features_path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("invalid real '{}'", s.trim()),
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != meta.feature_dim {
            return Err(FedTadError::Parse {
                file: features_path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected {} values, got {}", meta.feature_dim, row.len()),
            });
        }
        features.push(row);
    }
    if features.len() != meta.num_nodes {
        return Err(FedTadError::Config(format!(
            "{}: {} feature rows for {} nodes",
            features_path.display(),
            features.len(),
            meta.num_nodes
        )));
    }

    let labels_path = dir.join("labels.csv");
    let mut labels = Vec::new();
    for (lineno, line) in read_to_string(&labels_path)?.lines().enumerate() {
        let l: i64 = line.trim().parse().map_err(|_| FedTadError::Parse {
            file: labels_path.display().to_string(),
            line: lineno + 1,
            msg: format!("invalid label '{}'", line.trim()),
        })?;
        if l != UNLABELED && (l < 0 || l as usize >= meta.num_classes) {
            return Err(FedTadError::Parse {
                file: labels_path.display().to_string(),
                line: lineno + 1,
                msg: format!("label {} outside [0, {})", l, meta.num_classes),
            });
        }
        labels.push(l);
    }
    if labels.len() != meta.num_nodes {
        return Err(FedTadError::Config(format!(
            "{}: {} labels for {} nodes",
            labels_path.display(),
            labels.len(),
            meta.num_nodes
        )));
    }

    let graph = build_graph(&edges, features, labels, meta.num_classes)?;
    Ok(DatasetBundle {
        graph,
        name: meta.name,
        split: None,
    })
}

/// Write a dataset in canonical form (edges sorted lexicographically, u < v).
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FedTadError::io(dir.display().to_string(), e))?;
    let g = &bundle.graph;
    let meta = DatasetMeta {
        num_nodes: g.num_nodes,
        num_classes: g.num_classes,
        feature_dim: g.feature_dim,
        name: bundle.name.clone(),
    };
    let write = |name: &str, content: String| -> Result<()> {
        let path = dir.join(name);
        let mut f =
            fs::File::create(&path).map_err(|e| FedTadError::io(path.display().to_string(), e))?;
        f.write_all(content.as_bytes())
            .map_err(|e| FedTadError::io(path.display().to_string(), e))
    };
    write(
        "meta.json",
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    let mut edges = String::new();
    for (u, v) in g.edge_list() {
        edges.push_str(&format!("{},{}\n", u, v));
    }
    write("edges.csv", edges)?;
    let mut feats = String::new();
    for row in g.features.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
        feats.push_str(&cells.join(","));
        feats.push('\n');
    }
    write("features.csv", feats)?;
    let mut labels = String::new();
    for &l in &g.labels {
        labels.push_str(&format!("{}\n", l));
    }
    write("labels.csv", labels)?;
    Ok(())
}

/// Generate an SBM graph with class-centered Gaussian features.
/// Deterministic for a fixed seed.
pub fn generate_sbm(spec: &SbmSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let num_nodes: usize = spec.nodes_per_class.iter().sum();
    let mut labels_full = Vec::with_capacity(num_nodes);
    for (c, &n) in spec.nodes_per_class.iter().enumerate() {
        labels_full.extend(std::iter::repeat(c).take(n));
    }

    let mut edges = Vec::new();
    for u in 0..num_nodes {
        for v in (u + 1)..num_nodes {
            let p = if labels_full[u] == labels_full[v] {
                spec.intra_prob
            } else {
                spec.inter_prob
            };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let mut features = Vec::with_capacity(num_nodes);
    for &c in &labels_full {
        let mut row = vec![0.0f64; spec.feature_dim];
        // center at separation * e_c (wrapped if C > F)
        if spec.feature_dim > 0 {
            row[c % spec.feature_dim] += spec.class_center_separation;
        }
        for x in row.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x += spec.noise_std * noise;
        }
        features.push(row);
    }

    let labels: Vec<i64> = labels_full
        .iter()
        .map(|&c| {
            if spec.label_rate >= 1.0 || rng.gen::<f64>() < spec.label_rate {
                c as i64
            } else {
                UNLABELED
            }
        })
        .collect();

    let graph = build_graph(&edges, features, labels, spec.num_classes)?;
    Ok(DatasetBundle {
        name: spec
            .name
            .clone()
            .unwrap_or_else(|| format!("sbm-{}", spec.seed)),
        graph,
        split: None,
    })
}
