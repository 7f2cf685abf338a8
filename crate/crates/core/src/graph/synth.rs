//! Synthetic graph generation with controllable homophily and feature
//! signal, standing in for benchmark datasets at desk scale.

use crate::error::{Error, Result};
use crate::graph::container::Graph;
use crate::nn::tensor::Tensor;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub n: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub avg_degree: f64,
    pub homophily: f64,
    pub feature_signal: f64,
    pub seed: u64,
}

/// Block-model-style generator: node classes are uniform, an edge
/// endpoint is intra-class with probability `homophily` and otherwise
/// lands uniformly in one of the other classes. Node features are the
/// class mean (a Gaussian direction scaled by `feature_signal`) plus
/// unit noise.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Graph> {
    if !(0.0..=1.0).contains(&cfg.homophily) {
        return Err(Error::Config(format!("homophily {} outside [0, 1]", cfg.homophily)));
    }
    if cfg.avg_degree < 0.0 || cfg.avg_degree >= cfg.n as f64 {
        return Err(Error::Config(format!(
            "avg_degree {} must be in [0, n = {})",
            cfg.avg_degree, cfg.n
        )));
    }
    if cfg.n_classes < 2 || cfg.n < 2 * cfg.n_classes {
        return Err(Error::Config(format!(
            "need >= 2 classes and >= 2 nodes per class (n = {}, c = {})",
            cfg.n, cfg.n_classes
        )));
    }
    let mut rng = Rng::new(cfg.seed);

    let labels: Vec<usize> = (0..cfg.n).map(|_| rng.below(cfg.n_classes)).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if by_class.iter().any(|members| members.len() < 2) {
        return Err(Error::Config("a class received fewer than 2 nodes; reseed or grow n".into()));
    }

    let mut class_means = Tensor::zeros(cfg.n_classes, cfg.feature_dim);
    for k in 0..cfg.n_classes {
        for j in 0..cfg.feature_dim {
            class_means.set(k, j, rng.normal() * cfg.feature_signal);
        }
    }
    let mut features = Tensor::zeros(cfg.n, cfg.feature_dim);
    for i in 0..cfg.n {
        for j in 0..cfg.feature_dim {
            features.set(i, j, class_means.get(labels[i], j) + rng.normal());
        }
    }

    let target_edges = (cfg.n as f64 * cfg.avg_degree / 2.0).round() as usize;
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(target_edges);
    let mut seen = std::collections::HashSet::with_capacity(target_edges * 2);
    let mut attempts = 0usize;
    let max_attempts = 100 * target_edges.max(1);
    while edges.len() < target_edges && attempts < max_attempts {
        attempts += 1;
        let u = rng.below(cfg.n);
        let class = if rng.bernoulli(cfg.homophily) {
            labels[u]
        } else {
            // Uniform over the other classes.
            let mut k = rng.below(cfg.n_classes - 1);
            if k >= labels[u] {
                k += 1;
            }
            k
        };
        let pool = &by_class[class];
        let v = pool[rng.below(pool.len())];
        if v == u {
            continue;
        }
        let key = (u.min(v), u.max(v));
        if seen.insert(key) {
            edges.push(key);
        }
    }
    if edges.len() < target_edges {
        return Err(Error::Config(format!(
            "edge sampling stalled at {}/{target_edges}; parameters too dense",
            edges.len()
        )));
    }
    Graph::new(features, &edges, labels, cfg.n_classes)
}
