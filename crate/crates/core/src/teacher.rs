//! Mean-aggregating message-passing teacher.
//!
//! Each layer combines a node's own representation with the mean of its
//! neighbors' representations: h <- act(LN(W_self h + W_nbr mean + b)),
//! with an optional residual on equal-width hidden layers and a raw
//! final layer. Inductive inference walks the K-hop neighborhood of the
//! query batch recursively, with no caching of training-node
//! embeddings, so its cost reflects real message passing.

use std::path::Path;

use crate::ckpt::{hash_tensors, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::{Graph, Scenario, ScenarioPlan};
use crate::nn::autodiff::{Tape, Var};
use crate::nn::layers::{pull_grads, LayerNorm, LinearLayer};
use crate::nn::optim::{AdamConfig, AdamState};
use crate::nn::tensor::{self, SparseRows, Tensor};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct TeacherConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub residual: bool,
    /// Soft-label softmax temperature.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden: 64,
            layers: 2,
            epochs: 200,
            lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.0,
            residual: true,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SageLayer {
    /// Self transform, carries the layer bias.
    pub w_self: LinearLayer,
    /// Neighbor transform; no bias so empty neighborhoods contribute
    /// exactly nothing.
    pub w_nbr: Tensor,
    /// Present on hidden layers; the final layer emits raw logits.
    pub norm: Option<LayerNorm>,
}

#[derive(Clone, Debug)]
pub struct SageParams {
    pub layers: Vec<SageLayer>,
    pub residual: bool,
    pub dropout: f64,
}

struct BoundSageLayer {
    w_self: crate::nn::layers::BoundLinear,
    w_nbr: Var,
    norm: Option<crate::nn::layers::BoundLayerNorm>,
}

impl SageParams {
    pub fn new(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        n_layers: usize,
        residual: bool,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(n_layers >= 1);
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let d_in = if k == 0 { in_dim } else { hidden };
            let d_out = if k == n_layers - 1 { out_dim } else { hidden };
            layers.push(SageLayer {
                w_self: LinearLayer::new(d_in, d_out, rng),
                w_nbr: Tensor::uniform_init(d_in, d_out, d_in, rng),
                norm: (k < n_layers - 1).then(|| LayerNorm::new(d_out)),
            });
        }
        SageParams { layers, residual, dropout }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w_self.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w_self.out_dim()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w_self.weight);
            out.push(&l.w_self.bias);
            out.push(&l.w_nbr);
            if let Some(norm) = &l.norm {
                out.push(&norm.gamma);
                out.push(&norm.beta);
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w_self.weight);
            out.push(&mut l.w_self.bias);
            out.push(&mut l.w_nbr);
            if let Some(norm) = &mut l.norm {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        }
        out
    }

    /// Hash of all parameters; used to verify the teacher stays frozen.
    pub fn params_hash(&self) -> u64 {
        hash_tensors(&self.param_tensors())
    }

    fn bind(&self, tape: &Tape) -> Vec<BoundSageLayer> {
        self.layers
            .iter()
            .map(|l| BoundSageLayer {
                w_self: l.w_self.bind(tape),
                w_nbr: tape.leaf(l.w_nbr.clone()),
                norm: l.norm.as_ref().map(|n| n.bind(tape)),
            })
            .collect()
    }

    fn bound_vars(bound: &[BoundSageLayer]) -> Vec<Var> {
        let mut out = Vec::new();
        for l in bound {
            out.push(l.w_self.w);
            out.push(l.w_self.b);
            out.push(l.w_nbr);
            if let Some(norm) = &l.norm {
                out.push(norm.gamma);
                out.push(norm.beta);
            }
        }
        out
    }

    /// Tape forward over a whole graph; `norm_adj` must be the
    /// row-normalized adjacency.
    fn forward_tape(
        &self,
        tape: &Tape,
        bound: &[BoundSageLayer],
        x: Var,
        norm_adj: &SparseRows,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let last = bound.len() - 1;
        let mut h = x;
        for (k, layer) in bound.iter().enumerate() {
            let self_part = layer.w_self.apply(tape, h)?;
            let mean = tape.spmm(norm_adj, h)?;
            let nbr_part = tape.matmul(mean, layer.w_nbr)?;
            let mut z = tape.add(self_part, nbr_part)?;
            if k < last {
                z = layer.norm.as_ref().unwrap().apply(tape, z)?;
                z = tape.relu(z);
                z = tape.dropout(z, self.dropout, training, rng)?;
                if self.residual && z.shape() == h.shape() {
                    z = tape.add(z, h)?;
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Full-graph value forward; returns raw logits.
    pub fn forward_value(&self, features: &Tensor, adjacency: &SparseRows) -> Result<Tensor> {
        let norm_adj = adjacency.row_normalized();
        let last = self.layers.len() - 1;
        let mut h = features.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let self_part = layer.w_self.forward_value(&h)?;
            let mean = tensor::spmm(&norm_adj, &h)?;
            let nbr_part = tensor::matmul(&mean, &layer.w_nbr)?;
            let mut z = self_part.add(&nbr_part)?;
            if k < last {
                z = layer.norm.as_ref().unwrap().forward_value(&z)?;
                z = tensor::relu(&z);
                if self.residual && z.shape() == h.shape() {
                    z = z.add(&h)?;
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Honest inductive inference: gathers the K-hop neighborhood of
    /// `batch` over `eval_graph`, recomputes every needed embedding from
    /// raw features, and returns row-stochastic predictions aligned with
    /// `batch` order.
    pub fn infer_inductive(&self, eval_graph: &Graph, batch: &[usize]) -> Result<Tensor> {
        let n = eval_graph.n();
        if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
            return Err(Error::Config(format!("query node {bad} outside graph of {n} nodes")));
        }
        let k_layers = self.layers.len();
        let adj = eval_graph.adjacency();

        // needed[k] = nodes whose layer-k representation is required.
        let mut needed: Vec<Vec<usize>> = vec![Vec::new(); k_layers + 1];
        let mut top: Vec<usize> = batch.to_vec();
        top.sort_unstable();
        top.dedup();
        needed[k_layers] = top;
        for k in (0..k_layers).rev() {
            let mut set: Vec<usize> = needed[k + 1].clone();
            for &node in &needed[k + 1] {
                for &(j, _) in adj.row(node) {
                    set.push(j);
                }
            }
            set.sort_unstable();
            set.dedup();
            needed[k] = set;
        }

        let mut h = eval_graph.features().gather_rows(&needed[0]);
        for k in 0..k_layers {
            let in_nodes = &needed[k];
            let out_nodes = &needed[k + 1];
            let mut pos = vec![usize::MAX; n];
            for (p, &node) in in_nodes.iter().enumerate() {
                pos[node] = p;
            }
            let self_rows: Vec<usize> = out_nodes.iter().map(|&node| pos[node]).collect();
            let self_in = h.gather_rows(&self_rows);
            // Mean over neighbors, all of which live in in_nodes.
            let mut mean_map = SparseRows::new(out_nodes.len(), in_nodes.len());
            for (r, &node) in out_nodes.iter().enumerate() {
                let row = adj.row(node);
                if row.is_empty() {
                    continue;
                }
                let w = 1.0 / row.len() as f64;
                mean_map.set_row(r, row.iter().map(|&(j, _)| (pos[j], w)).collect());
            }
            let layer = &self.layers[k];
            let self_part = layer.w_self.forward_value(&self_in)?;
            let mean = tensor::spmm(&mean_map, &h)?;
            let nbr_part = tensor::matmul(&mean, &layer.w_nbr)?;
            let mut z = self_part.add(&nbr_part)?;
            if k < k_layers - 1 {
                z = layer.norm.as_ref().unwrap().forward_value(&z)?;
                z = tensor::relu(&z);
                if self.residual && z.shape() == self_in.shape() {
                    z = z.add(&self_in)?;
                }
            }
            h = z;
        }

        // Map sorted unique rows back to the requested batch order.
        let out_nodes = &needed[k_layers];
        let mut pos = vec![usize::MAX; n];
        for (p, &node) in out_nodes.iter().enumerate() {
            pos[node] = p;
        }
        let rows: Vec<usize> = batch.iter().map(|&b| pos[b]).collect();
        Ok(tensor::softmax_rows(&h.gather_rows(&rows)))
    }

    pub fn to_checkpoint(&self, temperature: f64) -> Checkpoint {
        let mut ck = Checkpoint::new("sage");
        ck.put_meta("layers", self.layers.len());
        ck.put_meta("in_dim", self.in_dim());
        ck.put_meta("hidden", if self.layers.len() > 1 { self.layers[0].w_self.out_dim() } else { 0 });
        ck.put_meta("out_dim", self.out_dim());
        ck.put_meta("residual", self.residual);
        ck.put_meta("dropout", self.dropout);
        ck.put_meta("temperature", temperature);
        for (k, l) in self.layers.iter().enumerate() {
            ck.put_tensor(&format!("layer{k}.self.w"), &l.w_self.weight);
            ck.put_tensor(&format!("layer{k}.self.b"), &l.w_self.bias);
            ck.put_tensor(&format!("layer{k}.nbr.w"), &l.w_nbr);
            if let Some(norm) = &l.norm {
                ck.put_tensor(&format!("layer{k}.norm.gamma"), &norm.gamma);
                ck.put_tensor(&format!("layer{k}.norm.beta"), &norm.beta);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<SageParams> {
        if ck.kind() != "sage" {
            return Err(Error::Config(format!("expected sage checkpoint, found `{}`", ck.kind())));
        }
        let n_layers = ck.meta_usize("layers")?;
        let in_dim = ck.meta_usize("in_dim")?;
        let hidden = ck.meta_usize("hidden")?;
        let out_dim = ck.meta_usize("out_dim")?;
        let residual = ck.meta_bool("residual")?;
        let dropout = ck.meta_f64("dropout")?;
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let d_in = if k == 0 { in_dim } else { hidden };
            let d_out = if k == n_layers - 1 { out_dim } else { hidden };
            let weight = ck.tensor_shaped(&format!("layer{k}.self.w"), d_in, d_out)?;
            let bias = ck.tensor_shaped(&format!("layer{k}.self.b"), 1, d_out)?;
            let w_nbr = ck.tensor_shaped(&format!("layer{k}.nbr.w"), d_in, d_out)?;
            let norm = if k < n_layers - 1 {
                Some(LayerNorm {
                    gamma: ck.tensor_shaped(&format!("layer{k}.norm.gamma"), 1, d_out)?,
                    beta: ck.tensor_shaped(&format!("layer{k}.norm.beta"), 1, d_out)?,
                })
            } else {
                None
            };
            layers.push(SageLayer { w_self: LinearLayer { weight, bias }, w_nbr, norm });
        }
        Ok(SageParams { layers, residual, dropout })
    }

    pub fn save(&self, path: &Path, temperature: f64) -> Result<()> {
        self.to_checkpoint(temperature).save(path)
    }
}

/// Row-stochastic soft labels over the distillation node set.
#[derive(Clone, Debug)]
pub struct TeacherOutput {
    pub probs: Tensor,
}

impl TeacherOutput {
    pub fn save(&self, path: &Path, scenario: Scenario) -> Result<()> {
        let mut ck = Checkpoint::new("soft-labels");
        ck.put_meta("scenario", scenario.as_str());
        ck.put_tensor("probs", &self.probs);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<TeacherOutput> {
        let ck = Checkpoint::load(path)?;
        if ck.kind() != "soft-labels" {
            return Err(Error::Config(format!(
                "expected soft-labels checkpoint, found `{}`",
                ck.kind()
            )));
        }
        Ok(TeacherOutput { probs: ck.tensor("probs")?.clone() })
    }
}

/// Validation accuracy of the teacher under the plan's eval protocol.
pub fn teacher_val_accuracy(params: &SageParams, plan: &ScenarioPlan) -> Result<f64> {
    teacher_accuracy_on(params, plan, &plan.val_nodes)
}

pub fn teacher_test_accuracy(params: &SageParams, plan: &ScenarioPlan) -> Result<f64> {
    teacher_accuracy_on(params, plan, &plan.test_nodes)
}

fn teacher_accuracy_on(params: &SageParams, plan: &ScenarioPlan, nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Config("no nodes to evaluate".into()));
    }
    let probs = match plan.scenario {
        Scenario::Trans => {
            let logits =
                params.forward_value(plan.eval_graph.features(), plan.eval_graph.adjacency())?;
            tensor::softmax_rows(&logits.gather_rows(nodes))
        }
        _ => params.infer_inductive(&plan.eval_graph, nodes)?,
    };
    let labels = plan.eval_graph.labels_of(nodes);
    Ok(crate::eval::metrics::accuracy_fraction(&probs, &labels))
}

/// Full-batch cross-entropy training with best-validation selection.
/// Returns frozen parameters and soft labels over the plan's
/// distillation node set, computed with the training-visible graph.
pub fn train_teacher(plan: &ScenarioPlan, cfg: &TeacherConfig) -> Result<(SageParams, TeacherOutput)> {
    let g = &plan.train_graph;
    let mut rng = Rng::new(cfg.seed);
    let mut params = SageParams::new(
        g.feature_dim(),
        cfg.hidden,
        g.n_classes(),
        cfg.layers,
        cfg.residual,
        cfg.dropout,
        &mut rng,
    );
    let norm_adj = g.adjacency().row_normalized();
    let train_labels: Vec<usize> =
        plan.train_local.iter().map(|&i| g.labels()[i]).collect();

    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut best: Option<(f64, SageParams)> = None;
    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(g.features().clone());
        let logits = params.forward_tape(&tape, &bound, x, &norm_adj, true, &mut rng)?;
        let sel = tape.select_rows(logits, &plan.train_local)?;
        let loss = tape.softmax_cross_entropy(sel, &train_labels)?;
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("teacher loss non-finite at epoch {epoch}")));
        }
        tape.backward(loss)?;
        let vars = SageParams::bound_vars(&bound);
        let mut tensors = params.param_tensors_mut();
        pull_grads(&tape, &vars, &mut tensors);
        adam.step(&mut tensors)?;

        let val_acc = teacher_val_accuracy(&params, plan)?;
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            best = Some((val_acc, params.clone()));
        }
    }
    let (_, best_params) = best.expect("at least one epoch");

    let logits = best_params.forward_value(g.features(), g.adjacency())?;
    let kd_logits = logits.gather_rows(&plan.kd_local);
    let probs = tensor::softmax_rows(&kd_logits.scale(1.0 / cfg.temperature));
    Ok((best_params, TeacherOutput { probs }))
}
