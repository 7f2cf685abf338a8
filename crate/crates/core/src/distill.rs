//! Structure-mixing knowledge distillation and the two-stage training
//! procedure.
//!
//! One Beta-distributed coefficient per minibatch convexly combines the
//! batch's features, adjacency rows, and teacher soft labels with a
//! shuffled pairing of the same batch. The student is forwarded twice
//! (plain and mixed) and the distillation loss blends the two KL terms.
//! Inductive training draws batches from the labeled subgraph only; a
//! guard aborts if any val/test-indexed tensor would reach the training
//! tape.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::eval::metrics::accuracy_fraction;
use crate::graph::{Role, Scenario, ScenarioPlan, SplitAssignment};
use crate::nn::autodiff::{kl_div_probs, Tape, Var};
use crate::nn::layers::pull_grads;
use crate::nn::optim::{AdamConfig, AdamState};
use crate::nn::tensor::{SparseRows, Tensor};
use crate::rng::Rng;
use crate::student::{MlpStudent, SaMlpBound, SaMlpParams, StructureSource};
use crate::teacher::TeacherOutput;

#[derive(Clone, Copy, Debug)]
pub struct DistillConfig {
    /// Beta shape for the mixing coefficient.
    pub eta: f64,
    /// Weight of the plain logit term against the mixed term.
    pub delta: f64,
    /// Weight of distillation against supervised cross-entropy.
    pub loss_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Teacher soft-label temperature (applied where labels are made).
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            eta: 0.2,
            delta: 0.5,
            loss_weight: 0.8,
            epochs: 300,
            lr: 0.01,
            weight_decay: 0.0,
            batch_size: 256,
            seed: 0,
            temperature: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(Error::Config(format!("eta {} must be positive", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 1]", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.loss_weight) {
            return Err(Error::Config(format!("loss_weight {} outside [0, 1]", self.loss_weight)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// A minibatch convexly combined with a shuffled copy of itself.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub lambda: f64,
    pub permutation: Vec<usize>,
    pub x_mixed: Tensor,
    pub rows_mixed: SparseRows,
    pub teacher_mixed: Tensor,
}

/// Deterministic mixing core: lambda * batch + (1 - lambda) * batch[pi].
pub fn mix_with(
    lambda: f64,
    permutation: &[usize],
    x: &Tensor,
    rows: &SparseRows,
    teacher: &Tensor,
) -> Result<MixedBatch> {
    let n = x.rows();
    if permutation.len() != n || rows.n_rows() != n || teacher.rows() != n {
        return Err(Error::Dim { op: "mix_with", lhs: (n, x.cols()), rhs: (permutation.len(), 0) });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut x_mixed = Tensor::zeros(n, x.cols());
    let mut teacher_mixed = Tensor::zeros(n, teacher.cols());
    let mut rows_mixed = SparseRows::new(n, rows.n_cols());
    for i in 0..n {
        let p = permutation[i];
        for j in 0..x.cols() {
            x_mixed.set(i, j, lambda * x.get(i, j) + (1.0 - lambda) * x.get(p, j));
        }
        for j in 0..teacher.cols() {
            teacher_mixed.set(i, j, lambda * teacher.get(i, j) + (1.0 - lambda) * teacher.get(p, j));
        }
        rows_mixed.set_row(i, merge_scaled(rows.row(i), lambda, rows.row(p), 1.0 - lambda));
    }
    Ok(MixedBatch {
        lambda,
        permutation: permutation.to_vec(),
        x_mixed,
        rows_mixed,
        teacher_mixed,
    })
}

/// Draws lambda ~ Beta(eta, eta) and a uniform permutation of the
/// batch, then mixes.
pub fn sample_mix(
    x: &Tensor,
    rows: &SparseRows,
    teacher: &Tensor,
    eta: f64,
    rng: &mut Rng,
) -> Result<MixedBatch> {
    if eta <= 0.0 {
        return Err(Error::Config(format!("eta {eta} must be positive")));
    }
    let lambda = rng.beta(eta, eta);
    let permutation = rng.permutation(x.rows());
    mix_with(lambda, &permutation, x, rows, teacher)
}

/// Sorted sparse-row merge: wa * a + wb * b, dropping exact zeros so
/// endpoint mixes reproduce their source rows bit-exactly.
fn merge_scaled(
    a: &[(usize, f64)],
    wa: f64,
    b: &[(usize, f64)],
    wb: f64,
) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let (col, w) = if j >= b.len() || (i < a.len() && a[i].0 < b[j].0) {
            let e = (a[i].0, wa * a[i].1 + wb * 0.0);
            i += 1;
            e
        } else if i >= a.len() || b[j].0 < a[i].0 {
            let e = (b[j].0, wa * 0.0 + wb * b[j].1);
            j += 1;
            e
        } else {
            let e = (a[i].0, wa * a[i].1 + wb * b[j].1);
            i += 1;
            j += 1;
            e
        };
        if w != 0.0 {
            out.push((col, w));
        }
    }
    out
}

/// Value-level distillation objective over row-stochastic predictions:
/// delta * KL(student, teacher) + (1 - delta) * KL(mixed pair).
pub fn distill_loss(
    student: &Tensor,
    mixed_student: &Tensor,
    teacher: &Tensor,
    mixed_teacher: &Tensor,
    delta: f64,
) -> Result<f64> {
    Ok(delta * kl_div_probs(student, teacher)?
        + (1.0 - delta) * kl_div_probs(mixed_student, mixed_teacher)?)
}

/// Tape counterpart over pre-softmax scores (fused with softmax).
pub fn distill_loss_tape(
    tape: &Tape,
    scores: Var,
    mixed_scores: Var,
    teacher: &Tensor,
    mixed_teacher: &Tensor,
    delta: f64,
) -> Result<Var> {
    let plain = tape.softmax_kl(scores, teacher)?;
    let mixed = tape.softmax_kl(mixed_scores, mixed_teacher)?;
    tape.add(tape.scale(plain, delta), tape.scale(mixed, 1.0 - delta))
}

/// Per-epoch training metrics, in the order the metrics log is written.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub kd_mix_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<P> {
    /// Best-validation parameters.
    pub params: P,
    pub best_val_acc: f64,
    pub log: Vec<EpochMetrics>,
    /// Global node ids whose tensors entered the training tape.
    pub accessed_global: BTreeSet<usize>,
}

/// How a trained student consumes structure at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Explicit,
    Latent,
    /// Per node: explicit when its row is nonempty, latent otherwise.
    Routed,
}

/// Predictions for the given global nodes under an eval mode; `rows`
/// must align with `nodes` and use the student's column vocabulary.
pub fn student_probs(
    params: &SaMlpParams,
    plan: &ScenarioPlan,
    nodes: &[usize],
    rows: &SparseRows,
    mode: EvalMode,
) -> Result<Tensor> {
    let x = plan.eval_graph.features().gather_rows(nodes);
    match mode {
        EvalMode::Explicit => {
            Ok(params.forward_value(&x, StructureSource::ExplicitRows(rows))?.1)
        }
        EvalMode::Latent => Ok(params.forward_value(&x, StructureSource::LatentFromFeatures)?.1),
        EvalMode::Routed => route_mixed_inference(params, &x, rows),
    }
}

/// Routes each node down the explicit or latent structure path by row
/// emptiness and reassembles outputs in input order.
pub fn route_mixed_inference(
    params: &SaMlpParams,
    x: &Tensor,
    rows: &SparseRows,
) -> Result<Tensor> {
    if rows.n_rows() != x.rows() {
        return Err(Error::Dim { op: "route_mixed_inference", lhs: x.shape(), rhs: (rows.n_rows(), rows.n_cols()) });
    }
    let (mut connected, mut isolated) = (Vec::new(), Vec::new());
    for i in 0..x.rows() {
        if rows.row_is_empty(i) {
            isolated.push(i);
        } else {
            connected.push(i);
        }
    }
    if !isolated.is_empty() && !params.has_latent() {
        return Err(Error::Config(
            "latent path requested without the stage-two encoder".into(),
        ));
    }
    let mut out = Tensor::zeros(x.rows(), params.classes());
    if !connected.is_empty() {
        let sub_rows = rows.gather_rows(&connected);
        let (_, probs) = params
            .forward_value(&x.gather_rows(&connected), StructureSource::ExplicitRows(&sub_rows))?;
        for (k, &i) in connected.iter().enumerate() {
            out.row_mut(i).copy_from_slice(probs.row(k));
        }
    }
    if !isolated.is_empty() {
        let (_, probs) = params
            .forward_value(&x.gather_rows(&isolated), StructureSource::LatentFromFeatures)?;
        for (k, &i) in isolated.iter().enumerate() {
            out.row_mut(i).copy_from_slice(probs.row(k));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    One,
    Two,
}

fn bound_base_vars(bound: &SaMlpBound) -> Vec<Var> {
    let mut vars = vec![
        bound.enc_feat.w,
        bound.enc_feat.b,
        bound.enc_struct.w,
        bound.enc_struct.b,
    ];
    vars.extend(bound.dec_feat.param_vars());
    vars.extend(bound.dec_struct.param_vars());
    vars.push(bound.gate.w);
    vars.push(bound.gate.b);
    vars
}

/// Shared batch bookkeeping: leakage guard, access log, teacher gather.
struct BatchPlan<'a> {
    plan: &'a ScenarioPlan,
    split: &'a SplitAssignment,
    teacher_row_of: Vec<Option<usize>>,
    is_ce: Vec<bool>,
}

impl<'a> BatchPlan<'a> {
    fn new(
        plan: &'a ScenarioPlan,
        split: &'a SplitAssignment,
        teacher: Option<&TeacherOutput>,
        cfg: &DistillConfig,
    ) -> Result<Self> {
        let n_local = plan.train_graph.n();
        if let Some(t) = teacher {
            if t.probs.rows() != plan.kd_local.len() {
                return Err(Error::Config(format!(
                    "teacher covers {} rows but the distillation set has {}",
                    t.probs.rows(),
                    plan.kd_local.len()
                )));
            }
        } else if cfg.loss_weight > 0.0 {
            return Err(Error::Config(
                "loss_weight > 0 requires teacher soft labels".into(),
            ));
        }
        let mut teacher_row_of = vec![None; n_local];
        for (row, &local) in plan.kd_local.iter().enumerate() {
            teacher_row_of[local] = Some(row);
        }
        let mut is_ce = vec![false; n_local];
        for &local in &plan.train_local {
            is_ce[local] = true;
        }
        Ok(BatchPlan { plan, split, teacher_row_of, is_ce })
    }

    /// Checks the leakage contract and records the batch access.
    fn admit(&self, chunk: &[usize], accessed: &mut BTreeSet<usize>) -> Result<()> {
        for &local in chunk {
            let gid = self.plan.visible[local];
            if self.plan.scenario.is_inductive() && self.split.role(gid) != Role::Train {
                return Err(Error::Leakage(format!(
                    "node {gid} with role {} reached an inductive training batch",
                    self.split.role(gid).as_str()
                )));
            }
            accessed.insert(gid);
        }
        Ok(())
    }

    /// Positions within the chunk that carry supervised CE, plus labels.
    fn ce_rows(&self, chunk: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let labels = self.plan.train_graph.labels();
        let mut rows = Vec::new();
        let mut lab = Vec::new();
        for (pos, &local) in chunk.iter().enumerate() {
            if self.is_ce[local] {
                rows.push(pos);
                lab.push(labels[local]);
            }
        }
        (rows, lab)
    }

    fn teacher_rows(&self, teacher: &TeacherOutput, chunk: &[usize]) -> Result<Tensor> {
        let mut idx = Vec::with_capacity(chunk.len());
        for &local in chunk {
            match self.teacher_row_of[local] {
                Some(row) => idx.push(row),
                None => {
                    return Err(Error::Config(format!(
                        "node local {local} is outside the distillation set"
                    )))
                }
            }
        }
        Ok(teacher.probs.gather_rows(&idx))
    }
}

fn train_samlp_engine(
    mut params: SaMlpParams,
    teacher: Option<&TeacherOutput>,
    plan: &ScenarioPlan,
    split: &SplitAssignment,
    cfg: &DistillConfig,
    stage: Stage,
) -> Result<TrainOutcome<SaMlpParams>> {
    cfg.validate()?;
    let bp = BatchPlan::new(plan, split, teacher, cfg)?;
    let g = &plan.train_graph;
    let mut rng = Rng::new(cfg.seed);
    if stage == Stage::Two {
        if teacher.is_none() {
            return Err(Error::Config("stage two re-runs distillation and needs the teacher".into()));
        }
        params.ensure_latent(&mut rng);
    }
    let base_hash = params.base_params_hash();

    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut accessed = BTreeSet::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let val_labels = plan.eval_graph.labels_of(&plan.val_nodes);
    let eval_mode = match stage {
        Stage::One => EvalMode::Explicit,
        Stage::Two => EvalMode::Latent,
    };
    // The untrained state is a selection candidate too; for stage two
    // it is exactly the stage-one baseline.
    let val0 = {
        let probs = student_probs(&params, plan, &plan.val_nodes, &plan.val_rows, eval_mode)?;
        accuracy_fraction(&probs, &val_labels)
    };
    let mut best: Option<(f64, SaMlpParams)> = Some((val0, params.clone()));

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..g.n()).collect();
        rng.shuffle(&mut order);
        let (mut ce_sum, mut ce_n) = (0.0, 0usize);
        let (mut kd_sum, mut kd_mix_sum, mut kd_n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            bp.admit(chunk, &mut accessed)?;
            let x = g.features().gather_rows(chunk);
            let rows = g.adjacency().gather_rows(chunk);
            let (ce_rows, ce_labels) = bp.ce_rows(chunk);

            let tape = Tape::new();
            let bound = params.bind(&tape);
            let xv = tape.leaf(x.clone());
            let source = match stage {
                Stage::One => StructureSource::ExplicitRows(&rows),
                Stage::Two => StructureSource::LatentFromFeatures,
            };
            let trace = params.forward(&tape, &bound, xv, source, true, &mut rng)?;

            let mut total: Option<Var> = None;
            if cfg.loss_weight < 1.0 && !ce_rows.is_empty() {
                let sel = tape.select_rows(trace.scores, &ce_rows)?;
                let ce = tape.softmax_cross_entropy(sel, &ce_labels)?;
                ce_sum += tape.scalar(ce) * ce_rows.len() as f64;
                ce_n += ce_rows.len();
                total = Some(tape.scale(ce, 1.0 - cfg.loss_weight));
            }
            if cfg.loss_weight > 0.0 {
                let teacher_b = bp.teacher_rows(teacher.unwrap(), chunk)?;
                let plain = tape.softmax_kl(trace.scores, &teacher_b)?;
                kd_sum += tape.scalar(plain) * chunk.len() as f64;
                kd_n += chunk.len();
                let mut dis = tape.scale(plain, cfg.delta);
                if cfg.delta < 1.0 {
                    let mix = sample_mix(&x, &rows, &teacher_b, cfg.eta, &mut rng)?;
                    let xm = tape.leaf(mix.x_mixed.clone());
                    let source_m = match stage {
                        Stage::One => StructureSource::ExplicitRows(&mix.rows_mixed),
                        Stage::Two => StructureSource::LatentFromFeatures,
                    };
                    let trace_m = params.forward(&tape, &bound, xm, source_m, true, &mut rng)?;
                    let mixed = tape.softmax_kl(trace_m.scores, &mix.teacher_mixed)?;
                    kd_mix_sum += tape.scalar(mixed) * chunk.len() as f64;
                    dis = tape.add(dis, tape.scale(mixed, 1.0 - cfg.delta))?;
                }
                let weighted = tape.scale(dis, cfg.loss_weight);
                total = Some(match total {
                    Some(t) => tape.add(t, weighted)?,
                    None => weighted,
                });
            }
            let Some(loss) = total else { continue };
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Numeric(format!("student loss non-finite at epoch {epoch}")));
            }
            tape.backward(loss)?;
            match stage {
                Stage::One => {
                    let vars = bound_base_vars(&bound);
                    let mut tensors = params.base_param_tensors_mut();
                    pull_grads(&tape, &vars, &mut tensors);
                    adam.step(&mut tensors)?;
                }
                Stage::Two => {
                    let vars = bound.enc_struct_latent.as_ref().unwrap().param_vars();
                    let mut tensors = params.latent_param_tensors_mut();
                    pull_grads(&tape, &vars, &mut tensors);
                    adam.step(&mut tensors)?;
                }
            }
        }

        let val_probs = student_probs(&params, plan, &plan.val_nodes, &plan.val_rows, eval_mode)?;
        let val_acc = accuracy_fraction(&val_probs, &val_labels);
        log.push(EpochMetrics {
            epoch,
            ce_loss: if ce_n > 0 { ce_sum / ce_n as f64 } else { 0.0 },
            kd_loss: if kd_n > 0 { kd_sum / kd_n as f64 } else { 0.0 },
            kd_mix_loss: if kd_n > 0 { kd_mix_sum / kd_n as f64 } else { 0.0 },
            val_acc,
        });
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            best = Some((val_acc, params.clone()));
        }
    }
    let (best_val_acc, best_params) = best.expect("at least one epoch");
    if stage == Stage::Two {
        assert_eq!(
            best_params.base_params_hash(),
            base_hash,
            "stage two mutated frozen parameters"
        );
    }
    Ok(TrainOutcome { params: best_params, best_val_acc, log, accessed_global: accessed })
}

/// Transductive objective: (1 - loss_weight) * CE on labeled batch rows
/// plus loss_weight * structure-mixing distillation on every batch row.
pub fn train_student_trans(
    params: SaMlpParams,
    teacher: Option<&TeacherOutput>,
    plan: &ScenarioPlan,
    split: &SplitAssignment,
    cfg: &DistillConfig,
) -> Result<TrainOutcome<SaMlpParams>> {
    if plan.scenario != Scenario::Trans {
        return Err(Error::Config(format!(
            "train_student_trans given a {} plan",
            plan.scenario.as_str()
        )));
    }
    train_samlp_engine(params, teacher, plan, split, cfg, Stage::One)
}

/// Inductive objective: identical loop drawn from the labeled subgraph
/// only; evaluation uses the plan's eval rows.
pub fn train_student_ind(
    params: SaMlpParams,
    teacher: Option<&TeacherOutput>,
    plan: &ScenarioPlan,
    split: &SplitAssignment,
    cfg: &DistillConfig,
) -> Result<TrainOutcome<SaMlpParams>> {
    if plan.scenario == Scenario::Trans {
        return Err(Error::Config("train_student_ind given a transductive plan".into()));
    }
    train_samlp_engine(params, teacher, plan, split, cfg, Stage::One)
}

/// Stage two: freezes everything but the latent structure encoder and
/// re-runs the inductive objective with the latent source, so isolated
/// nodes gain a feature-derived structure embedding.
pub fn train_stage2(
    params: SaMlpParams,
    teacher: &TeacherOutput,
    plan: &ScenarioPlan,
    split: &SplitAssignment,
    cfg: &DistillConfig,
) -> Result<TrainOutcome<SaMlpParams>> {
    train_samlp_engine(params, Some(teacher), plan, split, cfg, Stage::Two)
}

/// Feature-only student training (MLP baseline and its distilled form).
/// Distillation here is plain logit KD; there is no structure to mix.
pub fn train_mlp_student(
    mut params: MlpStudent,
    teacher: Option<&TeacherOutput>,
    plan: &ScenarioPlan,
    split: &SplitAssignment,
    cfg: &DistillConfig,
) -> Result<TrainOutcome<MlpStudent>> {
    cfg.validate()?;
    let bp = BatchPlan::new(plan, split, teacher, cfg)?;
    let g = &plan.train_graph;
    let mut rng = Rng::new(cfg.seed);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut accessed = BTreeSet::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, MlpStudent)> = None;
    let val_labels = plan.eval_graph.labels_of(&plan.val_nodes);
    let val_x = plan.eval_graph.features().gather_rows(&plan.val_nodes);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..g.n()).collect();
        rng.shuffle(&mut order);
        let (mut ce_sum, mut ce_n) = (0.0, 0usize);
        let (mut kd_sum, mut kd_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            bp.admit(chunk, &mut accessed)?;
            let x = g.features().gather_rows(chunk);
            let (ce_rows, ce_labels) = bp.ce_rows(chunk);

            let tape = Tape::new();
            let bound = params.mlp.bind(&tape);
            let xv = tape.leaf(x);
            let scores = bound.apply(&tape, xv, true, &mut rng)?;

            let mut total: Option<Var> = None;
            if cfg.loss_weight < 1.0 && !ce_rows.is_empty() {
                let sel = tape.select_rows(scores, &ce_rows)?;
                let ce = tape.softmax_cross_entropy(sel, &ce_labels)?;
                ce_sum += tape.scalar(ce) * ce_rows.len() as f64;
                ce_n += ce_rows.len();
                total = Some(tape.scale(ce, 1.0 - cfg.loss_weight));
            }
            if cfg.loss_weight > 0.0 {
                let teacher_b = bp.teacher_rows(teacher.unwrap(), chunk)?;
                let kl = tape.softmax_kl(scores, &teacher_b)?;
                kd_sum += tape.scalar(kl) * chunk.len() as f64;
                kd_n += chunk.len();
                let weighted = tape.scale(kl, cfg.loss_weight);
                total = Some(match total {
                    Some(t) => tape.add(t, weighted)?,
                    None => weighted,
                });
            }
            let Some(loss) = total else { continue };
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Numeric(format!("mlp loss non-finite at epoch {epoch}")));
            }
            tape.backward(loss)?;
            let vars = bound.param_vars();
            let mut tensors = params.mlp.param_tensors_mut();
            pull_grads(&tape, &vars, &mut tensors);
            adam.step(&mut tensors)?;
        }
        let val_probs = params.forward_probs(&val_x)?;
        let val_acc = accuracy_fraction(&val_probs, &val_labels);
        log.push(EpochMetrics {
            epoch,
            ce_loss: if ce_n > 0 { ce_sum / ce_n as f64 } else { 0.0 },
            kd_loss: if kd_n > 0 { kd_sum / kd_n as f64 } else { 0.0 },
            kd_mix_loss: 0.0,
            val_acc,
        });
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            best = Some((val_acc, params.clone()));
        }
    }
    let (best_val_acc, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome { params: best_params, best_val_acc, log, accessed_global: accessed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_scenario, make_split, Scenario};
    use crate::graph::synth::{generate_synthetic, SynthConfig};
    use crate::nn::tensor;
    use crate::student::SaMlpConfig;
    use crate::teacher::{train_teacher, TeacherConfig};

    fn toy_batch() -> (Tensor, SparseRows, Tensor) {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let rows = SparseRows::from_rows(
            4,
            vec![vec![(0, 1.0), (2, 1.0)], vec![(1, 1.0)], vec![(2, 1.0), (3, 1.0)]],
        )
        .unwrap();
        let teacher = Tensor::from_rows(&[
            vec![0.7, 0.3],
            vec![0.2, 0.8],
            vec![0.5, 0.5],
        ]);
        (x, rows, teacher)
    }

    #[test]
    fn lambda_one_reproduces_the_original_batch() {
        let (x, rows, teacher) = toy_batch();
        let mix = mix_with(1.0, &[2, 0, 1], &x, &rows, &teacher).unwrap();
        assert_eq!(mix.x_mixed, x);
        assert_eq!(mix.rows_mixed, rows);
        assert_eq!(mix.teacher_mixed, teacher);
    }

    #[test]
    fn lambda_zero_reproduces_the_permuted_batch() {
        let (x, rows, teacher) = toy_batch();
        let perm = vec![2usize, 0, 1];
        let mix = mix_with(0.0, &perm, &x, &rows, &teacher).unwrap();
        for i in 0..3 {
            assert_eq!(mix.x_mixed.row(i), x.row(perm[i]));
            assert_eq!(mix.rows_mixed.row(i), rows.row(perm[i]));
            assert_eq!(mix.teacher_mixed.row(i), teacher.row(perm[i]));
        }
    }

    #[test]
    fn shared_columns_of_binary_rows_get_weight_one() {
        let rows = SparseRows::from_rows(
            3,
            vec![vec![(0, 1.0), (1, 1.0)], vec![(1, 1.0), (2, 1.0)]],
        )
        .unwrap();
        let x = Tensor::zeros(2, 1);
        let teacher = Tensor::from_rows(&[vec![1.0], vec![1.0]]);
        let mix = mix_with(0.3, &[1, 0], &x, &rows, &teacher).unwrap();
        // Column 1 is shared: 0.3 * 1 + 0.7 * 1 = 1.
        let row0: Vec<(usize, f64)> = mix.rows_mixed.row(0).to_vec();
        assert_eq!(row0, vec![(0, 0.3), (1, 1.0), (2, 0.7)]);
    }

    #[test]
    fn mixed_rows_match_densified_mixing() {
        let mut rng = Rng::new(3);
        for trial in 0..10 {
            let n = 5;
            let mut rows = SparseRows::new(n, 7);
            for i in 0..n {
                for j in 0..7 {
                    if rng.bernoulli(0.35) {
                        rows.insert(i, j, 1.0);
                    }
                }
            }
            let x = Tensor::uniform_init(n, 3, 1, &mut rng);
            let teacher = tensor::softmax_rows(&Tensor::uniform_init(n, 4, 1, &mut rng));
            let mix = sample_mix(&x, &rows, &teacher, 0.2, &mut rng).unwrap();
            // Bijectivity.
            let mut seen = vec![false; n];
            for &p in &mix.permutation {
                assert!(!seen[p]);
                seen[p] = true;
            }
            // Densified oracle.
            let dense = rows.to_dense();
            let perm_dense = mix.permutation.iter().map(|&p| dense.row(p).to_vec());
            for (i, prow) in perm_dense.enumerate() {
                let mixed_dense = mix.rows_mixed.to_dense();
                for j in 0..7 {
                    let expect = mix.lambda * dense.get(i, j) + (1.0 - mix.lambda) * prow[j];
                    assert!(
                        (mixed_dense.get(i, j) - expect).abs() < 1e-12,
                        "trial {trial} entry ({i}, {j})"
                    );
                }
            }
            // Teacher rows stay distributions.
            for i in 0..n {
                let sum: f64 = mix.teacher_mixed.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn beta_mix_has_symmetric_mean() {
        let (x, rows, teacher) = toy_batch();
        let mut rng = Rng::new(4);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_mix(&x, &rows, &teacher, 0.2, &mut rng).unwrap().lambda;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean lambda {mean}");
        assert!(sample_mix(&x, &rows, &teacher, 0.0, &mut rng).is_err());
    }

    #[test]
    fn distill_loss_trivial_and_recomposition() {
        let mut rng = Rng::new(5);
        let p = tensor::softmax_rows(&Tensor::uniform_init(4, 3, 1, &mut rng));
        let q = tensor::softmax_rows(&Tensor::uniform_init(4, 3, 1, &mut rng));
        // Student equals teacher on both terms -> 0.
        assert!(distill_loss(&p, &q, &p, &q, 0.3).unwrap().abs() < 1e-12);
        // delta = 1 reduces to plain logit KD.
        let s = tensor::softmax_rows(&Tensor::uniform_init(4, 3, 1, &mut rng));
        let plain = kl_div_probs(&s, &p).unwrap();
        assert!((distill_loss(&s, &q, &p, &q, 1.0).unwrap() - plain).abs() < 1e-12);
        // delta = 0.5 equals the hand-combined terms.
        let sm = tensor::softmax_rows(&Tensor::uniform_init(4, 3, 1, &mut rng));
        let by_hand = 0.5 * kl_div_probs(&s, &p).unwrap() + 0.5 * kl_div_probs(&sm, &q).unwrap();
        assert!((distill_loss(&s, &sm, &p, &q, 0.5).unwrap() - by_hand).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_objective_degenerates_to_plain_kd() {
        let (x, rows, teacher) = toy_batch();
        let mix = mix_with(1.0, &[1, 2, 0], &x, &rows, &teacher).unwrap();
        let mut rng = Rng::new(6);
        let student = tensor::softmax_rows(&Tensor::uniform_init(3, 2, 1, &mut rng));
        // With lambda = 1 the mixed pair equals the plain pair, so the
        // blended objective equals the delta = 1 objective for any delta.
        let full = distill_loss(&student, &student, &teacher, &mix.teacher_mixed, 0.3).unwrap();
        let plain_only = distill_loss(&student, &student, &teacher, &teacher, 1.0).unwrap();
        assert!((full - plain_only).abs() < 1e-12);
    }

    fn small_setup(
        scenario: Scenario,
    ) -> (crate::graph::Graph, SplitAssignment, ScenarioPlan, TeacherOutput) {
        let g = generate_synthetic(&SynthConfig {
            n: 90,
            feature_dim: 5,
            n_classes: 3,
            avg_degree: 6.0,
            homophily: 0.7,
            feature_signal: 0.8,
            seed: 7,
        })
        .unwrap();
        let split = make_split(&g, (0.48, 0.32, 0.2), 1).unwrap();
        let plan = build_scenario(&g, &split, scenario, 0.0, 0).unwrap();
        let (_, soft) = train_teacher(
            &plan,
            &TeacherConfig { epochs: 5, hidden: 8, ..Default::default() },
        )
        .unwrap();
        (g, split, plan, soft)
    }

    fn quick_cfg() -> DistillConfig {
        DistillConfig { epochs: 3, batch_size: 32, ..Default::default() }
    }

    #[test]
    fn inductive_training_accesses_only_train_nodes() {
        let (_, split, plan, soft) = small_setup(Scenario::IndWithConnection);
        let mut rng = Rng::new(8);
        let student = SaMlpParams::new(
            &SaMlpConfig {
                feature_dim: 5,
                struct_cols: plan.struct_cols,
                hidden: 8,
                classes: 3,
                dropout: 0.0,
            },
            &mut rng,
        );
        let out = train_student_ind(student, Some(&soft), &plan, &split, &quick_cfg()).unwrap();
        for &gid in &out.accessed_global {
            assert_eq!(split.role(gid), Role::Train, "node {gid} leaked into training");
        }
    }

    #[test]
    fn poisoned_plan_triggers_leakage_abort() {
        let (_, split, mut plan, soft) = small_setup(Scenario::IndWithConnection);
        // Corrupt the plan: smuggle a test node into the visible set.
        let test_node = plan.test_nodes[0];
        plan.visible[0] = test_node;
        let mut rng = Rng::new(9);
        let student = SaMlpParams::new(
            &SaMlpConfig {
                feature_dim: 5,
                struct_cols: plan.struct_cols,
                hidden: 8,
                classes: 3,
                dropout: 0.0,
            },
            &mut rng,
        );
        match train_student_ind(student, Some(&soft), &plan, &split, &quick_cfg()) {
            Err(Error::Leakage(_)) => {}
            other => panic!("expected leakage abort, got {other:?}"),
        }
    }

    #[test]
    fn stage_two_freezes_base_parameters() {
        let (_, split, plan, soft) = small_setup(Scenario::IndWithConnection);
        let mut rng = Rng::new(10);
        let student = SaMlpParams::new(
            &SaMlpConfig {
                feature_dim: 5,
                struct_cols: plan.struct_cols,
                hidden: 8,
                classes: 3,
                dropout: 0.0,
            },
            &mut rng,
        );
        let stage1 = train_student_ind(student, Some(&soft), &plan, &split, &quick_cfg()).unwrap();
        let base_hash = stage1.params.base_params_hash();
        let latent_absent = !stage1.params.has_latent();
        let stage2 = train_stage2(stage1.params, &soft, &plan, &split, &quick_cfg()).unwrap();
        assert!(latent_absent);
        assert!(stage2.params.has_latent());
        assert_eq!(stage2.params.base_params_hash(), base_hash);
    }

    #[test]
    fn loss_weight_one_ignores_labels_entirely() {
        let (_, split, plan, soft) = small_setup(Scenario::IndWithConnection);
        let make_student = || {
            let mut rng = Rng::new(11);
            SaMlpParams::new(
                &SaMlpConfig {
                    feature_dim: 5,
                    struct_cols: plan.struct_cols,
                    hidden: 8,
                    classes: 3,
                    dropout: 0.0,
                },
                &mut rng,
            )
        };
        let cfg = DistillConfig { loss_weight: 1.0, ..quick_cfg() };
        let a = train_samlp_engine(make_student(), Some(&soft), &plan, &split, &cfg, Stage::One)
            .unwrap();
        // Same run against a plan with scrambled training labels.
        let mut plan2 = plan.clone();
        let mut g2 = plan2.train_graph.clone();
        let scrambled: Vec<usize> =
            g2.labels().iter().map(|&l| (l + 1) % 3).collect();
        g2 = crate::graph::Graph::new(
            g2.features().clone(),
            &graph_edges(&g2),
            scrambled,
            3,
        )
        .unwrap();
        plan2.train_graph = g2;
        let b = train_samlp_engine(make_student(), Some(&soft), &plan2, &split, &cfg, Stage::One)
            .unwrap();
        assert_eq!(a.params.params_hash(), b.params.params_hash());
    }

    fn graph_edges(g: &crate::graph::Graph) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..g.n() {
            for &(j, _) in g.adjacency().row(i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn student_training_leaves_the_teacher_frozen() {
        let g = generate_synthetic(&SynthConfig {
            n: 90,
            feature_dim: 5,
            n_classes: 3,
            avg_degree: 6.0,
            homophily: 0.7,
            feature_signal: 0.8,
            seed: 7,
        })
        .unwrap();
        let split = make_split(&g, (0.48, 0.32, 0.2), 1).unwrap();
        let plan = build_scenario(&g, &split, Scenario::Trans, 0.0, 0).unwrap();
        let (teacher, soft) = train_teacher(
            &plan,
            &TeacherConfig { epochs: 5, hidden: 8, ..Default::default() },
        )
        .unwrap();
        let hash_before = teacher.params_hash();
        let soft_before = soft.probs.clone();
        let mut rng = Rng::new(15);
        let student = SaMlpParams::new(
            &SaMlpConfig {
                feature_dim: 5,
                struct_cols: plan.struct_cols,
                hidden: 8,
                classes: 3,
                dropout: 0.0,
            },
            &mut rng,
        );
        train_student_trans(student, Some(&soft), &plan, &split, &quick_cfg()).unwrap();
        assert_eq!(teacher.params_hash(), hash_before);
        assert_eq!(soft.probs.data(), soft_before.data());
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let (_, split, plan, soft) = small_setup(Scenario::Trans);
        let make_student = || {
            let mut rng = Rng::new(12);
            SaMlpParams::new(
                &SaMlpConfig {
                    feature_dim: 5,
                    struct_cols: plan.struct_cols,
                    hidden: 8,
                    classes: 3,
                    dropout: 0.2,
                },
                &mut rng,
            )
        };
        let a = train_student_trans(make_student(), Some(&soft), &plan, &split, &quick_cfg())
            .unwrap();
        let b = train_student_trans(make_student(), Some(&soft), &plan, &split, &quick_cfg())
            .unwrap();
        assert_eq!(a.params.params_hash(), b.params.params_hash());
        assert_eq!(a.best_val_acc, b.best_val_acc);
    }

    #[test]
    fn routed_inference_matches_pure_paths_at_the_extremes() {
        let (_, split, plan, soft) = small_setup(Scenario::IndWithConnection);
        let mut rng = Rng::new(13);
        let student = SaMlpParams::new(
            &SaMlpConfig {
                feature_dim: 5,
                struct_cols: plan.struct_cols,
                hidden: 8,
                classes: 3,
                dropout: 0.0,
            },
            &mut rng,
        );
        let stage1 = train_student_ind(student, Some(&soft), &plan, &split, &quick_cfg()).unwrap();
        let stage2 = train_stage2(stage1.params, &soft, &plan, &split, &quick_cfg()).unwrap();
        let params = stage2.params;
        let x = plan.eval_graph.features().gather_rows(&plan.test_nodes);

        // All rows nonempty -> identical to the explicit batch forward.
        let full_rows = plan.test_rows.clone();
        let nonempty: Vec<usize> =
            (0..full_rows.n_rows()).filter(|&i| !full_rows.row_is_empty(i)).collect();
        let xc = x.gather_rows(&nonempty);
        let rc = full_rows.gather_rows(&nonempty);
        let routed = route_mixed_inference(&params, &xc, &rc).unwrap();
        let (_, explicit) = params.forward_value(&xc, StructureSource::ExplicitRows(&rc)).unwrap();
        assert!(routed.max_abs_diff(&explicit) < 1e-15);

        // All rows empty -> identical to the latent batch forward.
        let empty = SparseRows::new(xc.rows(), plan.struct_cols);
        let routed = route_mixed_inference(&params, &xc, &empty).unwrap();
        let (_, latent) = params.forward_value(&xc, StructureSource::LatentFromFeatures).unwrap();
        assert!(routed.max_abs_diff(&latent) < 1e-15);
    }

    #[test]
    fn latent_route_without_stage_two_encoder_errors() {
        let mut rng = Rng::new(14);
        let params = SaMlpParams::new(
            &SaMlpConfig { feature_dim: 3, struct_cols: 4, hidden: 4, classes: 2, dropout: 0.0 },
            &mut rng,
        );
        let x = Tensor::zeros(2, 3);
        let rows = SparseRows::new(2, 4);
        assert!(route_mixed_inference(&params, &x, &rows).is_err());
    }
}
