//! Structure-aware MLP student and the feature-only MLP baseline.
//!
//! The student encodes node features and adjacency rows separately,
//! decodes each embedding to class scores, and fuses the two score
//! vectors with a per-node sigmoid gate. Every module is an MLP over
//! batch rows, so inference needs no message passing: batch outputs are
//! invariant to how the batch is partitioned.
//!
//! A second structure encoder (trained in stage two of distillation)
//! approximates the structure embedding from raw features, serving
//! nodes that arrive with no connections.

use std::path::Path;

use crate::ckpt::{hash_tensors, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::autodiff::{Tape, Var};
use crate::nn::layers::{BoundLinear, BoundMlp, LinearLayer, Mlp};
use crate::nn::tensor::{self, SparseRows, Tensor};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct SaMlpConfig {
    pub feature_dim: usize,
    /// Structure-row vocabulary width; fixed at training time to the
    /// number of training-visible columns.
    pub struct_cols: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

/// Where a batch's structure embedding comes from.
#[derive(Clone, Copy, Debug)]
pub enum StructureSource<'a> {
    /// Adjacency rows over the training-time column vocabulary.
    ExplicitRows(&'a SparseRows),
    /// Stage-two encoder applied to the node features.
    LatentFromFeatures,
    /// No structure signal; equivalent to all-empty explicit rows.
    Zero,
}

#[derive(Clone, Debug)]
pub struct SaMlpParams {
    pub enc_feat: LinearLayer,   // d -> d_h
    pub enc_struct: LinearLayer, // struct_cols -> d_h
    pub dec_feat: Mlp,           // d_h -> d_h -> c
    pub dec_struct: Mlp,         // d_h -> d_h -> c
    pub gate: LinearLayer,       // 2 d_h -> 1
    /// Stage-two latent structure encoder (d -> d_h), absent until
    /// stage two allocates it.
    pub enc_struct_latent: Option<Mlp>,
}

pub struct SaMlpBound {
    pub enc_feat: BoundLinear,
    pub enc_struct: BoundLinear,
    pub dec_feat: BoundMlp,
    pub dec_struct: BoundMlp,
    pub gate: BoundLinear,
    pub enc_struct_latent: Option<BoundMlp>,
}

/// Intermediate tensors of one student forward pass.
pub struct StudentTrace {
    pub h_a: Var,
    pub h_x: Var,
    pub z_a: Var,
    pub z_x: Var,
    /// Per-node gate score in (0, 1), batch x 1.
    pub alpha: Var,
    /// Fused pre-softmax class scores.
    pub scores: Var,
    /// Row-stochastic predictions (value of softmax(scores)).
    pub probs: Tensor,
}

impl SaMlpParams {
    pub fn new(cfg: &SaMlpConfig, rng: &mut Rng) -> Self {
        SaMlpParams {
            enc_feat: LinearLayer::new(cfg.feature_dim, cfg.hidden, rng),
            enc_struct: LinearLayer::new(cfg.struct_cols, cfg.hidden, rng),
            dec_feat: Mlp::new(&[cfg.hidden, cfg.hidden, cfg.classes], cfg.dropout, rng),
            dec_struct: Mlp::new(&[cfg.hidden, cfg.hidden, cfg.classes], cfg.dropout, rng),
            gate: LinearLayer::new(2 * cfg.hidden, 1, rng),
            enc_struct_latent: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.enc_feat.in_dim()
    }

    pub fn struct_cols(&self) -> usize {
        self.enc_struct.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.enc_feat.out_dim()
    }

    pub fn classes(&self) -> usize {
        self.dec_feat.out_dim()
    }

    pub fn has_latent(&self) -> bool {
        self.enc_struct_latent.is_some()
    }

    /// Allocates the stage-two encoder if missing: a single linear map
    /// like the other encoders. It starts at zero weights with the
    /// explicit encoder's bias, so the latent path initially reproduces
    /// the empty-neighborhood embedding and training can only move away
    /// from that baseline.
    pub fn ensure_latent(&mut self, rng: &mut Rng) {
        if self.enc_struct_latent.is_none() {
            let d = self.feature_dim();
            let h = self.hidden();
            let mut latent = Mlp::new(&[d, h], self.dec_feat.dropout, rng);
            latent.layers[0].weight = Tensor::zeros(d, h);
            latent.layers[0].bias = self.enc_struct.bias.clone();
            self.enc_struct_latent = Some(latent);
        }
    }

    pub fn bind(&self, tape: &Tape) -> SaMlpBound {
        SaMlpBound {
            enc_feat: self.enc_feat.bind(tape),
            enc_struct: self.enc_struct.bind(tape),
            dec_feat: self.dec_feat.bind(tape),
            dec_struct: self.dec_struct.bind(tape),
            gate: self.gate.bind(tape),
            enc_struct_latent: self.enc_struct_latent.as_ref().map(|m| m.bind(tape)),
        }
    }

    /// Encoders only: feature embedding and structure embedding.
    pub fn encode(
        &self,
        tape: &Tape,
        bound: &SaMlpBound,
        x: Var,
        source: StructureSource<'_>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        if x.cols() != self.feature_dim() {
            return Err(Error::Dim {
                op: "encode",
                lhs: x.shape(),
                rhs: (x.rows(), self.feature_dim()),
            });
        }
        let h_x = bound.enc_feat.apply(tape, x)?;
        let h_a = match source {
            StructureSource::ExplicitRows(rows) => {
                if rows.n_cols() != self.struct_cols() {
                    return Err(Error::Dim {
                        op: "encode",
                        lhs: (rows.n_rows(), rows.n_cols()),
                        rhs: (rows.n_rows(), self.struct_cols()),
                    });
                }
                if rows.n_rows() != x.rows() {
                    return Err(Error::Dim {
                        op: "encode",
                        lhs: (rows.n_rows(), rows.n_cols()),
                        rhs: x.shape(),
                    });
                }
                tape.add_bias(tape.spmm(rows, bound.enc_struct.w)?, bound.enc_struct.b)?
            }
            StructureSource::LatentFromFeatures => match &bound.enc_struct_latent {
                Some(latent) => latent.apply(tape, x, training, rng)?,
                None => {
                    return Err(Error::Config(
                        "latent structure source requires the stage-two encoder".into(),
                    ))
                }
            },
            StructureSource::Zero => {
                let empty = SparseRows::new(x.rows(), self.struct_cols());
                tape.add_bias(tape.spmm(&empty, bound.enc_struct.w)?, bound.enc_struct.b)?
            }
        };
        Ok((h_x, h_a))
    }

    /// Decoders plus gate fusion: class scores from each embedding, a
    /// per-node alpha from [H_A || H_X], and the fused prediction
    /// softmax((1-alpha) Z_X + alpha Z_A).
    pub fn decode_fuse(
        &self,
        tape: &Tape,
        bound: &SaMlpBound,
        h_x: Var,
        h_a: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<StudentTrace> {
        if h_x.shape() != h_a.shape() {
            return Err(Error::Dim { op: "decode_fuse", lhs: h_x.shape(), rhs: h_a.shape() });
        }
        let z_x = bound.dec_feat.apply(tape, h_x, training, rng)?;
        let z_a = bound.dec_struct.apply(tape, h_a, training, rng)?;
        // Structure embedding first in the gate input.
        let gate_in = tape.concat_cols(h_a, h_x)?;
        let alpha = tape.sigmoid(bound.gate.apply(tape, gate_in)?);
        let scores = tape.lerp_rows(alpha, z_x, z_a)?;
        let probs = tape.with_value(scores, tensor::softmax_rows);
        Ok(StudentTrace { h_a, h_x, z_a, z_x, alpha, scores, probs })
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &SaMlpBound,
        x: Var,
        source: StructureSource<'_>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<StudentTrace> {
        let (h_x, h_a) = self.encode(tape, bound, x, source, training, rng)?;
        self.decode_fuse(tape, bound, h_x, h_a, training, rng)
    }

    /// Pure-value inference; returns (alpha, probs).
    pub fn forward_value(
        &self,
        x: &Tensor,
        source: StructureSource<'_>,
    ) -> Result<(Tensor, Tensor)> {
        let h_x = self.enc_feat.forward_value(x)?;
        let h_a = match source {
            StructureSource::ExplicitRows(rows) => {
                if rows.n_cols() != self.struct_cols() {
                    return Err(Error::Dim {
                        op: "forward_value",
                        lhs: (rows.n_rows(), rows.n_cols()),
                        rhs: (rows.n_rows(), self.struct_cols()),
                    });
                }
                tensor::add_bias(&tensor::spmm(rows, &self.enc_struct.weight)?, &self.enc_struct.bias)?
            }
            StructureSource::LatentFromFeatures => self
                .enc_struct_latent
                .as_ref()
                .ok_or_else(|| {
                    Error::Config("latent structure source requires the stage-two encoder".into())
                })?
                .forward_value(x)?,
            StructureSource::Zero => {
                let mut h = Tensor::zeros(x.rows(), self.hidden());
                for i in 0..x.rows() {
                    h.row_mut(i).copy_from_slice(self.enc_struct.bias.row(0));
                }
                h
            }
        };
        let z_x = self.dec_feat.forward_value(&h_x)?;
        let z_a = self.dec_struct.forward_value(&h_a)?;
        let mut gate_in = Tensor::zeros(x.rows(), 2 * self.hidden());
        for i in 0..x.rows() {
            let row = gate_in.row_mut(i);
            row[..self.hidden()].copy_from_slice(h_a.row(i));
            row[self.hidden()..].copy_from_slice(h_x.row(i));
        }
        let alpha = tensor::sigmoid(&self.gate.forward_value(&gate_in)?);
        let mut scores = Tensor::zeros(x.rows(), self.classes());
        for i in 0..x.rows() {
            let a = alpha.get(i, 0);
            for j in 0..self.classes() {
                scores.set(i, j, (1.0 - a) * z_x.get(i, j) + a * z_a.get(i, j));
            }
        }
        Ok((alpha, tensor::softmax_rows(&scores)))
    }

    /// All parameters except the stage-two encoder, stable order.
    pub fn base_param_tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.enc_feat.weight,
            &self.enc_feat.bias,
            &self.enc_struct.weight,
            &self.enc_struct.bias,
        ];
        out.extend(self.dec_feat.param_tensors());
        out.extend(self.dec_struct.param_tensors());
        out.push(&self.gate.weight);
        out.push(&self.gate.bias);
        out
    }

    pub fn base_param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.enc_feat.weight,
            &mut self.enc_feat.bias,
            &mut self.enc_struct.weight,
            &mut self.enc_struct.bias,
        ];
        out.extend(self.dec_feat.param_tensors_mut());
        out.extend(self.dec_struct.param_tensors_mut());
        out.push(&mut self.gate.weight);
        out.push(&mut self.gate.bias);
        out
    }

    pub fn latent_param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.enc_struct_latent {
            Some(m) => m.param_tensors_mut(),
            None => Vec::new(),
        }
    }

    /// Hash over everything but the stage-two encoder; stage two must
    /// leave this unchanged.
    pub fn base_params_hash(&self) -> u64 {
        hash_tensors(&self.base_param_tensors())
    }

    pub fn params_hash(&self) -> u64 {
        let mut all = self.base_param_tensors();
        if let Some(m) = &self.enc_struct_latent {
            all.extend(m.param_tensors());
        }
        hash_tensors(&all)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("samlp");
        ck.put_meta("feature_dim", self.feature_dim());
        ck.put_meta("struct_cols", self.struct_cols());
        ck.put_meta("hidden", self.hidden());
        ck.put_meta("classes", self.classes());
        ck.put_meta("dropout", self.dec_feat.dropout);
        ck.put_meta("has_latent", self.has_latent());
        ck.put_tensor("enc_feat.w", &self.enc_feat.weight);
        ck.put_tensor("enc_feat.b", &self.enc_feat.bias);
        ck.put_tensor("enc_struct.w", &self.enc_struct.weight);
        ck.put_tensor("enc_struct.b", &self.enc_struct.bias);
        put_mlp(&mut ck, "dec_feat", &self.dec_feat);
        put_mlp(&mut ck, "dec_struct", &self.dec_struct);
        ck.put_tensor("gate.w", &self.gate.weight);
        ck.put_tensor("gate.b", &self.gate.bias);
        if let Some(m) = &self.enc_struct_latent {
            put_mlp(&mut ck, "enc_struct_latent", m);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<SaMlpParams> {
        if ck.kind() != "samlp" {
            return Err(Error::Config(format!("expected samlp checkpoint, found `{}`", ck.kind())));
        }
        let d = ck.meta_usize("feature_dim")?;
        let cols = ck.meta_usize("struct_cols")?;
        let h = ck.meta_usize("hidden")?;
        let c = ck.meta_usize("classes")?;
        let dropout = ck.meta_f64("dropout")?;
        let has_latent = ck.meta_bool("has_latent")?;
        Ok(SaMlpParams {
            enc_feat: LinearLayer {
                weight: ck.tensor_shaped("enc_feat.w", d, h)?,
                bias: ck.tensor_shaped("enc_feat.b", 1, h)?,
            },
            enc_struct: LinearLayer {
                weight: ck.tensor_shaped("enc_struct.w", cols, h)?,
                bias: ck.tensor_shaped("enc_struct.b", 1, h)?,
            },
            dec_feat: get_mlp(ck, "dec_feat", &[h, h, c], dropout)?,
            dec_struct: get_mlp(ck, "dec_struct", &[h, h, c], dropout)?,
            gate: LinearLayer {
                weight: ck.tensor_shaped("gate.w", 2 * h, 1)?,
                bias: ck.tensor_shaped("gate.b", 1, 1)?,
            },
            enc_struct_latent: if has_latent {
                Some(get_mlp(ck, "enc_struct_latent", &[d, h], dropout)?)
            } else {
                None
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

fn put_mlp(ck: &mut Checkpoint, prefix: &str, mlp: &Mlp) {
    for (k, layer) in mlp.layers.iter().enumerate() {
        ck.put_tensor(&format!("{prefix}.l{k}.w"), &layer.weight);
        ck.put_tensor(&format!("{prefix}.l{k}.b"), &layer.bias);
    }
    for (k, norm) in mlp.norms.iter().enumerate() {
        ck.put_tensor(&format!("{prefix}.n{k}.gamma"), &norm.gamma);
        ck.put_tensor(&format!("{prefix}.n{k}.beta"), &norm.beta);
    }
}

fn get_mlp(ck: &Checkpoint, prefix: &str, dims: &[usize], dropout: f64) -> Result<Mlp> {
    let mut rng = Rng::new(0);
    let mut mlp = Mlp::new(dims, dropout, &mut rng);
    for (k, layer) in mlp.layers.iter_mut().enumerate() {
        layer.weight = ck.tensor_shaped(&format!("{prefix}.l{k}.w"), dims[k], dims[k + 1])?;
        layer.bias = ck.tensor_shaped(&format!("{prefix}.l{k}.b"), 1, dims[k + 1])?;
    }
    for (k, norm) in mlp.norms.iter_mut().enumerate() {
        norm.gamma = ck.tensor_shaped(&format!("{prefix}.n{k}.gamma"), 1, dims[k + 1])?;
        norm.beta = ck.tensor_shaped(&format!("{prefix}.n{k}.beta"), 1, dims[k + 1])?;
    }
    Ok(mlp)
}

/// Feature-only MLP student (the distillation baseline).
#[derive(Clone, Debug)]
pub struct MlpStudent {
    pub mlp: Mlp, // d -> d_h -> c
}

impl MlpStudent {
    pub fn new(feature_dim: usize, hidden: usize, classes: usize, dropout: f64, rng: &mut Rng) -> Self {
        MlpStudent { mlp: Mlp::new(&[feature_dim, hidden, classes], dropout, rng) }
    }

    /// Row-stochastic predictions from features alone.
    pub fn forward_probs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::softmax_rows(&self.mlp.forward_value(x)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("mlp");
        ck.put_meta("feature_dim", self.mlp.in_dim());
        ck.put_meta("hidden", self.mlp.layers[0].out_dim());
        ck.put_meta("classes", self.mlp.out_dim());
        ck.put_meta("dropout", self.mlp.dropout);
        put_mlp(&mut ck, "mlp", &self.mlp);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<MlpStudent> {
        if ck.kind() != "mlp" {
            return Err(Error::Config(format!("expected mlp checkpoint, found `{}`", ck.kind())));
        }
        let d = ck.meta_usize("feature_dim")?;
        let h = ck.meta_usize("hidden")?;
        let c = ck.meta_usize("classes")?;
        let dropout = ck.meta_f64("dropout")?;
        Ok(MlpStudent { mlp: get_mlp(ck, "mlp", &[d, h, c], dropout)? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn params_hash(&self) -> u64 {
        hash_tensors(&self.mlp.param_tensors())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_err_for;

    fn toy_cfg() -> SaMlpConfig {
        SaMlpConfig { feature_dim: 3, struct_cols: 6, hidden: 4, classes: 2, dropout: 0.0 }
    }

    fn toy_rows(n: usize) -> SparseRows {
        let mut rows = SparseRows::new(n, 6);
        for i in 0..n {
            if i % 3 != 0 {
                rows.insert(i, i % 6, 1.0);
                rows.insert(i, (i * 2 + 1) % 6, 1.0);
            }
        }
        rows
    }

    #[test]
    fn empty_row_structure_embedding_is_the_bias_path() {
        let mut rng = Rng::new(1);
        let params = SaMlpParams::new(&toy_cfg(), &mut rng);
        let x = Tensor::uniform_init(2, 3, 1, &mut rng);
        let rows = SparseRows::new(2, 6);
        let tape = Tape::inference();
        let xv = tape.leaf(x);
        let bound = params.bind(&tape);
        let (_, h_a) = params
            .encode(&tape, &bound, xv, StructureSource::ExplicitRows(&rows), false, &mut rng)
            .unwrap();
        let h_a = tape.value(h_a);
        for i in 0..2 {
            assert_eq!(h_a.row(i), params.enc_struct.bias.row(0));
        }
    }

    #[test]
    fn one_hot_row_selects_column_embedding_plus_bias() {
        let mut rng = Rng::new(2);
        let params = SaMlpParams::new(&toy_cfg(), &mut rng);
        let x = Tensor::uniform_init(1, 3, 1, &mut rng);
        let rows = SparseRows::from_rows(6, vec![vec![(4, 1.0)]]).unwrap();
        let tape = Tape::inference();
        let xv = tape.leaf(x);
        let bound = params.bind(&tape);
        let (_, h_a) = params
            .encode(&tape, &bound, xv, StructureSource::ExplicitRows(&rows), false, &mut rng)
            .unwrap();
        let h_a = tape.value(h_a);
        for j in 0..4 {
            let expect = params.enc_struct.weight.get(4, j) + params.enc_struct.bias.get(0, j);
            assert!((h_a.get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_source_equals_explicit_empty_rows() {
        let mut rng = Rng::new(3);
        let params = SaMlpParams::new(&toy_cfg(), &mut rng);
        let x = Tensor::uniform_init(3, 3, 1, &mut rng);
        let empty = SparseRows::new(3, 6);
        let (a_alpha, a_probs) =
            params.forward_value(&x, StructureSource::ExplicitRows(&empty)).unwrap();
        let (z_alpha, z_probs) = params.forward_value(&x, StructureSource::Zero).unwrap();
        assert!(a_alpha.max_abs_diff(&z_alpha) < 1e-15);
        assert!(a_probs.max_abs_diff(&z_probs) < 1e-15);
    }

    #[test]
    fn gate_saturation_selects_a_single_path() {
        let mut rng = Rng::new(4);
        let mut params = SaMlpParams::new(&toy_cfg(), &mut rng);
        let x = Tensor::uniform_init(4, 3, 1, &mut rng);
        let rows = toy_rows(4);

        params.gate.weight = Tensor::zeros(8, 1);
        params.gate.bias = Tensor::from_vec(1, 1, vec![-1e9]);
        let (alpha, probs) =
            params.forward_value(&x, StructureSource::ExplicitRows(&rows)).unwrap();
        assert!(alpha.data().iter().all(|&a| a == 0.0));
        // Feature path only: softmax(dec_feat(enc_feat(x))).
        let z_x = params
            .dec_feat
            .forward_value(&params.enc_feat.forward_value(&x).unwrap())
            .unwrap();
        assert!(probs.max_abs_diff(&tensor::softmax_rows(&z_x)) < 1e-12);

        params.gate.bias = Tensor::from_vec(1, 1, vec![1e9]);
        let (alpha, probs) =
            params.forward_value(&x, StructureSource::ExplicitRows(&rows)).unwrap();
        assert!(alpha.data().iter().all(|&a| a == 1.0));
        let h_a = tensor::add_bias(
            &tensor::spmm(&rows, &params.enc_struct.weight).unwrap(),
            &params.enc_struct.bias,
        )
        .unwrap();
        let z_a = params.dec_struct.forward_value(&h_a).unwrap();
        assert!(probs.max_abs_diff(&tensor::softmax_rows(&z_a)) < 1e-12);
    }

    #[test]
    fn trace_matches_independent_recomposition() {
        let mut rng = Rng::new(5);
        let params = SaMlpParams::new(&toy_cfg(), &mut rng);
        let x = Tensor::uniform_init(5, 3, 1, &mut rng);
        let rows = toy_rows(5);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bound = params.bind(&tape);
        let trace = params
            .forward(&tape, &bound, xv, StructureSource::ExplicitRows(&rows), false, &mut rng)
            .unwrap();

        // Rows are distributions.
        for i in 0..5 {
            let sum: f64 = trace.probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let a = tape.value(trace.alpha).get(i, 0);
            assert!(a > 0.0 && a < 1.0);
        }

        // Recompose the prediction from the trace tensors.
        let z_x = tape.value(trace.z_x);
        let z_a = tape.value(trace.z_a);
        let alpha = tape.value(trace.alpha);
        let mut mix = Tensor::zeros(5, 2);
        for i in 0..5 {
            let a = alpha.get(i, 0);
            for j in 0..2 {
                mix.set(i, j, (1.0 - a) * z_x.get(i, j) + a * z_a.get(i, j));
            }
        }
        assert!(tensor::softmax_rows(&mix).max_abs_diff(&trace.probs) < 1e-12);

        // And against the pure-value path.
        let (alpha_v, probs_v) =
            params.forward_value(&x, StructureSource::ExplicitRows(&rows)).unwrap();
        assert!(alpha_v.max_abs_diff(&alpha) < 1e-12);
        assert!(probs_v.max_abs_diff(&trace.probs) < 1e-12);
    }

    #[test]
    fn batched_forward_equals_stacked_single_rows() {
        let mut rng = Rng::new(6);
        let params = SaMlpParams::new(&toy_cfg(), &mut rng);
        let x = Tensor::uniform_init(4, 3, 1, &mut rng);
        let rows = toy_rows(4);
        let (_, batch) = params.forward_value(&x, StructureSource::ExplicitRows(&rows)).unwrap();
        for i in 0..4 {
            let xi = x.gather_rows(&[i]);
            let ri = rows.gather_rows(&[i]);
            let (_, pi) = params.forward_value(&xi, StructureSource::ExplicitRows(&ri)).unwrap();
            for j in 0..2 {
                assert!((batch.get(i, j) - pi.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn structure_ablation_pins_each_path() {
        let mut rng = Rng::new(7);
        let mut params = SaMlpParams::new(&toy_cfg(), &mut rng);
        params.gate.weight = Tensor::zeros(8, 1);
        let x = Tensor::uniform_init(4, 3, 1, &mut rng);
        let rows_a = toy_rows(4);
        let mut rows_b = toy_rows(4);
        rows_b.clear_row(1);
        rows_b.insert(2, 5, 1.0);

        // alpha = 0: adjacency changes must not move predictions.
        params.gate.bias = Tensor::from_vec(1, 1, vec![-1e9]);
        let (_, pa) = params.forward_value(&x, StructureSource::ExplicitRows(&rows_a)).unwrap();
        let (_, pb) = params.forward_value(&x, StructureSource::ExplicitRows(&rows_b)).unwrap();
        assert!(pa.max_abs_diff(&pb) == 0.0);

        // alpha = 1: feature changes must not move predictions.
        params.gate.bias = Tensor::from_vec(1, 1, vec![1e9]);
        let mut x2 = x.clone();
        x2.set(0, 0, 9.0);
        x2.set(3, 2, -9.0);
        let (_, pa) = params.forward_value(&x, StructureSource::ExplicitRows(&rows_a)).unwrap();
        let (_, pb) = params.forward_value(&x2, StructureSource::ExplicitRows(&rows_a)).unwrap();
        assert!(pa.max_abs_diff(&pb) == 0.0);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let params = SaMlpParams::new(&toy_cfg(), &mut rng);
        let x = Tensor::uniform_init(4, 3, 1, &mut rng);
        let rows = toy_rows(4);
        // Zero-initialized biases put empty-row layer-norm inputs at the
        // zero-variance point, where finite differences are invalid
        // (curvature ~ 1/eps^1.5 even though the gradient is exact).
        // Check away from that degenerate point.
        let leaves: Vec<Tensor> = params
            .base_param_tensors()
            .into_iter()
            .map(|t| {
                let mut t = t.clone();
                for v in t.data_mut() {
                    if *v == 0.0 {
                        *v = rng.uniform() * 0.6 - 0.3;
                    }
                }
                t
            })
            .collect();
        let labels = vec![0usize, 1, 1, 0];
        let err = max_rel_err_for(
            &leaves,
            move |tape, vars| {
                let bound = SaMlpBound {
                    enc_feat: BoundLinear { w: vars[0], b: vars[1] },
                    enc_struct: BoundLinear { w: vars[2], b: vars[3] },
                    dec_feat: rebuild_mlp(&vars[4..10]),
                    dec_struct: rebuild_mlp(&vars[10..16]),
                    gate: BoundLinear { w: vars[16], b: vars[17] },
                    enc_struct_latent: None,
                };
                let xv = tape.leaf(x.clone());
                let mut rng = Rng::new(0);
                let trace = params
                    .forward(tape, &bound, xv, StructureSource::ExplicitRows(&rows), false, &mut rng)
                    .unwrap();
                tape.softmax_cross_entropy(trace.scores, &labels).unwrap()
            },
            1e-4,
        );
        assert!(err < 1e-3, "rel err {err}");
    }

    // Vars layout per Mlp::param_tensors: l0.w, l0.b, l1.w, l1.b, n0.gamma, n0.beta.
    fn rebuild_mlp(vars: &[Var]) -> BoundMlp {
        BoundMlp {
            layers: vec![
                BoundLinear { w: vars[0], b: vars[1] },
                BoundLinear { w: vars[2], b: vars[3] },
            ],
            norms: vec![crate::nn::layers::BoundLayerNorm { gamma: vars[4], beta: vars[5] }],
            dropout: 0.0,
            activation: crate::nn::layers::Activation::Relu,
        }
    }

    #[test]
    fn mlp_student_matches_hand_computed_two_layer() {
        let mut rng = Rng::new(9);
        let mut student = MlpStudent::new(2, 2, 2, 0.0, &mut rng);
        student.mlp.layers[0].weight = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        student.mlp.layers[0].bias = Tensor::from_rows(&[vec![0.0, 0.0]]);
        student.mlp.layers[1].weight = Tensor::from_rows(&[vec![2.0, -1.0], vec![0.5, 1.0]]);
        student.mlp.layers[1].bias = Tensor::from_rows(&[vec![0.1, 0.2]]);
        let x = Tensor::from_rows(&[vec![3.0, 1.0]]);
        // Hidden: LN([3,1]) = [1,-1]/sqrt(1+eps) then ReLU -> [~1, 0].
        let ln = 1.0 / (1.0 + 1e-5f64).sqrt();
        let h = [ln, 0.0];
        let logits = [
            h[0] * 2.0 + h[1] * 0.5 + 0.1,
            h[0] * -1.0 + h[1] * 1.0 + 0.2,
        ];
        let expect = tensor::softmax_rows(&Tensor::from_rows(&[logits.to_vec()]));
        let got = student.forward_probs(&x).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn saturated_gate_puts_all_histogram_mass_in_the_lowest_bin() {
        let mut rng = Rng::new(11);
        let mut params = SaMlpParams::new(&toy_cfg(), &mut rng);
        params.gate.weight = Tensor::zeros(8, 1);
        params.gate.bias = Tensor::from_vec(1, 1, vec![-10.0]);
        let x = Tensor::uniform_init(6, 3, 1, &mut rng);
        let rows = toy_rows(6);
        let (alphas, _) = params.forward_value(&x, StructureSource::ExplicitRows(&rows)).unwrap();
        let hist = crate::eval::metrics::AlphaHistogram::from_alphas(&alphas, "samlp", "toy");
        assert_eq!(hist.counts[0], 6);
        assert_eq!(hist.counts.iter().sum::<usize>(), 6);
        assert!(hist.mean < 0.001);
    }

    #[test]
    fn checkpoint_round_trip_with_latent() {
        let mut rng = Rng::new(10);
        let mut params = SaMlpParams::new(&toy_cfg(), &mut rng);
        params.ensure_latent(&mut rng);
        let path = std::env::temp_dir().join("samlp_student_ck.bin");
        params.save(&path).unwrap();
        let loaded = SaMlpParams::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(loaded.params_hash(), params.params_hash());
        assert!(loaded.has_latent());
        assert_eq!(loaded.struct_cols(), 6);
    }
}
