//! Experiment driver: seeds x models over one graph and scenario.
//!
//! A config file is line-oriented `key = value` text (# comments). Each
//! seed builds a split and scenario plan, trains the teacher once if any
//! model distills, trains every requested student, and evaluates on the
//! test nodes. Reports aggregate as mean and sample std across seeds.
//! With the same config, the written report files are byte-identical
//! across runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::distill::{
    train_mlp_student, train_stage2, train_student_ind, train_student_trans, DistillConfig,
    EvalMode, TrainOutcome,
};
use crate::error::{Error, Result};
use crate::eval::metrics::{evaluate, mean_std, AlphaHistogram, EvalReport};
use crate::graph::{
    build_scenario, generate_synthetic, load_graph, make_split, Graph, Scenario, ScenarioPlan,
    SplitAssignment, SynthConfig,
};
use crate::nn::tensor;
use crate::rng::Rng;
use crate::student::{MlpStudent, SaMlpConfig, SaMlpParams, StructureSource};
use crate::teacher::{train_teacher, TeacherConfig, TeacherOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// The teacher itself, as a baseline row.
    Sage,
    /// Feature-only MLP, supervised.
    Mlp,
    /// Feature-only MLP with logit distillation.
    GlnnKd,
    /// Structure-aware student, supervised.
    SaMlp,
    /// Structure-aware student with structure-mixing distillation.
    SaMlpKd,
    /// Two-stage distillation (adds the latent structure encoder).
    SaMlpKd2,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Sage => "sage",
            ModelKind::Mlp => "mlp",
            ModelKind::GlnnKd => "glnn-kd",
            ModelKind::SaMlp => "samlp",
            ModelKind::SaMlpKd => "samlp-kd",
            ModelKind::SaMlpKd2 => "samlp-kd2",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "sage" => Ok(ModelKind::Sage),
            "mlp" => Ok(ModelKind::Mlp),
            "glnn-kd" => Ok(ModelKind::GlnnKd),
            "samlp" => Ok(ModelKind::SaMlp),
            "samlp-kd" => Ok(ModelKind::SaMlpKd),
            "samlp-kd2" => Ok(ModelKind::SaMlpKd2),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }

    fn needs_teacher(&self) -> bool {
        matches!(self, ModelKind::Sage | ModelKind::GlnnKd | ModelKind::SaMlpKd | ModelKind::SaMlpKd2)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub graph_path: Option<String>,
    pub synth: SynthConfig,
    pub fractions: (f64, f64, f64),
    pub scenario: Scenario,
    pub isolated_ratio: f64,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
    pub teacher: TeacherConfig,
    pub student_hidden: usize,
    pub student_dropout: f64,
    pub distill: DistillConfig,
    pub export_alpha: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            graph_path: None,
            synth: SynthConfig {
                n: 800,
                feature_dim: 16,
                n_classes: 4,
                avg_degree: 10.0,
                homophily: 0.8,
                feature_signal: 0.3,
                seed: 42,
            },
            fractions: (0.48, 0.32, 0.20),
            scenario: Scenario::Trans,
            isolated_ratio: 0.0,
            seeds: vec![0],
            models: vec![ModelKind::SaMlpKd],
            teacher: TeacherConfig::default(),
            student_hidden: 64,
            student_dropout: 0.2,
            distill: DistillConfig::default(),
            export_alpha: false,
        }
    }
}

impl ExperimentConfig {
    pub fn parse_file(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("config line {}: bad {what}", lineno + 1));
            match key {
                "graph" => {
                    cfg.graph_path = if value == "synth" { None } else { Some(value.into()) }
                }
                "n" => cfg.synth.n = value.parse().map_err(|_| bad("n"))?,
                "d" => cfg.synth.feature_dim = value.parse().map_err(|_| bad("d"))?,
                "c" => cfg.synth.n_classes = value.parse().map_err(|_| bad("c"))?,
                "avg_degree" => cfg.synth.avg_degree = value.parse().map_err(|_| bad("avg_degree"))?,
                "homophily" => cfg.synth.homophily = value.parse().map_err(|_| bad("homophily"))?,
                "feature_signal" => {
                    cfg.synth.feature_signal = value.parse().map_err(|_| bad("feature_signal"))?
                }
                "graph_seed" => cfg.synth.seed = value.parse().map_err(|_| bad("graph_seed"))?,
                "fractions" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("fractions"))?;
                    if parts.len() != 3 {
                        return Err(bad("fractions (need three values)"));
                    }
                    cfg.fractions = (parts[0], parts[1], parts[2]);
                }
                "scenario" => cfg.scenario = Scenario::parse(value)?,
                "isolated_ratio" => {
                    cfg.isolated_ratio = value.parse().map_err(|_| bad("isolated_ratio"))?
                }
                "seeds" => {
                    cfg.seeds = value
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("seeds"))?;
                }
                "models" => {
                    cfg.models = value
                        .split(',')
                        .map(|p| ModelKind::parse(p.trim()))
                        .collect::<Result<_>>()?;
                }
                "teacher_hidden" => cfg.teacher.hidden = value.parse().map_err(|_| bad(key))?,
                "teacher_layers" => cfg.teacher.layers = value.parse().map_err(|_| bad(key))?,
                "teacher_epochs" => cfg.teacher.epochs = value.parse().map_err(|_| bad(key))?,
                "teacher_lr" => cfg.teacher.lr = value.parse().map_err(|_| bad(key))?,
                "teacher_weight_decay" => {
                    cfg.teacher.weight_decay = value.parse().map_err(|_| bad(key))?
                }
                "teacher_dropout" => cfg.teacher.dropout = value.parse().map_err(|_| bad(key))?,
                "teacher_residual" => {
                    cfg.teacher.residual = value.parse().map_err(|_| bad(key))?
                }
                "temperature" => {
                    cfg.teacher.temperature = value.parse().map_err(|_| bad(key))?;
                    cfg.distill.temperature = cfg.teacher.temperature;
                }
                "hidden" => cfg.student_hidden = value.parse().map_err(|_| bad(key))?,
                "student_dropout" => cfg.student_dropout = value.parse().map_err(|_| bad(key))?,
                "epochs" => cfg.distill.epochs = value.parse().map_err(|_| bad(key))?,
                "lr" => cfg.distill.lr = value.parse().map_err(|_| bad(key))?,
                "weight_decay" => cfg.distill.weight_decay = value.parse().map_err(|_| bad(key))?,
                "batch_size" => cfg.distill.batch_size = value.parse().map_err(|_| bad(key))?,
                "eta" => cfg.distill.eta = value.parse().map_err(|_| bad(key))?,
                "delta" => cfg.distill.delta = value.parse().map_err(|_| bad(key))?,
                "loss_weight" => cfg.distill.loss_weight = value.parse().map_err(|_| bad(key))?,
                "export_alpha" => cfg.export_alpha = value.parse().map_err(|_| bad(key))?,
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        if cfg.seeds.is_empty() || cfg.models.is_empty() {
            return Err(Error::Config("need at least one seed and one model".into()));
        }
        if cfg.scenario == Scenario::Trans && cfg.models.contains(&ModelKind::SaMlpKd2) {
            return Err(Error::Config("samlp-kd2 applies to inductive scenarios only".into()));
        }
        Ok(cfg)
    }

    pub fn load_or_generate_graph(&self) -> Result<Graph> {
        match &self.graph_path {
            Some(path) => load_graph(Path::new(path)),
            None => generate_synthetic(&self.synth),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelSummary {
    pub model: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub reports: Vec<EvalReport>,
    pub summary: Vec<ModelSummary>,
    /// (model, seed, mean alpha) when alpha export is enabled.
    pub alpha_means: Vec<(String, u64, f64)>,
}

struct SeedContext<'a> {
    cfg: &'a ExperimentConfig,
    plan: ScenarioPlan,
    split: SplitAssignment,
    teacher_soft: Option<TeacherOutput>,
    teacher_params: Option<crate::teacher::SageParams>,
    seed: u64,
}

/// Predictions of a trained structure-aware student on the test nodes.
fn samlp_test_probs(
    params: &SaMlpParams,
    plan: &ScenarioPlan,
    mode: EvalMode,
) -> Result<tensor::Tensor> {
    crate::distill::student_probs(params, plan, &plan.test_nodes, &plan.test_rows, mode)
}

fn fresh_student(cfg: &ExperimentConfig, plan: &ScenarioPlan, seed: u64) -> SaMlpParams {
    let mut rng = Rng::new(seed ^ 0x5a5a);
    SaMlpParams::new(
        &SaMlpConfig {
            feature_dim: plan.train_graph.feature_dim(),
            struct_cols: plan.struct_cols,
            hidden: cfg.student_hidden,
            classes: plan.train_graph.n_classes(),
            dropout: cfg.student_dropout,
        },
        &mut rng,
    )
}

fn fresh_mlp(cfg: &ExperimentConfig, plan: &ScenarioPlan, seed: u64) -> MlpStudent {
    let mut rng = Rng::new(seed ^ 0xa5a5);
    MlpStudent::new(
        plan.train_graph.feature_dim(),
        cfg.student_hidden,
        plan.train_graph.n_classes(),
        cfg.student_dropout,
        &mut rng,
    )
}

fn write_metrics_log(
    dir: &Path,
    model: &str,
    seed: u64,
    log: &[crate::distill::EpochMetrics],
) -> Result<()> {
    let mut out = String::from("epoch,ce_loss,kd_loss,kd_mix_loss,val_acc\n");
    for m in log {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            m.epoch, m.ce_loss, m.kd_loss, m.kd_mix_loss, m.val_acc
        );
    }
    fs::write(dir.join(format!("metrics_{model}_{seed}.csv")), out)?;
    Ok(())
}

fn run_model(
    ctx: &SeedContext<'_>,
    model: ModelKind,
    out_dir: Option<&Path>,
    run: &mut ExperimentRun,
) -> Result<()> {
    let cfg = ctx.cfg;
    let plan = &ctx.plan;
    let seed = ctx.seed;
    let scenario_tag = plan.scenario.as_str();
    let test_labels = plan.eval_graph.labels_of(&plan.test_nodes);
    let classes = plan.eval_graph.n_classes();
    let is_trans = plan.scenario == Scenario::Trans;
    let dcfg = DistillConfig { seed, ..cfg.distill };

    let push_report = |probs: &tensor::Tensor, run: &mut ExperimentRun| -> Result<()> {
        let report = evaluate(probs, &test_labels, classes, scenario_tag, model.as_str(), seed)?;
        run.reports.push(report);
        Ok(())
    };

    match model {
        ModelKind::Sage => {
            let params = ctx.teacher_params.as_ref().expect("teacher trained");
            let probs = match plan.scenario {
                Scenario::Trans => {
                    let logits = params
                        .forward_value(plan.eval_graph.features(), plan.eval_graph.adjacency())?;
                    tensor::softmax_rows(&logits.gather_rows(&plan.test_nodes))
                }
                _ => params.infer_inductive(&plan.eval_graph, &plan.test_nodes)?,
            };
            push_report(&probs, run)?;
        }
        ModelKind::Mlp | ModelKind::GlnnKd => {
            let supervised = model == ModelKind::Mlp;
            let dcfg = DistillConfig {
                loss_weight: if supervised { 0.0 } else { cfg.distill.loss_weight },
                ..dcfg
            };
            let teacher = if supervised { None } else { ctx.teacher_soft.as_ref() };
            let outcome = train_mlp_student(fresh_mlp(cfg, plan, seed), teacher, plan, &ctx.split, &dcfg)?;
            let x = plan.eval_graph.features().gather_rows(&plan.test_nodes);
            let probs = outcome.params.forward_probs(&x)?;
            push_report(&probs, run)?;
            if let Some(dir) = out_dir {
                write_metrics_log(dir, model.as_str(), seed, &outcome.log)?;
            }
        }
        ModelKind::SaMlp | ModelKind::SaMlpKd => {
            let supervised = model == ModelKind::SaMlp;
            let dcfg = DistillConfig {
                loss_weight: if supervised { 0.0 } else { cfg.distill.loss_weight },
                ..dcfg
            };
            let teacher = if supervised { None } else { ctx.teacher_soft.as_ref() };
            let student = fresh_student(cfg, plan, seed);
            let outcome: TrainOutcome<SaMlpParams> = if is_trans {
                train_student_trans(student, teacher, plan, &ctx.split, &dcfg)?
            } else {
                train_student_ind(student, teacher, plan, &ctx.split, &dcfg)?
            };
            let probs = samlp_test_probs(&outcome.params, plan, EvalMode::Explicit)?;
            push_report(&probs, run)?;
            if cfg.export_alpha {
                let x = plan.eval_graph.features().gather_rows(&plan.test_nodes);
                let (alphas, _) = outcome
                    .params
                    .forward_value(&x, StructureSource::ExplicitRows(&plan.test_rows))?;
                let hist = AlphaHistogram::from_alphas(&alphas, model.as_str(), scenario_tag);
                run.alpha_means.push((model.as_str().into(), seed, hist.mean));
                if let Some(dir) = out_dir {
                    fs::write(dir.join(format!("alpha_{}_{seed}.csv", model.as_str())), hist.to_csv())?;
                }
            }
            if let Some(dir) = out_dir {
                write_metrics_log(dir, model.as_str(), seed, &outcome.log)?;
            }
        }
        ModelKind::SaMlpKd2 => {
            let teacher = ctx
                .teacher_soft
                .as_ref()
                .ok_or_else(|| Error::Config("samlp-kd2 requires a teacher".into()))?;
            let student = fresh_student(cfg, plan, seed);
            let stage1 = train_student_ind(student, Some(teacher), plan, &ctx.split, &dcfg)?;
            let stage2 = train_stage2(stage1.params, teacher, plan, &ctx.split, &dcfg)?;
            let probs = samlp_test_probs(&stage2.params, plan, EvalMode::Routed)?;
            push_report(&probs, run)?;
            if let Some(dir) = out_dir {
                write_metrics_log(dir, model.as_str(), seed, &stage2.log)?;
            }
        }
    }
    Ok(())
}

/// Runs the full roster over all seeds and writes `report.csv`,
/// `summary.csv`, and per-run metric logs under `out_dir` if given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentRun> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let g = cfg.load_or_generate_graph()?;
    let mut run = ExperimentRun { reports: Vec::new(), summary: Vec::new(), alpha_means: Vec::new() };

    for &seed in &cfg.seeds {
        let split = make_split(&g, cfg.fractions, seed)?;
        let plan = build_scenario(&g, &split, cfg.scenario, cfg.isolated_ratio, seed)?;
        let needs_teacher = cfg.models.iter().any(ModelKind::needs_teacher);
        let (teacher_params, teacher_soft) = if needs_teacher {
            let tcfg = TeacherConfig { seed, ..cfg.teacher };
            let (params, soft) = train_teacher(&plan, &tcfg)?;
            (Some(params), Some(soft))
        } else {
            (None, None)
        };
        let ctx = SeedContext { cfg, plan, split, teacher_soft, teacher_params, seed };
        for &model in &cfg.models {
            run_model(&ctx, model, out_dir, &mut run)?;
        }
    }

    for &model in &cfg.models {
        let accs: Vec<f64> = run
            .reports
            .iter()
            .filter(|r| r.model == model.as_str())
            .map(|r| r.accuracy)
            .collect();
        if !accs.is_empty() {
            let (mean, std) = mean_std(&accs);
            run.summary.push(ModelSummary {
                model: model.as_str().into(),
                mean,
                std,
                n_seeds: accs.len(),
            });
        }
    }

    if let Some(dir) = out_dir {
        let mut report = String::from(EvalReport::csv_header());
        report.push('\n');
        for r in &run.reports {
            report.push_str(&r.csv_row());
            report.push('\n');
        }
        fs::write(dir.join("report.csv"), report)?;

        let mut summary = String::from("scenario,model,mean_accuracy,std_accuracy,n_seeds\n");
        for s in &run.summary {
            let _ = writeln!(
                summary,
                "{},{},{:.6},{:.6},{}",
                cfg.scenario.as_str(),
                s.model,
                s.mean,
                s.std,
                s.n_seeds
            );
        }
        fs::write(dir.join("summary.csv"), summary)?;
    }
    Ok(run)
}

/// Mean accuracy of a model in a finished run.
pub fn summary_mean(run: &ExperimentRun, model: ModelKind) -> Option<(f64, f64)> {
    run.summary
        .iter()
        .find(|s| s.model == model.as_str())
        .map(|s| (s.mean, s.std))
}
