//! Command-line driver for the experiment lifecycle: generate graphs,
//! split, train the teacher, distill students, evaluate, benchmark
//! latency, and export gate-score histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use samlp::ckpt::Checkpoint;
use samlp::distill::{
    train_mlp_student, train_stage2, train_student_ind, train_student_trans, DistillConfig,
    EvalMode,
};
use samlp::error::{Error, Result};
use samlp::eval::bench::{
    bench_mlp, bench_student_explicit, bench_student_latent, bench_teacher, LatencyReport,
    DEFAULT_REPS, DEFAULT_WARMUP,
};
use samlp::eval::experiment::{run_experiment, ExperimentConfig};
use samlp::eval::metrics::{evaluate, AlphaHistogram, EvalReport};
use samlp::graph::{
    build_scenario, generate_synthetic, load_graph, make_split, Scenario, ScenarioPlan,
    SplitAssignment, SynthConfig,
};
use samlp::nn::tensor;
use samlp::rng::Rng;
use samlp::student::{MlpStudent, SaMlpConfig, SaMlpParams, StructureSource};
use samlp::teacher::{train_teacher, SageParams, TeacherConfig, TeacherOutput};

const USAGE: &str = "\
samlp <command> [--flag value ...]

commands:
  gen            --n N --d D --c C --avg-degree A --homophily H
                 --feature-signal S --seed SEED --out graph.txt
  split          --graph graph.txt --fractions 0.48,0.32,0.20 --seed SEED
                 --out split.txt
  train-teacher  --graph graph.txt --split split.txt --scenario trans
                 --hidden 64 --layers 2 --epochs 200 --lr 0.01
                 --out-ckpt teacher.ckpt --out-soft soft.bin
  train-student  --graph graph.txt --split split.txt --scenario trans
                 --teacher-soft soft.bin --student samlp-kd
                 --eta 0.2 --delta 0.5 --loss-weight 0.8 --seed SEED
                 --out-ckpt student.ckpt
  stage2         --graph graph.txt --split split.txt --teacher-soft soft.bin
                 --in-ckpt student.ckpt --out-ckpt student2.ckpt
  eval           --graph graph.txt --split split.txt --scenario trans
                 --ckpt model.ckpt [--isolated-ratio R] --report out.csv
  bench          --graph graph.txt --ckpts t.ckpt,s.ckpt --queries 10
                 --reps 30 --report out.csv
  alpha          --graph graph.txt --split split.txt --ckpt student.ckpt
                 --out alpha.csv
  experiment     --config exp.cfg --out-dir results/

exit codes: 0 ok, 2 config error, 3 leakage abort, 4 numeric failure";

struct Args {
    flags: BTreeMap<String, String>,
}

impl Args {
    fn parse(argv: &[String]) -> Result<Args> {
        let mut flags = BTreeMap::new();
        let mut i = 0;
        while i < argv.len() {
            let key = argv[i]
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --flag, found `{}`", argv[i])))?;
            let value = argv
                .get(i + 1)
                .ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?;
            flags.insert(key.to_string(), value.clone());
            i += 2;
        }
        Ok(Args { flags })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.flags
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("missing required flag --{key}")))
    }

    fn get_or(&self, key: &str, default: &str) -> String {
        self.flags.get(key).cloned().unwrap_or_else(|| default.to_string())
    }

    fn opt(&self, key: &str) -> Option<&str> {
        self.flags.get(key).map(String::as_str)
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| Error::Config(format!("bad value for --{key}: `{raw}`")))
    }

    fn req<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        self.parse_value(key, raw)
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.opt(key) {
            Some(raw) => self.parse_value(key, raw),
            None => Ok(default),
        }
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&argv) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(argv: &[String]) -> Result<()> {
    let Some(command) = argv.first() else {
        eprintln!("{USAGE}");
        return Err(Error::Config("no command given".into()));
    };
    let args = Args::parse(&argv[1..])?;
    match command.as_str() {
        "gen" => cmd_gen(&args),
        "split" => cmd_split(&args),
        "train-teacher" => cmd_train_teacher(&args),
        "train-student" => cmd_train_student(&args),
        "stage2" => cmd_stage2(&args),
        "eval" => cmd_eval(&args),
        "bench" => cmd_bench(&args),
        "alpha" => cmd_alpha(&args),
        "experiment" => cmd_experiment(&args),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => {
            eprintln!("{USAGE}");
            Err(Error::Config(format!("unknown command `{other}`")))
        }
    }
}

fn cmd_gen(args: &Args) -> Result<()> {
    let cfg = SynthConfig {
        n: args.req("n")?,
        feature_dim: args.req("d")?,
        n_classes: args.req("c")?,
        avg_degree: args.req("avg-degree")?,
        homophily: args.req("homophily")?,
        feature_signal: args.req("feature-signal")?,
        seed: args.num("seed", 0)?,
    };
    let out = PathBuf::from(args.get("out")?);
    let g = generate_synthetic(&cfg)?;
    g.save(&out)?;
    println!(
        "generated graph: n={} edges={} homophily={:.3} -> {}",
        g.n(),
        g.edge_count(),
        g.edge_homophily().unwrap_or(0.0),
        out.display()
    );
    Ok(())
}

fn cmd_split(args: &Args) -> Result<()> {
    let g = load_graph(Path::new(args.get("graph")?))?;
    let raw = args.get_or("fractions", "0.48,0.32,0.20");
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad --fractions `{raw}`")))?;
    if parts.len() != 3 {
        return Err(Error::Config("--fractions needs three comma-separated values".into()));
    }
    let split = make_split(&g, (parts[0], parts[1], parts[2]), args.num("seed", 0)?)?;
    let out = PathBuf::from(args.get("out")?);
    split.save(&out)?;
    println!(
        "split: train={} val={} test={} -> {}",
        split.count(samlp::graph::Role::Train),
        split.count(samlp::graph::Role::Val),
        split.count(samlp::graph::Role::Test),
        out.display()
    );
    Ok(())
}

fn load_plan(args: &Args, default_scenario: &str) -> Result<(ScenarioPlan, SplitAssignment)> {
    let g = load_graph(Path::new(args.get("graph")?))?;
    let split = SplitAssignment::load(Path::new(args.get("split")?), g.n())?;
    let scenario = Scenario::parse(&args.get_or("scenario", default_scenario))?;
    let isolated_ratio = args.num("isolated-ratio", 0.0)?;
    let seed = args.num("seed", 0)?;
    let plan = build_scenario(&g, &split, scenario, isolated_ratio, seed)?;
    Ok((plan, split))
}

fn cmd_train_teacher(args: &Args) -> Result<()> {
    let (plan, _split) = load_plan(args, "trans")?;
    let cfg = TeacherConfig {
        hidden: args.num("hidden", 64)?,
        layers: args.num("layers", 2)?,
        epochs: args.num("epochs", 200)?,
        lr: args.num("lr", 0.01)?,
        weight_decay: args.num("weight-decay", 5e-4)?,
        dropout: args.num("dropout", 0.0)?,
        residual: args.num("residual", true)?,
        temperature: args.num("temperature", 1.0)?,
        seed: args.num("seed", 0)?,
    };
    let (params, soft) = train_teacher(&plan, &cfg)?;
    params.save(Path::new(args.get("out-ckpt")?), cfg.temperature)?;
    soft.save(Path::new(args.get("out-soft")?), plan.scenario)?;
    let val = samlp::teacher::teacher_val_accuracy(&params, &plan)?;
    let test = samlp::teacher::teacher_test_accuracy(&params, &plan)?;
    println!("teacher trained: val_acc={val:.4} test_acc={test:.4}");
    Ok(())
}

fn distill_config_from(args: &Args) -> Result<DistillConfig> {
    Ok(DistillConfig {
        eta: args.num("eta", 0.2)?,
        delta: args.num("delta", 0.5)?,
        loss_weight: args.num("loss-weight", 0.8)?,
        epochs: args.num("epochs", 300)?,
        lr: args.num("lr", 0.01)?,
        weight_decay: args.num("weight-decay", 0.0)?,
        batch_size: args.num("batch-size", 256)?,
        seed: args.num("seed", 0)?,
        temperature: args.num("temperature", 1.0)?,
    })
}

fn write_metrics(path: &str, log: &[samlp::distill::EpochMetrics]) -> Result<()> {
    let mut out = String::from("epoch,ce_loss,kd_loss,kd_mix_loss,val_acc\n");
    for m in log {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            m.epoch, m.ce_loss, m.kd_loss, m.kd_mix_loss, m.val_acc
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_train_student(args: &Args) -> Result<()> {
    let (plan, split) = load_plan(args, "trans")?;
    let student_kind = args.get("student")?.to_string();
    let hidden = args.num("hidden", 64)?;
    let dropout = args.num("dropout", 0.2)?;
    let seed: u64 = args.num("seed", 0)?;
    let mut cfg = distill_config_from(args)?;
    let needs_teacher = matches!(student_kind.as_str(), "glnn-kd" | "samlp-kd");
    if !needs_teacher {
        cfg.loss_weight = 0.0;
    }
    let soft = if needs_teacher {
        Some(TeacherOutput::load(Path::new(args.get("teacher-soft")?))?)
    } else {
        None
    };
    let out_ckpt = PathBuf::from(args.get("out-ckpt")?);
    let is_trans = plan.scenario == Scenario::Trans;

    match student_kind.as_str() {
        "mlp" | "glnn-kd" => {
            let mut rng = Rng::new(seed ^ 0xa5a5);
            let student = MlpStudent::new(
                plan.train_graph.feature_dim(),
                hidden,
                plan.train_graph.n_classes(),
                dropout,
                &mut rng,
            );
            let outcome = train_mlp_student(student, soft.as_ref(), &plan, &split, &cfg)?;
            outcome.params.save(&out_ckpt)?;
            if let Some(path) = args.opt("out-metrics") {
                write_metrics(path, &outcome.log)?;
            }
            println!("{student_kind} trained: best_val_acc={:.4}", outcome.best_val_acc);
        }
        "samlp" | "samlp-kd" => {
            let mut rng = Rng::new(seed ^ 0x5a5a);
            let student = SaMlpParams::new(
                &SaMlpConfig {
                    feature_dim: plan.train_graph.feature_dim(),
                    struct_cols: plan.struct_cols,
                    hidden,
                    classes: plan.train_graph.n_classes(),
                    dropout,
                },
                &mut rng,
            );
            let outcome = if is_trans {
                train_student_trans(student, soft.as_ref(), &plan, &split, &cfg)?
            } else {
                train_student_ind(student, soft.as_ref(), &plan, &split, &cfg)?
            };
            outcome.params.save(&out_ckpt)?;
            if let Some(path) = args.opt("out-metrics") {
                write_metrics(path, &outcome.log)?;
            }
            println!("{student_kind} trained: best_val_acc={:.4}", outcome.best_val_acc);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown --student `{other}` (mlp, glnn-kd, samlp, samlp-kd)"
            )))
        }
    }
    Ok(())
}

fn cmd_stage2(args: &Args) -> Result<()> {
    let (plan, split) = load_plan(args, "ind-without-connection")?;
    if plan.scenario == Scenario::Trans {
        return Err(Error::Config("stage2 applies to inductive scenarios".into()));
    }
    let soft = TeacherOutput::load(Path::new(args.get("teacher-soft")?))?;
    let stage1 = SaMlpParams::from_checkpoint(&Checkpoint::load(Path::new(args.get("in-ckpt")?))?)?;
    let cfg = distill_config_from(args)?;
    let outcome = train_stage2(stage1, &soft, &plan, &split, &cfg)?;
    outcome.params.save(Path::new(args.get("out-ckpt")?))?;
    if let Some(path) = args.opt("out-metrics") {
        write_metrics(path, &outcome.log)?;
    }
    println!("stage2 trained: best_val_acc={:.4}", outcome.best_val_acc);
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<()> {
    let (plan, _split) = load_plan(args, "trans")?;
    let ck = Checkpoint::load(Path::new(args.get("ckpt")?))?;
    let test_labels = plan.eval_graph.labels_of(&plan.test_nodes);
    let classes = plan.eval_graph.n_classes();
    let seed = args.num("seed", 0)?;

    let (model, probs) = match ck.kind() {
        "sage" => {
            let params = SageParams::from_checkpoint(&ck)?;
            let probs = match plan.scenario {
                Scenario::Trans => {
                    let logits = params
                        .forward_value(plan.eval_graph.features(), plan.eval_graph.adjacency())?;
                    tensor::softmax_rows(&logits.gather_rows(&plan.test_nodes))
                }
                _ => params.infer_inductive(&plan.eval_graph, &plan.test_nodes)?,
            };
            ("sage".to_string(), probs)
        }
        "mlp" => {
            let params = MlpStudent::from_checkpoint(&ck)?;
            let x = plan.eval_graph.features().gather_rows(&plan.test_nodes);
            ("mlp".to_string(), params.forward_probs(&x)?)
        }
        "samlp" => {
            let params = SaMlpParams::from_checkpoint(&ck)?;
            if params.struct_cols() != plan.struct_cols {
                return Err(Error::Config(format!(
                    "checkpoint structure width {} does not match the plan's {}",
                    params.struct_cols(),
                    plan.struct_cols
                )));
            }
            let mode = if params.has_latent() && plan.scenario != Scenario::Trans {
                EvalMode::Routed
            } else {
                EvalMode::Explicit
            };
            let probs =
                samlp::distill::student_probs(&params, &plan, &plan.test_nodes, &plan.test_rows, mode)?;
            ("samlp".to_string(), probs)
        }
        other => return Err(Error::Config(format!("cannot evaluate checkpoint kind `{other}`"))),
    };
    let report = evaluate(&probs, &test_labels, classes, plan.scenario.as_str(), &model, seed)?;
    let mut text = String::from(EvalReport::csv_header());
    text.push('\n');
    text.push_str(&report.csv_row());
    text.push('\n');
    std::fs::write(args.get("report")?, text)?;
    println!("{} {}: test_acc={:.4} (n={})", model, plan.scenario.as_str(), report.accuracy, report.n_eval);
    Ok(())
}

fn cmd_bench(args: &Args) -> Result<()> {
    let g = load_graph(Path::new(args.get("graph")?))?;
    let queries: usize = args.num("queries", 10)?;
    let reps: usize = args.num("reps", DEFAULT_REPS)?;
    let warmup: usize = args.num("warmup", DEFAULT_WARMUP)?;
    let seed: u64 = args.num("seed", 0)?;
    let mut rng = Rng::new(seed);
    if queries == 0 || queries > g.n() {
        return Err(Error::Config(format!("--queries must be in [1, {}]", g.n())));
    }
    let mut pool: Vec<usize> = (0..g.n()).collect();
    rng.shuffle(&mut pool);
    let query_nodes: Vec<usize> = pool.into_iter().take(queries).collect();
    let x = g.features().gather_rows(&query_nodes);
    let rows = g.adjacency().gather_rows(&query_nodes);

    let mut reports: Vec<LatencyReport> = Vec::new();
    for path in args.get("ckpts")?.split(',') {
        let ck = Checkpoint::load(Path::new(path.trim()))?;
        match ck.kind() {
            "sage" => {
                let params = SageParams::from_checkpoint(&ck)?;
                reports.push(bench_teacher(&params, &g, &query_nodes, reps, warmup)?);
            }
            "mlp" => {
                let params = MlpStudent::from_checkpoint(&ck)?;
                reports.push(bench_mlp(&params, &x, reps, warmup)?);
            }
            "samlp" => {
                let params = SaMlpParams::from_checkpoint(&ck)?;
                if params.struct_cols() != g.n() {
                    return Err(Error::Config(format!(
                        "bench expects a full-vocabulary student (struct_cols {} vs n {})",
                        params.struct_cols(),
                        g.n()
                    )));
                }
                reports.push(bench_student_explicit(&params, "samlp", &x, &rows, reps, warmup)?);
                if params.has_latent() {
                    reports.push(bench_student_latent(&params, "samlp-latent", &x, reps, warmup)?);
                }
            }
            other => return Err(Error::Config(format!("cannot bench checkpoint kind `{other}`"))),
        }
    }
    let mut text = format!(
        "# protocol: warmup={warmup} reps={reps} clock=monotonic queries={queries} seed={seed}\n{}\n",
        LatencyReport::csv_header()
    );
    for r in &reports {
        text.push_str(&r.csv_row());
        text.push('\n');
        println!("{}", r.csv_row());
    }
    std::fs::write(args.get("report")?, text)?;
    Ok(())
}

fn cmd_alpha(args: &Args) -> Result<()> {
    let (plan, _split) = load_plan(args, "trans")?;
    let ck = Checkpoint::load(Path::new(args.get("ckpt")?))?;
    let params = SaMlpParams::from_checkpoint(&ck)?;
    if params.struct_cols() != plan.struct_cols {
        return Err(Error::Config(format!(
            "checkpoint structure width {} does not match the plan's {}",
            params.struct_cols(),
            plan.struct_cols
        )));
    }
    let x = plan.eval_graph.features().gather_rows(&plan.test_nodes);
    let (alphas, _) =
        params.forward_value(&x, StructureSource::ExplicitRows(&plan.test_rows))?;
    let hist = AlphaHistogram::from_alphas(&alphas, "samlp", plan.scenario.as_str());
    std::fs::write(args.get("out")?, hist.to_csv())?;
    println!("mean_alpha={:.4} over {} nodes", hist.mean, hist.n);
    Ok(())
}

fn cmd_experiment(args: &Args) -> Result<()> {
    let cfg = ExperimentConfig::parse_file(Path::new(args.get("config")?))?;
    let out_dir = PathBuf::from(args.get("out-dir")?);
    let run = run_experiment(&cfg, Some(&out_dir))?;
    for s in &run.summary {
        println!(
            "{} {}: mean_acc={:.4} std={:.4} ({} seeds)",
            cfg.scenario.as_str(),
            s.model,
            s.mean,
            s.std,
            s.n_seeds
        );
    }
    Ok(())
}
