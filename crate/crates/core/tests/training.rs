//! Cross-module training outcomes on synthetic graphs.

use samlp::distill::{
    train_stage2, train_student_ind, train_student_trans, DistillConfig, EvalMode,
};
use samlp::eval::metrics::accuracy_fraction;
use samlp::graph::{build_scenario, generate_synthetic, make_split, Scenario, SynthConfig};
use samlp::rng::Rng;
use samlp::student::{MlpStudent, SaMlpConfig, SaMlpParams};
use samlp::teacher::{teacher_test_accuracy, train_teacher, TeacherConfig};

fn fresh_student(plan: &samlp::graph::ScenarioPlan, hidden: usize, seed: u64) -> SaMlpParams {
    let mut rng = Rng::new(seed ^ 0x5a5a);
    SaMlpParams::new(
        &SaMlpConfig {
            feature_dim: plan.train_graph.feature_dim(),
            struct_cols: plan.struct_cols,
            hidden,
            classes: plan.train_graph.n_classes(),
            dropout: 0.2,
        },
        &mut rng,
    )
}

#[test]
fn teacher_beats_feature_baseline_on_homophilous_graph() {
    // Strong structure, moderate features: message passing must win by
    // at least five points over the feature-only MLP.
    let g = generate_synthetic(&SynthConfig {
        n: 600,
        feature_dim: 8,
        n_classes: 3,
        avg_degree: 8.0,
        homophily: 0.9,
        feature_signal: 0.5,
        seed: 17,
    })
    .unwrap();
    let split = make_split(&g, (0.48, 0.32, 0.20), 0).unwrap();
    let plan = build_scenario(&g, &split, Scenario::Trans, 0.0, 0).unwrap();
    let tcfg = TeacherConfig { epochs: 200, seed: 0, ..Default::default() };
    let (teacher, soft) = train_teacher(&plan, &tcfg).unwrap();
    let teacher_acc = teacher_test_accuracy(&teacher, &plan).unwrap();

    let mut rng = Rng::new(1);
    let mlp = MlpStudent::new(8, 64, 3, 0.2, &mut rng);
    let dcfg = DistillConfig { epochs: 150, loss_weight: 0.0, seed: 0, ..Default::default() };
    let outcome = samlp::distill::train_mlp_student(mlp, None, &plan, &split, &dcfg).unwrap();
    let x = plan.eval_graph.features().gather_rows(&plan.test_nodes);
    let mlp_acc = accuracy_fraction(
        &outcome.params.forward_probs(&x).unwrap(),
        &plan.eval_graph.labels_of(&plan.test_nodes),
    );
    assert!(
        teacher_acc >= mlp_acc + 0.05,
        "teacher {teacher_acc:.3} must beat mlp {mlp_acc:.3} by 5 points"
    );
    let _ = soft;
}

#[test]
fn teacher_degrades_without_test_connections() {
    let g = generate_synthetic(&SynthConfig {
        n: 400,
        feature_dim: 8,
        n_classes: 3,
        avg_degree: 8.0,
        homophily: 0.85,
        feature_signal: 0.5,
        seed: 19,
    })
    .unwrap();
    let split = make_split(&g, (0.48, 0.32, 0.20), 2).unwrap();
    let with_c = build_scenario(&g, &split, Scenario::IndWithConnection, 0.0, 2).unwrap();
    let without_c = build_scenario(&g, &split, Scenario::IndWithoutConnection, 0.0, 2).unwrap();
    let tcfg = TeacherConfig { epochs: 150, seed: 2, ..Default::default() };
    let (teacher, _) = train_teacher(&with_c, &tcfg).unwrap();
    let acc_with = teacher_test_accuracy(&teacher, &with_c).unwrap();
    let acc_without = teacher_test_accuracy(&teacher, &without_c).unwrap();
    assert!(
        acc_without <= acc_with,
        "isolated-node accuracy {acc_without:.3} must not exceed connected accuracy {acc_with:.3}"
    );
}

#[test]
fn distillation_does_not_hurt_the_structure_aware_student_on_heterophily() {
    // Paired runs over three seeds; the distilled mean must reach the
    // supervised mean up to one standard deviation.
    let g = generate_synthetic(&SynthConfig {
        n: 800,
        feature_dim: 8,
        n_classes: 4,
        avg_degree: 10.0,
        homophily: 0.2,
        feature_signal: 0.3,
        seed: 42,
    })
    .unwrap();
    let (mut sup_accs, mut kd_accs) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let split = make_split(&g, (0.48, 0.32, 0.20), seed).unwrap();
        let plan = build_scenario(&g, &split, Scenario::Trans, 0.0, seed).unwrap();
        let tcfg = TeacherConfig { epochs: 300, seed, ..Default::default() };
        let (_, soft) = train_teacher(&plan, &tcfg).unwrap();
        let labels = plan.eval_graph.labels_of(&plan.test_nodes);

        let dcfg_sup =
            DistillConfig { epochs: 200, loss_weight: 0.0, seed, ..Default::default() };
        let sup = train_student_trans(fresh_student(&plan, 64, seed), None, &plan, &split, &dcfg_sup)
            .unwrap();
        let p = samlp::distill::student_probs(
            &sup.params,
            &plan,
            &plan.test_nodes,
            &plan.test_rows,
            EvalMode::Explicit,
        )
        .unwrap();
        sup_accs.push(accuracy_fraction(&p, &labels));

        let dcfg_kd = DistillConfig { epochs: 200, seed, ..Default::default() };
        let kd = train_student_trans(
            fresh_student(&plan, 64, seed),
            Some(&soft),
            &plan,
            &split,
            &dcfg_kd,
        )
        .unwrap();
        let p = samlp::distill::student_probs(
            &kd.params,
            &plan,
            &plan.test_nodes,
            &plan.test_rows,
            EvalMode::Explicit,
        )
        .unwrap();
        kd_accs.push(accuracy_fraction(&p, &labels));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sup_mean = mean(&sup_accs);
    let kd_mean = mean(&kd_accs);
    let sup_std = (sup_accs.iter().map(|a| (a - sup_mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!(
        kd_mean >= sup_mean - sup_std,
        "distilled {kd_mean:.3} fell below supervised {sup_mean:.3} - std {sup_std:.3}"
    );
}

#[test]
fn stage_two_lifts_isolated_inference_on_homophilous_graph() {
    let g = generate_synthetic(&SynthConfig {
        n: 800,
        feature_dim: 8,
        n_classes: 4,
        avg_degree: 10.0,
        homophily: 0.8,
        feature_signal: 0.3,
        seed: 42,
    })
    .unwrap();
    let mut gains = Vec::new();
    for seed in 0..3u64 {
        let split = make_split(&g, (0.48, 0.32, 0.20), seed).unwrap();
        let plan = build_scenario(&g, &split, Scenario::IndWithConnection, 0.0, seed).unwrap();
        let tcfg = TeacherConfig { epochs: 300, seed, ..Default::default() };
        let (_, soft) = train_teacher(&plan, &tcfg).unwrap();
        let dcfg = DistillConfig { epochs: 200, seed, ..Default::default() };
        let s1 = train_student_ind(fresh_student(&plan, 64, seed), Some(&soft), &plan, &split, &dcfg)
            .unwrap();
        let s2 = train_stage2(s1.params, &soft, &plan, &split, &dcfg).unwrap();

        let wo = build_scenario(&g, &split, Scenario::IndWithoutConnection, 0.0, seed).unwrap();
        let labels = wo.eval_graph.labels_of(&wo.test_nodes);
        let acc = |mode: EvalMode| {
            let p = samlp::distill::student_probs(&s2.params, &wo, &wo.test_nodes, &wo.test_rows, mode)
                .unwrap();
            accuracy_fraction(&p, &labels)
        };
        gains.push(acc(EvalMode::Latent) - acc(EvalMode::Explicit));
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    assert!(
        mean_gain >= 0.0,
        "latent path should not fall below the no-structure baseline: gains {gains:?}"
    );
}
