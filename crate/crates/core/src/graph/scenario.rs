//! Scenario construction: which nodes and edges are visible during
//! training, and which structure rows are available at inference.
//!
//! The inductive plans extract the training subgraph over the labeled
//! nodes only; evaluation sees the labeled-to-unseen edges (with
//! connection), nothing (without connection), or a seeded mix.

use crate::error::{Error, Result};
use crate::graph::container::Graph;
use crate::graph::split::{Role, SplitAssignment};
use crate::nn::tensor::SparseRows;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    Trans,
    IndWithConnection,
    IndWithoutConnection,
    MixedInd,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Trans => "trans",
            Scenario::IndWithConnection => "ind-with-connection",
            Scenario::IndWithoutConnection => "ind-without-connection",
            Scenario::MixedInd => "mixed-ind",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        match s {
            "trans" => Ok(Scenario::Trans),
            "ind-with-connection" | "ind_w_c" | "ind-wc" => Ok(Scenario::IndWithConnection),
            "ind-without-connection" | "ind_wo_c" | "ind-woc" => {
                Ok(Scenario::IndWithoutConnection)
            }
            "mixed-ind" | "mixed_ind" => Ok(Scenario::MixedInd),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }

    pub fn is_inductive(&self) -> bool {
        !matches!(self, Scenario::Trans)
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioPlan {
    pub scenario: Scenario,
    pub isolated_ratio: f64,
    /// Graph visible during training: the full graph for trans, the
    /// compact labeled subgraph otherwise.
    pub train_graph: Graph,
    /// Global ids of train_graph rows, ascending; local id = position.
    pub visible: Vec<usize>,
    /// Local indices carrying the supervised CE loss.
    pub train_local: Vec<usize>,
    /// Local indices receiving distillation (all visible nodes).
    pub kd_local: Vec<usize>,
    /// Structure-row width: n for trans, |labeled| for inductive.
    pub struct_cols: usize,
    /// Global ids used for model selection / final evaluation.
    pub val_nodes: Vec<usize>,
    pub test_nodes: Vec<usize>,
    /// Full-size graph the teacher message-passes over at eval time.
    pub eval_graph: Graph,
    /// Structure rows over the struct_cols vocabulary, aligned with
    /// val_nodes / test_nodes.
    pub val_rows: SparseRows,
    pub test_rows: SparseRows,
}

impl ScenarioPlan {
    /// Global ids allowed to appear in training-tape inputs.
    pub fn allowed_training_nodes(&self) -> &[usize] {
        &self.visible
    }
}

pub fn build_scenario(
    g: &Graph,
    split: &SplitAssignment,
    scenario: Scenario,
    isolated_ratio: f64,
    seed: u64,
) -> Result<ScenarioPlan> {
    if split.len() != g.n() {
        return Err(Error::Config(format!(
            "split covers {} nodes but graph has {}",
            split.len(),
            g.n()
        )));
    }
    if !(0.0..=1.0).contains(&isolated_ratio) {
        return Err(Error::Config(format!("isolated_ratio {isolated_ratio} outside [0, 1]")));
    }
    let train_nodes = split.nodes_with(Role::Train);
    let val_nodes = split.nodes_with(Role::Val);
    let test_nodes = split.nodes_with(Role::Test);

    match scenario {
        Scenario::Trans => {
            let val_rows = g.adjacency().gather_rows(&val_nodes);
            let test_rows = g.adjacency().gather_rows(&test_nodes);
            Ok(ScenarioPlan {
                scenario,
                isolated_ratio: 0.0,
                train_graph: g.clone(),
                visible: (0..g.n()).collect(),
                train_local: train_nodes,
                kd_local: (0..g.n()).collect(),
                struct_cols: g.n(),
                val_nodes,
                test_nodes,
                eval_graph: g.clone(),
                val_rows,
                test_rows,
            })
        }
        Scenario::IndWithConnection | Scenario::IndWithoutConnection | Scenario::MixedInd => {
            let visible = train_nodes;
            let train_graph = g.induced_subgraph(&visible);
            let mut local = vec![usize::MAX; g.n()];
            for (l, &id) in visible.iter().enumerate() {
                local[id] = l;
            }
            let is_labeled = |i: usize| local[i] != usize::MAX;

            // Which unseen nodes keep their labeled-side edges.
            let isolated: Vec<bool> = match scenario {
                Scenario::IndWithConnection => vec![false; g.n()],
                Scenario::IndWithoutConnection => (0..g.n()).map(|i| !is_labeled(i)).collect(),
                Scenario::MixedInd => {
                    let mut rng = Rng::new(seed);
                    let mut order = test_nodes.clone();
                    rng.shuffle(&mut order);
                    let k = (isolated_ratio * test_nodes.len() as f64).round() as usize;
                    let mut flags = vec![false; g.n()];
                    for &node in order.iter().take(k) {
                        flags[node] = true;
                    }
                    flags
                }
                Scenario::Trans => unreachable!(),
            };

            let mut edges = Vec::new();
            for i in 0..g.n() {
                for &(j, _) in g.adjacency().row(i) {
                    if i >= j {
                        continue;
                    }
                    let keep = if is_labeled(i) && is_labeled(j) {
                        true
                    } else if is_labeled(i) || is_labeled(j) {
                        // Labeled-to-unseen edge: kept unless the unseen
                        // endpoint is isolated.
                        let unseen = if is_labeled(i) { j } else { i };
                        !isolated[unseen]
                    } else {
                        false
                    };
                    if keep {
                        edges.push((i, j));
                    }
                }
            }
            let eval_graph =
                Graph::new(g.features().clone(), &edges, g.labels().to_vec(), g.n_classes())?;

            let restrict = |nodes: &[usize]| -> SparseRows {
                let mut rows = SparseRows::new(nodes.len(), visible.len());
                for (k, &node) in nodes.iter().enumerate() {
                    let row: Vec<(usize, f64)> = eval_graph
                        .adjacency()
                        .row(node)
                        .iter()
                        .filter(|&&(j, _)| is_labeled(j))
                        .map(|&(j, w)| (local[j], w))
                        .collect();
                    rows.set_row(k, row);
                }
                rows
            };
            let val_rows = restrict(&val_nodes);
            let test_rows = restrict(&test_nodes);
            let n_local = train_graph.n();
            Ok(ScenarioPlan {
                scenario,
                isolated_ratio: if scenario == Scenario::MixedInd { isolated_ratio } else { 0.0 },
                train_graph,
                visible,
                train_local: (0..n_local).collect(),
                kd_local: (0..n_local).collect(),
                struct_cols: n_local,
                val_nodes,
                test_nodes,
                eval_graph,
                val_rows,
                test_rows,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::split::make_split;
    use crate::graph::synth::{generate_synthetic, SynthConfig};
    use crate::nn::tensor::Tensor;

    fn toy() -> (Graph, SplitAssignment) {
        let g = generate_synthetic(&SynthConfig {
            n: 60,
            feature_dim: 4,
            n_classes: 3,
            avg_degree: 6.0,
            homophily: 0.6,
            feature_signal: 0.5,
            seed: 2,
        })
        .unwrap();
        let split = make_split(&g, (0.48, 0.32, 0.20), 3).unwrap();
        (g, split)
    }

    #[test]
    fn trans_plan_sees_everything() {
        let (g, split) = toy();
        let plan = build_scenario(&g, &split, Scenario::Trans, 0.0, 0).unwrap();
        assert_eq!(plan.visible.len(), g.n());
        assert_eq!(plan.kd_local.len(), g.n());
        assert_eq!(plan.struct_cols, g.n());
        assert_eq!(plan.eval_graph.adjacency(), g.adjacency());
        // Eval rows are exactly the full adjacency rows.
        for (k, &node) in plan.test_nodes.iter().enumerate() {
            assert_eq!(plan.test_rows.row(k), g.adjacency().row(node));
        }
    }

    #[test]
    fn inductive_train_graph_contains_no_unseen_nodes() {
        let (g, split) = toy();
        let plan = build_scenario(&g, &split, Scenario::IndWithConnection, 0.0, 0).unwrap();
        for &v in &plan.val_nodes {
            assert!(!plan.visible.contains(&v));
        }
        for &t in &plan.test_nodes {
            assert!(!plan.visible.contains(&t));
        }
        assert_eq!(plan.train_graph.n(), plan.visible.len());
        assert_eq!(plan.struct_cols, plan.visible.len());
    }

    #[test]
    fn ind_eval_graph_never_links_unseen_to_unseen() {
        let (g, split) = toy();
        let plan = build_scenario(&g, &split, Scenario::IndWithConnection, 0.0, 0).unwrap();
        let labeled: std::collections::HashSet<usize> = plan.visible.iter().copied().collect();
        let mut lu_edges = 0;
        for i in 0..g.n() {
            for &(j, _) in plan.eval_graph.adjacency().row(i) {
                assert!(
                    labeled.contains(&i) || labeled.contains(&j),
                    "unseen-unseen edge ({i}, {j}) leaked into the eval graph"
                );
                if labeled.contains(&i) != labeled.contains(&j) {
                    lu_edges += 1;
                }
            }
        }
        assert!(lu_edges > 0, "expected some labeled-to-unseen edges");
        // The labeled-labeled part equals the training subgraph.
        for (l, &id) in plan.visible.iter().enumerate() {
            let train_row = plan.train_graph.adjacency().row(l);
            let eval_row: Vec<usize> = plan
                .eval_graph
                .adjacency()
                .row(id)
                .iter()
                .filter(|&&(j, _)| labeled.contains(&j))
                .map(|&(j, _)| j)
                .collect();
            let train_row_global: Vec<usize> =
                train_row.iter().map(|&(j, _)| plan.visible[j]).collect();
            assert_eq!(train_row_global, eval_row);
        }
    }

    #[test]
    fn ind_with_connection_rows_index_labeled_columns_only() {
        let (g, split) = toy();
        let plan = build_scenario(&g, &split, Scenario::IndWithConnection, 0.0, 0).unwrap();
        for k in 0..plan.test_nodes.len() {
            for &(j, w) in plan.test_rows.row(k) {
                assert!(j < plan.struct_cols);
                assert_eq!(w, 1.0);
            }
        }
    }

    #[test]
    fn ind_without_connection_has_empty_eval_rows() {
        let (g, split) = toy();
        let plan = build_scenario(&g, &split, Scenario::IndWithoutConnection, 0.0, 0).unwrap();
        for k in 0..plan.test_nodes.len() {
            assert!(plan.test_rows.row_is_empty(k));
        }
        for k in 0..plan.val_nodes.len() {
            assert!(plan.val_rows.row_is_empty(k));
        }
    }

    #[test]
    fn mixed_ind_isolates_the_requested_fraction() {
        // Star-like graph: every test node connects to a train node, so
        // all test rows start nonempty.
        let n = 20;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut edges = Vec::new();
        for i in 1..n {
            edges.push((0, i));
            edges.push((1, i));
        }
        let g = Graph::new(Tensor::zeros(n, 2), &edges, labels, 2).unwrap();
        // Hand-build a split with 10 test nodes.
        let mut roles = vec![Role::Train; n];
        for role in roles.iter_mut().skip(6).take(4) {
            *role = Role::Val;
        }
        for role in roles.iter_mut().skip(10) {
            *role = Role::Test;
        }
        let split = SplitAssignment::new(roles);
        assert_eq!(split.count(Role::Test), 10);
        let plan = build_scenario(&g, &split, Scenario::MixedInd, 0.5, 11).unwrap();
        let empty = (0..10).filter(|&k| plan.test_rows.row_is_empty(k)).count();
        assert_eq!(empty, 5);
        // Deterministic under the seed.
        let again = build_scenario(&g, &split, Scenario::MixedInd, 0.5, 11).unwrap();
        for k in 0..10 {
            assert_eq!(plan.test_rows.row(k), again.test_rows.row(k));
        }
    }

    #[test]
    fn unknown_scenario_tag_rejected() {
        assert!(Scenario::parse("semi-sup").is_err());
        assert_eq!(Scenario::parse("trans").unwrap(), Scenario::Trans);
    }
}
