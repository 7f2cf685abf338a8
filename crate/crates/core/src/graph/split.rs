//! Stratified train/val/test node splits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::container::Graph;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "train" => Some(Role::Train),
            "val" => Some(Role::Val),
            "test" => Some(Role::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    roles: Vec<Role>,
}

impl SplitAssignment {
    pub fn new(roles: Vec<Role>) -> Self {
        SplitAssignment { roles }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn role(&self, node: usize) -> Role {
        self.roles[node]
    }

    /// Node indices with the given role, ascending.
    pub fn nodes_with(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|&(_, &r)| r == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for (i, r) in self.roles.iter().enumerate() {
            writeln!(out, "{i} {}", r.as_str())?;
        }
        Ok(())
    }

    pub fn load(path: &Path, n: usize) -> Result<SplitAssignment> {
        let reader = BufReader::new(File::open(path)?);
        let mut roles = vec![None; n];
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let parse_fail = |msg: &str| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: msg.into(),
            };
            let idx: usize = fields
                .next()
                .ok_or_else(|| parse_fail("missing node index"))?
                .parse()
                .map_err(|_| parse_fail("bad node index"))?;
            let role = fields
                .next()
                .and_then(Role::parse)
                .ok_or_else(|| parse_fail("role must be train, val, or test"))?;
            if idx >= n {
                return Err(parse_fail(&format!("node {idx} out of range ({n} nodes)")));
            }
            roles[idx] = Some(role);
        }
        let roles: Option<Vec<Role>> = roles.into_iter().collect();
        roles
            .map(SplitAssignment::new)
            .ok_or_else(|| Error::Config(format!("split file does not cover all {n} nodes")))
    }
}

/// Stratified split: within every class, nodes are shuffled and cut at
/// the requested fractions. Deterministic under `seed`.
pub fn make_split(g: &Graph, fractions: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    let (ft, fv, fe) = fractions;
    if ((ft + fv + fe) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("fractions {ft}+{fv}+{fe} must sum to 1")));
    }
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
        return Err(Error::Config("all of train/val/test must receive a positive fraction".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); g.n_classes()];
    for (i, &l) in g.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = Rng::new(seed);
    let mut roles = vec![Role::Test; g.n()];
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Config(format!(
                "class {class} has {} nodes; stratification needs at least 3",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let m = members.len();
        let n_train = ((ft * m as f64).round() as usize).clamp(1, m - 2);
        let n_val = ((fv * m as f64).round() as usize).clamp(1, m - n_train - 1);
        for (k, &node) in members.iter().enumerate() {
            roles[node] = if k < n_train {
                Role::Train
            } else if k < n_train + n_val {
                Role::Val
            } else {
                Role::Test
            };
        }
    }
    Ok(SplitAssignment::new(roles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn balanced_graph(n: usize, c: usize) -> Graph {
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        Graph::new(Tensor::zeros(n, 2), &[(0, 1)], labels, c).unwrap()
    }

    #[test]
    fn paper_fractions_give_exact_counts() {
        let g = balanced_graph(100, 2);
        let split = make_split(&g, (0.48, 0.32, 0.20), 7).unwrap();
        assert_eq!(split.count(Role::Train), 48);
        assert_eq!(split.count(Role::Val), 32);
        assert_eq!(split.count(Role::Test), 20);
        // Per class: 24/16/10.
        for class in 0..2 {
            let in_class = |role| {
                split
                    .nodes_with(role)
                    .iter()
                    .filter(|&&i| g.labels()[i] == class)
                    .count()
            };
            assert_eq!(in_class(Role::Train), 24);
            assert_eq!(in_class(Role::Val), 16);
            assert_eq!(in_class(Role::Test), 10);
        }
    }

    #[test]
    fn same_seed_same_assignment() {
        let g = balanced_graph(97, 3);
        let a = make_split(&g, (0.48, 0.32, 0.20), 123).unwrap();
        let b = make_split(&g, (0.48, 0.32, 0.20), 123).unwrap();
        assert_eq!(a, b);
        let c = make_split(&g, (0.48, 0.32, 0.20), 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_fractions_rejected() {
        let g = balanced_graph(30, 2);
        assert!(make_split(&g, (1.0, 0.0, 0.0), 1).is_err());
        assert!(make_split(&g, (0.5, 0.4, 0.2), 1).is_err());
    }

    #[test]
    fn tiny_class_rejected() {
        let labels = vec![0, 0, 0, 0, 1, 1];
        let g = Graph::new(Tensor::zeros(6, 1), &[], labels, 2).unwrap();
        assert!(make_split(&g, (0.48, 0.32, 0.2), 1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let g = balanced_graph(40, 2);
        let split = make_split(&g, (0.48, 0.32, 0.20), 9).unwrap();
        let path = std::env::temp_dir().join("samlp_split.txt");
        split.save(&path).unwrap();
        let loaded = SplitAssignment::load(&path, 40).unwrap();
        assert_eq!(split, loaded);
    }
}
