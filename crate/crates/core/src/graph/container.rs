//! Graph container and text-file I/O.
//!
//! File format, one record per line:
//!   line 1:        `N d c`
//!   next N lines:  `label f_1 ... f_d`
//!   rest:          `u v` edge records (0-based)
//!
//! Input edges are symmetrized; self-loops and duplicates are dropped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::{SparseRows, Tensor};

#[derive(Clone, Debug)]
pub struct Graph {
    features: Tensor,       // N x d
    adjacency: SparseRows,  // N x N, binary, symmetric, empty diagonal
    labels: Vec<usize>,
    n_classes: usize,
    degrees: Vec<usize>,
}

impl Graph {
    /// Builds a graph from an edge list, symmetrizing and dropping
    /// self-loops and duplicate edges.
    pub fn new(
        features: Tensor,
        edges: &[(usize, usize)],
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Config(format!(
                "label count {} does not match node count {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Config(format!("label {bad} out of range ({n_classes} classes)")));
        }
        let mut adjacency = SparseRows::new(n, n);
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Config(format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
            if u == v {
                continue;
            }
            adjacency.insert(u, v, 1.0);
            adjacency.insert(v, u, 1.0);
        }
        Ok(Self::assemble(features, adjacency, labels, n_classes))
    }

    /// Wraps parts that are already symmetric and self-loop-free.
    pub(crate) fn assemble(
        features: Tensor,
        adjacency: SparseRows,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Self {
        let degrees = (0..adjacency.n_rows()).map(|i| adjacency.row(i).len()).collect();
        Graph { features, adjacency, labels, n_classes, degrees }
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn adjacency(&self) -> &SparseRows {
        &self.adjacency
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn degree(&self, i: usize) -> usize {
        self.degrees[i]
    }

    /// Undirected edge count.
    pub fn edge_count(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Labels of the given nodes.
    pub fn labels_of(&self, nodes: &[usize]) -> Vec<usize> {
        nodes.iter().map(|&i| self.labels[i]).collect()
    }

    /// Fraction of undirected edges whose endpoints share a label.
    pub fn edge_homophily(&self) -> Result<f64> {
        let mut same = 0usize;
        let mut total = 0usize;
        for i in 0..self.n() {
            for &(j, _) in self.adjacency.row(i) {
                if i < j {
                    total += 1;
                    if self.labels[i] == self.labels[j] {
                        same += 1;
                    }
                }
            }
        }
        if total == 0 {
            return Err(Error::Config("edge_homophily: graph has no edges".into()));
        }
        Ok(same as f64 / total as f64)
    }

    /// Compact induced subgraph over `nodes` (which must be sorted and
    /// unique); local index = position in `nodes`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Graph {
        debug_assert!(nodes.windows(2).all(|w| w[0] < w[1]));
        let mut local = vec![usize::MAX; self.n()];
        for (l, &g) in nodes.iter().enumerate() {
            local[g] = l;
        }
        let features = self.features.gather_rows(nodes);
        let labels = self.labels_of(nodes);
        let mut adjacency = SparseRows::new(nodes.len(), nodes.len());
        for (l, &g) in nodes.iter().enumerate() {
            let row: Vec<(usize, f64)> = self
                .adjacency
                .row(g)
                .iter()
                .filter(|&&(j, _)| local[j] != usize::MAX)
                .map(|&(j, w)| (local[j], w))
                .collect();
            adjacency.set_row(l, row);
        }
        Graph::assemble(features, adjacency, labels, self.n_classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{} {} {}", self.n(), self.feature_dim(), self.n_classes)?;
        for i in 0..self.n() {
            let feats: Vec<String> =
                self.features.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{} {}", self.labels[i], feats.join(" "))?;
        }
        for i in 0..self.n() {
            for &(j, _) in self.adjacency.row(i) {
                if i < j {
                    writeln!(out, "{i} {j}")?;
                }
            }
        }
        Ok(())
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(parse_err(path, 1, "expected `N d c` header"));
    }
    let n: usize = head[0].parse().map_err(|_| parse_err(path, 1, "bad node count"))?;
    let d: usize = head[1].parse().map_err(|_| parse_err(path, 1, "bad feature dim"))?;
    let c: usize = head[2].parse().map_err(|_| parse_err(path, 1, "bad class count"))?;

    let mut features = Tensor::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (lineno, record) = lines
            .next()
            .ok_or_else(|| parse_err(path, i + 2, format!("missing node record {i}")))?;
        let record = record?;
        let fields: Vec<&str> = record.split_whitespace().collect();
        if fields.len() != d + 1 {
            return Err(parse_err(
                path,
                lineno + 1,
                format!("expected label plus {d} features, found {} fields", fields.len()),
            ));
        }
        let label: usize =
            fields[0].parse().map_err(|_| parse_err(path, lineno + 1, "bad label"))?;
        if label >= c {
            return Err(parse_err(path, lineno + 1, format!("label {label} >= {c} classes")));
        }
        labels.push(label);
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| parse_err(path, lineno + 1, "bad feature value"))?;
            features.set(i, j, v);
        }
    }

    let mut edges = Vec::new();
    for (lineno, record) in lines {
        let record = record?;
        if record.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = record.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(path, lineno + 1, "expected `u v` edge record"));
        }
        let u: usize = fields[0].parse().map_err(|_| parse_err(path, lineno + 1, "bad u"))?;
        let v: usize = fields[1].parse().map_err(|_| parse_err(path, lineno + 1, "bad v"))?;
        if u >= n || v >= n {
            return Err(parse_err(path, lineno + 1, format!("edge ({u}, {v}) out of range")));
        }
        edges.push((u, v));
    }
    Graph::new(features, &edges, labels, c)
}
