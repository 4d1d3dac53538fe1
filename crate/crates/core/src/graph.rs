//! Skeleton graphs and the spectral operators built from them.
//!
//! All matrices here are small (a skeleton has at most a few dozen joints),
//! so everything is dense and row-major.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that an operator is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A kinematic graph: joints are nodes, bones are undirected edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    name: String,
    joint_count: usize,
    edges: Vec<(usize, usize)>,
    root_index: usize,
}

const HUMAN16_EDGES: [(usize, usize); 15] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (8, 9),
    (8, 10),
    (10, 11),
    (11, 12),
    (8, 13),
    (13, 14),
    (14, 15),
];

impl SkeletonGraph {
    /// Validates and builds a graph. Edges are stored as given, with each
    /// pair normalized so the smaller index comes first.
    pub fn new(
        name: impl Into<String>,
        joint_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        root_index: usize,
    ) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::InvalidGraph("joint count must be positive".into()));
        }
        if root_index >= joint_count {
            return Err(Error::InvalidGraph(format!(
                "root index {root_index} out of range for {joint_count} joints"
            )));
        }
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::new();
        for (a, b) in edges {
            if a >= joint_count || b >= joint_count {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) has an endpoint outside [0, {joint_count})"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at joint {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({a}, {b})")));
            }
            normalized.push(e);
        }
        Ok(Self {
            name: name.into(),
            joint_count,
            edges: normalized,
            root_index,
        })
    }

    /// Human3.6M-style 16-joint body: pelvis root, two legs, spine to head,
    /// two arms hanging off the thorax.
    ///
    /// Joint order: 0 hip, 1 r-hip, 2 r-knee, 3 r-foot, 4 l-hip, 5 l-knee,
    /// 6 l-foot, 7 spine, 8 thorax, 9 head, 10 l-shoulder, 11 l-elbow,
    /// 12 l-wrist, 13 r-shoulder, 14 r-elbow, 15 r-wrist.
    pub fn human16() -> Self {
        Self::new("human16", 16, HUMAN16_EDGES, 0).expect("preset is valid")
    }

    /// 21-joint hand: wrist root followed by thumb, index, middle, ring and
    /// pinky chains of four joints each.
    pub fn hand21() -> Self {
        let mut edges = Vec::with_capacity(20);
        for finger in 0..5 {
            let base = 1 + 4 * finger;
            edges.push((0, base));
            for k in 0..3 {
                edges.push((base + k, base + k + 1));
            }
        }
        Self::new("hand21", 21, edges, 0).expect("preset is valid")
    }

    /// A path 0 - 1 - ... - (n-1), rooted at 0.
    pub fn path(n: usize) -> Result<Self> {
        Self::new(format!("path{n}"), n, (1..n).map(|i| (i - 1, i)), 0)
    }

    /// Looks up a built-in preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "human16" => Some(Self::human16()),
            "hand21" => Some(Self::hand21()),
            _ => None,
        }
    }

    /// Parses the text format: a first line `j root_index`, then one
    /// `i k` pair per line. Blank lines and `#` comments are skipped.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let bad = |line: usize, msg: String| Error::Parse {
            path: name.into(),
            line,
            msg,
        };
        let (hline, header) = lines
            .next()
            .ok_or_else(|| bad(1, "missing header line `j root_index`".into()))?;
        let head = parse_pair(header).map_err(|m| bad(hline, m))?;
        let mut edges = Vec::new();
        for (ln, l) in lines {
            edges.push(parse_pair(l).map_err(|m| bad(ln, m))?);
        }
        let stem = Path::new(name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(name);
        Self::new(stem, head.0, edges, head.1)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&path.display().to_string(), &text)
    }

    /// Renders the graph in the same text format [`SkeletonGraph::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.joint_count, self.root_index);
        for (a, b) in &self.edges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn adjacency(&self) -> DenseMatrix {
        let j = self.joint_count;
        let mut a = DenseMatrix::zeros(j, j);
        for &(p, q) in &self.edges {
            a.set(p, q, 1.0);
            a.set(q, p, 1.0);
        }
        a
    }

    pub fn neighbors(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&(a, b)| {
            if a == joint {
                Some(b)
            } else if b == joint {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Hop distances from `source`; `None` for unreachable joints.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.joint_count];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Parent of each joint in the BFS tree grown from the root.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.joint_count];
        let mut visited = vec![false; self.joint_count];
        visited[self.root_index] = true;
        let mut queue = VecDeque::from([self.root_index]);
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if !visited[v] {
                    visited[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        parent
    }
}

fn parse_pair(line: &str) -> std::result::Result<(usize, usize), String> {
    let mut it = line.split_whitespace();
    let mut next = || -> std::result::Result<usize, String> {
        let tok = it
            .next()
            .ok_or_else(|| format!("expected two integers in `{line}`"))?;
        tok.parse()
            .map_err(|_| format!("`{tok}` is not a non-negative integer"))
    };
    let pair = (next()?, next()?);
    if it.next().is_some() {
        return Err(format!("trailing tokens in `{line}`"));
    }
    Ok(pair)
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "DenseMatrix::from_vec",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "DenseMatrix::matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `alpha * self + beta * other`, elementwise.
    pub fn axpby(&self, alpha: f64, other: &DenseMatrix, beta: f64) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "DenseMatrix::axpby",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Ok(DenseMatrix { data, ..*self })
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// Largest `|m[i][j] - m[j][i]|`; infinite for non-square matrices.
    pub fn max_asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// All eigenvalues of a symmetric matrix, ascending.
    pub fn symmetric_eigenvalues(&self) -> Result<Vec<f64>> {
        let asym = self.max_asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric(asym));
        }
        let n = self.rows;
        let m = nalgebra::DMatrix::from_row_slice(n, n, &self.data);
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }

    /// One row per line, comma separated, shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<DenseMatrix> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let row = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: "<csv>".into(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Parse {
                        path: "<csv>".into(),
                        line: i + 1,
                        msg: format!("expected {} columns, found {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        Ok(DenseMatrix::from_rows(&rows))
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn normalized_adjacency(g: &SkeletonGraph) -> DenseMatrix {
    let j = g.joint_count();
    let mut a = g.adjacency();
    for i in 0..j {
        a.set(i, i, 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..j)
        .map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt())
        .collect();
    for r in 0..j {
        for c in 0..j {
            let v = a.get(r, c);
            if v != 0.0 {
                a.set(r, c, v * inv_sqrt[r] * inv_sqrt[c]);
            }
        }
    }
    a
}

/// Normalized Laplacian `I - D^{-1/2} A D^{-1/2}` with degrees taken from `A`
/// alone. Isolated joints get a zero row in the normalized adjacency, so
/// their diagonal entry is 1.
pub fn graph_laplacian(g: &SkeletonGraph) -> DenseMatrix {
    let j = g.joint_count();
    let a = g.adjacency();
    let inv_sqrt: Vec<f64> = (0..j)
        .map(|i| {
            let d: f64 = a.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = DenseMatrix::identity(j);
    for r in 0..j {
        for c in 0..j {
            let v = a.get(r, c);
            if v != 0.0 {
                l.set(r, c, -v * inv_sqrt[r] * inv_sqrt[c]);
            }
        }
    }
    l
}

/// Largest eigenvalue of a symmetric matrix, by full symmetric eigensolve.
pub fn max_eigenvalue(m: &DenseMatrix) -> Result<f64> {
    if m.rows() != m.cols() {
        return Err(Error::Shape {
            op: "max_eigenvalue",
            lhs: m.shape().to_vec(),
            rhs: vec![m.rows(), m.rows()],
        });
    }
    Ok(m.symmetric_eigenvalues()?.last().copied().unwrap_or(0.0))
}

/// `2 L / λ_max - I`, whose spectrum lies in `[-1, 1]`.
pub fn rescaled_laplacian(g: &SkeletonGraph) -> Result<DenseMatrix> {
    rescale_laplacian(&graph_laplacian(g))
}

/// Rescales an already computed Laplacian.
pub fn rescale_laplacian(l: &DenseMatrix) -> Result<DenseMatrix> {
    let lambda = max_eigenvalue(l)?;
    if lambda <= 0.0 {
        return Err(Error::DegenerateSpectrum(lambda));
    }
    l.axpby(2.0 / lambda, &DenseMatrix::identity(l.rows()), -1.0)
}

/// `[T_0(L̃) X, ..., T_{K-1}(L̃) X]` via `T_k = 2 L̃ T_{k-1} - T_{k-2}`.
pub fn chebyshev_basis(
    rescaled: &DenseMatrix,
    x: &DenseMatrix,
    order: usize,
) -> Result<Vec<DenseMatrix>> {
    if order == 0 {
        return Err(Error::Config("Chebyshev order must be at least 1".into()));
    }
    if rescaled.rows() != rescaled.cols() || rescaled.cols() != x.rows() {
        return Err(Error::Shape {
            op: "chebyshev_basis",
            lhs: rescaled.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(order);
    out.push(x.clone());
    if order >= 2 {
        out.push(rescaled.matmul(x)?);
    }
    for k in 2..order {
        let next = rescaled
            .matmul(&out[k - 1])?
            .axpby(2.0, &out[k - 2], -1.0)?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &DenseMatrix, b: &DenseMatrix, tol: f64) {
        let d = a.max_abs_diff(b);
        assert!(d <= tol, "max diff {d:e} > {tol:e}\n{a:?}\n{b:?}");
    }

    #[test]
    fn presets_are_trees() {
        for g in [SkeletonGraph::human16(), SkeletonGraph::hand21()] {
            assert_eq!(g.edges().len(), g.joint_count() - 1);
            assert!(g.distances_from(g.root_index()).iter().all(Option::is_some));
        }
        assert_eq!(SkeletonGraph::human16().joint_count(), 16);
        assert_eq!(SkeletonGraph::hand21().joint_count(), 21);
    }

    #[test]
    fn rejects_invalid_graphs() {
        assert!(SkeletonGraph::new("x", 0, [], 0).is_err());
        assert!(SkeletonGraph::new("x", 2, [(0, 2)], 0).is_err());
        assert!(SkeletonGraph::new("x", 2, [(1, 1)], 0).is_err());
        assert!(SkeletonGraph::new("x", 2, [(0, 1), (1, 0)], 0).is_err());
        assert!(SkeletonGraph::new("x", 2, [(0, 1)], 2).is_err());
    }

    #[test]
    fn text_format_round_trip() {
        let g = SkeletonGraph::hand21();
        let back = SkeletonGraph::parse("hand21.txt", &g.to_text()).unwrap();
        assert_eq!(back, g);
        let err = SkeletonGraph::parse("g.txt", "3 0\n0 1\n1 x\n").unwrap_err();
        assert!(err.to_string().contains("g.txt:3"), "{err}");
    }

    #[test]
    fn normalized_adjacency_examples() {
        let one = SkeletonGraph::new("one", 1, [], 0).unwrap();
        assert_eq!(normalized_adjacency(&one), DenseMatrix::from_rows(&[[1.0]]));
        let two = SkeletonGraph::path(2).unwrap();
        assert_close(
            &normalized_adjacency(&two),
            &DenseMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]),
            1e-15,
        );
    }

    #[test]
    fn normalized_adjacency_sparsity_matches_human16() {
        let g = SkeletonGraph::human16();
        let a = normalized_adjacency(&g);
        assert!(a.max_asymmetry() <= SYMMETRY_TOL);
        let edges: BTreeSet<_> = g.edges().iter().copied().collect();
        for r in 0..16 {
            for c in 0..16 {
                let expected = r == c || edges.contains(&(r.min(c), r.max(c)));
                assert_eq!(a.get(r, c) != 0.0, expected, "({r}, {c})");
                assert!(a.get(r, c) >= 0.0);
            }
        }
    }

    #[test]
    fn laplacian_examples() {
        let two = SkeletonGraph::path(2).unwrap();
        assert_close(
            &graph_laplacian(&two),
            &DenseMatrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]),
            1e-15,
        );
        let one = SkeletonGraph::new("one", 1, [], 0).unwrap();
        assert_eq!(graph_laplacian(&one), DenseMatrix::from_rows(&[[1.0]]));
        let s = -1.0 / 2f64.sqrt();
        assert_close(
            &graph_laplacian(&SkeletonGraph::path(3).unwrap()),
            &DenseMatrix::from_rows(&[[1.0, s, 0.0], [s, 1.0, s], [0.0, s, 1.0]]),
            1e-15,
        );
    }

    #[test]
    fn isolated_joint_keeps_unit_diagonal() {
        let g = SkeletonGraph::new("g", 3, [(0, 1)], 0).unwrap();
        let l = graph_laplacian(&g);
        assert_eq!(l.row(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_eigenvalue_examples() {
        let l = DenseMatrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]);
        assert!((max_eigenvalue(&l).unwrap() - 2.0).abs() < 1e-12);
        assert!((max_eigenvalue(&DenseMatrix::identity(3)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(max_eigenvalue(&DenseMatrix::zeros(3, 3)).unwrap(), 0.0);
        let asym = DenseMatrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        assert!(matches!(max_eigenvalue(&asym), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn rescaled_laplacian_examples() {
        let two = SkeletonGraph::path(2).unwrap();
        assert_close(
            &rescaled_laplacian(&two).unwrap(),
            &DenseMatrix::from_rows(&[[0.0, -1.0], [-1.0, 0.0]]),
            1e-12,
        );
        let one = SkeletonGraph::new("one", 1, [], 0).unwrap();
        assert_close(
            &rescaled_laplacian(&one).unwrap(),
            &DenseMatrix::from_rows(&[[1.0]]),
            1e-15,
        );
        let ev = rescaled_laplacian(&SkeletonGraph::human16())
            .unwrap()
            .symmetric_eigenvalues()
            .unwrap();
        assert!(ev.iter().all(|&e| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&e)));
        assert!(matches!(
            rescale_laplacian(&DenseMatrix::zeros(2, 2)),
            Err(Error::DegenerateSpectrum(_))
        ));
    }

    #[test]
    fn chebyshev_examples() {
        let x = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let lt = rescaled_laplacian(&SkeletonGraph::path(2).unwrap()).unwrap();
        let basis = chebyshev_basis(&lt, &x, 1).unwrap();
        assert_eq!(basis, vec![x.clone()]);

        let basis = chebyshev_basis(&lt, &DenseMatrix::identity(2), 3).unwrap();
        assert_close(&basis[0], &DenseMatrix::identity(2), 0.0);
        assert_close(
            &basis[1],
            &DenseMatrix::from_rows(&[[0.0, -1.0], [-1.0, 0.0]]),
            1e-12,
        );
        assert_close(&basis[2], &DenseMatrix::identity(2), 1e-12);

        assert!(chebyshev_basis(&lt, &DenseMatrix::identity(3), 2).is_err());
        assert!(chebyshev_basis(&lt, &x, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = rescaled_laplacian(&SkeletonGraph::human16()).unwrap();
        assert_eq!(DenseMatrix::from_csv(&m.to_csv()).unwrap(), m);
    }
}
