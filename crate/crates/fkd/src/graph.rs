//! Graph representation, file ingestion, normalized operators, homophily,
//! synthetic generation with a controllable homophily index, and data splits.
//!
//! File formats: edge list is plain text with two whitespace-separated
//! 0-based node ids per line ('#' starts a comment); features are headerless
//! CSV, one row per node; labels are one integer per line. Node order is the
//! row order of the features file.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{FkdError, Result};
use crate::mat::Mat;
use crate::rng::{fnv1a, normal, permutation, substream};

/// Undirected simple graph with node features and integer labels.
///
/// Edges are stored once per pair as `(i, j)` with `i < j`, sorted. Input
/// self-loops are dropped on load; the normalized adjacency adds them back
/// uniformly.
#[derive(Debug, Clone)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub x: Mat,
    pub y: Vec<usize>,
    pub c: usize,
}

/// Normalized adjacency/Laplacian pair with the self-loop-augmented degrees.
#[derive(Debug, Clone)]
pub struct Operators {
    pub a_hat: Mat,
    pub l_hat: Mat,
    pub degrees: Vec<f64>,
}

/// Disjoint boolean train/val/test node masks.
#[derive(Debug, Clone)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Planetoid-style: fixed node counts — per-class train, global val/test.
    PerClassCount {
        train_per_class: usize,
        val: usize,
        test: usize,
    },
    /// Per-class proportional split (e.g. 0.2 / 0.2 / 0.6).
    Ratio { train: f64, val: f64, test: f64 },
}

impl Graph {
    pub fn d0(&self) -> usize {
        self.x.cols()
    }

    /// Neighbor lists (no self-loops), each sorted ascending.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }

    /// Hash of the topology (n + sorted edge list); used to validate the
    /// framelet matrix cache.
    pub fn topology_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 + self.edges.len() * 16);
        bytes.extend_from_slice(&(self.n as u64).to_le_bytes());
        for &(i, j) in &self.edges {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
            bytes.extend_from_slice(&(j as u64).to_le_bytes());
        }
        fnv1a(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        for &(i, j) in &self.edges {
            if i >= self.n || j >= self.n {
                return Err(FkdError::Config(format!(
                    "edge ({i}, {j}) out of range for n = {}",
                    self.n
                )));
            }
            if i == j {
                return Err(FkdError::Config(format!("self-loop on node {i}")));
            }
        }
        if self.x.rows() != self.n || self.y.len() != self.n {
            return Err(FkdError::RowCountMismatch {
                features: self.x.rows(),
                labels: self.y.len(),
            });
        }
        if !self.x.is_finite() {
            return Err(FkdError::Config("non-finite feature entries".into()));
        }
        if self.y.iter().any(|&l| l >= self.c) {
            return Err(FkdError::Config("label out of range".into()));
        }
        Ok(())
    }
}

impl SplitMasks {
    pub fn train_indices(&self) -> Vec<usize> {
        mask_indices(&self.train)
    }
    pub fn val_indices(&self) -> Vec<usize> {
        mask_indices(&self.val)
    }
    pub fn test_indices(&self) -> Vec<usize> {
        mask_indices(&self.test)
    }
}

pub fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

fn io_err(path: &Path, source: std::io::Error) -> FkdError {
    FkdError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

/// Load a graph from an edge list, a features CSV, and a labels file.
///
/// Edges are symmetrized and deduplicated; input self-loops are dropped.
pub fn load_graph(
    edge_list_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Graph> {
    let features_path = features_path.as_ref();
    let labels_path = labels_path.as_ref();
    let edge_list_path = edge_list_path.as_ref();

    // Features first: their row order defines node ids.
    let ftext = fs::read_to_string(features_path).map_err(|e| io_err(features_path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, raw) in ftext.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| FkdError::Parse {
                file: features_path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad float '{}'", tok.trim()),
            })?;
            if !v.is_finite() {
                return Err(FkdError::Parse {
                    file: features_path.to_path_buf(),
                    line: lineno + 1,
                    msg: "non-finite feature value".into(),
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(FkdError::Parse {
                    file: features_path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected {} columns, got {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let x = Mat::from_rows(&rows);

    let ltext = fs::read_to_string(labels_path).map_err(|e| io_err(labels_path, e))?;
    let mut y = Vec::new();
    for (lineno, raw) in ltext.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let v: i64 = line.parse().map_err(|_| FkdError::Parse {
            file: labels_path.to_path_buf(),
            line: lineno + 1,
            msg: format!("bad label '{line}'"),
        })?;
        if v < 0 {
            return Err(FkdError::Parse {
                file: labels_path.to_path_buf(),
                line: lineno + 1,
                msg: "negative label".into(),
            });
        }
        y.push(v as usize);
    }
    if y.len() != n {
        return Err(FkdError::RowCountMismatch {
            features: n,
            labels: y.len(),
        });
    }

    let etext = fs::read_to_string(edge_list_path).map_err(|e| io_err(edge_list_path, e))?;
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for (lineno, raw) in etext.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let parse_node = |tok: Option<&str>| -> Result<usize> {
            let tok = tok.ok_or_else(|| FkdError::Parse {
                file: edge_list_path.to_path_buf(),
                line: lineno + 1,
                msg: "expected two node ids".into(),
            })?;
            tok.parse::<usize>().map_err(|_| FkdError::Parse {
                file: edge_list_path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad node id '{tok}'"),
            })
        };
        let a = parse_node(toks.next())?;
        let b = parse_node(toks.next())?;
        if toks.next().is_some() {
            return Err(FkdError::Parse {
                file: edge_list_path.to_path_buf(),
                line: lineno + 1,
                msg: "trailing tokens after edge".into(),
            });
        }
        for &v in &[a, b] {
            if v >= n {
                return Err(FkdError::IndexOutOfRange {
                    file: edge_list_path.to_path_buf(),
                    line: lineno + 1,
                    index: v,
                    n,
                });
            }
        }
        if a == b {
            continue; // dropped: A-hat adds self-loops uniformly
        }
        let e = (a.min(b), a.max(b));
        if seen.insert(e) {
            edges.push(e);
        }
    }
    edges.sort_unstable();

    let c = y.iter().copied().max().map_or(0, |m| m + 1);
    let g = Graph { n, edges, x, y, c };
    g.validate()?;
    Ok(g)
}

/// Write a graph back out in the load formats (edge list + features CSV +
/// labels). Floats use the shortest round-trippable representation.
pub fn save_graph(g: &Graph, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let epath = dir.join("edges.txt");
    let fpath = dir.join("features.csv");
    let lpath = dir.join("labels.txt");

    let mut ef = fs::File::create(&epath).map_err(|e| io_err(&epath, e))?;
    for &(i, j) in &g.edges {
        writeln!(ef, "{i} {j}").map_err(|e| io_err(&epath, e))?;
    }
    let mut ff = fs::File::create(&fpath).map_err(|e| io_err(&fpath, e))?;
    for i in 0..g.n {
        let row: Vec<String> = g.x.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(ff, "{}", row.join(",")).map_err(|e| io_err(&fpath, e))?;
    }
    let mut lf = fs::File::create(&lpath).map_err(|e| io_err(&lpath, e))?;
    for &l in &g.y {
        writeln!(lf, "{l}").map_err(|e| io_err(&lpath, e))?;
    }
    Ok((epath, fpath, lpath))
}

/// Â = D^{-1/2} (A + I) D^{-1/2} and L̂ = I − Â, with D the row sums of A + I.
///
/// Degrees are ≥ 1 always, so no division guard is needed.
pub fn normalized_operators(g: &Graph) -> Operators {
    let n = g.n;
    let mut deg = vec![1.0f64; n]; // self-loop
    for &(i, j) in &g.edges {
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();

    let mut a_hat = Mat::zeros(n, n);
    for i in 0..n {
        a_hat.set(i, i, inv_sqrt[i] * inv_sqrt[i]);
    }
    for &(i, j) in &g.edges {
        let v = inv_sqrt[i] * inv_sqrt[j];
        a_hat.set(i, j, v);
        a_hat.set(j, i, v);
    }

    let mut l_hat = a_hat.scale(-1.0);
    for i in 0..n {
        l_hat.set(i, i, 1.0 - a_hat.get(i, i));
    }

    Operators {
        a_hat,
        l_hat,
        degrees: deg,
    }
}

/// Fraction of undirected edges whose endpoints share a label.
pub fn edge_homophily(g: &Graph) -> Result<f64> {
    if g.edges.is_empty() {
        return Err(FkdError::EmptyEdgeSet);
    }
    let same = g
        .edges
        .iter()
        .filter(|&&(i, j)| g.y[i] == g.y[j])
        .count();
    Ok(same as f64 / g.edges.len() as f64)
}

/// Parameters for the controllable-homophily generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticParams {
    pub n: usize,
    pub c: usize,
    pub d0: usize,
    pub avg_degree: f64,
    pub target_h: f64,
    pub feature_scale: f64,
}

/// Generate a synthetic graph whose edge homophily tracks `target_h`.
///
/// Labels are uniform over `c` classes; features are class-conditional
/// Gaussians (random unit-direction class means scaled by `feature_scale`,
/// unit per-coordinate noise). Each of the ⌊n·avg_degree/2⌋ edges picks a
/// uniform source, then a same-class target with probability `target_h` and a
/// different-class target otherwise, rejecting duplicates and self-loops.
/// The result is re-sampled (up to 20 attempts) until the measured homophily
/// is within 0.03 of the target for n ≥ 500.
pub fn generate_synthetic(p: &SyntheticParams, seed: u64) -> Result<Graph> {
    assert!(p.n >= 2 * p.c, "need n >= 2c");
    assert!(p.avg_degree >= 1.0, "need avg_degree >= 1");
    assert!((0.0..=1.0).contains(&p.target_h), "target_h in [0,1]");

    let m = (p.n as f64 * p.avg_degree / 2.0).floor() as usize;
    if m > p.n * (p.n - 1) / 2 {
        return Err(FkdError::InfeasibleDegree {
            requested: m,
            available: p.n * (p.n - 1) / 2,
        });
    }

    let mut rng = substream(seed, "generation");

    // Labels and features are drawn once; only edges are re-sampled when the
    // homophily tolerance is missed.
    let y: Vec<usize> = (0..p.n).map(|_| rng.gen_range(0..p.c)).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); p.c];
    for (i, &l) in y.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut means = Vec::with_capacity(p.c);
    for _ in 0..p.c {
        let mut v: Vec<f64> = (0..p.d0).map(|_| normal(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x *= p.feature_scale / norm;
        }
        means.push(v);
    }
    let x = Mat::from_fn(p.n, p.d0, |i, j| means[y[i]][j] + normal(&mut rng));

    let tol_applies = p.n >= 500;
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    for _attempt in 0..20 {
        let edges = sample_edges(p, &y, &by_class, m, &mut rng)?;
        let g_tmp = Graph {
            n: p.n,
            edges: edges.clone(),
            x: Mat::zeros(p.n, 0),
            y: y.clone(),
            c: p.c,
        };
        let h = edge_homophily(&g_tmp)?;
        let err = (h - p.target_h).abs();
        if best.as_ref().map_or(true, |(b, _)| err < (b - p.target_h).abs()) {
            best = Some((h, edges));
        }
        if !tol_applies || err <= 0.03 {
            let (_, edges) = best.unwrap();
            let g = Graph {
                n: p.n,
                edges,
                x,
                y,
                c: p.c,
            };
            g.validate()?;
            return Ok(g);
        }
    }
    let (best_h, _) = best.unwrap();
    Err(FkdError::HomophilyTolerance {
        target: p.target_h,
        best: best_h,
        attempts: 20,
    })
}

fn sample_edges(
    p: &SyntheticParams,
    y: &[usize],
    by_class: &[Vec<usize>],
    m: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let mut seen = HashSet::with_capacity(2 * m);
    let mut edges = Vec::with_capacity(m);
    let max_attempts = 200 * m.max(1);
    let mut attempts = 0;
    while edges.len() < m {
        attempts += 1;
        if attempts > max_attempts {
            return Err(FkdError::InfeasibleDegree {
                requested: m,
                available: edges.len(),
            });
        }
        let u = rng.gen_range(0..p.n);
        let same_class = rng.gen::<f64>() < p.target_h;
        let pool: Vec<usize> = if same_class {
            by_class[y[u]].iter().copied().filter(|&v| v != u).collect()
        } else {
            (0..p.c)
                .filter(|&k| k != y[u])
                .flat_map(|k| by_class[k].iter().copied())
                .collect()
        };
        if pool.is_empty() {
            continue;
        }
        let v = pool[rng.gen_range(0..pool.len())];
        let e = (u.min(v), u.max(v));
        if seen.insert(e) {
            edges.push(e);
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

/// Deterministic train/val/test masks.
pub fn split_masks(g: &Graph, mode: SplitMode, seed: u64) -> Result<SplitMasks> {
    let mut rng = substream(seed, "split");
    let mut train = vec![false; g.n];
    let mut val = vec![false; g.n];
    let mut test = vec![false; g.n];

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); g.c];
    for (i, &l) in g.y.iter().enumerate() {
        by_class[l].push(i);
    }

    match mode {
        SplitMode::PerClassCount {
            train_per_class,
            val: n_val,
            test: n_test,
        } => {
            let mut rest = Vec::new();
            for (class, nodes) in by_class.iter().enumerate() {
                if nodes.len() < train_per_class {
                    return Err(FkdError::SplitInfeasible {
                        class,
                        available: nodes.len(),
                        requested: train_per_class,
                    });
                }
                let perm = permutation(&mut rng, nodes.len());
                for (k, &pi) in perm.iter().enumerate() {
                    if k < train_per_class {
                        train[nodes[pi]] = true;
                    } else {
                        rest.push(nodes[pi]);
                    }
                }
            }
            if rest.len() < n_val + n_test {
                return Err(FkdError::SplitInfeasible {
                    class: usize::MAX,
                    available: rest.len(),
                    requested: n_val + n_test,
                });
            }
            rest.sort_unstable();
            let perm = permutation(&mut rng, rest.len());
            for (k, &pi) in perm.iter().enumerate() {
                if k < n_val {
                    val[rest[pi]] = true;
                } else if k < n_val + n_test {
                    test[rest[pi]] = true;
                }
            }
        }
        SplitMode::Ratio {
            train: rt,
            val: rv,
            test: rs,
        } => {
            let total = rt + rv + rs;
            if !(0.999..=1.001).contains(&total) {
                return Err(FkdError::Config(format!(
                    "split ratios must sum to 1, got {total}"
                )));
            }
            for nodes in by_class.iter() {
                let nc = nodes.len();
                let n_train = (rt * nc as f64).floor() as usize;
                let n_val = (rv * nc as f64).floor() as usize;
                let perm = permutation(&mut rng, nc);
                for (k, &pi) in perm.iter().enumerate() {
                    if k < n_train {
                        train[nodes[pi]] = true;
                    } else if k < n_train + n_val {
                        val[nodes[pi]] = true;
                    } else {
                        test[nodes[pi]] = true;
                    }
                }
            }
        }
    }

    Ok(SplitMasks { train, val, test })
}
