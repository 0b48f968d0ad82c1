//! Attributed-graph data model: CSR adjacency, delimited-file ingestion,
//! feature normalization, and node splitting.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::FairsadError;
use crate::tape::ArcList;

/// Compressed sparse row adjacency over directed arcs. Each undirected edge
/// is stored in both directions.
#[derive(Debug, Clone)]
pub struct Csr {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl Csr {
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[u]..self.row_ptr[u + 1]]
    }

    pub fn num_arcs(&self) -> usize {
        self.col_idx.len()
    }

    pub fn degree(&self, u: usize) -> usize {
        self.row_ptr[u + 1] - self.row_ptr[u]
    }
}

pub const LABEL_MISSING: i8 = -1;

#[derive(Debug, Clone)]
pub struct AttributedGraph {
    pub num_nodes: usize,
    /// Undirected edge count.
    pub num_edges: usize,
    pub adjacency: Csr,
    /// n x d attribute matrix.
    pub attributes: Array2<f64>,
    /// Binary sensitive attribute per node.
    pub sensitive: Vec<u8>,
    /// Binary label per node, `LABEL_MISSING` when unlabeled.
    pub labels: Vec<i8>,
}

/// Dropped-row accounting from graph construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub self_loops_dropped: usize,
    pub duplicates_dropped: usize,
}

impl std::fmt::Display for IngestReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} self-loop{} dropped, {} duplicate{} dropped",
            self.self_loops_dropped,
            if self.self_loops_dropped == 1 { "" } else { "s" },
            self.duplicates_dropped,
            if self.duplicates_dropped == 1 { "" } else { "s" },
        )
    }
}

impl AttributedGraph {
    /// Builds a graph from undirected edge pairs, symmetrizing arcs and
    /// dropping self-loops and duplicates.
    pub fn from_edges(
        attributes: Array2<f64>,
        sensitive: Vec<u8>,
        labels: Vec<i8>,
        edges: &[(usize, usize)],
    ) -> Result<(Self, IngestReport), FairsadError> {
        let n = attributes.nrows();
        if sensitive.len() != n || labels.len() != n {
            return Err(FairsadError::Graph(format!(
                "attribute rows {n}, sensitive {}, labels {}",
                sensitive.len(),
                labels.len()
            )));
        }
        if let Some(&s) = sensitive.iter().find(|&&s| s > 1) {
            return Err(FairsadError::Graph(format!("non-binary sensitive value {s}")));
        }

        let mut report = IngestReport::default();
        let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(FairsadError::Graph(format!("edge ({u},{v}) references unknown node")));
            }
            if u == v {
                report.self_loops_dropped += 1;
                continue;
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                report.duplicates_dropped += 1;
            }
        }

        let mut row_counts = vec![0usize; n];
        for &(u, v) in seen.iter() {
            row_counts[u] += 1;
            row_counts[v] += 1;
        }
        let mut row_ptr = vec![0usize; n + 1];
        for u in 0..n {
            row_ptr[u + 1] = row_ptr[u] + row_counts[u];
        }
        let mut col_idx = vec![0usize; row_ptr[n]];
        let mut fill = row_ptr.clone();
        for &(u, v) in seen.iter() {
            col_idx[fill[u]] = v;
            fill[u] += 1;
            col_idx[fill[v]] = u;
            fill[v] += 1;
        }
        // BTreeSet iteration gives sorted (u,v); sort each row for determinism
        for u in 0..n {
            col_idx[row_ptr[u]..row_ptr[u + 1]].sort_unstable();
        }

        let graph = AttributedGraph {
            num_nodes: n,
            num_edges: seen.len(),
            adjacency: Csr { row_ptr, col_idx },
            attributes,
            sensitive,
            labels,
        };
        Ok((graph, report))
    }

    pub fn feature_dim(&self) -> usize {
        self.attributes.ncols()
    }

    /// Directed arc list in CSR order: arc a = (dst u, src v) with v in N(u).
    pub fn arc_list(&self) -> Arc<ArcList> {
        let m = self.adjacency.num_arcs();
        let mut dst = Vec::with_capacity(m);
        let mut src = Vec::with_capacity(m);
        for u in 0..self.num_nodes {
            for &v in self.adjacency.neighbors(u) {
                dst.push(u);
                src.push(v);
            }
        }
        Arc::new(ArcList { dst, src })
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes).filter(|&u| self.labels[u] != LABEL_MISSING).collect()
    }

    /// Checks arc symmetry, self-loop absence, and duplicate absence.
    pub fn validate(&self) -> Result<(), FairsadError> {
        let mut arcs = BTreeSet::new();
        for u in 0..self.num_nodes {
            let neigh = self.adjacency.neighbors(u);
            for w in neigh.windows(2) {
                if w[0] == w[1] {
                    return Err(FairsadError::Graph(format!("duplicate arc ({u},{})", w[0])));
                }
            }
            for &v in neigh {
                if v == u {
                    return Err(FairsadError::Graph(format!("self-loop at {u}")));
                }
                arcs.insert((u, v));
            }
        }
        for &(u, v) in &arcs {
            if !arcs.contains(&(v, u)) {
                return Err(FairsadError::Graph(format!("arc ({u},{v}) missing reverse")));
            }
        }
        Ok(())
    }
}

/// Column mapping for the nodes file. Every column not named here is a
/// feature column, taken in file order.
#[derive(Debug, Clone)]
pub struct LoadSchema {
    pub id_column: String,
    pub sensitive_column: String,
    pub label_column: String,
    pub delimiter: u8,
}

impl Default for LoadSchema {
    fn default() -> Self {
        Self {
            id_column: "id".into(),
            sensitive_column: "sensitive".into(),
            label_column: "label".into(),
            delimiter: b',',
        }
    }
}

/// Loads a graph from a delimited nodes file and edges file.
pub fn load_graph(
    nodes_path: &Path,
    edges_path: &Path,
    schema: &LoadSchema,
) -> Result<(AttributedGraph, IngestReport), FairsadError> {
    let npath = nodes_path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .from_path(nodes_path)
        .map_err(|e| FairsadError::Data { path: npath.clone(), row: 0, detail: e.to_string() })?;

    let headers = reader
        .headers()
        .map_err(|e| FairsadError::Data { path: npath.clone(), row: 0, detail: e.to_string() })?
        .clone();
    let find = |name: &str| -> Result<usize, FairsadError> {
        headers.iter().position(|h| h == name).ok_or_else(|| FairsadError::Data {
            path: npath.clone(),
            row: 0,
            detail: format!("missing column '{name}'"),
        })
    };
    let id_idx = find(&schema.id_column)?;
    let sens_idx = find(&schema.sensitive_column)?;
    let label_idx = find(&schema.label_column)?;
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != id_idx && i != sens_idx && i != label_idx)
        .collect();
    let d = feature_cols.len();

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut features: Vec<f64> = Vec::new();
    let mut sensitive = Vec::new();
    let mut labels = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after header
        let record =
            record.map_err(|e| FairsadError::Data { path: npath.clone(), row, detail: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(FairsadError::Data {
                path: npath.clone(),
                row,
                detail: format!("expected {} columns, found {}", headers.len(), record.len()),
            });
        }
        let id = record[id_idx].trim().to_string();
        if ids.insert(id.clone(), ids.len()).is_some() {
            return Err(FairsadError::Data {
                path: npath.clone(),
                row,
                detail: format!("duplicate node id '{id}'"),
            });
        }
        let sens_raw = record[sens_idx].trim();
        let sens: f64 = sens_raw.parse().map_err(|_| FairsadError::Data {
            path: npath.clone(),
            row,
            detail: format!("unparseable sensitive value '{sens_raw}'"),
        })?;
        if sens != 0.0 && sens != 1.0 {
            return Err(FairsadError::Data {
                path: npath.clone(),
                row,
                detail: format!("non-binary sensitive value '{sens_raw}'"),
            });
        }
        sensitive.push(sens as u8);
        let label_raw = record[label_idx].trim();
        if label_raw.is_empty() {
            labels.push(LABEL_MISSING);
        } else {
            let y: f64 = label_raw.parse().map_err(|_| FairsadError::Data {
                path: npath.clone(),
                row,
                detail: format!("unparseable label '{label_raw}'"),
            })?;
            if y != 0.0 && y != 1.0 {
                return Err(FairsadError::Data {
                    path: npath.clone(),
                    row,
                    detail: format!("non-binary label '{label_raw}'"),
                });
            }
            labels.push(y as i8);
        }
        for &c in &feature_cols {
            let raw = record[c].trim();
            let v: f64 = raw.parse().map_err(|_| FairsadError::Data {
                path: npath.clone(),
                row,
                detail: format!("unparseable feature '{raw}' in column '{}'", &headers[c]),
            })?;
            features.push(v);
        }
    }

    let n = ids.len();
    let attributes = Array2::from_shape_vec((n, d), features)
        .map_err(|e| FairsadError::Data { path: npath.clone(), row: 0, detail: e.to_string() })?;

    let epath = edges_path.display().to_string();
    let mut ereader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .from_path(edges_path)
        .map_err(|e| FairsadError::Data { path: epath.clone(), row: 0, detail: e.to_string() })?;
    let mut edges = Vec::new();
    for (i, record) in ereader.records().enumerate() {
        let row = i + 2;
        let record =
            record.map_err(|e| FairsadError::Data { path: epath.clone(), row, detail: e.to_string() })?;
        let endpoint = |field: usize| -> Result<usize, FairsadError> {
            let raw = record[field].trim();
            ids.get(raw).copied().ok_or_else(|| FairsadError::Data {
                path: epath.clone(),
                row,
                detail: format!("unknown node id '{raw}'"),
            })
        };
        let u = endpoint(0)?;
        let v = endpoint(1)?;
        edges.push((u, v));
    }

    AttributedGraph::from_edges(attributes, sensitive, labels, &edges)
}

/// Min-max scales each attribute column to [0,1]; constant columns map to 0.
pub fn normalize_features(graph: &AttributedGraph) -> AttributedGraph {
    let mut out = graph.clone();
    for mut col in out.attributes.columns_mut() {
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            let range = max - min;
            col.mapv_inplace(|v| (v - min) / range);
        } else {
            col.fill(0.0);
        }
    }
    out
}

/// Disjoint train/val/test node index sets over labeled nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic split of labeled nodes. Train and val take
/// `floor(ratio * labeled)` nodes each; the remainder of the covered
/// fraction goes to test.
pub fn split_nodes(
    graph: &AttributedGraph,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitMasks, FairsadError> {
    let (rt, rv, rte) = ratios;
    if rt < 0.0 || rv < 0.0 || rte < 0.0 || rt + rv + rte > 1.0 + 1e-12 {
        return Err(FairsadError::Config(format!(
            "split ratios must be nonnegative and sum to at most 1, got ({rt},{rv},{rte})"
        )));
    }
    let mut labeled = graph.labeled_nodes();
    let count = labeled.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);

    let n_train = (rt * count as f64).floor() as usize;
    let n_val = (rv * count as f64).floor() as usize;
    let n_used = (((rt + rv + rte) * count as f64) + 1e-9).floor() as usize;
    let n_test = n_used.saturating_sub(n_train + n_val);
    if n_train == 0 {
        return Err(FairsadError::Config("empty train split".into()));
    }

    let mut train: Vec<usize> = labeled[..n_train].to_vec();
    let mut val: Vec<usize> = labeled[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = labeled[n_train + n_val..n_train + n_val + n_test].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitMasks { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn tiny_graph(edges: &[(usize, usize)]) -> (AttributedGraph, IngestReport) {
        let x = array![[1.0], [2.0], [3.0]];
        AttributedGraph::from_edges(x, vec![0, 1, 1], vec![0, 1, 0], edges).unwrap()
    }

    #[test]
    fn symmetrization() {
        let (g, _) = tiny_graph(&[(0, 1)]);
        assert_eq!(g.num_edges, 1);
        assert_eq!(g.adjacency.neighbors(0), &[1]);
        assert_eq!(g.adjacency.neighbors(1), &[0]);
        assert_eq!(g.adjacency.neighbors(2), &[] as &[usize]);
        g.validate().unwrap();
    }

    #[test]
    fn dedup_and_self_loops() {
        let (g, report) = tiny_graph(&[(0, 1), (1, 0), (2, 2)]);
        assert_eq!(g.num_edges, 1);
        assert_eq!(report.self_loops_dropped, 1);
        assert_eq!(report.duplicates_dropped, 1);
        assert_eq!(report.to_string(), "1 self-loop dropped, 1 duplicate dropped");
    }

    #[test]
    fn unknown_edge_node_rejected() {
        let x = array![[1.0], [2.0]];
        let err = AttributedGraph::from_edges(x, vec![0, 1], vec![0, 1], &[(0, 5)]).unwrap_err();
        assert!(err.to_string().contains("unknown node"));
    }

    #[test]
    fn minmax_normalization() {
        let x = array![[2.0, 5.0, 0.0], [4.0, 5.0, 1.0], [6.0, 5.0, 0.0]];
        let (g, _) =
            AttributedGraph::from_edges(x, vec![0, 0, 1], vec![0, 1, 1], &[(0, 1)]).unwrap();
        let n = normalize_features(&g);
        assert_eq!(n.attributes.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        // constant column to zero
        assert_eq!(n.attributes.column(1).to_vec(), vec![0.0, 0.0, 0.0]);
        // binary column unchanged
        assert_eq!(n.attributes.column(2).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    fn labeled_graph(n: usize) -> AttributedGraph {
        let x = Array2::zeros((n, 2));
        let s = (0..n).map(|i| (i % 2) as u8).collect();
        let y = (0..n).map(|i| (i % 2) as i8).collect();
        AttributedGraph::from_edges(x, s, y, &[(0, 1)]).unwrap().0
    }

    #[test]
    fn split_sizes_floor_with_remainder_to_test() {
        let g = labeled_graph(10);
        let m = split_nodes(&g, (0.5, 0.25, 0.25), 7).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (5, 2, 3));
    }

    #[test]
    fn split_is_deterministic() {
        let g = labeled_graph(20);
        let a = split_nodes(&g, (0.6, 0.2, 0.2), 3).unwrap();
        let b = split_nodes(&g, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(a, b);
        let c = split_nodes(&g, (0.6, 0.2, 0.2), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_sets_are_disjoint() {
        let g = labeled_graph(31);
        let m = split_nodes(&g, (0.5, 0.3, 0.2), 11).unwrap();
        let mut all: Vec<usize> =
            m.train.iter().chain(&m.val).chain(&m.test).copied().collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        assert_eq!(before, all.len());
    }

    #[test]
    fn empty_train_split_rejected() {
        let g = labeled_graph(10);
        let err = split_nodes(&g, (0.0, 0.5, 0.5), 1).unwrap_err();
        assert!(err.to_string().contains("empty train split"));
    }

    #[test]
    fn unlabeled_nodes_excluded_from_splits() {
        let x = Array2::zeros((4, 1));
        let (g, _) = AttributedGraph::from_edges(
            x,
            vec![0, 1, 0, 1],
            vec![1, LABEL_MISSING, 0, 1],
            &[(0, 1)],
        )
        .unwrap();
        let m = split_nodes(&g, (0.5, 0.0, 0.5), 0).unwrap();
        assert!(!m.train.contains(&1) && !m.val.contains(&1) && !m.test.contains(&1));
    }

    #[test]
    fn load_graph_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let npath = dir.path().join("nodes.csv");
        let epath = dir.path().join("edges.csv");
        let mut nf = std::fs::File::create(&npath).unwrap();
        writeln!(nf, "id,f0,f1,sensitive,label").unwrap();
        writeln!(nf, "a,0.5,1.0,0,1").unwrap();
        writeln!(nf, "b,0.25,2.0,1,0").unwrap();
        writeln!(nf, "c,0.75,3.0,1,").unwrap();
        let mut ef = std::fs::File::create(&epath).unwrap();
        writeln!(ef, "src,dst").unwrap();
        writeln!(ef, "a,b").unwrap();
        writeln!(ef, "b,c").unwrap();
        let (g, report) = load_graph(&npath, &epath, &LoadSchema::default()).unwrap();
        assert_eq!(g.num_nodes, 3);
        assert_eq!(g.feature_dim(), 2);
        assert_eq!(g.num_edges, 2);
        assert_eq!(report, IngestReport::default());
        assert_eq!(g.labels, vec![1, 0, LABEL_MISSING]);
        assert_eq!(g.sensitive, vec![0, 1, 1]);
        g.validate().unwrap();
    }

    #[test]
    fn load_graph_bad_sensitive_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let npath = dir.path().join("nodes.csv");
        let epath = dir.path().join("edges.csv");
        std::fs::write(&npath, "id,f0,sensitive,label\na,0.5,2,1\n").unwrap();
        std::fs::write(&epath, "src,dst\n").unwrap();
        let err = load_graph(&npath, &epath, &LoadSchema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("non-binary sensitive"), "{msg}");
    }

    #[test]
    fn load_graph_unknown_edge_id_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let npath = dir.path().join("nodes.csv");
        let epath = dir.path().join("edges.csv");
        std::fs::write(&npath, "id,f0,sensitive,label\na,0.5,0,1\nb,0.1,1,0\n").unwrap();
        std::fs::write(&epath, "src,dst\na,b\na,zz\n").unwrap();
        let err = load_graph(&npath, &epath, &LoadSchema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("unknown node id 'zz'"), "{msg}");
    }
}
