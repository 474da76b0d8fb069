//! Labeled samples, dataset bundles and their JSON Lines file format.
//!
//! A bundle file starts with one header line (`p`, `q`, `num_classes`,
//! `task`, `domain`, the environment registry and, for node-level tasks,
//! the shared graph), followed by one line per sample. Graph-level sample
//! lines carry `n`, `edges`, `x`, optional `edge_attr`; node-level lines
//! carry `node`. Both carry `y`, `env`, `split` and optional `meta`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError};

pub const DATA_FILE: &str = "data.jsonl";
pub const LABEL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: schema error: {msg}")]
    Schema { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty dataset file {0}")]
    Empty(PathBuf),
}

impl DataError {
    fn schema(line: usize, msg: impl Into<String>) -> Self {
        DataError::Schema { line, msg: msg.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdVal,
    IdTest,
    OodVal,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::IdVal, Split::IdTest, Split::OodVal, Split::OodTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IdVal => "id_val",
            Split::IdTest => "id_test",
            Split::OodVal => "ood_val",
            Split::OodTest => "ood_test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Graph,
    Node,
}

/// The attribute along which OOD splits differ from training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftDomain {
    Size,
    Base,
    Color,
}

impl std::str::FromStr for ShiftDomain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "size" => Ok(ShiftDomain::Size),
            "base" => Ok(ShiftDomain::Base),
            "color" => Ok(ShiftDomain::Color),
            other => Err(format!("unknown shift domain {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub id: usize,
    pub name: String,
}

/// One ground-truth motif occurrence: its kind and node ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifInstance {
    pub kind: usize,
    pub nodes: Vec<usize>,
}

/// Provenance carried by synthetic and augmented samples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub motif_nodes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub motifs: Vec<MotifInstance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bridge_edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub base_kinds: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option: Option<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<usize>,
}

impl SampleMeta {
    /// Motif records surviving a node relabelling; instances losing any
    /// node are dropped.
    pub fn remap(&self, map: &[Option<usize>]) -> SampleMeta {
        let motifs: Vec<MotifInstance> = self
            .motifs
            .iter()
            .filter_map(|m| {
                let nodes: Option<Vec<usize>> = m.nodes.iter().map(|&v| map.get(v).copied().flatten()).collect();
                nodes.map(|nodes| MotifInstance { kind: m.kind, nodes })
            })
            .collect();
        let bridge_edges = self
            .bridge_edges
            .iter()
            .filter_map(|&(u, v)| Some((map.get(u).copied().flatten()?, map.get(v).copied().flatten()?)))
            .collect();
        SampleMeta {
            motif_nodes: motifs.iter().flat_map(|m| m.nodes.iter().copied()).collect(),
            motifs,
            bridge_edges,
            base_kinds: self.base_kinds.clone(),
            option: self.option,
            sources: self.sources.clone(),
        }
    }

    /// Shift every node id by `offset` (component placement in a splice).
    pub fn offset(&self, offset: usize) -> SampleMeta {
        let shift = |v: usize| v + offset;
        SampleMeta {
            motif_nodes: self.motif_nodes.iter().copied().map(shift).collect(),
            motifs: self
                .motifs
                .iter()
                .map(|m| MotifInstance {
                    kind: m.kind,
                    nodes: m.nodes.iter().copied().map(shift).collect(),
                })
                .collect(),
            bridge_edges: self.bridge_edges.iter().map(|&(u, v)| (shift(u), shift(v))).collect(),
            base_kinds: self.base_kinds.clone(),
            option: self.option,
            sources: self.sources.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Subject {
    Graph(Graph),
    /// Index into the bundle's shared graph.
    Node(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub subject: Subject,
    pub label: Vec<f64>,
    pub env: usize,
    pub split: Split,
    pub meta: Option<SampleMeta>,
}

impl LabeledSample {
    pub fn graph(&self) -> Option<&Graph> {
        match &self.subject {
            Subject::Graph(g) => Some(g),
            Subject::Node(_) => None,
        }
    }

    pub fn node(&self) -> Option<usize> {
        match self.subject {
            Subject::Node(v) => Some(v),
            Subject::Graph(_) => None,
        }
    }

    pub fn hard_label(&self) -> usize {
        argmax(&self.label)
    }

    pub fn option(&self) -> Option<u8> {
        self.meta.as_ref().and_then(|m| m.option)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[class] = 1.0;
    v
}

/// Checks the soft-label invariant: nonnegative entries summing to one.
pub fn validate_label(label: &[f64], num_classes: usize) -> Result<(), String> {
    if label.len() != num_classes {
        return Err(format!("label has {} entries, expected {num_classes}", label.len()));
    }
    if label.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err("label has a negative or non-finite entry".into());
    }
    let s: f64 = label.iter().sum();
    if (s - 1.0).abs() > LABEL_TOLERANCE {
        return Err(format!("label sums to {s}, expected 1"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleHeader {
    pub p: usize,
    pub q: usize,
    pub num_classes: usize,
    pub task: TaskKind,
    pub shift: Option<ShiftDomain>,
    /// Per-feature half-open `[lo, hi)` domain.
    pub domain: Vec<(f64, f64)>,
    pub envs: Vec<EnvInfo>,
    /// Shared graph for node-level tasks.
    pub graph: Option<Graph>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub header: BundleHeader,
    pub samples: Vec<LabeledSample>,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &LabeledSample)> {
        self.samples.iter().enumerate().filter(move |(_, s)| s.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.split(split).map(|(i, _)| i).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn env_ids(&self) -> Vec<usize> {
        self.header.envs.iter().map(|e| e.id).collect()
    }

    pub fn next_env_id(&self) -> usize {
        self.header.envs.iter().map(|e| e.id + 1).max().unwrap_or(0)
    }

    pub fn register_env(&mut self, name: impl Into<String>) -> usize {
        let id = self.next_env_id();
        self.header.envs.push(EnvInfo { id, name: name.into() });
        id
    }

    /// Training environments that actually own samples, ascending.
    pub fn train_envs(&self) -> Vec<usize> {
        self.split(Split::Train)
            .map(|(_, s)| s.env)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Graph for a graph-level sample, or the shared graph for node tasks.
    pub fn graph_of<'a>(&'a self, sample: &'a LabeledSample) -> &'a Graph {
        match &sample.subject {
            Subject::Graph(g) => g,
            Subject::Node(_) => self.header.graph.as_ref().expect("node-level bundle has a shared graph"),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        validate_header(&self.header, 1)?;
        for (i, s) in self.samples.iter().enumerate() {
            validate_sample(&self.header, s, i + 2)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct GraphRecord {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_attr: Option<Vec<Vec<f64>>>,
}

impl GraphRecord {
    pub fn from_graph(g: &Graph) -> Self {
        GraphRecord {
            n: g.num_nodes(),
            edges: g.edges().to_vec(),
            x: rows(g.node_features()),
            edge_attr: g.edge_features().map(rows),
        }
    }

    pub fn into_graph(self) -> Result<Graph, String> {
        let x = matrix(self.x, self.n, "x")?;
        let ef = match self.edge_attr {
            Some(rows) => {
                let m = rows.len();
                Some(matrix(rows, m, "edge_attr")?)
            }
            None => None,
        };
        Graph::new(self.n, self.edges, x, ef).map_err(|e: GraphError| e.to_string())
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: Vec<Vec<f64>>, expected_rows: usize, field: &str) -> Result<Array2<f64>, String> {
    if rows.len() != expected_rows {
        return Err(format!("`{field}` has {} rows, expected {expected_rows}", rows.len()));
    }
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(format!("`{field}` rows have unequal widths"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((expected_rows, width), flat).map_err(|e| e.to_string())
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    p: usize,
    q: usize,
    num_classes: usize,
    task: TaskKind,
    domain: Vec<(f64, f64)>,
    envs: Vec<EnvInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shift: Option<ShiftDomain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph: Option<GraphRecord>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<usize>,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    graph: Option<GraphRecord>,
    y: Vec<f64>,
    env: usize,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SampleMeta>,
}

fn validate_header(h: &BundleHeader, line: usize) -> Result<(), DataError> {
    if h.domain.len() != h.p {
        return Err(DataError::schema(line, format!("`domain` has {} entries, expected p = {}", h.domain.len(), h.p)));
    }
    if let Some((i, _)) = h.domain.iter().enumerate().find(|(_, (lo, hi))| !(lo < hi)) {
        return Err(DataError::schema(line, format!("`domain` entry {i} has lo >= hi")));
    }
    if h.num_classes == 0 {
        return Err(DataError::schema(line, "`num_classes` must be positive"));
    }
    match (h.task, &h.graph) {
        (TaskKind::Node, None) => return Err(DataError::schema(line, "missing field `graph` for node-level task")),
        (TaskKind::Node, Some(g)) => check_graph_widths(h, g, line)?,
        (TaskKind::Graph, _) => {}
    }
    Ok(())
}

fn check_graph_widths(h: &BundleHeader, g: &Graph, line: usize) -> Result<(), DataError> {
    if g.feature_dim() != h.p {
        return Err(DataError::schema(line, format!("node features have width {}, expected p = {}", g.feature_dim(), h.p)));
    }
    if g.edge_feature_dim() != h.q && g.num_edges() > 0 && g.edge_features().is_some() {
        return Err(DataError::schema(
            line,
            format!("edge features have width {}, expected q = {}", g.edge_feature_dim(), h.q),
        ));
    }
    Ok(())
}

fn validate_sample(h: &BundleHeader, s: &LabeledSample, line: usize) -> Result<(), DataError> {
    validate_label(&s.label, h.num_classes).map_err(|m| DataError::schema(line, format!("`y`: {m}")))?;
    if !h.envs.iter().any(|e| e.id == s.env) {
        return Err(DataError::schema(line, format!("`env` {} is not a registered environment", s.env)));
    }
    match (&s.subject, h.task) {
        (Subject::Graph(g), TaskKind::Graph) => check_graph_widths(h, g, line),
        (Subject::Node(v), TaskKind::Node) => {
            let n = h.graph.as_ref().map_or(0, Graph::num_nodes);
            if *v >= n {
                Err(DataError::schema(line, format!("`node` {v} out of range for shared graph of {n} nodes")))
            } else {
                Ok(())
            }
        }
        (Subject::Graph(_), TaskKind::Node) => Err(DataError::schema(line, "missing field `node`")),
        (Subject::Node(_), TaskKind::Graph) => Err(DataError::schema(line, "missing field `n`")),
    }
}

/// Serialize a bundle to JSON Lines text.
pub fn to_jsonl(bundle: &DatasetBundle) -> String {
    let h = &bundle.header;
    let header = HeaderRecord {
        p: h.p,
        q: h.q,
        num_classes: h.num_classes,
        task: h.task,
        domain: h.domain.clone(),
        envs: h.envs.clone(),
        shift: h.shift,
        graph: h.graph.as_ref().map(GraphRecord::from_graph),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in &bundle.samples {
        let (node, graph) = match &s.subject {
            Subject::Graph(g) => (None, Some(GraphRecord::from_graph(g))),
            Subject::Node(v) => (Some(*v), None),
        };
        let rec = SampleRecord {
            node,
            graph,
            y: s.label.clone(),
            env: s.env,
            split: s.split,
            meta: s.meta.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("sample serializes"));
        out.push('\n');
    }
    out
}

fn classify(line: usize, e: serde_json::Error) -> DataError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => DataError::schema(line, e.to_string()),
        _ => DataError::Parse { line, msg: e.to_string() },
    }
}

/// Parse JSON Lines text into a validated bundle.
pub fn from_jsonl<R: BufRead>(reader: R, origin: &Path) -> Result<DatasetBundle, DataError> {
    let mut header: Option<BundleHeader> = None;
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: origin.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match &header {
            None => {
                let rec: HeaderRecord = serde_json::from_str(&line).map_err(|e| classify(lineno, e))?;
                let graph = match rec.graph {
                    Some(g) => Some(g.into_graph().map_err(|m| DataError::schema(lineno, m))?),
                    None => None,
                };
                let h = BundleHeader {
                    p: rec.p,
                    q: rec.q,
                    num_classes: rec.num_classes,
                    task: rec.task,
                    shift: rec.shift,
                    domain: rec.domain,
                    envs: rec.envs,
                    graph,
                };
                validate_header(&h, lineno)?;
                header = Some(h);
            }
            Some(h) => {
                let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| classify(lineno, e))?;
                let subject = match (rec.node, rec.graph) {
                    (Some(v), None) => Subject::Node(v),
                    (None, Some(g)) => Subject::Graph(g.into_graph().map_err(|m| DataError::schema(lineno, m))?),
                    (None, None) => {
                        let missing = if h.task == TaskKind::Node { "node" } else { "n" };
                        return Err(DataError::schema(lineno, format!("missing field `{missing}`")));
                    }
                    (Some(_), Some(_)) => return Err(DataError::schema(lineno, "sample has both `node` and `n`")),
                };
                let s = LabeledSample {
                    subject,
                    label: rec.y,
                    env: rec.env,
                    split: rec.split,
                    meta: rec.meta,
                };
                validate_sample(h, &s, lineno)?;
                samples.push(s);
            }
        }
    }
    let header = header.ok_or_else(|| DataError::Empty(origin.to_path_buf()))?;
    Ok(DatasetBundle { header, samples })
}

fn data_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DATA_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Read a bundle from a `data.jsonl` file or a directory containing one.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetBundle, DataError> {
    let path = data_path(path.as_ref());
    let f = fs::File::open(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    from_jsonl(BufReader::new(f), &path)
}

/// Write `data.jsonl` into `dir`, creating it if needed.
pub fn write_dataset(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<PathBuf, DataError> {
    let dir = dir.as_ref();
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let path = dir.join(DATA_FILE);
    let mut f = fs::File::create(&path).map_err(io)?;
    f.write_all(to_jsonl(bundle).as_bytes()).map_err(io)?;
    Ok(path)
}
