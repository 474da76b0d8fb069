//! Deterministic generators for the synthetic OOD benchmarks.
//!
//! Graph-level tasks build each graph as a base graph plus one motif joined
//! by a single attachment edge; the label is the motif kind. The node-level
//! task attaches house motifs to a preferential-attachment base and labels
//! nodes by their role.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    one_hot, BundleHeader, DatasetBundle, EnvInfo, LabeledSample, MotifInstance, SampleMeta, ShiftDomain, Split,
    Subject, TaskKind,
};
use crate::graph::Graph;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("split ranges overlap along the shift domain: {0}")]
    OverlappingRanges(String),
    #[error("palette has {have} colors, need at least {need}")]
    PaletteTooSmall { have: usize, need: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenTask {
    MotifSize,
    MotifBase,
    ColorGraph,
    CbasNode,
}

impl std::str::FromStr for GenTask {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "motif-size" => Ok(GenTask::MotifSize),
            "motif-base" => Ok(GenTask::MotifBase),
            "color-graph" => Ok(GenTask::ColorGraph),
            "cbas-node" => Ok(GenTask::CbasNode),
            other => Err(ConfigError::Invalid(format!("unknown task {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Wheel,
    Tree,
    Ladder,
}

impl BaseKind {
    pub const ALL: [BaseKind; 3] = [BaseKind::Wheel, BaseKind::Tree, BaseKind::Ladder];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Wheel => "wheel",
            BaseKind::Tree => "tree",
            BaseKind::Ladder => "ladder",
        }
    }

    /// Edges of a base graph with `n` nodes.
    pub fn edges<R: Rng>(self, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        match self {
            BaseKind::Wheel => {
                let rim = n - 1;
                let mut e: Vec<(usize, usize)> = (1..n).map(|v| (0, v)).collect();
                e.extend((0..rim).map(|i| (1 + i, 1 + (i + 1) % rim)));
                e
            }
            BaseKind::Tree => (1..n).map(|v| (rng.random_range(0..v), v)).collect(),
            BaseKind::Ladder => {
                let rungs = n / 2;
                let mut e = Vec::new();
                for i in 0..rungs {
                    e.push((2 * i, 2 * i + 1));
                    if i + 1 < rungs {
                        e.push((2 * i, 2 * i + 2));
                        e.push((2 * i + 1, 2 * i + 3));
                    }
                }
                if n % 2 == 1 {
                    e.push((n - 2, n - 1));
                }
                e
            }
        }
    }

    pub fn min_nodes(self) -> usize {
        match self {
            BaseKind::Wheel | BaseKind::Ladder => 4,
            BaseKind::Tree => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotifKind {
    House,
    Cycle,
    Crane,
}

impl MotifKind {
    pub const ALL: [MotifKind; 3] = [MotifKind::House, MotifKind::Cycle, MotifKind::Crane];
    pub const SIZE: usize = 5;

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MotifKind::House => "house",
            MotifKind::Cycle => "cycle",
            MotifKind::Crane => "crane",
        }
    }

    /// Template edges over nodes `0..5`. House: square `0-1-2-3` with roof
    /// `4` over `0,1`. Crane: two triangles sharing node `2`.
    pub fn template(self) -> &'static [(usize, usize)] {
        match self {
            MotifKind::House => &[(0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (1, 4)],
            MotifKind::Cycle => &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)],
            MotifKind::Crane => &[(0, 1), (0, 2), (1, 2), (2, 3), (2, 4), (3, 4)],
        }
    }
}

/// Node roles inside a house motif, used as node-level labels.
pub fn house_role(template_node: usize) -> usize {
    match template_node {
        4 => 1,
        0 | 1 => 2,
        _ => 3,
    }
}

/// Whether the subgraph induced on `nodes` (in any order) is isomorphic to
/// the template of `kind`, by brute force over all node orderings.
pub fn matches_motif(g: &Graph, nodes: &[usize], kind: MotifKind) -> bool {
    if nodes.len() != MotifKind::SIZE || nodes.iter().any(|&v| v >= g.num_nodes()) {
        return false;
    }
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != MotifKind::SIZE {
        return false;
    }
    let template = kind.template();
    let induced = (0..5)
        .flat_map(|a| (a + 1..5).map(move |b| (a, b)))
        .filter(|&(a, b)| g.has_edge(nodes[a], nodes[b]))
        .count();
    if induced != template.len() {
        return false;
    }
    let mut perm = [0usize, 1, 2, 3, 4];
    loop {
        if template.iter().all(|&(a, b)| g.has_edge(nodes[perm[a]], nodes[perm[b]])) {
            return true;
        }
        if !next_permutation(&mut perm) {
            return false;
        }
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (0..p.len().saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..p.len()).rev().find(|&j| p[j] > p[i]).unwrap();
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Label implied by the intact motifs recorded in `meta`: the fraction of
/// each kind among them. `None` when no recorded motif survives intact.
pub fn motif_oracle_label(g: &Graph, meta: &SampleMeta, num_classes: usize) -> Option<Vec<f64>> {
    let mut counts = vec![0.0; num_classes];
    let mut total = 0.0;
    for m in &meta.motifs {
        let Some(kind) = MotifKind::from_id(m.kind) else { continue };
        if m.kind < num_classes && matches_motif(g, &m.nodes, kind) {
            counts[m.kind] += 1.0;
            total += 1.0;
        }
    }
    (total > 0.0).then(|| counts.into_iter().map(|c| c / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Color {
    pub name: String,
    pub rgb: [f64; 3],
}

fn color(name: &str, rgb: [f64; 3]) -> Color {
    Color {
        name: name.into(),
        rgb,
    }
}

pub fn default_palette() -> Vec<Color> {
    vec![
        color("red", [1.0, 0.0, 0.0]),
        color("green", [0.0, 1.0, 0.0]),
        color("blue", [0.0, 0.0, 1.0]),
        color("yellow", [1.0, 1.0, 0.0]),
        color("purple", [1.0, 0.0, 1.0]),
        color("white", [1.0, 1.0, 1.0]),
        color("cyan", [0.0, 1.0, 1.0]),
    ]
}

/// Inclusive total node-count interval.
pub type SizeRange = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: GenTask,
    /// Samples for train, id_val, id_test, ood_val, ood_test.
    pub counts: [usize; 5],
    pub seed: u64,
    /// Total graph sizes (base plus motif) for training-distribution splits.
    pub train_sizes: SizeRange,
    pub ood_val_sizes: SizeRange,
    pub ood_test_sizes: SizeRange,
    /// Number of equal-width size bins forming the size-shift environments.
    pub size_envs: usize,
    pub train_bases: Vec<BaseKind>,
    pub ood_bases: Vec<BaseKind>,
    pub motif_kinds: Vec<MotifKind>,
    /// The first `train_colors` entries color training environments; the
    /// next two color OOD-val and OOD-test.
    pub palette: Vec<Color>,
    pub train_colors: usize,
    pub noise: f64,
    pub cbas_base_nodes: usize,
    pub cbas_houses: usize,
}

impl GenConfig {
    pub fn new(task: GenTask, seed: u64) -> Self {
        let (train_sizes, ood_val_sizes, ood_test_sizes, train_bases, ood_bases) = match task {
            GenTask::MotifSize => (
                (15, 40),
                (45, 55),
                (60, 90),
                BaseKind::ALL.to_vec(),
                BaseKind::ALL.to_vec(),
            ),
            GenTask::MotifBase => (
                (13, 15),
                (13, 15),
                (13, 15),
                vec![BaseKind::Wheel, BaseKind::Tree],
                vec![BaseKind::Ladder],
            ),
            GenTask::ColorGraph | GenTask::CbasNode => (
                (12, 20),
                (12, 20),
                (12, 20),
                BaseKind::ALL.to_vec(),
                BaseKind::ALL.to_vec(),
            ),
        };
        GenConfig {
            task,
            counts: [300, 100, 100, 100, 100],
            seed,
            train_sizes,
            ood_val_sizes,
            ood_test_sizes,
            size_envs: 3,
            train_bases,
            ood_bases,
            motif_kinds: MotifKind::ALL.to_vec(),
            palette: default_palette(),
            train_colors: 5,
            noise: 0.05,
            cbas_base_nodes: 150,
            cbas_houses: 40,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let disjoint = |a: SizeRange, b: SizeRange| a.1 < b.0 || b.1 < a.0;
        let ranges = [self.train_sizes, self.ood_val_sizes, self.ood_test_sizes];
        if ranges.iter().any(|r| r.0 > r.1 || r.0 < MotifKind::SIZE + 1) {
            return Err(ConfigError::Invalid("size ranges must be ordered and exceed the motif size".into()));
        }
        if self.motif_kinds.len() < 2 {
            return Err(ConfigError::Invalid("need at least two motif kinds".into()));
        }
        if self.counts[0] == 0 {
            return Err(ConfigError::Invalid("training split must be nonempty".into()));
        }
        match self.task {
            GenTask::MotifSize => {
                if !disjoint(self.train_sizes, self.ood_val_sizes) || !disjoint(self.train_sizes, self.ood_test_sizes) {
                    return Err(ConfigError::OverlappingRanges(format!(
                        "train {:?} vs ood-val {:?} / ood-test {:?}",
                        self.train_sizes, self.ood_val_sizes, self.ood_test_sizes
                    )));
                }
                let width = self.train_sizes.1 - self.train_sizes.0 + 1;
                if self.size_envs == 0 || self.size_envs > width {
                    return Err(ConfigError::Invalid("size_envs must be between 1 and the train range width".into()));
                }
            }
            GenTask::MotifBase => {
                if self.train_bases.is_empty() || self.ood_bases.is_empty() {
                    return Err(ConfigError::Invalid("base lists must be nonempty".into()));
                }
                if let Some(b) = self.ood_bases.iter().find(|b| self.train_bases.contains(b)) {
                    return Err(ConfigError::OverlappingRanges(format!("base {} in train and OOD", b.name())));
                }
            }
            GenTask::ColorGraph | GenTask::CbasNode => {
                let need = self.train_colors + 2;
                if self.palette.len() < need {
                    return Err(ConfigError::PaletteTooSmall {
                        have: self.palette.len(),
                        need,
                    });
                }
                if self.train_colors == 0 {
                    return Err(ConfigError::Invalid("need at least one training color".into()));
                }
                if !(self.noise >= 0.0) {
                    return Err(ConfigError::Invalid("noise must be nonnegative".into()));
                }
            }
        }
        let min_base = self.train_bases.iter().chain(&self.ood_bases).map(|b| b.min_nodes()).max().unwrap_or(1);
        if ranges.iter().any(|r| r.0 < min_base + MotifKind::SIZE) {
            return Err(ConfigError::Invalid("size range too small for the chosen bases".into()));
        }
        if self.task == GenTask::CbasNode && (self.cbas_base_nodes < 2 || self.cbas_houses == 0) {
            return Err(ConfigError::Invalid("cbas needs at least 2 base nodes and one house".into()));
        }
        Ok(())
    }
}

/// Feature domain of the base indicator column.
pub const BASE_FEATURE_DOMAIN: (f64, f64) = (0.0, 2.0);
/// Feature domain of each color channel.
pub const COLOR_DOMAIN: (f64, f64) = (-0.5, 1.5);

pub fn generate(cfg: &GenConfig) -> Result<DatasetBundle, ConfigError> {
    match cfg.task {
        GenTask::MotifSize | GenTask::MotifBase => gen_motif_dataset(cfg),
        GenTask::ColorGraph => gen_color_dataset(cfg),
        GenTask::CbasNode => gen_cbas_dataset(cfg),
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct MotifGraph {
    graph: Graph,
    motif: MotifKind,
    meta: SampleMeta,
}

/// Base of `base_nodes` nodes, then the motif, joined by one edge.
fn build_motif_graph<R: Rng>(base: BaseKind, base_nodes: usize, motif: MotifKind, rng: &mut R) -> MotifGraph {
    let mut edges = base.edges(base_nodes, rng);
    edges.extend(motif.template().iter().map(|&(a, b)| (base_nodes + a, base_nodes + b)));
    let anchor = rng.random_range(0..base_nodes);
    let motif_node = base_nodes + rng.random_range(0..MotifKind::SIZE);
    edges.push((anchor, motif_node));
    let n = base_nodes + MotifKind::SIZE;
    let graph = Graph::unit_features(n, edges).expect("generator builds valid graphs");
    let nodes: Vec<usize> = (base_nodes..n).collect();
    MotifGraph {
        graph,
        motif,
        meta: SampleMeta {
            motif_nodes: nodes.clone(),
            motifs: vec![MotifInstance {
                kind: motif.id(),
                nodes,
            }],
            bridge_edges: vec![(anchor, motif_node)],
            base_kinds: vec![base.id()],
            ..Default::default()
        },
    }
}

fn split_of(counts: &[usize; 5], index: usize) -> Split {
    let mut acc = 0;
    for (k, &c) in counts.iter().enumerate() {
        acc += c;
        if index < acc {
            return Split::ALL[k];
        }
    }
    unreachable!("index beyond split counts")
}

fn size_bin(size: usize, range: SizeRange, bins: usize) -> usize {
    let width = range.1 - range.0 + 1;
    ((size - range.0) * bins / width).min(bins - 1)
}

pub fn gen_motif_dataset(cfg: &GenConfig) -> Result<DatasetBundle, ConfigError> {
    if !matches!(cfg.task, GenTask::MotifSize | GenTask::MotifBase) {
        return Err(ConfigError::Invalid("motif generator needs motif-size or motif-base".into()));
    }
    cfg.validate()?;
    let mut envs = Vec::new();
    let shift = match cfg.task {
        GenTask::MotifSize => {
            let width = cfg.train_sizes.1 - cfg.train_sizes.0 + 1;
            for b in 0..cfg.size_envs {
                let lo = cfg.train_sizes.0 + (b * width).div_ceil(cfg.size_envs);
                let hi = cfg.train_sizes.0 + ((b + 1) * width).div_ceil(cfg.size_envs) - 1;
                envs.push(format!("size-{lo}-{hi}"));
            }
            envs.push(format!("size-{}-{}", cfg.ood_val_sizes.0, cfg.ood_val_sizes.1));
            envs.push(format!("size-{}-{}", cfg.ood_test_sizes.0, cfg.ood_test_sizes.1));
            ShiftDomain::Size
        }
        _ => {
            envs.extend(cfg.train_bases.iter().map(|b| format!("base-{}", b.name())));
            envs.extend(cfg.ood_bases.iter().map(|b| format!("base-{}", b.name())));
            ShiftDomain::Base
        }
    };
    let total: usize = cfg.counts.iter().sum();
    let mut samples = Vec::with_capacity(total);
    for index in 0..total {
        let split = split_of(&cfg.counts, index);
        let mut rng = sample_rng(cfg.seed, index as u64);
        let ood = matches!(split, Split::OodVal | Split::OodTest);
        let range = match split {
            Split::OodVal => cfg.ood_val_sizes,
            Split::OodTest => cfg.ood_test_sizes,
            _ => cfg.train_sizes,
        };
        let bases = if ood { &cfg.ood_bases } else { &cfg.train_bases };
        let base_idx = rng.random_range(0..bases.len());
        let base = bases[base_idx];
        let motif = cfg.motif_kinds[rng.random_range(0..cfg.motif_kinds.len())];
        let size = rng.random_range(range.0..=range.1);
        let built = build_motif_graph(base, size - MotifKind::SIZE, motif, &mut rng);
        let env = match (cfg.task, split) {
            (GenTask::MotifSize, Split::OodVal) => cfg.size_envs,
            (GenTask::MotifSize, Split::OodTest) => cfg.size_envs + 1,
            (GenTask::MotifSize, _) => size_bin(size, cfg.train_sizes, cfg.size_envs),
            (_, _) if ood => cfg.train_bases.len() + base_idx,
            _ => base_idx,
        };
        samples.push(LabeledSample {
            subject: Subject::Graph(built.graph),
            label: one_hot(cfg.motif_kinds.iter().position(|&m| m == built.motif).unwrap(), cfg.motif_kinds.len()),
            env,
            split,
            meta: Some(built.meta),
        });
    }
    Ok(DatasetBundle {
        header: BundleHeader {
            p: 1,
            q: 0,
            num_classes: cfg.motif_kinds.len(),
            task: TaskKind::Graph,
            shift: Some(shift),
            domain: vec![BASE_FEATURE_DOMAIN],
            envs: registry(envs),
            graph: None,
        },
        samples,
    })
}

fn registry(names: Vec<String>) -> Vec<EnvInfo> {
    names.into_iter().enumerate().map(|(id, name)| EnvInfo { id, name }).collect()
}

/// Color index for a sample of `split`: a random training color, or the
/// dedicated OOD color.
fn color_index<R: Rng>(cfg: &GenConfig, split: Split, rng: &mut R) -> usize {
    match split {
        Split::OodVal => cfg.train_colors,
        Split::OodTest => cfg.train_colors + 1,
        _ => rng.random_range(0..cfg.train_colors),
    }
}

fn colored_row<R: Rng>(rgb: &[f64; 3], noise: f64, rng: &mut R) -> [f64; 4] {
    let mut row = [1.0, rgb[0], rgb[1], rgb[2]];
    if noise > 0.0 {
        let jitter = Normal::new(0.0, noise).expect("finite noise");
        for c in &mut row[1..] {
            *c = (*c + jitter.sample(rng)).clamp(COLOR_DOMAIN.0, COLOR_DOMAIN.1 - 1e-9);
        }
    }
    row
}

fn color_header(cfg: &GenConfig, p_task: TaskKind, num_classes: usize, graph: Option<Graph>) -> BundleHeader {
    let names = cfg.palette[..cfg.train_colors + 2]
        .iter()
        .map(|c| format!("color-{}", c.name))
        .collect();
    BundleHeader {
        p: 4,
        q: 0,
        num_classes,
        task: p_task,
        shift: Some(ShiftDomain::Color),
        domain: vec![BASE_FEATURE_DOMAIN, COLOR_DOMAIN, COLOR_DOMAIN, COLOR_DOMAIN],
        envs: registry(names),
        graph,
    }
}

pub fn gen_color_dataset(cfg: &GenConfig) -> Result<DatasetBundle, ConfigError> {
    if cfg.task != GenTask::ColorGraph {
        return Err(ConfigError::Invalid("color generator needs color-graph".into()));
    }
    cfg.validate()?;
    let total: usize = cfg.counts.iter().sum();
    let mut samples = Vec::with_capacity(total);
    for index in 0..total {
        let split = split_of(&cfg.counts, index);
        let mut rng = sample_rng(cfg.seed, index as u64);
        let base = cfg.train_bases[rng.random_range(0..cfg.train_bases.len())];
        let motif = cfg.motif_kinds[rng.random_range(0..cfg.motif_kinds.len())];
        let size = rng.random_range(cfg.train_sizes.0..=cfg.train_sizes.1);
        let built = build_motif_graph(base, size - MotifKind::SIZE, motif, &mut rng);
        let env = color_index(cfg, split, &mut rng);
        let rgb = cfg.palette[env].rgb;
        let n = built.graph.num_nodes();
        let mut x = Array2::zeros((n, 4));
        for mut row in x.rows_mut() {
            let r = colored_row(&rgb, cfg.noise, &mut rng);
            row.iter_mut().zip(r).for_each(|(d, s)| *d = s);
        }
        let graph = built.graph.with_node_features(x).expect("row count preserved");
        samples.push(LabeledSample {
            subject: Subject::Graph(graph),
            label: one_hot(cfg.motif_kinds.iter().position(|&m| m == built.motif).unwrap(), cfg.motif_kinds.len()),
            env,
            split,
            meta: Some(built.meta),
        });
    }
    Ok(DatasetBundle {
        header: color_header(cfg, TaskKind::Graph, cfg.motif_kinds.len(), None),
        samples,
    })
}

/// Number of node roles in the node-level task (base, top, middle, bottom).
pub const CBAS_ROLES: usize = 4;

/// Fractions of nodes held out for OOD-val and OOD-test; the remainder is
/// split 70/15/15 into train, ID-val and ID-test.
pub const CBAS_OOD_FRACTION: f64 = 0.15;

pub fn gen_cbas_dataset(cfg: &GenConfig) -> Result<DatasetBundle, ConfigError> {
    if cfg.task != GenTask::CbasNode {
        return Err(ConfigError::Invalid("cbas generator needs cbas-node".into()));
    }
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, 0);
    let nb = cfg.cbas_base_nodes;
    // Preferential attachment with one edge per new node, seeded by an edge.
    let mut edges = vec![(0usize, 1usize)];
    let mut endpoints = vec![0usize, 1];
    for v in 2..nb {
        let u = endpoints[rng.random_range(0..endpoints.len())];
        edges.push((u, v));
        endpoints.push(u);
        endpoints.push(v);
    }
    let mut roles = vec![0usize; nb];
    for h in 0..cfg.cbas_houses {
        let o = nb + h * MotifKind::SIZE;
        edges.extend(MotifKind::House.template().iter().map(|&(a, b)| (o + a, o + b)));
        edges.push((rng.random_range(0..nb), o + 2));
        roles.extend((0..MotifKind::SIZE).map(house_role));
    }
    let n = roles.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_ood = ((n as f64) * CBAS_OOD_FRACTION).round() as usize;
    let rest = n - 2 * n_ood;
    let n_train = ((rest as f64) * 0.7).round() as usize;
    let n_idval = ((rest as f64) * 0.15).round() as usize;
    let mut split_of_node = vec![Split::Train; n];
    for (rank, &v) in order.iter().enumerate() {
        split_of_node[v] = if rank < n_ood {
            Split::OodVal
        } else if rank < 2 * n_ood {
            Split::OodTest
        } else if rank < 2 * n_ood + n_train {
            Split::Train
        } else if rank < 2 * n_ood + n_train + n_idval {
            Split::IdVal
        } else {
            Split::IdTest
        };
    }

    let mut x = Array2::zeros((n, 4));
    let mut env_of = vec![0usize; n];
    for v in 0..n {
        let env = color_index(cfg, split_of_node[v], &mut rng);
        env_of[v] = env;
        let r = colored_row(&cfg.palette[env].rgb, cfg.noise, &mut rng);
        x.row_mut(v).iter_mut().zip(r).for_each(|(d, s)| *d = s);
    }
    let graph = Graph::new(n, edges, x, None).expect("generator builds valid graphs");
    let samples = (0..n)
        .map(|v| LabeledSample {
            subject: Subject::Node(v),
            label: one_hot(roles[v], CBAS_ROLES),
            env: env_of[v],
            split: split_of_node[v],
            meta: None,
        })
        .collect();
    Ok(DatasetBundle {
        header: color_header(cfg, TaskKind::Node, CBAS_ROLES, Some(graph)),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_permutation_enumerates_all_orders() {
        let mut p = [0, 1, 2, 3, 4];
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 120);
    }

    #[test]
    fn templates_are_pairwise_non_isomorphic() {
        for a in MotifKind::ALL {
            let g = Graph::unit_features(5, a.template().to_vec()).unwrap();
            for b in MotifKind::ALL {
                assert_eq!(matches_motif(&g, &[0, 1, 2, 3, 4], b), a == b, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn ladder_and_wheel_shapes() {
        let mut rng = sample_rng(0, 0);
        assert_eq!(BaseKind::Wheel.edges(6, &mut rng).len(), 10);
        assert_eq!(BaseKind::Ladder.edges(8, &mut rng).len(), 10);
        assert_eq!(BaseKind::Ladder.edges(9, &mut rng).len(), 11);
        assert_eq!(BaseKind::Tree.edges(9, &mut rng).len(), 8);
    }

    #[test]
    fn size_bins_cover_range() {
        assert_eq!(size_bin(15, (15, 40), 3), 0);
        assert_eq!(size_bin(40, (15, 40), 3), 2);
    }

    #[test]
    fn overlapping_size_ranges_rejected() {
        let mut cfg = GenConfig::new(GenTask::MotifSize, 1);
        cfg.ood_val_sizes = (38, 50);
        assert!(matches!(cfg.validate(), Err(ConfigError::OverlappingRanges(_))));
    }

    #[test]
    fn small_palette_rejected() {
        let mut cfg = GenConfig::new(GenTask::ColorGraph, 1);
        cfg.palette.truncate(6);
        assert_eq!(cfg.validate(), Err(ConfigError::PaletteTooSmall { have: 6, need: 7 }));
    }
}
