//! The unified multi-modal graph: one textual node per source token, one
//! visual node per grounded object, and inter-modal edges between a phrase's
//! tokens and the objects grounded to it. Intra-modal edges are implicit:
//! each modality is fully connected within itself.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the pre-computed region features.
pub const FEATURE_DIM: usize = 2048;

/// A noun phrase `[start, end)` and the object features grounded to it.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseGrounding {
    pub start: usize,
    pub end: usize,
    pub features: Vec<Vec<f64>>,
}

impl PhraseGrounding {
    pub fn new(start: usize, end: usize, features: Vec<Vec<f64>>) -> Self {
        PhraseGrounding {
            start,
            end,
            features,
        }
    }
}

/// How inter-modal edges are derived from groundings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeMode {
    /// Tokens of a phrase connect to that phrase's objects only.
    #[default]
    Grounded,
    /// Every token connects to every object.
    FullyConnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModalGraph {
    textual: Vec<usize>,
    feature_dim: usize,
    /// Row-major `[n_visual × feature_dim]`.
    visual: Vec<f64>,
    /// Sorted, deduplicated `(textual, visual)` pairs. Undirected: each pair
    /// is stored once.
    edges: Vec<(usize, usize)>,
}

impl MultiModalGraph {
    /// Validating constructor used by deserializers and tests.
    pub fn from_parts(
        textual: Vec<usize>,
        feature_dim: usize,
        visual: Vec<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if feature_dim == 0 || visual.len() % feature_dim != 0 {
            return Err(Error::Data(format!(
                "visual buffer of {} values is not a multiple of feature width {feature_dim}",
                visual.len()
            )));
        }
        let n_vis = visual.len() / feature_dim;
        let edges: BTreeSet<(usize, usize)> = edges.into_iter().collect();
        if let Some(&(t, o)) = edges.iter().find(|&&(t, o)| t >= textual.len() || o >= n_vis) {
            return Err(Error::Data(format!(
                "edge ({t}, {o}) out of range for {} textual / {n_vis} visual nodes",
                textual.len()
            )));
        }
        Ok(MultiModalGraph {
            textual,
            feature_dim,
            visual,
            edges: edges.into_iter().collect(),
        })
    }

    pub fn textual(&self) -> &[usize] {
        &self.textual
    }

    pub fn num_textual(&self) -> usize {
        self.textual.len()
    }

    pub fn num_visual(&self) -> usize {
        self.visual.len() / self.feature_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// All visual features, row-major.
    pub fn visual_features(&self) -> &[f64] {
        &self.visual
    }

    pub fn visual_feature(&self, j: usize) -> &[f64] {
        &self.visual[j * self.feature_dim..(j + 1) * self.feature_dim]
    }

    pub fn visual_features_mut(&mut self) -> &mut [f64] {
        &mut self.visual
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, t: usize, o: usize) -> bool {
        self.edges.binary_search(&(t, o)).is_ok()
    }

    /// Visual neighbours of textual node `t`.
    pub fn neighbors_visual(&self, t: usize) -> Result<Vec<usize>> {
        if t >= self.num_textual() {
            return Err(Error::Usage(format!(
                "textual index {t} out of range 0..{}",
                self.num_textual()
            )));
        }
        Ok(self
            .edges
            .iter()
            .filter(|e| e.0 == t)
            .map(|e| e.1)
            .collect())
    }

    /// Textual neighbours of visual node `o`.
    pub fn neighbors_textual(&self, o: usize) -> Result<Vec<usize>> {
        if o >= self.num_visual() {
            return Err(Error::Usage(format!(
                "visual index {o} out of range 0..{}",
                self.num_visual()
            )));
        }
        Ok(self
            .edges
            .iter()
            .filter(|e| e.1 == o)
            .map(|e| e.0)
            .collect())
    }

    /// Adds a single zero-feature visual node with no inter-modal edges when
    /// the graph has no objects, emulating the zero-vector fallback for
    /// sentences without detected nouns.
    pub fn with_zero_object(mut self) -> Self {
        if self.num_visual() == 0 {
            self.visual = vec![0.0; self.feature_dim];
        }
        self
    }

    /// Reorders visual nodes so that new node `k` is old node `perm[k]`,
    /// relabelling edges accordingly.
    pub fn permute_visual(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_visual();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Usage(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let visual = perm
            .iter()
            .flat_map(|&old| self.visual_feature(old).iter().copied())
            .collect();
        MultiModalGraph::from_parts(
            self.textual.clone(),
            self.feature_dim,
            visual,
            self.edges.iter().map(|&(t, o)| (t, inverse[o])),
        )
    }
}

/// Builds the grounded graph with the standard 2048-wide features.
pub fn build_graph(tokens: &[usize], groundings: &[PhraseGrounding]) -> Result<MultiModalGraph> {
    build_graph_with(tokens, groundings, FEATURE_DIM, EdgeMode::Grounded)
}

/// Same nodes as [`build_graph`], but with the full bipartite edge set.
pub fn build_fully_connected_graph(
    tokens: &[usize],
    groundings: &[PhraseGrounding],
) -> Result<MultiModalGraph> {
    build_graph_with(tokens, groundings, FEATURE_DIM, EdgeMode::FullyConnected)
}

pub fn build_graph_with(
    tokens: &[usize],
    groundings: &[PhraseGrounding],
    feature_dim: usize,
    mode: EdgeMode,
) -> Result<MultiModalGraph> {
    let n = tokens.len();
    let mut visual = Vec::new();
    let mut edges = BTreeSet::new();
    let mut obj = 0;
    for (k, g) in groundings.iter().enumerate() {
        if g.start >= g.end || g.end > n {
            return Err(Error::Data(format!(
                "grounding {k}: span [{}, {}) invalid for {n} tokens",
                g.start, g.end
            )));
        }
        for (f, feat) in g.features.iter().enumerate() {
            if feat.len() != feature_dim {
                return Err(Error::Data(format!(
                    "grounding {k}, object {f}: feature length {} != {feature_dim}",
                    feat.len()
                )));
            }
            visual.extend_from_slice(feat);
            if mode == EdgeMode::Grounded {
                edges.extend((g.start..g.end).map(|t| (t, obj)));
            }
            obj += 1;
        }
    }
    if mode == EdgeMode::FullyConnected {
        edges.extend((0..n).flat_map(|t| (0..obj).map(move |o| (t, o))));
    }
    MultiModalGraph::from_parts(tokens.to_vec(), feature_dim, visual, edges)
}

/// A training or evaluation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub graph: MultiModalGraph,
    /// Target ids wrapped as `BOS … EOS`.
    pub target: Vec<usize>,
}
