//! The continuous search network: cells of 14 mixed edges stacked between a
//! convolutional stem and a pooled linear head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{apply_attention, batch_mean, channel_attention_weights, AttentionUnit, DEFAULT_REDUCTION};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvGeometry, FactorizedReduce, Linear, PoolKind, ReluConvBn};
use crate::ops::{mixed_op_full, node_aggregate, OpSpace, NUM_OPS};
use crate::partial::{partial_mixed_op, random_mask, select_channels, selected_count};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Intermediate nodes per cell.
pub const NUM_NODES: usize = 4;
/// Edges per cell: node `j` (2..=5) has predecessors `0..j`.
pub const NUM_EDGES: usize = 14;
/// Channel multiplier of the stem convolution.
pub const STEM_MULTIPLIER: usize = 3;

/// Row of the edge `pred -> node` in a 14 x 8 weight matrix.
pub fn edge_index(pred: usize, node: usize) -> usize {
    debug_assert!((2..2 + NUM_NODES).contains(&node) && pred < node);
    (node - 2) * (node + 1) / 2 + pred
}

/// All `(pred, node)` pairs in row order.
pub fn cell_edges() -> Vec<(usize, usize)> {
    (2..2 + NUM_NODES).flat_map(|j| (0..j).map(move |i| (i, j))).collect()
}

/// Cell positions that halve resolution: one third and two thirds of the
/// way through the stack.
pub fn reduction_positions(depth: usize) -> Vec<usize> {
    let mut r = vec![depth / 3, 2 * depth / 3];
    r.dedup();
    r.retain(|&p| p < depth);
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduction,
}

/// How an edge feeds its operation space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Attention re-scales the input; the top `1/K` channels by batch-mean
    /// attention enter the mixture.
    Attention,
    /// A fresh uniformly random `1/K` of the channels enters the mixture.
    Random,
    /// Every channel enters the mixture.
    Full,
}

impl SearchMode {
    pub const ALL: [SearchMode; 3] = [SearchMode::Attention, SearchMode::Random, SearchMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Attention => "attention",
            SearchMode::Random => "random",
            SearchMode::Full => "full",
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected attention, random or full)")))
    }
}

/// Raw architecture weights: one 14 x 8 matrix per cell kind, shared by
/// every cell of that kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchWeights {
    pub normal: Vec<Vec<f64>>,
    pub reduce: Vec<Vec<f64>>,
}

impl ArchWeights {
    pub fn zeros() -> Self {
        Self {
            normal: vec![vec![0.0; NUM_OPS]; NUM_EDGES],
            reduce: vec![vec![0.0; NUM_OPS]; NUM_EDGES],
        }
    }

    pub fn kind(&self, kind: CellKind) -> &[Vec<f64>] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if m.len() != NUM_EDGES || m.iter().any(|r| r.len() != NUM_OPS) {
                return Err(Error::Genotype(format!("{name} weights must be {NUM_EDGES} x {NUM_OPS}")));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Genotype(format!("{name} weights contain non-finite values")));
            }
        }
        Ok(())
    }

    fn tensor(m: &[Vec<f64>]) -> Result<Tensor> {
        Tensor::new(&[NUM_EDGES, NUM_OPS], m.concat())
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.values().chunks(NUM_OPS).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupernetSpec {
    pub depth: usize,
    pub channels: usize,
    pub n_classes: usize,
    /// Cell indices that halve resolution and double channels.
    pub reductions: Vec<usize>,
    pub mode: SearchMode,
    /// Channel proportion divisor.
    pub k: usize,
    /// Attention MLP reduction ratio.
    pub r: usize,
}

impl SupernetSpec {
    pub fn new(depth: usize, channels: usize, n_classes: usize) -> Self {
        Self {
            depth,
            channels,
            n_classes,
            reductions: reduction_positions(depth),
            mode: SearchMode::Attention,
            k: 4,
            r: DEFAULT_REDUCTION,
        }
    }

    pub fn with_mode(mut self, mode: SearchMode, k: usize) -> Self {
        self.mode = mode;
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("supernet", reason));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.channels == 0 || self.n_classes < 2 {
            return bad(format!("need channels >= 1 and classes >= 2, got {} and {}", self.channels, self.n_classes));
        }
        if self.k == 0 || self.r == 0 {
            return bad("K and r must be at least 1".into());
        }
        if let Some(p) = self.reductions.iter().find(|&&p| p >= self.depth) {
            return bad(format!("reduction position {p} outside depth {}", self.depth));
        }
        Ok(())
    }

    pub fn is_reduction(&self, cell: usize) -> bool {
        self.reductions.contains(&cell)
    }
}

/// Alignment of the older cell input.
#[derive(Clone, Debug)]
pub enum Preprocess {
    Conv(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl Preprocess {
    pub(crate) fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        reduce: bool,
    ) -> Self {
        if reduce {
            Preprocess::Reduce(FactorizedReduce::new(store, rng, name, c_in, c_out))
        } else {
            Preprocess::Conv(ReluConvBn::new(store, rng, name, c_in, c_out, 1, 1))
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Preprocess::Conv(c) => c.forward(g, store, x),
            Preprocess::Reduce(r) => r.forward(g, store, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchEdge {
    pub pred: usize,
    pub node: usize,
    pub stride: usize,
    pub channels: usize,
    pub attention: Option<AttentionUnit>,
    pub space: OpSpace,
}

impl SearchEdge {
    fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        weights: Var,
        spec: &SupernetSpec,
        rng: &mut R,
    ) -> Result<Var> {
        let row = edge_index(self.pred, self.node);
        match spec.mode {
            SearchMode::Full => mixed_op_full(g, store, x, weights, row, &self.space),
            SearchMode::Random => {
                let mask = random_mask(self.channels, spec.k, rng)?;
                partial_mixed_op(g, store, x, &mask, weights, row, &self.space)
            }
            SearchMode::Attention => {
                let unit = self.attention.as_ref().expect("attention edges carry a unit");
                let fc = channel_attention_weights(g, store, unit, x)?;
                let scaled = apply_attention(g, x, fc)?;
                let mask = select_channels(&batch_mean(g, fc), spec.k)?;
                partial_mixed_op(g, store, scaled, &mask, weights, row, &self.space)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchCell {
    pub kind: CellKind,
    pub channels: usize,
    pub pre0: Preprocess,
    pub pre1: ReluConvBn,
    pub edges: Vec<SearchEdge>,
}

impl SearchCell {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        spec: &SupernetSpec,
        c_pp: usize,
        c_p: usize,
        c: usize,
        kind: CellKind,
        reduction_prev: bool,
    ) -> Self {
        let pre0 = Preprocess::new(store, rng, &format!("{name}.pre0"), c_pp, c, reduction_prev);
        let pre1 = ReluConvBn::new(store, rng, &format!("{name}.pre1"), c_p, c, 1, 1);
        let width = match spec.mode {
            SearchMode::Full => c,
            _ => selected_count(c, spec.k),
        };
        let edges = cell_edges()
            .into_iter()
            .map(|(pred, node)| {
                let stride = if kind == CellKind::Reduction && pred < 2 { 2 } else { 1 };
                let ename = format!("{name}.e{pred}{node}");
                let attention = (spec.mode == SearchMode::Attention)
                    .then(|| AttentionUnit::new(store, rng, &format!("{ename}.att"), c, spec.r));
                let space = OpSpace::new(store, rng, &ename, width, stride);
                SearchEdge { pred, node, stride, channels: c, attention, space }
            })
            .collect();
        Self { kind, channels: c, pre0, pre1, edges }
    }

    /// Preprocessed input nodes `(s0, s1)`.
    pub fn inputs(&self, g: &mut Graph, store: &ParamStore, prev_prev: Var, prev: Var) -> Result<(Var, Var)> {
        let s0 = self.pre0.forward(g, store, prev_prev)?;
        let s1 = self.pre1.forward(g, store, prev)?;
        Ok((s0, s1))
    }

    /// The four intermediate nodes, given preprocessed inputs and the
    /// softmaxed weights of this cell's kind.
    #[allow(clippy::too_many_arguments)]
    pub fn nodes<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s0: Var,
        s1: Var,
        weights: Var,
        spec: &SupernetSpec,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let mut states = vec![s0, s1];
        for node in 2..2 + NUM_NODES {
            let outs = self
                .edges
                .iter()
                .filter(|e| e.node == node)
                .map(|e| e.forward(g, store, states[e.pred], weights, spec, rng))
                .collect::<Result<Vec<_>>>()?;
            states.push(node_aggregate(g, &outs)?);
        }
        Ok(states.split_off(2))
    }
}

#[derive(Clone, Debug)]
pub struct Supernet {
    pub spec: SupernetSpec,
    pub stem: Conv,
    pub cells: Vec<SearchCell>,
    pub head: Linear,
    pub alpha_normal: ParamId,
    pub alpha_reduce: ParamId,
}

impl Supernet {
    /// Registers every parameter in `store`. Architecture weights start at
    /// zero (uniform mixture).
    pub fn build<R: Rng + ?Sized>(spec: SupernetSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let c_stem = STEM_MULTIPLIER * spec.channels;
        let stem = Conv::new(store, rng, "stem", 3, c_stem, ConvGeometry::dense(3, 1));
        let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, spec.channels);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let kind = if spec.is_reduction(i) {
                c *= 2;
                CellKind::Reduction
            } else {
                CellKind::Normal
            };
            cells.push(SearchCell::new(store, rng, &format!("cell{i}"), &spec, c_pp, c_p, c, kind, reduction_prev));
            reduction_prev = kind == CellKind::Reduction;
            (c_pp, c_p) = (c_p, NUM_NODES * c);
        }
        let head = Linear::new(store, rng, "head", c_p, spec.n_classes);
        let alpha_normal = store.add("alpha.normal", Group::Arch, Tensor::zeros(&[NUM_EDGES, NUM_OPS]));
        let alpha_reduce = store.add("alpha.reduce", Group::Arch, Tensor::zeros(&[NUM_EDGES, NUM_OPS]));
        Ok(Self { spec, stem, cells, head, alpha_normal, alpha_reduce })
    }

    pub fn alpha(&self, kind: CellKind) -> ParamId {
        match kind {
            CellKind::Normal => self.alpha_normal,
            CellKind::Reduction => self.alpha_reduce,
        }
    }

    /// Softmaxed `(14, 8)` weights of one cell kind.
    pub fn mixing_weights(&self, g: &mut Graph, store: &ParamStore, kind: CellKind) -> Result<Var> {
        let raw = g.param(store, self.alpha(kind));
        g.softmax_lastdim(raw)
    }

    /// Stem output, used as both inputs of the first cell.
    pub fn stem_forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = self.stem.forward(g, store, x)?;
        g.batch_norm(s)
    }

    /// Logits `(B, n_classes)`. `rng` drives random channel masks and is
    /// untouched in the other modes.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, store: &ParamStore, x: Var, rng: &mut R) -> Result<Var> {
        let normal = self.mixing_weights(g, store, CellKind::Normal)?;
        let reduce = self.mixing_weights(g, store, CellKind::Reduction)?;
        let stem = self.stem_forward(g, store, x)?;
        let (mut prev_prev, mut prev) = (stem, stem);
        for cell in &self.cells {
            let w = match cell.kind {
                CellKind::Normal => normal,
                CellKind::Reduction => reduce,
            };
            let (s0, s1) = cell.inputs(g, store, prev_prev, prev)?;
            let nodes = cell.nodes(g, store, s0, s1, w, &self.spec, rng)?;
            let out = g.concat_channel(&nodes)?;
            (prev_prev, prev) = (prev, out);
        }
        let pooled = g.global_pool(prev, PoolKind::Avg)?;
        let b = g.shape(pooled)[0];
        let c = g.shape(pooled)[1];
        let flat = g.reshape(pooled, &[b, c])?;
        self.head.forward(g, store, flat)
    }

    pub fn arch_weights(&self, store: &ParamStore) -> ArchWeights {
        ArchWeights {
            normal: ArchWeights::rows(&store.get(self.alpha_normal).value),
            reduce: ArchWeights::rows(&store.get(self.alpha_reduce).value),
        }
    }

    pub fn set_arch_weights(&self, store: &mut ParamStore, alpha: &ArchWeights) -> Result<()> {
        alpha.validate()?;
        store.get_mut(self.alpha_normal).value = ArchWeights::tensor(&alpha.normal)?;
        store.get_mut(self.alpha_reduce).value = ArchWeights::tensor(&alpha.reduce)?;
        Ok(())
    }
}
