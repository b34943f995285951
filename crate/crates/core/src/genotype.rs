//! Discretization of architecture weights into a genotype, operation counts,
//! and the discrete network a genotype describes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvGeometry, Linear, PoolKind, ReluConvBn};
use crate::ops::{arch_softmax, node_aggregate, CandidateOp, OpKind};
use crate::params::ParamStore;
use crate::supernet::{edge_index, reduction_positions, ArchWeights, CellKind, Preprocess, NUM_NODES, STEM_MULTIPLIER};

/// Incoming edges kept per intermediate node.
pub const EDGES_PER_NODE: usize = 2;

/// Two `(operation, predecessor)` entries per intermediate node, listed node
/// by node, for each cell kind, plus the nodes concatenated into the output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<(OpKind, usize)>,
    pub reduce: Vec<(OpKind, usize)>,
    pub concat: Vec<usize>,
}

impl Genotype {
    pub fn cell(&self, kind: CellKind) -> &[(OpKind, usize)] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduce,
        }
    }

    /// Entries of intermediate node `node` (2..=5).
    pub fn node_entries(&self, kind: CellKind, node: usize) -> &[(OpKind, usize)] {
        let start = (node - 2) * EDGES_PER_NODE;
        &self.cell(kind)[start..start + EDGES_PER_NODE]
    }

    pub fn validate(&self) -> Result<()> {
        for kind in [CellKind::Normal, CellKind::Reduction] {
            let entries = self.cell(kind);
            if entries.len() != NUM_NODES * EDGES_PER_NODE {
                return Err(Error::Genotype(format!(
                    "{kind:?} cell has {} entries, expected {}",
                    entries.len(),
                    NUM_NODES * EDGES_PER_NODE
                )));
            }
            for (i, &(op, pred)) in entries.iter().enumerate() {
                let node = 2 + i / EDGES_PER_NODE;
                if op == OpKind::None {
                    return Err(Error::Genotype(format!("{kind:?} node {node} uses `none`")));
                }
                if pred >= node {
                    return Err(Error::Genotype(format!(
                        "{kind:?} node {node} reads from node {pred}, which does not precede it"
                    )));
                }
            }
        }
        let expected: Vec<usize> = (2..2 + NUM_NODES).collect();
        if self.concat != expected {
            return Err(Error::Genotype(format!("concat must be {expected:?}, got {:?}", self.concat)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}

/// Strongest non-`none` candidate of one raw row: `(op, softmax weight)`.
/// Ties go to the earlier operation.
pub fn edge_choice(raw_row: &[f64]) -> (OpKind, f64) {
    let p = arch_softmax(raw_row);
    let mut best = (OpKind::ALL[1], p[1]);
    for (&kind, &w) in OpKind::ALL.iter().zip(&p).skip(2) {
        if w > best.1 {
            best = (kind, w);
        }
    }
    best
}

fn derive_cell(raw: &[Vec<f64>]) -> Vec<(OpKind, usize)> {
    let mut entries = Vec::with_capacity(NUM_NODES * EDGES_PER_NODE);
    for node in 2..2 + NUM_NODES {
        let mut scored: Vec<(usize, OpKind, f64)> = (0..node)
            .map(|pred| {
                let (op, w) = edge_choice(&raw[edge_index(pred, node)]);
                (pred, op, w)
            })
            .collect();
        // stable sort keeps the lower predecessor first on equal scores
        scored.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut kept: Vec<(OpKind, usize)> =
            scored.iter().take(EDGES_PER_NODE).map(|&(pred, op, _)| (op, pred)).collect();
        kept.sort_by_key(|&(_, pred)| pred);
        entries.extend(kept);
    }
    entries
}

/// Keeps the two strongest incoming edges of every intermediate node, each
/// with its strongest non-`none` operation. Edge strength is the largest
/// softmaxed non-`none` weight.
pub fn derive_genotype(alpha: &ArchWeights) -> Result<Genotype> {
    alpha.validate()?;
    Ok(Genotype {
        normal: derive_cell(&alpha.normal),
        reduce: derive_cell(&alpha.reduce),
        concat: (2..2 + NUM_NODES).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpCount {
    pub normal: usize,
    pub reduce: usize,
}

/// Occurrences of `op` among the eight entries of each cell kind.
pub fn count_ops(genotype: &Genotype, op: OpKind) -> OpCount {
    let count = |cell: &[(OpKind, usize)]| cell.iter().filter(|(k, _)| *k == op).count();
    OpCount {
        normal: count(&genotype.normal),
        reduce: count(&genotype.reduce),
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteCell {
    pub kind: CellKind,
    pub pre0: Preprocess,
    pub pre1: ReluConvBn,
    /// `(predecessor, op)` in genotype order, two per node.
    pub edges: Vec<(usize, CandidateOp)>,
}

impl DiscreteCell {
    fn forward(&self, g: &mut Graph, store: &ParamStore, prev_prev: Var, prev: Var) -> Result<Var> {
        let s0 = self.pre0.forward(g, store, prev_prev)?;
        let s1 = self.pre1.forward(g, store, prev)?;
        let mut states = vec![s0, s1];
        for pair in self.edges.chunks(EDGES_PER_NODE) {
            let outs = pair
                .iter()
                .map(|(pred, op)| op.forward(g, store, states[*pred]))
                .collect::<Result<Vec<_>>>()?;
            states.push(node_aggregate(g, &outs)?);
        }
        g.concat_channel(&states[2..])
    }
}

/// The evaluation network: every edge carries exactly one operation over the
/// full channel width.
#[derive(Clone, Debug)]
pub struct DiscreteNet {
    pub genotype: Genotype,
    pub stem: Conv,
    pub cells: Vec<DiscreteCell>,
    pub head: Linear,
}

impl DiscreteNet {
    /// Reductions at the usual positions for `depth`.
    pub fn build<R: Rng + ?Sized>(
        genotype: &Genotype,
        depth: usize,
        channels: usize,
        n_classes: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build_with_reductions(genotype, depth, channels, n_classes, &reduction_positions(depth), store, rng)
    }

    pub fn build_with_reductions<R: Rng + ?Sized>(
        genotype: &Genotype,
        depth: usize,
        channels: usize,
        n_classes: usize,
        reductions: &[usize],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        genotype.validate()?;
        if depth == 0 || channels == 0 || n_classes < 2 {
            return Err(Error::invalid(
                "discrete-net",
                format!("need depth >= 1, channels >= 1, classes >= 2; got {depth}, {channels}, {n_classes}"),
            ));
        }
        let c_stem = STEM_MULTIPLIER * channels;
        let stem = Conv::new(store, rng, "stem", 3, c_stem, ConvGeometry::dense(3, 1));
        let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, channels);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(depth);
        for i in 0..depth {
            let kind = if reductions.contains(&i) {
                c *= 2;
                CellKind::Reduction
            } else {
                CellKind::Normal
            };
            let name = format!("cell{i}");
            let pre0 = Preprocess::new(store, rng, &format!("{name}.pre0"), c_pp, c, reduction_prev);
            let pre1 = ReluConvBn::new(store, rng, &format!("{name}.pre1"), c_p, c, 1, 1);
            let edges = genotype
                .cell(kind)
                .iter()
                .enumerate()
                .map(|(j, &(op, pred))| {
                    let stride = if kind == CellKind::Reduction && pred < 2 { 2 } else { 1 };
                    let ename = format!("{name}.n{}.{pred}", 2 + j / EDGES_PER_NODE);
                    (pred, CandidateOp::new(op, store, rng, &ename, c, stride))
                })
                .collect();
            cells.push(DiscreteCell { kind, pre0, pre1, edges });
            reduction_prev = kind == CellKind::Reduction;
            (c_pp, c_p) = (c_p, NUM_NODES * c);
        }
        let head = Linear::new(store, rng, "head", c_p, n_classes);
        Ok(Self { genotype: genotype.clone(), stem, cells, head })
    }

    /// Logits `(B, n_classes)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = self.stem.forward(g, store, x)?;
        let stem = g.batch_norm(s)?;
        let (mut prev_prev, mut prev) = (stem, stem);
        for cell in &self.cells {
            let out = cell.forward(g, store, prev_prev, prev)?;
            (prev_prev, prev) = (prev, out);
        }
        let pooled = g.global_pool(prev, PoolKind::Avg)?;
        let (b, c) = (g.shape(pooled)[0], g.shape(pooled)[1]);
        let flat = g.reshape(pooled, &[b, c])?;
        self.head.forward(g, store, flat)
    }
}

/// Discrete network with reductions at the usual positions.
pub fn build_discrete_network<R: Rng + ?Sized>(
    genotype: &Genotype,
    depth: usize,
    channels: usize,
    n_classes: usize,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<DiscreteNet> {
    DiscreteNet::build(genotype, depth, channels, n_classes, store, rng)
}
