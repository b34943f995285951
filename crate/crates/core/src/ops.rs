//! The candidate operation space and the weighted mixture over it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{DilConv, FactorizedReduce, PoolKind, SepConv};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// The eight candidates. Declaration order is the column order of the
/// architecture weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "maxpool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avgpool_3x3")]
    AvgPool3x3,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "sepconv_3x3")]
    SepConv3x3,
    #[serde(rename = "dilconv_3x3")]
    DilConv3x3,
    #[serde(rename = "sepconv_5x5")]
    SepConv5x5,
    #[serde(rename = "dilconv_5x5")]
    DilConv5x5,
}

pub const NUM_OPS: usize = 8;

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::None,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SkipConnect,
        OpKind::SepConv3x3,
        OpKind::DilConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv5x5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::MaxPool3x3 => "maxpool_3x3",
            OpKind::AvgPool3x3 => "avgpool_3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::SepConv3x3 => "sepconv_3x3",
            OpKind::DilConv3x3 => "dilconv_3x3",
            OpKind::SepConv5x5 => "sepconv_5x5",
            OpKind::DilConv5x5 => "dilconv_5x5",
        }
    }

    /// Candidates without trainable weights.
    pub fn is_weight_free(self) -> bool {
        matches!(self, OpKind::None | OpKind::MaxPool3x3 | OpKind::AvgPool3x3 | OpKind::SkipConnect)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Genotype(format!("unknown operation `{s}`")))
    }
}

/// An instantiated candidate operation for a fixed width and stride.
#[derive(Clone, Debug)]
pub enum CandidateOp {
    Zero { stride: usize },
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Identity,
    Reduce(FactorizedReduce),
    Sep(SepConv),
    Dil(DilConv),
}

impl CandidateOp {
    pub fn new<R: Rng + ?Sized>(
        kind: OpKind,
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        stride: usize,
    ) -> Self {
        let name = format!("{name}.{}", kind.name());
        match kind {
            OpKind::None => CandidateOp::Zero { stride },
            OpKind::MaxPool3x3 => CandidateOp::MaxPool { stride },
            OpKind::AvgPool3x3 => CandidateOp::AvgPool { stride },
            OpKind::SkipConnect if stride == 1 => CandidateOp::Identity,
            OpKind::SkipConnect => {
                CandidateOp::Reduce(FactorizedReduce::new(store, rng, &name, channels, channels))
            }
            OpKind::SepConv3x3 => CandidateOp::Sep(SepConv::new(store, rng, &name, channels, 3, stride)),
            OpKind::SepConv5x5 => CandidateOp::Sep(SepConv::new(store, rng, &name, channels, 5, stride)),
            OpKind::DilConv3x3 => CandidateOp::Dil(DilConv::new(store, rng, &name, channels, 3, stride)),
            OpKind::DilConv5x5 => CandidateOp::Dil(DilConv::new(store, rng, &name, channels, 5, stride)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            CandidateOp::Zero { stride } => {
                let [b, c, h, w] = g.value(x).dims4("none")?;
                let s = *stride;
                Ok(g.constant(Tensor::zeros(&[b, c, (h - 1) / s + 1, (w - 1) / s + 1])))
            }
            CandidateOp::MaxPool { stride } => g.pool2d(x, PoolKind::Max, *stride),
            CandidateOp::AvgPool { stride } => g.pool2d(x, PoolKind::Avg, *stride),
            CandidateOp::Identity => Ok(x),
            CandidateOp::Reduce(r) => r.forward(g, store, x),
            CandidateOp::Sep(s) => s.forward(g, store, x),
            CandidateOp::Dil(d) => d.forward(g, store, x),
        }
    }
}

/// The eight candidates of one edge, all built for the same width.
#[derive(Clone, Debug)]
pub struct OpSpace {
    pub channels: usize,
    pub stride: usize,
    pub ops: Vec<CandidateOp>,
}

impl OpSpace {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        stride: usize,
    ) -> Self {
        let ops = OpKind::ALL
            .iter()
            .map(|&k| CandidateOp::new(k, store, rng, name, channels, stride))
            .collect();
        Self { channels, stride, ops }
    }

    /// `sum_k w[row, k] o_k(x)`. Every float allocated here is added to the
    /// graph's op-space counter.
    pub fn mix(&self, g: &mut Graph, store: &ParamStore, x: Var, weights: Var, row: usize) -> Result<Var> {
        let c = g.value(x).dims4("mixed-op")?[1];
        if c != self.channels {
            return Err(Error::invalid(
                "mixed-op",
                format!("op space built for {} channels, input has {c}", self.channels),
            ));
        }
        check_normalized(g.value(weights).values(), row)?;
        g.set_counting(true);
        let mixed = (|| {
            let outs = self
                .ops
                .iter()
                .map(|op| op.forward(g, store, x))
                .collect::<Result<Vec<_>>>()?;
            g.weighted_sum(&outs, weights, row * NUM_OPS)
        })();
        g.set_counting(false);
        mixed
    }
}

fn check_normalized(weights: &[f64], row: usize) -> Result<()> {
    let r = weights
        .get(row * NUM_OPS..(row + 1) * NUM_OPS)
        .ok_or_else(|| Error::invalid("mixed-op", format!("no weight row {row}")))?;
    let total: f64 = r.iter().sum();
    if (total - 1.0).abs() > 1e-9 || r.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid("mixed-op", format!("weight row {row} is not normalized (sum {total})")));
    }
    Ok(())
}

/// Softmax of one raw row of architecture weights.
pub fn arch_softmax(raw_row: &[f64]) -> Vec<f64> {
    softmax(raw_row)
}

/// Full mixture over all channels: `sum_k alpha_k o_k(x)`.
pub fn mixed_op_full(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    weights: Var,
    row: usize,
    space: &OpSpace,
) -> Result<Var> {
    space.mix(g, store, x, weights, row)
}

/// Elementwise sum of all incoming edge outputs.
pub fn node_aggregate(g: &mut Graph, edge_outputs: &[Var]) -> Result<Var> {
    if edge_outputs.is_empty() {
        return Err(Error::EmptyInput("node-aggregate"));
    }
    g.add_n(edge_outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn softmaxed(g: &mut Graph, raw: &[f64]) -> Var {
        let r = g.constant(Tensor::new(&[1, NUM_OPS], raw.to_vec()).unwrap());
        g.softmax_lastdim(r).unwrap()
    }

    fn one_hot(kind: OpKind) -> Vec<f64> {
        let mut v = vec![f64::NEG_INFINITY; NUM_OPS];
        v[kind.index()] = 0.0;
        v
    }

    fn space(channels: usize, stride: usize) -> (ParamStore, OpSpace) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = OpSpace::new(&mut store, &mut rng, "e", channels, stride);
        (store, s)
    }

    #[test]
    fn names_round_trip_and_order_is_fixed() {
        let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
        assert_eq!(
            names,
            ["none", "maxpool_3x3", "avgpool_3x3", "skip_connect", "sepconv_3x3", "dilconv_3x3", "sepconv_5x5", "dilconv_5x5"]
        );
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("conv_7x7".parse::<OpKind>().is_err());
    }

    #[test]
    fn arch_softmax_examples() {
        assert!(arch_softmax(&[0.0; 8]).iter().all(|&w| (w - 0.125).abs() < 1e-15));
        let mut row = vec![0.0; 8];
        row[0] = 7f64.ln();
        let w = arch_softmax(&row);
        assert!((w[0] - 0.5).abs() < 1e-15);
        for &v in &w[1..] {
            assert!((v - 1.0 / 14.0).abs() < 1e-15);
        }
        let shifted: Vec<f64> = row.iter().map(|v| v - 3.0).collect();
        let ws = arch_softmax(&shifted);
        assert!(w.iter().zip(&ws).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn one_hot_skip_is_identity_and_none_is_zero() {
        let (store, s) = space(3, 1);
        let x = Tensor::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let skip = softmaxed(&mut g, &one_hot(OpKind::SkipConnect));
        let y = mixed_op_full(&mut g, &store, xv, skip, 0, &s).unwrap();
        assert_eq!(g.value(y), &x);
        let none = softmaxed(&mut g, &one_hot(OpKind::None));
        let z = mixed_op_full(&mut g, &store, xv, none, 0, &s).unwrap();
        assert_eq!(g.shape(z), x.shape());
        assert!(g.value(z).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_skip_half_none_halves_input() {
        let (store, s) = space(3, 1);
        let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut raw = vec![f64::NEG_INFINITY; NUM_OPS];
        raw[OpKind::None.index()] = 0.0;
        raw[OpKind::SkipConnect.index()] = 0.0;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = softmaxed(&mut g, &raw);
        let y = mixed_op_full(&mut g, &store, xv, w, 0, &s).unwrap();
        for (a, b) in g.value(y).values().iter().zip(x.values()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn every_op_preserves_shape_or_halves_it() {
        for stride in [1, 2] {
            let (store, s) = space(4, stride);
            let mut g = Graph::new();
            let x = g.constant(Tensor::uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
            for op in &s.ops {
                let y = op.forward(&mut g, &store, x).unwrap();
                assert_eq!(g.shape(y), [2, 4, 8 / stride, 8 / stride], "{op:?}");
            }
        }
    }

    #[test]
    fn mix_rejects_unnormalized_rows_and_wrong_width() {
        let (store, s) = space(3, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let raw = g.constant(Tensor::full(&[1, NUM_OPS], 0.5));
        assert!(mixed_op_full(&mut g, &store, x, raw, 0, &s).is_err());
        let w = softmaxed(&mut g, &[0.0; 8]);
        let wide = g.constant(Tensor::zeros(&[2, 5, 4, 4]));
        assert!(mixed_op_full(&mut g, &store, wide, w, 0, &s).is_err());
    }

    #[test]
    fn node_aggregate_sums() {
        let mut g = Graph::new();
        assert!(node_aggregate(&mut g, &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng)).collect();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let one = node_aggregate(&mut g, &vs[..1]).unwrap();
        assert_eq!(g.value(one), &xs[0]);
        let neg = g.scale(vs[0], -1.0).unwrap();
        let zero = node_aggregate(&mut g, &[vs[0], neg]).unwrap();
        assert!(g.value(zero).values().iter().all(|&v| v == 0.0));
        let sum = node_aggregate(&mut g, &vs).unwrap();
        for i in 0..18 {
            let expect = xs[0].values()[i] + xs[1].values()[i] + xs[2].values()[i];
            assert!((g.value(sum).values()[i] - expect).abs() < 1e-15);
        }
    }
}
