//! Seeded finite-difference checks over every differentiable op and block,
//! up to the full search loss with respect to both parameter groups.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{apply_attention, batch_mean, channel_attention_weights, AttentionUnit};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::gradcheck::{check_module, projection_loss, worst, GRAD_TOLERANCE};
use crate::nn::{Conv, ConvGeometry, DilConv, FactorizedReduce, Linear, PoolKind, ReluConvBn, SepConv};
use crate::ops::{mixed_op_full, OpSpace, NUM_OPS};
use crate::params::{Group, ParamId, ParamStore};
use crate::partial::{partial_mixed_op, select_channels, ChannelMask};
use crate::supernet::{SearchMode, Supernet, SupernetSpec};
use crate::tensor::Tensor;

/// First seed of the suite run by `adarts gradcheck`.
pub const DEFAULT_SEED: u64 = 0;

/// Seeds run for every case kind.
pub const SEEDS_PER_CASE: u64 = 4;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub seed: u64,
    pub rel_error: f64,
    pub passed: bool,
}

type Case = fn(u64) -> Result<f64>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed ^ 0x5eed))
}

/// A shuffled evenly spaced grid in `[-1, 1]` that avoids zero: no two values
/// lie within a finite-difference step of each other or of a kink, so max
/// selections and ReLU signs stay fixed under the probe.
fn separated_input(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| -1.0 + (2 * i + 1) as f64 / n as f64).collect();
    values.shuffle(&mut rng(seed ^ 0x5eed));
    Tensor::new(shape, values).expect("shape matches")
}

/// Worst error of a module that maps the input through `f` and a random
/// projection.
fn check<F>(store: &ParamStore, x: &Tensor, seed: u64, max_coords: usize, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore, Var) -> Result<Var>,
{
    let checks = check_module(store, x, max_coords, |g, s, xv| {
        let y = f(g, s, xv)?;
        projection_loss(g, y, seed)
    })?;
    Ok(worst(&checks))
}

fn conv_case(seed: u64, c_in: usize, c_out: usize, geom: ConvGeometry) -> Result<f64> {
    let mut store = ParamStore::new();
    let conv = Conv::new(&mut store, &mut rng(seed), "conv", c_in, c_out, geom);
    let x = input(&[2, c_in, 7, 7], seed);
    check(&store, &x, seed, usize::MAX, |g, s, xv| conv.forward(g, s, xv))
}

fn pool_case(seed: u64, kind: PoolKind, stride: usize) -> Result<f64> {
    let x = separated_input(&[2, 3, 6, 6], seed);
    check(&ParamStore::new(), &x, seed, usize::MAX, |g, _, xv| g.pool2d(xv, kind, stride))
}

fn global_pool_case(seed: u64, kind: PoolKind) -> Result<f64> {
    let x = separated_input(&[2, 3, 4, 4], seed);
    check(&ParamStore::new(), &x, seed, usize::MAX, |g, _, xv| g.global_pool(xv, kind))
}

fn elementwise_case(seed: u64) -> Result<f64> {
    let x = separated_input(&[2, 3, 3, 3], seed);
    check(&ParamStore::new(), &x, seed, usize::MAX, |g, _, xv| {
        let r = g.relu(xv)?;
        let s = g.sigmoid(xv)?;
        let p = g.mul(r, s)?;
        let d = g.sub(p, xv)?;
        g.scale(d, 1.5)
    })
}

fn batch_norm_case(seed: u64) -> Result<f64> {
    let x = input(&[3, 2, 4, 4], seed);
    check(&ParamStore::new(), &x, seed, usize::MAX, |g, _, xv| g.batch_norm(xv))
}

fn linear_case(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut rng(seed), "lin", 5, 3);
    let x = input(&[4, 5], seed);
    check(&store, &x, seed, usize::MAX, |g, s, xv| lin.forward(g, s, xv))
}

fn softmax_cross_entropy_case(seed: u64) -> Result<f64> {
    let x = input(&[4, 5], seed);
    let checks = check_module(&ParamStore::new(), &x, usize::MAX, |g, _, xv| {
        let p = g.softmax_lastdim(xv)?;
        let a = projection_loss(g, p, seed)?;
        let ce = g.cross_entropy(xv, &[0, 3, 4, 1])?;
        g.add(a, ce)
    })?;
    Ok(worst(&checks))
}

fn channel_routing_case(seed: u64) -> Result<f64> {
    let x = input(&[2, 4, 5, 5], seed);
    check(&ParamStore::new(), &x, seed, usize::MAX, |g, _, xv| {
        let a = g.slice_channel(xv, &[3, 0])?;
        let b = g.slice_channel(xv, &[1, 2])?;
        let m = g.merge_channels(a, &[1, 3], b, &[0, 2])?;
        let c = g.concat_channel(&[m, xv])?;
        let w = g.constant(Tensor::uniform(&[2, 8], 0.1, 2.0, &mut rng(seed)));
        let s = g.scale_per_channel(c, w)?;
        g.crop(s)
    })
}

fn relu_conv_bn_case(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let rcb = ReluConvBn::new(&mut store, &mut rng(seed), "rcb", 3, 4, 3, 1);
    let x = input(&[2, 3, 5, 5], seed);
    check(&store, &x, seed, usize::MAX, |g, s, xv| rcb.forward(g, s, xv))
}

fn sep_case(seed: u64, kernel: usize, stride: usize) -> Result<f64> {
    let mut store = ParamStore::new();
    let sep = SepConv::new(&mut store, &mut rng(seed), "sep", 3, kernel, stride);
    let x = input(&[2, 3, 6, 6], seed);
    check(&store, &x, seed, usize::MAX, |g, s, xv| sep.forward(g, s, xv))
}

fn dil_case(seed: u64, kernel: usize, stride: usize) -> Result<f64> {
    let mut store = ParamStore::new();
    let dil = DilConv::new(&mut store, &mut rng(seed), "dil", 3, kernel, stride);
    let x = input(&[2, 3, 7, 7], seed);
    check(&store, &x, seed, usize::MAX, |g, s, xv| dil.forward(g, s, xv))
}

fn factorized_reduce_case(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let fr = FactorizedReduce::new(&mut store, &mut rng(seed), "fr", 3, 4);
    let x = input(&[2, 3, 6, 6], seed);
    check(&store, &x, seed, usize::MAX, |g, s, xv| fr.forward(g, s, xv))
}

fn attention_case(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let unit = AttentionUnit::new(&mut store, &mut rng(seed), "att", 8, 4);
    let x = input(&[2, 8, 4, 4], seed);
    check(&store, &x, seed, usize::MAX, |g, s, xv| {
        let w = channel_attention_weights(g, s, &unit, xv)?;
        apply_attention(g, xv, w)
    })
}

/// An op space over `width` channels and a raw architecture row in the
/// architecture group.
fn mixture_setup(seed: u64, width: usize, stride: usize) -> (ParamStore, OpSpace, ParamId) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let space = OpSpace::new(&mut store, &mut r, "edge", width, stride);
    let alpha = store.add("alpha", Group::Arch, Tensor::uniform(&[1, NUM_OPS], -1.0, 1.0, &mut r));
    (store, space, alpha)
}

fn full_mixture_case(seed: u64) -> Result<f64> {
    let (store, space, alpha) = mixture_setup(seed, 3, 1);
    let x = input(&[2, 3, 6, 6], seed);
    check(&store, &x, seed, 4, |g, s, xv| {
        let a = g.param(s, alpha);
        let w = g.softmax_lastdim(a)?;
        mixed_op_full(g, s, xv, w, 0, &space)
    })
}

fn partial_mixture_case(seed: u64, stride: usize) -> Result<f64> {
    let (mut store, space, alpha) = mixture_setup(seed, 2, stride);
    let unit = AttentionUnit::new(&mut store, &mut rng(seed + 1), "att", 8, 4);
    let x = input(&[2, 8, 6, 6], seed);
    check(&store, &x, seed, 4, |g, s, xv| {
        let fc = channel_attention_weights(g, s, &unit, xv)?;
        let scaled = apply_attention(g, xv, fc)?;
        let mask: ChannelMask = select_channels(&batch_mean(g, fc), 4)?;
        let a = g.param(s, alpha);
        let w = g.softmax_lastdim(a)?;
        partial_mixed_op(g, s, scaled, &mask, w, 0, &space)
    })
}

/// Cross-entropy of a one-cell supernet, checked against every parameter
/// tensor of both groups.
fn supernet_case(seed: u64, mode: SearchMode) -> Result<f64> {
    let mut store = ParamStore::new();
    let net = Supernet::build(SupernetSpec::new(1, 4, 3).with_mode(mode, 2), &mut store, &mut rng(seed))?;
    for id in store.ids_in(Group::Arch) {
        store.get_mut(id).value = Tensor::uniform(&[14, NUM_OPS], -0.5, 0.5, &mut rng(seed + 7));
    }
    let x = input(&[2, 3, 6, 6], seed);
    let checks = check_module(&store, &x, 2, |g, s, xv| {
        let mut masks = rng(seed + 3);
        let logits = net.forward(g, s, xv, &mut masks)?;
        g.cross_entropy(logits, &[(seed % 3) as usize, 1])
    })?;
    Ok(worst(&checks))
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv_3x3", |s| conv_case(s, 3, 4, ConvGeometry::dense(3, 1))),
        ("conv_3x3_stride2", |s| conv_case(s, 3, 4, ConvGeometry::dense(3, 2))),
        ("conv_1x1", |s| conv_case(s, 4, 3, ConvGeometry::dense(1, 1))),
        ("conv_1x1_stride2", |s| conv_case(s, 4, 3, ConvGeometry::dense(1, 2))),
        ("depthwise_3x3", |s| conv_case(s, 3, 3, ConvGeometry::depthwise(3, 1, 1, 3))),
        ("depthwise_5x5_dil2_stride2", |s| conv_case(s, 3, 3, ConvGeometry::depthwise(5, 2, 2, 3))),
        ("maxpool_3x3", |s| pool_case(s, PoolKind::Max, 1)),
        ("maxpool_3x3_stride2", |s| pool_case(s, PoolKind::Max, 2)),
        ("avgpool_3x3", |s| pool_case(s, PoolKind::Avg, 1)),
        ("avgpool_3x3_stride2", |s| pool_case(s, PoolKind::Avg, 2)),
        ("global_avgpool", |s| global_pool_case(s, PoolKind::Avg)),
        ("global_maxpool", |s| global_pool_case(s, PoolKind::Max)),
        ("elementwise", elementwise_case),
        ("batch_norm", batch_norm_case),
        ("linear", linear_case),
        ("softmax_cross_entropy", softmax_cross_entropy_case),
        ("channel_routing", channel_routing_case),
        ("relu_conv_bn", relu_conv_bn_case),
        ("sepconv_3x3", |s| sep_case(s, 3, 1)),
        ("sepconv_5x5_stride2", |s| sep_case(s, 5, 2)),
        ("dilconv_3x3", |s| dil_case(s, 3, 1)),
        ("dilconv_5x5_stride2", |s| dil_case(s, 5, 2)),
        ("factorized_reduce", factorized_reduce_case),
        ("channel_attention", attention_case),
        ("mixed_op_full", full_mixture_case),
        ("partial_mixed_op", |s| partial_mixture_case(s, 1)),
        ("partial_mixed_op_stride2", |s| partial_mixture_case(s, 2)),
        ("supernet_attention", |s| supernet_case(s, SearchMode::Attention)),
        ("supernet_random", |s| supernet_case(s, SearchMode::Random)),
        ("supernet_full", |s| supernet_case(s, SearchMode::Full)),
    ]
}

/// Runs every case for seeds `seed..seed + SEEDS_PER_CASE`. A case that
/// errors counts as failed with an infinite error.
pub fn gradient_suite(seed: u64) -> Vec<CaseResult> {
    let mut out = Vec::new();
    for (name, case) in cases() {
        for s in seed..seed + SEEDS_PER_CASE {
            let err = case(s).unwrap_or(f64::INFINITY);
            out.push(CaseResult {
                case: name.to_string(),
                seed: s,
                rel_error: err,
                passed: err <= GRAD_TOLERANCE,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_enough_cases_and_they_pass_on_one_seed() {
        assert!(cases().len() as u64 * SEEDS_PER_CASE >= 100);
        for (name, case) in cases() {
            let err = case(100).unwrap();
            assert!(err <= GRAD_TOLERANCE, "{name}: {err}");
        }
    }
}
