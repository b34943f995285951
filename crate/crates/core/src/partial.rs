//! Partial channel connections.
//!
//! Only the `max(1, floor(C/K))` channels chosen by a [`ChannelMask`] enter the
//! operation space; the rest bypass it and are re-interleaved with the mixed
//! output in their original channel order.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::PoolKind;
use crate::ops::OpSpace;
use crate::params::ParamStore;

/// Number of channels a proportion divisor `k` keeps out of `channels`.
pub fn selected_count(channels: usize, k: usize) -> usize {
    (channels / k.max(1)).max(1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    pub bits: Vec<bool>,
    pub k: usize,
}

impl ChannelMask {
    pub fn all(channels: usize) -> Self {
        Self { bits: vec![true; channels], k: 1 }
    }

    pub fn channels(&self) -> usize {
        self.bits.len()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Selected channel indices, ascending.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Bypassed channel indices, ascending.
    pub fn masked(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }
}

/// Marks the `max(1, floor(C/K))` largest weights. Ties go to the lower
/// channel index.
pub fn select_channels(weights: &[f64], k: usize) -> Result<ChannelMask> {
    if k < 1 {
        return Err(Error::invalid("select-channels", "K must be at least 1"));
    }
    if weights.is_empty() {
        return Err(Error::EmptyInput("select-channels"));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut bits = vec![false; weights.len()];
    for &c in &order[..selected_count(weights.len(), k)] {
        bits[c] = true;
    }
    Ok(ChannelMask { bits, k })
}

/// Uniformly random mask with the same popcount as [`select_channels`].
pub fn random_mask<R: Rng + ?Sized>(channels: usize, k: usize, rng: &mut R) -> Result<ChannelMask> {
    if k < 1 {
        return Err(Error::invalid("random-mask", "K must be at least 1"));
    }
    let mut bits = vec![false; channels];
    for c in sample(rng, channels, selected_count(channels, k)) {
        bits[c] = true;
    }
    Ok(ChannelMask { bits, k })
}

/// Selected channels go through `sum_k w[row, k] o_k(.)`; bypassed channels
/// pass unchanged (stride 1) or through a stride-2 3x3 average pool (stride
/// 2). Output keeps all `C` channels in their original order.
pub fn partial_mixed_op(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    mask: &ChannelMask,
    weights: Var,
    row: usize,
    space: &OpSpace,
) -> Result<Var> {
    let c = g.value(x).dims4("partial-mixed-op")?[1];
    if mask.channels() != c {
        return Err(Error::invalid(
            "partial-mixed-op",
            format!("mask covers {} channels, input has {c}", mask.channels()),
        ));
    }
    if space.channels != mask.popcount() {
        return Err(Error::invalid(
            "partial-mixed-op",
            format!("op space width {} differs from {} selected channels", space.channels, mask.popcount()),
        ));
    }
    let selected = mask.selected();
    if selected.len() == c {
        return space.mix(g, store, x, weights, row);
    }
    let masked = mask.masked();
    let picked = g.slice_channel(x, &selected)?;
    let mixed = space.mix(g, store, picked, weights, row)?;
    let rest = g.slice_channel(x, &masked)?;
    let rest = if space.stride == 1 {
        rest
    } else {
        g.pool2d(rest, PoolKind::Avg, space.stride)?
    };
    g.merge_channels(mixed, &selected, rest, &masked)
}
