//! Channel attention: `F_c = sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))`
//! with one MLP shared by both pooled descriptors, followed by per-channel
//! re-scaling of the features.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::PoolKind;
use crate::params::{ParamId, ParamStore};

pub const DEFAULT_REDUCTION: usize = 4;

/// Hidden width of the attention MLP, `max(1, floor(C / r))`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Shared two-layer MLP without biases: `w2 relu(w1 x)`.
/// `w1` is `(hidden, C)` and `w2` is `(C, hidden)`.
#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub channels: usize,
    pub reduction: usize,
    pub w1: ParamId,
    pub w2: ParamId,
}

impl AttentionUnit {
    /// Registers the MLP weights in the network-weight group.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let hidden = hidden_width(channels, reduction);
        let w1 = store.add_uniform(format!("{name}.w1"), &[hidden, channels], channels, rng);
        let w2 = store.add_uniform(format!("{name}.w2"), &[channels, hidden], hidden, rng);
        Self { channels, reduction, w1, w2 }
    }

    fn mlp(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let w2 = g.param(store, self.w2);
        let h = g.linear(v, w1, None)?;
        let h = g.relu(h)?;
        g.linear(h, w2, None)
    }
}

/// Per-sample attention weights `(B, C)`, each in `(0, 1)`.
pub fn channel_attention_weights(
    g: &mut Graph,
    store: &ParamStore,
    unit: &AttentionUnit,
    features: Var,
) -> Result<Var> {
    let [b, c, _, _] = g.value(features).dims4("channel-attention")?;
    if c != unit.channels {
        return Err(Error::invalid(
            "channel-attention",
            format!("input has {c} channels, unit expects {}", unit.channels),
        ));
    }
    let avg = g.global_pool(features, PoolKind::Avg)?;
    let avg = g.reshape(avg, &[b, c])?;
    let max = g.global_pool(features, PoolKind::Max)?;
    let max = g.reshape(max, &[b, c])?;
    let a = unit.mlp(g, store, avg)?;
    let m = unit.mlp(g, store, max)?;
    let s = g.add(a, m)?;
    g.sigmoid(s)
}

/// `F'[b,c,h,w] = F_c[b,c] * F[b,c,h,w]`.
pub fn apply_attention(g: &mut Graph, features: Var, weights: Var) -> Result<Var> {
    let [b, c, _, _] = g.value(features).dims4("apply-attention")?;
    if g.shape(weights) != [b, c] {
        return Err(Error::shape("apply-attention", g.shape(features), g.shape(weights)));
    }
    g.scale_per_channel(features, weights)
}

/// Mean of `(B, C)` attention weights over the batch.
pub fn batch_mean(g: &Graph, weights: Var) -> Vec<f64> {
    let shape = g.shape(weights);
    let (b, c) = (shape[0], shape[1]);
    let v = g.value(weights).values();
    (0..c)
        .map(|ch| (0..b).map(|bi| v[bi * c + ch]).sum::<f64>() / b as f64)
        .collect()
}
