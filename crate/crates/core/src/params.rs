//! Trainable parameters, split into the network-weight group (ω) and the
//! architecture group (α).

use rand::Rng;

use crate::autodiff::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Network weights, trained on the training split.
    Weights,
    /// Architecture logits, trained on the validation split.
    Arch,
}

impl Group {
    pub fn index(self) -> usize {
        match self {
            Group::Weights => 0,
            Group::Arch => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Fan-in scaled uniform init, bound `sqrt(1 / fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        self.add(name, Group::Weights, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).group == group).collect()
    }

    /// Total scalar count in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Clears every gradient buffer.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    /// Copies gradients of `group` out of a differentiated graph. Parameters
    /// the graph did not touch get an all-zero gradient.
    pub fn collect_grads(&mut self, graph: &Graph, group: Group) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if p.group != group {
                continue;
            }
            let g = graph
                .bound_param(ParamId(i))
                .and_then(|v| graph.grad(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            p.value.grad = Some(g);
        }
    }

    /// All values of `group`, concatenated in id order.
    pub fn flatten(&self, group: Group) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.values().iter().copied())
            .collect()
    }
}
