//! First-order bilevel search: alternate an Adam step on the architecture
//! weights (validation batch) with an SGD step on the network weights
//! (training batch), and log one metrics record per epoch.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{batch_indices, eval_indices, split, Batch, Dataset};
use crate::error::{Error, Result};
use crate::genotype::{count_ops, derive_genotype, Genotype};
use crate::ops::OpKind;
use crate::optim::{cosine_lr, Adam, Sgd};
use crate::params::{Group, ParamStore};
use crate::supernet::{ArchWeights, SearchMode, Supernet, SupernetSpec};
use crate::tensor::Tensor;

/// Scale of the Gaussian noise added to the all-zero architecture weights.
pub const ALPHA_INIT_NOISE: f64 = 1e-3;
/// Fraction of the search data used for the weight step; the rest feeds the
/// architecture step.
pub const TRAIN_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub depth: usize,
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_decay: f64,
    pub a_lr: f64,
    pub a_beta1: f64,
    pub a_beta2: f64,
    pub a_decay: f64,
    pub k: usize,
    pub r: usize,
    pub mode: SearchMode,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            channels: 16,
            epochs: 80,
            batch_size: 96,
            w_lr: 0.025,
            w_momentum: 0.9,
            w_decay: 3e-4,
            a_lr: 6e-4,
            a_beta1: 0.5,
            a_beta2: 0.999,
            a_decay: 1e-3,
            k: 4,
            r: 4,
            mode: SearchMode::Attention,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("w_lr", self.w_lr), ("a_lr", self.a_lr), ("w_decay", self.w_decay), ("a_decay", self.a_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [("w_momentum", self.w_momentum), ("a_beta1", self.a_beta1), ("a_beta2", self.a_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batchsize must be at least 2, got {}", self.batch_size));
        }
        if self.k == 0 || self.r == 0 {
            return bad(format!("K and r must be at least 1, got {} and {}", self.k, self.r));
        }
        Ok(())
    }

    pub fn supernet_spec(&self, n_classes: usize) -> SupernetSpec {
        let mut spec = SupernetSpec::new(self.depth, self.channels, n_classes).with_mode(self.mode, self.k);
        spec.r = self.r;
        spec
    }
}

/// One record per epoch. Validation figures come from the architecture-step
/// forward passes, taken before each update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub skip_normal: usize,
    pub skip_reduction: usize,
    pub opspace_floats: u64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,skip_normal,skip_reduction,opspace_floats,seconds";

/// CSV with a header row and one line per record.
pub fn write_csv<T: Serialize, W: Write>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(())
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> Result<String> {
    if rows.is_empty() {
        return Ok(format!("{METRICS_HEADER}\n"));
    }
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}

/// Mean loss and accuracy over a set of samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Predictions equal to the label; ties in the logits go to the lower class.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let n = logits.shape()[1];
    logits
        .values()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &y)| {
            let pred = (0..n).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            pred == y
        })
        .count()
}

/// Activation floats allocated inside candidate operations during one
/// forward pass over `x`.
pub fn op_space_float_counter<R: Rng + ?Sized>(net: &Supernet, store: &ParamStore, x: &Tensor, rng: &mut R) -> Result<u64> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    net.forward(&mut g, store, xv, rng)?;
    Ok(g.counted_floats())
}

/// A search in progress: the supernet, its parameters and both optimizers.
#[derive(Clone, Debug)]
pub struct Search {
    pub cfg: SearchConfig,
    pub net: Supernet,
    pub store: ParamStore,
    pub sgd: Sgd,
    pub adam: Adam,
    mask_rng: ChaCha8Rng,
    pub metrics: Vec<EpochMetrics>,
    /// Raw architecture weights after every epoch.
    pub alpha_log: Vec<ArchWeights>,
}

impl Search {
    pub fn new(cfg: SearchConfig, n_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let net = Supernet::build(cfg.supernet_spec(n_classes), &mut store, &mut rng)?;
        let noise = Normal::new(0.0, ALPHA_INIT_NOISE).map_err(|e| Error::Config(e.to_string()))?;
        for id in store.ids_in(Group::Arch) {
            for v in store.get_mut(id).value.values_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        mask_rng.set_stream(1);
        Ok(Self {
            sgd: Sgd::new(cfg.w_momentum, cfg.w_decay),
            adam: Adam::new(cfg.a_lr, cfg.a_beta1, cfg.a_beta2, cfg.a_decay),
            cfg,
            net,
            store,
            mask_rng,
            metrics: Vec::new(),
            alpha_log: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.metrics.len()
    }

    pub fn arch_weights(&self) -> ArchWeights {
        self.net.arch_weights(&self.store)
    }

    pub fn genotype(&self) -> Result<Genotype> {
        derive_genotype(&self.arch_weights())
    }

    /// Forward and backward on `batch` with only `group` trainable; the
    /// group's gradients land in the store. Returns `(loss, correct, floats)`.
    fn differentiate(&mut self, batch: &Batch, group: Group) -> Result<(f64, usize, u64)> {
        let mut g = Graph::training(group);
        let x = g.constant(batch.images.clone());
        let logits = self.net.forward(&mut g, &self.store, x, &mut self.mask_rng)?;
        let floats = g.counted_floats();
        let correct = count_correct(g.value(logits), &batch.labels);
        let loss = g.cross_entropy(logits, &batch.labels)?;
        let loss_value = g.value(loss).values()[0];
        g.backward(loss)?;
        self.store.collect_grads(&g, group);
        Ok((loss_value, correct, floats))
    }

    /// Architecture step on a validation batch. Returns the pre-update loss
    /// and number of correct predictions.
    pub fn alpha_step(&mut self, batch: &Batch) -> Result<(f64, usize)> {
        let (loss, correct, _) = self.differentiate(batch, Group::Arch)?;
        self.adam.step(&mut self.store, Group::Arch)?;
        Ok((loss, correct))
    }

    /// Weight step on a training batch. Returns the pre-update loss and the
    /// op-space float count of its forward pass.
    pub fn weight_step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, u64)> {
        let (loss, _, floats) = self.differentiate(batch, Group::Weights)?;
        self.sgd.step(&mut self.store, Group::Weights, lr)?;
        Ok((loss, floats))
    }

    /// One pass over paired training and validation batches.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.metrics.len();
        let lr = cosine_lr(epoch, self.cfg.epochs.max(epoch + 1), self.cfg.w_lr)?;
        let train_order = batch_indices(train.len(), self.cfg.batch_size, self.cfg.seed, epoch as u64)?;
        let val_order = batch_indices(val.len(), self.cfg.batch_size, self.cfg.seed.wrapping_add(1), epoch as u64)?;
        let (mut train_loss, mut val_loss, mut correct, mut seen) = (0.0, 0.0, 0, 0);
        let mut floats = 0;
        let steps = train_order.len().min(val_order.len());
        for (t_idx, v_idx) in train_order.iter().zip(&val_order) {
            let vb = val.batch(v_idx);
            let (vl, c) = self.alpha_step(&vb)?;
            val_loss += vl;
            correct += c;
            seen += vb.labels.len();
            let (tl, f) = self.weight_step(&train.batch(t_idx), lr)?;
            train_loss += tl;
            if floats == 0 {
                floats = f;
            }
        }
        let alpha = self.arch_weights();
        let skips = count_ops(&derive_genotype(&alpha)?, OpKind::SkipConnect);
        let record = EpochMetrics {
            epoch,
            train_loss: train_loss / steps as f64,
            val_loss: val_loss / steps as f64,
            val_acc: correct as f64 / seen as f64,
            skip_normal: skips.normal,
            skip_reduction: skips.reduce,
            opspace_floats: floats,
            seconds: start.elapsed().as_secs_f64(),
        };
        if !record.train_loss.is_finite() || !record.val_loss.is_finite() {
            return Err(Error::NonFinite("search epoch"));
        }
        self.alpha_log.push(alpha);
        self.metrics.push(record.clone());
        Ok(record)
    }

    /// Loss and accuracy over every sample of `data`, without updates.
    /// Random masks come from a generator fixed by the seed.
    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(2);
        let (mut loss, mut correct) = (0.0, 0);
        for idx in eval_indices(data.len(), self.cfg.batch_size)? {
            let b = data.batch(&idx);
            let mut g = Graph::inference();
            let x = g.constant(b.images);
            let logits = self.net.forward(&mut g, &self.store, x, &mut rng)?;
            correct += count_correct(g.value(logits), &b.labels);
            let l = g.cross_entropy(logits, &b.labels)?;
            loss += g.value(l).values()[0] * idx.len() as f64;
        }
        Ok(Evaluation { loss: loss / data.len() as f64, accuracy: correct as f64 / data.len() as f64 })
    }
}

/// One epoch of alternating updates on `search`.
pub fn bilevel_epoch(search: &mut Search, train: &Dataset, val: &Dataset) -> Result<EpochMetrics> {
    search.run_epoch(train, val)
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub alpha: ArchWeights,
    pub metrics: Vec<EpochMetrics>,
    pub alpha_log: Vec<ArchWeights>,
    pub genotype: Genotype,
    /// Full pass over the validation split after the last epoch.
    pub final_eval: Evaluation,
}

/// Splits `data` in half and searches for `cfg.epochs` epochs. `on_epoch`
/// sees every record as it is produced.
pub fn run_search_with(
    cfg: &SearchConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<SearchOutcome> {
    let (train, val) = split(data, TRAIN_FRACTION, cfg.seed)?;
    let mut search = Search::new(cfg.clone(), data.n_classes)?;
    for _ in 0..cfg.epochs {
        let m = search.run_epoch(&train, &val)?;
        on_epoch(&m);
    }
    let final_eval = search.evaluate(&val)?;
    Ok(SearchOutcome {
        alpha: search.arch_weights(),
        genotype: search.genotype()?,
        metrics: search.metrics,
        alpha_log: search.alpha_log,
        final_eval,
    })
}

pub fn run_search(cfg: &SearchConfig, data: &Dataset) -> Result<SearchOutcome> {
    run_search_with(cfg, data, |_| {})
}
