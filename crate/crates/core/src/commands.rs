//! Command implementations behind the `adarts` binary. Every artifact is
//! written to a temporary file in the target directory and renamed into
//! place, so an interrupted run never leaves a truncated output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{batch_indices, eval_indices, split, Dataset};
use crate::error::{Error, Result};
use crate::genotype::{derive_genotype, DiscreteNet, Genotype};
use crate::gradcheck_suite::{gradient_suite, CaseResult};
use crate::optim::{cosine_lr, Sgd};
use crate::params::{Group, ParamStore};
use crate::search::{count_correct, run_search_with, EpochMetrics, SearchOutcome, METRICS_HEADER, TRAIN_FRACTION};
use crate::supernet::{ArchWeights, SearchMode};

pub const GENOTYPE_FILE: &str = "genotype.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ALPHA_FILE: &str = "alpha.json";
pub const EVAL_FILE: &str = "eval_metrics.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const ABLATION_K_FILE: &str = "ablation.csv";
pub const ABLATION_MODE_FILE: &str = "ablation_mode.csv";
pub const SKIP_TRACE_FILE: &str = "skip_trace.csv";

pub const EVAL_HEADER: &str = "epoch,train_loss,val_loss,val_acc,seconds";
pub const ABLATION_K_HEADER: &str = "K,opspace_floats,final_val_acc,seconds";
pub const ABLATION_MODE_HEADER: &str = "mode,K,opspace_floats,final_val_acc,seconds";
pub const SKIP_TRACE_HEADER: &str = "epoch,mode,skip_normal,skip_reduction";
pub const GRADCHECK_HEADER: &str = "case,seed,rel_error,passed";

/// Writes `contents` to `path` through a temporary file in the same
/// directory followed by a rename. Creates missing parent directories.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// CSV text: `header` then one line per row. The header is written even when
/// there are no rows.
pub fn csv_text<T: Serialize>(header: &str, rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let body = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    let body = String::from_utf8(body).map_err(|e| Error::Data(e.to_string()))?;
    Ok(format!("{header}\n{body}"))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    cfg.load_dataset()
}

/// Runs a search and writes `genotype.json`, `metrics.csv` and the final
/// architecture weights to `alpha.json` in `cfg.out_dir`.
pub fn cmd_search(cfg: &RunConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<SearchOutcome> {
    let data = load_data(cfg)?;
    let outcome = run_search_with(&cfg.search, &data, on_epoch)?;
    let dir = &cfg.out_dir;
    write_atomic(dir.join(GENOTYPE_FILE), outcome.genotype.to_json()?.as_bytes())?;
    write_atomic(dir.join(METRICS_FILE), csv_text(METRICS_HEADER, &outcome.metrics)?.as_bytes())?;
    write_atomic(dir.join(ALPHA_FILE), serde_json::to_string_pretty(&outcome.alpha)?.as_bytes())?;
    Ok(outcome)
}

/// Derives a genotype from an architecture-weight snapshot written by
/// `cmd_search`.
pub fn cmd_derive(alpha_path: impl AsRef<Path>, out_path: impl AsRef<Path>) -> Result<Genotype> {
    let text = std::fs::read_to_string(&alpha_path).map_err(|e| Error::io(&alpha_path, e))?;
    let alpha: ArchWeights = serde_json::from_str(&text)?;
    alpha.validate()?;
    let genotype = derive_genotype(&alpha)?;
    write_atomic(out_path, genotype.to_json()?.as_bytes())?;
    Ok(genotype)
}

pub fn read_genotype(path: impl AsRef<Path>) -> Result<Genotype> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Genotype::from_json(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

/// Trains the discrete network of `genotype` (depth `cfg.eval_depth`) from
/// scratch with SGD and a cosine schedule on the training split, scoring the
/// validation split after every epoch. Writes `eval_metrics.csv`.
pub fn cmd_eval(genotype: &Genotype, cfg: &RunConfig, mut on_epoch: impl FnMut(&EvalMetrics)) -> Result<Vec<EvalMetrics>> {
    let data = load_data(cfg)?;
    let s = &cfg.search;
    let (train, val) = split(&data, TRAIN_FRACTION, s.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut store = ParamStore::new();
    let net = DiscreteNet::build(genotype, cfg.eval_depth, s.channels, data.n_classes, &mut store, &mut rng)?;
    let mut sgd = Sgd::new(s.w_momentum, s.w_decay);
    let mut rows = Vec::with_capacity(s.epochs);
    for epoch in 0..s.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, s.epochs, s.w_lr)?;
        let (mut train_loss, mut steps) = (0.0, 0);
        for idx in batch_indices(train.len(), s.batch_size, s.seed, epoch as u64)? {
            let b = train.batch(&idx);
            let mut g = Graph::training(Group::Weights);
            let x = g.constant(b.images);
            let logits = net.forward(&mut g, &store, x)?;
            let loss = g.cross_entropy(logits, &b.labels)?;
            train_loss += g.value(loss).values()[0];
            g.backward(loss)?;
            store.collect_grads(&g, Group::Weights);
            sgd.step(&mut store, Group::Weights, lr)?;
            steps += 1;
        }
        let (mut val_loss, mut correct) = (0.0, 0);
        for idx in eval_indices(val.len(), s.batch_size)? {
            let b = val.batch(&idx);
            let mut g = Graph::inference();
            let x = g.constant(b.images);
            let logits = net.forward(&mut g, &store, x)?;
            correct += count_correct(g.value(logits), &b.labels);
            let l = g.cross_entropy(logits, &b.labels)?;
            val_loss += g.value(l).values()[0] * idx.len() as f64;
        }
        let row = EvalMetrics {
            epoch,
            train_loss: train_loss / steps.max(1) as f64,
            val_loss: val_loss / val.len() as f64,
            val_acc: correct as f64 / val.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        if !row.train_loss.is_finite() || !row.val_loss.is_finite() {
            return Err(Error::NonFinite("evaluation epoch"));
        }
        on_epoch(&row);
        rows.push(row);
    }
    write_atomic(cfg.out_dir.join(EVAL_FILE), csv_text(EVAL_HEADER, &rows)?.as_bytes())?;
    Ok(rows)
}

/// Runs the finite-difference suite from `seed` and writes `gradcheck.csv`
/// to `out_dir`.
pub fn cmd_gradcheck(seed: u64, out_dir: impl AsRef<Path>) -> Result<Vec<CaseResult>> {
    let results = gradient_suite(seed);
    write_atomic(out_dir.as_ref().join(GRADCHECK_FILE), csv_text(GRADCHECK_HEADER, &results)?.as_bytes())?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationKRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub opspace_floats: u64,
    pub final_val_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationModeRow {
    pub mode: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub opspace_floats: u64,
    pub final_val_acc: f64,
    pub seconds: f64,
}

/// One search per setting. Returns `(opspace_floats, final_val_acc, seconds, outcome)`.
fn timed_search(cfg: &RunConfig, data: &Dataset) -> Result<(u64, f64, f64, SearchOutcome)> {
    let start = Instant::now();
    let outcome = run_search_with(&cfg.search, data, |_| {})?;
    let floats = outcome.metrics.first().map_or(0, |m| m.opspace_floats);
    Ok((floats, outcome.final_eval.accuracy, start.elapsed().as_secs_f64(), outcome))
}

/// One search per K with everything else fixed. Writes `ablation.csv`.
pub fn cmd_ablate_k(cfg: &RunConfig, ks: &[usize], mut on_row: impl FnMut(&AblationKRow)) -> Result<Vec<AblationKRow>> {
    if ks.is_empty() {
        return Err(Error::Config("ablate-k needs at least one K".into()));
    }
    let data = load_data(cfg)?;
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = cfg.clone();
        c.search.k = k;
        c.validate()?;
        let (opspace_floats, final_val_acc, seconds, _) = timed_search(&c, &data)?;
        let row = AblationKRow { k, opspace_floats, final_val_acc, seconds };
        on_row(&row);
        rows.push(row);
    }
    write_atomic(cfg.out_dir.join(ABLATION_K_FILE), csv_text(ABLATION_K_HEADER, &rows)?.as_bytes())?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkipTraceRow {
    pub epoch: usize,
    pub mode: String,
    pub skip_normal: usize,
    pub skip_reduction: usize,
}

/// Long-format skip counts, one row per mode and epoch.
pub fn skip_trace_rows(runs: &[(SearchMode, &[EpochMetrics])]) -> Vec<SkipTraceRow> {
    runs.iter()
        .flat_map(|(mode, metrics)| {
            metrics.iter().map(move |m| SkipTraceRow {
                epoch: m.epoch,
                mode: mode.to_string(),
                skip_normal: m.skip_normal,
                skip_reduction: m.skip_reduction,
            })
        })
        .collect()
}

/// One search per mode with everything else fixed. Writes
/// `ablation_mode.csv` and, from the same runs, `skip_trace.csv`.
pub fn cmd_ablate_mode(
    cfg: &RunConfig,
    modes: &[SearchMode],
    mut on_row: impl FnMut(&AblationModeRow),
) -> Result<(Vec<AblationModeRow>, Vec<SkipTraceRow>)> {
    if modes.is_empty() {
        return Err(Error::Config("ablate-mode needs at least one mode".into()));
    }
    let data = load_data(cfg)?;
    let mut rows = Vec::with_capacity(modes.len());
    let mut traces = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut c = cfg.clone();
        c.search.mode = mode;
        let (opspace_floats, final_val_acc, seconds, outcome) = timed_search(&c, &data)?;
        let row = AblationModeRow { mode: mode.to_string(), k: c.search.k, opspace_floats, final_val_acc, seconds };
        on_row(&row);
        rows.push(row);
        traces.push((mode, outcome.metrics));
    }
    let runs: Vec<_> = traces.iter().map(|(m, v)| (*m, v.as_slice())).collect();
    let skips = skip_trace_rows(&runs);
    write_atomic(cfg.out_dir.join(ABLATION_MODE_FILE), csv_text(ABLATION_MODE_HEADER, &rows)?.as_bytes())?;
    write_atomic(cfg.out_dir.join(SKIP_TRACE_FILE), csv_text(SKIP_TRACE_HEADER, &skips)?.as_bytes())?;
    Ok((rows, skips))
}

/// Per-epoch skip counts for each mode. Writes `skip_trace.csv`.
pub fn cmd_skip_trace(
    cfg: &RunConfig,
    modes: &[SearchMode],
    mut on_epoch: impl FnMut(SearchMode, &EpochMetrics),
) -> Result<Vec<SkipTraceRow>> {
    if modes.is_empty() {
        return Err(Error::Config("skip-trace needs at least one mode".into()));
    }
    let data = load_data(cfg)?;
    let mut traces = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut c = cfg.clone();
        c.search.mode = mode;
        let outcome = run_search_with(&c.search, &data, |m| on_epoch(mode, m))?;
        traces.push((mode, outcome.metrics));
    }
    let runs: Vec<_> = traces.iter().map(|(m, v)| (*m, v.as_slice())).collect();
    let rows = skip_trace_rows(&runs);
    write_atomic(cfg.out_dir.join(SKIP_TRACE_FILE), csv_text(SKIP_TRACE_HEADER, &rows)?.as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::count_ops;
    use crate::ops::OpKind;

    fn tiny(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [("depth", "1"), ("channels", "4"), ("epochs", "2"), ("batchsize", "16"), ("K", "2"), ("samples", "128"), ("image_size", "8")] {
            c.set(k, v).unwrap();
        }
        c.out_dir = dir.to_path_buf();
        c
    }

    fn assert_rectangular(text: &str, header: &str, rows: usize) {
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], header);
        assert_eq!(lines.len(), rows + 1);
        let cols = header.split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols), "{text}");
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn csv_text_keeps_header_for_empty_tables() {
        let empty: Vec<AblationKRow> = Vec::new();
        assert_eq!(csv_text(ABLATION_K_HEADER, &empty).unwrap(), format!("{ABLATION_K_HEADER}\n"));
        let row = AblationKRow { k: 2, opspace_floats: 10, final_val_acc: 0.5, seconds: 1.5 };
        assert_eq!(csv_text(ABLATION_K_HEADER, &[row]).unwrap(), format!("{ABLATION_K_HEADER}\n2,10,0.5,1.5\n"));
    }

    #[test]
    fn search_then_derive_round_trips_the_genotype() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let out = cmd_search(&cfg, |_| {}).unwrap();
        let on_disk = read_genotype(dir.path().join(GENOTYPE_FILE)).unwrap();
        assert_eq!(on_disk, out.genotype);
        assert_rectangular(&std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), METRICS_HEADER, 2);
        let derived = cmd_derive(dir.path().join(ALPHA_FILE), dir.path().join("again.json")).unwrap();
        assert_eq!(derived, out.genotype);
        assert_eq!(
            std::fs::read(dir.path().join("again.json")).unwrap(),
            std::fs::read(dir.path().join(GENOTYPE_FILE)).unwrap()
        );
    }

    #[test]
    fn eval_trains_the_discrete_network() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.eval_depth = 2;
        cfg.search.epochs = 3;
        let genotype = cmd_search(&cfg, |_| {}).unwrap().genotype;
        let rows = cmd_eval(&genotype, &cfg, |_| {}).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.last().unwrap().train_loss < rows[0].train_loss);
        assert_rectangular(&std::fs::read_to_string(dir.path().join(EVAL_FILE)).unwrap(), EVAL_HEADER, 3);
    }

    #[test]
    fn ablations_write_one_row_per_setting() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.search.epochs = 1;
        let rows = cmd_ablate_k(&cfg, &[1, 2, 4], |_| {}).unwrap();
        let base = rows[0].opspace_floats as f64;
        for (row, expect) in rows.iter().zip([1.0, 0.5, 0.25]) {
            assert!((row.opspace_floats as f64 / base - expect).abs() <= 0.1 * expect, "{row:?}");
        }
        assert_rectangular(&std::fs::read_to_string(dir.path().join(ABLATION_K_FILE)).unwrap(), ABLATION_K_HEADER, 3);

        let (rows, skips) = cmd_ablate_mode(&cfg, &SearchMode::ALL, |_| {}).unwrap();
        assert_eq!(rows.iter().map(|r| r.mode.as_str()).collect::<Vec<_>>(), ["attention", "random", "full"]);
        assert_eq!(skips.len(), 3);
        assert_rectangular(&std::fs::read_to_string(dir.path().join(ABLATION_MODE_FILE)).unwrap(), ABLATION_MODE_HEADER, 3);
        assert_rectangular(&std::fs::read_to_string(dir.path().join(SKIP_TRACE_FILE)).unwrap(), SKIP_TRACE_HEADER, 3);
    }

    #[test]
    fn skip_trace_matches_the_logged_genotypes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let mut seen = Vec::new();
        let rows = cmd_skip_trace(&cfg, &[SearchMode::Full], |_, m| seen.push(m.clone())).unwrap();
        assert_eq!(rows.len(), 2);
        let out = run_search_with(&{
            let mut s = cfg.search.clone();
            s.mode = SearchMode::Full;
            s
        }, &cfg.load_dataset().unwrap(), |_| {})
        .unwrap();
        for (row, alpha) in rows.iter().zip(&out.alpha_log) {
            let c = count_ops(&derive_genotype(alpha).unwrap(), OpKind::SkipConnect);
            assert_eq!((row.skip_normal, row.skip_reduction), (c.normal, c.reduce));
        }
    }

    #[test]
    fn missing_inputs_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_derive(dir.path().join("none.json"), dir.path().join("g.json")), Err(Error::Io { .. })));
        std::fs::write(dir.path().join("bad.json"), "{\"normal\": []}").unwrap();
        assert!(cmd_derive(dir.path().join("bad.json"), dir.path().join("g.json")).is_err());
        assert!(cmd_ablate_k(&tiny(dir.path()), &[], |_| {}).is_err());
    }
}
