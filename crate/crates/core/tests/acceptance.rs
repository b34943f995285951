//! Acceptance suite: one line per criterion, gating criteria asserted at the
//! end. Runs as a single test so the timed search is not slowed by other
//! tests. Set `ADARTS_ACCEPTANCE=2,5` to run a subset and `CIFAR_DIR` to a
//! directory of CIFAR-10 binary batches to run the CIFAR-10 smoke check.

use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use adarts_core::commands::{
    cmd_ablate_k, cmd_ablate_mode, csv_text, skip_trace_rows, write_atomic, ABLATION_K_FILE, ABLATION_K_HEADER,
    ABLATION_MODE_FILE, ABLATION_MODE_HEADER, METRICS_FILE, SKIP_TRACE_FILE, SKIP_TRACE_HEADER,
};
use adarts_core::config::RunConfig;
use adarts_core::data::{load_cifar10_train, make_synthetic, SyntheticSpec};
use adarts_core::genotype::{count_ops, derive_genotype, Genotype};
use adarts_core::gradcheck::GRAD_TOLERANCE;
use adarts_core::gradcheck_suite::{gradient_suite, DEFAULT_SEED};
use adarts_core::ops::{mixed_op_full, OpKind, OpSpace, NUM_OPS};
use adarts_core::partial::{partial_mixed_op, select_channels, ChannelMask};
use adarts_core::search::{op_space_float_counter, run_search_with, Search, SearchConfig, SearchOutcome, METRICS_HEADER};
use adarts_core::supernet::{ArchWeights, SearchMode, NUM_EDGES};
use adarts_core::{Graph, Group, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    /// Reported but not gated.
    Info,
    Skip,
}

struct Report {
    only: Option<HashSet<u32>>,
    failures: Vec<u32>,
}

impl Report {
    fn new() -> Self {
        let only = std::env::var("ADARTS_ACCEPTANCE")
            .ok()
            .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
        Self { only, failures: Vec::new() }
    }

    fn wants(&self, id: u32) -> bool {
        self.only.as_ref().is_none_or(|s| s.contains(&id))
    }

    fn line(&mut self, id: u32, name: &str, status: Status, detail: String) {
        let tag = match status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
            Status::Skip => "SKIP",
        };
        if status == Status::Fail {
            self.failures.push(id);
        }
        say(&format!("[{id:>2}] {tag} {name}: {detail}"));
    }

    fn gate(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        self.line(id, name, if ok { Status::Pass } else { Status::Fail }, detail);
    }
}

/// Writes to the stderr handle directly, which the test harness does not
/// capture, so the report shows up without `--nocapture`.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn out_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn full_scale(r: &mut Report) {
    r.line(
        1,
        "full-scale results",
        Status::Info,
        "not reproducible at desk scale (needs GPU-days of search and 600-epoch training); criteria 2-10 substitute".into(),
    );
}

fn gradient_oracle(r: &mut Report) {
    let start = Instant::now();
    let results = gradient_suite(DEFAULT_SEED);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = results.iter().filter(|c| !c.passed).map(|c| format!("{}@{}", c.case, c.seed)).collect();
    let worst = results.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let kinds: HashSet<_> = results.iter().map(|c| c.case.as_str()).collect();
    r.gate(
        2,
        "gradient oracle",
        failed.is_empty() && results.len() >= 100 && secs < 300.0,
        format!(
            "{} cases over {} kinds, worst rel error {worst:.2e} (tol {GRAD_TOLERANCE:e}), {secs:.1}s (limit 300s){}",
            results.len(),
            kinds.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    );
}

fn partial_equals_full_at_k1(r: &mut Report) {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let space = OpSpace::new(&mut store, &mut rng, "edge", 8, 1);
        let alpha = store.add("alpha", Group::Arch, Tensor::uniform(&[1, NUM_OPS], -1.0, 1.0, &mut rng));
        let x = Tensor::uniform(&[2, 8, 8, 8], -1.0, 1.0, &mut rng);
        let run = |partial: bool| {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let a = g.param(&store, alpha);
            let w = g.softmax_lastdim(a).unwrap();
            assert!(g.value(w).values().iter().all(|&v| v > 0.0));
            let y = if partial {
                partial_mixed_op(&mut g, &store, xv, &ChannelMask::all(8), w, 0, &space).unwrap()
            } else {
                mixed_op_full(&mut g, &store, xv, w, 0, &space).unwrap()
            };
            g.value(y).clone()
        };
        let (p, f) = (run(true), run(false));
        assert_eq!(p.shape(), f.shape());
        worst = p.values().iter().zip(f.values()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    r.gate(
        3,
        "partial op with all-ones mask equals full mixture",
        worst <= 1e-12,
        format!("10 random (2,8,8,8) inputs, all 8 ops weighted, max |diff| {worst:.1e} (tol 1e-12)"),
    );
}

/// Top `max(1, C/K)` channels by weight, ties to the lower index.
fn sort_oracle(w: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap().then(a.cmp(&b)));
    let keep = (w.len() / k).max(1);
    let mut bits = vec![false; w.len()];
    for &i in &order[..keep] {
        bits[i] = true;
    }
    bits
}

fn mask_law(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut draws, mut violations) = (0, 0);
    for k in [1, 2, 4, 8, 16] {
        for draw in 0..1000 {
            let c = rng.gen_range(1..=64);
            // Every other draw lives on a coarse grid so ties are common.
            let w: Vec<f64> = if draw % 2 == 0 {
                (0..c).map(|_| rng.gen::<f64>()).collect()
            } else {
                (0..c).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect()
            };
            let mask = select_channels(&w, k).unwrap();
            draws += 1;
            if mask.popcount() != (c / k).max(1) || mask.bits != sort_oracle(&w, k) {
                violations += 1;
            }
        }
    }
    r.gate(4, "mask law", violations == 0, format!("{draws} draws over K in {{1,2,4,8,16}}, {violations} violations"));
}

fn memory_scaling(r: &mut Report) {
    let start = Instant::now();
    let data = make_synthetic(&SyntheticSpec::default()).unwrap();
    let x = data.batch(&(0..32).collect::<Vec<_>>()).images;
    let counts: Vec<u64> = [1, 2, 4]
        .iter()
        .map(|&k| {
            let cfg = SearchConfig { depth: 2, channels: 8, k, ..SearchConfig::default() };
            let s = Search::new(cfg, data.n_classes).unwrap();
            op_space_float_counter(&s.net, &s.store, &x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let ratios: Vec<f64> = counts.iter().map(|&c| c as f64 / counts[0] as f64).collect();
    let ok = ratios.iter().zip([1.0, 0.5, 0.25]).all(|(r, e)| (r - e).abs() <= 0.1 * e) && secs < 60.0;
    r.gate(
        5,
        "op-space memory scaling",
        ok,
        format!(
            "floats {counts:?}, ratios 1 : {:.3} : {:.3} (expected 1 : 0.5 : 0.25 within 10%), {secs:.1}s (limit 60s)",
            ratios[1], ratios[2]
        ),
    );
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Enumerates every pair of incoming edges per node and keeps the pair with
/// the largest summed strength, earliest pair on ties.
fn brute_force_cell(raw: &[Vec<f64>]) -> Vec<(OpKind, usize)> {
    let mut out = Vec::new();
    let mut row = 0;
    for node in 2..6 {
        let best: Vec<(OpKind, f64)> = (0..node)
            .map(|p| {
                let w = softmax(&raw[row + p]);
                let mut choice = (OpKind::ALL[1], w[1]);
                for (op, &v) in OpKind::ALL.iter().zip(&w).skip(2) {
                    if v > choice.1 {
                        choice = (*op, v);
                    }
                }
                choice
            })
            .collect();
        let mut pick = (0, 1);
        for a in 0..node {
            for b in a + 1..node {
                if best[a].1 + best[b].1 > best[pick.0].1 + best[pick.1].1 {
                    pick = (a, b);
                }
            }
        }
        out.push((best[pick.0].0, pick.0));
        out.push((best[pick.1].0, pick.1));
        row += node;
    }
    out
}

fn genotype_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut mismatches, mut shift_violations) = (0, 0);
    let random = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..NUM_EDGES).map(|_| (0..NUM_OPS).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    };
    for _ in 0..1000 {
        let alpha = ArchWeights { normal: random(&mut rng), reduce: random(&mut rng) };
        let g = derive_genotype(&alpha).unwrap();
        if g.normal != brute_force_cell(&alpha.normal) || g.reduce != brute_force_cell(&alpha.reduce) {
            mismatches += 1;
        }
        let shift = |m: &[Vec<f64>], rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            m.iter()
                .map(|row| {
                    let c = rng.gen_range(-50.0..50.0);
                    row.iter().map(|v| v + c).collect()
                })
                .collect()
        };
        let shifted = ArchWeights { normal: shift(&alpha.normal, &mut rng), reduce: shift(&alpha.reduce, &mut rng) };
        if derive_genotype(&shifted).unwrap() != g {
            shift_violations += 1;
        }
    }
    r.gate(
        6,
        "genotype oracle",
        mismatches == 0 && shift_violations == 0,
        format!("1000 random 14x8 pairs: {mismatches} mismatches vs enumeration, {shift_violations} row-shift violations"),
    );
}

/// Eight non-none entries per kind, two distinct earlier inputs per node.
fn well_formed(g: &Genotype) -> bool {
    g.validate().is_ok()
        && [&g.normal, &g.reduce].iter().all(|cell| {
            cell.len() == 8
                && cell.iter().all(|(op, _)| *op != OpKind::None)
                && cell.chunks(2).enumerate().all(|(j, pair)| {
                    let node = j + 2;
                    pair[0].1 != pair[1].1 && pair.iter().all(|&(_, p)| p < node)
                })
        })
}

fn desk_config(mode: SearchMode) -> SearchConfig {
    SearchConfig { depth: 2, channels: 8, k: 2, epochs: 20, batch_size: 32, mode, ..SearchConfig::default() }
}

fn same_run(a: &SearchOutcome, b: &SearchOutcome) -> bool {
    let strip = |o: &SearchOutcome| {
        o.metrics
            .iter()
            .map(|m| (m.epoch, m.train_loss.to_bits(), m.val_loss.to_bits(), m.val_acc.to_bits(), m.skip_normal, m.skip_reduction, m.opspace_floats))
            .collect::<Vec<_>>()
    };
    strip(a) == strip(b)
        && a.alpha_log == b.alpha_log
        && a.genotype.to_json().unwrap() == b.genotype.to_json().unwrap()
        && a.final_eval.accuracy.to_bits() == b.final_eval.accuracy.to_bits()
        && a.final_eval.loss.to_bits() == b.final_eval.loss.to_bits()
}

fn end_to_end(r: &mut Report) -> Option<SearchOutcome> {
    let data = make_synthetic(&SyntheticSpec::default()).unwrap();
    let cfg = desk_config(SearchMode::Attention);
    let start = Instant::now();
    let first = run_search_with(&cfg, &data, |m| {
        say(&format!("     attention epoch {:>2}: val_acc {:.3}, skips {}/{}, {:.1}s", m.epoch, m.val_acc, m.skip_normal, m.skip_reduction, m.seconds))
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let rerun = run_search_with(&cfg, &data, |_| {}).unwrap();
    let reproducible = same_run(&first, &rerun);
    let acc = first.final_eval.accuracy;
    let valid = well_formed(&first.genotype);
    let dir = out_dir();
    write_atomic(dir.join(METRICS_FILE), csv_text(METRICS_HEADER, &first.metrics).unwrap().as_bytes()).unwrap();
    r.gate(
        7,
        "end-to-end desk search",
        acc >= 0.9 && valid && reproducible && secs < 600.0,
        format!(
            "depth 2, C0 8, K 2, 20 epochs, batch 32: final val acc {acc:.4} (need >= 0.9), genotype {}, rerun {}, {secs:.1}s (limit 600s); metrics in {}",
            if valid { "valid" } else { "INVALID" },
            if reproducible { "bitwise identical" } else { "DIFFERS" },
            dir.join(METRICS_FILE).display()
        ),
    );
    Some(first)
}

fn skip_collapse(r: &mut Report, attention: Option<SearchOutcome>) {
    let data = make_synthetic(&SyntheticSpec::default()).unwrap();
    let attention = attention.unwrap_or_else(|| run_search_with(&desk_config(SearchMode::Attention), &data, |_| {}).unwrap());
    let full = run_search_with(&desk_config(SearchMode::Full), &data, |m| {
        say(&format!("     full epoch {:>2}: val_acc {:.3}, skips {}/{}, {:.1}s", m.epoch, m.val_acc, m.skip_normal, m.skip_reduction, m.seconds))
    })
    .unwrap();
    let rows = skip_trace_rows(&[(SearchMode::Full, &full.metrics), (SearchMode::Attention, &attention.metrics)]);
    let path = out_dir().join(SKIP_TRACE_FILE);
    write_atomic(&path, csv_text(SKIP_TRACE_HEADER, &rows).unwrap().as_bytes()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let well_formed = text.lines().next() == Some(SKIP_TRACE_HEADER)
        && text.lines().count() == 1 + 2 * 20
        && text.lines().all(|l| l.split(',').count() == 4);
    let normal = |o: &SearchOutcome| o.metrics.iter().map(|m| m.skip_normal as f64).sum::<f64>() / o.metrics.len() as f64;
    let (fin_full, fin_att) = (count_ops(&full.genotype, OpKind::SkipConnect), count_ops(&attention.genotype, OpKind::SkipConnect));
    let direction = match fin_full.normal.cmp(&fin_att.normal) {
        std::cmp::Ordering::Greater => "full mode ends with more normal-cell skips",
        std::cmp::Ordering::Less => "attention mode ends with more normal-cell skips",
        std::cmp::Ordering::Equal => "both modes end with the same normal-cell skip count",
    };
    r.gate(
        8,
        "skip-collapse harness",
        well_formed,
        format!(
            "CSV {} ({}); final normal/reduce skips full {}/{} vs attention {}/{}, mean normal skips per epoch {:.2} vs {:.2}: {direction} (direction reported, not gated)",
            path.display(),
            if well_formed { "well formed" } else { "MALFORMED" },
            fin_full.normal,
            fin_full.reduce,
            fin_att.normal,
            fin_att.reduce,
            normal(&full),
            normal(&attention),
        ),
    );
}

fn ablations(r: &mut Report) {
    let mut cfg = RunConfig::default();
    for (k, v) in [("depth", "1"), ("channels", "8"), ("epochs", "2"), ("batchsize", "32"), ("samples", "512"), ("image_size", "8")] {
        cfg.set(k, v).unwrap();
    }
    cfg.out_dir = out_dir().join("ablation");
    let ks = [1, 2, 4, 8];
    let k_rows = cmd_ablate_k(&cfg, &ks, |_| {}).unwrap();
    let (mode_rows, _) = cmd_ablate_mode(&cfg, &SearchMode::ALL, |_| {}).unwrap();
    let rectangular = |file: &str, header: &str, rows: usize| {
        let text = std::fs::read_to_string(cfg.out_dir.join(file)).unwrap();
        let cols = header.split(',').count();
        text.lines().next() == Some(header) && text.lines().count() == rows + 1 && text.lines().all(|l| l.split(',').count() == cols)
    };
    let ok = k_rows.len() == ks.len()
        && mode_rows.len() == 3
        && rectangular(ABLATION_K_FILE, ABLATION_K_HEADER, ks.len())
        && rectangular(ABLATION_MODE_FILE, ABLATION_MODE_HEADER, 3);
    let summary: Vec<String> = k_rows.iter().map(|r| format!("K={} floats {} acc {:.3}", r.k, r.opspace_floats, r.final_val_acc)).collect();
    let modes: Vec<String> = mode_rows.iter().map(|r| format!("{} acc {:.3}", r.mode, r.final_val_acc)).collect();
    r.gate(
        9,
        "ablation harness",
        ok,
        format!("{}; {}; CSVs in {}", summary.join(", "), modes.join(", "), cfg.out_dir.display()),
    );
}

fn cifar_smoke(r: &mut Report) {
    let Some(dir) = std::env::var_os("CIFAR_DIR") else {
        r.line(10, "CIFAR-10 smoke", Status::Skip, "CIFAR_DIR not set".into());
        return;
    };
    let full = match load_cifar10_train(&dir) {
        Ok(d) => d,
        Err(e) => {
            r.line(10, "CIFAR-10 smoke", Status::Info, format!("could not load data: {e}"));
            return;
        }
    };
    let means = full.channel_means();
    let data = full.take(5000).unwrap();
    let cfg = SearchConfig { depth: 4, epochs: 10, ..SearchConfig::default() };
    let start = Instant::now();
    let out = run_search_with(&cfg, &data, |m| say(&format!("     cifar epoch {}: val_acc {:.3}, {:.0}s", m.epoch, m.val_acc, m.seconds))).unwrap();
    let acc = out.final_eval.accuracy;
    r.line(
        10,
        "CIFAR-10 smoke",
        Status::Info,
        format!(
            "5000 images, depth 4, 10 epochs: val acc {acc:.4} ({} 0.40), {:.0}s; full-set channel means {:.4} {:.4} {:.4} ({} 0.02 of zero)",
            if acc >= 0.4 { "meets" } else { "below" },
            start.elapsed().as_secs_f64(),
            means[0],
            means[1],
            means[2],
            if means.iter().all(|m| m.abs() <= 0.02) { "within" } else { "NOT within" }
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let mut r = Report::new();
    let mut attention_run = None;
    if r.wants(1) {
        full_scale(&mut r);
    }
    if r.wants(2) {
        gradient_oracle(&mut r);
    }
    if r.wants(3) {
        partial_equals_full_at_k1(&mut r);
    }
    if r.wants(4) {
        mask_law(&mut r);
    }
    if r.wants(5) {
        memory_scaling(&mut r);
    }
    if r.wants(6) {
        genotype_oracle(&mut r);
    }
    if r.wants(7) {
        attention_run = end_to_end(&mut r);
    }
    if r.wants(8) {
        skip_collapse(&mut r, attention_run);
    }
    if r.wants(9) {
        ablations(&mut r);
    }
    if r.wants(10) {
        cifar_smoke(&mut r);
    }
    assert!(r.failures.is_empty(), "failed criteria: {:?}", r.failures);
}
