//! Property tests for the invariants each module promises.

use adarts_core::attention::{channel_attention_weights, AttentionUnit};
use adarts_core::commands::{csv_text, AblationKRow, ABLATION_K_HEADER};
use adarts_core::config::{RunConfig, KEYS};
use adarts_core::data::{make_synthetic, Dataset, SyntheticSpec};
use adarts_core::nn::{ConvGeometry, PoolKind};
use adarts_core::ops::{arch_softmax, CandidateOp, OpKind, OpSpace, NUM_OPS};
use adarts_core::partial::{partial_mixed_op, random_mask, select_channels};
use adarts_core::search::{run_search, Search, SearchConfig};
use adarts_core::supernet::{SearchMode, Supernet, SupernetSpec};
use adarts_core::{Graph, Group, ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

/// `out[:, i] = x[:, perm[i]]` for a `(B, C, ...)` tensor.
fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let inner = x.numel() / (b * c);
    let mut out = Vec::with_capacity(x.numel());
    for n in 0..b {
        for &p in perm {
            let at = (n * c + p) * inner;
            out.extend_from_slice(&x.values()[at..at + inner]);
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

fn channel(x: &Tensor, n: usize, c: usize) -> &[f64] {
    let inner = x.numel() / (x.shape()[0] * x.shape()[1]);
    let at = (n * x.shape()[1] + c) * inner;
    &x.values()[at..at + inner]
}

fn tiny_search(seed: u64, mode: SearchMode) -> SearchConfig {
    SearchConfig { depth: 1, channels: 4, epochs: 2, batch_size: 16, k: 2, mode, seed, ..SearchConfig::default() }
}

fn tiny_data(seed: u64) -> Dataset {
    make_synthetic(&SyntheticSpec { samples: 96, image_size: 8, seed, ..SyntheticSpec::default() }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>(), shift in -100.0f64..100.0) {
        let z = Tensor::uniform(&[rows, cols], -5.0, 5.0, &mut rng(seed));
        let shifted = Tensor::new(z.shape(), z.values().iter().map(|v| v + shift).collect()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(z), g.constant(shifted));
        let (sa, sb) = (g.softmax_lastdim(a).unwrap(), g.softmax_lastdim(b).unwrap());
        for row in g.value(sa).values().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) <= 1e-12);
    }

    #[test]
    fn conv_output_extent_follows_the_formula(
        h in 1usize..14,
        w in 1usize..14,
        kernel in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        dilation in 1usize..3,
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        let geom = ConvGeometry { kernel, stride, dilation, groups: 1 };
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[1, c, h, w], -1.0, 1.0, &mut r));
        let wt = g.constant(Tensor::uniform(&geom.weight_shape(c, 2), -1.0, 1.0, &mut r));
        let y = g.conv2d(x, wt, geom).unwrap();
        let expect = |n: usize| (n + 2 * geom.padding() - dilation * (kernel - 1) - 1) / stride + 1;
        prop_assert_eq!(g.shape(y), &[1, 2, expect(h), expect(w)][..]);
    }

    #[test]
    fn every_candidate_keeps_channels_and_extent(op in 0usize..NUM_OPS, c in 1usize..6, half in 1usize..5, stride in 1usize..3, seed in any::<u64>()) {
        let side = 2 * half;
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let cand = CandidateOp::new(OpKind::ALL[op], &mut store, &mut r, "e", c, stride);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[2, c, side, side], -1.0, 1.0, &mut r));
        let y = cand.forward(&mut g, &store, x).unwrap();
        prop_assert_eq!(g.shape(y), &[2, c, side / stride, side / stride][..]);
    }

    #[test]
    fn max_pool_commutes_with_channel_permutations(c in 1usize..6, side in 2usize..8, stride in 1usize..3, seed in any::<u64>()) {
        let x = Tensor::uniform(&[2, c, side, side], -1.0, 1.0, &mut rng(seed));
        let perm = permutation(c, seed ^ 1);
        let pool = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let y = g.pool2d(v, PoolKind::Max, stride).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(pool(permute_channels(&x, &perm)), permute_channels(&pool(x), &perm));
    }

    #[test]
    fn attention_weights_are_open_unit_and_permutation_equivariant(c in 1usize..9, r in 1usize..5, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let mut gen = rng(seed);
        let unit = AttentionUnit::new(&mut store, &mut gen, "att", c, r);
        let x = Tensor::uniform(&[3, c, 4, 4], -2.0, 2.0, &mut gen);
        let perm = permutation(c, seed ^ 2);
        let weights = |store: &ParamStore, x: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x);
            let f = channel_attention_weights(&mut g, store, &unit, v).unwrap();
            g.value(f).clone()
        };
        let f = weights(&store, x.clone());
        prop_assert!(f.values().iter().all(|&v| v > 0.0 && v < 1.0));

        // Permute w1 columns and w2 rows the same way as the input channels.
        let mut permuted = store.clone();
        let hidden = store.get(unit.w1).value.shape()[0];
        let w1 = store.get(unit.w1).value.values().to_vec();
        let w2 = store.get(unit.w2).value.values().to_vec();
        for j in 0..hidden {
            for (i, &p) in perm.iter().enumerate() {
                permuted.get_mut(unit.w1).value.values_mut()[j * c + i] = w1[j * c + p];
            }
        }
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..hidden {
                permuted.get_mut(unit.w2).value.values_mut()[i * hidden + j] = w2[p * hidden + j];
            }
        }
        let fp = weights(&permuted, permute_channels(&x, &perm));
        let expect = permute_channels(&f.reshape(&[3, c, 1, 1]).unwrap(), &perm);
        prop_assert!(fp.reshape(&[3, c, 1, 1]).unwrap().max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn mask_keeps_the_heaviest_floor_c_over_k(weights in prop::collection::vec(0.0f64..1.0, 1..64), k in 1usize..17) {
        let mask = select_channels(&weights, k).unwrap();
        prop_assert_eq!(mask.popcount(), (weights.len() / k).max(1));
        prop_assert_eq!(&select_channels(&weights, k).unwrap(), &mask);
        let lightest_kept = mask.selected().iter().map(|&i| weights[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(mask.masked().iter().all(|&i| weights[i] <= lightest_kept));
    }

    #[test]
    fn merge_inverts_complementary_slices(bits in prop::collection::vec(any::<bool>(), 2..12), seed in any::<u64>()) {
        let sel: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
        let rest: Vec<usize> = (0..bits.len()).filter(|&i| !bits[i]).collect();
        prop_assume!(!sel.is_empty() && !rest.is_empty());
        let x = Tensor::uniform(&[2, bits.len(), 3, 3], -1.0, 1.0, &mut rng(seed));
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let a = g.slice_channel(v, &sel).unwrap();
        let b = g.slice_channel(v, &rest).unwrap();
        let m = g.merge_channels(a, &sel, b, &rest).unwrap();
        prop_assert_eq!(g.value(m), &x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zeroing_a_masked_channel_zeroes_only_that_output(c in 2usize..9, k in 2usize..5, seed in any::<u64>()) {
        let mut gen = rng(seed);
        let mask = random_mask(c, k, &mut gen).unwrap();
        let masked = mask.masked();
        prop_assume!(!masked.is_empty());
        let mut store = ParamStore::new();
        let space = OpSpace::new(&mut store, &mut gen, "e", mask.popcount(), 1);
        let alpha = Tensor::uniform(&[1, NUM_OPS], -1.0, 1.0, &mut gen);
        let x = Tensor::uniform(&[2, c, 5, 5], -1.0, 1.0, &mut gen);
        let j = masked[seed as usize % masked.len()];
        let mut zeroed = x.clone();
        let inner = 25;
        for n in 0..2 {
            let at = (n * c + j) * inner;
            zeroed.values_mut()[at..at + inner].iter_mut().for_each(|v| *v = 0.0);
        }
        let run = |x: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x);
            let a = g.constant(alpha.clone());
            let w = g.softmax_lastdim(a).unwrap();
            let y = partial_mixed_op(&mut g, &store, v, &mask, w, 0, &space).unwrap();
            g.value(y).clone()
        };
        let (y, y0) = (run(x), run(zeroed));
        for n in 0..2 {
            for i in 0..c {
                if i == j {
                    prop_assert!(channel(&y0, n, i).iter().all(|&v| v == 0.0));
                } else {
                    prop_assert_eq!(channel(&y0, n, i), channel(&y, n, i));
                }
            }
        }
    }

    #[test]
    fn synthetic_data_is_balanced_and_seeded(samples in 8usize..160, classes in 2usize..6, seed in any::<u64>()) {
        let spec = SyntheticSpec { samples, n_classes: classes, image_size: 6, seed, ..SyntheticSpec::default() };
        let a = make_synthetic(&spec).unwrap();
        let mut counts = vec![0usize; classes];
        a.labels.iter().for_each(|&l| counts[l] += 1);
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        prop_assert_eq!(a, make_synthetic(&spec).unwrap());
    }

    #[test]
    fn datasets_accept_exactly_in_range_labels(labels in prop::collection::vec(0usize..6, 0..10), n_classes in 1usize..6) {
        let n = labels.len();
        let images = Tensor::zeros(&[n, 3, 2, 2]);
        let ok = n >= 2 && labels.iter().all(|&l| l < n_classes);
        prop_assert_eq!(Dataset::new(images, labels, n_classes).is_ok(), ok);
    }

    #[test]
    fn unknown_keys_are_rejected(key in "[a-zA-Z_]{1,12}") {
        prop_assume!(!KEYS.iter().any(|(k, _)| *k == key));
        let text = format!("{key}=1");
        prop_assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn numeric_keys_parse_strictly(key in prop::sample::select(vec!["depth", "channels", "epochs", "batchsize", "K", "r", "seed", "w_lr", "a_beta1", "noise"]), junk in "[a-z ]{1,6}|[0-9]+[a-z]+|[0-9]*\\.[0-9]*\\.[0-9]+") {
        let text = format!("{key}={junk}");
        prop_assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn config_text_round_trips(depth in 1usize..30, k in 1usize..17, lr in 0.0f64..1.0, noise in 0.0f64..2.0, seed in any::<u64>()) {
        let mut c = RunConfig::default();
        c.search.depth = depth;
        c.search.k = k;
        c.search.w_lr = lr;
        c.search.seed = seed;
        c.noise = noise;
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn csv_tables_are_rectangular(rows in prop::collection::vec((1usize..64, any::<u64>(), 0.0f64..1.0, 0.0f64..1e4), 0..8)) {
        let rows: Vec<AblationKRow> = rows
            .into_iter()
            .map(|(k, opspace_floats, final_val_acc, seconds)| AblationKRow { k, opspace_floats, final_val_acc, seconds })
            .collect();
        let text = csv_text(ABLATION_K_HEADER, &rows).unwrap();
        prop_assert_eq!(text.lines().next(), Some(ABLATION_K_HEADER));
        prop_assert_eq!(text.lines().count(), rows.len() + 1);
        prop_assert!(text.lines().all(|l| l.split(',').count() == 4));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn backward_is_bitwise_deterministic(seed in any::<u64>(), mode in prop::sample::select(SearchMode::ALL.to_vec())) {
        let mut store = ParamStore::new();
        let net = Supernet::build(SupernetSpec::new(1, 4, 3).with_mode(mode, 2), &mut store, &mut rng(seed)).unwrap();
        let x = Tensor::uniform(&[4, 3, 6, 6], -1.0, 1.0, &mut rng(seed ^ 3));
        let grads = |group: Group| {
            let mut s = store.clone();
            let mut g = Graph::training(group);
            let v = g.constant(x.clone());
            let logits = net.forward(&mut g, &s, v, &mut rng(seed ^ 4)).unwrap();
            let loss = g.cross_entropy(logits, &[0, 1, 2, 0]).unwrap();
            g.backward(loss).unwrap();
            s.collect_grads(&g, group);
            s.ids_in(group).into_iter().map(|id| s.get(id).value.grad.clone().unwrap()).collect::<Vec<_>>()
        };
        for group in [Group::Weights, Group::Arch] {
            let (a, b) = (grads(group), grads(group));
            prop_assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn each_step_moves_only_its_group(seed in any::<u64>(), mode in prop::sample::select(SearchMode::ALL.to_vec())) {
        let data = tiny_data(seed);
        let mut s = Search::new(tiny_search(seed, mode), data.n_classes).unwrap();
        let batch = data.batch(&(0..16).collect::<Vec<_>>());
        let values = |s: &Search, group: Group| {
            s.store.ids_in(group).into_iter().map(|id| s.store.get(id).value.clone()).collect::<Vec<_>>()
        };
        let weights = values(&s, Group::Weights);
        s.alpha_step(&batch).unwrap();
        prop_assert_eq!(values(&s, Group::Weights), weights);
        let arch = values(&s, Group::Arch);
        s.weight_step(&batch, 0.025).unwrap();
        prop_assert_eq!(values(&s, Group::Arch), arch);
    }

    #[test]
    fn searches_keep_alpha_finite_and_repeat_per_seed(seed in any::<u64>(), mode in prop::sample::select(SearchMode::ALL.to_vec())) {
        let data = tiny_data(seed);
        let cfg = tiny_search(seed, mode);
        let a = run_search(&cfg, &data).unwrap();
        prop_assert_eq!(a.metrics.len(), cfg.epochs);
        for alpha in &a.alpha_log {
            for row in alpha.normal.iter().chain(&alpha.reduce) {
                prop_assert!(row.iter().all(|v| v.is_finite()));
                prop_assert!((arch_softmax(row).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        let b = run_search(&cfg, &data).unwrap();
        prop_assert_eq!(a.genotype.to_json().unwrap(), b.genotype.to_json().unwrap());
    }
}
