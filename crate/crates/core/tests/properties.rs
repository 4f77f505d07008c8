//! Property tests over randomly generated shapes, inputs and parameters.

mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sfslots::baselines::{pooled_tokens, slowfast_wrap, wrapped_tokens, PoolingConnector, QueryTransformerConfig};
use sfslots::connector::{uniform_sample_frames, Branch, Branches, Provenance, SfConnector, SfSlotsConfig, SourceMask, VideoFeatures};
use sfslots::decoder::{recon_loss, recon_mse, DecoderConfig, ReconDecoder};
use sfslots::metrics::{ari, slot_overlap, spatial_ari, temporal_ari};
use sfslots::params::normal;
use sfslots::render::{parse_index, parse_pgm, quantize, render_masks, INDEX_FILE};
use sfslots::rng::stream;
use sfslots::slot_attention::{permute_slots_check, AttentionMask, MaskLayout, SlotAttention, SlotAttentionConfig};
use sfslots::synthetic::{Dataset, SceneRanges};
use sfslots::tensor::{avg_pool_grid, matmul, softmax_axis};
use sfslots::training::cosine_lr;
use sfslots::{Graph, ParamStore, Tensor};

fn random(seed: u64, dims: &[usize], std: f32) -> Tensor {
    normal(&mut stream(seed, "prop", 0), dims, std)
}

fn attention(n_slots: usize, d_in: usize, iters: usize, seed: u64) -> (SlotAttention, ParamStore) {
    let cfg = SlotAttentionConfig {
        n_slots,
        d_in,
        d_slot: 6,
        iters,
        mlp_hidden: 12,
        init_std: 0.5,
        ..Default::default()
    };
    let sa = SlotAttention::new("sa", cfg).unwrap();
    let mut store = ParamStore::new();
    sa.init(&mut store, &mut stream(seed, "init", 0));
    (sa, store)
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

fn small_connector(h: usize, stride: usize, t_d: usize, ns: usize, nf: usize) -> SfSlotsConfig {
    SfSlotsConfig {
        height: h,
        width: h,
        d_in: 3,
        slow_frames: t_d,
        pool_stride: stride,
        slow_slots: ns,
        fast_slots: nf,
        d_slot: 4,
        d_out: 5,
        max_frames: 16,
        mlp_hidden: 8,
        ..Default::default()
    }
}

fn one_hot(labels: &[usize], slots: usize) -> Tensor {
    let mut w = vec![0.0; labels.len() * slots];
    for (i, &l) in labels.iter().enumerate() {
        w[i * slots + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), slots], w).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_slices_sum_to_one(rows in 1usize..6, cols in 1usize..6, depth in 1usize..4, axis in 0usize..3, seed: u64, scale in 0.1f32..50.0) {
        let x = random(seed, &[rows, cols, depth], scale);
        let y = softmax_axis(&x, axis).unwrap();
        let dims = [rows, cols, depth];
        let strides = [cols * depth, depth, 1];
        for base in 0..x.numel() {
            let coord = [base / strides[0], (base / strides[1]) % cols, base % depth];
            if coord[axis] != 0 {
                continue;
            }
            let s: f32 = (0..dims[axis]).map(|k| y.data()[base + k * strides[axis]]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "slice sum {s}");
        }
    }

    #[test]
    fn matmul_is_associative(seed: u64) {
        let a = random(seed, &[4, 4], 1.0);
        let b = random(seed ^ 1, &[4, 4], 1.0);
        let c = random(seed ^ 2, &[4, 4], 1.0);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-4);
    }

    #[test]
    fn engine_ops_are_bitwise_deterministic(seed: u64) {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(random(seed, &[5, 4], 1.0), true);
            let w = g.leaf(random(seed ^ 9, &[4, 3], 1.0), true);
            let y = g.matmul(x, w).unwrap();
            let y = g.softmax(y, 1).unwrap();
            let l = g.sum(y).unwrap();
            let l = g.mul(l, l).unwrap();
            g.backward(l).unwrap();
            (g.value(y).clone(), g.grad(x), g.grad(w))
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn mask_rows_sum_to_one_for_any_iteration_count(iters in 1usize..6, m in 1usize..12, n in 1usize..6, seed: u64) {
        let (sa, store) = attention(n, 5, iters, seed);
        let (_, mask) = sa.run(&store, &random(seed ^ 3, &[m, 5], 2.0)).unwrap();
        for i in 0..m {
            let s: f32 = mask.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn permuting_initial_slots_permutes_outputs(n in 2usize..7, seed: u64, pseed: u64) {
        let (sa, store) = attention(n, 5, 3, seed);
        let x = random(seed ^ 5, &[9, 5], 1.0);
        prop_assert!(permute_slots_check(&sa, &store, &x, &permutation(n, pseed), 1e-5).unwrap());
    }

    #[test]
    fn updates_stay_in_value_hull_without_epsilon(m in 1usize..10, n in 1usize..6, d in 1usize..5, seed: u64) {
        let mut g = Graph::inference();
        let logits = g.input(random(seed, &[m, n], 3.0));
        let v = g.input(random(seed ^ 7, &[m, d], 1.0));
        let a = g.softmax(logits, 1).unwrap();
        let sums = g.value(a).clone();
        let w = g.col_normalize(a, 0.0).unwrap();
        let u = g.matmul_tn(w, v).unwrap();
        let (u, v) = (g.value(u).clone(), g.value(v).clone());
        for slot in 0..n {
            let total: f32 = (0..m).map(|i| sums.get2(i, slot)).sum();
            if total <= 1e-6 {
                continue;
            }
            for c in 0..d {
                let col: Vec<f32> = (0..m).map(|i| v.get2(i, c)).collect();
                let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let x = u.get2(slot, c);
                prop_assert!(x >= lo - 1e-5 && x <= hi + 1e-5, "{x} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn input_order_only_permutes_mask_rows(m in 2usize..10, seed: u64, pseed: u64) {
        let (sa, store) = attention(4, 5, 3, seed);
        let x = random(seed ^ 11, &[m, 5], 1.0);
        let perm = permutation(m, pseed);
        let mut shuffled = Vec::new();
        for &p in &perm {
            shuffled.extend_from_slice(x.row(p));
        }
        let xs = Tensor::new(vec![m, 5], shuffled).unwrap();
        let (slots, mask) = sa.run(&store, &x).unwrap();
        let (pslots, pmask) = sa.run(&store, &xs).unwrap();
        prop_assert!(slots.max_abs_diff(&pslots) <= 1e-5);
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in pmask.row(i).iter().zip(mask.row(p)) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn pooled_cells_are_block_means(t in 1usize..3, blocks in 1usize..3, stride in 1usize..4, d in 1usize..4, seed: u64) {
        let h = blocks * stride;
        let x = random(seed, &[t, h, h, d], 1.0);
        let y = avg_pool_grid(&x, stride).unwrap();
        prop_assert_eq!(y.dims(), &[t, blocks, blocks, d][..]);
        for f in 0..t {
            for (bi, bj, c) in (0..blocks).flat_map(|i| (0..blocks).flat_map(move |j| (0..d).map(move |c| (i, j, c)))) {
                let mut acc = 0.0f32;
                for di in 0..stride {
                    for dj in 0..stride {
                        acc += x.data()[((f * h + bi * stride + di) * h + bj * stride + dj) * d + c];
                    }
                }
                let want = acc * (1.0 / (stride * stride) as f32);
                let got = y.data()[((f * blocks + bi) * blocks + bj) * d + c];
                prop_assert_eq!(got.to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn pooling_tokens_are_exact_means_and_order_free(t in 1usize..5, h in 1usize..4, seed: u64, pseed: u64) {
        let d = 3;
        let grid = random(seed, &[t, h, h, d], 1.0);
        let tokens = pooled_tokens(&VideoFeatures::new(grid.clone()).unwrap());
        prop_assert_eq!(tokens.dims(), &[PoolingConnector::token_count(t, h, h), d][..]);
        let cells = h * h;
        let at = |f: usize, c: usize, k: usize| grid.data()[(f * cells + c) * d + k] as f64;
        for k in 0..d {
            for f in 0..t {
                let want = (0..cells).map(|c| at(f, c, k)).sum::<f64>() / cells as f64;
                prop_assert!((tokens.get2(f, k) as f64 - want).abs() <= 1e-6);
            }
            for c in 0..cells {
                let want = (0..t).map(|f| at(f, c, k)).sum::<f64>() / t as f64;
                prop_assert!((tokens.get2(t + c, k) as f64 - want).abs() <= 1e-6);
            }
        }
        // a spatial shuffle applied to every frame permutes cell tokens only
        let perm = permutation(cells, pseed);
        let mut shuffled = Vec::with_capacity(grid.numel());
        for f in 0..t {
            for &p in &perm {
                shuffled.extend_from_slice(&grid.data()[(f * cells + p) * d..(f * cells + p + 1) * d]);
            }
        }
        let st = pooled_tokens(&VideoFeatures::new(Tensor::new(vec![t, h, h, d], shuffled).unwrap()).unwrap());
        for f in 0..t {
            for k in 0..d {
                prop_assert!((st.get2(f, k) - tokens.get2(f, k)).abs() <= 1e-6);
            }
        }
        for (c, &p) in perm.iter().enumerate() {
            prop_assert_eq!(st.row(t + c), tokens.row(t + p));
        }
    }

    #[test]
    fn cosine_schedule_never_increases(total in 0u64..3000, lo in 0.0f32..1e-3, span in 0.0f32..1e-2) {
        let hi = lo + span;
        let mut prev = cosine_lr(0, total, hi, lo).unwrap();
        prop_assert_eq!(prev, hi);
        for step in 1..=total {
            let lr = cosine_lr(step, total, hi, lo).unwrap();
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn ari_ignores_cluster_names(labels in proptest::collection::vec((0usize..4, 0usize..4), 2..40), pseed: u64) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
        let rename = permutation(4, pseed);
        let renamed: Vec<usize> = pred.iter().map(|&p| rename[p] + 10).collect();
        let a = ari(&pred, &truth).unwrap();
        let b = ari(&renamed, &truth).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a <= 1.0 + 1e-12);
    }

    #[test]
    fn recon_loss_is_nonnegative_and_zero_only_on_equality(rows in 1usize..6, cols in 1usize..6, seed: u64, flip in 0usize..36) {
        let a = random(seed, &[rows, cols], 1.0);
        prop_assert_eq!(recon_mse(&a, &a).unwrap(), 0.0);
        let b = random(seed ^ 13, &[rows, cols], 1.0);
        prop_assert!(recon_mse(&a, &b).unwrap() >= 0.0);
        let mut c = a.clone();
        c.data_mut()[flip % (rows * cols)] += 0.5;
        prop_assert!(recon_mse(&a, &c).unwrap() > 0.0);
    }

    #[test]
    fn decoding_ignores_slot_order(n in 1usize..7, seed: u64, pseed: u64) {
        let cfg = DecoderConfig { positions: 5, d_slot: 6, d_out: 4, layers: 2, ff_hidden: 8, ..Default::default() };
        let dec = ReconDecoder::new("dec", cfg).unwrap();
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut stream(seed, "dec", 0));
        let slots = random(seed ^ 17, &[n, 6], 1.0);
        let perm = permutation(n, pseed);
        let mut rows = Vec::new();
        for &p in &perm {
            rows.extend_from_slice(slots.row(p));
        }
        let (a, _) = dec.run(&store, &slots).unwrap();
        let (b, _) = dec.run(&store, &Tensor::new(vec![n, 6], rows).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-5);
    }

    #[test]
    fn overlap_of_disjoint_masks_is_zero(n in 2usize..6, extra in 0usize..10, seed: u64) {
        let labels: Vec<usize> = (0..n + extra).map(|i| if i < n { i } else { permutation(n, seed + i as u64)[0] }).collect();
        let m = AttentionMask::new(one_hot(&labels, n), MaskLayout::Temporal { frames: labels.len() }).unwrap();
        prop_assert_eq!(slot_overlap(&m).unwrap(), 0.0);
    }

    #[test]
    fn overlap_of_rank_one_masks_is_one(rows in 1usize..8, n in 2usize..6, seed: u64) {
        let u: Vec<f32> = random(seed, &[rows], 1.0).data().iter().map(|x| x.abs() + 0.1).collect();
        let v: Vec<f32> = random(seed ^ 1, &[n], 1.0).data().iter().map(|x| x.abs() + 0.1).collect();
        let w: Vec<f32> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let m = AttentionMask::new(Tensor::new(vec![rows, n], w).unwrap(), MaskLayout::Temporal { frames: rows }).unwrap();
        prop_assert!((slot_overlap(&m).unwrap() - 1.0).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn token_count_follows_the_grid(blocks in 1usize..3, stride in 1usize..3, t_d in 1usize..4, extra in 0usize..4, ns in 1usize..4, nf in 1usize..4, seed: u64) {
        let cfg = small_connector(blocks * stride, stride, t_d, ns, nf);
        let conn = SfConnector::new(cfg.clone()).unwrap();
        let mut store = ParamStore::new();
        conn.init(&mut store, &mut stream(seed, "init", 0));
        let t = t_d + extra;
        let h = blocks * stride;
        let video = VideoFeatures::new(random(seed, &[t, h, h, 3], 1.0)).unwrap();
        let out = conn.run(&store, &video).unwrap();
        let want = t_d * ns + blocks * blocks * nf;
        prop_assert_eq!(cfg.token_count(), want);
        prop_assert_eq!(out.tokens.dims(), &[want, 5][..]);

        let mut expected: Vec<Provenance> = Vec::new();
        for source in 0..t_d {
            expected.extend((0..ns).map(|slot| Provenance { branch: Branch::Slow, source, slot }));
        }
        for source in 0..blocks * blocks {
            expected.extend((0..nf).map(|slot| Provenance { branch: Branch::Fast, source, slot }));
        }
        prop_assert_eq!(&out.provenance, &expected);

        for m in &out.masks {
            for s in m.mask.row_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-5);
            }
        }

        let qt = QueryTransformerConfig { heads: 2, ff_hidden: 8, ..Default::default() };
        let wrapped = slowfast_wrap(&cfg, &qt).unwrap();
        let mut qstore = ParamStore::new();
        wrapped.init(&mut qstore, &mut stream(seed, "init", 1));
        for b in [Branches::Slow, Branches::Fast, Branches::Both] {
            let (tokens, prov) = wrapped_tokens(&wrapped, &qstore, &video, b).unwrap();
            prop_assert_eq!(tokens.dims()[0], cfg.tokens_for(b));
            let own = conn.run_branches(&store, &video, b).unwrap();
            prop_assert_eq!(tokens.dims()[0], own.tokens.dims()[0]);
            prop_assert_eq!(prov, own.provenance);
        }
    }

    #[test]
    fn recon_gradient_reaches_initial_slots(m in 2usize..8, seed: u64) {
        let (sa, store) = attention(3, 4, 3, seed);
        let dec = ReconDecoder::new("dec", DecoderConfig { positions: m, d_slot: 6, d_out: 4, layers: 1, ff_hidden: 8, ..Default::default() }).unwrap();
        let mut store = store;
        dec.init(&mut store, &mut stream(seed, "dec", 0));
        let mut g = Graph::new();
        let x = g.input(random(seed ^ 19, &[m, 4], 1.0));
        let out = sa.forward(&mut g, &store, x).unwrap();
        let decoded = dec.decode(&mut g, &store, out.slots).unwrap();
        let loss = recon_loss(&mut g, decoded.recon, x).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        let (_, grad) = grads.iter().find(|(n, _)| *n == sa.init_slots_name()).unwrap();
        prop_assert!(grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn datasets_are_deterministic_and_restartable(seed: u64, start in 0u64..1000, n in 1usize..4) {
        let ranges = SceneRanges { frames: 6, height: 8, width: 8, extent: (2, 4), ..Default::default() };
        let a = Dataset::new(seed, ranges.clone()).unwrap();
        let b = Dataset::new(seed, ranges).unwrap();
        let run = a.scenes(start, n).unwrap();
        for (j, s) in run.iter().enumerate() {
            let again = b.scene(start + j as u64).unwrap();
            prop_assert_eq!(&s.video.grid, &again.video.grid);
            prop_assert_eq!(&s.truth, &again.truth);
        }
    }

    #[test]
    fn noiseless_objects_share_mask_rows(seed: u64) {
        let ranges = SceneRanges { frames: 8, height: 8, width: 8, noise: 0.0, extent: (2, 4), ..Default::default() };
        let scene = Dataset::new(seed, ranges).unwrap().scene(0).unwrap();
        let cfg = SfSlotsConfig { height: 8, width: 8, d_in: 32, slow_frames: 2, d_slot: 16, mlp_hidden: 16, d_out: 8, ..Default::default() };
        let conn = SfConnector::new(cfg).unwrap();
        let mut store = ParamStore::new();
        conn.init(&mut store, &mut stream(seed, "init", 0));
        let out = conn.run_branches(&store, &scene.video, Branches::Slow).unwrap();
        let frames = uniform_sample_frames(8, 2).unwrap();
        for m in &out.masks {
            let labels = scene.truth.frame_objects(frames[m.source]);
            for i in 0..labels.len() {
                for j in i + 1..labels.len() {
                    if labels[i] == labels[j] {
                        for (a, b) in m.mask.row(i).iter().zip(m.mask.row(j)) {
                            prop_assert!((a - b).abs() <= 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn perfect_masks_score_one(seed: u64) {
        let ranges = SceneRanges { frames: 8, height: 8, width: 8, extent: (2, 5), max_speed: 1.0, ..Default::default() };
        let scene = Dataset::new(seed, ranges).unwrap().scene(0).unwrap();
        let truth = &scene.truth;
        let slots = truth.n_objects + 1;
        let frames = uniform_sample_frames(truth.frames, 4).unwrap();
        let mut masks: Vec<SourceMask> = frames
            .iter()
            .enumerate()
            .map(|(source, &f)| SourceMask {
                branch: Branch::Slow,
                source,
                mask: AttentionMask::new(one_hot(truth.frame_objects(f), slots), MaskLayout::Spatial { height: 8, width: 8 }).unwrap(),
                head_masks: Vec::new(),
            })
            .collect();
        prop_assert_eq!(spatial_ari(&masks, truth, 4).unwrap(), Some(1.0));
        masks.clear();
        for k in 0..truth.positions() {
            masks.push(SourceMask {
                branch: Branch::Fast,
                source: k,
                mask: AttentionMask::new(one_hot(truth.position_segments(k), slots), MaskLayout::Temporal { frames: 8 }).unwrap(),
                head_masks: Vec::new(),
            });
        }
        let score = temporal_ari(&masks, truth).unwrap();
        prop_assert!(score.is_none() || score == Some(1.0));
    }

    #[test]
    fn rendered_masks_parse_back_exactly(rows in 1usize..6, cols in 1usize..6, n in 1usize..4, frames in 1usize..8, seed: u64) {
        let dir = tempfile::tempdir().unwrap();
        let spatial = softmax_axis(&random(seed, &[rows * cols, n], 2.0), 1).unwrap();
        let temporal = softmax_axis(&random(seed ^ 1, &[frames, n], 2.0), 1).unwrap();
        let masks = vec![
            SourceMask { branch: Branch::Slow, source: 1, mask: AttentionMask::new(spatial, MaskLayout::Spatial { height: rows, width: cols }).unwrap(), head_masks: Vec::new() },
            SourceMask { branch: Branch::Fast, source: 4, mask: AttentionMask::new(temporal, MaskLayout::Temporal { frames }).unwrap(), head_masks: Vec::new() },
        ];
        let entries = render_masks(&masks, dir.path()).unwrap();
        let index = std::fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap();
        prop_assert_eq!(&parse_index(&index).unwrap(), &entries);
        let again = tempfile::tempdir().unwrap();
        prop_assert_eq!(&render_masks(&masks, again.path()).unwrap(), &entries);
        for e in &entries {
            let m = masks.iter().find(|m| m.branch == e.branch && m.source == e.source).unwrap();
            let bytes = std::fs::read(dir.path().join(&e.file)).unwrap();
            prop_assert_eq!(&bytes, &std::fs::read(again.path().join(&e.file)).unwrap());
            let (r, c, px) = parse_pgm(&bytes).unwrap();
            prop_assert_eq!((r, c), m.mask.layout.image_dims());
            let want: Vec<u8> = m.mask.column(e.slot).into_iter().map(quantize).collect();
            prop_assert_eq!(px, want);
        }
    }
}
