//! Independent f64 re-implementation of the slot-attention and connector
//! forward passes, used as a finite-difference oracle, plus small helpers
//! shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use sfslots::connector::SfSlotsConfig;
use sfslots::slot_attention::SlotAttentionConfig;
use sfslots::{ParamStore, Tensor};

/// Row-major f64 matrix.
#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn zeros(r: usize, c: usize) -> Self {
        Self { r, c, d: vec![0.0; r * c] }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn rows(&self, idx: &[usize]) -> M {
        let mut out = M::zeros(idx.len(), self.c);
        for (o, &i) in idx.iter().enumerate() {
            out.d[o * self.c..(o + 1) * self.c].copy_from_slice(&self.d[i * self.c..(i + 1) * self.c]);
        }
        out
    }

    pub fn from_tensor(t: &Tensor) -> M {
        let dims = t.dims();
        let c = *dims.last().unwrap_or(&1);
        let r = if c == 0 { 0 } else { t.numel() / c };
        M { r, c, d: t.data().iter().map(|&v| v as f64).collect() }
    }
}

pub type Params = BTreeMap<String, M>;

pub fn params64(store: &ParamStore) -> Params {
    store.iter().map(|(n, t)| (n.clone(), M::from_tensor(t))).collect()
}

fn p<'a>(ps: &'a Params, name: &str) -> &'a M {
    ps.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

pub fn matmul(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.r);
    let mut out = M::zeros(a.r, b.c);
    for i in 0..a.r {
        for k in 0..a.c {
            let av = a.at(i, k);
            for j in 0..b.c {
                out.d[i * b.c + j] += av * b.at(k, j);
            }
        }
    }
    out
}

fn transpose(a: &M) -> M {
    let mut out = M::zeros(a.c, a.r);
    for i in 0..a.r {
        for j in 0..a.c {
            out.d[j * a.r + i] = a.at(i, j);
        }
    }
    out
}

fn zip(a: &M, b: &M, f: impl Fn(f64, f64) -> f64) -> M {
    assert_eq!((a.r, a.c), (b.r, b.c));
    M { r: a.r, c: a.c, d: a.d.iter().zip(&b.d).map(|(x, y)| f(*x, *y)).collect() }
}

fn map(a: &M, f: impl Fn(f64) -> f64) -> M {
    M { r: a.r, c: a.c, d: a.d.iter().map(|&x| f(x)).collect() }
}

fn add_row(a: &M, row: &M) -> M {
    assert_eq!(row.d.len(), a.c);
    let mut out = a.clone();
    for i in 0..a.r {
        for j in 0..a.c {
            out.d[i * a.c + j] += row.d[j];
        }
    }
    out
}

fn concat(parts: &[M]) -> M {
    let c = parts[0].c;
    let mut d = Vec::new();
    for p in parts {
        assert_eq!(p.c, c);
        d.extend_from_slice(&p.d);
    }
    M { r: d.len() / c, c, d }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_norm(ps: &Params, prefix: &str, x: &M) -> M {
    let gain = p(ps, &format!("{prefix}.gain"));
    let bias = p(ps, &format!("{prefix}.bias"));
    let mut out = x.clone();
    for i in 0..x.r {
        let row = &x.d[i * x.c..(i + 1) * x.c];
        let mean = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        let s = 1.0 / (var + 1e-5).sqrt();
        for j in 0..x.c {
            out.d[i * x.c + j] = (row[j] - mean) * s * gain.d[j] + bias.d[j];
        }
    }
    out
}

fn linear(ps: &Params, prefix: &str, x: &M, bias: bool) -> M {
    let y = matmul(x, p(ps, &format!("{prefix}.w")));
    if bias {
        add_row(&y, p(ps, &format!("{prefix}.b")))
    } else {
        y
    }
}

fn gru(ps: &Params, prefix: &str, h: &M, x: &M) -> M {
    let gate = |g: &str, x: &M, h: &M| {
        let a = matmul(x, p(ps, &format!("{prefix}.w{g}")));
        let b = matmul(h, p(ps, &format!("{prefix}.u{g}")));
        add_row(&zip(&a, &b, |u, v| u + v), p(ps, &format!("{prefix}.b{g}")))
    };
    let z = map(&gate("z", x, h), sigmoid);
    let r = map(&gate("r", x, h), sigmoid);
    let rh = zip(&r, h, |a, b| a * b);
    let cand = map(&gate("h", x, &rh), f64::tanh);
    let mut out = h.clone();
    for i in 0..out.d.len() {
        out.d[i] = (1.0 - z.d[i]) * h.d[i] + z.d[i] * cand.d[i];
    }
    out
}

/// Slots after `cfg.iters` iterations, and the final-iteration mask.
pub fn slot_attention(ps: &Params, prefix: &str, cfg: &SlotAttentionConfig, inputs: &M) -> (M, M) {
    let x = layer_norm(ps, &format!("{prefix}.norm_in"), inputs);
    let k = linear(ps, &format!("{prefix}.wk"), &x, false);
    let v = linear(ps, &format!("{prefix}.wv"), &x, false);
    let scale = 1.0 / (cfg.d_slot as f64).sqrt();
    let mut slots = p(ps, &format!("{prefix}.init_slots")).clone();
    let mut mask = M::zeros(0, 0);
    for _ in 0..cfg.iters {
        let s = layer_norm(ps, &format!("{prefix}.norm_slots"), &slots);
        let q = linear(ps, &format!("{prefix}.wq"), &s, false);
        let logits = map(&matmul(&k, &transpose(&q)), |l| l * scale);
        // softmax over slots (row-wise)
        let mut a = logits.clone();
        for i in 0..a.r {
            let row = &mut a.d[i * a.c..(i + 1) * a.c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - m).exp()).sum();
            for l in row.iter_mut() {
                *l = (*l - m).exp() / z;
            }
        }
        let mut w = a.clone();
        for j in 0..w.c {
            let denom: f64 = (0..w.r).map(|i| a.at(i, j)).sum::<f64>() + cfg.eps as f64;
            for i in 0..w.r {
                w.d[i * w.c + j] = a.at(i, j) / denom;
            }
        }
        let updates = matmul(&transpose(&w), &v);
        slots = gru(ps, &format!("{prefix}.gru"), &slots, &updates);
        let h = layer_norm(ps, &format!("{prefix}.norm_mlp"), &slots);
        let h = linear(ps, &format!("{prefix}.mlp.fc1"), &h, true);
        let h = map(&h, |u| u * sigmoid(1.702 * u));
        let h = linear(ps, &format!("{prefix}.mlp.fc2"), &h, true);
        slots = zip(&slots, &h, |a, b| a + b);
        mask = a;
    }
    (slots, mask)
}

/// Connector output tokens for a `[T, H, W, D]` video given as flat data.
pub fn connect(ps: &Params, cfg: &SfSlotsConfig, video: &[f64], frames: usize) -> M {
    let (h, w, d) = (cfg.height, cfg.width, cfg.d_in);
    let flat = M { r: frames * h * w, c: d, d: video.to_vec() };
    // slow branch: centered uniform frame sampling
    let mut slow = Vec::new();
    for i in 0..cfg.slow_frames {
        let f = ((2 * i + 1) * frames) / (2 * cfg.slow_frames);
        let rows: Vec<usize> = (f * h * w..(f + 1) * h * w).collect();
        let (slots, _) = slot_attention(ps, "slow.sa", &cfg.slow_attention(), &flat.rows(&rows));
        let pos = p(ps, "slow.pos").rows(&[i]);
        slow.push(add_row(&slots, &pos));
    }
    let slow = linear(ps, "slow.proj", &concat(&slow), true);
    // fast branch: s x s average pooling, temporal embedding, per-position slots
    let s = cfg.pool_stride;
    let (hd, wd) = (h / s, w / s);
    let table = p(ps, "fast.pos");
    let mut fast = Vec::new();
    for by in 0..hd {
        for bx in 0..wd {
            let mut set = M::zeros(frames, d);
            for t in 0..frames {
                for y in by * s..(by + 1) * s {
                    for x in bx * s..(bx + 1) * s {
                        for c in 0..d {
                            set.d[t * d + c] += flat.at((t * h + y) * w + x, c) / (s * s) as f64;
                        }
                    }
                }
                for c in 0..d {
                    set.d[t * d + c] += table.at(t, c);
                }
            }
            fast.push(slot_attention(ps, "fast.sa", &cfg.fast_attention(), &set).0);
        }
    }
    let fast = linear(ps, "fast.proj", &concat(&fast), true);
    linear(ps, "proj", &concat(&[slow, fast]), true)
}

/// `sum(out * weights)`.
pub fn weighted_sum(out: &M, weights: &[f64]) -> f64 {
    out.d.iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Relative error with a small floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` along coordinate `(name, i)` of `ps`.
pub fn central_diff(ps: &Params, name: &str, i: usize, h: f64, f: &dyn Fn(&Params) -> f64) -> f64 {
    let mut plus = ps.clone();
    plus.get_mut(name).unwrap().d[i] += h;
    let mut minus = ps.clone();
    minus.get_mut(name).unwrap().d[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Samples `n` `(name, index)` coordinates, weighting every scalar equally.
pub fn sample_coords<R: Rng>(ps: &Params, n: usize, rng: &mut R) -> Vec<(String, usize)> {
    let names: Vec<(&String, usize)> = ps.iter().map(|(k, m)| (k, m.d.len())).collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    (0..n)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            for (name, len) in &names {
                if k < *len {
                    return ((*name).clone(), k);
                }
                k -= len;
            }
            unreachable!()
        })
        .collect()
}

/// Relative-error tolerance and step of the gradient checks.
pub const GRAD_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-3;

/// Outcome of one gradient-check instance.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub passed: usize,
    pub total: usize,
    /// Largest gap between the f32 forward and the f64 reference.
    pub forward_gap: f64,
}

impl GradCheck {
    pub fn add(self, o: GradCheck) -> GradCheck {
        GradCheck {
            passed: self.passed + o.passed,
            total: self.total + o.total,
            forward_gap: self.forward_gap.max(o.forward_gap),
        }
    }

    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.total.max(1) as f64
    }
}

fn random_tensor<R: Rng>(rng: &mut R, dims: &[usize], std: f32) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0) * std * 1.7).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

/// Moves norm gains and biases off their 1 / 0 initialization so their
/// gradients are generic.
fn jitter_norms<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    let names: Vec<String> = store.names().filter(|n| n.contains("norm")).cloned().collect();
    for n in names {
        let t = store.get(&n).unwrap().clone();
        let base = if n.ends_with("gain") { 1.0 } else { 0.0 };
        let data = t.data().iter().map(|_| base + rng.random_range(-0.3f32..0.3)).collect();
        store.insert(n, Tensor::new(t.dims().to_vec(), data).unwrap());
    }
}

fn check_coords(
    analytic: &BTreeMap<String, Tensor>,
    ps: &Params,
    coords: &[(String, usize)],
    f: &dyn Fn(&Params) -> f64,
) -> (usize, usize) {
    let mut passed = 0;
    for (name, i) in coords {
        let a = analytic[name].data()[*i] as f64;
        let n = central_diff(ps, name, *i, FD_STEP, f);
        if rel_err(a, n) <= GRAD_TOL {
            passed += 1;
        }
    }
    (passed, coords.len())
}

pub fn mini_attention() -> SlotAttentionConfig {
    SlotAttentionConfig {
        n_slots: 4,
        d_in: 3,
        d_slot: 4,
        iters: 3,
        mlp_hidden: 8,
        init_std: 0.5,
        ..Default::default()
    }
}

/// Gradient check of slot attention (R = 3) on a random `[6, 3]` input set.
pub fn slot_attention_gradcheck(seed: u64, coords: usize) -> GradCheck {
    use rand::SeedableRng;
    use sfslots::slot_attention::SlotAttention;
    use sfslots::Graph;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = mini_attention();
    let sa = SlotAttention::new("sa", cfg.clone()).unwrap();
    let mut store = ParamStore::new();
    sa.init(&mut store, &mut rng);
    jitter_norms(&mut store, &mut rng);
    let inputs = random_tensor(&mut rng, &[6, 3], 1.0);
    let weights: Vec<f64> = (0..cfg.n_slots * cfg.d_slot).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let x = g.leaf(inputs.clone(), true);
    let out = sa.forward(&mut g, &store, x).unwrap();
    let wt = g.input(Tensor::new(vec![cfg.n_slots, cfg.d_slot], weights.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = g.mul(out.slots, wt).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let mut analytic: BTreeMap<String, Tensor> = g.param_grads().into_iter().collect();
    analytic.insert("inputs".into(), g.grad(x));
    let f32_slots = M::from_tensor(g.value(out.slots));

    let mut ps = params64(&store);
    ps.insert("inputs".into(), M::from_tensor(&inputs));
    let f = |ps: &Params| {
        let (slots, _) = slot_attention(ps, "sa", &cfg, p(ps, "inputs"));
        weighted_sum(&slots, &weights)
    };
    let (ref_slots, _) = slot_attention(&ps, "sa", &cfg, p(&ps, "inputs"));
    let forward_gap = f32_slots.d.iter().zip(&ref_slots.d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let picked = sample_coords(&ps, coords, &mut rng);
    let (passed, total) = check_coords(&analytic, &ps, &picked, &f);
    GradCheck { passed, total, forward_gap }
}

/// The 2 x 4 x 4 x 3 miniature connector configuration.
pub fn mini_connector() -> SfSlotsConfig {
    SfSlotsConfig {
        height: 4,
        width: 4,
        d_in: 3,
        slow_frames: 2,
        pool_stride: 2,
        slow_slots: 3,
        fast_slots: 2,
        d_slot: 4,
        d_out: 5,
        max_frames: 2,
        slow_iters: 3,
        fast_iters: 3,
        mlp_hidden: 8,
        ..Default::default()
    }
}

/// Gradient check through the full two-branch connector on a 2 x 4 x 4 x 3 video.
pub fn connect_gradcheck(seed: u64, coords: usize) -> GradCheck {
    use rand::SeedableRng;
    use sfslots::connector::{Branches, SfConnector};
    use sfslots::Graph;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = mini_connector();
    let conn = SfConnector::new(cfg.clone()).unwrap();
    let mut store = ParamStore::new();
    conn.init(&mut store, &mut rng);
    jitter_norms(&mut store, &mut rng);
    // larger embeddings and slot inits than the defaults so every path matters
    for name in ["slow.pos", "fast.pos", "slow.sa.init_slots", "fast.sa.init_slots"] {
        let dims = store.get(name).unwrap().dims().to_vec();
        store.insert(name, random_tensor(&mut rng, &dims, 0.5));
    }
    let video = random_tensor(&mut rng, &[2, 4, 4, 3], 1.0);
    let n_out = cfg.token_count() * cfg.d_out;
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let v = g.leaf(video.clone(), true);
    let out = conn.connect_var(&mut g, &store, v, Branches::Both).unwrap();
    let wt = g.input(Tensor::new(vec![cfg.token_count(), cfg.d_out], weights.iter().map(|&x| x as f32).collect()).unwrap());
    let prod = g.mul(out.tokens, wt).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let mut analytic: BTreeMap<String, Tensor> = g.param_grads().into_iter().collect();
    analytic.insert("video".into(), g.grad(v));
    let f32_tokens = M::from_tensor(g.value(out.tokens));

    let mut ps = params64(&store);
    ps.insert("video".into(), M::from_tensor(&video));
    let f = |ps: &Params| weighted_sum(&connect(ps, &cfg, &p(ps, "video").d, 2), &weights);
    let ref_tokens = connect(&ps, &cfg, &p(&ps, "video").d, 2);
    let forward_gap = f32_tokens.d.iter().zip(&ref_tokens.d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let picked = sample_coords(&ps, coords, &mut rng);
    let (passed, total) = check_coords(&analytic, &ps, &picked, &f);
    GradCheck { passed, total, forward_gap }
}
