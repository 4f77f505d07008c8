//! Parallel transformer decoder that reconstructs slot-attention inputs
//! from slots, used as the stage-1 pretraining objective.
//!
//! Each reconstructed token position owns a learned query; queries
//! cross-attend to the slots (softmax over slots) through a stack of layers
//! and an affine head maps them back to the feature width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Linear, Mlp, Norm};
use crate::params::{normal, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Number of reconstructed token positions.
    pub positions: usize,
    pub d_slot: usize,
    /// Reconstructed feature width.
    pub d_out: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    pub activation: Activation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            positions: 256,
            d_slot: 64,
            d_out: 32,
            layers: 2,
            ff_hidden: 64,
            activation: Activation::GeluLike,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DecLayer {
    norm_q: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    norm_ff: Norm,
    ff: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconDecoder {
    pub prefix: String,
    pub cfg: DecoderConfig,
    layers: Vec<DecLayer>,
    head: Linear,
}

/// Reconstruction plus each layer's `[positions, slots]` attention weights.
#[derive(Debug)]
pub struct Decoded {
    pub recon: Var,
    pub attention: Vec<Tensor>,
}

impl ReconDecoder {
    pub fn new(prefix: &str, cfg: DecoderConfig) -> Result<Self> {
        if cfg.positions == 0 || cfg.layers == 0 || cfg.d_slot == 0 || cfg.d_out == 0 {
            return Err(Error::Invalid(format!("decoder: degenerate config {cfg:?}")));
        }
        let d = cfg.d_slot;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                DecLayer {
                    norm_q: Norm::new(format!("{p}.norm_q"), d),
                    wq: Linear::new(format!("{p}.wq"), d, d, false),
                    wk: Linear::new(format!("{p}.wk"), d, d, false),
                    wv: Linear::new(format!("{p}.wv"), d, d, false),
                    norm_ff: Norm::new(format!("{p}.norm_ff"), d),
                    ff: Mlp::new(&format!("{p}.ff"), d, cfg.ff_hidden, cfg.activation),
                }
            })
            .collect();
        Ok(Self {
            prefix: prefix.to_string(),
            head: Linear::new(format!("{prefix}.head"), d, cfg.d_out, true),
            layers,
            cfg,
        })
    }

    pub fn queries_name(&self) -> String {
        format!("{}.queries", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(
            self.queries_name(),
            normal(rng, &[self.cfg.positions, self.cfg.d_slot], 1.0),
        );
        for l in &self.layers {
            l.norm_q.init(store);
            l.wq.init(store, rng);
            l.wk.init(store, rng);
            l.wv.init(store, rng);
            l.norm_ff.init(store);
            l.ff.init(store, rng);
        }
        self.head.init(store, rng);
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, slots: Var) -> Result<Decoded> {
        let dims = g.dims(slots);
        if dims.len() != 2 || dims[1] != self.cfg.d_slot || dims[0] == 0 {
            return Err(shape_err(
                "decode",
                format!("slots {dims:?}, expected [N>=1, {}]", self.cfg.d_slot),
            ));
        }
        let scale = 1.0 / (self.cfg.d_slot as f32).sqrt();
        let mut x = g.param(store, &self.queries_name())?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let q = l.norm_q.forward(g, store, x)?;
            let q = l.wq.forward(g, store, q)?;
            let k = l.wk.forward(g, store, slots)?;
            let v = l.wv.forward(g, store, slots)?;
            let logits = g.matmul_nt(q, k)?;
            let logits = g.scale(logits, scale)?;
            let a = g.softmax(logits, 1)?;
            attention.push(g.value(a).clone());
            let read = g.matmul(a, v)?;
            x = g.add(x, read)?;
            let f = l.norm_ff.forward(g, store, x)?;
            let f = l.ff.forward(g, store, f)?;
            x = g.add(x, f)?;
        }
        let recon = self.head.forward(g, store, x)?;
        Ok(Decoded { recon, attention })
    }

    pub fn run(&self, store: &ParamStore, slots: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::inference();
        let s = g.input(slots.clone());
        let out = self.decode(&mut g, store, s)?;
        Ok((g.value(out.recon).clone(), out.attention))
    }
}

/// Mean squared error between reconstruction and target.
pub fn recon_loss(g: &mut Graph, predicted: Var, target: Var) -> Result<Var> {
    g.mse(predicted, target)
}

/// [`recon_loss`] on plain tensors.
pub fn recon_mse(predicted: &Tensor, target: &Tensor) -> Result<f32> {
    let mut g = Graph::inference();
    let p = g.input(predicted.clone());
    let t = g.input(target.clone());
    let l = g.mse(p, t)?;
    Ok(g.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small(positions: usize, d: usize, d_out: usize, layers: usize) -> (ReconDecoder, ParamStore) {
        let cfg = DecoderConfig {
            positions,
            d_slot: d,
            d_out,
            layers,
            ff_hidden: 2 * d,
            ..Default::default()
        };
        let dec = ReconDecoder::new("dec", cfg).unwrap();
        let mut store = ParamStore::new();
        dec.init(&mut store, &mut stream(1, "dec", 0));
        (dec, store)
    }

    #[test]
    fn zero_head_outputs_bias() {
        let (dec, mut store) = small(5, 4, 3, 2);
        store.insert("dec.head.w", Tensor::zeros(&[4, 3]));
        store.insert("dec.head.b", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let slots = normal(&mut stream(2, "s", 0), &[3, 4], 1.0);
        let (out, _) = dec.run(&store, &slots).unwrap();
        for r in 0..5 {
            assert_eq!(out.row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn single_slot_gets_full_weight() {
        let (dec, store) = small(4, 4, 2, 2);
        let slots = normal(&mut stream(2, "s", 0), &[1, 4], 1.0);
        let (_, attn) = dec.run(&store, &slots).unwrap();
        for a in attn {
            assert!(a.data().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn loss_examples() {
        let t = normal(&mut stream(3, "t", 0), &[4, 3], 1.0);
        assert_eq!(recon_mse(&t, &t).unwrap(), 0.0);
        let shifted = Tensor::new(t.dims().to_vec(), t.data().iter().map(|v| v + 1.0).collect()).unwrap();
        assert!((recon_mse(&shifted, &t).unwrap() - 1.0).abs() < 1e-6);
        let p = normal(&mut stream(4, "p", 0), &[4, 3], 1.0);
        let oracle: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / 12.0;
        assert!((recon_mse(&p, &t).unwrap() as f64 - oracle).abs() < 1e-6);
        assert!(recon_mse(&p, &Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn hand_traced_miniature() {
        // 2 slots, 2 positions, 1 layer, width 2, traced in f64.
        let (dec, store) = small(2, 2, 2, 1);
        let slots = Tensor::new(vec![2, 2], vec![0.7, -0.2, -1.1, 0.5]).unwrap();
        let (out, attn) = dec.run(&store, &slots).unwrap();
        let p = |n: &str| -> Vec<f64> {
            store.get(n).unwrap().data().iter().map(|&v| v as f64).collect()
        };
        let ln = |r: &[f64]| -> Vec<f64> {
            let m = (r[0] + r[1]) / 2.0;
            let v = ((r[0] - m).powi(2) + (r[1] - m).powi(2)) / 2.0;
            r.iter().map(|a| (a - m) / (v + 1e-5).sqrt()).collect()
        };
        let mv = |r: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
            (0..cols).map(|c| r.iter().enumerate().map(|(i, a)| a * w[i * cols + c]).sum()).collect()
        };
        let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        let gelu = |x: f64| x / (1.0 + (-1.702 * x).exp());
        let s: Vec<Vec<f64>> = (0..2).map(|i| slots.row(i).iter().map(|&v| v as f64).collect()).collect();
        let queries = p("dec.queries");
        let keys: Vec<Vec<f64>> = s.iter().map(|r| mv(r, &p("dec.l0.wk.w"), 2)).collect();
        let vals: Vec<Vec<f64>> = s.iter().map(|r| mv(r, &p("dec.l0.wv.w"), 2)).collect();
        for pos in 0..2 {
            let x0 = queries[pos * 2..pos * 2 + 2].to_vec();
            let q = mv(&ln(&x0), &p("dec.l0.wq.w"), 2);
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt())
                .collect();
            let mx = logits[0].max(logits[1]);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let a: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
            for j in 0..2 {
                assert!((attn[0].get2(pos, j) as f64 - a[j]).abs() < 1e-6);
            }
            let read: Vec<f64> = (0..2).map(|c| a[0] * vals[0][c] + a[1] * vals[1][c]).collect();
            let x1 = add(&x0, &read);
            let h = add(&mv(&ln(&x1), &p("dec.l0.ff.fc1.w"), 4), &p("dec.l0.ff.fc1.b"));
            let h: Vec<f64> = h.into_iter().map(gelu).collect();
            let f = add(&mv(&h, &p("dec.l0.ff.fc2.w"), 2), &p("dec.l0.ff.fc2.b"));
            let x2 = add(&x1, &f);
            let y = add(&mv(&x2, &p("dec.head.w"), 2), &p("dec.head.b"));
            for c in 0..2 {
                assert!((out.get2(pos, c) as f64 - y[c]).abs() < 1e-5, "{pos},{c}");
            }
        }
    }

    #[test]
    fn rejects_wrong_slot_width() {
        let (dec, store) = small(2, 4, 2, 1);
        assert!(dec.run(&store, &Tensor::zeros(&[2, 3])).is_err());
    }
}
