//! Comparator connectors: semantic-agnostic pooling and a learnable-query
//! transformer whose cross-attention normalizes over the input axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::connector::{Branches, ConnectorOutput, Provenance, SfConnector, SfSlotsConfig, VideoFeatures};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Linear, Mlp, Norm};
use crate::params::{normal, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryTransformerConfig {
    pub n_queries: usize,
    pub d_in: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub activation: Activation,
    /// Largest number of input tokens accepted in one call.
    pub max_inputs: usize,
    pub init_std: f32,
}

impl Default for QueryTransformerConfig {
    fn default() -> Self {
        Self {
            n_queries: 8,
            d_in: 32,
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_hidden: 128,
            activation: Activation::GeluLike,
            max_inputs: 4096,
            init_std: 0.02,
        }
    }
}

impl QueryTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Invalid(format!(
                "query transformer needs n_queries, layers, heads >= 1: {self:?}"
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Per-head projections of one attention block; heads are summed after
/// their output projections, which equals concatenation followed by one map.
#[derive(Clone, Debug, PartialEq)]
struct Heads {
    q: Vec<Linear>,
    k: Vec<Linear>,
    v: Vec<Linear>,
    o: Vec<Linear>,
}

impl Heads {
    fn new(prefix: &str, d_q: usize, d_kv: usize, d_model: usize, heads: usize) -> Self {
        let dh = d_model / heads;
        let mk = |kind: &str, i: usize, din: usize, dout: usize| {
            Linear::new(format!("{prefix}.h{i}.{kind}"), din, dout, false)
        };
        Self {
            q: (0..heads).map(|i| mk("wq", i, d_q, dh)).collect(),
            k: (0..heads).map(|i| mk("wk", i, d_kv, dh)).collect(),
            v: (0..heads).map(|i| mk("wv", i, d_kv, dh)).collect(),
            o: (0..heads).map(|i| mk("wo", i, dh, d_model)).collect(),
        }
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in self.q.iter().chain(&self.k).chain(&self.v).chain(&self.o) {
            l.init(store, rng);
        }
    }

    /// Returns the summed head outputs and each head's `[queries, keys]` weights.
    fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
    ) -> Result<(Var, Vec<Tensor>)> {
        let dh = self.q[0].d_out;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut total = None;
        let mut weights = Vec::with_capacity(self.q.len());
        for h in 0..self.q.len() {
            let q = self.q[h].forward(g, store, queries)?;
            let k = self.k[h].forward(g, store, keys)?;
            let v = self.v[h].forward(g, store, keys)?;
            let logits = g.matmul_nt(q, k)?;
            let logits = g.scale(logits, scale)?;
            // Softmax over keys (the input axis).
            let a = g.softmax(logits, 1)?;
            weights.push(g.value(a).clone());
            let out = g.matmul(a, v)?;
            let out = self.o[h].forward(g, store, out)?;
            total = Some(match total {
                None => out,
                Some(t) => g.add(t, out)?,
            });
        }
        Ok((total.expect("heads >= 1"), weights))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct QtLayer {
    norm_cross: Norm,
    cross: Heads,
    norm_self: Norm,
    self_attn: Heads,
    norm_ff: Norm,
    ff: Mlp,
}

/// Learnable queries reading inputs through cross-attention, followed by
/// query self-attention and a feed-forward block, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryTransformer {
    pub prefix: String,
    pub cfg: QueryTransformerConfig,
    norm_in: Norm,
    layers: Vec<QtLayer>,
}

/// Output tokens and final-layer cross-attention masks.
#[derive(Debug)]
pub struct QueryOutput {
    pub tokens: Var,
    /// Per head, `[inputs, queries]`; every column sums to one.
    pub head_masks: Vec<Tensor>,
    /// Mean of `head_masks`.
    pub mask: Tensor,
}

impl QueryTransformer {
    pub fn new(prefix: &str, cfg: QueryTransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                QtLayer {
                    norm_cross: Norm::new(format!("{p}.norm_cross"), cfg.d_model),
                    cross: Heads::new(&format!("{p}.cross"), cfg.d_model, cfg.d_in, cfg.d_model, cfg.heads),
                    norm_self: Norm::new(format!("{p}.norm_self"), cfg.d_model),
                    self_attn: Heads::new(&format!("{p}.self"), cfg.d_model, cfg.d_model, cfg.d_model, cfg.heads),
                    norm_ff: Norm::new(format!("{p}.norm_ff"), cfg.d_model),
                    ff: Mlp::new(&format!("{p}.ff"), cfg.d_model, cfg.ff_hidden, cfg.activation),
                }
            })
            .collect();
        Ok(Self {
            prefix: prefix.to_string(),
            norm_in: Norm::new(format!("{prefix}.norm_in"), cfg.d_in),
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
            normal(rng, &[self.cfg.n_queries, self.cfg.d_model], self.cfg.init_std),
        );
        self.norm_in.init(store);
        for l in &self.layers {
            l.norm_cross.init(store);
            l.cross.init(store, rng);
            l.norm_self.init(store);
            l.self_attn.init(store, rng);
            l.norm_ff.init(store);
            l.ff.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: Var) -> Result<QueryOutput> {
        let dims = g.dims(inputs).to_vec();
        if dims.len() != 2 || dims[0] == 0 || dims[1] != self.cfg.d_in {
            return Err(shape_err(
                "query_transformer",
                format!("inputs {dims:?}, expected [M>=1, {}]", self.cfg.d_in),
            ));
        }
        if dims[0] > self.cfg.max_inputs {
            return Err(Error::Capacity {
                what: "query transformer inputs",
                needed: dims[0],
                capacity: self.cfg.max_inputs,
            });
        }
        let kv = self.norm_in.forward(g, store, inputs)?;
        let mut x = g.param(store, &self.queries_name())?;
        let mut last = Vec::new();
        for layer in &self.layers {
            let q = layer.norm_cross.forward(g, store, x)?;
            let (c, w) = layer.cross.attend(g, store, q, kv)?;
            x = g.add(x, c)?;
            last = w;
            let s = layer.norm_self.forward(g, store, x)?;
            let (sa, _) = layer.self_attn.attend(g, store, s, s)?;
            x = g.add(x, sa)?;
            let f = layer.norm_ff.forward(g, store, x)?;
            let f = layer.ff.forward(g, store, f)?;
            x = g.add(x, f)?;
        }
        let head_masks: Vec<Tensor> = last
            .iter()
            .map(|w| w.transpose2())
            .collect::<Result<_>>()?;
        let mut mean = Tensor::zeros(head_masks[0].dims());
        let inv = 1.0 / head_masks.len() as f32;
        for h in &head_masks {
            for (m, v) in mean.data_mut().iter_mut().zip(h.data()) {
                *m += v * inv;
            }
        }
        Ok(QueryOutput {
            tokens: x,
            head_masks,
            mask: mean,
        })
    }
}

/// Spatial means per frame followed by temporal means per grid cell:
/// `T + H*W` tokens of width `D`, before projection.
pub fn pooled_tokens(video: &VideoFeatures) -> Tensor {
    let (t, h, w, d) = video.dims();
    let cells = h * w;
    let data = video.grid.data();
    let mut out = vec![0.0f32; (t + cells) * d];
    for f in 0..t {
        let dst = &mut out[f * d..(f + 1) * d];
        for c in 0..cells {
            let src = &data[(f * cells + c) * d..(f * cells + c + 1) * d];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        dst.iter_mut().for_each(|a| *a /= cells as f32);
    }
    for c in 0..cells {
        let dst = &mut out[(t + c) * d..(t + c + 1) * d];
        for f in 0..t {
            let src = &data[(f * cells + c) * d..(f * cells + c + 1) * d];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
        dst.iter_mut().for_each(|a| *a /= t as f32);
    }
    Tensor::new(vec![t + cells, d], out).expect("sized above")
}

/// Pooling connector: pooled tokens mapped to the downstream width.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingConnector {
    pub proj: Linear,
}

impl PoolingConnector {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self {
            proj: Linear::new("pool.proj", d_in, d_out, true),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.proj.init(store, rng);
    }

    pub fn token_count(frames: usize, height: usize, width: usize) -> usize {
        frames + height * width
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, video: &VideoFeatures) -> Result<Var> {
        let pooled = g.input(pooled_tokens(video));
        self.proj.forward(g, store, pooled)
    }

    pub fn connect(&self, store: &ParamStore, video: &VideoFeatures) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, store, video)?;
        Ok(g.value(out).clone())
    }
}

/// The slow/fast scaffold with learnable-query aggregation in place of slot
/// attention: same sampling, pooling, embeddings and projections.
pub fn slowfast_wrap(cfg: &SfSlotsConfig, qt: &QueryTransformerConfig) -> Result<SfConnector> {
    SfConnector::with_queries(cfg.clone(), qt.clone())
}

/// Runs a wrapped baseline on one branch selection and returns its tokens.
pub fn wrapped_tokens(
    conn: &SfConnector,
    store: &ParamStore,
    video: &VideoFeatures,
    branches: Branches,
) -> Result<(Tensor, Vec<Provenance>)> {
    let mut g = Graph::inference();
    let ConnectorOutput {
        tokens, provenance, ..
    } = conn.connect(&mut g, store, video, branches)?;
    Ok((g.value(tokens).clone(), provenance))
}
