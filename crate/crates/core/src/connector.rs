//! The two-pathway slot connector.
//!
//! The slow branch runs slot attention on every cell of a few uniformly
//! sampled frames and yields object-centric slots; the fast branch pools the
//! grid spatially, keeps every frame, and runs slot attention over time at
//! each pooled position to yield event-centric slots. Both token sets are
//! projected, concatenated (slow first) and projected again to the
//! downstream width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{QueryTransformer, QueryTransformerConfig};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Linear};
use crate::params::{normal, ParamStore};
use crate::slot_attention::{AttentionMask, MaskLayout, SlotAttention, SlotAttentionConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfSlotsConfig {
    /// Spatial token grid.
    pub height: usize,
    pub width: usize,
    /// Input feature width.
    pub d_in: usize,
    /// Frames sampled by the slow branch.
    pub slow_frames: usize,
    /// Spatial pooling stride of the fast branch.
    pub pool_stride: usize,
    /// Slots per sampled frame.
    pub slow_slots: usize,
    /// Slots per pooled position.
    pub fast_slots: usize,
    pub d_slot: usize,
    /// Downstream token width.
    pub d_out: usize,
    /// Capacity of the fast-branch temporal embedding table.
    pub max_frames: usize,
    pub slow_iters: usize,
    pub fast_iters: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    pub eps: f32,
}

impl Default for SfSlotsConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            d_in: 32,
            slow_frames: 8,
            pool_stride: 4,
            slow_slots: 8,
            fast_slots: 8,
            d_slot: 64,
            d_out: 256,
            max_frames: 256,
            slow_iters: 3,
            fast_iters: 3,
            mlp_hidden: 128,
            activation: Activation::GeluLike,
            eps: 1e-8,
        }
    }
}

impl SfSlotsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("d_in", self.d_in),
            ("slow_frames", self.slow_frames),
            ("pool_stride", self.pool_stride),
            ("slow_slots", self.slow_slots),
            ("fast_slots", self.fast_slots),
            ("d_slot", self.d_slot),
            ("d_out", self.d_out),
            ("max_frames", self.max_frames),
            ("slow_iters", self.slow_iters),
            ("fast_iters", self.fast_iters),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("connector: {name} must be >= 1")));
        }
        if self.height % self.pool_stride != 0 || self.width % self.pool_stride != 0 {
            return Err(Error::Invalid(format!(
                "connector: pool_stride {} must divide the {}x{} grid",
                self.pool_stride, self.height, self.width
            )));
        }
        if self.slow_frames > self.max_frames {
            return Err(Error::Invalid("connector: slow_frames exceeds max_frames".into()));
        }
        Ok(())
    }

    pub fn pooled_height(&self) -> usize {
        self.height / self.pool_stride
    }

    pub fn pooled_width(&self) -> usize {
        self.width / self.pool_stride
    }

    /// Number of pooled positions seen by the fast branch.
    pub fn pooled_positions(&self) -> usize {
        self.pooled_height() * self.pooled_width()
    }

    pub fn slow_tokens(&self) -> usize {
        self.slow_frames * self.slow_slots
    }

    pub fn fast_tokens(&self) -> usize {
        self.pooled_positions() * self.fast_slots
    }

    /// Output token count; independent of the clip length.
    pub fn token_count(&self) -> usize {
        self.slow_tokens() + self.fast_tokens()
    }

    pub fn tokens_for(&self, branches: Branches) -> usize {
        match branches {
            Branches::Slow => self.slow_tokens(),
            Branches::Fast => self.fast_tokens(),
            Branches::Both => self.token_count(),
        }
    }

    pub fn slow_attention(&self) -> SlotAttentionConfig {
        SlotAttentionConfig {
            n_slots: self.slow_slots,
            d_in: self.d_in,
            d_slot: self.d_slot,
            iters: self.slow_iters,
            mlp_hidden: self.mlp_hidden,
            eps: self.eps,
            activation: self.activation,
            ..Default::default()
        }
    }

    pub fn fast_attention(&self) -> SlotAttentionConfig {
        SlotAttentionConfig {
            n_slots: self.fast_slots,
            iters: self.fast_iters,
            ..self.slow_attention()
        }
    }
}

/// A `T x H x W x D` feature grid sampled at one frame per second.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub grid: Tensor,
    pub fps: f32,
}

impl VideoFeatures {
    pub fn new(grid: Tensor) -> Result<Self> {
        if grid.rank() != 4 || grid.dims()[0] == 0 {
            return Err(shape_err("video", format!("expected [T>=1,H,W,D], got {:?}", grid.dims())));
        }
        if !grid.is_finite() {
            return Err(Error::NonFinite { op: "video" });
        }
        Ok(Self { grid, fps: 1.0 })
    }

    /// `(T, H, W, D)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.grid.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn frames(&self) -> usize {
        self.grid.dims()[0]
    }

    /// Features of one frame as `[H*W, D]`.
    pub fn frame(&self, f: usize) -> Tensor {
        let (_, h, w, d) = self.dims();
        let n = h * w * d;
        Tensor::new(vec![h * w, d], self.grid.data()[f * n..(f + 1) * n].to_vec())
            .expect("frame slice")
    }
}

/// Centered uniform sampling: `floor((i + 0.5) * T / t_d)` for `i < t_d`.
pub fn uniform_sample_frames(frames: usize, samples: usize) -> Result<Vec<usize>> {
    if samples == 0 || samples > frames {
        return Err(Error::Invalid(format!(
            "cannot sample {samples} of {frames} frames"
        )));
    }
    Ok((0..samples)
        .map(|i| ((2 * i + 1) * frames) / (2 * samples))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Slow,
    Fast,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Self::Slow => "slow",
            Self::Fast => "fast",
        }
    }
}

/// Which pathways a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    Slow,
    Fast,
    Both,
}

impl Branches {
    pub fn has_slow(self) -> bool {
        matches!(self, Self::Slow | Self::Both)
    }

    pub fn has_fast(self) -> bool {
        matches!(self, Self::Fast | Self::Both)
    }

    pub fn has(self, b: Branch) -> bool {
        match b {
            Branch::Slow => self.has_slow(),
            Branch::Fast => self.has_fast(),
        }
    }
}

impl From<Branch> for Branches {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Slow => Self::Slow,
            Branch::Fast => Self::Fast,
        }
    }
}

/// Where an output token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub branch: Branch,
    /// Sampled-frame index (slow) or pooled-position index (fast).
    pub source: usize,
    pub slot: usize,
}

/// Attention mask of one slot-attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceMask {
    pub branch: Branch,
    pub source: usize,
    pub mask: AttentionMask,
    /// Per-head masks for query-based aggregation; empty for slots.
    pub head_masks: Vec<Tensor>,
}

/// The per-set aggregation mechanism.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregator {
    Slots(SlotAttention),
    Queries(QueryTransformer),
}

/// Aggregated tokens of one set plus its mask(s).
#[derive(Debug)]
pub struct Aggregated {
    pub tokens: Var,
    pub mask: Tensor,
    pub head_masks: Vec<Tensor>,
}

impl Aggregator {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        match self {
            Self::Slots(s) => s.init(store, rng),
            Self::Queries(q) => q.init(store, rng),
        }
    }

    pub fn prefix(&self) -> &str {
        match self {
            Self::Slots(s) => &s.prefix,
            Self::Queries(q) => &q.prefix,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: Var) -> Result<Aggregated> {
        match self {
            Self::Slots(s) => {
                let out = s.forward(g, store, inputs)?;
                Ok(Aggregated {
                    tokens: out.slots,
                    mask: out.mask,
                    head_masks: Vec::new(),
                })
            }
            Self::Queries(q) => {
                let out = q.forward(g, store, inputs)?;
                Ok(Aggregated {
                    tokens: out.tokens,
                    mask: out.mask,
                    head_masks: out.head_masks,
                })
            }
        }
    }
}

/// One branch's projected tokens plus what stage-1 reconstruction needs.
#[derive(Debug)]
pub struct BranchOutput {
    /// `[sets * slots, d_slot]` after the branch projection.
    pub tokens: Var,
    pub masks: Vec<SourceMask>,
}

/// Projected tokens of one forward pass.
#[derive(Debug)]
pub struct ConnectorOutput {
    /// `[N, d_out]`.
    pub tokens: Var,
    pub provenance: Vec<Provenance>,
    pub masks: Vec<SourceMask>,
}

/// Detached connector output.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotTokens {
    pub tokens: Tensor,
    pub provenance: Vec<Provenance>,
    pub masks: Vec<SourceMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfConnector {
    pub cfg: SfSlotsConfig,
    pub slow: Aggregator,
    pub fast: Aggregator,
    pub slow_proj: Linear,
    pub fast_proj: Linear,
    pub proj: Linear,
}

pub const SLOW_POS: &str = "slow.pos";
pub const FAST_POS: &str = "fast.pos";

impl SfConnector {
    pub fn new(cfg: SfSlotsConfig) -> Result<Self> {
        cfg.validate()?;
        let slow = Aggregator::Slots(SlotAttention::new("slow.sa", cfg.slow_attention())?);
        let fast = Aggregator::Slots(SlotAttention::new("fast.sa", cfg.fast_attention())?);
        Ok(Self::assemble(cfg, slow, fast))
    }

    /// Same scaffold with learnable-query aggregation in both branches.
    pub fn with_queries(cfg: SfSlotsConfig, qt: QueryTransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let base = QueryTransformerConfig {
            d_in: cfg.d_in,
            d_model: cfg.d_slot,
            ..qt
        };
        let slow = QueryTransformer::new(
            "slow.qt",
            QueryTransformerConfig {
                n_queries: cfg.slow_slots,
                ..base.clone()
            },
        )?;
        let fast = QueryTransformer::new(
            "fast.qt",
            QueryTransformerConfig {
                n_queries: cfg.fast_slots,
                ..base
            },
        )?;
        Ok(Self::assemble(cfg, Aggregator::Queries(slow), Aggregator::Queries(fast)))
    }

    fn assemble(cfg: SfSlotsConfig, slow: Aggregator, fast: Aggregator) -> Self {
        Self {
            slow_proj: Linear::new("slow.proj", cfg.d_slot, cfg.d_slot, true),
            fast_proj: Linear::new("fast.proj", cfg.d_slot, cfg.d_slot, true),
            proj: Linear::new("proj", cfg.d_slot, cfg.d_out, true),
            slow,
            fast,
            cfg,
        }
    }

    pub fn aggregator(&self, branch: Branch) -> &Aggregator {
        match branch {
            Branch::Slow => &self.slow,
            Branch::Fast => &self.fast,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.slow.init(store, rng);
        self.fast.init(store, rng);
        store.insert(SLOW_POS, normal(rng, &[self.cfg.slow_frames, self.cfg.d_slot], 0.02));
        store.insert(FAST_POS, normal(rng, &[self.cfg.max_frames, self.cfg.d_in], 0.02));
        self.slow_proj.init(store, rng);
        self.fast_proj.init(store, rng);
        self.proj.init(store, rng);
    }

    fn check_video(&self, dims: &[usize]) -> Result<(usize, usize, usize, usize)> {
        let c = &self.cfg;
        if dims.len() != 4 || dims[1] != c.height || dims[2] != c.width || dims[3] != c.d_in {
            return Err(shape_err(
                "connect",
                format!(
                    "video {dims:?} does not match [T, {}, {}, {}]",
                    c.height, c.width, c.d_in
                ),
            ));
        }
        Ok((dims[0], dims[1], dims[2], dims[3]))
    }

    /// Slot-attention inputs of the slow branch: one `[H*W, D]` set per sampled frame.
    pub fn slow_inputs(&self, g: &mut Graph, video: Var) -> Result<Vec<(usize, Var)>> {
        let (t, h, w, d) = self.check_video(g.dims(video))?;
        let frames = uniform_sample_frames(t, self.cfg.slow_frames)?;
        let flat = g.reshape(video, &[t * h * w, d])?;
        frames
            .into_iter()
            .map(|f| Ok((f, g.slice_rows(flat, f * h * w, h * w)?)))
            .collect()
    }

    /// Spatially pooled grid as `[T * M_d, D]`, rows frame-major.
    pub fn pooled(&self, g: &mut Graph, video: Var) -> Result<Var> {
        let (t, _, _, d) = self.check_video(g.dims(video))?;
        let pooled = g.avg_pool_grid(video, self.cfg.pool_stride)?;
        g.reshape(pooled, &[t * self.cfg.pooled_positions(), d])
    }

    /// Rows of `pooled` belonging to position `k`, in time order.
    pub fn position_rows(&self, frames: usize, k: usize) -> Vec<usize> {
        let m = self.cfg.pooled_positions();
        (0..frames).map(|t| t * m + k).collect()
    }

    /// Slot-attention inputs of the fast branch: one `[T, D]` set per pooled
    /// position, with the temporal embedding of each frame added.
    pub fn fast_inputs(&self, g: &mut Graph, store: &ParamStore, video: Var) -> Result<Vec<Var>> {
        let t = self.check_video(g.dims(video))?.0;
        if t > self.cfg.max_frames {
            return Err(Error::Capacity {
                what: "fast-branch temporal embeddings",
                needed: t,
                capacity: self.cfg.max_frames,
            });
        }
        let m = self.cfg.pooled_positions();
        let pooled = self.pooled(g, video)?;
        let table = g.param(store, FAST_POS)?;
        let per_row: Vec<usize> = (0..t).flat_map(|f| std::iter::repeat_n(f, m)).collect();
        let emb = g.gather_rows(table, &per_row)?;
        let tokens = g.add(pooled, emb)?;
        (0..m)
            .map(|k| g.gather_rows(tokens, &self.position_rows(t, k)))
            .collect()
    }

    pub fn slow_branch(&self, g: &mut Graph, store: &ParamStore, video: Var) -> Result<BranchOutput> {
        let (_, h, w, _) = self.check_video(g.dims(video))?;
        let layout = MaskLayout::Spatial {
            height: h,
            width: w,
        };
        let pos = g.param(store, SLOW_POS)?;
        let mut parts = Vec::new();
        let mut masks = Vec::new();
        for (i, (_, frame)) in self.slow_inputs(g, video)?.into_iter().enumerate() {
            let agg = self.slow.forward(g, store, frame)?;
            let p = g.slice_rows(pos, i, 1)?;
            parts.push(g.add_row(agg.tokens, p)?);
            masks.push(SourceMask {
                branch: Branch::Slow,
                source: i,
                mask: AttentionMask::new(agg.mask, layout)?,
                head_masks: agg.head_masks,
            });
        }
        let cat = g.concat_rows(&parts)?;
        let tokens = self.slow_proj.forward(g, store, cat)?;
        Ok(BranchOutput { tokens, masks })
    }

    pub fn fast_branch(&self, g: &mut Graph, store: &ParamStore, video: Var) -> Result<BranchOutput> {
        let t = self.check_video(g.dims(video))?.0;
        let layout = MaskLayout::Temporal { frames: t };
        let mut parts = Vec::new();
        let mut masks = Vec::new();
        for (k, set) in self.fast_inputs(g, store, video)?.into_iter().enumerate() {
            let agg = self.fast.forward(g, store, set)?;
            parts.push(agg.tokens);
            masks.push(SourceMask {
                branch: Branch::Fast,
                source: k,
                mask: AttentionMask::new(agg.mask, layout)?,
                head_masks: agg.head_masks,
            });
        }
        let cat = g.concat_rows(&parts)?;
        let tokens = self.fast_proj.forward(g, store, cat)?;
        Ok(BranchOutput { tokens, masks })
    }

    /// Full forward on a video node of dims `[T, H, W, D]`.
    pub fn connect_var(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        video: Var,
        branches: Branches,
    ) -> Result<ConnectorOutput> {
        let mut parts = Vec::new();
        let mut masks = Vec::new();
        let mut provenance = Vec::new();
        if branches.has_slow() {
            let out = self.slow_branch(g, store, video)?;
            parts.push(out.tokens);
            masks.extend(out.masks);
            for i in 0..self.cfg.slow_frames {
                provenance.extend((0..self.cfg.slow_slots).map(|j| Provenance {
                    branch: Branch::Slow,
                    source: i,
                    slot: j,
                }));
            }
        }
        if branches.has_fast() {
            let out = self.fast_branch(g, store, video)?;
            parts.push(out.tokens);
            masks.extend(out.masks);
            for k in 0..self.cfg.pooled_positions() {
                provenance.extend((0..self.cfg.fast_slots).map(|j| Provenance {
                    branch: Branch::Fast,
                    source: k,
                    slot: j,
                }));
            }
        }
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let tokens = self.proj.forward(g, store, cat)?;
        Ok(ConnectorOutput {
            tokens,
            provenance,
            masks,
        })
    }

    pub fn connect(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        video: &VideoFeatures,
        branches: Branches,
    ) -> Result<ConnectorOutput> {
        let v = g.input(video.grid.clone());
        self.connect_var(g, store, v, branches)
    }

    /// Inference-only forward through both branches.
    pub fn run(&self, store: &ParamStore, video: &VideoFeatures) -> Result<SlotTokens> {
        self.run_branches(store, video, Branches::Both)
    }

    pub fn run_branches(
        &self,
        store: &ParamStore,
        video: &VideoFeatures,
        branches: Branches,
    ) -> Result<SlotTokens> {
        let mut g = Graph::inference();
        let out = self.connect(&mut g, store, video, branches)?;
        Ok(SlotTokens {
            tokens: g.value(out.tokens).clone(),
            provenance: out.provenance,
            masks: out.masks,
        })
    }
}
