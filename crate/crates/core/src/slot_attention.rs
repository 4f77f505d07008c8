//! Iterative slot attention: a fixed set of slots competes for input tokens
//! through attention normalized over the slot axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Gru, Linear, Mlp, Norm};
use crate::params::{normal, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlotAttentionConfig {
    pub n_slots: usize,
    pub d_in: usize,
    pub d_slot: usize,
    pub iters: usize,
    pub mlp_hidden: usize,
    /// Added to per-slot weight sums before renormalizing across inputs.
    pub eps: f32,
    pub activation: Activation,
    /// Standard deviation of the learnable initial slots.
    pub init_std: f32,
}

impl Default for SlotAttentionConfig {
    fn default() -> Self {
        Self {
            n_slots: 8,
            d_in: 32,
            d_slot: 64,
            iters: 3,
            mlp_hidden: 128,
            eps: 1e-8,
            activation: Activation::GeluLike,
            init_std: 0.02,
        }
    }
}

impl SlotAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 || self.iters == 0 || self.d_slot == 0 || self.d_in == 0 {
            return Err(Error::Invalid(format!(
                "slot attention needs n_slots, iters, d_in, d_slot >= 1: {self:?}"
            )));
        }
        if self.eps < 0.0 {
            return Err(Error::Invalid("slot attention eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// How mask rows map back onto the input they came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskLayout {
    /// Rows are grid cells in raster order.
    Spatial { height: usize, width: usize },
    /// Rows are frames in time order.
    Temporal { frames: usize },
}

impl MaskLayout {
    pub fn len(&self) -> usize {
        match *self {
            Self::Spatial { height, width } => height * width,
            Self::Temporal { frames } => frames,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)` of the image a single mask column is drawn as.
    pub fn image_dims(&self) -> (usize, usize) {
        match *self {
            Self::Spatial { height, width } => (height, width),
            Self::Temporal { frames } => (1, frames),
        }
    }
}

/// Input-token by slot attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub weights: Tensor,
    pub layout: MaskLayout,
}

impl AttentionMask {
    pub fn new(weights: Tensor, layout: MaskLayout) -> Result<Self> {
        if weights.rank() != 2 || weights.dims()[0] != layout.len() {
            return Err(Error::Invalid(format!(
                "mask {:?} does not fit layout {layout:?}",
                weights.dims()
            )));
        }
        Ok(Self { weights, layout })
    }

    pub fn n_inputs(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn n_slots(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.weights.row(i)
    }

    /// Weights of one slot over all inputs.
    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.n_inputs()).map(|i| self.weights.get2(i, j)).collect()
    }

    pub fn row_sums(&self) -> Vec<f32> {
        (0..self.n_inputs())
            .map(|i| self.row(i).iter().sum())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<f32> {
        (0..self.n_slots())
            .map(|j| self.column(j).iter().sum())
            .collect()
    }
}

/// Slots plus the final-iteration mask.
#[derive(Debug)]
pub struct SlotOutput {
    pub slots: Var,
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotAttention {
    pub prefix: String,
    pub cfg: SlotAttentionConfig,
    norm_in: Norm,
    norm_slots: Norm,
    norm_mlp: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    gru: Gru,
    mlp: Mlp,
}

impl SlotAttention {
    pub fn new(prefix: &str, cfg: SlotAttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let p = |leaf: &str| format!("{prefix}.{leaf}");
        Ok(Self {
            prefix: prefix.to_string(),
            norm_in: Norm::new(p("norm_in"), cfg.d_in),
            norm_slots: Norm::new(p("norm_slots"), cfg.d_slot),
            norm_mlp: Norm::new(p("norm_mlp"), cfg.d_slot),
            wq: Linear::new(p("wq"), cfg.d_slot, cfg.d_slot, false),
            wk: Linear::new(p("wk"), cfg.d_in, cfg.d_slot, false),
            wv: Linear::new(p("wv"), cfg.d_in, cfg.d_slot, false),
            gru: Gru::new(p("gru"), cfg.d_slot),
            mlp: Mlp::new(&p("mlp"), cfg.d_slot, cfg.mlp_hidden, cfg.activation),
            cfg,
        })
    }

    pub fn init_slots_name(&self) -> String {
        format!("{}.init_slots", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let dims = [self.cfg.n_slots, self.cfg.d_slot];
        // Resample on the (measure-zero) event of two identical rows.
        let slots = loop {
            let t = normal(rng, &dims, self.cfg.init_std);
            if rows_distinct(&t) {
                break t;
            }
        };
        store.insert(self.init_slots_name(), slots);
        self.norm_in.init(store);
        self.norm_slots.init(store);
        self.norm_mlp.init(store);
        self.wq.init(store, rng);
        self.wk.init(store, rng);
        self.wv.init(store, rng);
        self.gru.init(store, rng);
        self.mlp.init(store, rng);
    }

    /// Runs the attention iterations on `inputs: [M, d_in]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: Var) -> Result<SlotOutput> {
        let init = g.param(store, &self.init_slots_name())?;
        self.forward_from(g, store, inputs, init)
    }

    /// Same as [`SlotAttention::forward`] but starting from explicit slots.
    pub fn forward_from(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: Var,
        init_slots: Var,
    ) -> Result<SlotOutput> {
        let dims = g.dims(inputs);
        if dims.len() != 2 || dims[0] == 0 || dims[1] != self.cfg.d_in {
            return Err(crate::error::shape_err(
                "slot_attention",
                format!("inputs {dims:?}, expected [M>=1, {}]", self.cfg.d_in),
            ));
        }
        let x = self.norm_in.forward(g, store, inputs)?;
        let k = self.wk.forward(g, store, x)?;
        let v = self.wv.forward(g, store, x)?;
        let scale = 1.0 / (self.cfg.d_slot as f32).sqrt();
        let mut slots = init_slots;
        let mut attn = None;
        for _ in 0..self.cfg.iters {
            let prev = slots;
            let s = self.norm_slots.forward(g, store, slots)?;
            let q = self.wq.forward(g, store, s)?;
            let logits = g.matmul_nt(k, q)?;
            let logits = g.scale(logits, scale)?;
            // Softmax over slots: slots compete for every input token.
            let a = g.softmax(logits, 1)?;
            let w = g.col_normalize(a, self.cfg.eps)?;
            let updates = g.matmul_tn(w, v)?;
            slots = self.gru.step(g, store, prev, updates)?;
            let m = self.norm_mlp.forward(g, store, slots)?;
            let m = self.mlp.forward(g, store, m)?;
            slots = g.add(slots, m)?;
            attn = Some(a);
        }
        let mask = g.value(attn.expect("iters >= 1")).clone();
        Ok(SlotOutput { slots, mask })
    }

    /// Forward pass without recording gradients.
    pub fn run(&self, store: &ParamStore, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let x = g.input(inputs.clone());
        let out = self.forward(&mut g, store, x)?;
        Ok((g.value(out.slots).clone(), out.mask))
    }
}

fn rows_distinct(t: &Tensor) -> bool {
    let (r, _) = t.rows_cols();
    (0..r).all(|i| (i + 1..r).all(|j| t.row(i) != t.row(j)))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(t.numel());
    for &p in perm {
        out.extend_from_slice(t.row(p));
    }
    Tensor::new(t.dims().to_vec(), out).expect("same numel")
}

fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    let (r, c) = t.rows_cols();
    let mut out = Vec::with_capacity(t.numel());
    for i in 0..r {
        out.extend(perm.iter().map(|&p| t.data()[i * c + p]));
    }
    Tensor::new(t.dims().to_vec(), out).expect("same numel")
}

/// True iff permuting the initial slots by `perm` permutes the output slots
/// and mask columns by exactly `perm` (within `tol`).
pub fn permute_slots_check(
    sa: &SlotAttention,
    store: &ParamStore,
    inputs: &Tensor,
    perm: &[usize],
    tol: f32,
) -> Result<bool> {
    let n = sa.cfg.n_slots;
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Invalid(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    let (slots, mask) = sa.run(store, inputs)?;
    let mut permuted = store.clone();
    let name = sa.init_slots_name();
    let init = store.get(&name).ok_or(Error::MissingParam(name.clone()))?;
    permuted.insert(name, permute_rows(init, perm));
    let (pslots, pmask) = sa.run(&permuted, inputs)?;
    Ok(permute_rows(&slots, perm).max_abs_diff(&pslots) <= tol
        && permute_cols(&mask, perm).max_abs_diff(&pmask) <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small(n_slots: usize, iters: usize) -> (SlotAttention, ParamStore) {
        let cfg = SlotAttentionConfig {
            n_slots,
            d_in: 5,
            d_slot: 6,
            iters,
            mlp_hidden: 12,
            ..Default::default()
        };
        let sa = SlotAttention::new("sa", cfg).unwrap();
        let mut store = ParamStore::new();
        sa.init(&mut store, &mut stream(3, "init", 0));
        (sa, store)
    }

    fn inputs(m: usize, d: usize, seed: u64) -> Tensor {
        normal(&mut stream(seed, "x", 0), &[m, d], 1.0)
    }

    #[test]
    fn single_slot_takes_everything() {
        let (sa, store) = small(1, 2);
        let (_, mask) = sa.run(&store, &inputs(7, 5, 1)).unwrap();
        assert!(mask.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn mask_rows_sum_to_one() {
        for iters in 1..4 {
            let (sa, store) = small(4, iters);
            let (_, mask) = sa.run(&store, &inputs(9, 5, iters as u64)).unwrap();
            let m = AttentionMask::new(mask, MaskLayout::Temporal { frames: 9 }).unwrap();
            for s in m.row_sums() {
                assert!((s - 1.0).abs() < 1e-5);
            }
            assert!(m.weights.data().iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn initial_slots_are_distinct() {
        let (sa, store) = small(8, 1);
        assert!(rows_distinct(store.get(&sa.init_slots_name()).unwrap()));
    }

    #[test]
    fn identity_and_swap_permutations_pass() {
        let (sa, store) = small(3, 3);
        let x = inputs(10, 5, 11);
        assert!(permute_slots_check(&sa, &store, &x, &[0, 1, 2], 1e-5).unwrap());
        assert!(permute_slots_check(&sa, &store, &x, &[2, 1, 0], 1e-5).unwrap());
        assert!(permute_slots_check(&sa, &store, &x, &[0, 0, 1], 1e-5).is_err());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let (sa, store) = small(2, 1);
        assert!(sa.run(&store, &inputs(4, 3, 0)).is_err());
    }

    #[test]
    fn invalid_config() {
        let cfg = SlotAttentionConfig {
            iters: 0,
            ..Default::default()
        };
        assert!(SlotAttention::new("sa", cfg).is_err());
    }
}
