//! Three-stage training recipe with a linear probe standing in for the
//! downstream language model.
//!
//! Stage 1 pretrains one branch's aggregator by reconstructing its input
//! features, stage 2 tunes one branch plus projections and probe on the probe
//! tasks, stage 3 tunes both branches jointly. Every batch is a pure function
//! of `(seed, stage, branch, step)`, so a run resumed from a checkpoint
//! continues bit-exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng as _;

use crate::baselines::PoolingConnector;
use crate::checkpoint::{load_tensors, save_tensors};
use crate::config::{ConnectorKind, RunConfig, Schedule, StageConfig};
use crate::connector::{uniform_sample_frames, Branch, Branches, SfConnector, SourceMask, FAST_POS};
use crate::decoder::{DecoderConfig, ReconDecoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{DecouplingReport, SceneScores};
use crate::nn::Linear;
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::params::{ParamFilter, ParamStore};
use crate::rng::stream;
use crate::synthetic::{gen_probe_task, Dataset, ProbeSpec, Scene, TaskId};
use crate::tensor::{avg_pool_grid, Tensor};

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f32, lr_min: f32) -> Result<f32> {
    if step > total {
        return Err(Error::Invalid(format!("cosine_lr: step {step} > total {total}")));
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let c = (std::f64::consts::PI * step as f64 / total as f64).cos();
    Ok((lr_min as f64 + 0.5 * (lr_max as f64 - lr_min as f64) * (1.0 + c)) as f32)
}

pub fn stage_lr(stage: &StageConfig, step: u64) -> Result<f32> {
    match stage.schedule {
        Schedule::Constant => Ok(stage.lr_max),
        Schedule::Cosine => cosine_lr(step.min(stage.steps), stage.steps, stage.lr_max, stage.lr_min),
    }
}

/// Affine classifier per task over mean-pooled tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    pub heads: Vec<(TaskId, Linear)>,
}

impl ProbeHead {
    pub fn new(d: usize, spec: &ProbeSpec) -> Self {
        Self {
            heads: TaskId::ALL
                .iter()
                .map(|&t| (t, Linear::new(format!("probe.{}", t.name()), d, spec.classes(t), true)))
                .collect(),
        }
    }

    pub fn init<R: rand::Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for (_, h) in &self.heads {
            h.init(store, rng);
        }
    }

    /// Logits `[B, classes]` per task from pooled features `[B, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Vec<Var>> {
        self.heads.iter().map(|(_, h)| h.forward(g, store, pooled)).collect()
    }
}

/// Probe labels of one scene, in [`TaskId::ALL`] order.
pub fn scene_labels(scene: &Scene, spec: &ProbeSpec) -> Vec<usize> {
    TaskId::ALL
        .iter()
        .map(|&t| gen_probe_task(&scene.truth, spec, t))
        .collect()
}

/// Connector, stage-1 decoders and probe, all addressed by parameter name.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ConnectorKind,
    pub connector: SfConnector,
    pub pooling: PoolingConnector,
    pub dec_slow: ReconDecoder,
    pub dec_fast: ReconDecoder,
    pub probe: ProbeHead,
}

impl Model {
    pub fn new(cfg: &RunConfig, kind: ConnectorKind) -> Result<Self> {
        let c = &cfg.connector;
        let connector = match kind {
            ConnectorKind::QueryTransformer => SfConnector::with_queries(c.clone(), cfg.query.clone())?,
            _ => SfConnector::new(c.clone())?,
        };
        let dec = |positions, d_out| DecoderConfig {
            positions,
            d_slot: c.d_slot,
            d_out,
            layers: cfg.decoder.layers,
            ff_hidden: cfg.decoder.ff_hidden,
            activation: c.activation,
        };
        Ok(Self {
            kind,
            dec_slow: ReconDecoder::new("dec.slow", dec(c.height * c.width, c.d_in))?,
            dec_fast: ReconDecoder::new("dec.fast", dec(cfg.data.frames, c.d_in))?,
            pooling: PoolingConnector::new(c.d_in, c.d_out),
            probe: ProbeHead::new(c.d_out, &cfg.probe),
            connector,
        })
    }

    /// Fresh parameters, each group drawn from its own seed stream.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        match self.kind {
            ConnectorKind::Pooling => self.pooling.init(&mut store, &mut stream(seed, "init-pooling", 0)),
            _ => self.connector.init(&mut store, &mut stream(seed, "init-connector", 0)),
        }
        if self.kind != ConnectorKind::Pooling {
            self.dec_slow.init(&mut store, &mut stream(seed, "init-decoder", 0));
            self.dec_fast.init(&mut store, &mut stream(seed, "init-decoder", 1));
        }
        self.probe.init(&mut store, &mut stream(seed, "init-probe", 0));
        store
    }

    pub fn decoder(&self, branch: Branch) -> &ReconDecoder {
        match branch {
            Branch::Slow => &self.dec_slow,
            Branch::Fast => &self.dec_fast,
        }
    }

    /// Output tokens `[N, d_out]` and the masks that produced them.
    pub fn tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scene: &Scene,
        branches: Branches,
    ) -> Result<(Var, Vec<SourceMask>)> {
        match self.kind {
            ConnectorKind::Pooling => Ok((self.pooling.forward(g, store, &scene.video)?, Vec::new())),
            _ => {
                let out = self.connector.connect(g, store, &scene.video, branches)?;
                Ok((out.tokens, out.masks))
            }
        }
    }

    /// Parameter-name prefixes trained in a stage.
    pub fn trainable(&self, stage: u8, branches: Branches) -> ParamFilter {
        if self.kind == ConnectorKind::Pooling {
            return ParamFilter::prefixes(&["pool.", "probe."]);
        }
        let agg = |b: Branch| self.connector.aggregator(b).prefix().to_string() + ".";
        let mut p: Vec<String> = Vec::new();
        match stage {
            1 => {
                for b in [Branch::Slow, Branch::Fast] {
                    if branches.has(b) {
                        p.push(agg(b));
                        p.push(format!("{}.", self.decoder(b).prefix));
                        if b == Branch::Fast {
                            p.push(FAST_POS.into());
                        }
                    }
                }
            }
            _ => {
                for b in [Branch::Slow, Branch::Fast] {
                    if branches.has(b) {
                        p.push(agg(b));
                        p.push(format!("{}.proj.", b.name()));
                        p.push(format!("{}.pos", b.name()));
                    }
                }
                p.push("proj.".into());
                p.push("probe.".into());
            }
        }
        ParamFilter::Prefixes(p)
    }
}

/// Lazily generated, cycled pool of training scenes.
#[derive(Debug)]
pub struct ScenePool {
    pub data: Dataset,
    cache: Vec<Option<Scene>>,
}

impl ScenePool {
    pub fn new(data: Dataset, size: usize) -> Self {
        Self {
            data,
            cache: vec![None; size],
        }
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    pub fn get(&mut self, i: usize) -> Result<&Scene> {
        if self.cache[i].is_none() {
            self.cache[i] = Some(self.data.scene(i as u64)?);
        }
        Ok(self.cache[i].as_ref().expect("filled above"))
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f32,
    pub loss: f32,
    pub accuracy: Option<f32>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} lr={:e} loss={:.6}", self.step, self.lr, self.loss)?;
        match self.accuracy {
            Some(a) => write!(f, " acc={a:.4}"),
            None => write!(f, " acc=na"),
        }
    }
}

impl LogRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("log: malformed line {line:?}"));
        let mut fields = BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        Ok(Self {
            step: get("step")?.parse().map_err(|_| bad())?,
            lr: get("lr")?.parse().map_err(|_| bad())?,
            loss: get("loss")?.parse().map_err(|_| bad())?,
            accuracy: match get("acc")? {
                "na" => None,
                v => Some(v.parse().map_err(|_| bad())?),
            },
        })
    }
}

/// Parameters plus optimizer state at a step boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: AdamState,
    pub step: u64,
}

const OPT_M: &str = "opt.m/";
const OPT_V: &str = "opt.v/";
const META_STEP: &str = "meta/step";
const META_ADAM: &str = "meta/adam_step";
const META_STAGE: &str = "meta/stage";
const META_ACT: &str = "meta/activation";
/// Marks the decoder family (0 = parallel with learned position queries).
const META_DECODER: &str = "meta/decoder";

impl TrainState {
    pub fn new(store: ParamStore) -> Self {
        Self {
            store,
            adam: AdamState::new(),
            step: 0,
        }
    }

    /// Writes parameters, Adam moments and counters into one container.
    pub fn save(&self, path: &Path, stage: u8, activation: f32) -> Result<()> {
        let meta = [
            (META_STEP, Tensor::scalar(self.step as f32)),
            (META_ADAM, Tensor::scalar(self.adam.step as f32)),
            (META_STAGE, Tensor::scalar(stage as f32)),
            (META_ACT, Tensor::scalar(activation)),
            (META_DECODER, Tensor::scalar(0.0)),
        ];
        let m: Vec<(String, &Tensor)> = self.adam.first.iter().map(|(n, t)| (format!("{OPT_M}{n}"), t)).collect();
        let v: Vec<(String, &Tensor)> = self.adam.second.iter().map(|(n, t)| (format!("{OPT_V}{n}"), t)).collect();
        let mut all: Vec<(&str, &Tensor)> = self.store.iter().map(|(n, t)| (n.as_str(), t)).collect();
        all.extend(m.iter().map(|(n, t)| (n.as_str(), *t)));
        all.extend(v.iter().map(|(n, t)| (n.as_str(), *t)));
        all.extend(meta.iter().map(|(n, t)| (*n, t)));
        save_tensors(all, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut adam = AdamState::new();
        let mut step = None;
        for (name, t) in load_tensors(path)? {
            if let Some(n) = name.strip_prefix(OPT_M) {
                adam.first.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(OPT_V) {
                adam.second.insert(n.to_string(), t);
            } else if name == META_STEP {
                step = Some(t.data()[0] as u64);
            } else if name == META_ADAM {
                adam.step = t.data()[0] as u64;
            } else if !name.starts_with("meta/") {
                store.insert(name, t);
            }
        }
        Ok(Self {
            store,
            adam,
            step: step.unwrap_or(0),
        })
    }
}

/// Stage number recorded in a training-state container.
pub fn checkpoint_stage(path: &Path) -> Result<Option<u8>> {
    Ok(load_tensors(path)?
        .into_iter()
        .find(|(n, _)| n == META_STAGE)
        .map(|(_, t)| t.data()[0] as u8))
}

/// Connector kind whose parameters `store` holds.
pub fn infer_kind(store: &ParamStore) -> Option<ConnectorKind> {
    let has = |p: &str| store.names().any(|n| n.starts_with(p));
    if has("slow.sa.") {
        Some(ConnectorKind::SfSlots)
    } else if has("slow.qt.") {
        Some(ConnectorKind::QueryTransformer)
    } else if has("pool.") {
        Some(ConnectorKind::Pooling)
    } else {
        None
    }
}

/// Outcome of one stage.
#[derive(Clone, Debug)]
pub struct StageResult {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

/// Loss (and batch accuracy, if any) of one step.
pub type BatchLoss<'a> = dyn FnMut(&mut Graph, &ParamStore, u64) -> Result<(Var, Option<f32>)> + 'a;

/// Runs optimizer steps `state.step..until`, logging every `log_every`
/// steps and at the last step of the stage.
pub fn train_steps(
    stage: &StageConfig,
    filter: &ParamFilter,
    state: &mut TrainState,
    until: u64,
    batch_loss: &mut BatchLoss<'_>,
    log: &mut Vec<LogRecord>,
) -> Result<()> {
    let adam = AdamConfig::default();
    let until = until.min(stage.steps);
    while state.step < until {
        let step = state.step;
        let lr = stage_lr(stage, step)?;
        let mut g = Graph::with_trainable(filter.clone());
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            e => e,
        };
        let (loss, acc) = batch_loss(&mut g, &state.store, step).map_err(diverged)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged { step });
        }
        g.backward(loss).map_err(diverged)?;
        let mut grads = g.param_grads();
        let norm = clip_global_norm(&mut grads, stage.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Diverged { step });
        }
        state.adam.update(&adam, lr, &mut state.store, &grads)?;
        state.step += 1;
        if step % stage.log_every == 0 || state.step == stage.steps {
            log.push(LogRecord {
                step,
                lr,
                loss: value,
                accuracy: acc,
            });
        }
    }
    Ok(())
}

fn pick(rng: &mut crate::rng::Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Pooled `[T, D]` features of position `k`, without temporal embedding.
pub fn pooled_position(scene: &Scene, stride: usize, k: usize) -> Result<Tensor> {
    let pooled = avg_pool_grid(&scene.video.grid, stride)?;
    let d = pooled.dims();
    let (t, m, dd) = (d[0], d[1] * d[2], d[3]);
    let mut out = Vec::with_capacity(t * dd);
    for f in 0..t {
        let base = (f * m + k) * dd;
        out.extend_from_slice(&pooled.data()[base..base + dd]);
    }
    Tensor::new(vec![t, dd], out)
}

/// Reconstruction loss of one aggregator input set.
pub fn recon_instance(
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    branch: Branch,
    scene: &Scene,
    index: usize,
) -> Result<Var> {
    let (inputs, target) = match branch {
        Branch::Slow => {
            let t = g.input(scene.video.frame(index));
            (t, t)
        }
        Branch::Fast => {
            let feats = pooled_position(scene, model.connector.cfg.pool_stride, index)?;
            let frames = feats.dims()[0];
            let target = g.input(feats);
            let table = g.param(store, FAST_POS)?;
            let emb = g.slice_rows(table, 0, frames)?;
            (g.add(target, emb)?, target)
        }
    };
    let agg = model.connector.aggregator(branch).forward(g, store, inputs)?;
    let dec = model.decoder(branch).decode(g, store, agg.tokens)?;
    g.mse(dec.recon, target)
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    g.scale(acc, 1.0 / parts.len() as f32)
}

/// Mean reconstruction MSE over a fixed set of held-out inputs: every
/// sampled frame (slow) or every pooled position (fast) of `scenes`.
pub fn eval_recon(model: &Model, store: &ParamStore, branch: Branch, scenes: &[Scene]) -> Result<f32> {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for s in scenes {
        let idx = match branch {
            Branch::Slow => uniform_sample_frames(s.video.frames(), model.connector.cfg.slow_frames)?,
            Branch::Fast => (0..model.connector.cfg.pooled_positions()).collect(),
        };
        for i in idx {
            let mut g = Graph::inference();
            let l = recon_instance(model, &mut g, store, branch, s, i)?;
            total += g.value(l).data()[0] as f64;
            n += 1;
        }
    }
    Ok((total / n as f64) as f32)
}

/// Stage 1: trains one branch's aggregator and decoder to reconstruct its
/// input features. Each step draws `batch` scenes and one input set per scene.
pub fn stage1_pretrain(cfg: &RunConfig, branch: Branch, resume: Option<TrainState>) -> Result<StageResult> {
    stage1_until(cfg, branch, resume, cfg.stage.steps)
}

pub fn stage1_until(cfg: &RunConfig, branch: Branch, resume: Option<TrainState>, until: u64) -> Result<StageResult> {
    let model = Model::new(cfg, cfg.stage.connector)?;
    let mut state = resume.unwrap_or_else(|| TrainState::new(model.init(cfg.seed)));
    let filter = model.trainable(1, branch.into());
    let mut pool = ScenePool::new(Dataset::new(cfg.seed, cfg.data.clone())?, cfg.stage.train_scenes);
    let sets = match branch {
        Branch::Slow => cfg.connector.slow_frames,
        Branch::Fast => cfg.connector.pooled_positions(),
    };
    let frames = uniform_sample_frames(cfg.data.frames, cfg.connector.slow_frames)?;
    let label = format!("batch-1-{}", branch.name());
    let mut log = Vec::new();
    let mut loss_fn = |g: &mut Graph, store: &ParamStore, step: u64| -> Result<(Var, Option<f32>)> {
        let mut rng = stream(cfg.seed, &label, step);
        let mut parts = Vec::with_capacity(cfg.stage.batch);
        for _ in 0..cfg.stage.batch {
            let s = pick(&mut rng, pool.len());
            let j = pick(&mut rng, sets);
            let index = if branch == Branch::Slow { frames[j] } else { j };
            let scene = pool.get(s)?;
            parts.push(recon_instance(&model, g, store, branch, scene, index)?);
        }
        Ok((mean_of(g, &parts)?, None))
    };
    train_steps(&cfg.stage, &filter, &mut state, until, &mut loss_fn, &mut log)?;
    Ok(StageResult { state, log })
}

/// Probe loss over `scenes`: tokens are mean-pooled per scene and classified
/// per task; the loss is the mean cross-entropy over tasks.
fn probe_loss(
    model: &Model,
    g: &mut Graph,
    store: &ParamStore,
    scenes: &[&Scene],
    branches: Branches,
    spec: &ProbeSpec,
) -> Result<(Var, f32)> {
    let mut pooled = Vec::with_capacity(scenes.len());
    for s in scenes {
        let (tokens, _) = model.tokens(g, store, s, branches)?;
        pooled.push(g.mean_rows(tokens)?);
    }
    let x = g.concat_rows(&pooled)?;
    let logits = model.probe.forward(g, store, x)?;
    let labels: Vec<Vec<usize>> = scenes.iter().map(|s| scene_labels(s, spec)).collect();
    let mut losses = Vec::new();
    let mut correct = 0usize;
    for (t, &l) in logits.iter().enumerate() {
        let y: Vec<usize> = labels.iter().map(|ls| ls[t]).collect();
        losses.push(g.cross_entropy(l, &y)?);
        let v = g.value(l);
        correct += y.iter().enumerate().filter(|&(i, &yi)| argmax(v.row(i)) == yi).count();
    }
    let acc = correct as f32 / (logits.len() * scenes.len()) as f32;
    Ok((mean_of(g, &losses)?, acc))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Shared loop of stages 2 and 3 and of the pooling baseline.
pub fn tune_until(
    cfg: &RunConfig,
    model: &Model,
    branches: Branches,
    mut state: TrainState,
    until: u64,
) -> Result<StageResult> {
    let stage = if branches == Branches::Both { 3 } else { 2 };
    let filter = model.trainable(stage, branches);
    let mut pool = ScenePool::new(Dataset::new(cfg.seed, cfg.data.clone())?, cfg.stage.train_scenes);
    let label = format!("batch-{stage}-{branches:?}");
    let mut log = Vec::new();
    let mut loss_fn = |g: &mut Graph, store: &ParamStore, step: u64| -> Result<(Var, Option<f32>)> {
        let mut rng = stream(cfg.seed, &label, step);
        let idx: Vec<usize> = (0..cfg.stage.batch).map(|_| pick(&mut rng, pool.len())).collect();
        for &i in &idx {
            pool.get(i)?;
        }
        let scenes: Vec<&Scene> = idx.iter().map(|&i| pool.cache[i].as_ref().expect("filled")).collect();
        let (loss, acc) = probe_loss(model, g, store, &scenes, branches, &cfg.probe)?;
        Ok((loss, Some(acc)))
    };
    train_steps(&cfg.stage, &filter, &mut state, until, &mut loss_fn, &mut log)?;
    Ok(StageResult { state, log })
}

fn require_prefix(src: &ParamStore, prefix: &str, what: &str) -> Result<()> {
    if src.names().any(|n| n.starts_with(prefix)) {
        Ok(())
    } else {
        Err(Error::Checkpoint {
            path: what.into(),
            reason: format!("no parameters under {prefix}"),
        })
    }
}

/// Checks that every tensor under `prefix` in `src` fits the model's layout.
fn copy_checked(dst: &mut ParamStore, src: &ParamStore, prefix: &str, what: &str) -> Result<()> {
    require_prefix(src, prefix, what)?;
    for (name, t) in src.iter().filter(|(n, _)| n.starts_with(prefix)) {
        match dst.get(name) {
            Some(have) if have.dims() == t.dims() => {}
            _ => {
                return Err(Error::Checkpoint {
                    path: what.into(),
                    reason: format!("incompatible tensor {name} {:?}", t.dims()),
                })
            }
        }
    }
    dst.copy_prefix_from(src, prefix);
    Ok(())
}

/// Stage-2 starting point: fresh parameters with the branch aggregator
/// taken from the stage-1 parameters.
pub fn stage2_init(cfg: &RunConfig, branch: Branch, stage1: &ParamStore) -> Result<TrainState> {
    let model = Model::new(cfg, cfg.stage.connector)?;
    let mut store = model.init(cfg.seed);
    let prefix = format!("{}.", model.connector.aggregator(branch).prefix());
    copy_checked(&mut store, stage1, &prefix, "stage-1 parameters")?;
    Ok(TrainState::new(store))
}

pub fn stage2_tune(cfg: &RunConfig, branch: Branch, stage1: &ParamStore) -> Result<StageResult> {
    let model = Model::new(cfg, cfg.stage.connector)?;
    tune_until(cfg, &model, branch.into(), stage2_init(cfg, branch, stage1)?, cfg.stage.steps)
}

/// Stage-3 starting point: the slow branch, shared projection and probe
/// from the slow stage-2 parameters, the fast branch from the fast ones.
pub fn stage3_init(cfg: &RunConfig, slow: &ParamStore, fast: &ParamStore) -> Result<TrainState> {
    let model = Model::new(cfg, cfg.stage.connector)?;
    let mut store = model.init(cfg.seed);
    for p in ["slow.", "proj.", "probe."] {
        copy_checked(&mut store, slow, p, "slow stage-2 parameters")?;
    }
    copy_checked(&mut store, fast, "fast.", "fast stage-2 parameters")?;
    Ok(TrainState::new(store))
}

pub fn stage3_joint(cfg: &RunConfig, slow: &ParamStore, fast: &ParamStore) -> Result<StageResult> {
    let model = Model::new(cfg, cfg.stage.connector)?;
    tune_until(cfg, &model, Branches::Both, stage3_init(cfg, slow, fast)?, cfg.stage.steps)
}

/// Pooling baseline: projection and probe trained with the stage-2 protocol.
pub fn train_pooling(cfg: &RunConfig) -> Result<StageResult> {
    let model = Model::new(cfg, ConnectorKind::Pooling)?;
    let state = TrainState::new(model.init(cfg.seed));
    tune_until(cfg, &model, Branches::Both, state, cfg.stage.steps)
}

/// Held-out scenes for probe accuracy (data ranges) and for decomposition
/// scores (`eval.objects` ranges).
pub fn eval_scenes(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let held = Dataset::new(cfg.seed, cfg.data.clone())?.held_out();
    let probe = held.scenes(0, cfg.eval.scenes)?;
    let decomp = match cfg.eval.objects {
        None => probe.clone(),
        Some(objects) => {
            let mut ranges = cfg.data.clone();
            ranges.objects = objects;
            let ds = Dataset {
                seed: crate::rng::split_seed(held.seed, "decomposition", 0),
                ranges,
                table: held.table.clone(),
            };
            ds.scenes(0, cfg.eval.scenes)?
        }
    };
    Ok((probe, decomp))
}

/// Probe accuracy and majority-class accuracy, each averaged over tasks.
pub fn probe_accuracy(
    model: &Model,
    store: &ParamStore,
    scenes: &[Scene],
    branches: Branches,
    spec: &ProbeSpec,
) -> Result<(f64, f64)> {
    let tasks = TaskId::ALL.len();
    let mut correct = vec![0usize; tasks];
    let mut counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); tasks];
    for s in scenes {
        let mut g = Graph::inference();
        let (tokens, _) = model.tokens(&mut g, store, s, branches)?;
        let pooled = g.mean_rows(tokens)?;
        let logits = model.probe.forward(&mut g, store, pooled)?;
        for (t, y) in scene_labels(s, spec).into_iter().enumerate() {
            if argmax(g.value(logits[t]).row(0)) == y {
                correct[t] += 1;
            }
            *counts[t].entry(y).or_default() += 1;
        }
    }
    let n = scenes.len() as f64;
    let acc = correct.iter().map(|&c| c as f64 / n).sum::<f64>() / tasks as f64;
    let majority = counts
        .iter()
        .map(|c| *c.values().max().unwrap_or(&0) as f64 / n)
        .sum::<f64>()
        / tasks as f64;
    Ok((acc, majority))
}

/// Decomposition scores and probe accuracy on held-out scenes.
pub fn evaluate(cfg: &RunConfig, kind: ConnectorKind, store: &ParamStore, branches: Branches) -> Result<DecouplingReport> {
    let model = Model::new(cfg, kind)?;
    let (probe_scenes, decomp) = eval_scenes(cfg)?;
    let (acc, majority) = probe_accuracy(&model, store, &probe_scenes, branches, &cfg.probe)?;
    let mut report = DecouplingReport {
        connector: kind.name().to_string(),
        seeds: vec![cfg.seed],
        config_hash: cfg.hash(),
        accuracy: Some(acc),
        majority: Some(majority),
        ..Default::default()
    };
    let mut g = Graph::inference();
    let (tokens, _) = model.tokens(&mut g, store, &probe_scenes[0], branches)?;
    report.tokens = g.dims(tokens)[0];
    if kind != ConnectorKind::Pooling {
        for s in &decomp {
            let out = model.connector.run_branches(store, &s.video, branches)?;
            report.scenes.push(SceneScores::from_masks(
                s.index,
                &out.masks,
                &s.truth,
                cfg.connector.slow_frames,
            )?);
        }
    }
    report.aggregate();
    Ok(report)
}

/// Parameters produced by a full run of the recipe for one connector.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub stage1: BTreeMap<Branch, TrainState>,
    pub stage2: BTreeMap<Branch, TrainState>,
    pub joint: TrainState,
    pub logs: BTreeMap<String, Vec<LogRecord>>,
}

/// Step budgets of a full pipeline run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budget {
    pub stage1: u64,
    pub stage2: u64,
    pub stage3: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            stage1: 2000,
            stage2: 1000,
            stage3: 1000,
        }
    }
}

/// Runs stage 1 and stage 2 for both branches, then stage 3, for the slot or
/// query-transformer connector. Stage settings other than the step counts
/// come from each stage's defaults with `base.stage`'s batch-independent
/// fields (connector kind, pool size, clipping, logging).
pub fn run_pipeline(base: &RunConfig, kind: ConnectorKind, budget: Budget) -> Result<PipelineRun> {
    let with_stage = |stage: u8, steps: u64, branch: Branches| {
        let mut c = base.clone();
        let s = StageConfig::for_stage(stage);
        c.stage = StageConfig {
            branch,
            connector: kind,
            steps,
            clip_norm: base.stage.clip_norm,
            log_every: base.stage.log_every,
            train_scenes: base.stage.train_scenes,
            ..s
        };
        c
    };
    let mut logs = BTreeMap::new();
    let mut stage1 = BTreeMap::new();
    let mut stage2 = BTreeMap::new();
    for b in [Branch::Slow, Branch::Fast] {
        let c1 = with_stage(1, budget.stage1, b.into());
        let r1 = stage1_pretrain(&c1, b, None)?;
        logs.insert(format!("stage1-{}", b.name()), r1.log);
        let c2 = with_stage(2, budget.stage2, b.into());
        let r2 = stage2_tune(&c2, b, &r1.state.store)?;
        logs.insert(format!("stage2-{}", b.name()), r2.log);
        stage1.insert(b, r1.state);
        stage2.insert(b, r2.state);
    }
    let c3 = with_stage(3, budget.stage3, Branches::Both);
    let r3 = stage3_joint(&c3, &stage2[&Branch::Slow].store, &stage2[&Branch::Fast].store)?;
    logs.insert("stage3".into(), r3.log);
    Ok(PipelineRun {
        stage1,
        stage2,
        joint: r3.state,
        logs,
    })
}

/// Pooling baseline under the stage-2 protocol with `steps` steps.
pub fn run_pooling(base: &RunConfig, steps: u64) -> Result<StageResult> {
    let mut c = base.clone();
    c.stage = StageConfig {
        branch: Branches::Both,
        connector: ConnectorKind::Pooling,
        steps,
        clip_norm: base.stage.clip_norm,
        log_every: base.stage.log_every,
        train_scenes: base.stage.train_scenes,
        ..StageConfig::for_stage(2)
    };
    train_pooling(&c)
}
