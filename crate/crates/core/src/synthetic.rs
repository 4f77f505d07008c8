//! Synthetic video feature grids with known object and event structure.
//!
//! Features live directly in feature space: every object type owns a fixed
//! unit-norm embedding (row 0 is the background), and each patch is the
//! embedding of whatever occupies it plus Gaussian noise.

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::checkpoint::{load_tensors, save_tensors};
use crate::connector::VideoFeatures;
use crate::error::{Error, Result};
use crate::rng::{split_seed, stream};
use crate::tensor::Tensor;

/// Frozen stand-in for a pre-trained visual encoder's patch vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    /// `[types + 1, D]`, unit-norm rows; row 0 is the background.
    pub table: Tensor,
}

impl EmbeddingTable {
    pub fn new(seed: u64, types: usize, d: usize) -> Self {
        let mut rng = stream(seed, "embeddings", 0);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut data = Vec::with_capacity((types + 1) * d);
        for _ in 0..=types {
            let row: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            data.extend(row.iter().map(|v| v / n));
        }
        Self {
            table: Tensor::new(vec![types + 1, d], data).expect("table dims"),
        }
    }

    pub fn types(&self) -> usize {
        self.table.dims()[0] - 1
    }

    pub fn dim(&self) -> usize {
        self.table.dims()[1]
    }

    pub fn row(&self, id: usize) -> &[f32] {
        self.table.row(id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Row of the embedding table, `>= 1`.
    pub embedding: usize,
    /// `(rows, cols)` of the rectangular extent.
    pub extent: (usize, usize),
    /// Top-left corner at `t = 0`, in grid cells.
    pub start: (f32, f32),
    /// Cells per frame; the corner reflects off the grid border.
    pub velocity: (f32, f32),
}

impl ObjectSpec {
    /// Top-left corner at frame `t`, inside `[0, H - rows] x [0, W - cols]`.
    pub fn corner(&self, t: usize, height: usize, width: usize) -> (usize, usize) {
        let y = reflect(self.start.0 + self.velocity.0 * t as f32, (height - self.extent.0) as f32);
        let x = reflect(self.start.1 + self.velocity.1 * t as f32, (width - self.extent.1) as f32);
        (y.round() as usize, x.round() as usize)
    }
}

fn reflect(p: f32, max: f32) -> f32 {
    if max <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let m = p.rem_euclid(period);
    if m > max { period - m } else { m }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub d: usize,
    pub noise: f32,
    /// Painted in order; later objects occlude earlier ones.
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn validate(&self, table: &EmbeddingTable) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("scene: empty grid".into()));
        }
        if self.d != table.dim() {
            return Err(Error::Invalid(format!(
                "scene: feature width {} but embeddings have {}",
                self.d,
                table.dim()
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Invalid(format!("scene: bad noise {}", self.noise)));
        }
        let mut seen = Vec::new();
        for o in &self.objects {
            if o.embedding == 0 || o.embedding > table.types() || seen.contains(&o.embedding) {
                return Err(Error::Invalid(format!("scene: bad embedding id {}", o.embedding)));
            }
            seen.push(o.embedding);
            let (r, c) = o.extent;
            if r == 0 || c == 0 || r > self.height || c > self.width {
                return Err(Error::Invalid(format!("scene: extent {r}x{c} does not fit")));
            }
        }
        Ok(())
    }
}

/// Ground-truth labels of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    /// `T*H*W` object labels in `[0, K]`, 0 = background.
    pub objects: Vec<usize>,
    /// Per pooled position (position-major), the dominant object label of
    /// the block in each frame: `positions * T` entries.
    pub segments: Vec<usize>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub n_objects: usize,
}

impl SceneTruth {
    pub fn object_at(&self, t: usize, y: usize, x: usize) -> usize {
        self.objects[(t * self.height + y) * self.width + x]
    }

    /// Object labels of one frame in raster order.
    pub fn frame_objects(&self, t: usize) -> &[usize] {
        let n = self.height * self.width;
        &self.objects[t * n..(t + 1) * n]
    }

    pub fn positions(&self) -> usize {
        (self.height / self.stride) * (self.width / self.stride)
    }

    /// Segment labels of pooled position `k` over time.
    pub fn position_segments(&self, k: usize) -> &[usize] {
        &self.segments[k * self.frames..(k + 1) * self.frames]
    }

    /// Number of maximal constant runs at pooled position `k`.
    pub fn event_count(&self, k: usize) -> usize {
        let s = self.position_segments(k);
        1 + s.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

/// Pooling stride used to derive segment labels.
pub const SEGMENT_STRIDE: usize = 4;

pub fn gen_scene(spec: &SceneSpec, table: &EmbeddingTable) -> Result<(VideoFeatures, SceneTruth)> {
    spec.validate(table)?;
    let (t_n, h, w, d) = (spec.frames, spec.height, spec.width, spec.d);
    let mut objects = vec![0usize; t_n * h * w];
    for t in 0..t_n {
        for (idx, o) in spec.objects.iter().enumerate() {
            let (y0, x0) = o.corner(t, h, w);
            for y in y0..y0 + o.extent.0 {
                for x in x0..x0 + o.extent.1 {
                    objects[(t * h + y) * w + x] = idx + 1;
                }
            }
        }
    }
    let mut rng = stream(spec.seed, "scene-noise", 0);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(t_n * h * w * d);
    for &label in &objects {
        let id = if label == 0 { 0 } else { spec.objects[label - 1].embedding };
        for &e in table.row(id) {
            let n = if spec.noise > 0.0 { spec.noise * normal.sample(&mut rng) } else { 0.0 };
            data.push(e + n);
        }
    }
    let grid = Tensor::new(vec![t_n, h, w, d], data)?;
    let stride = if h % SEGMENT_STRIDE == 0 && w % SEGMENT_STRIDE == 0 { SEGMENT_STRIDE } else { 1 };
    let segments = segment_labels(&objects, t_n, h, w, stride, spec.objects.len());
    Ok((
        VideoFeatures::new(grid)?,
        SceneTruth {
            objects,
            segments,
            frames: t_n,
            height: h,
            width: w,
            stride,
            n_objects: spec.objects.len(),
        },
    ))
}

/// Dominant label per pooled block and frame; ties go to the lowest label.
fn segment_labels(objects: &[usize], t_n: usize, h: usize, w: usize, s: usize, k: usize) -> Vec<usize> {
    let (hd, wd) = (h / s, w / s);
    let mut out = vec![0; hd * wd * t_n];
    let mut counts = vec![0usize; k + 1];
    for by in 0..hd {
        for bx in 0..wd {
            let pos = by * wd + bx;
            for t in 0..t_n {
                counts.iter_mut().for_each(|c| *c = 0);
                for y in by * s..(by + 1) * s {
                    for x in bx * s..(bx + 1) * s {
                        counts[objects[(t * h + y) * w + x]] += 1;
                    }
                }
                let mut best = 0;
                for (l, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = l;
                    }
                }
                out[pos * t_n + t] = best;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    ObjectCount,
    EventCount,
    Occupancy,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::ObjectCount, TaskId::EventCount, TaskId::Occupancy];

    pub fn name(self) -> &'static str {
        match self {
            Self::ObjectCount => "object-count",
            Self::EventCount => "event-count",
            Self::Occupancy => "occupancy",
        }
    }
}

/// Where the probe tasks look.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    /// Pooled position whose event count is asked.
    pub event_position: usize,
    /// Counts above this are reported as this value.
    pub max_events: usize,
    /// `(t, y, x)` of the occupancy query; `None` picks the grid center.
    pub occupancy_cell: Option<(usize, usize, usize)>,
    /// Classes of the object-count and occupancy tasks.
    pub max_objects: usize,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            event_position: 5,
            max_events: 5,
            occupancy_cell: None,
            max_objects: 5,
        }
    }
}

impl ProbeSpec {
    pub fn classes(&self, task: TaskId) -> usize {
        match task {
            TaskId::ObjectCount | TaskId::Occupancy => self.max_objects + 1,
            TaskId::EventCount => self.max_events + 1,
        }
    }

    pub fn cell(&self, truth: &SceneTruth) -> (usize, usize, usize) {
        self.occupancy_cell
            .unwrap_or((truth.frames / 2, truth.height / 2, truth.width / 2))
    }
}

/// Label of `task` for a scene; answerable only by looking at the video.
pub fn gen_probe_task(truth: &SceneTruth, probe: &ProbeSpec, task: TaskId) -> usize {
    match task {
        TaskId::ObjectCount => truth.n_objects.min(probe.max_objects),
        TaskId::EventCount => {
            let k = probe.event_position.min(truth.positions() - 1);
            truth.event_count(k).min(probe.max_events)
        }
        TaskId::Occupancy => {
            let (t, y, x) = probe.cell(truth);
            truth.object_at(t, y, x).min(probe.max_objects)
        }
    }
}

/// Sampling ranges for a scene stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneRanges {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub d: usize,
    pub noise: f32,
    /// Inclusive object-count range.
    pub objects: (usize, usize),
    /// Inclusive side-length range of object extents.
    pub extent: (usize, usize),
    /// Maximum speed per axis in cells per frame.
    pub max_speed: f32,
    /// Object types in the embedding table.
    pub types: usize,
    /// Seed of the frozen embedding table.
    pub encoder_seed: u64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            frames: 32,
            height: 16,
            width: 16,
            d: 32,
            noise: 0.05,
            objects: (2, 4),
            extent: (3, 6),
            max_speed: 0.5,
            types: 8,
            encoder_seed: 0,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.objects;
        if lo == 0 || lo > hi || hi > self.types {
            return Err(Error::Config(format!("data.objects {:?} with {} types", self.objects, self.types)));
        }
        let (a, b) = self.extent;
        if a == 0 || a > b || b > self.height.min(self.width) {
            return Err(Error::Config(format!("data.extent {:?} does not fit the grid", self.extent)));
        }
        if self.frames == 0 || self.d == 0 {
            return Err(Error::Config("data: empty frames or width".into()));
        }
        if !(self.noise >= 0.0 && self.max_speed >= 0.0) {
            return Err(Error::Config("data: negative noise or speed".into()));
        }
        Ok(())
    }

    pub fn midpoint_objects(&self) -> f32 {
        (self.objects.0 + self.objects.1) as f32 / 2.0
    }
}

/// A generated scene with its labels.
#[derive(Clone, Debug)]
pub struct Scene {
    pub index: u64,
    pub spec: SceneSpec,
    pub video: VideoFeatures,
    pub truth: SceneTruth,
}

/// Reproducible, restartable scene stream: scene `i` depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub ranges: SceneRanges,
    pub table: EmbeddingTable,
}

impl Dataset {
    pub fn new(seed: u64, ranges: SceneRanges) -> Result<Self> {
        ranges.validate()?;
        let table = EmbeddingTable::new(ranges.encoder_seed, ranges.types, ranges.d);
        Ok(Self { seed, ranges, table })
    }

    /// A disjoint stream over the same embeddings, used for evaluation.
    pub fn held_out(&self) -> Self {
        Self {
            seed: split_seed(self.seed, "held-out", 0),
            ranges: self.ranges.clone(),
            table: self.table.clone(),
        }
    }

    pub fn spec(&self, index: u64) -> SceneSpec {
        let r = &self.ranges;
        let mut rng = stream(self.seed, "scene", index);
        let k = rng.random_range(r.objects.0..=r.objects.1);
        let mut ids: Vec<usize> = (1..=r.types).collect();
        ids.shuffle(&mut rng);
        let mut ids = ids[..k].to_vec();
        ids.sort_unstable();
        let objects = ids
            .into_iter()
            .map(|embedding| {
                let rows = rng.random_range(r.extent.0..=r.extent.1);
                let cols = rng.random_range(r.extent.0..=r.extent.1);
                let sy = rng.random_range(0.0..=(r.height - rows) as f32);
                let sx = rng.random_range(0.0..=(r.width - cols) as f32);
                let (vy, vx) = if r.max_speed > 0.0 {
                    (
                        rng.random_range(-r.max_speed..=r.max_speed),
                        rng.random_range(-r.max_speed..=r.max_speed),
                    )
                } else {
                    (0.0, 0.0)
                };
                ObjectSpec {
                    embedding,
                    extent: (rows, cols),
                    start: (sy, sx),
                    velocity: (vy, vx),
                }
            })
            .collect();
        SceneSpec {
            seed: split_seed(self.seed, "scene-seed", index),
            frames: r.frames,
            height: r.height,
            width: r.width,
            d: r.d,
            noise: r.noise,
            objects,
        }
    }

    pub fn scene(&self, index: u64) -> Result<Scene> {
        let spec = self.spec(index);
        let (video, truth) = gen_scene(&spec, &self.table)?;
        Ok(Scene {
            index,
            spec,
            video,
            truth,
        })
    }

    pub fn scenes(&self, start: u64, n: usize) -> Result<Vec<Scene>> {
        (start..start + n as u64).map(|i| self.scene(i)).collect()
    }
}

fn labels_tensor(dims: Vec<usize>, labels: &[usize]) -> Tensor {
    Tensor::new(dims, labels.iter().map(|&l| l as f32).collect()).expect("label dims")
}

/// Writes a scene as named tensors: `video` `[T, H, W, D]`, `truth.objects`
/// `[T, H, W]`, `truth.segments` `[positions, T]` and scalar `truth.stride`,
/// `truth.n_objects` and `scene.index`. Labels are stored as exact floats.
pub fn export_scene(scene: &Scene, path: &Path) -> Result<()> {
    let t = &scene.truth;
    let objects = labels_tensor(vec![t.frames, t.height, t.width], &t.objects);
    let segments = labels_tensor(vec![t.positions(), t.frames], &t.segments);
    let stride = Tensor::scalar(t.stride as f32);
    let n_objects = Tensor::scalar(t.n_objects as f32);
    let index = Tensor::scalar(scene.index as f32);
    save_tensors(
        [
            ("video", &scene.video.grid),
            ("truth.objects", &objects),
            ("truth.segments", &segments),
            ("truth.stride", &stride),
            ("truth.n_objects", &n_objects),
            ("scene.index", &index),
        ],
        path,
    )
}

/// Reads back a scene written by [`export_scene`].
pub fn import_scene(path: &Path) -> Result<(VideoFeatures, SceneTruth)> {
    let mut map: std::collections::BTreeMap<String, Tensor> = load_tensors(path)?.into_iter().collect();
    let mut take = |name: &str| {
        map.remove(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })
    };
    let video = VideoFeatures::new(take("video")?)?;
    let objects = take("truth.objects")?;
    let segments = take("truth.segments")?;
    let stride = take("truth.stride")?.data()[0] as usize;
    let n_objects = take("truth.n_objects")?.data()[0] as usize;
    let (frames, height, width, _) = video.dims();
    if objects.dims() != [frames, height, width] || stride == 0 {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "truth does not match the video".into(),
        });
    }
    let as_labels = |t: &Tensor| t.data().iter().map(|&v| v as usize).collect::<Vec<_>>();
    let truth = SceneTruth {
        objects: as_labels(&objects),
        segments: as_labels(&segments),
        frames,
        height,
        width,
        stride,
        n_objects,
    };
    if segments.dims() != [truth.positions(), frames] {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "segment labels do not match the video".into(),
        });
    }
    Ok((video, truth))
}
