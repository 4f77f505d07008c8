//! Decomposition quality: hard assignments, adjusted Rand index, slot
//! overlap, mask entropy, and the key-value report format.

use std::fmt::Write as _;

use crate::connector::{uniform_sample_frames, Branch, SourceMask};
use crate::error::{Error, Result};
use crate::slot_attention::AttentionMask;
use crate::synthetic::SceneTruth;

/// Argmax over slots per input row; ties go to the lowest slot index.
pub fn hard_assign(mask: &AttentionMask) -> Vec<usize> {
    (0..mask.n_inputs()).map(|i| argmax(mask.row(i))).collect()
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

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Sum of `pairs(run length)` over maximal runs of `same` neighbours.
fn run_pairs<T>(sorted: &[T], same: impl Fn(&T, &T) -> bool) -> f64 {
    let mut total = 0.0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if same(&w[0], &w[1]) {
            run += 1;
        } else {
            total += pairs(run);
            run = 1;
        }
    }
    total + pairs(run)
}

/// Adjusted Rand index from the contingency table.
///
/// When the expected and maximum index coincide (both partitions trivial)
/// the score is 1.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "ari: {} predicted vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Invalid("ari: need at least two labels".into()));
    }
    // contingency counts as run lengths of sorted label pairs
    let mut joint: Vec<(usize, usize)> = pred.iter().copied().zip(truth.iter().copied()).collect();
    joint.sort_unstable();
    let index = run_pairs(&joint, |x, y| x == y);
    let a = run_pairs(&joint, |x, y| x.0 == y.0);
    let mut cols = truth.to_vec();
    cols.sort_unstable();
    let b = run_pairs(&cols, |x, y| x == y);
    let expected = a * b / pairs(pred.len() as u64);
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn column_cosine(mask: &AttentionMask, a: usize, b: usize) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..mask.n_inputs() {
        let r = mask.row(i);
        let (x, y) = (r[a] as f64, r[b] as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Mean pairwise cosine similarity between mask columns.
pub fn slot_overlap(mask: &AttentionMask) -> Result<f64> {
    let n = mask.n_slots();
    if n < 2 {
        return Err(Error::Invalid("slot_overlap: need at least two slots".into()));
    }
    let mut total = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            total += column_cosine(mask, a, b);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean over rows of the natural-log entropy of the row distribution.
pub fn mask_entropy(mask: &AttentionMask) -> f64 {
    let rows = mask.n_inputs();
    let total: f64 = (0..rows)
        .map(|i| {
            -mask
                .row(i)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p as f64 * (p as f64).ln())
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}

/// Mean ARI of slow-branch masks against the object labels of the frames
/// they were computed on.
pub fn spatial_ari(masks: &[SourceMask], truth: &SceneTruth, slow_frames: usize) -> Result<Option<f64>> {
    let frames = uniform_sample_frames(truth.frames, slow_frames)?;
    let scores: Vec<f64> = masks
        .iter()
        .filter(|m| m.branch == Branch::Slow)
        .map(|m| ari(&hard_assign(&m.mask), truth.frame_objects(frames[m.source])))
        .collect::<Result<_>>()?;
    Ok(mean(&scores))
}

/// Mean over pooled positions of the ARI between fast-branch masks and
/// segment labels. Positions whose truth is a single label are skipped,
/// since the index is degenerate there.
pub fn temporal_ari(masks: &[SourceMask], truth: &SceneTruth) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for m in masks.iter().filter(|m| m.branch == Branch::Fast) {
        let seg = truth.position_segments(m.source);
        if seg.iter().all(|&l| l == seg[0]) {
            continue;
        }
        scores.push(ari(&hard_assign(&m.mask), seg)?);
    }
    Ok(mean(&scores))
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Scores of one evaluated scene; `None` where a statistic does not apply.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneScores {
    pub index: u64,
    pub spatial_ari: Option<f64>,
    pub temporal_ari: Option<f64>,
    pub overlap: Option<f64>,
    pub entropy: Option<f64>,
}

impl SceneScores {
    pub fn from_masks(index: u64, masks: &[SourceMask], truth: &SceneTruth, slow_frames: usize) -> Result<Self> {
        let mut overlaps = Vec::new();
        let mut entropies = Vec::new();
        for m in masks {
            if m.mask.n_slots() >= 2 {
                overlaps.push(slot_overlap(&m.mask)?);
            }
            entropies.push(mask_entropy(&m.mask));
        }
        let has_slow = masks.iter().any(|m| m.branch == Branch::Slow);
        Ok(Self {
            index,
            spatial_ari: if has_slow { spatial_ari(masks, truth, slow_frames)? } else { None },
            temporal_ari: temporal_ari(masks, truth)?,
            overlap: mean(&overlaps),
            entropy: mean(&entropies),
        })
    }
}

/// Aggregate evaluation of one connector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecouplingReport {
    pub connector: String,
    pub tokens: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub spatial_ari: Option<f64>,
    pub temporal_ari: Option<f64>,
    pub overlap: Option<f64>,
    pub entropy: Option<f64>,
    pub accuracy: Option<f64>,
    pub majority: Option<f64>,
    pub scenes: Vec<SceneScores>,
}

fn opt_mean<F: Fn(&SceneScores) -> Option<f64>>(scenes: &[SceneScores], f: F) -> Option<f64> {
    mean(&scenes.iter().filter_map(f).collect::<Vec<_>>())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "na" {
        return Ok(None);
    }
    v.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Invalid(format!("report: bad value for {key}: {v}")))
}

impl DecouplingReport {
    /// Fills the aggregate statistics from the per-scene scores.
    pub fn aggregate(&mut self) {
        self.spatial_ari = opt_mean(&self.scenes, |s| s.spatial_ari);
        self.temporal_ari = opt_mean(&self.scenes, |s| s.temporal_ari);
        self.overlap = opt_mean(&self.scenes, |s| s.overlap);
        self.entropy = opt_mean(&self.scenes, |s| s.entropy);
    }

    /// `key=value` lines; per-scene lines are `scene.<index>=<s>,<t>,<o>,<e>`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "connector={}", self.connector);
        let _ = writeln!(s, "tokens={}", self.tokens);
        let _ = writeln!(s, "seeds={}", seeds.join(","));
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "spatial_ari={}", fmt_opt(self.spatial_ari));
        let _ = writeln!(s, "temporal_ari={}", fmt_opt(self.temporal_ari));
        let _ = writeln!(s, "overlap={}", fmt_opt(self.overlap));
        let _ = writeln!(s, "entropy={}", fmt_opt(self.entropy));
        let _ = writeln!(s, "accuracy={}", fmt_opt(self.accuracy));
        let _ = writeln!(s, "majority={}", fmt_opt(self.majority));
        let _ = writeln!(s, "scenes={}", self.scenes.len());
        for sc in &self.scenes {
            let _ = writeln!(
                s,
                "scene.{}={},{},{},{}",
                sc.index,
                fmt_opt(sc.spatial_ari),
                fmt_opt(sc.temporal_ari),
                fmt_opt(sc.overlap),
                fmt_opt(sc.entropy)
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("report: malformed line {line:?}")))?;
            match key {
                "connector" => r.connector = value.to_string(),
                "tokens" => {
                    r.tokens = value
                        .parse()
                        .map_err(|_| Error::Invalid(format!("report: bad tokens {value}")))?
                }
                "seeds" => {
                    r.seeds = value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| Error::Invalid(format!("report: bad seed {s}"))))
                        .collect::<Result<_>>()?
                }
                "config_hash" => r.config_hash = value.to_string(),
                "spatial_ari" => r.spatial_ari = parse_opt(key, value)?,
                "temporal_ari" => r.temporal_ari = parse_opt(key, value)?,
                "overlap" => r.overlap = parse_opt(key, value)?,
                "entropy" => r.entropy = parse_opt(key, value)?,
                "accuracy" => r.accuracy = parse_opt(key, value)?,
                "majority" => r.majority = parse_opt(key, value)?,
                "scenes" => {}
                k if k.starts_with("scene.") => {
                    let index = k[6..]
                        .parse()
                        .map_err(|_| Error::Invalid(format!("report: bad scene key {k}")))?;
                    let v: Vec<&str> = value.split(',').collect();
                    if v.len() != 4 {
                        return Err(Error::Invalid(format!("report: bad scene line {line:?}")));
                    }
                    r.scenes.push(SceneScores {
                        index,
                        spatial_ari: parse_opt(k, v[0])?,
                        temporal_ari: parse_opt(k, v[1])?,
                        overlap: parse_opt(k, v[2])?,
                        entropy: parse_opt(k, v[3])?,
                    });
                }
                other => return Err(Error::Invalid(format!("report: unknown key {other}"))),
            }
        }
        Ok(r)
    }
}

/// Side-by-side table with one row per connector.
pub fn compare_table(reports: &[DecouplingReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>7} {:>12} {:>13} {:>8} {:>9}",
        "connector", "tokens", "spatial_ari", "temporal_ari", "overlap", "accuracy"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<24} {:>7} {:>12} {:>13} {:>8} {:>9}",
            r.connector,
            r.tokens,
            cell(r.spatial_ari),
            cell(r.temporal_ari),
            cell(r.overlap),
            cell(r.accuracy)
        );
    }
    s
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slot_attention::MaskLayout;
    use crate::tensor::Tensor;

    fn mask(rows: &[Vec<f32>]) -> AttentionMask {
        let t = Tensor::from_rows(rows).unwrap();
        AttentionMask::new(t, MaskLayout::Temporal { frames: rows.len() }).unwrap()
    }

    #[test]
    fn hard_assign_examples() {
        let m = mask(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.2, 0.5, 0.3]]);
        assert_eq!(hard_assign(&m), vec![1, 0, 1]);
        let u = mask(&[vec![0.25; 4], vec![0.25; 4]]);
        assert_eq!(hard_assign(&u), vec![0, 0]);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!(ari(&[0, 1], &[0]).is_err());
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn overlap_examples() {
        let orth = mask(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(slot_overlap(&orth).unwrap(), 0.0);
        let same = mask(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!((slot_overlap(&same).unwrap() - 1.0).abs() < 1e-12);
        // columns [1,0] and [1,1] on two inputs; rows need not be normalized here.
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let m = AttentionMask {
            weights: w,
            layout: MaskLayout::Temporal { frames: 2 },
        };
        assert!((slot_overlap(&m).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-6);
        assert!(slot_overlap(&mask(&[vec![1.0]])).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(mask_entropy(&mask(&[vec![1.0, 0.0], vec![0.0, 1.0]])), 0.0);
        let n = 8;
        let u = mask(&[vec![1.0 / n as f32; n]]);
        assert!((mask_entropy(&u) - (n as f64).ln()).abs() < 1e-6);
        let half = mask(&[vec![0.5, 0.5]]);
        assert!((mask_entropy(&half) - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn report_round_trip() {
        let mut r = DecouplingReport {
            connector: "sf-slots".into(),
            tokens: 192,
            seeds: vec![1, 2],
            config_hash: "abc".into(),
            accuracy: Some(0.75),
            scenes: vec![
                SceneScores {
                    index: 0,
                    spatial_ari: Some(0.5),
                    temporal_ari: None,
                    overlap: Some(0.25),
                    entropy: Some(1.0),
                },
                SceneScores {
                    index: 1,
                    spatial_ari: Some(0.7),
                    temporal_ari: Some(0.1),
                    overlap: Some(0.75),
                    entropy: Some(0.0),
                },
            ],
            ..Default::default()
        };
        r.aggregate();
        assert!((r.spatial_ari.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(r.temporal_ari, Some(0.1));
        let back = DecouplingReport::parse(&r.to_text()).unwrap();
        assert_eq!(back.connector, "sf-slots");
        assert_eq!(back.tokens, 192);
        assert_eq!(back.seeds, vec![1, 2]);
        assert_eq!(back.scenes.len(), 2);
        assert_eq!(back.scenes[0].temporal_ari, None);
        assert!(DecouplingReport::parse("bogus=1").is_err());
        let table = compare_table(&[r.clone(), back]);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().next().unwrap().contains("spatial_ari"));
    }
}
