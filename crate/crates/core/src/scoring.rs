//! Per-frame anomaly scores and frame-level ROC analysis.
//!
//! A frame `f` is scored by the fused prediction at position `score_offset`
//! (0-based) of a clip whose first input frame is `f - score_offset - n`, so
//! with the defaults the last input frame is `f - 3`. MAE values are min-max
//! normalized within each video; frames without enough history are reported
//! but left out of normalization and AUC.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{parse_value, KvConfig};
use crate::data::LoadedVideo;
use crate::error::{Result, VadError};
use crate::model::{predict, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Which of the `T` predictions scores its target (0-based).
    pub score_offset: usize,
    /// Clips evaluated per forward pass.
    pub batch_size: usize,
    pub pooling: Pooling,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            score_offset: 4,
            batch_size: 8,
            pooling: Pooling::NormalizeThenPool,
        }
    }
}

impl ScoringConfig {
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("score.offset", self.score_offset.to_string());
        kv.set("score.batch_size", self.batch_size.to_string());
        let pooling = match self.pooling {
            Pooling::NormalizeThenPool => "normalize_then_pool",
            Pooling::PoolRaw => "pool_raw",
        };
        kv.set("score.pooling", pooling);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        for (key, v) in kv.section("score") {
            let full = format!("score.{key}");
            match key {
                "offset" => self.score_offset = parse_value(&full, v)?,
                "batch_size" => self.batch_size = parse_value(&full, v)?,
                "pooling" => self.pooling = v.parse()?,
                _ => return Err(VadError::Config(format!("unknown key `{full}`"))),
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for Pooling {
    type Err = VadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalize_then_pool" => Ok(Pooling::NormalizeThenPool),
            "pool_raw" => Ok(Pooling::PoolRaw),
            _ => Err(VadError::Config(format!(
                "unknown pooling {s:?}; expected normalize_then_pool or pool_raw"
            ))),
        }
    }
}

/// How frames of several videos are combined for the dataset AUC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Normalize each video's MAE, then pool the scores.
    NormalizeThenPool,
    /// Pool raw MAE values.
    PoolRaw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub video_id: String,
    pub frame_index: Vec<usize>,
    pub mae: Vec<f64>,
    pub score: Vec<f64>,
    pub scored: Vec<bool>,
}

impl ScoreSeries {
    /// Builds a series from raw MAE values, normalizing the scored ones.
    pub fn from_mae(video_id: &str, mae: Vec<f64>, scored: Vec<bool>) -> Self {
        let picked: Vec<f64> = mae.iter().zip(&scored).filter(|(_, &s)| s).map(|(&m, _)| m).collect();
        let normalized = normalize_scores(&picked);
        let mut it = normalized.into_iter();
        let score = scored
            .iter()
            .map(|&s| if s { it.next().expect("one per scored frame") } else { 0.0 })
            .collect();
        Self {
            video_id: video_id.to_string(),
            frame_index: (0..mae.len()).collect(),
            mae,
            score,
            scored,
        }
    }
}

/// `(e - min e) / (max e - min e)`, or all zeros when the range is zero.
pub fn normalize_scores(mae: &[f64]) -> Vec<f64> {
    let lo = mae.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mae.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; mae.len()];
    }
    mae.iter().map(|&e| (e - lo) / range).collect()
}

/// First scorable frame for horizon `n`.
pub fn first_scored_frame(horizon: usize, score_offset: usize) -> usize {
    score_offset + horizon
}

/// Start of the input clip that scores frame `f`.
pub fn clip_start_for(frame: usize, horizon: usize, score_offset: usize) -> Option<usize> {
    frame.checked_sub(score_offset + horizon)
}

/// Scores every frame of `video`. Returns `None` (with a warning) when the
/// video is shorter than `T + n`.
///
/// `on_prediction(frame, prediction, target)` sees each scored frame's fused
/// prediction, for error-map dumps.
pub fn score_video(
    model: &Model<f32>,
    video: &LoadedVideo,
    cfg: &ScoringConfig,
    mut on_prediction: impl FnMut(usize, &Tensor<f32>, &Tensor<f32>) -> Result<()>,
) -> Result<Option<ScoreSeries>> {
    let mc = model.config();
    let (t_len, n) = (mc.clip_len, mc.horizon);
    if cfg.score_offset >= t_len {
        return Err(VadError::Config(format!(
            "score offset {} must be below T = {t_len}",
            cfg.score_offset
        )));
    }
    let count = video.frames.len();
    let id = &video.record.video_id;
    if count < t_len + n {
        log::warn!("video {id} has {count} frames, fewer than T + n = {}; skipped", t_len + n);
        return Ok(None);
    }
    if let Some(f) = video.frames.first() {
        let want = [1, mc.in_channels, mc.frame_size.0, mc.frame_size.1];
        if f.shape() != want {
            return Err(VadError::Config(format!(
                "video {id} frames are {:?} but the model expects {want:?}",
                f.shape()
            )));
        }
    }

    let first = first_scored_frame(n, cfg.score_offset);
    let frames: Vec<usize> = (first..count)
        .filter(|&f| clip_start_for(f, n, cfg.score_offset).is_some_and(|s| s + t_len <= count))
        .collect();
    let mut mae = vec![0.0; count];
    let mut scored = vec![false; count];
    for chunk in frames.chunks(cfg.batch_size.max(1)) {
        let clip: Vec<Tensor<f32>> = (0..t_len)
            .map(|t| {
                let items: Vec<&Tensor<f32>> = chunk
                    .iter()
                    .map(|&f| &video.frames[clip_start_for(f, n, cfg.score_offset).unwrap() + t])
                    .collect();
                Tensor::stack(&items)
            })
            .collect::<Result<_>>()?;
        let set = predict(model, &clip)?;
        let pred = &set.fused[cfg.score_offset];
        for (b, &f) in chunk.iter().enumerate() {
            let p = pred.select_item(b);
            let target = &video.frames[f];
            let err: f64 = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum();
            mae[f] = err / p.len() as f64;
            scored[f] = true;
            on_prediction(f, &p, target)?;
        }
    }
    Ok(Some(ScoreSeries::from_mae(id, mae, scored)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocResult {
    /// Descending; the first entry is `+inf`.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// ROC sweep over the distinct scores with tied scores forming one step, and
/// the trapezoidal area under it.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(VadError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(VadError::Validation("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(VadError::AucUndefined(format!(
            "AUC undefined: {pos} abnormal and {neg} normal frames"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (t, f) = (tp as f64 / pos as f64, fp as f64 / neg as f64);
        auc += (f - fpr.last().unwrap()) * (t + tpr.last().unwrap()) / 2.0;
        thresholds.push(s);
        tpr.push(t);
        fpr.push(f);
    }
    Ok(RocResult {
        thresholds,
        tpr,
        fpr,
        auc,
    })
}

#[derive(Clone, Debug)]
pub struct VideoAuc {
    pub video_id: String,
    pub auc: Option<f64>,
    pub scored_frames: usize,
    pub abnormal_frames: usize,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub series: Vec<ScoreSeries>,
    pub per_video: Vec<VideoAuc>,
    pub pooled: RocResult,
    pub pooled_frames: usize,
    pub pooled_abnormal: usize,
    pub pooling: Pooling,
}

/// Pools the scored frames of several series against their labels.
pub fn pool_series(series: &[ScoreSeries], labels: &[&[u8]], pooling: Pooling) -> Result<(RocResult, usize, usize)> {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for (ser, lab) in series.iter().zip(labels) {
        for i in 0..ser.mae.len() {
            if ser.scored[i] {
                s.push(match pooling {
                    Pooling::NormalizeThenPool => ser.score[i],
                    Pooling::PoolRaw => ser.mae[i],
                });
                l.push(lab[i]);
            }
        }
    }
    let abnormal = l.iter().filter(|&&v| v != 0).count();
    Ok((roc_auc(&s, &l)?, l.len(), abnormal))
}

/// Scores all labeled videos and computes per-video and pooled AUC.
pub fn evaluate_dataset(
    model: &Model<f32>,
    videos: &[LoadedVideo],
    cfg: &ScoringConfig,
    mut on_prediction: impl FnMut(&str, usize, &Tensor<f32>, &Tensor<f32>) -> Result<()>,
) -> Result<Evaluation> {
    for v in videos {
        if v.record.labels.is_none() {
            return Err(VadError::Config(format!("test video {} has no label file", v.record.video_id)));
        }
    }
    let mut series = Vec::new();
    let mut labels: Vec<&[u8]> = Vec::new();
    let mut per_video = Vec::new();
    for v in videos {
        let id = v.record.video_id.clone();
        let Some(s) = score_video(model, v, cfg, |f, p, t| on_prediction(&id, f, p, t))? else {
            continue;
        };
        let lab = v.record.labels.as_deref().expect("checked above");
        let (sc, lb): (Vec<f64>, Vec<u8>) = s
            .score
            .iter()
            .zip(lab)
            .zip(&s.scored)
            .filter(|(_, &ok)| ok)
            .map(|((&a, &b), _)| (a, b))
            .unzip();
        let auc = match roc_auc(&sc, &lb) {
            Ok(r) => Some(r.auc),
            Err(VadError::AucUndefined(_)) => None,
            Err(e) => return Err(e),
        };
        per_video.push(VideoAuc {
            video_id: id,
            auc,
            scored_frames: lb.len(),
            abnormal_frames: lb.iter().filter(|&&x| x != 0).count(),
        });
        series.push(s);
        labels.push(lab);
    }
    let (pooled, pooled_frames, pooled_abnormal) = pool_series(&series, &labels, cfg.pooling)?;
    Ok(Evaluation {
        series,
        per_video,
        pooled,
        pooled_frames,
        pooled_abnormal,
        pooling: cfg.pooling,
    })
}

impl Evaluation {
    /// `video_id,frame_index,mae,score,scored_flag`, one row per frame.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("video_id,frame_index,mae,score,scored_flag\n");
        for s in &self.series {
            for i in 0..s.mae.len() {
                let _ = writeln!(
                    out,
                    "{},{},{:.9},{:.9},{}",
                    s.video_id, s.frame_index[i], s.mae[i], s.score[i], s.scored[i] as u8
                );
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for v in &self.per_video {
            let auc = v.auc.map_or("undefined".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(
                out,
                "video {} auc={auc} scored_frames={} abnormal_frames={}",
                v.video_id, v.scored_frames, v.abnormal_frames
            );
        }
        let _ = writeln!(
            out,
            "pooled auc={:.6} frames={} abnormal_frames={} pooling={:?}",
            self.pooled.auc, self.pooled_frames, self.pooled_abnormal, self.pooling
        );
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| VadError::io(dir, e))?;
        crate::model::write_atomic(&dir.join("scores.csv"), self.scores_csv().as_bytes())?;
        crate::model::write_atomic(&dir.join("summary.txt"), self.summary().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut hits = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        hits += 1.0;
                    } else if si == sj {
                        hits += 0.5;
                    }
                }
            }
        }
        hits / pairs
    }

    #[test]
    fn normalization_examples() {
        let s = normalize_scores(&[0.1, 0.3, 0.2]);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 1.0);
        assert!((s[2] - 0.5).abs() < 1e-12);
        assert_eq!(normalize_scores(&[0.4; 5]), vec![0.0; 5]);
        assert_eq!(normalize_scores(&[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn unscored_frames_stay_out_of_normalization() {
        let s = ScoreSeries::from_mae("v", vec![0.0, 0.0, 0.2, 0.6, 0.4], vec![false, false, true, true, true]);
        assert_eq!(&s.score[..4], &[0.0, 0.0, 0.0, 1.0]);
        assert!((s.score[4] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn alignment_puts_last_input_three_frames_before_target() {
        let (t, n, k) = (9, 7, 4);
        let f = 30;
        let start = clip_start_for(f, n, k).unwrap();
        assert_eq!(start, 19);
        assert_eq!(start + t - 1, f - 3);
        assert_eq!(start + k + n, f);
        assert_eq!(first_scored_frame(n, k), 11);
        assert_eq!(clip_start_for(10, n, k), None);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &[1, 0, 1, 0]).unwrap().auc, 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(VadError::AucUndefined(_))));
    }

    #[test]
    fn roc_curve_is_monotone_and_ends_at_one() {
        let r = roc_auc(&[0.5, 0.2, 0.9, 0.2, 0.4], &[1, 0, 1, 1, 0]).unwrap();
        assert!(r.tpr.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.fpr.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*r.tpr.last().unwrap(), 1.0);
        assert_eq!(*r.fpr.last().unwrap(), 1.0);
        assert_eq!(r.thresholds.len(), 5);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..50)) {
            let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|(_, l)| *l as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let auc = roc_auc(&scores, &labels).unwrap().auc;
            prop_assert!((auc - brute_force_auc(&scores, &labels)).abs() < 1e-9);
        }

        #[test]
        fn auc_is_invariant_to_monotone_maps(pairs in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
            let labels: Vec<u8> = pairs.iter().map(|(_, l)| *l as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let base = roc_auc(&scores, &labels).unwrap().auc;
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 2.5 * s - 7.0).collect();
            prop_assert!((roc_auc(&exp, &labels).unwrap().auc - base).abs() < 1e-12);
            prop_assert!((roc_auc(&affine, &labels).unwrap().auc - base).abs() < 1e-12);
        }

        #[test]
        fn normalized_scores_span_unit_interval(mae in prop::collection::vec(0.0f64..1.0, 2..30)) {
            let s = normalize_scores(&mae);
            prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
            let lo = mae.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = mae.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                let imax = mae.iter().position(|&v| v == hi).unwrap();
                let imin = mae.iter().position(|&v| v == lo).unwrap();
                prop_assert_eq!(s[imax], 1.0);
                prop_assert_eq!(s[imin], 0.0);
            }
        }
    }
}
