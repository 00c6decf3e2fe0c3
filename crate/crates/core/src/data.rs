//! Frame-directory datasets, the synthetic moving-square generator, and clip
//! sampling.
//!
//! Layout on disk:
//!
//! ```text
//! <root>/train/<video_id>/000000.png
//! <root>/test/<video_id>/000000.png
//! <root>/test/<video_id>.labels      one 0/1 token per frame
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VadError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One decoded frame, `[1, C, H, W]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pixels: Tensor<f32>,
    pub index: usize,
}

/// Consecutive frames of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    pub frames: Vec<Frame>,
    pub video_id: String,
    pub start_index: usize,
}

impl FrameClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_count: usize,
    pub labels: Option<Vec<u8>>,
    pub dir: PathBuf,
}

impl VideoRecord {
    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.dir.join(frame_file_name(index))
    }
}

fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Lists the videos of one split.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<VideoRecord>> {
    let dir = root.join(split.dir_name());
    let entries = fs::read_dir(&dir).map_err(|e| VadError::io(&dir, e))?;
    let mut video_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| VadError::io(&dir, e))?;
        if entry.file_type().map_err(|e| VadError::io(entry.path(), e))?.is_dir() {
            video_dirs.push(entry.path());
        }
    }
    video_dirs.sort();

    let mut records = Vec::with_capacity(video_dirs.len());
    for vdir in video_dirs {
        let video_id = vdir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| VadError::Validation(format!("video directory {} is not UTF-8", vdir.display())))?
            .to_string();
        let frame_count = count_frames(&vdir, &video_id)?;
        let labels = match split {
            Split::Train => None,
            Split::Test => {
                let path = dir.join(format!("{video_id}.labels"));
                if path.exists() {
                    Some(read_labels(&path, &video_id, frame_count)?)
                } else {
                    None
                }
            }
        };
        records.push(VideoRecord {
            video_id,
            frame_count,
            labels,
            dir: vdir,
        });
    }
    Ok(records)
}

fn count_frames(dir: &Path, video_id: &str) -> Result<usize> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| VadError::io(dir, e))? {
        let entry = entry.map_err(|e| VadError::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(stem) = name.strip_suffix(".png") else { continue };
        let idx: usize = stem.parse().map_err(|_| {
            VadError::Validation(format!("video {video_id}: frame file {name} is not numbered"))
        })?;
        indices.push(idx);
    }
    indices.sort_unstable();
    for (expected, &got) in indices.iter().enumerate() {
        if got != expected {
            return Err(VadError::Validation(format!(
                "video {video_id}: frame numbering is not contiguous (expected {expected}, found {got})"
            )));
        }
    }
    Ok(indices.len())
}

/// Parses a whitespace-separated 0/1 label file.
pub fn parse_labels(text: &str, video_id: &str, frame_count: usize) -> Result<Vec<u8>> {
    let labels = text
        .split_whitespace()
        .map(|tok| match tok {
            "0" => Ok(0),
            "1" => Ok(1),
            _ => Err(VadError::Validation(format!("video {video_id}: label {tok:?} is not 0 or 1"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    if labels.len() != frame_count {
        return Err(VadError::Validation(format!(
            "video {video_id}: {} labels for {frame_count} frames",
            labels.len()
        )));
    }
    Ok(labels)
}

fn read_labels(path: &Path, video_id: &str, frame_count: usize) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).map_err(|e| VadError::io(path, e))?;
    parse_labels(&text, video_id, frame_count)
}

/// Decodes one PNG into `[1, C, H, W]`, resized bilinearly to `target` and
/// mapped from `[0, 255]` to `[-1, 1]`. Grayscale stays one channel, anything
/// else becomes RGB.
pub fn load_frame(path: &Path, target: (usize, usize)) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| VadError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(image_to_tensor(&img, target))
}

pub fn image_to_tensor(img: &DynamicImage, (h, w): (usize, usize)) -> Tensor<f32> {
    let gray = !img.color().has_color();
    let resize = |i: &DynamicImage| {
        if i.width() as usize == w && i.height() as usize == h {
            i.clone()
        } else {
            i.resize_exact(w as u32, h as u32, FilterType::Triangle)
        }
    };
    let (channels, raw): (usize, Vec<u8>) = if gray {
        (1, resize(&DynamicImage::ImageLuma8(img.to_luma8())).into_luma8().into_raw())
    } else {
        (3, resize(&DynamicImage::ImageRgb8(img.to_rgb8())).into_rgb8().into_raw())
    };
    let plane = h * w;
    let mut data = vec![0f32; channels * plane];
    for (p, px) in raw.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + p] = pixel_to_unit(v);
        }
    }
    Tensor::from_vec([1, channels, h, w], data).expect("sizes agree")
}

/// `0 -> -1`, `255 -> 1`.
pub fn pixel_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`pixel_to_unit`] with clamping and rounding.
pub fn unit_to_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn load_clip(record: &VideoRecord, start: usize, length: usize, target: (usize, usize)) -> Result<FrameClip> {
    if start + length > record.frame_count {
        return Err(VadError::Range(format!(
            "video {}: frames {start}..{} requested but only {} exist",
            record.video_id,
            start + length,
            record.frame_count
        )));
    }
    let frames = (start..start + length)
        .map(|i| {
            Ok(Frame {
                pixels: load_frame(&record.frame_path(i), target)?,
                index: i,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameClip {
        frames,
        video_id: record.video_id.clone(),
        start_index: start,
    })
}

/// All frames of a video held in memory.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub record: VideoRecord,
    pub frames: Vec<Tensor<f32>>,
}

impl LoadedVideo {
    pub fn load(record: &VideoRecord, target: (usize, usize)) -> Result<Self> {
        let clip = load_clip(record, 0, record.frame_count, target)?;
        Ok(Self {
            record: record.clone(),
            frames: clip.frames.into_iter().map(|f| f.pixels).collect(),
        })
    }

    pub fn clip(&self, start: usize, length: usize) -> Result<FrameClip> {
        if start + length > self.frames.len() {
            return Err(VadError::Range(format!(
                "video {}: frames {start}..{} requested but only {} exist",
                self.record.video_id,
                start + length,
                self.frames.len()
            )));
        }
        Ok(FrameClip {
            frames: (start..start + length)
                .map(|i| Frame {
                    pixels: self.frames[i].clone(),
                    index: i,
                })
                .collect(),
            video_id: self.record.video_id.clone(),
            start_index: start,
        })
    }
}

/// Writes `|prediction - target|` of a one-channel frame pair as an 8-bit
/// PNG, with the full error range `[0, 2]` mapped onto `[0, 255]`.
pub fn write_error_map(path: &Path, prediction: &Tensor<f32>, target: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = target.shape();
    if prediction.shape() != target.shape() {
        return Err(VadError::Shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let plane = h * w;
    let mut img = GrayImage::new(w as u32, h as u32);
    for p in 0..plane {
        // channel mean of the absolute error
        let e: f32 = (0..c)
            .map(|ch| (prediction.data()[ch * plane + p] - target.data()[ch * plane + p]).abs())
            .sum::<f32>()
            / c as f32;
        let v = (e * 127.5).round().clamp(0.0, 255.0) as u8;
        img.put_pixel((p % w) as u32, (p / w) as u32, image::Luma([v]));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| VadError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| VadError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Native `(H, W, C)` of a video's first frame.
pub fn native_frame_shape(record: &VideoRecord) -> Result<(usize, usize, usize)> {
    let path = record.frame_path(0);
    let img = image::open(&path).map_err(|e| VadError::Image {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let c = if img.color().has_color() { 3 } else { 1 };
    Ok((img.height() as usize, img.width() as usize, c))
}

/// A clip location: video position in the record list and first frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClipWindow {
    pub video: usize,
    pub start: usize,
}

/// Every window of `clip_length` frames at `stride`, shuffled by `seed`.
/// Videos shorter than a window are skipped with a warning.
pub fn training_windows(frame_counts: &[(String, usize)], clip_length: usize, stride: usize, seed: u64) -> Vec<ClipWindow> {
    let stride = stride.max(1);
    let mut windows = Vec::new();
    for (v, (id, count)) in frame_counts.iter().enumerate() {
        if *count < clip_length {
            log::warn!("video {id} has {count} frames, fewer than the clip length {clip_length}; skipped");
            continue;
        }
        windows.extend((0..=count - clip_length).step_by(stride).map(|start| ClipWindow { video: v, start }));
    }
    windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    windows
}

/// Stream of training clips read from disk in window order.
pub fn iter_training_clips(
    records: &[VideoRecord],
    clip_length: usize,
    stride: usize,
    shuffle_seed: u64,
    target: (usize, usize),
) -> impl Iterator<Item = Result<FrameClip>> + Send + 'static {
    let counts: Vec<_> = records.iter().map(|r| (r.video_id.clone(), r.frame_count)).collect();
    let windows = training_windows(&counts, clip_length, stride, shuffle_seed);
    let records = records.to_vec();
    windows
        .into_iter()
        .map(move |w| load_clip(&records[w.video], w.start, clip_length, target))
}

/// Runs `source` on a producer thread, keeping up to `depth` items ready.
pub fn prefetch<T, I>(source: I, depth: usize) -> impl Iterator<Item = T>
where
    T: Send + 'static,
    I: Iterator<Item = T> + Send + 'static,
{
    let (tx, rx) = mpsc::sync_channel(depth.max(1));
    thread::spawn(move || {
        for item in source {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    rx.into_iter()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnomalyKind {
    Speed,
    ExtraObject,
    Direction,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::Speed, AnomalyKind::ExtraObject, AnomalyKind::Direction];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Speed => "speed",
            AnomalyKind::ExtraObject => "extra_object",
            AnomalyKind::Direction => "direction",
        }
    }

    /// The kind encoded in a synthetic test video id, if any.
    pub fn from_video_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| id.ends_with(&format!("_{}", k.name())))
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyKind {
    type Err = VadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            VadError::Config(format!(
                "unknown anomaly kind {s:?}; valid kinds: {}",
                Self::ALL.map(|k| k.name()).join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// `(H, W)`
    pub frame_size: (usize, usize),
    /// Training videos, all normal.
    pub num_normal_videos: usize,
    /// Test videos each carrying one anomalous segment; kinds are assigned
    /// round-robin.
    pub num_anomalous_videos: usize,
    /// Fully normal test videos.
    pub num_normal_test_videos: usize,
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub frames_per_video: usize,
    /// Inclusive frame range of the anomaly; drawn per video when `None`.
    pub anomaly_segment: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frame_size: (32, 32),
            num_normal_videos: 12,
            num_anomalous_videos: 6,
            num_normal_test_videos: 0,
            anomaly_kinds: vec![AnomalyKind::Speed, AnomalyKind::ExtraObject],
            frames_per_video: 80,
            anomaly_segment: None,
            seed: 0,
        }
    }
}

const BACKGROUND: f64 = 24.0;
const FOREGROUND: f64 = 232.0;
const SEGMENT_LEN_FRACTION: f64 = 0.25;
/// Normal speed range in pixels per frame.
const BASE_SPEED: (f64, f64) = (0.5, 1.0);

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.frame_size;
        if h < 16 || w < 16 {
            return Err(VadError::Config(format!("synthetic frames must be at least 16x16, got {h}x{w}")));
        }
        if self.num_anomalous_videos > 0 && self.anomaly_kinds.is_empty() {
            return Err(VadError::Config("anomalous videos requested but no anomaly kind given".into()));
        }
        if self.frames_per_video < 8 {
            return Err(VadError::Config(format!(
                "frames_per_video must be at least 8, got {}",
                self.frames_per_video
            )));
        }
        if let Some((a, b)) = self.anomaly_segment {
            if a > b || b >= self.frames_per_video {
                return Err(VadError::Config(format!(
                    "anomaly segment {a}..={b} does not fit in {} frames",
                    self.frames_per_video
                )));
            }
        }
        Ok(())
    }

    fn square_side(&self) -> f64 {
        (self.frame_size.0.min(self.frame_size.1) as f64 / 8.0).max(2.0)
    }
}

/// A square moving with wall reflection.
#[derive(Clone, Copy, Debug)]
struct Mover {
    pos: [f64; 2],
    vel: [f64; 2],
}

impl Mover {
    fn random(rng: &mut ChaCha8Rng, limits: [f64; 2]) -> Self {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = rng.gen_range(BASE_SPEED.0..BASE_SPEED.1);
        Self {
            pos: [rng.gen_range(0.0..=limits[0]), rng.gen_range(0.0..=limits[1])],
            vel: [speed * angle.sin(), speed * angle.cos()],
        }
    }

    /// Advances by `factor` times the velocity, reflecting off `[0, limit]`.
    fn advance(&mut self, factor: f64, limits: [f64; 2]) {
        for d in 0..2 {
            let mut p = self.pos[d] + factor * self.vel[d];
            let l = limits[d];
            while p < 0.0 || p > l {
                if p < 0.0 {
                    p = -p;
                } else {
                    p = 2.0 * l - p;
                }
                self.vel[d] = -self.vel[d];
            }
            self.pos[d] = p;
        }
    }
}

/// Anti-aliased rendering: each pixel blends by the area the squares cover.
fn render(size: (usize, usize), side: f64, squares: &[[f64; 2]]) -> GrayImage {
    let (h, w) = size;
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut cover = 0.0f64;
            for sq in squares {
                let oy = ((y + 1) as f64).min(sq[0] + side) - (y as f64).max(sq[0]);
                let ox = ((x + 1) as f64).min(sq[1] + side) - (x as f64).max(sq[1]);
                if oy > 0.0 && ox > 0.0 {
                    cover += oy * ox;
                }
            }
            let v = BACKGROUND + (FOREGROUND - BACKGROUND) * cover.min(1.0);
            img.put_pixel(x as u32, y as u32, image::Luma([v.round() as u8]));
        }
    }
    img
}

/// Frames and labels of one synthetic video.
pub struct SynthVideo {
    pub frames: Vec<GrayImage>,
    pub labels: Vec<u8>,
}

/// Renders one video; `anomaly` is the kind and inclusive frame range.
pub fn synth_video(cfg: &SynthConfig, anomaly: Option<(AnomalyKind, (usize, usize))>, seed: u64) -> SynthVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.square_side();
    let limits = [cfg.frame_size.0 as f64 - side, cfg.frame_size.1 as f64 - side];
    let mut main = Mover::random(&mut rng, limits);
    let mut extra = Mover::random(&mut rng, limits);
    let n = cfg.frames_per_video;
    let mut frames = Vec::with_capacity(n);
    let mut labels = vec![0u8; n];
    for t in 0..n {
        let active = anomaly.filter(|(_, (a, b))| (*a..=*b).contains(&t)).map(|(k, _)| k);
        if active.is_some() {
            labels[t] = 1;
        }
        if t > 0 {
            let factor = if active == Some(AnomalyKind::Speed) { 3.0 } else { 1.0 };
            if let Some((AnomalyKind::Direction, (a, b))) = anomaly {
                if t == a || t == b + 1 {
                    main.vel = [-main.vel[0], -main.vel[1]];
                }
            }
            main.advance(factor, limits);
            extra.advance(1.0, limits);
        }
        let mut squares = vec![main.pos];
        if active == Some(AnomalyKind::ExtraObject) {
            squares.push(extra.pos);
        }
        frames.push(render(cfg.frame_size, side, &squares));
    }
    SynthVideo { frames, labels }
}

fn write_video(dir: &Path, video: &SynthVideo) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VadError::io(dir, e))?;
    for (i, img) in video.frames.iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        img.save_with_format(&path, image::ImageFormat::Png).map_err(|e| VadError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub train_videos: Vec<String>,
    pub test_videos: Vec<String>,
}

/// Writes a synthetic dataset under `out`. Output is a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = SynthSummary {
        train_videos: Vec::new(),
        test_videos: Vec::new(),
    };
    let train_dir = out.join(Split::Train.dir_name());
    let test_dir = out.join(Split::Test.dir_name());
    for d in [&train_dir, &test_dir] {
        fs::create_dir_all(d).map_err(|e| VadError::io(d, e))?;
    }

    for i in 0..cfg.num_normal_videos {
        let id = format!("train_{i:03}");
        let video = synth_video(cfg, None, master.gen());
        write_video(&train_dir.join(&id), &video)?;
        summary.train_videos.push(id);
    }

    let n = cfg.frames_per_video;
    let seg_len = ((n as f64 * SEGMENT_LEN_FRACTION).round() as usize).max(1);
    let total_test = cfg.num_normal_test_videos + cfg.num_anomalous_videos;
    for i in 0..total_test {
        let video_seed: u64 = master.gen();
        let segment_start: usize = master.gen_range(n / 4..=(n / 2).max(n / 4));
        let (id, anomaly) = if i < cfg.num_normal_test_videos {
            (format!("test_{i:03}_normal"), None)
        } else {
            let kind = cfg.anomaly_kinds[(i - cfg.num_normal_test_videos) % cfg.anomaly_kinds.len()];
            let seg = cfg
                .anomaly_segment
                .unwrap_or((segment_start, (segment_start + seg_len - 1).min(n - 1)));
            (format!("test_{i:03}_{}", kind.name()), Some((kind, seg)))
        };
        let video = synth_video(cfg, anomaly, video_seed);
        write_video(&test_dir.join(&id), &video)?;
        let labels: Vec<String> = video.labels.iter().map(u8::to_string).collect();
        let path = test_dir.join(format!("{id}.labels"));
        fs::write(&path, labels.join(" ") + "\n").map_err(|e| VadError::io(&path, e))?;
        summary.test_videos.push(id);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            frame_size: (16, 16),
            num_normal_videos: 2,
            num_anomalous_videos: 2,
            frames_per_video: 12,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn pixel_map_endpoints() {
        assert_eq!(pixel_to_unit(255), 1.0);
        assert_eq!(pixel_to_unit(0), -1.0);
        assert_eq!(127.5f32 / 127.5 - 1.0, 0.0);
        assert_eq!(unit_to_pixel(1.0), 255);
        assert_eq!(unit_to_pixel(-1.0), 0);
    }

    #[test]
    fn label_parsing() {
        assert_eq!(parse_labels("0 0 1 1 0", "v", 5).unwrap(), vec![0, 0, 1, 1, 0]);
        assert!(matches!(parse_labels("0 0 1 1", "v", 5), Err(VadError::Validation(_))));
        assert!(matches!(parse_labels("0 2 1 1 0", "v", 5), Err(VadError::Validation(_))));
    }

    #[test]
    fn window_arithmetic() {
        let w = training_windows(&[("a".into(), 20)], 16, 4, 0);
        let mut starts: Vec<_> = w.iter().map(|w| w.start).collect();
        starts.sort();
        assert_eq!(starts, vec![0, 4]);
        assert!(training_windows(&[("a".into(), 10)], 16, 4, 0).is_empty());
    }

    #[test]
    fn seeds_permute_the_same_windows() {
        let counts = vec![("a".to_string(), 40), ("b".to_string(), 33)];
        let a = training_windows(&counts, 16, 2, 1);
        let b = training_windows(&counts, 16, 2, 2);
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
    }

    #[test]
    fn kind_parsing_lists_valid_kinds() {
        assert_eq!("extra_object".parse::<AnomalyKind>().unwrap(), AnomalyKind::ExtraObject);
        let err = "teleport".parse::<AnomalyKind>().unwrap_err().to_string();
        assert!(err.contains("speed") && err.contains("direction"), "{err}");
        assert_eq!(AnomalyKind::from_video_id("test_004_extra_object"), Some(AnomalyKind::ExtraObject));
    }

    #[test]
    fn labels_mark_the_configured_segment() {
        let cfg = SynthConfig {
            frames_per_video: 80,
            anomaly_segment: Some((40, 60)),
            ..small(3)
        };
        let v = synth_video(&cfg, Some((AnomalyKind::Speed, (40, 60))), 9);
        for (i, &l) in v.labels.iter().enumerate() {
            assert_eq!(l == 1, (40..=60).contains(&i), "frame {i}");
        }
    }

    #[test]
    fn extra_object_brightens_only_inside_segment() {
        let cfg = small(4);
        let normal = synth_video(&cfg, None, 11);
        let odd = synth_video(&cfg, Some((AnomalyKind::ExtraObject, (5, 8))), 11);
        let mass = |img: &GrayImage| img.pixels().map(|p| p.0[0] as f64 - BACKGROUND).sum::<f64>();
        for t in 0..12 {
            if (5..=8).contains(&t) {
                assert!(mass(&odd.frames[t]) > mass(&normal.frames[t]) + 1.0);
            } else {
                assert_eq!(odd.frames[t], normal.frames[t]);
            }
        }
    }

    #[test]
    fn square_stays_inside_the_frame() {
        let cfg = SynthConfig {
            frames_per_video: 200,
            ..small(5)
        };
        let v = synth_video(&cfg, Some((AnomalyKind::Speed, (0, 199))), 1);
        let side = cfg.square_side();
        let full = (FOREGROUND - BACKGROUND) * side * side;
        for img in &v.frames {
            let m: f64 = img.pixels().map(|p| p.0[0] as f64 - BACKGROUND).sum();
            assert!((m - full).abs() < 0.02 * full, "{m} vs {full}");
        }
    }

    #[test]
    fn generate_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(6);
        generate_synthetic(&cfg, dir.path()).unwrap();
        let train = load_dataset(dir.path(), Split::Train).unwrap();
        let test = load_dataset(dir.path(), Split::Test).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 2);
        assert!(train.iter().all(|r| r.frame_count == 12 && r.labels.is_none()));
        assert!(test.iter().all(|r| r.labels.as_ref().map(Vec::len) == Some(12)));

        let clip = load_clip(&train[0], 0, 12, (16, 16)).unwrap();
        assert_eq!(clip.len(), 12);
        assert_eq!(clip.frames[0].pixels.shape(), [1, 1, 16, 16]);
        assert!(clip.frames.iter().all(|f| f.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        assert!(matches!(load_clip(&train[0], 5, 12, (16, 16)), Err(VadError::Range(_))));

        let resized = load_clip(&train[0], 0, 1, (8, 8)).unwrap();
        assert_eq!(resized.frames[0].pixels.shape(), [1, 1, 8, 8]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&small(7), a.path()).unwrap();
        generate_synthetic(&small(7), b.path()).unwrap();
        let f = |root: &Path| fs::read(root.join("test/test_001_extra_object/000007.png")).unwrap();
        assert_eq!(f(a.path()), f(b.path()));
    }

    #[test]
    fn no_anomalous_videos_gives_all_zero_labels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_anomalous_videos: 0,
            num_normal_test_videos: 2,
            ..small(8)
        };
        generate_synthetic(&cfg, dir.path()).unwrap();
        let test = load_dataset(dir.path(), Split::Test).unwrap();
        assert_eq!(test.len(), 2);
        assert!(test.iter().all(|r| r.labels.as_ref().unwrap().iter().all(|&l| l == 0)));
    }

    #[test]
    fn gap_in_numbering_names_the_video() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small(9), dir.path()).unwrap();
        fs::remove_file(dir.path().join("train/train_001/000003.png")).unwrap();
        let err = load_dataset(dir.path(), Split::Train).unwrap_err().to_string();
        assert!(err.contains("train_001"), "{err}");
    }

    #[test]
    fn missing_root_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(&dir.path().join("nope"), Split::Train), Err(VadError::Io { .. })));
    }

    #[test]
    fn prefetch_preserves_order() {
        let got: Vec<_> = prefetch(0..100, 4).collect();
        assert_eq!(got, (0..100).collect::<Vec<_>>());
    }
}
