use proptest::prelude::*;
use vad_core::data::{generate_synthetic, load_dataset, pixel_to_unit, unit_to_pixel, LoadedVideo, Split, SynthConfig, VideoRecord};
use vad_core::scoring::{first_scored_frame, score_video, ScoringConfig};
use vad_core::{build_model, ModelConfig, Tensor};

#[test]
fn pixel_mapping_round_trips_every_byte() {
    for v in 0..=255u8 {
        let u = pixel_to_unit(v);
        assert!((-1.0..=1.0).contains(&u));
        assert_eq!(unit_to_pixel(u), v);
    }
    assert_eq!(pixel_to_unit(0), -1.0);
    assert_eq!(pixel_to_unit(255), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn generated_datasets_load_back_exactly(
        normal in 1usize..3,
        anomalous in 0usize..3,
        normal_test in 0usize..2,
        frames in 8usize..14,
        seed in any::<u64>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            frame_size: (16, 16),
            num_normal_videos: normal,
            num_anomalous_videos: anomalous,
            num_normal_test_videos: normal_test,
            frames_per_video: frames,
            seed,
            ..SynthConfig::default()
        };
        let summary = generate_synthetic(&cfg, dir.path()).unwrap();
        let train = load_dataset(dir.path(), Split::Train).unwrap();
        let test = load_dataset(dir.path(), Split::Test).unwrap();
        prop_assert_eq!(train.len(), normal);
        prop_assert_eq!(test.len(), anomalous + normal_test);
        prop_assert_eq!(summary.test_videos.len(), test.len());
        for r in train.iter().chain(&test) {
            prop_assert_eq!(r.frame_count, frames);
        }
        for r in &test {
            let labels = r.labels.as_ref().unwrap();
            prop_assert_eq!(labels.len(), frames);
            let ones: Vec<usize> = (0..frames).filter(|&i| labels[i] == 1).collect();
            if r.video_id.ends_with("_normal") {
                prop_assert!(ones.is_empty());
            } else {
                // One contiguous anomalous segment.
                prop_assert!(!ones.is_empty());
                prop_assert_eq!(ones.last().unwrap() - ones[0] + 1, ones.len());
            }
        }
    }
}

fn synthetic_video(id: &str, frames: Vec<Tensor<f32>>) -> LoadedVideo {
    LoadedVideo {
        record: VideoRecord {
            video_id: id.into(),
            frame_count: frames.len(),
            labels: None,
            dir: std::path::PathBuf::new(),
        },
        frames,
    }
}

#[test]
fn scoring_marks_exactly_the_frames_with_a_full_history() {
    let mc = ModelConfig {
        clip_len: 5,
        horizon: 2,
        frame_size: (8, 8),
        stage_channels: vec![2, 3],
        ..ModelConfig::desk()
    };
    let model = build_model::<f32>(&mc).unwrap();
    let frames: Vec<Tensor<f32>> = (0..13).map(|i| Tensor::full([1, 1, 8, 8], i as f32 / 13.0 - 0.5)).collect();
    let video = synthetic_video("v", frames);
    let cfg = ScoringConfig {
        score_offset: 2,
        batch_size: 3,
        ..ScoringConfig::default()
    };
    let mut seen = Vec::new();
    let s = score_video(&model, &video, &cfg, |f, _, _| {
        seen.push(f);
        Ok(())
    })
    .unwrap()
    .unwrap();
    let first = first_scored_frame(2, 2);
    assert_eq!(first, 4);
    let want: Vec<bool> = (0..13).map(|f| f >= first).collect();
    assert_eq!(s.scored, want);
    assert_eq!(seen, (first..13).collect::<Vec<_>>());
    assert!(s.mae[..first].iter().all(|&m| m == 0.0));
    let scored: Vec<f64> = (first..13).map(|f| s.score[f]).collect();
    assert!(scored.iter().any(|&v| v == 0.0) && scored.iter().any(|&v| v == 1.0));
}

#[test]
fn desk_scoring_starts_at_frame_eleven() {
    let mc = ModelConfig::desk();
    assert_eq!(first_scored_frame(mc.horizon, ScoringConfig::default().score_offset), 11);
}

#[test]
fn short_video_is_skipped() {
    let mc = ModelConfig {
        clip_len: 5,
        horizon: 2,
        frame_size: (8, 8),
        stage_channels: vec![2, 3],
        ..ModelConfig::desk()
    };
    let model = build_model::<f32>(&mc).unwrap();
    let video = synthetic_video("short", vec![Tensor::zeros([1, 1, 8, 8]); 6]);
    let cfg = ScoringConfig {
        score_offset: 2,
        ..ScoringConfig::default()
    };
    assert!(score_video(&model, &video, &cfg, |_, _, _| Ok(())).unwrap().is_none());
}
