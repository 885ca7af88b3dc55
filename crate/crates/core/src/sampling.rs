//! Clip and frame sampling.
//!
//! Training draws a few random clip windows per video; inference places
//! windows deterministically at uniform centers. Frames inside a window are
//! always picked by the same midpoint rule, so a plan's cost is exactly
//! `clips x frames_per_clip` frames per video per step.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

/// How clip windows are placed on the video timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Independent uniform starts; windows may overlap.
    SparseRandom,
    /// Deterministic centers at (i + 0.5) / n of the duration.
    DenseUniform,
    /// The single middle clip.
    Middle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPlan {
    /// Clip length in seconds.
    pub clip_seconds: f64,
    /// Clips per video per training step.
    pub train_clips: usize,
    /// Clips per video at inference.
    pub test_clips: usize,
    /// Frames sampled inside each clip.
    pub frames_per_clip: usize,
    pub strategy: SamplingStrategy,
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.train_clips == 0 || self.test_clips == 0 || self.frames_per_clip == 0 {
            return Err(Error::Config(
                "sampling plan needs at least one clip and one frame".into(),
            ));
        }
        if self.clip_seconds <= 0.0 {
            return Err(Error::Config("clip duration must be positive".into()));
        }
        Ok(())
    }

    /// Frames consumed per video per training step.
    pub fn frames_per_step(&self) -> usize {
        self.train_clips * self.frames_per_clip
    }
}

/// A resolved clip: where it sits on the timeline and which frames it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipWindow {
    pub start_seconds: f64,
    pub duration_seconds: f64,
    pub frame_indices: Vec<usize>,
}

/// Independent uniform clip starts over [0, duration - clip_len]; windows may
/// overlap.
pub fn sample_sparse_clips(
    video_seconds: f64,
    fps: u32,
    clip_seconds: f64,
    n: usize,
    frames_per_clip: usize,
    rng: &mut Rng,
) -> Result<Vec<ClipWindow>> {
    if video_seconds < clip_seconds {
        return Err(Error::Input(format!(
            "video of {video_seconds}s shorter than clip of {clip_seconds}s"
        )));
    }
    let max_start = video_seconds - clip_seconds;
    (0..n)
        .map(|_| {
            let start = rng.uniform_in(0.0, max_start.max(0.0));
            let start = if max_start == 0.0 { 0.0 } else { start };
            resolve_window(start, clip_seconds, video_seconds, fps, frames_per_clip)
        })
        .collect()
}

/// n windows with centers at (i + 0.5) * duration / n, clamped in-bounds.
/// n = 1 degenerates to the middle clip.
pub fn sample_dense_uniform(
    video_seconds: f64,
    fps: u32,
    clip_seconds: f64,
    n: usize,
    frames_per_clip: usize,
) -> Result<Vec<ClipWindow>> {
    if n == 0 {
        return Err(Error::Input("need at least one clip".into()));
    }
    if video_seconds < clip_seconds {
        return Err(Error::Input(format!(
            "video of {video_seconds}s shorter than clip of {clip_seconds}s"
        )));
    }
    (0..n)
        .map(|i| {
            let center = (i as f64 + 0.5) * video_seconds / n as f64;
            let start = (center - clip_seconds / 2.0)
                .max(0.0)
                .min(video_seconds - clip_seconds);
            resolve_window(start, clip_seconds, video_seconds, fps, frames_per_clip)
        })
        .collect()
}

/// Windows for a plan's inference settings.
pub fn sample_eval_clips(
    video_seconds: f64,
    fps: u32,
    plan: &SamplingPlan,
) -> Result<Vec<ClipWindow>> {
    sample_dense_uniform(
        video_seconds,
        fps,
        plan.clip_seconds,
        plan.test_clips,
        plan.frames_per_clip,
    )
}

/// Windows for a plan's training settings.
pub fn sample_train_clips(
    video_seconds: f64,
    fps: u32,
    plan: &SamplingPlan,
    rng: &mut Rng,
) -> Result<Vec<ClipWindow>> {
    match plan.strategy {
        SamplingStrategy::SparseRandom => sample_sparse_clips(
            video_seconds,
            fps,
            plan.clip_seconds,
            plan.train_clips,
            plan.frames_per_clip,
            rng,
        ),
        SamplingStrategy::DenseUniform => sample_dense_uniform(
            video_seconds,
            fps,
            plan.clip_seconds,
            plan.train_clips,
            plan.frames_per_clip,
        ),
        SamplingStrategy::Middle => sample_dense_uniform(
            video_seconds,
            fps,
            plan.clip_seconds,
            1,
            plan.frames_per_clip,
        ),
    }
}

fn resolve_window(
    start_seconds: f64,
    clip_seconds: f64,
    video_seconds: f64,
    fps: u32,
    frames_per_clip: usize,
) -> Result<ClipWindow> {
    let total_frames = (video_seconds * fps as f64).round() as usize;
    let window_frames = (clip_seconds * fps as f64).round() as usize;
    let first = ((start_seconds * fps as f64).floor() as usize)
        .min(total_frames.saturating_sub(window_frames));
    let offsets = frame_offsets_in_clip(window_frames, frames_per_clip)?;
    Ok(ClipWindow {
        start_seconds,
        duration_seconds: clip_seconds,
        frame_indices: offsets.into_iter().map(|o| first + o).collect(),
    })
}

/// Midpoint rule: offset_i = floor((i + 0.5) * frames / t). t = 1 picks the
/// middle frame.
pub fn frame_offsets_in_clip(frames_in_window: usize, t: usize) -> Result<Vec<usize>> {
    if frames_in_window == 0 {
        return Err(Error::Input("empty clip window".into()));
    }
    if t == 0 {
        return Err(Error::Input("need at least one frame per clip".into()));
    }
    Ok((0..t)
        .map(|i| ((i as f64 + 0.5) * frames_in_window as f64 / t as f64).floor() as usize)
        .map(|o| o.min(frames_in_window - 1))
        .collect())
}

/// Scales so the longer side becomes `target`, keeping aspect ratio
/// (bilinear), then zero-pads the short side. Content anchors top-left.
/// Input and output are `[3, h, w]` row-major u8 planes.
pub fn resize_zero_pad(image: &[u8], h: usize, w: usize, target: usize) -> Result<Vec<u8>> {
    if h == 0 || w == 0 || image.len() != 3 * h * w {
        return Err(Error::Input(format!(
            "bad image buffer: {}x{} with {} bytes",
            h,
            w,
            image.len()
        )));
    }
    let scale = target as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, target);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, target);
    let mut out = vec![0u8; 3 * target * target];
    for c in 0..3 {
        let plane = &image[c * h * w..(c + 1) * h * w];
        for y in 0..nh {
            // inverse map with half-pixel centers
            let sy = ((y as f64 + 0.5) / scale - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..nw {
                let sx = ((x as f64 + 0.5) / scale - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let v00 = plane[y0 * w + x0] as f64;
                let v01 = plane[y0 * w + x1] as f64;
                let v10 = plane[y1 * w + x0] as f64;
                let v11 = plane[y1 * w + x1] as f64;
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out[(c * target + y) * target + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use crate::rng::Rng as SeedRng;

    fn plan(strategy: SamplingStrategy) -> SamplingPlan {
        SamplingPlan {
            clip_seconds: 1.0,
            train_clips: 4,
            test_clips: 4,
            frames_per_clip: 2,
            strategy,
        }
    }

    #[test]
    fn sparse_starts_uniform_chi_square() {
        // 10s video, 1s clips: starts uniform over [0,9].
        // chi-square over 10 bins, 100k draws, critical value for p=0.01 at
        // 9 dof is 21.666.
        let mut rng = SeedRng::new(20240901);
        let draws = 100_000;
        let mut bins = [0usize; 10];
        let mut starts = Vec::with_capacity(draws);
        for _ in 0..draws {
            let w = sample_sparse_clips(10.0, 8, 1.0, 1, 1, &mut rng).unwrap();
            let s = w[0].start_seconds;
            assert!((0.0..=9.0).contains(&s));
            bins[((s / 9.0) * 10.0).min(9.999) as usize] += 1;
            starts.push(s);
        }
        let expect = draws as f64 / 10.0;
        let chi2: f64 = bins
            .iter()
            .map(|&o| (o as f64 - expect).powi(2) / expect)
            .sum();
        assert!(chi2 < 21.666, "chi-square {chi2} rejects uniformity");

        // successive draws are uncorrelated
        let mean = starts.iter().sum::<f64>() / draws as f64;
        let var: f64 = starts.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / draws as f64;
        let lag1: f64 = starts
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / (draws as f64 - 1.0);
        let rho = lag1 / var;
        assert!(rho.abs() < 0.02, "lag-1 autocorrelation {rho}");
    }

    #[test]
    fn sparse_degenerate_range_starts_at_zero() {
        let mut rng = SeedRng::new(1);
        for _ in 0..20 {
            let w = sample_sparse_clips(1.0, 8, 1.0, 1, 1, &mut rng).unwrap();
            assert_eq!(w[0].start_seconds, 0.0);
        }
    }

    #[test]
    fn sparse_cardinality_and_bounds() {
        let mut rng = SeedRng::new(2);
        let ws = sample_sparse_clips(10.0, 8, 1.0, 4, 2, &mut rng).unwrap();
        assert_eq!(ws.len(), 4);
        for w in &ws {
            assert!(w.start_seconds >= 0.0);
            assert!(w.start_seconds + w.duration_seconds <= 10.0 + 1e-9);
            assert_eq!(w.frame_indices.len(), 2);
        }
    }

    #[test]
    fn sparse_rejects_short_video() {
        let mut rng = SeedRng::new(3);
        assert!(matches!(
            sample_sparse_clips(0.5, 8, 1.0, 1, 1, &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn dense_centers_match_stated_rule() {
        let ws = sample_dense_uniform(16.0, 8, 1.0, 4, 1).unwrap();
        let centers: Vec<f64> = ws
            .iter()
            .map(|w| w.start_seconds + w.duration_seconds / 2.0)
            .collect();
        assert_eq!(centers, vec![2.0, 6.0, 10.0, 14.0]);
    }

    #[test]
    fn dense_single_clip_is_middle() {
        let ws = sample_dense_uniform(10.0, 8, 1.0, 1, 1).unwrap();
        assert!((ws[0].start_seconds - 4.5).abs() < 1e-12);
        assert!((ws[0].start_seconds + ws[0].duration_seconds - 5.5).abs() < 1e-12);
    }

    #[test]
    fn frame_offsets_follow_midpoint_rule() {
        assert_eq!(frame_offsets_in_clip(8, 2).unwrap(), vec![2, 6]);
        assert_eq!(frame_offsets_in_clip(8, 1).unwrap(), vec![4]);
        assert_eq!(
            frame_offsets_in_clip(8, 8).unwrap(),
            (0..8).collect::<Vec<_>>()
        );
        assert!(frame_offsets_in_clip(0, 1).is_err());
    }

    #[test]
    fn plan_frames_per_step_is_exact_product() {
        let p = plan(SamplingStrategy::SparseRandom);
        assert_eq!(p.frames_per_step(), 8);
        let mut rng = SeedRng::new(5);
        let ws = sample_train_clips(10.0, 8, &p, &mut rng).unwrap();
        let total: usize = ws.iter().map(|w| w.frame_indices.len()).sum();
        assert_eq!(total, p.frames_per_step());
    }

    #[test]
    fn resize_rectangular_input_pads_bottom() {
        // 240x320 -> longer side 320 scales to 64, height becomes 48,
        // 16 zero rows below.
        let (h, w) = (240usize, 320usize);
        let img = vec![200u8; 3 * h * w];
        let out = resize_zero_pad(&img, h, w, 64).unwrap();
        for c in 0..3 {
            for y in 0..48 {
                for x in 0..64 {
                    assert_eq!(out[(c * 64 + y) * 64 + x], 200, "content at ({y},{x})");
                }
            }
            for y in 48..64 {
                for x in 0..64 {
                    assert_eq!(out[(c * 64 + y) * 64 + x], 0, "pad at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn resize_square_input_has_no_padding() {
        let img = vec![37u8; 3 * 16 * 16];
        let out = resize_zero_pad(&img, 16, 16, 32).unwrap();
        assert!(out.iter().all(|&v| v == 37));
    }

    proptest! {
        // dense windows: in bounds, starts non-decreasing, count as asked
        #[test]
        fn dense_windows_sorted_and_bounded(
            duration in 1.0f64..60.0,
            n in 1usize..20,
        ) {
            let clip = 1.0f64.min(duration);
            let ws = sample_dense_uniform(duration, 8, clip, n, 1).unwrap();
            prop_assert_eq!(ws.len(), n);
            let mut prev = -1.0;
            for w in &ws {
                prop_assert!(w.start_seconds >= 0.0);
                prop_assert!(w.start_seconds + w.duration_seconds <= duration + 1e-9);
                prop_assert!(w.start_seconds >= prev - 1e-12);
                prev = w.start_seconds;
            }
        }

        // frame picks: monotone non-decreasing, deterministic in (frames, t)
        #[test]
        fn frame_offsets_monotone(frames in 1usize..200, t in 1usize..32) {
            let a = frame_offsets_in_clip(frames, t).unwrap();
            let b = frame_offsets_in_clip(frames, t).unwrap();
            prop_assert_eq!(&a, &b);
            for pair in a.windows(2) {
                prop_assert!(pair[0] <= pair[1]);
            }
            for &o in &a {
                prop_assert!(o < frames);
            }
        }

        // padded region of a resized image is exactly zero
        #[test]
        fn resize_pad_region_zero(h in 4usize..40, w in 4usize..40) {
            let img = vec![255u8; 3 * h * w];
            let target = 32;
            let out = resize_zero_pad(&img, h, w, target).unwrap();
            let scale = target as f64 / h.max(w) as f64;
            let nh = ((h as f64 * scale).round() as usize).clamp(1, target);
            let nw = ((w as f64 * scale).round() as usize).clamp(1, target);
            for c in 0..3 {
                for y in 0..target {
                    for x in 0..target {
                        if y >= nh || x >= nw {
                            prop_assert_eq!(out[(c * target + y) * target + x], 0);
                        }
                    }
                }
            }
        }
    }
}
