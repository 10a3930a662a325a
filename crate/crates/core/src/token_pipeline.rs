//! Normalizes variable-length modality streams into fixed token counts.
//!
//! Audio is pooled or zero-padded to `audio_tokens` rows, video is reduced to
//! `video_frames` uniformly sampled frames of `spatial_grid x spatial_grid`
//! cells, and the middle frame supplies both a broadcast global token stream
//! and `global_tokens` image tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub audio_tokens: usize,
    pub video_frames: usize,
    pub spatial_grid: usize,
    pub global_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { audio_tokens: 64, video_frames: 16, spatial_grid: 2, global_tokens: 16 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("audio_tokens", self.audio_tokens),
            ("video_frames", self.video_frames),
            ("spatial_grid", self.spatial_grid),
            ("global_tokens", self.global_tokens),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::Config(format!("pipeline.{name} must be at least 1"))),
            None => Ok(()),
        }
    }

    /// Token count of the temporal video stream.
    pub fn temporal_tokens(&self) -> usize {
        self.video_frames * self.spatial_grid * self.spatial_grid
    }
}

/// Averaging window `[floor(i*len/target), ceil((i+1)*len/target))`.
pub fn pool_window(i: usize, len: usize, target: usize) -> (usize, usize) {
    let start = i * len / target;
    let end = ((i + 1) * len).div_ceil(target);
    (start, end)
}

/// Pools `[L x d]` rows to `[target x d]` by adaptive averaging, or appends
/// zero rows when `L < target`.
pub fn adaptive_pool_1d(seq: &FeatureTensor, target: usize) -> Result<FeatureTensor> {
    if target == 0 {
        return Err(Error::InvalidArgument("pool target must be at least 1".into()));
    }
    let (len, d) = seq.as_matrix()?;
    if len == 0 || d == 0 {
        return Err(Error::EmptySequence);
    }
    let src = seq.data();
    if len < target {
        let mut out = src.to_vec();
        out.resize(target * d, 0.0);
        return FeatureTensor::new(vec![target, d], out);
    }
    let mut out = vec![0.0; target * d];
    for (i, dst) in out.chunks_exact_mut(d).enumerate() {
        let (start, end) = pool_window(i, len, target);
        for row in src[start * d..end * d].chunks_exact(d) {
            for (o, v) in dst.iter_mut().zip(row) {
                *o += v;
            }
        }
        let width = (end - start) as f64;
        dst.iter_mut().for_each(|o| *o /= width);
    }
    FeatureTensor::new(vec![target, d], out)
}

/// Uniformly spaced frame indices, `round(j*(n-1)/(k-1))`. Short clips
/// (`n < k`) list every frame once and then repeat the last one.
pub fn sample_frames(n: usize, k: usize) -> Result<Vec<usize>> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!("sample_frames needs n, k >= 1 (got n={n}, k={k})")));
    }
    if n < k {
        return Ok((0..k).map(|j| j.min(n - 1)).collect());
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    // Integer round-half-up of j*(n-1)/(k-1).
    let (num, den) = (n - 1, k - 1);
    Ok((0..k).map(|j| (2 * j * num + den) / (2 * den)).collect())
}

/// Averages an `[H x W x d]` frame over a `grid x grid` adaptive partition,
/// emitting the cells row-major as `[grid*grid x d]`.
pub fn spatial_pool(frame: &FeatureTensor, grid: usize) -> Result<FeatureTensor> {
    let [h, w, d] = frame.dims()[..] else {
        return Err(Error::Shape(format!("expected an [H x W x d] frame, got {:?}", frame.dims())));
    };
    if grid == 0 {
        return Err(Error::InvalidArgument("grid must be at least 1".into()));
    }
    if h < grid || w < grid {
        return Err(Error::GridExceedsFrame { grid, height: h, width: w });
    }
    let src = frame.data();
    let mut out = vec![0.0; grid * grid * d];
    for r in 0..grid {
        let (r0, r1) = pool_window(r, h, grid);
        for c in 0..grid {
            let (c0, c1) = pool_window(c, w, grid);
            let dst = &mut out[(r * grid + c) * d..(r * grid + c + 1) * d];
            for y in r0..r1 {
                for x in c0..c1 {
                    let px = &src[(y * w + x) * d..(y * w + x + 1) * d];
                    for (o, v) in dst.iter_mut().zip(px) {
                        *o += v;
                    }
                }
            }
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            dst.iter_mut().for_each(|o| *o /= count);
        }
    }
    FeatureTensor::new(vec![grid * grid, d], out)
}

pub fn middle_frame(n: usize) -> usize {
    n / 2
}

/// Repeats a single `[1 x d]` token `t` times.
pub fn broadcast_global(cls: &FeatureTensor, t: usize) -> Result<FeatureTensor> {
    let (rows, d) = cls.as_matrix()?;
    if rows != 1 {
        return Err(Error::ExpectedSingleToken(rows));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("broadcast count must be at least 1".into()));
    }
    FeatureTensor::new(vec![t, d], cls.data().repeat(t))
}

/// Fixed-shape token streams derived from one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTokens {
    /// `[audio_tokens x d_a]`
    pub audio: FeatureTensor,
    /// Middle-frame class token broadcast to `[audio_tokens x d_g]`.
    pub global: FeatureTensor,
    /// `[video_frames * grid^2 x d_v]`
    pub temporal: FeatureTensor,
    /// Middle-frame patch tokens pooled to `[global_tokens x d_g]`.
    pub image: FeatureTensor,
}

/// Runs the full pipeline on raw per-sample features.
///
/// * `audio`: `[L x d_a]` encoder frames.
/// * `video`: `[n x H x W x d_v]` per-frame spatial features.
/// * `global`: `[n x (1 + P) x d_g]` per-frame class token followed by `P`
///   patch tokens; only the middle frame is used.
pub fn tokenize_streams(
    audio: &FeatureTensor,
    video: &FeatureTensor,
    global: &FeatureTensor,
    cfg: &PipelineConfig,
) -> Result<ModalityTokens> {
    cfg.validate()?;
    let audio_tok = adaptive_pool_1d(audio, cfg.audio_tokens)?;

    let [n, h, w, dv] = video.dims()[..] else {
        return Err(Error::Shape(format!("video features must be [n x H x W x d], got {:?}", video.dims())));
    };
    let mut temporal = Vec::with_capacity(cfg.temporal_tokens() * dv);
    for idx in sample_frames(n, cfg.video_frames)? {
        let frame = FeatureTensor::new(vec![h, w, dv], video.row(idx).to_vec())?;
        temporal.extend_from_slice(spatial_pool(&frame, cfg.spatial_grid)?.data());
    }
    let temporal = FeatureTensor::new(vec![cfg.temporal_tokens(), dv], temporal)?;

    let [gn, tokens, dg] = global.dims()[..] else {
        return Err(Error::Shape(format!("global features must be [n x (1+P) x d], got {:?}", global.dims())));
    };
    if tokens < 2 {
        return Err(Error::Shape("global features need a class token and at least one patch".into()));
    }
    let mid = global.row(middle_frame(gn));
    let cls = FeatureTensor::new(vec![1, dg], mid[..dg].to_vec())?;
    let patches = FeatureTensor::new(vec![tokens - 1, dg], mid[dg..].to_vec())?;
    Ok(ModalityTokens {
        audio: audio_tok,
        global: broadcast_global(&cls, cfg.audio_tokens)?,
        temporal,
        image: adaptive_pool_1d(&patches, cfg.global_tokens)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> FeatureTensor {
        FeatureTensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pool_identity_when_lengths_match() {
        let seq = FeatureTensor::new(vec![64, 3], (0..192).map(|v| v as f64 * 0.5).collect()).unwrap();
        assert_eq!(adaptive_pool_1d(&seq, 64).unwrap(), seq);
    }

    #[test]
    fn pool_halves_even_length() {
        let seq = FeatureTensor::new(vec![128, 2], (0..256).map(|v| (v * v % 17) as f64).collect()).unwrap();
        let out = adaptive_pool_1d(&seq, 64).unwrap();
        for i in 0..64 {
            for c in 0..2 {
                let want = (seq.data()[(2 * i) * 2 + c] + seq.data()[(2 * i + 1) * 2 + c]) / 2.0;
                assert_eq!(out.data()[i * 2 + c], want);
            }
        }
    }

    #[test]
    fn pool_zero_pads_short_sequences() {
        let out = adaptive_pool_1d(&mat(&[&[1.0], &[2.0]]), 4).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_rejects_non_matrix() {
        let t = FeatureTensor::zeros(&[2, 2, 2]);
        assert!(adaptive_pool_1d(&t, 2).is_err());
        assert!(adaptive_pool_1d(&mat(&[&[1.0]]), 0).is_err());
    }

    #[test]
    fn frame_sampling_examples() {
        assert_eq!(sample_frames(16, 16).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(sample_frames(31, 16).unwrap(), (0..16).map(|j| 2 * j).collect::<Vec<_>>());
        assert_eq!(sample_frames(1, 4).unwrap(), vec![0; 4]);
        assert_eq!(sample_frames(3, 5).unwrap(), vec![0, 1, 2, 2, 2]);
        assert_eq!(sample_frames(9, 1).unwrap(), vec![0]);
        assert!(sample_frames(0, 1).is_err());
    }

    #[test]
    fn frame_sampling_rounds_half_up() {
        // j*(n-1)/(k-1) = 1.5 for n=4, k=3, j=1.
        assert_eq!(sample_frames(4, 3).unwrap(), vec![0, 2, 3]);
    }

    #[test]
    fn frame_sampling_monotone_and_bounded_exhaustive() {
        for n in 1..=256 {
            for k in 1..=256 {
                let idx = sample_frames(n, k).unwrap();
                assert_eq!(idx.len(), k);
                assert!(idx.windows(2).all(|w| w[0] <= w[1]), "n={n} k={k}");
                assert!(idx.iter().all(|&i| i < n));
                if n >= k && k > 1 {
                    let oracle: Vec<usize> =
                        (0..k).map(|j| (j as f64 * (n - 1) as f64 / (k - 1) as f64).round() as usize).collect();
                    assert_eq!(idx, oracle, "n={n} k={k}");
                }
            }
        }
    }

    #[test]
    fn spatial_pool_examples() {
        let f = FeatureTensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_pool(&f, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let ones = FeatureTensor::new(vec![4, 4, 3], vec![1.0; 48]).unwrap();
        assert!(spatial_pool(&ones, 2).unwrap().data().iter().all(|&v| v == 1.0));

        let f = FeatureTensor::new(vec![4, 4, 1], (1..=16).map(f64::from).collect()).unwrap();
        assert_eq!(spatial_pool(&f, 2).unwrap().data(), &[3.5, 5.5, 11.5, 13.5]);

        let small = FeatureTensor::zeros(&[1, 4, 1]);
        assert!(matches!(spatial_pool(&small, 2), Err(Error::GridExceedsFrame { .. })));
    }

    #[test]
    fn middle_frame_examples() {
        assert_eq!(middle_frame(5), 2);
        assert_eq!(middle_frame(4), 2);
        assert_eq!(middle_frame(1), 0);
    }

    #[test]
    fn broadcast_examples() {
        let out = broadcast_global(&mat(&[&[1.0, 2.0]]), 3).unwrap();
        assert_eq!(out.dims(), &[3, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let z = broadcast_global(&mat(&[&[0.0]]), 64).unwrap();
        assert_eq!(z.dims(), &[64, 1]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let h = broadcast_global(&mat(&[&[0.5, -0.5]]), 2).unwrap();
        assert_eq!(h.data(), &[0.5, -0.5, 0.5, -0.5]);
        assert!(matches!(broadcast_global(&mat(&[&[1.0], &[2.0]]), 2), Err(Error::ExpectedSingleToken(2))));
    }

    #[test]
    fn tokenize_streams_shapes() {
        let cfg = PipelineConfig::default();
        let audio = FeatureTensor::new(vec![100, 5], vec![0.25; 500]).unwrap();
        let video = FeatureTensor::new(vec![7, 4, 4, 3], vec![1.0; 7 * 48]).unwrap();
        let mut g = vec![0.0; 5 * 17 * 2];
        // middle frame (index 2) class token
        g[2 * 34] = 9.0;
        let global = FeatureTensor::new(vec![5, 17, 2], g).unwrap();
        let toks = tokenize_streams(&audio, &video, &global, &cfg).unwrap();
        assert_eq!(toks.audio.dims(), &[64, 5]);
        assert_eq!(toks.temporal.dims(), &[64, 3]);
        assert_eq!(toks.global.dims(), &[64, 2]);
        assert_eq!(toks.image.dims(), &[16, 2]);
        assert_eq!(toks.global.row(63), &[9.0, 0.0]);
    }

    proptest! {
        #[test]
        fn spatial_pool_commutes_with_shift(vals in proptest::collection::vec(-5.0f64..5.0, 30), c in -3.0f64..3.0) {
            let f = FeatureTensor::new(vec![5, 3, 2], vals.clone()).unwrap();
            let shifted = FeatureTensor::new(vec![5, 3, 2], vals.iter().map(|v| v + c).collect()).unwrap();
            let a = spatial_pool(&f, 2).unwrap();
            let b = spatial_pool(&shifted, 2).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x + c - y).abs() < 1e-12);
            }
        }

        #[test]
        fn pool_preserves_mean_when_target_divides(t in 1usize..16, factor in 1usize..6, seed in any::<u64>()) {
            let l = t * factor;
            let vals: Vec<f64> = (0..l).map(|i| ((seed.wrapping_add(i as u64 * 7919)) % 1000) as f64 / 100.0).collect();
            let seq = FeatureTensor::new(vec![l, 1], vals.clone()).unwrap();
            let out = adaptive_pool_1d(&seq, t).unwrap();
            let m_in = vals.iter().sum::<f64>() / l as f64;
            let m_out = out.data().iter().sum::<f64>() / t as f64;
            prop_assert!((m_in - m_out).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_windows_cover_without_gaps() {
        for l in 1..=128 {
            for t in 1..=l {
                let mut covered = vec![false; l];
                let mut prev_end = 0;
                for i in 0..t {
                    let (s, e) = pool_window(i, l, t);
                    assert!(s <= prev_end && e > s);
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                    prev_end = e;
                }
                assert_eq!(prev_end, l);
                assert!(covered.iter().all(|&c| c));
            }
        }
    }
}
