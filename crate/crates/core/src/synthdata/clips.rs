use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Splits a video of `video_len` frames into contiguous, ordered clips whose
/// lengths lie in `[min_len, max_len]`.
///
/// The fewest clips that respect `max_len` are used, with lengths as equal as
/// possible. When that would push a clip below `min_len`, full `max_len` clips
/// are taken greedily and a final remainder shorter than `min_len` is dropped.
pub fn segment_clips(video_len: usize, min_len: usize, max_len: usize) -> Vec<(usize, usize)> {
    if min_len == 0 || min_len > max_len || min_len > video_len {
        return Vec::new();
    }
    let count = video_len.div_ceil(max_len);
    let base = video_len / count;
    if base >= min_len {
        let extra = video_len % count;
        let mut ranges = Vec::with_capacity(count);
        let mut start = 0;
        for i in 0..count {
            let len = base + usize::from(i < extra);
            ranges.push((start, start + len));
            start += len;
        }
        return ranges;
    }
    let mut ranges = Vec::new();
    let mut start = 0;
    while video_len - start >= max_len {
        ranges.push((start, start + max_len));
        start += max_len;
    }
    if video_len - start >= min_len {
        ranges.push((start, video_len));
    }
    ranges
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub path: String,
    pub frames: usize,
    pub scene_id: String,
    /// Upsampling factor of the clip's source dataset.
    #[serde(default = "one")]
    pub repeat: usize,
}

fn one() -> usize {
    1
}

/// Immutable list of training clips with frame-proportional sampling weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub clips: Vec<ClipEntry>,
    pub weights: Vec<f64>,
}

impl DatasetManifest {
    pub fn build(clips: Vec<ClipEntry>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Config("manifest needs at least one clip".into()));
        }
        if let Some(bad) = clips.iter().find(|c| c.frames == 0 || c.repeat == 0) {
            return Err(Error::Config(format!("clip {} has zero frames or zero repeat", bad.path)));
        }
        let raw: Vec<f64> = clips.iter().map(|c| (c.frames * c.repeat) as f64).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        Ok(Self { clips, weights })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Draws a clip index with probability proportional to its weight.
    pub fn sample_clip<R: Rng>(&self, rng: &mut R) -> usize {
        let dist = WeightedIndex::new(&self.weights).expect("weights validated at build");
        dist.sample(rng)
    }

    /// Like [`sample_clip`](Self::sample_clip) but restricted to clips holding
    /// at least `min_frames` frames. Returns `None` when no clip qualifies.
    pub fn sample_clip_with_min_frames<R: Rng>(&self, rng: &mut R, min_frames: usize) -> Option<usize> {
        let masked: Vec<f64> = self
            .clips
            .iter()
            .zip(&self.weights)
            .map(|(c, &w)| if c.frames >= min_frames { w } else { 0.0 })
            .collect();
        let dist = WeightedIndex::new(&masked).ok()?;
        Some(dist.sample(rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(frames: usize) -> ClipEntry {
        ClipEntry {
            path: format!("clip{frames}"),
            frames,
            scene_id: "s".into(),
            repeat: 1,
        }
    }

    #[test]
    fn segments_long_video_within_bounds() {
        let r = segment_clips(120, 30, 60);
        assert!(!r.is_empty());
        for w in r.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        assert!(r.iter().all(|(s, e)| (30..=60).contains(&(e - s))));
        assert_eq!(segment_clips(14, 30, 60), vec![]);
        assert_eq!(segment_clips(60, 60, 60), vec![(0, 60)]);
        assert_eq!(segment_clips(70, 30, 60), vec![(0, 35), (35, 70)]);
        assert_eq!(segment_clips(70, 50, 60), vec![(0, 60)]);
    }

    #[test]
    fn weights_follow_frame_counts() {
        let m = DatasetManifest::build(vec![entry(30), entry(60)]).unwrap();
        assert!((m.weights[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.weights[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 30_000;
        let hits = (0..n).filter(|_| m.sample_clip(&mut rng) == 0).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 1.0 / 3.0).abs() < 0.02, "{freq}");
    }

    #[test]
    fn single_clip_and_zero_frames() {
        let m = DatasetManifest::build(vec![entry(7)]).unwrap();
        assert_eq!(m.weights, vec![1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| m.sample_clip(&mut rng) == 0));
        assert!(DatasetManifest::build(vec![entry(5), entry(0)]).is_err());
        assert!(DatasetManifest::build(vec![]).is_err());
    }

    #[test]
    fn repeat_counts_upsample_sources() {
        let mut a = entry(30);
        a.repeat = 40;
        let m = DatasetManifest::build(vec![a, entry(1200)]).unwrap();
        assert!((m.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn min_frame_restriction() {
        let m = DatasetManifest::build(vec![entry(1), entry(20)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..50).all(|_| m.sample_clip_with_min_frames(&mut rng, 5) == Some(1)));
        assert_eq!(m.sample_clip_with_min_frames(&mut rng, 21), None);
    }

    proptest! {
        #[test]
        fn ranges_disjoint_ordered_and_bounded(len in 1usize..500, a in 1usize..80, b in 1usize..80) {
            let (min_len, max_len) = (a.min(b), a.max(b));
            let ranges = segment_clips(len, min_len, max_len);
            let mut cursor = 0;
            for &(s, e) in &ranges {
                prop_assert_eq!(s, cursor);
                prop_assert!(e - s >= min_len && e - s <= max_len);
                cursor = e;
            }
            prop_assert!(cursor <= len);
            if min_len <= len {
                prop_assert!(!ranges.is_empty());
                // Whatever is left over is too short to form a clip.
                prop_assert!(len - cursor < min_len);
            }
        }
    }
}
