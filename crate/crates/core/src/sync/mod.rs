//! Stage II: per-camera-pair integer frame offset from ground-plane
//! distance signals.
//!
//! Ankle backprojections land on a shared metric ground plane but each
//! camera's in-plane frame is still unknown, so the signal that can be
//! compared across cameras is the scalar distance of each person from the
//! centroid of their own camera's point cloud. The offset is found by
//! brute force over candidate shifts; frames with several people are
//! scored through a minimum-cost matching of the two distance sets.

pub mod dbscan;
pub mod hungarian;

pub use dbscan::{dbscan, dbscan_filter};
pub use hungarian::{assignment_cost, hungarian_assign};

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::PlanePoint2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SyncError {
    #[error("no points to cluster or center")]
    EmptyInput,
    #[error("distance signal has no frames with people")]
    EmptySignal,
}

/// Per-frame on-plane ankle positions of one camera, contiguous from
/// `start` (frames without people hold an empty set).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlaneTrack {
    pub start: i64,
    pub frames: Vec<Vec<PlanePoint2>>,
}

impl PlaneTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Remove every point outside the largest DBSCAN cluster of the
    /// flattened cloud.
    pub fn dbscan_filtered(&self, eps: f64, min_pts: usize) -> Result<PlaneTrack, SyncError> {
        let flat: Vec<PlanePoint2> = self.frames.iter().flatten().copied().collect();
        if flat.is_empty() {
            return Err(SyncError::EmptyInput);
        }
        let mask = dbscan_filter(&flat, eps, min_pts)?;
        let mut cursor = 0;
        let frames = self
            .frames
            .iter()
            .map(|frame| {
                frame
                    .iter()
                    .filter(|_| {
                        let keep = mask[cursor];
                        cursor += 1;
                        keep
                    })
                    .copied()
                    .collect()
            })
            .collect();
        Ok(PlaneTrack {
            start: self.start,
            frames,
        })
    }
}

/// Per-frame distances from the sequence centroid, one entry per person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSignal {
    pub start: i64,
    pub frames: Vec<Vec<f64>>,
}

impl DistanceSignal {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Subtract the centroid of all (filtered) points of the sequence and emit
/// the per-frame Euclidean norms.
pub fn center_distance_signal(track: &PlaneTrack) -> Result<DistanceSignal, SyncError> {
    let mut mean = Vector2::zeros();
    let mut count = 0usize;
    for frame in &track.frames {
        for p in frame {
            mean += p.coords;
            count += 1;
        }
    }
    if count == 0 {
        return Err(SyncError::EmptyInput);
    }
    mean /= count as f64;
    let frames = track
        .frames
        .iter()
        .map(|frame| frame.iter().map(|p| (p.coords - mean).norm()).collect())
        .collect();
    Ok(DistanceSignal {
        start: track.start,
        frames,
    })
}

/// How the per-frame matched distance differences aggregate into one frame
/// cost when several people are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrameCost {
    /// Mean of the matched |d_sync - d_ref| differences; unmatched persons
    /// contribute that same mean, which keeps frames with different person
    /// counts comparable.
    #[default]
    Mean,
    /// Sum of matched differences plus the mean for each unmatched person.
    Sum,
}

/// Result of the brute-force offset search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    /// Offset such that `t_ref = t_sync + delta_t`.
    pub delta_t: i64,
    /// Cost at the best offset, meters.
    pub score: f64,
    /// Full cost curve for diagnostics, one entry per candidate offset.
    pub per_offset_costs: Vec<(i64, f64)>,
}

fn frame_cost(sync_d: &[f64], ref_d: &[f64], agg: FrameCost) -> f64 {
    if sync_d.len() == 1 && ref_d.len() == 1 {
        return (sync_d[0] - ref_d[0]).abs();
    }
    let cost: Vec<Vec<f64>> = sync_d
        .iter()
        .map(|a| ref_d.iter().map(|b| (a - b).abs()).collect())
        .collect();
    let pairs = hungarian_assign(&cost);
    let matched: f64 = assignment_cost(&cost, &pairs);
    let k = pairs.len();
    let unmatched = sync_d.len().max(ref_d.len()) - k;
    let mean = matched / k as f64;
    match agg {
        FrameCost::Mean => mean,
        FrameCost::Sum => matched + mean * unmatched as f64,
    }
}

/// Brute-force search for the integer offset aligning `sync` onto `ref`,
/// scanning `0..=max_offset` (default one third of the sync length). The
/// shorter overlap is extended by repeating endpoint frames. Ties go to
/// the smallest offset.
pub fn search_time_offset(
    reference: &DistanceSignal,
    sync: &DistanceSignal,
    max_offset: Option<usize>,
    agg: FrameCost,
) -> Result<SyncResult, SyncError> {
    if reference.frames.iter().all(|f| f.is_empty()) || sync.frames.iter().all(|f| f.is_empty()) {
        return Err(SyncError::EmptySignal);
    }
    let max_offset = max_offset.unwrap_or(sync.len() / 3) as i64;

    let per_offset_costs: Vec<(i64, f64)> = (0..=max_offset)
        .into_par_iter()
        .map(|delta| {
            let mut total = 0.0;
            let mut evaluated = 0usize;
            for (i, sync_d) in sync.frames.iter().enumerate() {
                if sync_d.is_empty() {
                    continue;
                }
                let t_sync = sync.start + i as i64;
                let t_ref = t_sync + delta;
                let j = (t_ref - reference.start).clamp(0, reference.len() as i64 - 1) as usize;
                let ref_d = &reference.frames[j];
                if ref_d.is_empty() {
                    continue;
                }
                total += frame_cost(sync_d, ref_d, agg);
                evaluated += 1;
            }
            let cost = if evaluated > 0 {
                total / evaluated as f64
            } else {
                f64::INFINITY
            };
            (delta, cost)
        })
        .collect();

    let (delta_t, score) = per_offset_costs
        .iter()
        .copied()
        .min_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).expect("finite or inf"))
        .expect("at least offset 0");
    if !score.is_finite() {
        return Err(SyncError::EmptySignal);
    }
    Ok(SyncResult {
        delta_t,
        score,
        per_offset_costs,
    })
}

/// Run the offset search in both directions and fold the better one into a
/// signed offset for `t_ref = t_sync + delta_t`. Forward wins ties.
pub fn search_time_offset_bidirectional(
    reference: &DistanceSignal,
    sync: &DistanceSignal,
    max_offset: Option<usize>,
    agg: FrameCost,
) -> Result<SyncResult, SyncError> {
    let forward = search_time_offset(reference, sync, max_offset, agg)?;
    let backward = search_time_offset(sync, reference, max_offset, agg)?;
    if backward.score < forward.score && backward.delta_t != 0 {
        Ok(SyncResult {
            delta_t: -backward.delta_t,
            score: backward.score,
            per_offset_costs: backward
                .per_offset_costs
                .into_iter()
                .map(|(d, c)| (-d, c))
                .collect(),
        })
    } else {
        Ok(forward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point2;
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};

    fn track_of(points: Vec<Vec<(f64, f64)>>) -> PlaneTrack {
        PlaneTrack {
            start: 0,
            frames: points
                .into_iter()
                .map(|f| f.into_iter().map(|(x, y)| Point2::new(x, y)).collect())
                .collect(),
        }
    }

    #[test]
    fn static_person_at_centroid_gives_zero_signal() {
        let track = track_of(vec![vec![(2.0, 3.0)]; 10]);
        let sig = center_distance_signal(&track).unwrap();
        assert!(sig.frames.iter().flatten().all(|d| *d < 1e-12));
    }

    #[test]
    fn circular_walk_gives_constant_signal() {
        let r = 2.5;
        let n = 360;
        let frames: Vec<Vec<(f64, f64)>> = (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                vec![(1.0 + r * a.cos(), -2.0 + r * a.sin())]
            })
            .collect();
        let sig = center_distance_signal(&track_of(frames)).unwrap();
        for d in sig.frames.iter().flatten() {
            assert!((d - r).abs() < 1e-9);
        }
    }

    #[test]
    fn signal_matches_direct_formula() {
        let mut rng = StdRng::seed_from_u64(10);
        let frames: Vec<Vec<(f64, f64)>> = (0..50)
            .map(|_| {
                (0..rng.random_range(0..4))
                    .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                    .collect()
            })
            .collect();
        let track = track_of(frames.clone());
        let sig = center_distance_signal(&track).unwrap();

        let all: Vec<(f64, f64)> = frames.iter().flatten().copied().collect();
        let mx = all.iter().map(|p| p.0).sum::<f64>() / all.len() as f64;
        let my = all.iter().map(|p| p.1).sum::<f64>() / all.len() as f64;
        for (frame, dists) in frames.iter().zip(&sig.frames) {
            for (p, d) in frame.iter().zip(dists) {
                let want = ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt();
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    fn wander(seed: u64, len: usize) -> Vec<(f64, f64)> {
        // Non-periodic bounded random walk.
        let mut rng = StdRng::seed_from_u64(seed);
        let mut p = (0.0f64, 0.0f64);
        let mut v = (0.05f64, 0.02f64);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            v.0 = (v.0 + rng.random_range(-0.02..0.02)).clamp(-0.12, 0.12);
            v.1 = (v.1 + rng.random_range(-0.02..0.02)).clamp(-0.12, 0.12);
            p.0 = (p.0 + v.0).clamp(-5.0, 5.0);
            p.1 = (p.1 + v.1).clamp(-5.0, 5.0);
            out.push(p);
        }
        out
    }

    #[test]
    fn identical_signals_align_at_zero() {
        let walk = wander(1, 120);
        let track = track_of(walk.into_iter().map(|p| vec![p]).collect());
        let sig = center_distance_signal(&track).unwrap();
        let res = search_time_offset(&sig, &sig, None, FrameCost::Mean).unwrap();
        assert_eq!(res.delta_t, 0);
        assert!(res.score < 1e-12);
        assert_eq!(res.per_offset_costs.len(), sig.len() / 3 + 1);
    }

    #[test]
    fn shifted_signal_is_recovered() {
        // sync camera starts 17 frames later: sync frame t shows the world
        // at t + 17, so t_ref = t_sync + 17.
        let walk = wander(2, 240);
        let shift = 17usize;
        let ref_track = track_of(walk.iter().map(|p| vec![*p]).collect());
        let sync_track = track_of(walk[shift..].iter().map(|p| vec![*p]).collect());
        let ref_sig = center_distance_signal(&ref_track).unwrap();
        let sync_sig = center_distance_signal(&sync_track).unwrap();
        let res = search_time_offset(&ref_sig, &sync_sig, None, FrameCost::Mean).unwrap();
        assert_eq!(res.delta_t, shift as i64);
    }

    #[test]
    fn bidirectional_recovers_negative_offsets() {
        // Both cameras see the same world window under skewed clocks: the
        // sync camera's frame counter runs 25 ahead (t_ref = t_sync - 25).
        let walks = [wander(3, 240), wander(31, 240)];
        let shift = 25i64;
        let frames: Vec<Vec<(f64, f64)>> = (0..240)
            .map(|t| walks.iter().map(|w| w[t]).collect())
            .collect();
        let ref_track = track_of(frames.clone());
        let mut sync_track = track_of(frames);
        sync_track.start = shift;
        let ref_sig = center_distance_signal(&ref_track).unwrap();
        let sync_sig = center_distance_signal(&sync_track).unwrap();
        let res =
            search_time_offset_bidirectional(&ref_sig, &sync_sig, None, FrameCost::Mean).unwrap();
        assert_eq!(res.delta_t, -shift);
        assert!(res.score < 1e-12);
    }

    #[test]
    fn cost_curve_invariant_to_common_translation() {
        let mut rng = StdRng::seed_from_u64(4);
        let mk = |seed: u64| -> Vec<Vec<(f64, f64)>> {
            wander(seed, 150)
                .into_iter()
                .map(|p| vec![p, (p.0 + 1.0, p.1 - 0.5)])
                .collect()
        };
        let a = mk(5);
        let b = mk(6);
        let shift = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        let translate = |frames: &[Vec<(f64, f64)>]| -> Vec<Vec<(f64, f64)>> {
            frames
                .iter()
                .map(|f| f.iter().map(|p| (p.0 + shift.0, p.1 + shift.1)).collect())
                .collect()
        };

        let base = search_time_offset(
            &center_distance_signal(&track_of(a.clone())).unwrap(),
            &center_distance_signal(&track_of(b.clone())).unwrap(),
            None,
            FrameCost::Mean,
        )
        .unwrap();
        let moved = search_time_offset(
            &center_distance_signal(&track_of(translate(&a))).unwrap(),
            &center_distance_signal(&track_of(translate(&b))).unwrap(),
            None,
            FrameCost::Mean,
        )
        .unwrap();
        assert_eq!(base.delta_t, moved.delta_t);
        for ((_, c1), (_, c2)) in base.per_offset_costs.iter().zip(&moved.per_offset_costs) {
            assert!((c1 - c2).abs() < 1e-9, "{c1} vs {c2}");
        }
    }

    #[test]
    fn empty_signal_is_an_error() {
        let empty = DistanceSignal {
            start: 0,
            frames: vec![vec![]; 10],
        };
        let full = DistanceSignal {
            start: 0,
            frames: vec![vec![1.0]; 10],
        };
        assert!(matches!(
            search_time_offset(&full, &empty, None, FrameCost::Mean),
            Err(SyncError::EmptySignal)
        ));
    }

    #[test]
    fn multi_person_frames_use_matching() {
        // Two people whose distances swap labels between cameras: matching
        // should still find zero cost at the true offset.
        let len = 90;
        let frames_ref: Vec<Vec<f64>> = (0..len)
            .map(|i| vec![1.0 + (i as f64 * 0.11).sin().abs(), 3.0])
            .collect();
        let frames_sync: Vec<Vec<f64>> = (0..len)
            .map(|i| vec![3.0, 1.0 + (i as f64 * 0.11).sin().abs()])
            .collect();
        let r = DistanceSignal {
            start: 0,
            frames: frames_ref,
        };
        let s = DistanceSignal {
            start: 0,
            frames: frames_sync,
        };
        let res = search_time_offset(&r, &s, None, FrameCost::Mean).unwrap();
        assert_eq!(res.delta_t, 0);
        assert!(res.score < 1e-12);
    }
}
