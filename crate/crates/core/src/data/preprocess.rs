use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{centroid, farthest_point_sample, Point3, PointCloudFrame};

use super::sequence::PointCloudSequence;

/// `count` indices spread evenly over `0..len`.
pub fn uniform_frame_indices(len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * len / count).collect()
}

/// Temporal resampling to `t_out` frames, farthest-point resampling of every
/// frame to `n_out` points, then centring on the sequence centroid and
/// scaling so the farthest point sits at radius 1.
///
/// Frames with fewer than `n_out` points are sampled completely and then
/// topped up by cycling through the sampled order. The seed picks each
/// frame's starting point.
pub fn subsample_sequence(seq: &PointCloudSequence, t_out: usize, n_out: usize, seed: u64) -> Result<PointCloudSequence> {
    if t_out == 0 || n_out == 0 {
        return Err(Error::contract("subsample targets must be positive"));
    }
    if seq.len() < t_out {
        return Err(Error::contract(format!("cannot take {t_out} frames from a sequence of {}", seq.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(t_out);
    for t in uniform_frame_indices(seq.len(), t_out) {
        let f = seq.frame(t);
        if f.is_empty() {
            return Err(Error::contract(format!("frame {t} is empty")));
        }
        let start = rng.gen_range(0..f.len());
        let k = n_out.min(f.len());
        let mut idx = farthest_point_sample(f.coords(), k, start)?;
        for j in 0..n_out - k {
            idx.push(idx[j % k]);
        }
        picked.push(f.permuted(&idx));
    }

    let all: Vec<Point3> = picked.iter().flat_map(|f| f.coords().iter().copied()).collect();
    let c = centroid(&all);
    let radius = all
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    let frames = picked
        .into_iter()
        .map(|f| {
            let coords = f
                .coords()
                .iter()
                .map(|p| [(p[0] - c[0]) * scale, (p[1] - c[1]) * scale, (p[2] - c[2]) * scale])
                .collect();
            PointCloudFrame::with_features(coords, f.features().map(|s| s.to_vec()), f.channels())
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloudSequence::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rng: &mut ChaCha8Rng, t: usize, n: usize) -> PointCloudSequence {
        let frames = (0..t)
            .map(|_| {
                let pts = (0..n).map(|_| [rng.gen_range(-3.0..5.0), rng.gen_range(0.0..2.0), rng.gen_range(-1.0..1.0)]).collect();
                PointCloudFrame::new(pts).unwrap()
            })
            .collect();
        PointCloudSequence::new(frames).unwrap()
    }

    #[test]
    fn centred_and_unit_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = seq(&mut rng, 10, 40);
        let out = subsample_sequence(&s, 4, 16, 3).unwrap();
        assert_eq!(out.len(), 4);
        let all: Vec<Point3> = out.frames().iter().flat_map(|f| f.coords().to_vec()).collect();
        let c = centroid(&all);
        assert!(c.iter().all(|v| v.abs() < 1e-9), "{c:?}");
        let r = all.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn short_frames_are_filled() {
        let f = PointCloudFrame::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let s = PointCloudSequence::new(vec![f]).unwrap();
        let out = subsample_sequence(&s, 1, 5, 0).unwrap();
        assert_eq!(out.frame(0).len(), 5);
    }

    #[test]
    fn too_few_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = seq(&mut rng, 3, 4);
        assert!(matches!(subsample_sequence(&s, 4, 4, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn frame_indices() {
        assert_eq!(uniform_frame_indices(8, 4), vec![0, 2, 4, 6]);
        assert_eq!(uniform_frame_indices(5, 5), vec![0, 1, 2, 3, 4]);
    }
}
