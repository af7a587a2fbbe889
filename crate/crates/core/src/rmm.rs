//! Regional-momentary motion features.
//!
//! The sequence is cut into clips of `stride` frames. Around anchors taken
//! from each clip's centre frame, spatio-temporal neighbourhoods reach
//! `temporal_radius` frames either side. A shared kernel perceptron maps
//! every neighbour's `[dx, dy, dz, dt, features]` row to a feature vector,
//! which is max-pooled over the neighbours of each frame and then reduced
//! over time. A second, single-anchor stage summarises every clip into one
//! vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_from_centroid, farthest_point_sample, group, NeighborMode, NeighborhoodIndex, Point3};
use crate::params::{Binder, Mlp, ParamStore};
use crate::tensor::{Graph, ReduceKind, Tensor, Var};

/// Clip geometry for the first stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub stride: usize,
    pub temporal_radius: usize,
    pub spatial_radius: f64,
    pub neighbors: usize,
    pub anchors: usize,
    /// Replicated frames before and after the sequence. `None` picks the
    /// padding that yields one output per input frame.
    #[serde(default)]
    pub padding: Option<(usize, usize)>,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec {
            stride: 2,
            temporal_radius: 1,
            spatial_radius: 0.3,
            neighbors: 8,
            anchors: 16,
            padding: None,
        }
    }
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::contract("temporal stride must be ≥ 1"));
        }
        if !(self.spatial_radius > 0.0) || self.neighbors == 0 || self.anchors == 0 {
            return Err(Error::contract("clip needs a positive radius, neighbour count and anchor count"));
        }
        Ok(())
    }

    /// Padding actually applied to a sequence of `frames` frames.
    pub fn resolved_padding(&self, frames: usize) -> (usize, usize) {
        self.padding.unwrap_or_else(|| required_padding(frames, self.stride))
    }
}

/// Padding `(p1, p2)` such that `(T + p1 + p2) / d_t = T`, split as evenly
/// as possible with the extra frame at the end.
pub fn required_padding(frames: usize, stride: usize) -> (usize, usize) {
    let total = frames * stride.saturating_sub(1);
    (total / 2, total - total / 2)
}

/// A temporal window: the centre frame plus the frames at each offset.
/// Frame numbers refer to the unpadded sequence; boundary replication is
/// already resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub index: usize,
    pub anchor_frame: usize,
    /// `(δ_t, frame)` for δ_t = −r..=r
    pub window: Vec<(i64, usize)>,
}

fn window(center: i64, radius: usize, shift: i64, len: usize) -> Vec<(i64, usize)> {
    let r = radius as i64;
    (-r..=r)
        .map(|d| (d, (center + d - shift).clamp(0, len as i64 - 1) as usize))
        .collect()
}

/// Cuts `frames` frames into clips of `stride` padded frames each.
pub fn split_clips(frames: usize, spec: &ClipSpec) -> Result<Vec<Clip>> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::contract("cannot clip an empty sequence"));
    }
    let (p1, p2) = spec.resolved_padding(frames);
    let padded = frames + p1 + p2;
    if padded % spec.stride != 0 {
        return Err(Error::contract(format!(
            "padded length {padded} (T={frames}, padding ({p1},{p2})) is not divisible by stride {}",
            spec.stride
        )));
    }
    if 2 * spec.temporal_radius + 1 > padded {
        return Err(Error::contract(format!(
            "clip length {} exceeds padded sequence length {padded}",
            2 * spec.temporal_radius + 1
        )));
    }
    Ok((0..padded / spec.stride)
        .map(|c| {
            let centre = (c * spec.stride + spec.stride / 2) as i64;
            let w = window(centre, spec.temporal_radius, p1 as i64, frames);
            let anchor_frame = w[spec.temporal_radius].1;
            Clip {
                index: c,
                anchor_frame,
                window: w,
            }
        })
        .collect())
}

/// Anchors of one clip and their neighbourhoods in every frame of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionScoper {
    pub anchors: Vec<Point3>,
    /// Same length as `groups`; `(δ_t, source frame)`.
    pub slots: Vec<(i64, usize)>,
    pub groups: Vec<NeighborhoodIndex>,
    /// Spatial offsets are divided by the ball radius and temporal offsets
    /// by the window radius, so kernel inputs are O(1) at any scale.
    pub spatial_scale: f64,
    pub temporal_scale: f64,
}

impl MotionScoper {
    pub fn anchor_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn neighbors(&self) -> usize {
        self.groups[0].k
    }

    /// Normalised `(dx, dy, dz, dt)` of neighbour `j` of anchor `a` in slot `s`.
    pub fn displacement(&self, s: usize, a: usize, j: usize) -> [f64; 4] {
        let g = &self.groups[s];
        let o = g.offsets[a * g.k + j];
        let r = self.spatial_scale;
        [o[0] / r, o[1] / r, o[2] / r, self.slots[s].0 as f64 / self.temporal_scale]
    }

    /// Source point index of neighbour `j` of anchor `a` in slot `s`.
    pub fn neighbor(&self, s: usize, a: usize, j: usize) -> usize {
        let g = &self.groups[s];
        g.neighbors[a * g.k + j]
    }
}

/// Samples anchors on the clip's anchor frame and groups their
/// neighbourhoods in each frame of the window. `frames[t]` holds the
/// coordinates of frame `t`.
pub fn build_motionscoper(
    frames: &[&[Point3]],
    clip: &Clip,
    anchors: usize,
    radius: f64,
    neighbors: usize,
    mode: NeighborMode,
) -> Result<MotionScoper> {
    let anchor_pts = frames
        .get(clip.anchor_frame)
        .ok_or_else(|| Error::contract(format!("anchor frame {} missing", clip.anchor_frame)))?;
    if anchor_pts.is_empty() {
        return Err(Error::contract(format!("anchor frame {} is empty", clip.anchor_frame)));
    }
    if anchors > anchor_pts.len() {
        return Err(Error::contract(format!(
            "{anchors} anchors requested from a frame of {} points",
            anchor_pts.len()
        )));
    }
    let start = farthest_from_centroid(anchor_pts);
    let idx = farthest_point_sample(anchor_pts, anchors, start)?;
    let centres: Vec<Point3> = idx.iter().map(|&i| anchor_pts[i]).collect();
    let mut groups = Vec::with_capacity(clip.window.len());
    for &(d, f) in &clip.window {
        let pts = frames[f];
        if pts.is_empty() {
            return Err(Error::contract(format!("frame {f} (δ_t = {d}) is empty")));
        }
        groups.push(group(pts, &centres, mode, radius, neighbors)?);
    }
    if groups.iter().any(|g| g.k != groups[0].k) {
        return Err(Error::contract("neighbour count differs across frames of a clip"));
    }
    let temporal_scale = clip.window.iter().map(|&(d, _)| d.unsigned_abs()).max().unwrap_or(0).max(1) as f64;
    Ok(MotionScoper {
        anchors: centres,
        slots: clip.window.clone(),
        groups,
        spatial_scale: radius,
        temporal_scale,
    })
}

/// Reducer over temporal offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalReduce {
    #[default]
    Max,
    Sum,
}

/// Per-point features available to the kernel: a `rows × C` node and the
/// first row of every frame.
pub struct FeatureSource<'a> {
    pub values: Var,
    pub frame_offsets: &'a [usize],
}

/// Factored convolution over a batch of scopers sharing slot and neighbour
/// counts. Returns one row per anchor, scopers in order.
pub fn point_conv_4d(
    g: &mut Graph,
    p: &mut Binder,
    kernel: &Mlp,
    scopers: &[MotionScoper],
    features: Option<&FeatureSource>,
    reduce: TemporalReduce,
) -> Result<Var> {
    let first = scopers.first().ok_or_else(|| Error::contract("no scopers to convolve"))?;
    let slots = first.slots.len();
    let k = first.neighbors();
    if scopers.iter().any(|s| s.slots.len() != slots || s.neighbors() != k) {
        return Err(Error::contract("scopers in one batch must share slot and neighbour counts"));
    }
    let channels = match features {
        Some(f) => g.shape(f.values)[1],
        None => 0,
    };
    if kernel.input_width() != 4 + channels {
        return Err(Error::shape("point_conv_4d", &[4 + channels], &[kernel.input_width()]));
    }
    let anchors: usize = scopers.iter().map(|s| s.anchor_count()).sum();
    let rows = anchors * slots * k;
    let mut disp = Vec::with_capacity(rows * 4);
    let mut gather = Vec::with_capacity(if features.is_some() { rows } else { 0 });
    for s in scopers {
        for a in 0..s.anchor_count() {
            for slot in 0..slots {
                for j in 0..k {
                    disp.extend_from_slice(&s.displacement(slot, a, j));
                    if let Some(f) = features {
                        let frame = s.slots[slot].1;
                        gather.push(f.frame_offsets[frame] + s.neighbor(slot, a, j));
                    }
                }
            }
        }
    }
    let disp = g.constant(Tensor::new(vec![rows, 4], disp)?);
    let input = match features {
        Some(f) => {
            let feats = g.gather_rows(f.values, &gather)?;
            g.concat(&[disp, feats])?
        }
        None => disp,
    };
    let h = kernel.forward(g, p, input)?;
    let width = kernel.output_width();
    let h = g.reshape(h, &[anchors * slots, k, width])?;
    let spatial = g.max(h, 1)?;
    let spatial = g.reshape(spatial, &[anchors, slots, width])?;
    let kind = match reduce {
        TemporalReduce::Max => ReduceKind::Max,
        TemporalReduce::Sum => ReduceKind::Sum,
    };
    let out = g.reduce(kind, spatial, 1)?;
    g.reshape(out, &[anchors, width])
}

/// Runs [`point_conv_4d`] on one scoper with plain inputs; `features[t]` is
/// the row-major `N_t × channels` block of frame `t`.
pub fn point_conv_4d_values(
    store: &ParamStore,
    kernel: &Mlp,
    scoper: &MotionScoper,
    features: &[&[f64]],
    channels: usize,
    reduce: TemporalReduce,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let mut p = Binder::new(store, false);
    let out = if channels == 0 {
        point_conv_4d(&mut g, &mut p, kernel, std::slice::from_ref(scoper), None, reduce)?
    } else {
        let mut offsets = Vec::with_capacity(features.len());
        let mut all = Vec::new();
        for f in features {
            offsets.push(all.len() / channels);
            all.extend_from_slice(f);
        }
        let values = g.constant(Tensor::new(vec![all.len() / channels, channels], all)?);
        let src = FeatureSource {
            values,
            frame_offsets: &offsets,
        };
        point_conv_4d(&mut g, &mut p, kernel, std::slice::from_ref(scoper), Some(&src), reduce)?
    };
    let w = kernel.output_width();
    Ok(g.data(out).chunks(w).map(|r| r.to_vec()).collect())
}

/// The clip-summarising second stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Spec {
    pub temporal_radius: usize,
    pub spatial_radius: f64,
    pub neighbors: usize,
}

impl Default for Stage2Spec {
    fn default() -> Self {
        Stage2Spec {
            temporal_radius: 1,
            spatial_radius: 2.0,
            neighbors: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmmConfig {
    pub clip: ClipSpec,
    pub stage2: Stage2Spec,
    /// hidden width of both kernel perceptrons
    pub kernel_hidden: usize,
    pub stage1_width: usize,
    pub width: usize,
    pub reduce: TemporalReduce,
    pub mode: NeighborMode,
}

impl Default for RmmConfig {
    fn default() -> Self {
        RmmConfig {
            clip: ClipSpec::default(),
            stage2: Stage2Spec::default(),
            kernel_hidden: 32,
            stage1_width: 32,
            width: 32,
            reduce: TemporalReduce::Max,
            mode: NeighborMode::Radius,
        }
    }
}

impl RmmConfig {
    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if !(self.stage2.spatial_radius > 0.0) || self.stage2.neighbors == 0 {
            return Err(Error::contract("second stage needs a positive radius and neighbour count"));
        }
        if self.kernel_hidden == 0 || self.stage1_width == 0 || self.width == 0 {
            return Err(Error::contract("motion widths must be positive"));
        }
        Ok(())
    }

    pub fn kernels(&self, prefix: &str, channels: usize) -> [Mlp; 2] {
        [
            Mlp::new(format!("{prefix}.gamma1"), &[4 + channels, self.kernel_hidden, self.stage1_width], false),
            Mlp::new(format!("{prefix}.gamma2"), &[4 + self.stage1_width, self.kernel_hidden, self.width], false),
        ]
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<()> {
        for k in self.kernels(prefix, channels) {
            k.init(store, rng)?;
        }
        Ok(())
    }
}

/// Geometry of both stages for one sequence; depends on coordinates only.
#[derive(Debug, Clone, PartialEq)]
pub struct RmmPlan {
    pub frames: usize,
    pub stage1: Vec<MotionScoper>,
    pub stage2: Vec<MotionScoper>,
}

impl RmmPlan {
    pub fn output_len(&self) -> usize {
        self.stage2.len()
    }
}

/// Builds the clips and neighbourhoods of both stages. Fails when explicit
/// padding does not give one output per input frame.
pub fn plan_rmm(coords: &[&[Point3]], cfg: &RmmConfig) -> Result<RmmPlan> {
    cfg.validate()?;
    let t = coords.len();
    let needed = required_padding(t, cfg.clip.stride);
    let (p1, p2) = cfg.clip.resolved_padding(t);
    if p1 + p2 != needed.0 + needed.1 {
        return Err(Error::contract(format!(
            "padding ({p1},{p2}) gives {} motion steps for {t} frames; use ({},{})",
            (t + p1 + p2) / cfg.clip.stride,
            needed.0,
            needed.1
        )));
    }
    let clips = split_clips(t, &cfg.clip)?;
    let clip = &cfg.clip;
    let stage1 = clips
        .iter()
        .map(|c| build_motionscoper(coords, c, clip.anchors, clip.spatial_radius, clip.neighbors, cfg.mode))
        .collect::<Result<Vec<_>>>()?;

    let anchor_sets: Vec<&[Point3]> = stage1.iter().map(|s| s.anchors.as_slice()).collect();
    let n = anchor_sets.len();
    let s2 = &cfg.stage2;
    let stage2 = (0..n)
        .map(|c| {
            let clip = Clip {
                index: c,
                anchor_frame: c,
                window: window(c as i64, s2.temporal_radius, 0, n),
            };
            build_motionscoper(&anchor_sets, &clip, 1, s2.spatial_radius, s2.neighbors, cfg.mode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RmmPlan {
        frames: t,
        stage1,
        stage2,
    })
}

/// Motion features `T × width` on the graph. `features` carries the
/// per-point input features of every frame, if the sequence has any.
pub fn rmm_graph(
    g: &mut Graph,
    p: &mut Binder,
    cfg: &RmmConfig,
    prefix: &str,
    plan: &RmmPlan,
    features: Option<&FeatureSource>,
) -> Result<Var> {
    let channels = features.map(|f| g.shape(f.values)[1]).unwrap_or(0);
    let [k1, k2] = cfg.kernels(prefix, channels);
    let first = point_conv_4d(g, p, &k1, &plan.stage1, features, cfg.reduce)?;
    let offsets: Vec<usize> = plan
        .stage1
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.anchor_count();
            Some(o)
        })
        .collect();
    let src = FeatureSource {
        values: first,
        frame_offsets: &offsets,
    };
    point_conv_4d(g, p, &k2, &plan.stage2, Some(&src), cfg.reduce)
}

/// Motion features of a whole sequence with plain inputs and outputs.
pub fn rmm_forward(
    coords: &[&[Point3]],
    features: Option<(&[f64], usize)>,
    cfg: &RmmConfig,
    store: &ParamStore,
    prefix: &str,
) -> Result<Vec<Vec<f64>>> {
    let plan = plan_rmm(coords, cfg)?;
    let mut g = Graph::new();
    let mut p = Binder::new(store, false);
    let out = match features {
        Some((data, c)) if c > 0 => {
            let mut offsets = Vec::with_capacity(coords.len());
            let mut acc = 0;
            for f in coords {
                offsets.push(acc);
                acc += f.len();
            }
            let values = g.constant(Tensor::new(vec![acc, c], data.to_vec())?);
            let src = FeatureSource {
                values,
                frame_offsets: &offsets,
            };
            rmm_graph(&mut g, &mut p, cfg, prefix, &plan, Some(&src))?
        }
        _ => rmm_graph(&mut g, &mut p, cfg, prefix, &plan, None)?,
    };
    Ok(g.data(out).chunks(cfg.width).map(|r| r.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(stride: usize, r: usize, padding: Option<(usize, usize)>) -> ClipSpec {
        ClipSpec {
            stride,
            temporal_radius: r,
            padding,
            ..ClipSpec::default()
        }
    }

    #[test]
    fn clip_anchor_positions() {
        let clips = split_clips(8, &spec(2, 0, Some((0, 0)))).unwrap();
        assert_eq!(clips.iter().map(|c| c.anchor_frame).collect::<Vec<_>>(), vec![1, 3, 5, 7]);
        let clips = split_clips(4, &spec(4, 0, Some((0, 0)))).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].anchor_frame, 2);
        for c in split_clips(6, &spec(2, 1, Some((0, 0)))).unwrap() {
            let a = c.anchor_frame as i64;
            for &(d, f) in &c.window {
                assert_eq!(f as i64, (a + d).clamp(0, 5));
            }
        }
    }

    #[test]
    fn padding_replicates_boundaries() {
        assert_eq!(required_padding(24, 2), (12, 12));
        assert_eq!(required_padding(5, 2), (2, 3));
        assert_eq!(required_padding(7, 1), (0, 0));
        let clips = split_clips(4, &spec(2, 1, None)).unwrap();
        assert_eq!(clips.len(), 4);
        assert_eq!(clips[0].anchor_frame, 0);
        assert_eq!(clips[0].window, vec![(-1, 0), (0, 0), (1, 0)]);
        assert_eq!(clips[2].window, vec![(-1, 2), (0, 3), (1, 3)]);
        assert_eq!(clips[3].window, vec![(-1, 3), (0, 3), (1, 3)]);
    }

    #[test]
    fn indivisible_padding_is_rejected() {
        assert!(matches!(split_clips(7, &spec(2, 0, Some((0, 0)))), Err(Error::Contract(_))));
        assert!(matches!(split_clips(2, &spec(1, 2, Some((0, 0)))), Err(Error::Contract(_))));
    }

    #[test]
    fn wrong_padding_names_the_fix() {
        let pts: Vec<Point3> = (0..20).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        let frames: Vec<&[Point3]> = vec![&pts; 8];
        let cfg = RmmConfig {
            clip: spec(2, 1, Some((0, 0))),
            ..RmmConfig::default()
        };
        match plan_rmm(&frames, &cfg) {
            Err(Error::Contract(m)) => assert!(m.contains("(4,4)"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_point_scoper_has_zero_offsets() {
        let pts = [[0.3, -0.2, 1.0]];
        let frames: Vec<&[Point3]> = vec![&pts; 3];
        let clip = &split_clips(3, &spec(1, 1, Some((0, 0)))).unwrap()[1];
        let s = build_motionscoper(&frames, clip, 1, 0.1, 4, NeighborMode::Radius).unwrap();
        for g in &s.groups {
            assert!(g.neighbors.iter().all(|&i| i == 0));
            assert!(g.offsets.iter().all(|o| *o == [0.0; 3]));
        }
    }

    #[test]
    fn singleton_conv_is_kernel_of_zero_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kernel = Mlp::new("k", &[6, 5, 3], false);
        let mut store = ParamStore::new();
        kernel.init(&mut store, &mut rng).unwrap();
        let pts = [[1.0, 2.0, 3.0]];
        let frames: Vec<&[Point3]> = vec![&pts];
        let clip = &split_clips(1, &spec(1, 0, Some((0, 0)))).unwrap()[0];
        let s = build_motionscoper(&frames, clip, 1, 0.5, 1, NeighborMode::Radius).unwrap();
        let feats = [0.25, -0.75];
        let out = point_conv_4d_values(&store, &kernel, &s, &[&feats], 2, TemporalReduce::Max).unwrap();
        let want = kernel.eval_row(&store, &[0.0, 0.0, 0.0, 0.0, 0.25, -0.75]).unwrap();
        assert_eq!(out[0], want);
    }

    #[test]
    fn kernel_width_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kernel = Mlp::new("k", &[5, 3], false);
        let mut store = ParamStore::new();
        kernel.init(&mut store, &mut rng).unwrap();
        let pts = [[1.0, 2.0, 3.0]];
        let frames: Vec<&[Point3]> = vec![&pts];
        let clip = &split_clips(1, &spec(1, 0, Some((0, 0)))).unwrap()[0];
        let s = build_motionscoper(&frames, clip, 1, 0.5, 1, NeighborMode::Radius).unwrap();
        let r = point_conv_4d_values(&store, &kernel, &s, &[&[0.0, 0.0]], 2, TemporalReduce::Max);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_kernels_give_zero_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = RmmConfig {
            clip: ClipSpec {
                anchors: 4,
                ..ClipSpec::default()
            },
            stage2: Stage2Spec {
                neighbors: 4,
                ..Stage2Spec::default()
            },
            ..RmmConfig::default()
        };
        let mut store = ParamStore::new();
        cfg.init(&mut store, "rmm", 0, &mut rng).unwrap();
        store.zero_prefix("rmm");
        let frames_owned: Vec<Vec<Point3>> = (0..6)
            .map(|_| (0..12).map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]).collect())
            .collect();
        let frames: Vec<&[Point3]> = frames_owned.iter().map(|f| f.as_slice()).collect();
        let out = rmm_forward(&frames, None, &cfg, &store, "rmm").unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }
}
