//! Per-frame posture features from a stack of attention-gated
//! set-abstraction layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ball_group, farthest_from_centroid, farthest_point_sample, knn_query, sub3, NeighborhoodIndex, Point3};
use crate::params::{uniform_tensor, Binder, Mlp, ParamStore};
use crate::rmm::FeatureSource;
use crate::tensor::{Graph, Tensor, Var};

/// Channel-then-spatial attention settings for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbamSpec {
    /// `None` uses the largest divisor of the channel width not above 8.
    pub reduction: Option<usize>,
    /// Odd kernel extents over (centroid, neighbour) positions.
    pub kernel: [usize; 2],
}

impl Default for CbamSpec {
    fn default() -> Self {
        CbamSpec {
            reduction: None,
            kernel: [7, 1],
        }
    }
}

impl CbamSpec {
    pub fn resolved_reduction(&self, channels: usize) -> Result<usize> {
        match self.reduction {
            Some(0) => Err(Error::contract("attention reduction ratio must be ≥ 1")),
            Some(r) if channels % r != 0 => Err(Error::contract(format!(
                "attention reduction ratio {r} does not divide channel width {channels}"
            ))),
            Some(r) => Ok(r),
            None => Ok((1..=8.min(channels)).rev().find(|r| channels % r == 0).unwrap_or(1)),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::contract(format!("attention kernel {:?} must have odd extents", self.kernel)));
        }
        Ok(())
    }

    pub fn channel_mlp(&self, prefix: &str, channels: usize) -> Result<Mlp> {
        let hidden = channels / self.resolved_reduction(channels)?;
        Ok(Mlp::new(format!("{prefix}.channel"), &[channels, hidden, channels], false))
    }

    pub fn conv_name(prefix: &str) -> String {
        format!("{prefix}.spatial")
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        self.channel_mlp(prefix, channels)?.init(store, rng)?;
        let fan_in = (self.kernel[0] * self.kernel[1] * 2) as f64;
        store.insert(
            Self::conv_name(prefix),
            uniform_tensor(rng, &[self.kernel[0], self.kernel[1], 2], (3.0 / fan_in).sqrt()),
        )
    }
}

/// Mean and max over positions of a row-major `positions × channels` block.
pub fn channel_descriptors(x: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let positions = x.len() / channels;
    let mut mean = vec![0.0; channels];
    let mut max = vec![f64::NEG_INFINITY; channels];
    for row in x.chunks(channels) {
        for (c, &v) in row.iter().enumerate() {
            mean[c] += v;
            max[c] = max[c].max(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= positions as f64);
    (mean, max)
}

/// Attention scores for `x: F × (M·k) × C`, same shape, all in (0, 1).
///
/// The channel branch pools each frame over its positions and runs both
/// descriptors through one perceptron. The spatial branch convolves the
/// channel-wise mean and max of the channel-gated input over the
/// `M × k` grid. The two logits are added before the sigmoid, so an
/// all-zero parameter set yields exactly one half everywhere.
pub fn cbam_attention(g: &mut Graph, p: &mut Binder, spec: &CbamSpec, prefix: &str, x: Var, grid: (usize, usize)) -> Result<Var> {
    spec.validate()?;
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(Error::shape("cbam_attention", &s, &[grid.0 * grid.1]));
    }
    let (frames, positions, channels) = (s[0], s[1], s[2]);
    let mlp = spec.channel_mlp(prefix, channels)?;
    let avg = g.mean(x, 1)?;
    let max = g.max(x, 1)?;
    let za = mlp.forward(g, p, avg)?;
    let zm = mlp.forward(g, p, max)?;
    let zc = g.add(za, zm)?;
    let zc = g.reshape(zc, &[frames, 1, channels])?;

    let gate = g.sigmoid(zc);
    let gated = g.mul(x, gate)?;
    let mean_map = g.mean(gated, 2)?;
    let max_map = g.max(gated, 2)?;
    let mean_map = g.reshape(mean_map, &[frames, grid.0, grid.1, 1])?;
    let max_map = g.reshape(max_map, &[frames, grid.0, grid.1, 1])?;
    let maps = g.concat(&[mean_map, max_map])?;
    let w = p.var(g, &CbamSpec::conv_name(prefix))?;
    let zs = g.conv2d_same(maps, w)?;
    let zs = g.reshape(zs, &[frames, positions, 1])?;
    let z = g.add(zc, zs)?;
    Ok(g.sigmoid(z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialEncodeLayerSpec {
    pub centroids: usize,
    /// `0` groups every input point into each region.
    pub neighbors: usize,
    pub radius: f64,
    pub widths: Vec<usize>,
    #[serde(default = "yes")]
    pub attention: bool,
    #[serde(default)]
    pub cbam: CbamSpec,
}

fn yes() -> bool {
    true
}

impl SpatialEncodeLayerSpec {
    pub fn output_width(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) + 3
    }

    fn validate(&self) -> Result<()> {
        if self.centroids == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::contract("encode layer needs centroids ≥ 1 and positive widths"));
        }
        if self.neighbors > 0 && !(self.radius > 0.0) {
            return Err(Error::contract("encode layer radius must be positive"));
        }
        self.cbam.validate()
    }

    /// Local offsets are expressed in units of the ball radius; layers that
    /// group every point use raw coordinates.
    pub fn offset_scale(&self) -> f64 {
        if self.neighbors > 0 {
            self.radius
        } else {
            1.0
        }
    }

    fn transform(&self, prefix: &str, in_width: usize) -> Mlp {
        let mut w = vec![in_width];
        w.extend_from_slice(&self.widths);
        Mlp::new(format!("{prefix}.mlp"), &w, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GspConfig {
    pub layers: Vec<SpatialEncodeLayerSpec>,
}

impl Default for GspConfig {
    fn default() -> Self {
        let layer = |centroids, neighbors, radius, widths: &[usize]| SpatialEncodeLayerSpec {
            centroids,
            neighbors,
            radius,
            widths: widths.to_vec(),
            attention: true,
            cbam: CbamSpec::default(),
        };
        GspConfig {
            layers: vec![
                layer(32, 16, 0.25, &[16, 29]),
                layer(8, 8, 0.5, &[61]),
                layer(1, 0, 1.0, &[61]),
            ],
        }
    }
}

impl GspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("posture encoder needs at least one layer"));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            spec.validate()?;
            if l > 0 && spec.centroids > self.layers[l - 1].centroids {
                return Err(Error::contract(format!(
                    "layer {l} asks for {} centroids from {} points",
                    spec.centroids,
                    self.layers[l - 1].centroids
                )));
            }
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.output_width()).unwrap_or(0)
    }

    /// Per-neighbour input width of every layer.
    pub fn input_widths(&self, channels: usize) -> Vec<usize> {
        let mut prev = channels;
        self.layers
            .iter()
            .map(|l| {
                let w = 4 + prev;
                prev = l.output_width();
                w
            })
            .collect()
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        for (l, (spec, w)) in self.layers.iter().zip(self.input_widths(channels)).enumerate() {
            let lp = format!("{prefix}.{l}");
            if spec.attention {
                spec.cbam.init(store, &format!("{lp}.cbam"), w, rng)?;
            }
            spec.transform(&lp, w).init(store, rng)?;
        }
        Ok(())
    }
}

/// Groups `points` around centroids chosen by farthest point sampling.
pub fn group_layer(points: &[Point3], spec: &SpatialEncodeLayerSpec) -> Result<NeighborhoodIndex> {
    if points.len() < spec.centroids {
        return Err(Error::contract(format!(
            "{} centroids requested from {} points",
            spec.centroids,
            points.len()
        )));
    }
    let idx = farthest_point_sample(points, spec.centroids, farthest_from_centroid(points))?;
    let centres: Vec<Point3> = idx.iter().map(|&i| points[i]).collect();
    let mut nb = if spec.neighbors == 0 {
        let k = points.len();
        let neighbors = knn_query(points, &centres, k)?;
        let offsets = neighbors.iter().enumerate().map(|(j, &i)| sub3(&points[i], &centres[j / k])).collect();
        NeighborhoodIndex {
            centers: centres,
            center_indices: None,
            k,
            fill: vec![false; neighbors.len()],
            neighbors,
            offsets,
        }
    } else {
        ball_group(points, &centres, spec.radius, spec.neighbors)?
    };
    nb.center_indices = Some(idx);
    Ok(nb)
}

/// Neighbourhoods of every layer for one frame.
pub fn plan_frame(points: &[Point3], cfg: &GspConfig) -> Result<Vec<NeighborhoodIndex>> {
    let mut out: Vec<NeighborhoodIndex> = Vec::with_capacity(cfg.layers.len());
    for spec in &cfg.layers {
        let nb = match out.last() {
            None => group_layer(points, spec)?,
            Some(prev) => group_layer(&prev.centers, spec)?,
        };
        out.push(nb);
    }
    Ok(out)
}

/// One encode layer over a batch of frames that share its geometry sizes.
/// `input` supplies per-point features of the previous level (if any);
/// returns `(F·M) × (width + 3)` region features.
pub fn spatial_encode_layer(
    g: &mut Graph,
    p: &mut Binder,
    spec: &SpatialEncodeLayerSpec,
    prefix: &str,
    groups: &[&NeighborhoodIndex],
    input: Option<&FeatureSource>,
) -> Result<Var> {
    let first = groups.first().ok_or_else(|| Error::contract("no frames to encode"))?;
    let (m, k) = (first.len(), first.k);
    if groups.iter().any(|nb| nb.len() != m || nb.k != k) {
        return Err(Error::contract("frames in one batch must share centroid and neighbour counts"));
    }
    let frames = groups.len();
    let rows = frames * m * k;
    let mut geom = Vec::with_capacity(rows * 4);
    let mut gather = Vec::with_capacity(if input.is_some() { rows } else { 0 });
    let mut centres = Vec::with_capacity(frames * m * 3);
    let r = spec.offset_scale();
    for (f, nb) in groups.iter().enumerate() {
        if nb.neighbors.len() != m * k {
            return Err(Error::Internal("neighbourhood rows are not full".into()));
        }
        for c in &nb.centers {
            centres.extend_from_slice(c);
        }
        for (o, &n) in nb.offsets.iter().zip(&nb.neighbors) {
            let e = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            geom.extend_from_slice(&[o[0] / r, o[1] / r, o[2] / r, e / r]);
            if let Some(src) = input {
                gather.push(src.frame_offsets[f] + n);
            }
        }
    }
    let geom = g.constant(Tensor::new(vec![rows, 4], geom)?);
    let x = match input {
        Some(src) => {
            let feats = g.gather_rows(src.values, &gather)?;
            g.concat(&[geom, feats])?
        }
        None => geom,
    };
    let cin = g.shape(x)[1];
    let x = if spec.attention {
        let x3 = g.reshape(x, &[frames, m * k, cin])?;
        let a = cbam_attention(g, p, &spec.cbam, &format!("{prefix}.cbam"), x3, (m, k))?;
        let gated = g.mul(x3, a)?;
        g.reshape(gated, &[rows, cin])?
    } else {
        x
    };
    let mlp = spec.transform(prefix, cin);
    let h = mlp.forward(g, p, x)?;
    let w = mlp.output_width();
    let h = g.reshape(h, &[frames * m, k, w])?;
    let pooled = g.max(h, 1)?;
    let o = g.constant(Tensor::new(vec![frames * m, 3], centres)?);
    g.concat(&[pooled, o])
}

/// Posture vectors `F × d` for a batch of planned frames.
pub fn gsp_graph(
    g: &mut Graph,
    p: &mut Binder,
    cfg: &GspConfig,
    prefix: &str,
    plans: &[Vec<NeighborhoodIndex>],
    features: Option<&FeatureSource>,
) -> Result<Var> {
    cfg.validate()?;
    let mut current: Option<Var> = None;
    for (l, spec) in cfg.layers.iter().enumerate() {
        let groups: Vec<&NeighborhoodIndex> = plans.iter().map(|pl| &pl[l]).collect();
        let lp = format!("{prefix}.{l}");
        let out = match current {
            None => spatial_encode_layer(g, p, spec, &lp, &groups, features)?,
            Some(v) => {
                let prev_m = cfg.layers[l - 1].centroids;
                let offsets: Vec<usize> = (0..plans.len()).map(|f| f * prev_m).collect();
                let src = FeatureSource {
                    values: v,
                    frame_offsets: &offsets,
                };
                spatial_encode_layer(g, p, spec, &lp, &groups, Some(&src))?
            }
        };
        current = Some(out);
    }
    let out = current.expect("at least one layer");
    let last = cfg.layers.last().expect("validated");
    if last.centroids == 1 {
        Ok(out)
    } else {
        // several final regions: pool them into one vector per frame
        let w = last.output_width();
        let r = g.reshape(out, &[plans.len(), last.centroids, w])?;
        g.max(r, 1)
    }
}

/// Posture vector of a single frame with plain inputs.
pub fn gsp_forward(
    points: &[Point3],
    features: Option<(&[f64], usize)>,
    cfg: &GspConfig,
    store: &ParamStore,
    prefix: &str,
) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::contract("posture of an empty frame"));
    }
    let plan = plan_frame(points, cfg)?;
    let mut g = Graph::new();
    let mut p = Binder::new(store, false);
    let out = match features {
        Some((data, c)) if c > 0 => {
            let values = g.constant(Tensor::new(vec![points.len(), c], data.to_vec())?);
            let src = FeatureSource {
                values,
                frame_offsets: &[0],
            };
            gsp_graph(&mut g, &mut p, cfg, prefix, std::slice::from_ref(&plan), Some(&src))?
        }
        _ => gsp_graph(&mut g, &mut p, cfg, prefix, std::slice::from_ref(&plan), None)?,
    };
    Ok(g.data(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> GspConfig {
        let layer = |centroids, neighbors, radius, widths: &[usize]| SpatialEncodeLayerSpec {
            centroids,
            neighbors,
            radius,
            widths: widths.to_vec(),
            attention: true,
            cbam: CbamSpec::default(),
        };
        GspConfig {
            layers: vec![layer(8, 4, 0.4, &[6]), layer(3, 3, 0.8, &[5]), layer(1, 0, 1.0, &[7])],
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn reduction_defaults_and_errors() {
        let s = CbamSpec::default();
        assert_eq!(s.resolved_reduction(4).unwrap(), 4);
        assert_eq!(s.resolved_reduction(64).unwrap(), 8);
        assert_eq!(s.resolved_reduction(71).unwrap(), 1);
        let bad = CbamSpec {
            reduction: Some(8),
            ..CbamSpec::default()
        };
        assert!(matches!(bad.resolved_reduction(12), Err(Error::Contract(_))));
    }

    #[test]
    fn descriptors_by_hand() {
        // 2×2 positions × 4 channels
        let x = [1.0, -2.0, 0.5, 4.0, 3.0, 0.0, 0.5, -4.0, -1.0, 2.0, 0.5, 0.0, 5.0, 8.0, 0.5, 1.0];
        let (mean, max) = channel_descriptors(&x, 4);
        assert_eq!(mean, vec![2.0, 2.0, 0.5, 0.25]);
        assert_eq!(max, vec![5.0, 8.0, 0.5, 4.0]);
    }

    #[test]
    fn zero_attention_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = CbamSpec::default();
        let mut store = ParamStore::new();
        spec.init(&mut store, "a", 8, &mut rng).unwrap();
        store.zero_prefix("a");
        let mut g = Graph::new();
        let mut p = Binder::new(&store, false);
        let x = g.constant(uniform_tensor(&mut rng, &[2, 6, 8], 3.0));
        let a = cbam_attention(&mut g, &mut p, &spec, "a", x, (3, 2)).unwrap();
        assert!(g.data(a).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = CbamSpec::default();
        let mut store = ParamStore::new();
        spec.init(&mut store, "a", 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut p = Binder::new(&store, false);
        let x = g.constant(uniform_tensor(&mut rng, &[3, 20, 8], 2.0));
        let a = cbam_attention(&mut g, &mut p, &spec, "a", x, (5, 4)).unwrap();
        assert!(g.data(a).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_point_region() {
        let spec = SpatialEncodeLayerSpec {
            centroids: 1,
            neighbors: 3,
            radius: 0.1,
            widths: vec![2],
            attention: false,
            cbam: CbamSpec::default(),
        };
        let nb = group_layer(&[[0.5, 0.5, 0.5]], &spec).unwrap();
        assert_eq!(nb.offsets, vec![[0.0; 3]; 3]);
        assert_eq!(nb.center_indices, Some(vec![0]));
    }

    #[test]
    fn posture_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        cfg.init(&mut store, "gsp", 0, &mut rng).unwrap();
        let pts = cloud(&mut rng, 40);
        let a = gsp_forward(&pts, None, &cfg, &store, "gsp").unwrap();
        assert_eq!(a.len(), cfg.output_width());
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        perm.reverse();
        perm.swap(3, 17);
        let q: Vec<Point3> = perm.iter().map(|&i| pts[i]).collect();
        let b = gsp_forward(&q, None, &cfg, &store, "gsp").unwrap();
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn too_few_points() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        cfg.init(&mut store, "gsp", 0, &mut rng).unwrap();
        let pts = cloud(&mut rng, 5);
        assert!(matches!(gsp_forward(&pts, None, &cfg, &store, "gsp"), Err(Error::Contract(_))));
    }
}
