//! Full network: posture and motion embedding, stacked mixers and a
//! classifier head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PointCloudSequence;
use crate::error::{Error, Result};
use crate::geometry::{NeighborhoodIndex, Point3};
use crate::gsp::{gsp_graph, plan_frame, GspConfig};
use crate::mixer::{kansmixer_graph, MixerConfig};
use crate::params::{Binder, Mlp, ParamStore};
use crate::rmm::{plan_rmm, rmm_graph, FeatureSource, RmmConfig, RmmPlan};
use crate::tensor::{Graph, Tensor, Var};

/// Which embedding branches feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// posture and motion, mixed over time
    #[default]
    Full,
    /// per-frame posture only: the head scores every frame on its own and
    /// the scores are averaged, so no temporal information is used
    GspOnly,
    /// motion features only, mixed over time
    RmmOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub points: usize,
    pub channels: usize,
    pub classes: usize,
    pub head_hidden: usize,
    /// Learnable layer normalisation of the D-Hyperpoints and of the pooled
    /// head input.
    pub layer_norm: bool,
    pub ablation: Ablation,
    pub gsp: GspConfig,
    pub rmm: RmmConfig,
    pub mixer: MixerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 24,
            points: 256,
            channels: 0,
            classes: 4,
            head_hidden: 64,
            layer_norm: true,
            ablation: Ablation::Full,
            gsp: GspConfig::default(),
            rmm: RmmConfig::default(),
            mixer: MixerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn posture_width(&self) -> usize {
        self.gsp.output_width()
    }

    pub fn motion_width(&self) -> usize {
        self.rmm.width
    }

    /// Width of one D-Hyperpoint.
    pub fn embed_width(&self) -> usize {
        match self.ablation {
            Ablation::Full => self.posture_width() + self.motion_width(),
            Ablation::GspOnly => self.posture_width(),
            Ablation::RmmOnly => self.motion_width(),
        }
    }

    fn uses_motion(&self) -> bool {
        self.ablation != Ablation::GspOnly
    }

    fn uses_posture(&self) -> bool {
        self.ablation != Ablation::RmmOnly
    }

    fn uses_mixer(&self) -> bool {
        self.ablation != Ablation::GspOnly
    }

    /// Input width of the classifier head.
    pub fn head_input_width(&self) -> usize {
        if self.uses_mixer() {
            self.mixer.output_width(self.embed_width())
        } else {
            self.embed_width()
        }
    }

    pub fn head(&self) -> Mlp {
        Mlp::new("head", &[self.head_input_width(), self.head_hidden, self.classes], false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.points == 0 {
            return Err(Error::Config("frames and points must be positive".into()));
        }
        if self.classes < 2 || self.head_hidden == 0 {
            return Err(Error::Config("need at least two classes and a positive head width".into()));
        }
        self.gsp.validate()?;
        self.rmm.validate()?;
        self.mixer.validate()?;
        if self.uses_mixer() {
            self.mixer.output_len(self.frames)?;
        }
        Ok(())
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if self.uses_posture() {
            self.gsp.init(&mut store, "gsp", self.channels, &mut rng)?;
        }
        if self.uses_motion() {
            self.rmm.init(&mut store, "rmm", self.channels, &mut rng)?;
        }
        if self.uses_mixer() {
            self.mixer.init(&mut store, "mixer", self.embed_width(), &mut rng)?;
        }
        if self.layer_norm {
            init_norm(&mut store, EMBED_NORM, self.embed_width(), EMBED_NORM_GAIN)?;
            if self.uses_mixer() {
                init_norm(&mut store, HEAD_NORM, self.head_input_width(), 1.0)?;
            }
        }
        self.head().init(&mut store, &mut rng)?;
        Ok(store)
    }

    /// A very small network with every branch enabled, sized for
    /// finite-difference checks and fast tests.
    pub fn toy() -> ModelConfig {
        let layer = |centroids, neighbors, radius, w: usize| crate::gsp::SpatialEncodeLayerSpec {
            centroids,
            neighbors,
            radius,
            widths: vec![w],
            attention: true,
            cbam: crate::gsp::CbamSpec::default(),
        };
        ModelConfig {
            frames: 6,
            points: 24,
            channels: 0,
            classes: 3,
            head_hidden: 5,
            layer_norm: true,
            ablation: Ablation::Full,
            gsp: GspConfig {
                layers: vec![layer(6, 4, 0.5, 5), layer(1, 0, 1.0, 5)],
            },
            rmm: RmmConfig {
                clip: crate::rmm::ClipSpec {
                    anchors: 3,
                    neighbors: 3,
                    spatial_radius: 0.5,
                    ..crate::rmm::ClipSpec::default()
                },
                stage2: crate::rmm::Stage2Spec {
                    neighbors: 3,
                    ..crate::rmm::Stage2Spec::default()
                },
                kernel_hidden: 4,
                stage1_width: 4,
                width: 4,
                ..RmmConfig::default()
            },
            mixer: MixerConfig {
                branches: vec![crate::mixer::Branch {
                    radius: 1,
                    stride: 1,
                    padding: 1,
                }],
                stacks: 1,
                hidden: [3, 3],
                ..MixerConfig::default()
            },
        }
    }

    /// The full-size network: 256/128/1 posture regions with 32 neighbours,
    /// 128 motion anchors, 256-wide posture and 128-wide motion features.
    /// Far slower to train than the default on a CPU.
    pub fn full_scale() -> ModelConfig {
        let layer = |centroids, neighbors, radius, w: usize| crate::gsp::SpatialEncodeLayerSpec {
            centroids,
            neighbors,
            radius,
            widths: vec![w],
            attention: true,
            cbam: crate::gsp::CbamSpec {
                reduction: Some(8),
                kernel: [7, 1],
            },
        };
        ModelConfig {
            gsp: GspConfig {
                // the final region appends its 3 centroid coordinates
                layers: vec![layer(256, 32, 0.2, 64), layer(128, 32, 0.4, 128), layer(1, 0, 1.0, 253)],
            },
            rmm: RmmConfig {
                clip: crate::rmm::ClipSpec {
                    anchors: 128,
                    neighbors: 32,
                    ..crate::rmm::ClipSpec::default()
                },
                kernel_hidden: 64,
                stage1_width: 64,
                width: 128,
                ..RmmConfig::default()
            },
            mixer: MixerConfig {
                hidden: [64, 64],
                ..MixerConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    /// Rejects sequences whose sizes differ from the configuration.
    pub fn check_input(&self, seq: &PointCloudSequence) -> Result<()> {
        if seq.len() != self.frames {
            return Err(Error::contract(format!("expected {} frames, got {}", self.frames, seq.len())));
        }
        if let Some((t, f)) = seq.frames().iter().enumerate().find(|(_, f)| f.len() != self.points) {
            return Err(Error::contract(format!(
                "expected {} points per frame, frame {t} has {}",
                self.points,
                f.len()
            )));
        }
        if seq.channels() != self.channels {
            return Err(Error::contract(format!(
                "expected {} feature channels, got {}",
                self.channels,
                seq.channels()
            )));
        }
        Ok(())
    }
}

/// Neighbourhood geometry of one sample. It depends only on coordinates, so
/// it can be computed once and reused across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub posture: Vec<Vec<NeighborhoodIndex>>,
    pub motion: Option<RmmPlan>,
}

pub fn plan_sample(cfg: &ModelConfig, seq: &PointCloudSequence) -> Result<SamplePlan> {
    cfg.check_input(seq)?;
    let coords: Vec<&[Point3]> = seq.frames().iter().map(|f| f.coords()).collect();
    let posture = if cfg.uses_posture() {
        coords.iter().map(|c| plan_frame(c, &cfg.gsp)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let motion = if cfg.uses_motion() {
        Some(plan_rmm(&coords, &cfg.rmm)?)
    } else {
        None
    };
    Ok(SamplePlan { posture, motion })
}

fn point_features(g: &mut Graph, seq: &PointCloudSequence) -> Result<Option<(Var, Vec<usize>)>> {
    let c = seq.channels();
    if c == 0 {
        return Ok(None);
    }
    let mut offsets = Vec::with_capacity(seq.len());
    let mut data = Vec::new();
    for f in seq.frames() {
        offsets.push(data.len() / c);
        data.extend_from_slice(f.features().expect("channels > 0"));
    }
    let rows = data.len() / c;
    Ok(Some((g.constant(Tensor::new(vec![rows, c], data)?), offsets)))
}

/// D-Hyperpoint sequence `T × embed_width` on the graph.
pub fn embed_graph(g: &mut Graph, p: &mut Binder, cfg: &ModelConfig, plan: &SamplePlan, seq: &PointCloudSequence) -> Result<Var> {
    let feats = point_features(g, seq)?;
    let src = feats.as_ref().map(|(v, o)| FeatureSource {
        values: *v,
        frame_offsets: o,
    });
    let posture = if cfg.uses_posture() {
        Some(gsp_graph(g, p, &cfg.gsp, "gsp", &plan.posture, src.as_ref())?)
    } else {
        None
    };
    let motion = match &plan.motion {
        Some(m) => Some(rmm_graph(g, p, &cfg.rmm, "rmm", m, src.as_ref())?),
        None => None,
    };
    match (posture, motion) {
        (Some(a), Some(b)) => {
            if g.shape(a)[0] != g.shape(b)[0] {
                return Err(Error::Internal(format!(
                    "posture has {} steps but motion has {}",
                    g.shape(a)[0],
                    g.shape(b)[0]
                )));
            }
            g.concat(&[a, b])
        }
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(Error::Internal("no embedding branch enabled".into())),
    }
}

const EMBED_NORM: &str = "embed_norm";
const HEAD_NORM: &str = "head_norm";
// keeps most normalised features inside the spline grid of the first D-KAN
const EMBED_NORM_GAIN: f64 = 0.5;
const NORM_EPS: f64 = 1e-5;

fn init_norm(store: &mut ParamStore, prefix: &str, width: usize, gain: f64) -> Result<()> {
    store.insert(format!("{prefix}.gain"), Tensor::new(vec![width], vec![gain; width])?)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]))
}

/// Row-wise layer normalisation followed by a learnable per-feature affine map.
fn norm_graph(g: &mut Graph, p: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, NORM_EPS)?;
    let gain = p.var(g, &format!("{prefix}.gain"))?;
    let bias = p.var(g, &format!("{prefix}.bias"))?;
    let scaled = g.mul(n, gain)?;
    g.add(scaled, bias)
}

/// Class logits `1 × classes` on the graph.
pub fn logits_graph(g: &mut Graph, p: &mut Binder, cfg: &ModelConfig, plan: &SamplePlan, seq: &PointCloudSequence) -> Result<Var> {
    let mut h = embed_graph(g, p, cfg, plan, seq)?;
    if cfg.layer_norm {
        h = norm_graph(g, p, EMBED_NORM, h)?;
    }
    let head = cfg.head();
    if !cfg.uses_mixer() {
        let per_frame = head.forward(g, p, h)?;
        let mean = g.mean(per_frame, 0)?;
        return g.reshape(mean, &[1, cfg.classes]);
    }
    let mixed = kansmixer_graph(g, p, &cfg.mixer, "mixer", h)?;
    let pooled = g.max(mixed, 0)?;
    let w = g.shape(pooled)[0];
    let mut pooled = g.reshape(pooled, &[1, w])?;
    if cfg.layer_norm {
        pooled = norm_graph(g, p, HEAD_NORM, pooled)?;
    }
    head.forward(g, p, pooled)
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init(seed)?;
        Ok(Model { config, params })
    }

    pub fn plan(&self, seq: &PointCloudSequence) -> Result<SamplePlan> {
        plan_sample(&self.config, seq)
    }

    pub fn logits_planned(&self, plan: &SamplePlan, seq: &PointCloudSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params, false);
        let out = logits_graph(&mut g, &mut p, &self.config, plan, seq)?;
        let logits = g.data(out).to_vec();
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index: i,
                detail: "non-finite logit".into(),
            });
        }
        Ok(logits)
    }

    pub fn forward(&self, seq: &PointCloudSequence) -> Result<Vec<f64>> {
        let plan = self.plan(seq)?;
        self.logits_planned(&plan, seq)
    }

    pub fn embed_dhyperpoints(&self, seq: &PointCloudSequence) -> Result<Vec<Vec<f64>>> {
        let plan = self.plan(seq)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params, false);
        let h = embed_graph(&mut g, &mut p, &self.config, &plan, seq)?;
        let w = g.shape(h)[1];
        Ok(g.data(h).chunks(w).map(|r| r.to_vec()).collect())
    }

    /// Cross-entropy of one labelled sample and its parameter gradients,
    /// aligned with the parameter store.
    pub fn loss_and_grads(&self, plan: &SamplePlan, seq: &PointCloudSequence, label: usize) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.params, true);
        let logits = logits_graph(&mut g, &mut p, &self.config, plan, seq)?;
        let loss = g.cross_entropy(logits, &[label])?;
        let value = g.data(loss)[0];
        if !value.is_finite() {
            return Err(Error::Numeric {
                index: 0,
                detail: format!("loss is {value}"),
            });
        }
        let logit_values = g.data(logits).to_vec();
        g.backward(loss)?;
        Ok((value, logit_values, p.gradients(&g)))
    }
}

/// Index of the largest logit, first on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
