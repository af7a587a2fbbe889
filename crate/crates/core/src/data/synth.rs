//! Seeded synthetic action sequences whose classes differ only in motion.
//!
//! Each sample draws its own two-part body (an ellipsoidal torso and a rod
//! limb) and random nuisance pose. The nuisance distributions are chosen so
//! that any single frame has the same distribution for every class: body
//! orientation and limb angle are uniform on the circle, and the scale and
//! position of static classes are drawn from the same per-frame marginals
//! that the moving classes sweep through.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloudFrame};

use super::sequence::{LabeledSequence, PointCloudSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionClass {
    Translate,
    Rotate,
    ScaleOscillate,
    TwoPartSwing,
}

impl MotionClass {
    pub const ALL: [MotionClass; 4] = [
        MotionClass::Translate,
        MotionClass::Rotate,
        MotionClass::ScaleOscillate,
        MotionClass::TwoPartSwing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Translate => "translate",
            MotionClass::Rotate => "rotate",
            MotionClass::ScaleOscillate => "scale-oscillate",
            MotionClass::TwoPartSwing => "two-part-swing",
        }
    }
}

impl fmt::Display for MotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MotionClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion class {s:?}")))
    }
}

/// Which half of a generated dataset a sample belongs to; the halves use
/// disjoint random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: Vec<MotionClass>,
    pub points: usize,
    pub frames: usize,
    pub noise: f64,
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: MotionClass::ALL.to_vec(),
            points: 256,
            frames: 24,
            noise: 0.01,
            seed: 7,
            train_per_class: 100,
            test_per_class: 25,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::contract("synthetic data needs at least two classes"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(Error::contract(format!("class {c} listed twice")));
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::contract(format!("noise sigma must be finite and ≥ 0, got {}", self.noise)));
        }
        if self.points < 4 || self.frames == 0 {
            return Err(Error::contract("synthetic frames need ≥ 4 points and ≥ 1 frame"));
        }
        Ok(())
    }

    fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

/// Motion magnitudes shared by all samples.
const SPIN_RATE: (f64, f64) = (0.12, 0.2);
const DRIFT_RATE: (f64, f64) = (0.025, 0.035);
const SCALE_AMPLITUDE: f64 = 0.3;
const SWING_AMPLITUDE: f64 = 0.9;
const PERIOD: (f64, f64) = (8.0, 14.0);

struct Body {
    torso: Vec<Point3>,
    /// (along, across-1, across-2) in limb coordinates
    limb: Vec<Point3>,
    attach: Point3,
}

fn draw_body(rng: &mut ChaCha8Rng, points: usize) -> Body {
    let n_limb = (points / 4).max(1);
    let axes = [rng.gen_range(0.15..0.25), rng.gen_range(0.2..0.3), rng.gen_range(0.3..0.45)];
    let torso = (0..points - n_limb)
        .map(|_| {
            let d: [f64; 3] = UnitSphere.sample(rng);
            let r = rng.gen_range(0.6f64..1.0).cbrt();
            [d[0] * r * axes[0], d[1] * r * axes[1], d[2] * r * axes[2]]
        })
        .collect();
    let length = rng.gen_range(0.35..0.5);
    let limb = (0..n_limb)
        .map(|_| {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            [rng.gen_range(0.0..length), 0.02 * a, 0.02 * b]
        })
        .collect();
    Body {
        torso,
        limb,
        attach: [0.0, axes[1], 0.6 * axes[2]],
    }
}

struct Pose {
    heading: f64,
    limb_angle: f64,
    scale: f64,
    offset: Point3,
}

fn place(body: &Body, pose: &Pose) -> Vec<Point3> {
    let (sl, cl) = pose.limb_angle.sin_cos();
    // limb rotates in the body's y-z plane about the attachment point
    let along = [0.0, sl, -cl];
    let across = [0.0, cl, sl];
    let limb = body.limb.iter().map(|q| {
        [
            body.attach[0] + q[1],
            body.attach[1] + q[0] * along[1] + q[2] * across[1],
            body.attach[2] + q[0] * along[2] + q[2] * across[2],
        ]
    });
    let (sh, ch) = pose.heading.sin_cos();
    body.torso
        .iter()
        .copied()
        .chain(limb)
        .map(|p| {
            [
                pose.offset[0] + pose.scale * (ch * p[0] - sh * p[1]),
                pose.offset[1] + pose.scale * (sh * p[0] + ch * p[1]),
                pose.offset[2] + pose.scale * p[2],
            ]
        })
        .collect()
}

fn sample_rng(spec: &SynthSpec, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = match split {
        Split::Train => 0u64,
        Split::Test => 1u64 << 40,
    };
    rng.set_stream(half | index as u64);
    rng
}

/// Generates one sample of class `class` from its own random stream.
pub fn synth_sample(spec: &SynthSpec, class: MotionClass, split: Split, index: usize) -> Result<PointCloudSequence> {
    generate(spec, class, split, index).map(|(s, _)| s)
}

fn generate(spec: &SynthSpec, class: MotionClass, split: Split, index: usize) -> Result<(PointCloudSequence, Point3)> {
    spec.validate()?;
    let mut rng = sample_rng(spec, split, index);
    let body = draw_body(&mut rng, spec.points);

    let heading0 = rng.gen_range(0.0..TAU);
    let limb0 = rng.gen_range(0.0..TAU);
    let scale0 = rng.gen_range(0.85..1.15);
    let offset0 = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let spin = rng.gen_range(SPIN_RATE.0..SPIN_RATE.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let speed = rng.gen_range(DRIFT_RATE.0..DRIFT_RATE.1);
    let velocity = [dir[0] * speed, dir[1] * speed, dir[2] * speed];
    let omega = TAU / rng.gen_range(PERIOD.0..PERIOD.1);
    let phase = rng.gen_range(0.0..TAU);
    // static classes sit at a random point of the path the moving ones follow
    let tau = rng.gen_range(0.0..(spec.frames - 1).max(1) as f64);
    let jitter = Normal::new(0.0, spec.noise).map_err(|e| Error::contract(e.to_string()))?;

    let base_scale = |t: f64| match class {
        MotionClass::ScaleOscillate => scale0 * (1.0 + SCALE_AMPLITUDE * (omega * t + phase).sin()),
        _ => scale0 * (1.0 + SCALE_AMPLITUDE * phase.sin()),
    };
    let pose = |t: usize| {
        let tf = t as f64;
        Pose {
            heading: match class {
                MotionClass::Rotate => heading0 + spin * tf,
                _ => heading0,
            },
            limb_angle: match class {
                MotionClass::TwoPartSwing => limb0 + SWING_AMPLITUDE * (omega * tf + phase).sin(),
                _ => limb0 + SWING_AMPLITUDE * phase.sin(),
            },
            scale: base_scale(tf),
            offset: match class {
                MotionClass::Translate => offset0,
                _ => [offset0[0] + tau * velocity[0], offset0[1] + tau * velocity[1], offset0[2] + tau * velocity[2]],
            },
        }
    };

    let first = place(&body, &pose(0));
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut pts = match class {
            MotionClass::Translate => {
                let tf = t as f64;
                let shift = [tf * velocity[0], tf * velocity[1], tf * velocity[2]];
                first.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect()
            }
            _ => place(&body, &pose(t)),
        };
        if spec.noise > 0.0 {
            for p in &mut pts {
                for v in p.iter_mut() {
                    *v += jitter.sample(&mut rng);
                }
            }
        }
        frames.push(PointCloudFrame::new(pts)?);
    }
    Ok((PointCloudSequence::new(frames)?, velocity))
}

/// Per-frame shift of a translate-class sample drawn at `index`.
pub fn translate_velocity(spec: &SynthSpec, split: Split, index: usize) -> Result<Point3> {
    generate(spec, MotionClass::Translate, split, index).map(|(_, v)| v)
}

/// One split of the dataset, classes interleaved (`label = i % classes`).
/// Points drawn uniformly from the cube `[-1, 1]³`, features from `[-1, 1]`.
/// Handy as unstructured input for checks.
pub fn random_sequence(frames: usize, points: usize, channels: usize, seed: u64) -> Result<PointCloudSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..frames)
        .map(|_| {
            let coords = (0..points)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let feats = (channels > 0).then(|| (0..points * channels).map(|_| rng.gen_range(-1.0..1.0)).collect());
            PointCloudFrame::with_features(coords, feats, channels)
        })
        .collect::<Result<Vec<_>>>()?;
    PointCloudSequence::new(frames)
}

pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Vec<LabeledSequence>> {
    spec.validate()?;
    let n = spec.per_class(split) * spec.classes.len();
    (0..n)
        .map(|i| {
            let label = i % spec.classes.len();
            Ok(LabeledSequence {
                sequence: synth_sample(spec, spec.classes[label], split, i)?,
                label: Some(label),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            points: 32,
            frames: 6,
            train_per_class: 2,
            test_per_class: 1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn translate_is_exact_shift_without_noise() {
        let spec = SynthSpec { noise: 0.0, ..small() };
        let s = synth_sample(&spec, MotionClass::Translate, Split::Train, 3).unwrap();
        let v = translate_velocity(&spec, Split::Train, 3).unwrap();
        let f0 = s.frame(0).coords();
        for t in 0..s.len() {
            let tf = t as f64;
            for (p, q) in s.frame(t).coords().iter().zip(f0) {
                for k in 0..3 {
                    assert_eq!(p[k], q[k] + tf * v[k]);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_split_dependent() {
        let spec = small();
        let a = synth_dataset(&spec, Split::Train).unwrap();
        let b = synth_dataset(&spec, Split::Train).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&spec, Split::Test).unwrap();
        assert_ne!(a[0].sequence, c[0].sequence);
        assert_eq!(a.len(), 8);
        assert_eq!(c.len(), 4);
        assert_eq!(a.iter().map(|s| s.label.unwrap()).collect::<Vec<_>>(), vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn invalid_specs() {
        assert!(SynthSpec { classes: vec![MotionClass::Rotate], ..small() }.validate().is_err());
        assert!(SynthSpec { noise: -1.0, ..small() }.validate().is_err());
        assert!(SynthSpec {
            classes: vec![MotionClass::Rotate, MotionClass::Rotate],
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn class_names_roundtrip() {
        for c in MotionClass::ALL {
            assert_eq!(c.name().parse::<MotionClass>().unwrap(), c);
        }
        assert!("jump".parse::<MotionClass>().is_err());
    }
}
