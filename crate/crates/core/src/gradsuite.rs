//! Finite-difference gradient checks for every differentiable module.
//!
//! Each case differentiates a fixed random projection of a module output
//! with respect to the module's real parameters (and its input features
//! where it has them). Components are subsampled so the whole suite stays
//! well inside a few minutes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::random_sequence;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::gsp::{gsp_graph, plan_frame, CbamSpec, GspConfig, SpatialEncodeLayerSpec};
use crate::kan::{init_layer, kan_layer_graph, DKanSpec, SplineGrid};
use crate::mixer::{kansmixer_graph, Branch, Combine, MixerConfig};
use crate::model::{logits_graph, plan_sample, ModelConfig};
use crate::params::{normal_tensor, Binder, ParamStore};
use crate::rmm::{plan_rmm, rmm_graph, FeatureSource, TemporalReduce};
use crate::tensor::{grad_check_many, Graph, ReduceKind, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Tensor,
    Kan,
    Rmm,
    Gsp,
    Mixer,
    Model,
    All,
}

impl Scope {
    pub const NAMES: [&'static str; 7] = ["tensor", "kan", "rmm", "gsp", "mixer", "model", "all"];

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tensor" => Scope::Tensor,
            "kan" => Scope::Kan,
            "rmm" => Scope::Rmm,
            "gsp" => Scope::Gsp,
            "mixer" => Scope::Mixer,
            "model" => Scope::Model,
            "all" => Scope::All,
            _ => return Err(Error::Config(format!("unknown gradcheck scope {s:?}; expected one of {:?}", Scope::NAMES))),
        })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Scope::Tensor, Scope::Kan, Scope::Rmm, Scope::Gsp, Scope::Mixer, Scope::Model, Scope::All]
            .iter()
            .position(|s| s == self)
            .expect("listed");
        f.write_str(Scope::NAMES[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub scope: Scope,
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Runs every case in `scope` with central-difference step `eps`.
pub fn run_gradcheck(scope: Scope, eps: f64, seed: u64) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    let mut push = |s: Scope, name: &str, r: crate::tensor::GradCheckReport| {
        out.push(CaseReport {
            scope: s,
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
        })
    };
    if scope.includes(Scope::Tensor) {
        for (name, r) in tensor_cases(eps, seed)? {
            push(Scope::Tensor, name, r);
        }
    }
    if scope.includes(Scope::Kan) {
        push(Scope::Kan, "kan_layer", kan_layer_case(eps, seed)?);
        push(Scope::Kan, "dkan_block", dkan_case(eps, seed)?);
    }
    if scope.includes(Scope::Rmm) {
        for reduce in [TemporalReduce::Max, TemporalReduce::Sum] {
            push(Scope::Rmm, &format!("rmm_{reduce:?}").to_lowercase(), rmm_case(eps, seed, reduce)?);
        }
    }
    if scope.includes(Scope::Gsp) {
        push(Scope::Gsp, "gsp_cbam", gsp_case(eps, seed)?);
    }
    if scope.includes(Scope::Mixer) {
        for combine in [Combine::Add, Combine::Concat] {
            push(Scope::Mixer, &format!("mixer_{combine:?}").to_lowercase(), mixer_case(eps, seed, combine)?);
        }
    }
    if scope.includes(Scope::Model) {
        push(Scope::Model, "model_loss", model_case(eps, seed)?);
    }
    Ok(out)
}

/// Largest error over a set of reports, 0 for an empty set.
pub fn worst(reports: &[CaseReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

const PARAM_JITTER: f64 = 0.05;

type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Wraps `build` so its output is contracted against a fixed random tensor,
/// giving a scalar with well-scaled gradients.
fn projected<'a>(build: &'a Builder<'a>, projection: &'a Tensor) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'a {
    move |g: &mut Graph, vars: &[Var]| {
        let y = build(g, vars)?;
        if g.shape(y) != projection.shape() {
            return Err(Error::Internal(format!(
                "projection shape {:?} does not match output {:?}",
                projection.shape(),
                g.shape(y)
            )));
        }
        let r = g.constant(projection.clone());
        let prod = g.mul(y, r)?;
        g.sum_all(prod)
    }
}

/// Output shape of `build` at `inputs`, used to size the projection.
fn output_shape(build: &Builder, inputs: &[Tensor]) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    Ok(g.shape(y).to_vec())
}

/// Checks `build` at `inputs`, perturbing at most `per_tensor` components of
/// each input chosen at random.
fn check(build: &Builder, inputs: &[Tensor], eps: f64, per_tensor: usize, rng: &mut ChaCha8Rng) -> Result<crate::tensor::GradCheckReport> {
    let shape = output_shape(build, inputs)?;
    let projection = normal_tensor(rng, &shape, 1.0);
    let f = projected(build, &projection);
    let chosen: Vec<Vec<bool>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            let mut mask = vec![n <= per_tensor; n];
            if n > per_tensor {
                for i in rand::seq::index::sample(rng, n, per_tensor) {
                    mask[i] = true;
                }
            }
            mask
        })
        .collect();
    grad_check_many(&f, inputs, eps, &|t, c| chosen[t][c])
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

fn tensor_cases(eps: f64, seed: u64) -> Result<Vec<(&'static str, crate::tensor::GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let mm: &Builder = &|g, v| g.matmul(v[0], v[1]);
    out.push(("matmul", check(mm, &[a.clone(), b], eps, 64, &mut rng)?));

    let x = random_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let row = random_tensor(&mut rng, &[2, 1, 4], -2.0, 2.0);
    let bc: &Builder = &|g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let e = g.scale(m, 0.5);
        g.add(e, v[0])
    };
    out.push(("broadcast_arith", check(bc, &[x.clone(), row], eps, 64, &mut rng)?));

    let un: &Builder = &|g, v| {
        let s = g.silu(v[0]);
        let t = g.sigmoid(s);
        let n = g.neg(t);
        let e = g.exp(n);
        g.add(e, s)
    };
    out.push(("unary", check(un, std::slice::from_ref(&x), eps, 64, &mut rng)?));

    let red: &Builder = &|g, v| {
        let m = g.reduce(ReduceKind::Max, v[0], 1)?;
        let a = g.reduce(ReduceKind::Mean, v[0], 2)?;
        let s = g.reduce(ReduceKind::Sum, a, 0)?;
        let mm = g.reshape(m, &[8])?;
        let ss = g.reshape(s, &[3])?;
        let t = g.sum_all(ss)?;
        let tt = g.reshape(t, &[1])?;
        g.mul(mm, tt)
    };
    out.push(("reduce", check(red, std::slice::from_ref(&x), eps, 64, &mut rng)?));

    let table = random_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let other = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let gat: &Builder = &|g, v| {
        let r = g.gather_rows_padded(v[0], &[Some(4), None, Some(0), Some(4)])?;
        let c = g.concat(&[r, v[1]])?;
        let t = g.transpose(c)?;
        g.reshape(t, &[4, 5])
    };
    out.push(("gather_concat_transpose", check(gat, &[table, other], eps, 64, &mut rng)?));

    let img = random_tensor(&mut rng, &[2, 5, 3, 4], -1.0, 1.0);
    let ker = random_tensor(&mut rng, &[3, 3, 4], -1.0, 1.0);
    let conv: &Builder = &|g, v| g.conv2d_same(v[0], v[1]);
    out.push(("conv2d_same", check(conv, &[img, ker], eps, 64, &mut rng)?));

    let rows = random_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    let ln: &Builder = &|g, v| g.layer_norm(v[0], 1e-5);
    out.push(("layer_norm", check(ln, &[rows], eps, 64, &mut rng)?));

    let logits = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let ce: &Builder = &|g, v| {
        let l = g.cross_entropy(v[0], &[2, 0, 3])?;
        g.reshape(l, &[1])
    };
    out.push(("cross_entropy", check(ce, &[logits], eps, 64, &mut rng)?));
    Ok(out)
}

/// Parameters of `store` plus optional extra inputs, as gradcheck inputs.
/// Parameters followed by `extra`. Every parameter is moved by a small
/// random offset first: zero-initialised biases would otherwise put exact
/// ties into max reductions, where only one-sided derivatives exist.
fn store_inputs(store: &ParamStore, extra: &[Tensor], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    store
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-PARAM_JITTER..PARAM_JITTER));
            t
        })
        .chain(extra.iter().cloned())
        .collect()
}

/// Runs `body` with the store bound to the leading `vars`.
fn with_store<T>(store: &ParamStore, g: &mut Graph, vars: &[Var], body: impl FnOnce(&mut Graph, &mut Binder, &[Var]) -> Result<T>) -> Result<T> {
    let (params, rest) = vars.split_at(store.len());
    let mut p = Binder::with_vars(store, params)?;
    body(g, &mut p, rest)
}

fn kan_layer_case(eps: f64, seed: u64) -> Result<crate::tensor::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let grid = SplineGrid::default();
    let mut store = ParamStore::new();
    init_layer(&mut store, "k", 4, 3, &grid, &mut rng)?;
    // stay off the clamp at the domain edge, where the derivative jumps
    let x = random_tensor(&mut rng, &[5, 4], -0.95, 0.95);
    let inputs = store_inputs(&store, &[x], &mut rng);
    let build: &Builder = &|g, vars| with_store(&store, g, vars, |g, p, rest| kan_layer_graph(g, p, "k", &grid, rest[0]));
    check(build, &inputs, eps, 48, &mut rng)
}

fn dkan_case(eps: f64, seed: u64) -> Result<crate::tensor::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let spec = DKanSpec {
        width: 4,
        hidden: [3, 3],
        grid: SplineGrid::default(),
    };
    let mut store = ParamStore::new();
    spec.init(&mut store, "d", &mut rng)?;
    let x = random_tensor(&mut rng, &[3, 4], -0.9, 0.9);
    let inputs = store_inputs(&store, &[x], &mut rng);
    let build: &Builder = &|g, vars| with_store(&store, g, vars, |g, p, rest| spec.forward(g, p, "d", rest[0]));
    check(build, &inputs, eps, 32, &mut rng)
}

fn toy_coords(frames: usize, points: usize, channels: usize, seed: u64) -> Result<(Vec<Vec<Point3>>, Tensor, Vec<usize>)> {
    let seq = random_sequence(frames, points, channels, seed)?;
    let coords = seq.frames().iter().map(|f| f.coords().to_vec()).collect();
    let mut feats = Vec::new();
    let mut offsets = Vec::new();
    for f in seq.frames() {
        offsets.push(feats.len() / channels.max(1));
        feats.extend_from_slice(f.features().unwrap_or(&[]));
    }
    let rows = frames * points;
    Ok((coords, Tensor::new(vec![rows, channels], feats)?, offsets))
}

fn rmm_case(eps: f64, seed: u64, reduce: TemporalReduce) -> Result<crate::tensor::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let mut cfg = ModelConfig::toy().rmm;
    cfg.reduce = reduce;
    let channels = 2;
    let (coords, feats, offsets) = toy_coords(6, 20, channels, seed ^ 4)?;
    let refs: Vec<&[Point3]> = coords.iter().map(|c| c.as_slice()).collect();
    let plan = plan_rmm(&refs, &cfg)?;
    let mut store = ParamStore::new();
    cfg.init(&mut store, "rmm", channels, &mut rng)?;
    let inputs = store_inputs(&store, &[feats], &mut rng);
    let build: &Builder = &|g, vars| {
        with_store(&store, g, vars, |g, p, rest| {
            let src = FeatureSource {
                values: rest[0],
                frame_offsets: &offsets,
            };
            rmm_graph(g, p, &cfg, "rmm", &plan, Some(&src))
        })
    };
    check(build, &inputs, eps, 24, &mut rng)
}

fn gsp_case(eps: f64, seed: u64) -> Result<crate::tensor::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let layer = |centroids, neighbors, radius, widths: Vec<usize>| SpatialEncodeLayerSpec {
        centroids,
        neighbors,
        radius,
        widths,
        attention: true,
        cbam: CbamSpec {
            reduction: Some(2),
            kernel: [3, 3],
        },
    };
    let cfg = GspConfig {
        layers: vec![layer(5, 4, 0.6, vec![4, 5]), layer(1, 0, 1.0, vec![5])],
    };
    let channels = 2;
    let (coords, feats, offsets) = toy_coords(3, 16, channels, seed ^ 6)?;
    let plans = coords.iter().map(|c| plan_frame(c, &cfg)).collect::<Result<Vec<_>>>()?;
    let mut store = ParamStore::new();
    cfg.init(&mut store, "gsp", channels, &mut rng)?;
    let inputs = store_inputs(&store, &[feats], &mut rng);
    let build: &Builder = &|g, vars| {
        with_store(&store, g, vars, |g, p, rest| {
            let src = FeatureSource {
                values: rest[0],
                frame_offsets: &offsets,
            };
            gsp_graph(g, p, &cfg, "gsp", &plans, Some(&src))
        })
    };
    check(build, &inputs, eps, 24, &mut rng)
}

fn mixer_case(eps: f64, seed: u64, combine: Combine) -> Result<crate::tensor::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
    let cfg = MixerConfig {
        branches: vec![
            Branch {
                radius: 1,
                stride: 1,
                padding: 1,
            },
            Branch {
                radius: 2,
                stride: 1,
                padding: 2,
            },
        ],
        stacks: 2,
        hidden: [3, 3],
        combine,
        ..MixerConfig::default()
    };
    let width = 3;
    let mut store = ParamStore::new();
    cfg.init(&mut store, "mixer", width, &mut rng)?;
    let x = random_tensor(&mut rng, &[5, width], -0.9, 0.9);
    let inputs = store_inputs(&store, &[x], &mut rng);
    let build: &Builder = &|g, vars| with_store(&store, g, vars, |g, p, rest| kansmixer_graph(g, p, &cfg, "mixer", rest[0]));
    check(build, &inputs, eps, 16, &mut rng)
}

fn model_case(eps: f64, seed: u64) -> Result<crate::tensor::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 8);
    let cfg = ModelConfig::toy();
    let seq = random_sequence(cfg.frames, cfg.points, cfg.channels, seed ^ 9)?;
    let plan = plan_sample(&cfg, &seq)?;
    let store = cfg.init(rng.gen())?;
    let inputs = store_inputs(&store, &[], &mut rng);
    let label = rng.gen_range(0..cfg.classes);
    let build: &Builder = &|g, vars| {
        with_store(&store, g, vars, |g, p, _| {
            let logits = logits_graph(g, p, &cfg, &plan, &seq)?;
            let loss = g.cross_entropy(logits, &[label])?;
            let l = g.reshape(loss, &[1])?;
            // keep the logits in the objective so head gradients stay O(1)
            let flat = g.reshape(logits, &[cfg.classes])?;
            let s = g.sum_all(flat)?;
            let s = g.reshape(s, &[1])?;
            g.add(l, s)
        })
    };
    check(build, &inputs, eps, 12, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_roundtrip() {
        for n in Scope::NAMES {
            assert_eq!(n.parse::<Scope>().unwrap().to_string(), n);
        }
        assert!("nope".parse::<Scope>().is_err());
    }

    #[test]
    fn every_scope_passes_over_several_seeds() {
        for seed in 1..=10 {
            let r = run_gradcheck(Scope::All, 1e-5, seed).unwrap();
            assert!(worst(&r) < 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn tensor_scope_is_tight() {
        let r = run_gradcheck(Scope::Tensor, 1e-5, 3).unwrap();
        assert!(r.len() >= 7);
        assert!(worst(&r) < 1e-6, "{r:?}");
    }
}
