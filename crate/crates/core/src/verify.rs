//! Runtime invariant suites behind `hyperpoint verify`.
//!
//! Every check compares an optimised routine against a slow, obviously
//! correct evaluation or asserts an exact algebraic property, on seeded
//! random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{decode_sequence, encode_sequence, random_sequence, synth_dataset, Split, SynthSpec};
use crate::error::Result;
use crate::geometry::{ball_group, dist2, farthest_point_sample, knn_query, NeighborMode, Point3};
use crate::kan::{bspline_basis, init_layer, kan_layer, kan_layer_graph, KanLayerParams, SplineGrid};
use crate::mixer::{kansmixer_forward, kansmixer_graph, tov, MixerConfig};
use crate::model::{Model, ModelConfig};
use crate::params::{Binder, Mlp, ParamStore};
use crate::rmm::{build_motionscoper, point_conv_4d_values, Clip, TemporalReduce};
use crate::tensor::{Graph, Tensor};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const SUITES: [&str; 6] = ["geometry", "kan", "rmm", "mixer", "model", "data"];

fn check(suite: &'static str, name: &'static str, passed: bool, detail: String) -> Check {
    Check { suite, name, passed, detail }
}

/// Runs every suite with inputs drawn from `seed`.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    out.extend(geometry_suite(seed)?);
    out.extend(kan_suite(seed)?);
    out.extend(rmm_suite(seed)?);
    out.extend(mixer_suite(seed)?);
    out.extend(model_suite(seed)?);
    out.extend(data_suite(seed)?);
    Ok(out)
}

pub fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
    (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
}

fn brute_fps(points: &[Point3], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| dist2(p, &points[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

fn brute_knn(points: &[Point3], q: &Point3, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..points.len()).collect();
    all.sort_by(|&a, &b| dist2(&points[a], q).total_cmp(&dist2(&points[b], q)).then(a.cmp(&b)));
    all.truncate(k);
    all
}

fn geometry_suite(seed: u64) -> Result<Vec<Check>> {
    let (mut fps_ok, mut knn_ok, mut ball_ok) = (0, 0, 0);
    let trials = 50;
    for s in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s * 7919));
        let n = rng.gen_range(1..=64);
        let pts = random_points(&mut rng, n);
        let k = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        if farthest_point_sample(&pts, k, start)? == brute_fps(&pts, k, start) {
            fps_ok += 1;
        }
        let queries = random_points(&mut rng, 4);
        let got = knn_query(&pts, &queries, k)?;
        if queries.iter().enumerate().all(|(m, q)| got[m * k..(m + 1) * k] == brute_knn(&pts, q, k)[..]) {
            knn_ok += 1;
        }
        let radius = rng.gen_range(0.2..1.0);
        let idx = ball_group(&pts, &queries, radius, k)?;
        let consistent = queries.iter().enumerate().all(|(m, q)| {
            let inside: Vec<usize> = brute_knn(&pts, q, n).into_iter().filter(|&i| dist2(&pts[i], q) <= radius * radius).collect();
            let row = idx.row(m);
            let fill = &idx.fill[m * k..(m + 1) * k];
            let real: Vec<usize> = row.iter().zip(fill).filter(|(_, f)| !**f).map(|(i, _)| *i).collect();
            real[..] == inside[..inside.len().min(k)]
        });
        if consistent {
            ball_ok += 1;
        }
    }
    Ok(vec![
        check("geometry", "fps_matches_brute_force", fps_ok == trials, format!("{fps_ok}/{trials}")),
        check("geometry", "knn_matches_brute_force", knn_ok == trials, format!("{knn_ok}/{trials}")),
        check("geometry", "ball_group_matches_radius_filter", ball_ok == trials, format!("{ball_ok}/{trials}")),
    ])
}

/// Cox–de Boor basis `B_{i,p}(x)` over an explicit knot vector.
pub fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
    if p == 0 {
        return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        v += (x - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, x);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + p + 1] - x) / d2 * cox_de_boor(knots, i + 1, p - 1, x);
    }
    v
}

fn kan_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pou = 0.0f64;
    let mut cdb = 0.0f64;
    for degree in 1..=3 {
        let grid = SplineGrid::new(-1.0, 1.0, 5, degree)?;
        for i in 0..1000 {
            let x = -1.0 + 2.0 * i as f64 / 999.0;
            let s: f64 = bspline_basis(x, &grid)?.iter().sum();
            pou = pou.max((s - 1.0).abs());
        }
        let knots = grid.knots();
        for _ in 0..100 {
            // half-open spans, so stay strictly inside the domain
            let x = rng.gen_range(-1.0..0.999_999);
            let b = bspline_basis(x, &grid)?;
            for (j, v) in b.iter().enumerate() {
                cdb = cdb.max((v - cox_de_boor(&knots, j, degree, x)).abs());
            }
        }
    }
    let grid = SplineGrid::default();
    let mut store = ParamStore::new();
    init_layer(&mut store, "k", 5, 4, &grid, &mut rng)?;
    let params = KanLayerParams::from_store(&store, "k", &grid)?;
    let mut graph_gap = 0.0f64;
    for _ in 0..10 {
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let plain = kan_layer(&x, &params)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&store, false);
        let xv = g.constant(Tensor::new(vec![1, 5], x)?);
        let y = kan_layer_graph(&mut g, &mut p, "k", &grid, xv)?;
        for (a, b) in plain.iter().zip(g.data(y)) {
            graph_gap = graph_gap.max((a - b).abs());
        }
    }
    Ok(vec![
        check("kan", "partition_of_unity", pou < 1e-10, format!("max |Σ−1| = {pou:.2e}")),
        check("kan", "cox_de_boor_agreement", cdb < 1e-12, format!("max gap {cdb:.2e}")),
        check("kan", "layer_graph_matches_plain", graph_gap < 1e-12, format!("max gap {graph_gap:.2e}")),
    ])
}

fn rmm_suite(seed: u64) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    let trials = 100;
    for s in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + s));
        let r_t = rng.gen_range(0..=2usize);
        let frames = 2 * r_t + 1;
        let n = rng.gen_range(8..24);
        let coords: Vec<Vec<Point3>> = (0..frames).map(|_| random_points(&mut rng, n)).collect();
        let views: Vec<&[Point3]> = coords.iter().map(|c| c.as_slice()).collect();
        let anchors = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=8);
        let clip = Clip {
            index: 0,
            anchor_frame: r_t,
            window: (0..frames).map(|f| (f as i64 - r_t as i64, f)).collect(),
        };
        let scoper = build_motionscoper(&views, &clip, anchors, rng.gen_range(0.3..1.2), k, NeighborMode::Radius)?;
        let channels = rng.gen_range(0..3);
        let feats: Vec<Vec<f64>> = (0..frames).map(|_| (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let fviews: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let kernel = Mlp::new("g", &[4 + channels, 6, 5], false);
        let mut store = ParamStore::new();
        kernel.init(&mut store, &mut rng)?;
        let reduce = if s % 2 == 0 { TemporalReduce::Max } else { TemporalReduce::Sum };
        let fast = point_conv_4d_values(&store, &kernel, &scoper, &fviews, channels, reduce)?;
        for (a, row) in fast.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let mut total = match reduce {
                    TemporalReduce::Max => f64::NEG_INFINITY,
                    TemporalReduce::Sum => 0.0,
                };
                for slot in 0..frames {
                    let mut inner = f64::NEG_INFINITY;
                    for j in 0..k {
                        let mut input = scoper.displacement(slot, a, j).to_vec();
                        let src = scoper.neighbor(slot, a, j);
                        input.extend_from_slice(&feats[scoper.slots[slot].1][src * channels..(src + 1) * channels]);
                        inner = inner.max(kernel.eval_row(&store, &input)?[c]);
                    }
                    total = match reduce {
                        TemporalReduce::Max => total.max(inner),
                        TemporalReduce::Sum => total + inner,
                    };
                }
                worst = worst.max((total - v).abs());
            }
        }
    }
    Ok(vec![check(
        "rmm",
        "factored_conv_matches_direct",
        worst < 1e-10,
        format!("max gap {worst:.2e} over {trials} scopers"),
    )])
}

fn mixer_suite(seed: u64) -> Result<Vec<Check>> {
    let exact = tov(0, 2) == -0.5
        && tov(1, 2) == 0.5
        && tov(0, 3) == -0.5
        && tov(1, 3) == 0.0
        && tov(2, 3) == 0.5
        && tov(1, 5) == -0.25
        && (0..5).map(|o| tov(o, 5)).eq([-0.5, -0.25, 0.0, 0.25, 0.5]);
    let symmetric = (1..9).all(|l| (0..l).all(|o| tov(o, l) == -tov(l - 1 - o, l)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MixerConfig::default();
    let width = 6;
    let mut store = ParamStore::new();
    cfg.init(&mut store, "m", width, &mut rng)?;
    let seq: Vec<Vec<f64>> = (0..8).map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let plain = kansmixer_forward(&seq, &cfg, &store, "m")?;
    let mut g = Graph::new();
    let mut p = Binder::new(&store, false);
    let x = g.constant(Tensor::new(vec![seq.len(), width], seq.concat())?);
    let y = kansmixer_graph(&mut g, &mut p, &cfg, "m", x)?;
    let gap = plain.concat().iter().zip(g.data(y)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(vec![
        check("mixer", "tov_closed_forms", exact, "t_l ∈ {2, 3, 5}".into()),
        check("mixer", "tov_symmetric", symmetric, "t_l ∈ 1..9".into()),
        check("mixer", "graph_matches_plain", gap < 1e-10, format!("max gap {gap:.2e}")),
    ])
}

fn model_suite(seed: u64) -> Result<Vec<Check>> {
    let cfg = ModelConfig::toy();
    let mut worst = 0.0f64;
    let mut deterministic = true;
    for m in 0..4 {
        let model = Model::new(cfg.clone(), seed.wrapping_add(m))?;
        let seq = random_sequence(cfg.frames, cfg.points, cfg.channels, seed.wrapping_add(100 + m))?;
        let base = model.forward(&seq)?;
        deterministic &= base == model.forward(&seq)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(200 + m));
        for _ in 0..3 {
            let perms: Vec<Vec<usize>> = seq
                .frames()
                .iter()
                .map(|f| {
                    let mut p: Vec<usize> = (0..f.len()).collect();
                    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
                    p
                })
                .collect();
            let moved = model.forward(&seq.permuted(&perms))?;
            worst = worst.max(base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok(vec![
        check("model", "point_permutation_invariance", worst < 1e-6, format!("max logit change {worst:.2e}")),
        check("model", "forward_is_deterministic", deterministic, String::new()),
    ])
}

fn data_suite(seed: u64) -> Result<Vec<Check>> {
    let seq = random_sequence(5, 17, 2, seed)?;
    let bytes = encode_sequence(&seq, Some(3))?;
    let back = decode_sequence(&bytes)?;
    // stored as 32-bit floats, so compare after the same rounding
    let rounded = back.sequence.frames().iter().zip(seq.frames()).all(|(a, b)| {
        a.coords().iter().zip(b.coords()).all(|(p, q)| p.iter().zip(q).all(|(x, y)| *x == (*y as f32) as f64))
    });
    let again = encode_sequence(&back.sequence, back.label)?;
    let spec = SynthSpec {
        train_per_class: 1,
        test_per_class: 1,
        points: 32,
        frames: 6,
        seed,
        ..SynthSpec::default()
    };
    let a = synth_dataset(&spec, Split::Train)?;
    let b = synth_dataset(&spec, Split::Train)?;
    Ok(vec![
        check("data", "file_roundtrip", rounded && back.label == Some(3) && again == bytes, format!("{} bytes", bytes.len())),
        check("data", "synth_is_deterministic", a == b, format!("{} samples", a.len())),
    ])
}
