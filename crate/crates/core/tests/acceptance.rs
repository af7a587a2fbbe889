//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any of them fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hyperpoint::bench::BENCH_HEADER;
use hyperpoint::config::RunConfig;
use hyperpoint::data::{synth_dataset, PointCloudSequence, Split};
use hyperpoint::geometry::{dist2, farthest_point_sample, knn_query, NeighborMode, Point3, PointCloudFrame};
use hyperpoint::kan::{bspline_basis, SplineGrid};
use hyperpoint::mixer::tov;
use hyperpoint::model::{Ablation, Model, ModelConfig};
use hyperpoint::params::{Mlp, ParamStore};
use hyperpoint::rmm::{build_motionscoper, point_conv_4d_values, Clip, TemporalReduce};
use hyperpoint::train::{train, EpochMetrics, PreparedSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(5 * 60);
const CONV_TOL: f64 = 1e-10;
const UNITY_TOL: f64 = 1e-10;
const COX_DE_BOOR_TOL: f64 = 1e-12;
const PERMUTATION_TOL: f64 = 1e-6;
const GATE_ACCURACY: f64 = 0.90;
const GATE_EPOCHS: usize = 30;
const GATE_BUDGET: Duration = Duration::from_secs(30 * 60);
const GSP_ONLY_CEILING: f64 = 0.45;
const REQUIRED_KERNELS: [&str; 5] = ["fps", "knn", "ball_group", "kan_layer", "forward_step"];

const BIN: &str = env!("CARGO_BIN_EXE_hyperpoint");

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
}

fn gradcheck() -> Outcome {
    let t0 = Instant::now();
    let out = Command::new(BIN).args(["gradcheck", "--scope", "all"]).output().expect("run gradcheck");
    let elapsed = t0.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let worst = stdout
        .lines()
        .filter_map(|l| l.strip_prefix("max rel. error "))
        .last()
        .and_then(|v| v.trim().parse::<f64>().ok());
    match worst {
        Some(w) => outcome(
            out.status.success() && w < GRADCHECK_TOL && elapsed < GRADCHECK_BUDGET,
            format!("max rel. error {w:.3e} in {:.1}s", elapsed.as_secs_f64()),
        ),
        None => outcome(false, format!("no summary line; status {}", out.status)),
    }
}

fn factored_conv() -> Outcome {
    let mut worst = 0.0f64;
    for s in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0 + s);
        let r_t = rng.gen_range(0..=2usize);
        let frames = 2 * r_t + 1;
        let n = rng.gen_range(6..20);
        let coords: Vec<Vec<Point3>> = (0..frames).map(|_| points(&mut rng, n)).collect();
        let views: Vec<&[Point3]> = coords.iter().map(|c| c.as_slice()).collect();
        let anchors = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=8);
        let clip = Clip {
            index: 0,
            anchor_frame: r_t,
            window: (0..frames).map(|f| (f as i64 - r_t as i64, f)).collect(),
        };
        let scoper = build_motionscoper(&views, &clip, anchors, rng.gen_range(0.3..1.2), k, NeighborMode::Radius).unwrap();
        let channels = rng.gen_range(0..3);
        let feats: Vec<Vec<f64>> = (0..frames).map(|_| (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let fviews: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let kernel = Mlp::new("g", &[4 + channels, 5, 3], false);
        let mut store = ParamStore::new();
        kernel.init(&mut store, &mut rng).unwrap();
        let reduce = if s % 2 == 0 { TemporalReduce::Max } else { TemporalReduce::Sum };
        let fast = point_conv_4d_values(&store, &kernel, &scoper, &fviews, channels, reduce).unwrap();
        // direct sum over every (frame, neighbour) pair of the kernel applied
        // to the displacement and the neighbour's features
        for (a, row) in fast.iter().enumerate() {
            let mut per_frame: Vec<Vec<f64>> = Vec::new();
            for slot in 0..frames {
                let mut best = vec![f64::NEG_INFINITY; row.len()];
                for j in 0..k {
                    let mut input = scoper.displacement(slot, a, j).to_vec();
                    let src = scoper.neighbor(slot, a, j);
                    input.extend_from_slice(&feats[scoper.slots[slot].1][src * channels..(src + 1) * channels]);
                    for (b, v) in best.iter_mut().zip(kernel.eval_row(&store, &input).unwrap()) {
                        *b = b.max(v);
                    }
                }
                per_frame.push(best);
            }
            for (c, &v) in row.iter().enumerate() {
                let column = per_frame.iter().map(|f| f[c]);
                let direct = match reduce {
                    TemporalReduce::Max => column.fold(f64::NEG_INFINITY, f64::max),
                    TemporalReduce::Sum => column.sum(),
                };
                worst = worst.max((direct - v).abs());
            }
        }
    }
    outcome(worst < CONV_TOL, format!("max gap {worst:.2e} over 100 scopers"))
}

fn cox_de_boor(t: &[f64], i: usize, p: usize, x: f64) -> f64 {
    if p == 0 {
        return f64::from(u8::from(t[i] <= x && x < t[i + 1]));
    }
    let left = if t[i + p] > t[i] { (x - t[i]) / (t[i + p] - t[i]) * cox_de_boor(t, i, p - 1, x) } else { 0.0 };
    let right = if t[i + p + 1] > t[i + 1] {
        (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(t, i + 1, p - 1, x)
    } else {
        0.0
    };
    left + right
}

fn splines() -> Outcome {
    let mut unity = 0.0f64;
    let mut agreement = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for degree in 1..=3 {
        let grid = SplineGrid::new(-1.0, 1.0, 5, degree).unwrap();
        for i in 0..1000 {
            let x = -1.0 + 2.0 * i as f64 / 999.0;
            unity = unity.max((bspline_basis(x, &grid).unwrap().iter().sum::<f64>() - 1.0).abs());
        }
        let h = 2.0 / 5.0;
        let knots: Vec<f64> = (0..5 + 2 * degree + 1).map(|j| -1.0 + (j as f64 - degree as f64) * h).collect();
        for _ in 0..100 {
            let x = rng.gen_range(-1.0..0.999);
            for (j, b) in bspline_basis(x, &grid).unwrap().iter().enumerate() {
                agreement = agreement.max((b - cox_de_boor(&knots, j, degree, x)).abs());
            }
        }
    }
    outcome(
        unity < UNITY_TOL && agreement < COX_DE_BOOR_TOL,
        format!("max |sum-1| {unity:.2e}, max Cox-de Boor gap {agreement:.2e}"),
    )
}

fn order_values() -> Outcome {
    let expected: [(usize, &[f64]); 3] = [(2, &[-0.5, 0.5]), (3, &[-0.5, 0.0, 0.5]), (5, &[-0.5, -0.25, 0.0, 0.25, 0.5])];
    let exact = expected.iter().all(|(l, vals)| (0..*l).map(|o| tov(o, *l)).eq(vals.iter().copied()));
    outcome(exact, "t_l in {2, 3, 5}".into())
}

fn brute_fps(p: &[Point3], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    let mut d: Vec<f64> = p.iter().map(|q| dist2(q, &p[start])).collect();
    while chosen.len() < k {
        let mut best = usize::MAX;
        for i in 0..p.len() {
            if !chosen.contains(&i) && (best == usize::MAX || d[i] > d[best]) {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..p.len() {
            d[i] = d[i].min(dist2(&p[i], &p[best]));
        }
    }
    chosen
}

fn sampling() -> Outcome {
    let (mut fps_ok, mut knn_ok) = (0, 0);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.gen_range(1..=64);
        let p = points(&mut rng, n);
        let k = rng.gen_range(1..=n);
        let start = rng.gen_range(0..n);
        fps_ok += usize::from(farthest_point_sample(&p, k, start).unwrap() == brute_fps(&p, k, start));
        let q = points(&mut rng, 5);
        let got = knn_query(&p, &q, k).unwrap();
        let all_match = q.iter().enumerate().all(|(m, c)| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dist2(&p[a], c).total_cmp(&dist2(&p[b], c)).then(a.cmp(&b)));
            got[m * k..(m + 1) * k] == order[..k]
        });
        knn_ok += usize::from(all_match);
    }
    outcome(fps_ok == 50 && knn_ok == 50, format!("fps {fps_ok}/50, knn {knn_ok}/50"))
}

fn permutation_invariance() -> Outcome {
    let cfg = ModelConfig::default();
    let mut worst = 0.0f64;
    for m in 0..20u64 {
        let model = Model::new(cfg.clone(), 40 + m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + m);
        let frames: Vec<Vec<Point3>> = (0..cfg.frames).map(|_| points(&mut rng, cfg.points)).collect();
        let seq = |f: &[Vec<Point3>]| PointCloudSequence::new(f.iter().map(|c| PointCloudFrame::new(c.clone()).unwrap()).collect()).unwrap();
        let base = model.forward(&seq(&frames)).unwrap();
        for _ in 0..5 {
            let moved: Vec<Vec<Point3>> = frames
                .iter()
                .map(|f| {
                    let mut idx: Vec<usize> = (0..f.len()).collect();
                    idx.shuffle(&mut rng);
                    idx.iter().map(|&i| f[i]).collect()
                })
                .collect();
            let logits = model.forward(&seq(&moved)).unwrap();
            worst = worst.max(base.iter().zip(&logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    outcome(worst < PERMUTATION_TOL, format!("max logit change {worst:.2e} over 20 models x 5 permutations"))
}

fn gate() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = GATE_EPOCHS;
    cfg.train.seed = 7;
    cfg.synth.seed = 7;
    let train_data = synth_dataset(&cfg.synth, Split::Train).unwrap();
    let test_data = synth_dataset(&cfg.synth, Split::Test).unwrap();
    assert_eq!((train_data.len(), test_data.len()), (400, 100));
    assert_eq!((cfg.synth.frames, cfg.synth.points), (24, 256));

    let best_test = |metrics: &[EpochMetrics]| metrics.iter().filter(|r| r.split == "test").map(|r| r.accuracy).fold(0.0, f64::max);
    let progress = |tag: &'static str| {
        move |_: &Model, rows: &[EpochMetrics]| {
            for r in rows.iter().filter(|r| r.split == "test") {
                eprintln!("  [{tag}] epoch {:>2} test accuracy {:.3}", r.epoch, r.accuracy);
            }
            true
        }
    };

    let t0 = Instant::now();
    let train_set = PreparedSet::new(&cfg.model, &train_data).unwrap();
    let test_set = PreparedSet::new(&cfg.model, &test_data).unwrap();
    let full_cfg = hyperpoint::train::TrainConfig {
        target_accuracy: Some(GATE_ACCURACY),
        ..cfg.train.clone()
    };
    let mut hook = progress("full");
    let (_, full) = train(&cfg.model, &full_cfg, &train_set, Some(&test_set), Some(&mut hook)).unwrap();
    let elapsed = t0.elapsed();
    let full_best = best_test(&full);
    let epochs = full.iter().map(|r| r.epoch).max().unwrap_or(0);

    let gsp_model = ModelConfig {
        ablation: Ablation::GspOnly,
        ..cfg.model.clone()
    };
    let gsp_train = PreparedSet::new(&gsp_model, &train_data).unwrap();
    let gsp_test = PreparedSet::new(&gsp_model, &test_data).unwrap();
    let mut hook = progress("gsp-only");
    let (_, gsp) = train(&gsp_model, &cfg.train, &gsp_train, Some(&gsp_test), Some(&mut hook)).unwrap();
    let gsp_best = best_test(&gsp);

    outcome(
        full_best >= GATE_ACCURACY && epochs <= GATE_EPOCHS && elapsed < GATE_BUDGET && gsp_best < GSP_ONLY_CEILING,
        format!(
            "full {full_best:.3} after {epochs} epochs in {:.0}s; gsp-only best {gsp_best:.3} over {} epochs",
            elapsed.as_secs_f64(),
            GATE_EPOCHS
        ),
    )
}

const SMALL_RUN: &str = r#"
version = 1

[train]
epochs = 1
seed = 3

[synth]
train_per_class = 2
test_per_class = 1
"#;

fn train_once(dir: &Path, config: &Path) -> (Vec<u8>, Vec<u8>) {
    let status = Command::new(BIN)
        .args(["train", "--config"])
        .arg(config)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("run train")
        .status;
    assert!(status.success(), "train exited with {status}");
    (std::fs::read(dir.join("metrics.csv")).unwrap(), std::fs::read(dir.join("model.ckpt")).unwrap())
}

fn reproducible_training() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("run.toml");
    std::fs::write(&config, SMALL_RUN).unwrap();
    let a = train_once(&root.path().join("a"), &config);
    let b = train_once(&root.path().join("b"), &config);
    let has_epoch_one = String::from_utf8_lossy(&a.0).lines().any(|l| l.starts_with("1,"));
    outcome(
        has_epoch_one && a == b,
        format!("metrics {} bytes, checkpoint {} bytes, identical: {}", a.0.len(), a.1.len(), a == b),
    )
}

fn bench_once(dir: &Path) -> Option<String> {
    let out = Command::new(BIN).args(["bench", "--seconds", "0.2", "--out"]).arg(dir).output().ok()?;
    out.status.success().then(|| std::fs::read_to_string(dir.join("bench.csv")).ok()).flatten()
}

fn bench() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let (Some(a), Some(b)) = (bench_once(&root.path().join("a")), bench_once(&root.path().join("b"))) else {
        return outcome(false, "bench failed".into());
    };
    let schema = |csv: &str| -> Option<Vec<(String, String, String)>> {
        let mut lines = csv.lines();
        if lines.next()? != BENCH_HEADER {
            return None;
        }
        lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let numeric = f.len() == 6 && f[1].parse::<usize>().is_ok() && f[2].parse::<usize>().is_ok() && f[3].parse::<f64>().is_ok() && f[4].parse::<f64>().is_ok();
                numeric.then(|| (f[0].to_string(), f[1].to_string(), f[5].to_string()))
            })
            .collect()
    };
    match (schema(&a), schema(&b)) {
        (Some(sa), Some(sb)) => {
            let covered = REQUIRED_KERNELS.iter().all(|k| sa.iter().any(|r| r.0 == *k));
            outcome(covered && sa == sb, format!("{} rows, required kernels present: {covered}, stable: {}", sa.len(), sa == sb))
        }
        _ => outcome(false, "header or row format mismatch".into()),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradcheck_all_scopes", gradcheck),
        ("factored_4d_conv_matches_direct", factored_conv),
        ("bspline_unity_and_cox_de_boor", splines),
        ("temporal_order_values_exact", order_values),
        ("fps_and_knn_match_brute_force", sampling),
        ("point_permutation_invariance", permutation_invariance),
        ("training_is_reproducible", reproducible_training),
        ("bench_csv_schema", bench),
        ("synthetic_accuracy_gate", gate),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t0 = Instant::now();
        let o = run();
        println!("{} {name}: {} [{:.1}s]", if o.passed { "PASS" } else { "FAIL" }, o.detail, t0.elapsed().as_secs_f64());
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
