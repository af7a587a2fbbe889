//! Micro-benchmarks of the main kernels, reported as CSV.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{synth_sample, MotionClass, Split, SynthSpec};
use crate::error::Result;
use crate::geometry::{ball_group, farthest_from_centroid, farthest_point_sample, knn_query};
use crate::kan::{init_layer, kan_layer_graph, SplineGrid};
use crate::model::{Model, ModelConfig};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Graph, Tensor};
use crate::verify::random_points;

/// Fixed CSV header. Every row has exactly these columns.
pub const BENCH_HEADER: &str = "kernel,size,iterations,seconds,throughput,unit";

/// Kernels in report order.
pub const KERNELS: [&str; 6] = ["fps", "knn", "ball_group", "kan_layer", "forward_step", "train_step"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: &'static str,
    /// points, rows or samples handled per iteration
    pub size: usize,
    pub iterations: usize,
    pub seconds: f64,
    pub throughput: f64,
    pub unit: &'static str,
}

fn time(kernel: &'static str, size: usize, per_iter: f64, unit: &'static str, budget: Duration, mut f: impl FnMut() -> Result<()>) -> Result<BenchRow> {
    let start = Instant::now();
    let mut iterations = 0;
    while iterations == 0 || start.elapsed() < budget {
        f()?;
        iterations += 1;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchRow {
        kernel,
        size,
        iterations,
        seconds,
        throughput: per_iter * iterations as f64 / seconds,
        unit,
    })
}

/// Runs every kernel for about `budget` each, on the model `cfg`.
pub fn run_bench(cfg: &ModelConfig, budget: Duration, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1024;
    let pts = random_points(&mut rng, n);
    let centres = random_points(&mut rng, 128);
    let mut rows = Vec::with_capacity(KERNELS.len());

    rows.push(time("fps", n, n as f64, "points/s", budget, || {
        black_box(farthest_point_sample(&pts, 256, farthest_from_centroid(&pts))?);
        Ok(())
    })?);
    rows.push(time("knn", n, n as f64, "points/s", budget, || {
        black_box(knn_query(&pts, &centres, 16)?);
        Ok(())
    })?);
    rows.push(time("ball_group", n, n as f64, "points/s", budget, || {
        black_box(ball_group(&pts, &centres, 0.3, 16)?);
        Ok(())
    })?);

    let grid = SplineGrid::default();
    let mut store = ParamStore::new();
    init_layer(&mut store, "k", 32, 32, &grid, &mut rng)?;
    let batch = 64;
    let input = Tensor::new(vec![batch, 32], (0..batch * 32).map(|i| ((i * 37) % 200) as f64 / 100.0 - 1.0).collect())?;
    rows.push(time("kan_layer", batch, batch as f64, "rows/s", budget, || {
        let mut g = Graph::new();
        let mut p = Binder::new(&store, false);
        let x = g.constant(input.clone());
        black_box(kan_layer_graph(&mut g, &mut p, "k", &grid, x)?);
        Ok(())
    })?);

    let model = Model::new(cfg.clone(), seed)?;
    let spec = SynthSpec {
        frames: cfg.frames,
        points: cfg.points,
        ..SynthSpec::default()
    };
    let seq = synth_sample(&spec, MotionClass::Rotate, Split::Train, 0)?;
    let plan = model.plan(&seq)?;
    rows.push(time("forward_step", 1, 1.0, "steps/s", budget, || {
        black_box(model.forward(&seq)?);
        Ok(())
    })?);
    rows.push(time("train_step", 1, 1.0, "steps/s", budget, || {
        black_box(model.loss_and_grads(&plan, &seq, 1)?);
        Ok(())
    })?);
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6},{}", r.kernel, r.size, r.iterations, r.seconds, r.throughput, r.unit);
    }
    s
}
