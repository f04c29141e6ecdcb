use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use ldfc::dataset::{evaluate, load_dataset, Dataset};
use ldfc::ir::{save_model, ForwardMode, NetworkGraph};
use ldfc::prune::prune_network;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cli::{default_s0_grid, StrArgs, SweepArgs};
use crate::commands::{load, prune_config};
use crate::error::{CliError, Result};
use crate::manifest::{FileKind, Recorder};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub s0: f64,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub run: usize,
    pub s0: f64,
    pub lambda: f64,
    pub seed: u64,
    pub iterations: usize,
    pub batch: usize,
    pub status: String,
    pub total_sparsity: Option<f64>,
    pub mean_loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub model: String,
    pub error: String,
}

/// Cartesian product in s0-major order.
pub fn grid(a: &SweepArgs) -> Vec<Point> {
    let s0s = if a.s0.is_empty() {
        default_s0_grid()
    } else {
        a.s0.clone()
    };
    let base = a.seed.unwrap_or(0);
    let mut points = Vec::new();
    for &s0 in &s0s {
        for &lambda in &a.lambda {
            for r in 0..a.repeats {
                points.push(Point {
                    s0,
                    lambda,
                    seed: base + r,
                });
            }
        }
    }
    points
}

/// A finished run plus the saved model and its runtime, if any.
type Outcome = (Row, Option<(PathBuf, f64)>);

fn run_point(index: usize, p: Point, a: &SweepArgs, graph: &NetworkGraph, eval: Option<&Dataset>) -> Outcome {
    let args = StrArgs {
        s0: p.s0,
        lambda: p.lambda,
        iters: a.iters,
        batch: a.batch,
        lr: a.lr,
        horizon: a.horizon,
        no_s_loss_grad: a.no_s_loss_grad,
    };
    let mut row = Row {
        run: index,
        s0: p.s0,
        lambda: p.lambda,
        seed: p.seed,
        iterations: a.iters,
        batch: a.batch,
        status: "ok".into(),
        total_sparsity: None,
        mean_loss: None,
        accuracy: None,
        model: String::new(),
        error: String::new(),
    };
    let started = std::time::Instant::now();
    let outcome = (|| -> Result<Option<PathBuf>> {
        let (pruned, report) = prune_network(graph, &prune_config(&args, p.seed))?;
        row.total_sparsity = Some(report.total_sparsity);
        row.mean_loss = Some(report.mean_loss);
        if let Some(ds) = eval {
            row.accuracy = Some(evaluate(&pruned, ds, ForwardMode::Float)?.accuracy);
        }
        if a.save_models {
            let name = format!("sweep-{index:03}.ldfc");
            let path = a.out_dir.join(&name);
            save_model(&pruned, &path)?;
            row.model = name;
            return Ok(Some(path));
        }
        Ok(None)
    })();
    let millis = started.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok(path) => (row, path.map(|p| (p, millis))),
        Err(e) => {
            warn!(
                "sweep run {index} (s0 {}, lambda {}, seed {}) failed: {e}",
                p.s0, p.lambda, p.seed
            );
            row.status = "error".into();
            row.error = e.to_string();
            (row, None)
        }
    }
}

pub fn run(a: &SweepArgs, rec: &mut Recorder) -> Result<()> {
    if a.jobs == 0 || a.repeats == 0 || a.lambda.is_empty() {
        return Err(CliError::Usage(
            "sweep needs --jobs >= 1, --repeats >= 1 and at least one lambda".into(),
        ));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::file(&a.out_dir, e))?;
    let graph = load(&a.input, rec)?;
    let eval = match &a.eval {
        Some(path) => {
            rec.input(path, FileKind::Dataset)?;
            Some(load_dataset(path)?)
        }
        None => None,
    };
    let points = grid(a);
    info!("sweep: {} runs on {} workers", points.len(), a.jobs);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new(vec![None; points.len()]);
    thread::scope(|scope| {
        for _ in 0..a.jobs.min(points.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let out = run_point(i, points[i], a, &graph, eval.as_ref());
                results.lock().expect("sweep results lock")[i] = Some(out);
            });
        }
    });
    let results = results.into_inner().expect("sweep results lock");
    let path = a.out_dir.join("frontier.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut failed = 0;
    let mut frontier = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (row, saved) = r.expect("every sweep run reports");
        match row.total_sparsity {
            Some(sp) => frontier.push((row.s0, sp)),
            None => failed += 1,
        }
        w.serialize(&row)?;
        if let Some((model, millis)) = saved {
            rec.record(&format!("sweep/run-{i:03}"), millis);
            rec.output(&model, FileKind::Model)?;
        }
    }
    w.flush().map_err(|e| CliError::file(&path, e))?;
    drop(w);
    rec.output(&path, FileKind::Table)?;
    say!(
        "sweep: {} runs, {} failed, frontier written to {}",
        points.len(),
        failed,
        path.display()
    );
    let distinct = frontier.iter().map(|p| p.0.to_bits()).collect::<BTreeSet<_>>().len();
    if distinct >= 3 {
        let (s0, sp): (Vec<f64>, Vec<f64>) = frontier.into_iter().unzip();
        say!("spearman(s0, sparsity) = {:.3}", spearman(&s0, &sp));
    }
    Ok(())
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx * vy).sqrt()
}
