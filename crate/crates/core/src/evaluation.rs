//! One-shot rollouts, error metrics, per-parameter tables and the
//! interpretability export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{fuse, LibraryError};
use crate::model::Model;
use crate::operator::ModelError;
use crate::pde::{Boundary, Dataset, GridSpec, Split};
use crate::tensor::fft::fft_real_full;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `[steps + 1, V, X(, Y)]`; index 0 is the given initial state.
    pub predicted: Tensor,
    pub params: Vec<f64>,
    /// First snapshot index holding a non-finite value, if any.
    pub blow_up: Option<usize>,
}

impl RolloutResult {
    /// Number of leading snapshots that are finite.
    pub fn finite_len(&self) -> usize {
        self.blow_up.unwrap_or(self.predicted.shape()[0])
    }
}

/// Rolls out a batch: `u0 [B, V, S..]`, `beta [B, P]`. Only the initial
/// states and parameters enter the model; every later input is the model's
/// own previous output.
pub fn rollout_batch(model: &Model, u0: &Tensor, beta: &Tensor, steps: usize) -> Result<Vec<RolloutResult>> {
    let b = u0.shape()[0];
    let state_shape = u0.shape()[1..].to_vec();
    let per: usize = state_shape.iter().product();
    let p = if b == 0 { 0 } else { beta.numel() / b };
    let mut traj: Vec<Vec<f64>> = (0..b).map(|i| u0.data()[i * per..(i + 1) * per].to_vec()).collect();
    let mut blow_up: Vec<Option<usize>> = (0..b)
        .map(|i| traj[i].iter().any(|v| !v.is_finite()).then_some(0))
        .collect();
    let mut current = u0.clone();
    for step in 1..=steps {
        let next = model.predict_checked(&current, beta, false)?;
        for i in 0..b {
            let row = &next.data()[i * per..(i + 1) * per];
            if blow_up[i].is_none() && row.iter().any(|v| !v.is_finite()) {
                blow_up[i] = Some(step);
            }
            traj[i].extend_from_slice(row);
        }
        current = next;
    }
    let mut shape = vec![steps + 1];
    shape.extend_from_slice(&state_shape);
    traj.into_iter()
        .enumerate()
        .map(|(i, data)| {
            Ok(RolloutResult {
                predicted: Tensor::new(shape.clone(), data)?,
                params: beta.data()[i * p..(i + 1) * p].to_vec(),
                blow_up: blow_up[i],
            })
        })
        .collect()
}

/// Rollout of a single trajectory from `u0 [V, S..]`.
pub fn rollout(model: &Model, u0: &Tensor, beta: &[f64], steps: usize) -> Result<RolloutResult> {
    let mut shape = vec![1];
    shape.extend_from_slice(u0.shape());
    let u = u0.clone().reshape(&shape)?;
    let b = Tensor::new(vec![1, beta.len()], beta.to_vec())?;
    Ok(rollout_batch(model, &u, &b, steps)?.remove(0))
}

/// The six error metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub boundary_rmse: f64,
    pub nrmse: f64,
    pub max_error: f64,
    pub conserved_error: f64,
    pub fourier_rmse: f64,
}

pub const NRMSE_EPS: f64 = 1e-8;

/// Per-sample sums from which the batch metrics are assembled.
#[derive(Debug, Clone, Copy)]
struct SampleStats {
    mse: f64,
    true_ms: f64,
    boundary_mse: f64,
    max_abs: f64,
    conserved_sq: f64,
    fourier_mse: f64,
}

fn is_boundary(flat: usize, spatial: &[usize]) -> bool {
    match spatial {
        [n] => flat == 0 || flat == n - 1,
        [nx, ny] => {
            let (i, j) = (flat / ny, flat % ny);
            i == 0 || i == nx - 1 || j == 0 || j == ny - 1
        }
        _ => false,
    }
}

/// `pred`, `truth`: `[snapshots, V, S..]` of one sample, compared over
/// snapshots `1..`.
fn sample_stats(pred: &Tensor, truth: &Tensor) -> SampleStats {
    let shape = truth.shape();
    let spatial = &shape[2..];
    let s: usize = spatial.iter().product();
    let v = shape[1];
    let t = shape[0];
    let window = &truth.data()[v * s..];
    let pw = &pred.data()[v * s..t * v * s];
    let n = window.len().max(1) as f64;

    let mut sq = 0.0;
    let mut tsq = 0.0;
    let mut bsq = 0.0;
    let mut bcount = 0usize;
    let mut max_abs: f64 = 0.0;
    for (k, (&p, &q)) in pw.iter().zip(window).enumerate() {
        let d = p - q;
        sq += d * d;
        tsq += q * q;
        max_abs = max_abs.max(d.abs());
        if is_boundary(k % s, spatial) {
            bsq += d * d;
            bcount += 1;
        }
    }
    let mut conserved_sq = 0.0;
    for field in 0..(t - 1) * v {
        let range = field * s..(field + 1) * s;
        let c: f64 = pw[range.clone()].iter().sum::<f64>() - window[range].iter().sum::<f64>();
        conserved_sq += c * c;
    }
    let diff: Vec<f64> = pw.iter().zip(window).map(|(p, q)| p - q).collect();
    let spectrum: Vec<Complex64> = fft_real_full(&diff, spatial);
    let fourier_mse = spectrum.iter().map(|c| c.norm_sqr()).sum::<f64>() / n;
    SampleStats {
        mse: sq / n,
        true_ms: tsq / n,
        boundary_mse: bsq / bcount.max(1) as f64,
        max_abs,
        conserved_sq,
        fourier_mse,
    }
}

fn combine(stats: &[SampleStats]) -> MetricsReport {
    let n = stats.len().max(1) as f64;
    let mean = |f: fn(&SampleStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    let rmse = mean(|s| s.mse).sqrt();
    MetricsReport {
        rmse,
        boundary_rmse: mean(|s| s.boundary_mse).sqrt(),
        nrmse: rmse / (mean(|s| s.true_ms).sqrt() + NRMSE_EPS),
        max_error: stats.iter().fold(0.0, |m, s| m.max(s.max_abs)),
        conserved_error: mean(|s| s.conserved_sq).sqrt(),
        fourier_rmse: mean(|s| s.fourier_mse).sqrt(),
    }
}

fn check_pair(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() || truth.rank() < 4 || !(1..=2).contains(&(truth.rank() - 3)) {
        return Err(EvalError::Shape(format!(
            "metrics need matching [N, T+1, V, X(, Y)] arrays, got {:?} and {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if truth.shape()[1] < 2 {
        return Err(EvalError::Shape("metrics need at least one snapshot after t=0".into()));
    }
    Ok(())
}

/// Metrics over a batch `[N, T+1, V, X(, Y)]`, excluding the shared
/// snapshot at t=0.
///
/// * RMSE: root of the sample mean of per-entry mean squared error.
/// * nRMSE: RMSE divided by the same norm of the truth plus `1e-8`.
/// * boundary RMSE: RMSE over the first and last index of each spatial axis.
/// * max error: largest absolute deviation.
/// * conserved error: spatial sums differenced per snapshot and variable,
///   L2 over those per sample, RMS over samples.
/// * Fourier RMSE: RMSE of the unnormalized spatial DFT, averaged over bins.
pub fn compute_metrics(pred: &Tensor, truth: &Tensor) -> Result<MetricsReport> {
    check_pair(pred, truth)?;
    let stats: Vec<SampleStats> = (0..truth.shape()[0])
        .map(|i| sample_stats(&pred.index_outer(i), &truth.index_outer(i)))
        .collect();
    Ok(combine(&stats))
}

/// Metrics of one sample `[T+1, V, X(, Y)]`.
pub fn sample_metrics(pred: &Tensor, truth: &Tensor) -> Result<MetricsReport> {
    let lift = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshape(&s)
    };
    compute_metrics(&lift(pred)?, &lift(truth)?)
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    });
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEvaluation {
    pub index: usize,
    pub params: Vec<f64>,
    pub metrics: MetricsReport,
    /// Snapshot index at which the rollout stopped being finite.
    pub blow_up: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub split: Split,
    pub aggregate: MetricsReport,
    pub trajectories: Vec<TrajectoryEvaluation>,
}

const ROLLOUT_CHUNK: usize = 32;

/// Rolls out every trajectory of `ds` from its initial state alone and
/// scores it. Samples that blow up are scored on their finite prefix.
pub fn evaluate_dataset(model: &Model, ds: &Dataset) -> Result<(DatasetEvaluation, Vec<RolloutResult>)> {
    if ds.is_empty() {
        return Err(EvalError::Invalid("cannot evaluate an empty dataset".into()));
    }
    let steps = ds.manifest.grid.steps();
    let chunks: Vec<Vec<usize>> = (0..ds.len())
        .collect::<Vec<_>>()
        .chunks(ROLLOUT_CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let rollouts: Vec<Vec<RolloutResult>> = chunks
        .par_iter()
        .map(|rows| {
            let u0: Vec<Tensor> = rows.iter().map(|&i| ds.trajectories[i].initial_state()).collect();
            let beta: Vec<f64> = rows.iter().flat_map(|&i| ds.trajectories[i].params.clone()).collect();
            let p = ds.trajectories[rows[0]].params.len();
            rollout_batch(
                model,
                &Tensor::stack(&u0)?,
                &Tensor::new(vec![rows.len(), p], beta)?,
                steps,
            )
        })
        .collect::<Result<_>>()?;
    let rollouts: Vec<RolloutResult> = rollouts.into_iter().flatten().collect();

    let mut stats = Vec::with_capacity(ds.len());
    let mut per = Vec::with_capacity(ds.len());
    for (i, (r, t)) in rollouts.iter().zip(&ds.trajectories).enumerate() {
        let keep = r.finite_len();
        let s = if keep < 2 {
            SampleStats {
                mse: f64::INFINITY,
                true_ms: 0.0,
                boundary_mse: f64::INFINITY,
                max_abs: f64::INFINITY,
                conserved_sq: f64::INFINITY,
                fourier_mse: f64::INFINITY,
            }
        } else {
            let cut = |x: &Tensor| {
                let per: usize = x.shape()[1..].iter().product();
                let mut shape = x.shape().to_vec();
                shape[0] = keep;
                Tensor::new(shape, x.data()[..keep * per].to_vec())
            };
            sample_stats(&cut(&r.predicted)?, &cut(&t.states)?)
        };
        stats.push(s);
        per.push(TrajectoryEvaluation {
            index: i,
            params: t.params.clone(),
            metrics: combine(&[s]),
            blow_up: r.blow_up,
        });
    }
    Ok((
        DatasetEvaluation {
            split: ds.split(),
            aggregate: combine(&stats),
            trajectories: per,
        },
        rollouts,
    ))
}

/// One row of the per-parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub equation: String,
    pub model: String,
    pub seed: u64,
    pub params: Vec<f64>,
    pub split: Split,
    pub rmse: f64,
}

/// Per-split mean and spread of the seed-level RMSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub equation: String,
    pub model: String,
    pub split: Split,
    pub seeds: usize,
    pub mean_rmse: f64,
    pub std_rmse: Option<f64>,
}

/// Builds per-trajectory rows from `(equation, model, seed, evaluation)`
/// entries, plus the per-split summary across seeds. A seed's RMSE is the
/// aggregate RMSE of its split.
pub fn per_parameter_report(
    runs: &[(String, String, u64, DatasetEvaluation)],
) -> (Vec<ParameterRow>, Vec<SplitSummary>) {
    let mut rows = Vec::new();
    let mut groups: BTreeMap<(String, String, Split), Vec<f64>> = BTreeMap::new();
    for (equation, model, seed, ev) in runs {
        for t in &ev.trajectories {
            rows.push(ParameterRow {
                equation: equation.clone(),
                model: model.clone(),
                seed: *seed,
                params: t.params.clone(),
                split: ev.split,
                rmse: t.metrics.rmse,
            });
        }
        groups
            .entry((equation.clone(), model.clone(), ev.split))
            .or_default()
            .push(ev.aggregate.rmse);
    }
    let summary = groups
        .into_iter()
        .map(|((equation, model, split), v)| {
            let (mean_rmse, std_rmse) = mean_std(&v);
            SplitSummary {
                equation,
                model,
                split,
                seeds: v.len(),
                mean_rmse,
                std_rmse,
            }
        })
        .collect();
    (rows, summary)
}

/// Writes the per-trajectory table with one column per parameter.
pub fn write_parameter_csv(path: &Path, param_names: &[&str], rows: &[ParameterRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["equation", "model", "seed"];
    header.extend_from_slice(param_names);
    header.extend(["split", "rmse"]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.equation.clone(), r.model.clone(), r.seed.to_string()];
        rec.extend(r.params.iter().map(|v| v.to_string()));
        rec.push(r.split.name().into());
        rec.push(r.rmse.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SplitSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["equation", "model", "split", "seeds", "mean_rmse", "std_rmse"])?;
    for r in rows {
        w.write_record([
            r.equation.clone(),
            r.model.clone(),
            r.split.name().to_string(),
            r.seeds.to_string(),
            r.mean_rmse.to_string(),
            r.std_rmse.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Neighbour index `i + delta` on an axis of length `n`. Periodic grids
/// wrap; no-flow grids reflect about the outer cell faces.
fn neighbor(i: usize, n: usize, delta: isize, boundary: Boundary) -> usize {
    let j = i as isize + delta;
    let n = n as isize;
    match boundary {
        Boundary::Periodic => j.rem_euclid(n) as usize,
        Boundary::NeumannNoFlow => {
            if j < 0 {
                (-j - 1) as usize
            } else if j >= n {
                (2 * n - j - 1) as usize
            } else {
                j as usize
            }
        }
    }
}

/// Fourth-order central differences (first and second derivative) of a
/// field `[X(, Y)]` along `axis`.
pub fn central_differences(
    field: &[f64],
    spatial: &[usize],
    axis: usize,
    dx: f64,
    boundary: Boundary,
) -> (Vec<f64>, Vec<f64>) {
    let s: usize = spatial.iter().product();
    let n = spatial[axis];
    let stride: usize = spatial[axis + 1..].iter().product();
    let mut d1 = Vec::with_capacity(s);
    let mut d2 = Vec::with_capacity(s);
    for flat in 0..s {
        let i = (flat / stride) % n;
        let base = flat - i * stride;
        let f = |delta: isize| field[base + neighbor(i, n, delta, boundary) * stride];
        let (m2, m1, c, p1, p2) = (f(-2), f(-1), f(0), f(1), f(2));
        d1.push((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * dx));
        d2.push((-m2 + 16.0 * m1 - 30.0 * c + 16.0 * p1 - p2) / (12.0 * dx * dx));
    }
    (d1, d2)
}

/// Pearson correlation; zero when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Everything the interpretability dump contains, per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpretation {
    pub arrays: Vec<(String, Tensor)>,
    pub summary: InterpretSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretSummary {
    pub params: Vec<f64>,
    /// Per state variable: correlation of the parameter-dependent residual
    /// with `-d/dx u`.
    pub corr_param_dependent_vs_neg_dx: Vec<f64>,
    pub rms_param_dependent: Vec<f64>,
    pub rms_param_independent: Vec<f64>,
}

/// Decomposes one late-fusion step from `u0 [V, S..]`.
pub fn interpret(
    model: &Model,
    u0: &Tensor,
    beta: &[f64],
    grid: &GridSpec,
    boundary: Boundary,
) -> Result<Interpretation> {
    let lf = model
        .as_late_fusion()
        .ok_or_else(|| EvalError::Invalid("interpretation needs a late-fusion model".into()))?;
    let g = Graph::with_checks(true);
    let mut shape = vec![1];
    shape.extend_from_slice(u0.shape());
    let uv = g.constant(u0.clone().reshape(&shape)?);
    let vars: Vec<Var> = lf.backbone.params.iter().map(|p| g.constant(p.clone())).collect();
    let hidden = lf.backbone.forward(&g, &vars, uv)?;
    let xi = g.constant(lf.xi.clone());
    let bt = Tensor::new(vec![1, beta.len()], beta.to_vec())?;
    let (theta, dep, indep, residual) = fuse(&g, &lf.library, xi, hidden, &bt)?;
    let unbatch = |v: Var| -> Result<Tensor> {
        let t = g.value(v).clone();
        let s = t.shape()[1..].to_vec();
        Ok(t.reshape(&s)?)
    };
    let (dep_t, indep_t) = (unbatch(dep)?, unbatch(indep)?);

    let spatial = u0.shape()[1..].to_vec();
    let s: usize = spatial.iter().product();
    let nv = u0.shape()[0];
    let mut arrays = vec![
        ("u0".to_string(), u0.clone()),
        ("hidden".to_string(), unbatch(hidden)?),
        ("theta".to_string(), unbatch(theta)?),
        ("xi".to_string(), lf.xi.clone()),
        ("param_dependent".to_string(), dep_t.clone()),
        ("param_independent".to_string(), indep_t.clone()),
        ("residual".to_string(), unbatch(residual)?),
    ];
    let mut dx_fields = Vec::new();
    let mut names: Vec<&str> = Vec::new();
    let mut derivs: Vec<Vec<f64>> = Vec::new();
    match spatial.len() {
        1 => {
            names.extend(["dudx", "d2udx2"]);
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for v in 0..nv {
                let (d1, d2) = central_differences(&u0.data()[v * s..(v + 1) * s], &spatial, 0, grid.dx(0), boundary);
                dx_fields.push(d1.clone());
                a.extend(d1);
                b.extend(d2);
            }
            derivs.extend([a, b]);
        }
        _ => {
            names.extend(["dudx", "dudy", "laplacian"]);
            let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
            for v in 0..nv {
                let f = &u0.data()[v * s..(v + 1) * s];
                let (dx1, dx2) = central_differences(f, &spatial, 0, grid.dx(0), boundary);
                let (dy1, dy2) = central_differences(f, &spatial, 1, grid.dx(1), boundary);
                dx_fields.push(dx1.clone());
                a.extend(dx1);
                b.extend(dy1);
                c.extend(dx2.iter().zip(&dy2).map(|(p, q)| p + q));
            }
            derivs.extend([a, b, c]);
        }
    }
    for (name, data) in names.iter().zip(derivs) {
        arrays.push((name.to_string(), Tensor::new(u0.shape().to_vec(), data)?));
    }
    let mut corr = Vec::new();
    let mut rd = Vec::new();
    let mut ri = Vec::new();
    for v in 0..nv {
        let d = &dep_t.data()[v * s..(v + 1) * s];
        let neg: Vec<f64> = dx_fields[v].iter().map(|x| -x).collect();
        corr.push(pearson(d, &neg));
        rd.push(rms(d));
        ri.push(rms(&indep_t.data()[v * s..(v + 1) * s]));
    }
    Ok(Interpretation {
        arrays,
        summary: InterpretSummary {
            params: beta.to_vec(),
            corr_param_dependent_vs_neg_dx: corr,
            rms_param_dependent: rd,
            rms_param_independent: ri,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayIndexEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    dtype: String,
}

/// Writes each array as `<name>.bin` (little-endian f64) plus `index.json`.
pub fn interpret_export(
    model: &Model,
    u0: &Tensor,
    beta: &[f64],
    grid: &GridSpec,
    boundary: Boundary,
    dir: &Path,
) -> Result<InterpretSummary> {
    let it = interpret(model, u0, beta, grid, boundary)?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, t) in &it.arrays {
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        entries.push(ArrayIndexEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
            dtype: "float64".into(),
        });
    }
    let index = serde_json::json!({
        "arrays": entries,
        "library": model.as_late_fusion().map(|m| m.library.to_string()),
        "summary": it.summary,
    });
    let text = serde_json::to_string_pretty(&index).map_err(|e| EvalError::Invalid(e.to_string()))?;
    fs::write(dir.join("index.json"), text + "\n")?;
    Ok(it.summary)
}
