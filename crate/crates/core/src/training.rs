//! Single-step training with the data + L1 objective, the halving learning
//! rate schedule, a trajectory-level validation split, and the sparsity sweep.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelKind};
use crate::operator::ModelError;
use crate::pde::{Dataset, Preset};
use crate::tensor::{lr_at_epoch, Adam, AdamConfig, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        report: Box<TrainReport>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_halving_epoch: usize,
    pub batch_size: usize,
    pub lambda_sparse: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 100,
            initial_lr: 1e-3,
            lr_halving_epoch: 50,
            batch_size: 32,
            lambda_sparse: 1e-4,
            validation_fraction: 0.1,
            seed: 0,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
        }
    }
}

impl TrainConfig {
    /// Full schedule, or the shortened desk schedule (50 epochs, halving at 25).
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            ..Self::default()
        };
        if preset == Preset::Desk {
            cfg.epochs = 50;
            cfg.lr_halving_epoch = 25;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.lambda_sparse >= 0.0 && self.lambda_sparse.is_finite()) {
            return Err(TrainError::Config(format!(
                "lambda_sparse {} must be >= 0",
                self.lambda_sparse
            )));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "initial_lr {} must be > 0",
                self.initial_lr
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.initial_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    pub sparse: f64,
}

/// `L_data` = mean squared error over all entries, `L_sparse` = sum of
/// absolute coefficients, `total = L_data + lambda * L_sparse`.
pub fn compute_loss(pred: &Tensor, truth: &Tensor, xi: Option<&Tensor>, lambda: f64) -> Result<LossParts> {
    if pred.shape() != truth.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "compute_loss",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        }
        .into());
    }
    let g = Graph::with_checks(true);
    let p = g.constant(pred.clone());
    let t = g.constant(truth.clone());
    let xi = xi.map(|x| g.constant(x.clone()));
    let (total, data, sparse) = loss_graph(&g, p, t, xi, lambda)?;
    let read = |v: Var| g.value(v).item();
    Ok(LossParts {
        total: read(total),
        data: read(data),
        sparse: read(sparse),
    })
}

/// Graph version of [`compute_loss`]; returns `(total, data, sparse)`.
pub fn loss_graph(g: &Graph, pred: Var, truth: Var, xi: Option<Var>, lambda: f64) -> Result<(Var, Var, Var)> {
    let diff = g.sub(pred, truth)?;
    let data = g.mean_all(g.powi(diff, 2)?)?;
    let sparse = match xi {
        Some(x) => g.sum_all(g.abs(x)?)?,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let total = g.add(data, g.scale(sparse, lambda)?)?;
    Ok((total, data, sparse))
}

/// Consecutive snapshot pairs `(u_n, u_{n+1})` of selected trajectories,
/// addressed by `(trajectory, n)`.
#[derive(Debug, Clone)]
pub struct TransitionPairs<'a> {
    ds: &'a Dataset,
    pub index: Vec<(usize, usize)>,
}

impl<'a> TransitionPairs<'a> {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn snapshot(&self, traj: usize, n: usize) -> &'a [f64] {
        let states = &self.ds.trajectories[traj].states;
        let per: usize = states.shape()[1..].iter().product();
        &states.data()[n * per..(n + 1) * per]
    }

    pub fn input(&self, i: usize) -> &'a [f64] {
        let (t, n) = self.index[i];
        self.snapshot(t, n)
    }

    pub fn target(&self, i: usize) -> &'a [f64] {
        let (t, n) = self.index[i];
        self.snapshot(t, n + 1)
    }

    pub fn params(&self, i: usize) -> &'a [f64] {
        &self.ds.trajectories[self.index[i].0].params
    }

    /// Stacks the pairs at `rows` into `(u [B, V, S..], target, beta [B, P])`.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let state_shape = self.ds.trajectories[0].states.shape()[1..].to_vec();
        let p = self.ds.trajectories[0].params.len();
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&state_shape);
        let mut u = Vec::new();
        let mut y = Vec::new();
        let mut b = Vec::with_capacity(rows.len() * p);
        for &r in rows {
            u.extend_from_slice(self.input(r));
            y.extend_from_slice(self.target(r));
            b.extend_from_slice(self.params(r));
        }
        Ok((
            Tensor::new(shape.clone(), u)?,
            Tensor::new(shape, y)?,
            Tensor::new(vec![rows.len(), p], b)?,
        ))
    }
}

/// All transition pairs of the listed trajectories, in trajectory order.
pub fn transition_pairs<'a>(ds: &'a Dataset, trajectories: &[usize]) -> Result<TransitionPairs<'a>> {
    let mut index = Vec::new();
    for &t in trajectories {
        let n = ds
            .trajectories
            .get(t)
            .ok_or_else(|| TrainError::Data(format!("trajectory {t} out of range")))?
            .snapshots();
        if n < 2 {
            return Err(TrainError::Data(format!(
                "trajectory {t} has {n} snapshot(s); pairs need 2"
            )));
        }
        index.extend((0..n - 1).map(|k| (t, k)));
    }
    Ok(TransitionPairs { ds, index })
}

/// Every consecutive pair of every trajectory.
pub fn make_transition_pairs(ds: &Dataset) -> Result<TransitionPairs<'_>> {
    if ds.is_empty() {
        return Err(TrainError::Data("dataset is empty".into()));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    transition_pairs(ds, &all)
}

/// Trajectory-level split: `(train, validation)` index lists, each sorted.
pub fn split_trajectories(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * fraction).round() as usize;
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_data_loss: f64,
    /// Absent when no validation trajectories were held out.
    pub val_data_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model_kind: ModelKind,
    pub config: TrainConfig,
    pub train_trajectories: Vec<usize>,
    pub val_trajectories: Vec<usize>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_data_loss: Option<f64>,
    /// Coefficient matrix of the returned weights (late fusion only).
    pub final_xi: Option<Tensor>,
    /// Kept out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Mean squared one-step error of `model` over `pairs`.
pub fn pair_mse(model: &Model, pairs: &TransitionPairs<'_>, batch_size: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let rows: Vec<usize> = (0..pairs.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let (u, y, b) = pairs.batch(chunk)?;
        let pred = model.predict(&u, &b)?;
        sum += pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
        count += y.numel();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Trains `model` on single-step pairs of `ds` and returns the weights of
/// the best validation epoch.
pub fn train(mut model: Model, ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    if ds.family() != model.config.family {
        return Err(TrainError::Data(format!(
            "dataset family {} does not match model family {}",
            ds.family(),
            model.config.family
        )));
    }
    let (train_ids, val_ids) = split_trajectories(ds.len(), cfg.validation_fraction, cfg.seed);
    if train_ids.is_empty() {
        return Err(TrainError::Data(
            "no training trajectories left after the validation split".into(),
        ));
    }
    let train_pairs = transition_pairs(ds, &train_ids)?;
    let val_pairs = transition_pairs(ds, &val_ids)?;

    let mut report = TrainReport {
        model_kind: model.kind(),
        config: cfg.clone(),
        train_trajectories: train_ids,
        val_trajectories: val_ids,
        train_pairs: train_pairs.len(),
        val_pairs: val_pairs.len(),
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_data_loss: None,
        final_xi: None,
        wall_time: Duration::ZERO,
    };

    let mut params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let xi_slot = model.xi().map(|_| params.len() - 1);
    let mut adam = Adam::new(cfg.adam(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut best: Option<(f64, Vec<Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.initial_lr, cfg.lr_halving_epoch);
        adam.set_lr(lr);
        order.shuffle(&mut rng);
        let (mut total_sum, mut data_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let step = (|| -> Result<(f64, f64, Vec<Tensor>)> {
                let (u, y, b) = train_pairs.batch(chunk)?;
                let g = Graph::with_checks(true);
                let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
                let uv = g.constant(u);
                let yv = g.constant(y);
                let pred = model.step_graph(&g, &vars, uv, &b)?;
                let (total, data, _) = loss_graph(&g, pred, yv, xi_slot.map(|i| vars[i]), cfg.lambda_sparse)?;
                let (t, d) = (g.value(total).item(), g.value(data).item());
                let grads = g.backward(total)?;
                Ok((t, d, vars.iter().map(|&v| grads.wrt(v)).collect()))
            })();
            let (t, d, grads) = match step {
                Ok(v) => v,
                Err(e) => return Err(diverged(epoch, e.to_string(), report, start)),
            };
            if !t.is_finite() {
                return Err(diverged(epoch, format!("loss {t}"), report, start));
            }
            if let Err(e) = adam.step(&mut params, &grads) {
                return Err(diverged(epoch, e.to_string(), report, start));
            }
            total_sum += t * chunk.len() as f64;
            data_sum += d * chunk.len() as f64;
        }
        model.set_params(params.clone())?;
        let n = train_pairs.len() as f64;
        let val = if val_pairs.is_empty() {
            None
        } else {
            match pair_mse(&model, &val_pairs, cfg.batch_size) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(v) => return Err(diverged(epoch, format!("validation loss {v}"), report, start)),
                Err(e) => return Err(diverged(epoch, e.to_string(), report, start)),
            }
        };
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: total_sum / n,
            train_data_loss: data_sum / n,
            val_data_loss: val,
        });
        let score = val.unwrap_or(data_sum / n);
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((score, params.clone()));
            report.best_epoch = epoch;
            report.best_val_data_loss = val;
        }
    }
    if let Some((_, p)) = best {
        model.set_params(p)?;
    }
    report.final_xi = model.xi().cloned();
    report.wall_time = start.elapsed();
    Ok((model, report))
}

fn diverged(epoch: usize, reason: String, mut report: TrainReport, start: Instant) -> TrainError {
    report.wall_time = start.elapsed();
    TrainError::Diverged {
        epoch,
        reason,
        report: Box::new(report),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub val_loss: Option<f64>,
    pub selected: bool,
    pub error: Option<String>,
}

/// Trains one model per `lambda` with identical initialization, seed and
/// split; selects the lowest validation loss, ties going to the larger lambda.
/// Failed cells are kept as rows with an error message.
pub fn hyperparameter_sweep(
    init: &Model,
    ds: &Dataset,
    base: &TrainConfig,
    grid: &[f64],
) -> Result<(Vec<SweepRow>, Vec<Option<(Model, TrainReport)>>)> {
    if grid.is_empty() {
        return Err(TrainError::Config("sweep grid is empty".into()));
    }
    let results: Vec<Result<(Model, TrainReport)>> = grid
        .par_iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda_sparse: lambda,
                ..base.clone()
            };
            train(init.clone(), ds, &cfg)
        })
        .collect();
    let mut rows: Vec<SweepRow> = grid
        .iter()
        .zip(&results)
        .map(|(&lambda, r)| match r {
            Ok((_, rep)) => SweepRow {
                lambda,
                val_loss: Some(
                    rep.best_val_data_loss
                        .unwrap_or_else(|| rep.epochs[rep.best_epoch].train_data_loss),
                ),
                selected: false,
                error: None,
            },
            Err(e) => SweepRow {
                lambda,
                val_loss: None,
                selected: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let pick = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.val_loss.map(|v| (i, v, r.lambda)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(b.2.total_cmp(&a.2)))
        .map(|(i, _, _)| i);
    if let Some(i) = pick {
        rows[i].selected = true;
    }
    Ok((rows, results.into_iter().map(|r| r.ok()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_of_perfect_prediction_is_zero() {
        let t = Tensor::from_fn(&[2, 1, 4], |i| i as f64);
        let parts = compute_loss(&t, &t, Some(&Tensor::zeros(&[2, 1])), 0.5).unwrap();
        assert_eq!(
            parts,
            LossParts {
                total: 0.0,
                data: 0.0,
                sparse: 0.0
            }
        );
    }

    #[test]
    fn constant_offset_loss() {
        let t = Tensor::from_fn(&[3, 1, 5], |i| (i as f64).sin());
        let p = t.map(|v| v + 0.5);
        let parts = compute_loss(&p, &t, None, 1.0).unwrap();
        assert!((parts.data - 0.25).abs() < 1e-15);
        assert_eq!(parts.sparse, 0.0);
    }

    #[test]
    fn pure_l1_term() {
        let t = Tensor::zeros(&[1, 1, 4]);
        let xi = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let parts = compute_loss(&t, &t, Some(&xi), 1e-4).unwrap();
        assert!((parts.total - 3e-4).abs() < 1e-18);
        assert_eq!(parts.sparse, 3.0);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let (train, val) = split_trajectories(40, 0.1, 3);
        assert_eq!((train.len(), val.len()), (36, 4));
        assert!(val.iter().all(|v| !train.contains(v)));
        let (train, val) = split_trajectories(5, 0.0, 3);
        assert_eq!((train.len(), val.len()), (5, 0));
    }

    #[test]
    fn bad_configs_rejected() {
        for cfg in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                validation_fraction: 1.0,
                ..Default::default()
            },
            TrainConfig {
                lambda_sparse: -1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
