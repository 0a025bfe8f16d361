//! Adam training with a barrier-relaxed projection of `K` after every step.
//!
//! One iteration:
//!
//! 1. evaluate the windowed loss and its gradient on the tape
//! 2. remember `K_prev`
//! 3. take an Adam step on every parameter, giving the reference `K_ref`
//! 4. project `K_ref` row by row onto `h_i(K) >= min(0, alpha h_i(K_prev)) + margin`
//! 5. check that the updated `S` is still invertible within the condition cap
//!
//! Nothing is written back to the model unless every check passes, so on
//! error the model holds the last committed parameters.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DEFAULT_CONDITION_CAP};
use crate::metrics::MetricsReport;
use crate::model::{windowed_loss, KoopmanModel, LossWeights};
use crate::projection::{pgd_project_detailed, ProjectionMode};
use crate::stability::{barrier_values, spectral_radius};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter group.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<DenseMatrix>,
    v: Vec<DenseMatrix>,
    step: i32,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a DenseMatrix>) -> Self {
        let m: Vec<DenseMatrix> = params
            .into_iter()
            .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

/// Returns updated copies of `params`. Fails on non-finite gradients or
/// results, leaving `state` untouched.
pub fn adam_step(
    params: &[&DenseMatrix],
    grads: &[DenseMatrix],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<Vec<DenseMatrix>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    let t = state.step + 1;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut new_m = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    let mut out = Vec::with_capacity(params.len());
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "group {k}: parameter {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter group {k}"
            )));
        }
        let m = state.m[k].zip_map(g, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g);
        let v = state.v[k].zip_map(g, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g);
        let step = m.zip_map(&v, |m, v| {
            cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.epsilon)
        });
        let updated = p.zip_map(&step, |p, s| p - s);
        if !updated.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite update in parameter group {k}"
            )));
        }
        new_m.push(m);
        new_v.push(v);
        out.push(updated);
    }
    state.m = new_m;
    state.v = new_v;
    state.step = t;
    Ok(out)
}

/// Everything that controls a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    /// Trajectories per iteration; 0 means the whole training split.
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Barrier relaxation factor in `(0, 1]`.
    pub alpha: f64,
    pub mode: ProjectionMode,
    /// Extra barrier margin demanded after each projection.
    pub margin: f64,
    /// When false `K` is left unconstrained.
    pub stable: bool,
    /// Seeds minibatch shuffling.
    pub seed: u64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    /// Stop after this many epochs without validation improvement and
    /// restore the best parameters.
    pub patience: Option<usize>,
    pub condition_cap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            epochs: 3000,
            batch_size: 0,
            weights: LossWeights::default(),
            alpha: 1.0,
            mode: ProjectionMode::Symmetric,
            margin: 0.0,
            stable: true,
            seed: 0,
            eval_every: 0,
            patience: None,
            condition_cap: DEFAULT_CONDITION_CAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.epsilon > 0.0)
        {
            return Err(Error::Contract(format!("invalid optimizer settings {o:?}")));
        }
        if self.stable && !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Contract(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Contract(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        if self.patience.is_some() && self.eval_every == 0 {
            return Err(Error::Contract(
                "early stopping needs eval_every > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Bookkeeping for one committed iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub loss_pred: f64,
    pub loss_lin: f64,
    pub loss_rec: f64,
    /// Barrier margins (minimum over rows, in the projection mode's sense)
    /// of `K_prev`, the Adam reference and the committed `K`.
    pub margin_prev: f64,
    pub margin_ref: f64,
    pub margin_after: f64,
    /// Frobenius distance moved by the projection.
    pub displacement: f64,
    pub moved_rows: usize,
    /// Per-row barrier of the committed `K`.
    pub h: Vec<f64>,
    /// Validation NMSE, when evaluated at the end of this epoch.
    pub val_nmse: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Not part of the CSV, which stays byte-identical across reruns.
    pub elapsed: Duration,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let d = self.records.first().map_or(0, |r| r.h.len());
        let mut s = String::from(
            "iteration,epoch,loss,loss_pred,loss_lin,loss_rec,margin_prev,margin_ref,margin_after,displacement,moved_rows,val_nmse",
        );
        for i in 0..d {
            let _ = write!(s, ",h_{i}");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(
                s,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},",
                r.iteration,
                r.epoch,
                r.loss,
                r.loss_pred,
                r.loss_lin,
                r.loss_rec,
                r.margin_prev,
                r.margin_ref,
                r.margin_after,
                r.displacement,
                r.moved_rows
            );
            if let Some(v) = r.val_nmse {
                let _ = write!(s, "{v:?}");
            }
            for h in &r.h {
                let _ = write!(s, ",{h:?}");
            }
            s.push('\n');
        }
        s
    }
}

fn mode_margin(k: &DenseMatrix, mode: ProjectionMode) -> f64 {
    (0..k.rows())
        .map(|i| mode.barrier(k.row(i), i))
        .fold(f64::INFINITY, f64::min)
}

pub fn train(
    model: &mut KoopmanModel,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let mut history = TrainHistory::default();
    train_with(model, dataset, config, &mut history, |_, _| {})?;
    Ok(history)
}

/// Like [`train`], appending to `history` as it goes and calling `observer`
/// at the end of every epoch. On error both `model` and `history` hold
/// everything committed before the failure.
pub fn train_with(
    model: &mut KoopmanModel,
    dataset: &Dataset,
    config: &TrainConfig,
    history: &mut TrainHistory,
    mut observer: impl FnMut(&StepRecord, &KoopmanModel),
) -> Result<()> {
    config.validate()?;
    if dataset.dim() != model.state_dim() {
        return Err(Error::dim(
            "train",
            format!(
                "dataset dimension {}, model expects {}",
                dataset.dim(),
                model.state_dim()
            ),
        ));
    }
    let train_set: Vec<&DenseMatrix> = dataset
        .split(Split::Train)
        .iter()
        .map(|t| t.states())
        .collect();
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let validate = config.eval_every > 0 && !dataset.split(Split::Validation).is_empty();
    let batch = if config.batch_size == 0 {
        train_set.len()
    } else {
        config.batch_size.min(train_set.len())
    };

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.parameters());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, KoopmanModel)> = None;
    let mut iteration = history.records.len();

    'epochs: for epoch in 0..config.epochs {
        if batch < train_set.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let trajs: Vec<&DenseMatrix> = chunk.iter().map(|&i| train_set[i]).collect();
            let outcome = step(model, &mut adam, &trajs, config);
            history.elapsed = start.elapsed();
            let mut record = outcome?;
            record.iteration = iteration;
            record.epoch = epoch;
            iteration += 1;
            history.records.push(record);
        }

        if validate && (epoch + 1) % config.eval_every == 0 {
            let nmse = evaluate(model, dataset, Split::Validation)?.nmse;
            if let Some(r) = history.records.last_mut() {
                r.val_nmse = Some(nmse);
            }
            if best.as_ref().is_none_or(|b| nmse < b.0) {
                best = Some((nmse, epoch, model.clone()));
            } else if let (Some(p), Some(b)) = (config.patience, &best) {
                if epoch - b.1 >= p {
                    history.stopped_early = true;
                    if let Some(r) = history.records.last() {
                        observer(r, model);
                    }
                    break 'epochs;
                }
            }
        }
        if let Some(r) = history.records.last() {
            observer(r, model);
        }
    }

    if let Some((_, epoch, params)) = best {
        if config.patience.is_some() {
            *model = params;
        }
        history.best_epoch = Some(epoch);
    }
    history.elapsed = start.elapsed();
    Ok(())
}

fn step(
    model: &mut KoopmanModel,
    adam: &mut AdamState,
    trajs: &[&DenseMatrix],
    config: &TrainConfig,
) -> Result<StepRecord> {
    let mut tape = Tape::with_condition_cap(config.condition_cap);
    let bound = model.bind(&mut tape);
    let terms = windowed_loss(&mut tape, &bound, trajs, &config.weights)?;
    let loss = tape.scalar(terms.total);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss became {loss}")));
    }
    tape.backward(terms.total)?;
    let grads: Vec<DenseMatrix> = bound
        .parameter_vars()
        .iter()
        .map(|v| tape.grad(*v))
        .collect();
    drop(tape);

    let k_prev = model.k.clone();
    let mut trial_adam = adam.clone();
    let mut updated = adam_step(
        &model.parameters(),
        &grads,
        &mut trial_adam,
        &config.optimizer,
    )?;
    let ki = model.k_index();
    let k_ref = updated[ki].clone();

    let (displacement, moved_rows) = if config.stable {
        let proj = pgd_project_detailed(&k_ref, &k_prev, config.alpha, config.mode, config.margin)?;
        let disp = proj.displacement(&k_ref);
        let moved = proj.moved_rows.len();
        updated[ki] = proj.matrix;
        (disp, moved)
    } else {
        (0.0, 0)
    };
    // S must stay usable as a change of basis
    updated[ki + 1].inverse_with_cap(config.condition_cap)?;

    for (p, new) in model.parameters_mut().into_iter().zip(updated) {
        *p = new;
    }
    *adam = trial_adam;

    let h = (0..model.k.rows())
        .map(|i| config.mode.barrier(model.k.row(i), i))
        .collect::<Vec<_>>();
    Ok(StepRecord {
        iteration: 0,
        epoch: 0,
        loss,
        loss_pred: terms.pred,
        loss_lin: terms.lin,
        loss_rec: terms.rec,
        margin_prev: mode_margin(&k_prev, config.mode),
        margin_ref: mode_margin(&k_ref, config.mode),
        margin_after: h.iter().copied().fold(f64::INFINITY, f64::min),
        displacement,
        moved_rows,
        h,
        val_nmse: None,
    })
}

/// Free rollout from each trajectory's first sample, compared with the
/// trajectory in raw (unpreprocessed) units.
pub fn evaluate(model: &KoopmanModel, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
    let mut pairs = Vec::new();
    for (k, s) in dataset.splits().iter().enumerate() {
        if *s != split {
            continue;
        }
        let traj = &dataset.trajectories()[k];
        let pred = model.predict(&traj.first(), traj.len() - 1)?;
        let pred_raw = dataset.preprocessing().invert(&pred);
        pairs.push((pred_raw, dataset.raw_trajectory(k).states().clone()));
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no trajectories in the {} split",
            split.name()
        )));
    }
    let rho = spectral_radius(&model.effective_matrix_value()?)?;
    let margin = barrier_values(&model.k)?.margin();
    MetricsReport::from_pairs(&pairs, rho, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_stable_spiral, SpiralSpec};
    use crate::model::{KInit, ModelConfig};
    use crate::stability::certify_stable;

    fn tiny_model(k_init: KInit) -> KoopmanModel {
        KoopmanModel::new(&ModelConfig {
            lifted_dim: 4,
            hidden: vec![8],
            k_init,
            seed: 2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn spiral_data() -> Dataset {
        synth_stable_spiral(&SpiralSpec {
            n_traj: 4,
            length: 20,
            ..SpiralSpec::default()
        })
        .unwrap()
        .with_validation_tail(1)
        .unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            optimizer: AdamConfig {
                learning_rate: 5e-3,
                ..AdamConfig::default()
            },
            weights: LossWeights {
                horizon: 5,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic_bowl() {
        let target = DenseMatrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let mut x = DenseMatrix::zeros(2, 2);
        let mut state = AdamState::new([&x]);
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..2000 {
            let g = x.sub(&target).unwrap().scale(2.0);
            x = adam_step(&[&x], &[g], &mut state, &cfg).unwrap().remove(0);
        }
        assert!(x.sub(&target).unwrap().max_abs() < 1e-3);
        assert_eq!(state.steps(), 2000);
    }

    #[test]
    fn adam_reaches_bowl_minimizer_tightly() {
        let target = DenseMatrix::from_rows(&[[0.3, -1.2, 2.0]]).unwrap();
        let mut x = DenseMatrix::zeros(1, 3);
        let mut state = AdamState::new([&x]);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        for _ in 0..5000 {
            let g = x.sub(&target).unwrap().scale(2.0);
            x = adam_step(&[&x], &[g], &mut state, &cfg).unwrap().remove(0);
        }
        assert!(x.sub(&target).unwrap().max_abs() < 1e-6, "{:?}", x);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let x = DenseMatrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let mut st = AdamState::new([&x]);
        let cfg = AdamConfig::default();
        let g = DenseMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let y = adam_step(&[&x], &[g], &mut st, &cfg).unwrap().remove(0);
        let m1 = st.m[0].clone();
        let z = adam_step(&[&y], &[DenseMatrix::zeros(1, 2)], &mut st, &cfg)
            .unwrap()
            .remove(0);
        assert!(st.m[0].max_abs() < m1.max_abs());
        // the decayed first moment still carries momentum, so compare a fresh state
        let mut fresh = AdamState::new([&x]);
        let same = adam_step(&[&x], &[DenseMatrix::zeros(1, 2)], &mut fresh, &cfg)
            .unwrap()
            .remove(0);
        assert_eq!(same, x);
        assert_ne!(z, y);
    }

    #[test]
    fn first_adam_step_has_learning_rate_size() {
        let x = DenseMatrix::zeros(1, 3);
        let g = DenseMatrix::from_rows(&[[1e-4, -50.0, 0.0]]).unwrap();
        let mut st = AdamState::new([&x]);
        let out = adam_step(&[&x], &[g], &mut st, &AdamConfig::default()).unwrap();
        let v = out[0].data();
        assert!((v[0] + 1e-3).abs() < 1e-6 && (v[1] - 1e-3).abs() < 1e-9 && v[2] == 0.0);
    }

    #[test]
    fn adam_rejects_nan_without_side_effects() {
        let x = DenseMatrix::zeros(1, 2);
        let mut st = AdamState::new([&x]);
        let bad = DenseMatrix::from_raw(1, 2, vec![f64::NAN, 0.0]);
        assert!(matches!(
            adam_step(&[&x], &[bad], &mut st, &AdamConfig::default()),
            Err(Error::Numeric(_))
        ));
        assert_eq!(st.steps(), 0);
    }

    #[test]
    fn training_reduces_loss_and_keeps_k_certified() {
        let data = spiral_data();
        let mut model = tiny_model(KInit::default());
        let hist = train(&mut model, &data, &quick(150)).unwrap();
        let first = hist.records[0].loss;
        let last = hist.last().unwrap().loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
        for r in &hist.records {
            assert!(r.margin_after >= 0.0);
        }
        assert!(certify_stable(&model.k, 0.0).unwrap().is_certified());
        let report = evaluate(&model, &data, Split::Validation).unwrap();
        assert!(report.spectral_radius <= 1.0 + 1e-9);
        assert!(report.barrier_margin >= 0.0);
    }

    #[test]
    fn infeasible_start_never_loses_ground() {
        let data = spiral_data();
        let mut model = tiny_model(KInit::ScaledIdentity(1.5));
        let cfg = TrainConfig {
            alpha: 0.5,
            ..quick(60)
        };
        let hist = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(hist.records[0].margin_prev, -0.5);
        let mut prev = -0.5;
        for r in &hist.records {
            // each infeasible row must recover at least half of its deficit
            assert!(r.margin_after >= 0.5 * r.margin_prev.min(0.0) - 1e-12);
            let now = r.margin_after.min(0.0);
            assert!(now >= prev - 1e-12, "{now} < {prev}");
            prev = now;
        }
        assert!(hist.last().unwrap().margin_after > -1e-12);
    }

    #[test]
    fn unconstrained_mode_skips_projection() {
        let data = spiral_data();
        let mut model = tiny_model(KInit::default());
        let cfg = TrainConfig {
            stable: false,
            ..quick(5)
        };
        let hist = train(&mut model, &data, &cfg).unwrap();
        assert!(hist
            .records
            .iter()
            .all(|r| r.moved_rows == 0 && r.displacement == 0.0));
    }

    #[test]
    fn reruns_are_identical() {
        let data = spiral_data();
        let cfg = TrainConfig {
            batch_size: 2,
            seed: 11,
            ..quick(20)
        };
        let mut a = tiny_model(KInit::default());
        let mut b = tiny_model(KInit::default());
        let ha = train(&mut a, &data, &cfg).unwrap();
        let hb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ha.to_csv(), hb.to_csv());
        assert_eq!(a, b);
        assert_eq!(ha.records.len(), 20 * 2);
    }

    #[test]
    fn early_stopping_restores_best() {
        let data = spiral_data();
        let mut model = tiny_model(KInit::default());
        let cfg = TrainConfig {
            eval_every: 1,
            patience: Some(3),
            ..quick(400)
        };
        let hist = train(&mut model, &data, &cfg).unwrap();
        let best = hist.best_epoch.unwrap();
        let best_nmse = hist
            .records
            .iter()
            .filter_map(|r| r.val_nmse)
            .fold(f64::INFINITY, f64::min);
        let now = evaluate(&model, &data, Split::Validation).unwrap().nmse;
        assert_eq!(now, best_nmse);
        assert!(best < 400);
        if hist.stopped_early {
            assert!(hist.last().unwrap().epoch >= best + 3);
        }
    }

    #[test]
    fn config_errors() {
        let data = spiral_data();
        let mut model = tiny_model(KInit::default());
        for cfg in [
            TrainConfig {
                alpha: 0.0,
                ..quick(1)
            },
            TrainConfig {
                alpha: 1.5,
                ..quick(1)
            },
            TrainConfig {
                margin: -0.1,
                ..quick(1)
            },
            TrainConfig {
                patience: Some(2),
                ..quick(1)
            },
            TrainConfig {
                weights: LossWeights {
                    pred: 0.0,
                    lin: 0.0,
                    rec: 0.0,
                    horizon: 5,
                },
                ..quick(1)
            },
        ] {
            assert!(matches!(
                train(&mut model, &data, &cfg),
                Err(Error::Contract(_))
            ));
        }
        let short = synth_stable_spiral(&SpiralSpec {
            n_traj: 2,
            length: 4,
            ..SpiralSpec::default()
        })
        .unwrap();
        assert!(matches!(
            train(&mut model, &short, &quick(1)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn history_csv_has_stable_columns() {
        let data = spiral_data();
        let mut model = tiny_model(KInit::default());
        let hist = train(&mut model, &data, &quick(3)).unwrap();
        let csv = hist.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("iteration,epoch,loss,"));
        assert!(header.ends_with(",h_3"));
        let cols = header.split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == cols));
    }
}
