//! Training loop with Adam and hierarchical refinement.
//!
//! A run is a sequence of phases of `phase_length` iterations. After the
//! warmup phases every phase boundary is a refinement event: children whose
//! amplitude crossed the threshold become components, fresh children are
//! attached to every childless component, and components that stayed dim for
//! the whole phase are frozen. Component count therefore only grows, and
//! only at phase boundaries.

mod adam;
mod config;
mod refine;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamParams, LearningRates, Moments, OptimizerState, SlotMoments};
pub use config::TrainConfig;
pub use refine::{
    check_materialize, freeze_low_amplitude, materialize, materializes_exactly, spawn_children, MaterializeReport,
    CHILD_AMP_FRACTION, CHILD_COLOR_JITTER, FREEZE_FRACTION,
};

use crate::culling::{active_sets, eval_tiles, make_projection_set, CullSettings};
use crate::datasets::{perturb_directions, Dataset, QueryBatch};
use crate::error::{Error, Result};
use crate::gmm::{logit, Evaluator, GaussianParams, Mixture};
use crate::grad::{backward, loss_rel_l2};

/// Everything needed to continue a run bit-exactly, apart from the dataset's
/// own epoch cursor.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub mixture: Mixture,
    pub optimizer: OptimizerState,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    /// Highest activated amplitude of each component since the last phase
    /// boundary.
    pub phase_peaks: Vec<f64>,
    /// Lowest validation loss seen at any phase boundary.
    pub best_validation: f64,
}

/// One row of the per-iteration metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss: f64,
    pub n_components: usize,
    pub culled_fraction: f64,
    pub ms_per_iter: f64,
}

/// Summary of a phase boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseEvent {
    pub iteration: u64,
    pub phase: u64,
    /// Whether refinement ran (false during warmup).
    pub refined: bool,
    pub components_before: usize,
    pub components_after: usize,
    pub materialized: usize,
    pub spawned: usize,
    pub frozen: usize,
    /// Children past the threshold kept nested because promoting them would
    /// clamp factor entries.
    pub deferred: usize,
    pub clamped_entries: usize,
    pub validation_before: f64,
    pub validation_after: f64,
    pub best_validation: f64,
}

/// Hooks called during [`train`].
pub trait TrainObserver {
    fn on_iteration(&mut self, _row: &MetricsRow) {}

    /// Called after every phase boundary, with refinement already applied.
    /// An error aborts training.
    fn on_phase(&mut self, _state: &TrainState, _dataset: &Dataset, _event: &PhaseEvent) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Observer that keeps every metrics row and phase event.
#[derive(Default, Debug, Clone)]
pub struct Recorder {
    pub rows: Vec<MetricsRow>,
    pub events: Vec<PhaseEvent>,
}

impl TrainObserver for Recorder {
    fn on_iteration(&mut self, row: &MetricsRow) {
        self.rows.push(*row);
    }

    fn on_phase(&mut self, _: &TrainState, _: &Dataset, event: &PhaseEvent) -> Result<()> {
        self.events.push(event.clone());
        Ok(())
    }
}

/// A run that stopped early. `state` is the last state whose parameters were
/// all finite.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub state: Box<TrainState>,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training stopped at iteration {}: {}", self.state.iteration, self.error)
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Builds the initial mixture: means at dataset queries, isotropic width
/// equal to half the mean nearest-neighbour spacing of those means, color
/// matched to the local target hue.
pub fn initial_mixture(cfg: &TrainConfig, dataset: &mut Dataset, rng: &mut ChaCha8Rng) -> Result<Mixture> {
    cfg.validate()?;
    let n = dataset.n_dims;
    let k = cfg.initial_components;
    let seeds = dataset.sample_unsorted(rng, k)?;
    let sigma = (0.5 * mean_nearest_neighbour(&seeds.queries, n)).clamp(0.01, 0.5);
    let amp_raw = cfg.amp_mode.inverse(cfg.init_amplitude);
    let components = (0..k)
        .map(|i| {
            let t = seeds.targets[i];
            let peak = t.iter().cloned().fold(0.0f64, f64::max);
            let color_raw = t.map(|v| {
                let c = if peak > 0.0 { v / peak } else { 0.5 };
                logit(c.clamp(0.05, 0.95))
            });
            GaussianParams::isotropic(seeds.query(i).to_vec(), sigma, color_raw, amp_raw)
        })
        .collect();
    Mixture::with_components(n, cfg.amp_mode, components)
}

fn mean_nearest_neighbour(points: &[f64], n: usize) -> f64 {
    let count = points.len() / n;
    if count < 2 {
        return 0.5;
    }
    let mut total = 0.0;
    for i in 0..count {
        let a = &points[i * n..(i + 1) * n];
        let best = (0..count)
            .filter(|&j| j != i)
            .map(|j| {
                let b = &points[j * n..(j + 1) * n];
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        total += best.sqrt();
    }
    total / count as f64
}

/// Fresh state for a run: seeded RNG, initial mixture and zeroed optimizer.
pub fn init_state(cfg: &TrainConfig, dataset: &mut Dataset) -> Result<TrainState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mixture = initial_mixture(cfg, dataset, &mut rng)?;
    let optimizer = OptimizerState::new(&mixture);
    let phase_peaks = amplitudes(&mixture);
    Ok(TrainState {
        mixture,
        optimizer,
        iteration: 0,
        rng,
        phase_peaks,
        best_validation: f64::INFINITY,
    })
}

fn amplitudes(mix: &Mixture) -> Vec<f64> {
    mix.components
        .iter()
        .map(|c| mix.amp_mode.activate(c.amp_raw))
        .collect()
}

/// The held-out batch used at phase boundaries.
pub fn validation_batch(cfg: &TrainConfig, dataset: &Dataset) -> QueryBatch {
    dataset.validation_batch(cfg.seed, cfg.validation_size, cfg.tile_size)
}

/// Relative L2 of `mix` on `batch`, evaluating every term.
pub fn validation_loss(mix: &Mixture, batch: &QueryBatch, eps: f64) -> Result<f64> {
    let eval = Evaluator::new(mix)?;
    let tiles = batch.tiles();
    let active = active_sets(&eval, &batch.queries, &tiles, None);
    let pred = eval_tiles(&eval, &batch.queries, &tiles, &active.per_tile);
    Ok(loss_rel_l2(&pred, &batch.targets, eps))
}

/// Runs iterations until `cfg.iterations` is reached, starting from `state`.
pub fn train(
    cfg: &TrainConfig,
    dataset: &mut Dataset,
    mut state: TrainState,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<TrainState, TrainAbort> {
    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => {
                    return Err(TrainAbort {
                        error,
                        state: Box::new(state),
                    })
                }
            }
        };
    }
    bail!(cfg.validate());
    if dataset.n_dims != state.mixture.n_dims {
        bail!(Err(Error::DimensionMismatch {
            expected: state.mixture.n_dims,
            got: dataset.n_dims,
        }));
    }
    let n = dataset.n_dims;
    let threshold = cfg.threshold();
    let lr = LearningRates::from_config(cfg);
    let hp = AdamParams::from_config(cfg);
    let validation = validation_batch(cfg, dataset);
    let cull = if cfg.cull {
        Some(CullSettings {
            projections: bail!(make_projection_set(n, cfg.cull_k, cfg.seed)),
            multiplier: cfg.cull_multiplier,
        })
    } else {
        None
    };
    state.optimizer.sync(&state.mixture);
    if state.phase_peaks.len() < state.mixture.len() {
        state.phase_peaks = amplitudes(&state.mixture);
    }

    while state.iteration < cfg.iterations {
        let started = Instant::now();
        let mut batch = bail!(dataset.sample_batch(&mut state.rng, cfg.batch_size, cfg.tile_size));
        if cfg.perturb_directions {
            batch = bail!(perturb_directions(&batch, &dataset.roles, cfg.perturb_sigma, &mut state.rng));
        }
        let (result, culled_fraction) = {
            let eval = bail!(Evaluator::new(&state.mixture));
            let tiles = batch.tiles();
            let active = active_sets(&eval, &batch.queries, &tiles, cull.as_ref());
            (backward(&eval, &batch, &active.per_tile, cfg.loss_eps), active.culled_fraction)
        };
        let result = bail!(result);
        if !result.loss.is_finite() {
            let batch_index = result
                .predictions
                .iter()
                .position(|p| p.iter().any(|v| !v.is_finite()))
                .unwrap_or(0);
            bail!(Err(Error::NonFiniteLoss {
                iteration: state.iteration,
                batch_index,
            }));
        }

        adam_step(&mut state.mixture, &mut state.optimizer, &result.grads, &lr, &hp);
        for (peak, c) in state.phase_peaks.iter_mut().zip(&state.mixture.components) {
            *peak = peak.max(state.mixture.amp_mode.activate(c.amp_raw));
        }
        state.iteration += 1;

        let ms_per_iter = if cfg.record_timing {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        observer.on_iteration(&MetricsRow {
            iteration: state.iteration,
            loss: result.loss,
            n_components: state.mixture.len(),
            culled_fraction,
            ms_per_iter,
        });

        if state.iteration.is_multiple_of(cfg.phase_length) {
            let event = bail!(phase_boundary(cfg, &mut state, &validation, threshold));
            log::info!(
                "iteration {}: {} components, validation {:.4e} (best {:.4e})",
                state.iteration,
                event.components_after,
                event.validation_after,
                event.best_validation
            );
            bail!(observer.on_phase(&state, dataset, &event));
        }
    }
    Ok(state)
}

fn phase_boundary(
    cfg: &TrainConfig,
    state: &mut TrainState,
    validation: &QueryBatch,
    threshold: f64,
) -> Result<PhaseEvent> {
    let phase = state.iteration / cfg.phase_length;
    let before = validation_loss(&state.mixture, validation, cfg.loss_eps)?;
    let components_before = state.mixture.len();
    let mut event = PhaseEvent {
        iteration: state.iteration,
        phase,
        refined: false,
        components_before,
        components_after: components_before,
        materialized: 0,
        spawned: 0,
        frozen: 0,
        deferred: 0,
        clamped_entries: 0,
        validation_before: before,
        validation_after: before,
        best_validation: 0.0,
    };
    if phase >= cfg.warmup_phases {
        let (ready, deferred): (Vec<usize>, Vec<usize>) = check_materialize(&state.mixture, threshold)
            .into_iter()
            .partition(|&i| materializes_exactly(&state.mixture, i));
        if !deferred.is_empty() {
            log::debug!("deferring {} children whose factor leaves the activation range", deferred.len());
        }
        event.deferred = deferred.len();
        let report = materialize(&mut state.mixture, &ready)?;
        for &i in &ready {
            state.optimizer.reset_child(i);
        }
        event.frozen = freeze_low_amplitude(&mut state.mixture, &state.phase_peaks, threshold).len();
        event.spawned = spawn_children(&mut state.mixture, threshold, &mut state.rng);
        state.optimizer.sync(&state.mixture);
        event.refined = true;
        event.materialized = report.new_indices.len();
        event.clamped_entries = report.clamped_entries;
        event.components_after = state.mixture.len();
        event.validation_after = validation_loss(&state.mixture, validation, cfg.loss_eps)?;
    }
    state.phase_peaks = amplitudes(&state.mixture);
    state.best_validation = state.best_validation.min(event.validation_after);
    event.best_validation = state.best_validation;
    Ok(event)
}
