use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use ndgauss::datasets::Dataset;
use ndgauss::trainer::{init_state, train, MetricsRow, PhaseEvent, TrainObserver, TrainState};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, DatasetInfo};
use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.ndgc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PHASES_FILE: &str = "phases.csv";

#[derive(Clone, Debug)]
pub struct FitArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Final state of a completed run.
#[derive(Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct PhaseRow {
    iteration: u64,
    phase: u64,
    refined: bool,
    components_before: usize,
    components_after: usize,
    materialized: usize,
    spawned: usize,
    frozen: usize,
    deferred: usize,
    clamped_entries: usize,
    validation_before: f64,
    validation_after: f64,
    best_validation: f64,
}

impl From<&PhaseEvent> for PhaseRow {
    fn from(e: &PhaseEvent) -> Self {
        Self {
            iteration: e.iteration,
            phase: e.phase,
            refined: e.refined,
            components_before: e.components_before,
            components_after: e.components_after,
            materialized: e.materialized,
            spawned: e.spawned,
            frozen: e.frozen,
            deferred: e.deferred,
            clamped_entries: e.clamped_entries,
            validation_before: e.validation_before,
            validation_after: e.validation_after,
            best_validation: e.best_validation,
        }
    }
}

struct FitObserver {
    metrics: csv::Writer<File>,
    phases: csv::Writer<File>,
    checkpoint: PathBuf,
    config: RunConfig,
    failure: Option<CliError>,
}

impl FitObserver {
    fn snapshot(&self, state: &TrainState, dataset: &Dataset) -> Result<(), CliError> {
        Checkpoint {
            config: self.config.clone(),
            state: state.clone(),
            dataset: DatasetInfo::of(dataset),
        }
        .save(&self.checkpoint)
    }
}

impl TrainObserver for FitObserver {
    fn on_iteration(&mut self, row: &MetricsRow) {
        if self.failure.is_none() {
            let r = self.metrics.write_record(&[
                row.iteration.to_string(),
                row.loss.to_string(),
                row.n_components.to_string(),
                row.culled_fraction.to_string(),
                row.ms_per_iter.to_string(),
            ]);
            if let Err(e) = r {
                self.failure = Some(e.into());
            }
        }
    }

    fn on_phase(&mut self, state: &TrainState, dataset: &Dataset, event: &PhaseEvent) -> ndgauss::Result<()> {
        let result = (|| {
            self.phases.serialize(PhaseRow::from(event))?;
            self.phases.flush().map_err(|e| CliError::io(PHASES_FILE, e))?;
            self.metrics.flush().map_err(|e| CliError::io(METRICS_FILE, e))?;
            self.snapshot(state, dataset)
        })();
        match result {
            Ok(()) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                self.failure = Some(e);
                Err(ndgauss::Error::InvalidArgument(msg))
            }
        }
    }
}

fn csv_writer(path: &Path, header: &[&str], append: bool) -> Result<csv::Writer<File>, CliError> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !exists {
        w.write_record(header)?;
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    Ok(w)
}

const PHASE_HEADER: [&str; 13] = [
    "iteration",
    "phase",
    "refined",
    "components_before",
    "components_after",
    "materialized",
    "spawned",
    "frozen",
    "deferred",
    "clamped_entries",
    "validation_before",
    "validation_after",
    "best_validation",
];

pub const METRICS_HEADER: [&str; 5] = ["iteration", "loss", "n_components", "culled_fraction", "ms_per_iter"];

/// Trains per the config, writing `checkpoint.ndgc`, `metrics.csv` and
/// `phases.csv` into `out`. A resumed run appends to existing logs.
pub fn run_fit(args: &FitArgs) -> Result<FitOutcome, CliError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut dataset = config.build_dataset()?;

    let state = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.state.mixture.n_dims != dataset.n_dims {
                return Err(CliError::Usage(format!(
                    "checkpoint has {} dimensions but the dataset has {}",
                    ck.state.mixture.n_dims, dataset.n_dims
                )));
            }
            if ck.state.mixture.amp_mode != config.train.amp_mode {
                return Err(CliError::Usage("checkpoint amplitude mode differs from the config".into()));
            }
            ck.dataset.restore_into(&mut dataset)?;
            ck.state
        }
        None => init_state(&config.train, &mut dataset)?,
    };

    let append = args.resume.is_some();
    let mut observer = FitObserver {
        metrics: csv_writer(&args.out.join(METRICS_FILE), &METRICS_HEADER, append)?,
        phases: csv_writer(&args.out.join(PHASES_FILE), &PHASE_HEADER, append)?,
        checkpoint: args.out.join(CHECKPOINT_FILE),
        config: config.clone(),
        failure: None,
    };
    observer.snapshot(&state, &dataset)?;

    let result = train(&config.train, &mut dataset, state, &mut observer);
    observer.metrics.flush().map_err(|e| CliError::io(METRICS_FILE, e))?;
    observer.phases.flush().map_err(|e| CliError::io(PHASES_FILE, e))?;
    if let Some(e) = observer.failure.take() {
        return Err(e);
    }
    match result {
        Ok(state) => {
            observer.snapshot(&state, &dataset)?;
            Ok(FitOutcome { state, config })
        }
        Err(abort) => {
            observer.snapshot(&abort.state, &dataset)?;
            Err(CliError::Aborted(format!(
                "{abort}; last good checkpoint written to {}",
                observer.checkpoint.display()
            )))
        }
    }
}
