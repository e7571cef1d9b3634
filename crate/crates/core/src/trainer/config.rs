use serde::{Deserialize, Serialize};

use crate::culling::{DEFAULT_MULTIPLIER, DEFAULT_PROJECTIONS, DEFAULT_TILE_SIZE};
use crate::error::{Error, Result};
use crate::gmm::AmpMode;
use crate::grad::DEFAULT_LOSS_EPS;

/// Every knob of a training run. Defaults are the documented ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Iterations between refinement events.
    pub phase_length: u64,
    /// Phases completed before the first children are spawned.
    pub warmup_phases: u64,
    /// Child amplitude at which it becomes an independent component. `None`
    /// picks 0.1 for opacity and 0.01 for brightness.
    pub materialize_threshold: Option<f64>,
    pub amp_mode: AmpMode,
    pub initial_components: usize,
    /// Activated amplitude of every initial component.
    pub init_amplitude: f64,

    pub lr_mean: f64,
    pub lr_factor: f64,
    pub lr_color: f64,
    pub lr_amp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub batch_size: usize,
    pub tile_size: usize,
    pub seed: u64,
    pub loss_eps: f64,
    pub validation_size: usize,

    pub cull: bool,
    pub cull_k: usize,
    pub cull_multiplier: f64,

    pub perturb_directions: bool,
    pub perturb_sigma: f64,

    /// Write wall-clock time per iteration into metrics; `false` writes 0 so
    /// metrics are byte-reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            phase_length: 300,
            warmup_phases: 1,
            materialize_threshold: None,
            amp_mode: AmpMode::Brightness,
            initial_components: 32,
            init_amplitude: 0.1,
            lr_mean: 2e-3,
            lr_factor: 5e-3,
            lr_color: 1e-2,
            lr_amp: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 512,
            tile_size: DEFAULT_TILE_SIZE,
            seed: 0,
            loss_eps: DEFAULT_LOSS_EPS,
            validation_size: 2048,
            cull: true,
            cull_k: DEFAULT_PROJECTIONS,
            cull_multiplier: DEFAULT_MULTIPLIER,
            perturb_directions: false,
            perturb_sigma: 0.02,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn threshold(&self) -> f64 {
        self.materialize_threshold
            .unwrap_or_else(|| self.amp_mode.default_threshold())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.phase_length == 0 {
            return fail("phase_length must be >= 1");
        }
        let t = self.threshold();
        match self.amp_mode {
            AmpMode::Opacity if !(t > 0.0 && t < 1.0) => {
                return fail("opacity threshold must lie in (0, 1)")
            }
            AmpMode::Brightness if !(t > 0.0) => return fail("brightness threshold must be > 0"),
            _ => {}
        }
        if self.initial_components == 0 {
            return fail("initial_components must be >= 1");
        }
        if self.tile_size == 0 || self.batch_size == 0 || !self.batch_size.is_multiple_of(self.tile_size) {
            return fail("batch_size must be a positive multiple of tile_size");
        }
        if !(self.loss_eps > 0.0) {
            return fail("loss_eps must be > 0");
        }
        if self.cull_k == 0 || !(self.cull_multiplier > 0.0) {
            return fail("culling needs k >= 1 and a positive multiplier");
        }
        if !(self.init_amplitude > 0.0)
            || (self.amp_mode == AmpMode::Opacity && self.init_amplitude >= 1.0)
        {
            return fail("init_amplitude out of range for the amplitude mode");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.perturb_sigma >= 0.0) {
            return fail("perturb_sigma must be >= 0");
        }
        if self.validation_size == 0 {
            return fail("validation_size must be >= 1");
        }
        Ok(())
    }
}
