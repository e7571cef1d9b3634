//! Adam with per-block learning rates.

use super::config::TrainConfig;
use crate::grad::GradientBuffer;
use crate::gmm::{Mixture, ParamBlock, ParamLayout};

/// First and second moments of one parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied to this slot; drives bias correction so slots created
    /// mid-run start from a properly corrected estimate.
    pub steps: u64,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotMoments {
    pub parent: Moments,
    pub child: Option<Moments>,
}

/// Adam state, layout-congruent with a mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: Vec<SlotMoments>,
}

/// Learning rate of each parameter block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub mean: f64,
    pub factor: f64,
    pub color: f64,
    pub amp: f64,
}

impl LearningRates {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            mean: cfg.lr_mean,
            factor: cfg.lr_factor,
            color: cfg.lr_color,
            amp: cfg.lr_amp,
        }
    }

    pub fn uniform(lr: f64) -> Self {
        Self {
            mean: lr,
            factor: lr,
            color: lr,
            amp: lr,
        }
    }

    fn of(&self, block: ParamBlock) -> f64 {
        match block {
            ParamBlock::Mean => self.mean,
            ParamBlock::Chol => self.factor,
            ParamBlock::Color => self.color,
            ParamBlock::Amp => self.amp,
        }
    }
}

/// Adam hyperparameters besides the learning rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerState {
    pub fn new(mix: &Mixture) -> Self {
        let mut s = Self {
            step: 0,
            slots: Vec::new(),
        };
        s.sync(mix);
        s
    }

    /// Adds zeroed slots for components or children the state lacks and drops
    /// child slots whose child is gone.
    pub fn sync(&mut self, mix: &Mixture) {
        let len = mix.layout().len();
        while self.slots.len() < mix.len() {
            self.slots.push(SlotMoments {
                parent: Moments::zeros(len),
                child: None,
            });
        }
        for (slot, comp) in self.slots.iter_mut().zip(&mix.components) {
            match (&slot.child, &comp.child) {
                (None, Some(_)) => slot.child = Some(Moments::zeros(len)),
                (Some(_), None) => slot.child = None,
                _ => {}
            }
        }
    }

    /// Forgets the child moments of component `i`.
    pub fn reset_child(&mut self, i: usize) {
        if let Some(s) = self.slots.get_mut(i) {
            s.child = None;
        }
    }
}

fn update_slot(
    params: &mut [f64],
    grads: &[f64],
    mom: &mut Moments,
    layout: ParamLayout,
    lr: &LearningRates,
    hp: &AdamParams,
) {
    mom.steps += 1;
    let t = mom.steps as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for block in ParamBlock::ALL {
        let rate = lr.of(block);
        for i in layout.range(block) {
            let g = grads[i];
            mom.m[i] = hp.beta1 * mom.m[i] + (1.0 - hp.beta1) * g;
            mom.v[i] = hp.beta2 * mom.v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = mom.m[i] / c1;
            let v_hat = mom.v[i] / c2;
            params[i] -= rate * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
}

/// One Adam update of every live component and child.
pub fn adam_step(
    mix: &mut Mixture,
    state: &mut OptimizerState,
    grads: &GradientBuffer,
    lr: &LearningRates,
    hp: &AdamParams,
) {
    state.sync(mix);
    state.step += 1;
    let layout = mix.layout();
    for ((comp, slot), g) in mix
        .components
        .iter_mut()
        .zip(&mut state.slots)
        .zip(&grads.components)
    {
        if comp.frozen {
            continue;
        }
        let mut flat = comp.to_flat();
        update_slot(&mut flat, &g.parent, &mut slot.parent, layout, lr, hp);
        comp.set_flat(&flat);
        if let (Some(child), Some(cm), Some(cg)) = (&mut comp.child, &mut slot.child, &g.child) {
            let mut flat = child.to_flat();
            update_slot(&mut flat, cg, cm, layout, lr, hp);
            child.set_flat(&flat);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{AmpMode, GaussianParams};
    use crate::grad::SlotGrads;

    fn one(n: usize) -> Mixture {
        Mixture::with_components(
            n,
            AmpMode::Brightness,
            vec![GaussianParams::isotropic(vec![0.5; n], 0.2, [0.0; 3], 0.0)],
        )
        .unwrap()
    }

    fn grads_for(mix: &Mixture, value: f64) -> GradientBuffer {
        let mut g = GradientBuffer::zeros_like(mix);
        for s in &mut g.components {
            s.parent.iter_mut().for_each(|x| *x = value);
        }
        g
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut mix = one(3);
        let before = mix.clone();
        let mut st = OptimizerState::new(&mix);
        let g = grads_for(&mix, 0.0);
        adam_step(&mut mix, &mut st, &g, &LearningRates::uniform(0.1), &AdamParams::default());
        assert_eq!(mix, before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut mix = one(1);
        let mut st = OptimizerState::new(&mix);
        let g = grads_for(&mix, 0.37);
        let lr = LearningRates::uniform(1e-3);
        let mut prev = mix.components[0].mean_raw[0];
        let mut step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut mix, &mut st, &g, &lr, &AdamParams::default());
            let now = mix.components[0].mean_raw[0];
            step = prev - now;
            prev = now;
        }
        assert!((step - 1e-3).abs() < 1e-6, "{step}");
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x − 0.8)², gradient 2(x − 0.8), from x = 0.5.
        let mut mix = one(1);
        let mut st = OptimizerState::new(&mix);
        let lr = LearningRates::uniform(1e-2);
        for _ in 0..500 {
            let x = mix.components[0].mean_raw[0];
            let mut g = GradientBuffer::zeros_like(&mix);
            g.components[0] = SlotGrads {
                parent: {
                    let mut p = vec![0.0; mix.layout().len()];
                    p[0] = 2.0 * (x - 0.8);
                    p
                },
                child: None,
            };
            adam_step(&mut mix, &mut st, &g, &lr, &AdamParams::default());
        }
        assert!((mix.components[0].mean_raw[0] - 0.8).abs() < 1e-2);
    }

    #[test]
    fn sync_tracks_children() {
        let mut mix = one(2);
        let mut st = OptimizerState::new(&mix);
        assert!(st.slots[0].child.is_none());
        mix.components[0].child = Some(crate::gmm::ChildParams::neutral(2, [0.0; 3], 0.0));
        st.sync(&mix);
        assert_eq!(st.slots[0].child.as_ref().unwrap().steps, 0);
        mix.components.push(mix.components[0].clone());
        st.sync(&mix);
        assert_eq!(st.slots.len(), 2);
    }
}
