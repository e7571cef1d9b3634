//! Hierarchical refinement: spawning, materializing and freezing components.

use rand::Rng;

use crate::error::Result;
use crate::gmm::{
    compose_child, deactivate_cholesky, logit, sigmoid, ChildParams, GaussianParams, Mixture,
};

/// Spread of the raw color given to a fresh child.
pub const CHILD_COLOR_JITTER: f64 = 0.1;
/// Fresh children start at this fraction of the materialization threshold.
pub const CHILD_AMP_FRACTION: f64 = 0.1;
/// Components whose peak amplitude over a phase stays below this fraction of
/// the threshold are frozen.
pub const FREEZE_FRACTION: f64 = 0.01;

/// Outcome of [`materialize`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaterializeReport {
    /// Indices of the new components, in the order they were appended.
    pub new_indices: Vec<usize>,
    /// Off-diagonal factor entries clamped to fit the activation range.
    pub clamped_entries: usize,
}

/// Attaches a neutral child to every live component that has none.
/// Returns the number of children created.
///
/// A neutral child has exactly its parent's density, so its contribution is
/// subtracted from the parent's color and the mixture value does not move.
/// The child amplitude is `threshold · CHILD_AMP_FRACTION`, lowered where
/// the parent is too dim to give up that much of any color channel.
pub fn spawn_children<R: Rng>(mix: &mut Mixture, threshold: f64, rng: &mut R) -> usize {
    let n = mix.n_dims;
    let mode = mix.amp_mode;
    let nominal = threshold * CHILD_AMP_FRACTION;
    let mut spawned = 0;
    for comp in mix.components.iter_mut().filter(|c| !c.frozen && c.child.is_none()) {
        let color_raw: [f64; 3] =
            std::array::from_fn(|_| rng.random_range(-CHILD_COLOR_JITTER..=CHILD_COLOR_JITTER));
        let child_color = color_raw.map(sigmoid);
        let parent_amp = mode.activate(comp.amp_raw);
        let parent_color = comp.color_raw.map(sigmoid);
        // The parent keeps at least half of every channel.
        let room = (0..3)
            .map(|c| 0.5 * parent_amp * parent_color[c] / child_color[c])
            .fold(f64::INFINITY, f64::min);
        let amp = nominal.min(room).max(nominal * MIN_CHILD_AMP_RATIO);
        if amp <= room {
            for c in 0..3 {
                let kept = parent_color[c] - amp / parent_amp * child_color[c];
                comp.color_raw[c] = logit(kept);
            }
        }
        comp.child = Some(ChildParams::neutral(n, color_raw, mode.inverse(amp)));
        spawned += 1;
    }
    spawned
}

/// Smallest child amplitude, relative to the nominal one, that
/// [`spawn_children`] will use.
const MIN_CHILD_AMP_RATIO: f64 = 1e-6;

/// Whether the child of component `i` can be promoted without clamping any
/// factor entry, so that promotion leaves the mixture value unchanged.
pub fn materializes_exactly(mix: &Mixture, i: usize) -> bool {
    let comp = &mix.components[i];
    let Some(child) = &comp.child else {
        return false;
    };
    match compose_child(comp, child) {
        Ok((mean, factor)) => {
            mean.iter().all(|v| v.is_finite()) && deactivate_cholesky(&factor).1 == 0
        }
        Err(_) => false,
    }
}

/// Indices of live components whose child amplitude reached `threshold`.
pub fn check_materialize(mix: &Mixture, threshold: f64) -> Vec<usize> {
    mix.components
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.frozen)
        .filter_map(|(i, c)| {
            let child = c.child.as_ref()?;
            (mix.amp_mode.activate(child.amp_raw) >= threshold).then_some(i)
        })
        .collect()
}

/// Promotes the children of `indices` to top-level components, appended in
/// index order. The parents are left childless.
pub fn materialize(mix: &mut Mixture, indices: &[usize]) -> Result<MaterializeReport> {
    let mut report = MaterializeReport::default();
    for &i in indices {
        let Some(child) = mix.components[i].child.clone() else {
            continue;
        };
        let (mean, factor) = compose_child(&mix.components[i], &child)?;
        let (chol_raw, clamped) = deactivate_cholesky(&factor);
        if clamped > 0 {
            log::warn!("materializing child of component {i}: clamped {clamped} factor entries");
        }
        report.clamped_entries += clamped;
        mix.components[i].child = None;
        mix.components.push(GaussianParams {
            mean_raw: mean,
            chol_raw,
            color_raw: child.color_raw,
            amp_raw: child.amp_raw,
            child: None,
            frozen: false,
        });
        report.new_indices.push(mix.components.len() - 1);
    }
    Ok(report)
}

/// Freezes live components whose peak amplitude over the last phase stayed
/// below `threshold · FREEZE_FRACTION`. `peaks` is indexed by component;
/// missing entries count as not yet observed. Returns the frozen indices.
pub fn freeze_low_amplitude(mix: &mut Mixture, peaks: &[f64], threshold: f64) -> Vec<usize> {
    let floor = threshold * FREEZE_FRACTION;
    let mut frozen = Vec::new();
    for (i, (comp, &peak)) in mix.components.iter_mut().zip(peaks).enumerate() {
        if !comp.frozen && peak < floor {
            comp.frozen = true;
            comp.child = None;
            frozen.push(i);
        }
    }
    frozen
}
