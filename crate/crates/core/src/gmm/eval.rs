//! Density and mixture evaluation on activated parameters.

use super::activation::{activate_cholesky, activate_color, AmpMode, DEGENERATE_DIAGONAL};
use super::factor::LowerTriangular;
use super::params::{ChildParams, GaussianParams, Mixture};
use crate::error::{Error, Result};

/// Whether a term is a component itself or its live child.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    Parent,
    Child,
}

/// One activated Gaussian contributing to the mixture sum.
#[derive(Clone, Debug)]
pub struct Term {
    pub component: usize,
    pub kind: TermKind,
    /// Absolute mean.
    pub mean: Vec<f64>,
    /// Absolute factor (`L` for parents, `L·U` for children).
    pub factor: LowerTriangular,
    pub amplitude: f64,
    pub color: [f64; 3],
    pub degenerate: bool,
}

impl Term {
    /// `amplitude · color`.
    #[inline]
    pub fn weight(&self) -> [f64; 3] {
        [
            self.amplitude * self.color[0],
            self.amplitude * self.color[1],
            self.amplitude * self.color[2],
        ]
    }

    /// Half the squared Mahalanobis distance of `x`. On return `z` holds
    /// `L⁻¹(x − m)`.
    #[inline]
    pub fn half_sq_distance(&self, x: &[f64], z: &mut [f64]) -> f64 {
        for ((zi, xi), mi) in z.iter_mut().zip(x).zip(&self.mean) {
            *zi = xi - mi;
        }
        self.factor.solve_in_place(z);
        0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    /// `exp(−½ (x−m)ᵀ V⁻¹ (x−m))`; zero for degenerate terms.
    #[inline]
    pub fn density_with(&self, x: &[f64], z: &mut [f64]) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        (-self.half_sq_distance(x, z)).exp()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; self.mean.len()];
        self.density_with(x, &mut z)
    }
}

fn is_degenerate(f: &LowerTriangular) -> bool {
    !(f.min_diagonal() >= DEGENERATE_DIAGONAL) || f.packed().iter().any(|v| !v.is_finite())
}

/// Absolute mean and factor of a child: `m_c = L m_u + m_p`, factor `L·U`.
pub fn compose_child(
    parent: &GaussianParams,
    child: &ChildParams,
) -> Result<(Vec<f64>, LowerTriangular)> {
    let n = parent.n_dims();
    let l = activate_cholesky(&parent.chol_raw, n)?;
    let u = activate_child_factor(child, n)?;
    Ok(compose_activated(&parent.mean_raw, &l, child, &u))
}

pub(crate) fn activate_child_factor(child: &ChildParams, n: usize) -> Result<LowerTriangular> {
    activate_cholesky(&child.rel_chol_raw, n).map_err(|e| match e {
        Error::InvalidParameter {
            component,
            entry,
            value,
            ..
        } => Error::InvalidParameter {
            component,
            block: "child.chol",
            entry,
            value,
        },
        e => e,
    })
}

pub(crate) fn compose_activated(
    parent_mean: &[f64],
    l: &LowerTriangular,
    child: &ChildParams,
    u: &LowerTriangular,
) -> (Vec<f64>, LowerTriangular) {
    let mut mean = l.mul_vec(&child.rel_mean_raw);
    for (m, p) in mean.iter_mut().zip(parent_mean) {
        *m += p;
    }
    (mean, l.mul(u))
}

fn check_finite(values: &[f64], block: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(entry) => Err(Error::InvalidParameter {
            component: None,
            block,
            entry,
            value: values[entry],
        }),
        None => Ok(()),
    }
}

/// Density of a single component at `x`. Degenerate factors evaluate to zero.
pub fn eval_gaussian(g: &GaussianParams, x: &[f64]) -> Result<f64> {
    if x.len() != g.n_dims() {
        return Err(Error::DimensionMismatch {
            expected: g.n_dims(),
            got: x.len(),
        });
    }
    check_finite(&g.mean_raw, "mean")?;
    let factor = activate_cholesky(&g.chol_raw, g.n_dims())?;
    let term = Term {
        component: 0,
        kind: TermKind::Parent,
        mean: g.mean_raw.clone(),
        degenerate: is_degenerate(&factor),
        factor,
        amplitude: 1.0,
        color: [1.0; 3],
    };
    if term.degenerate {
        log::warn!("degenerate component evaluated as zero");
    }
    Ok(term.density(x))
}

/// Activated snapshot of a mixture: one [`Term`] per live component and per
/// live child, in component order (a component's child directly follows it).
#[derive(Clone, Debug)]
pub struct Evaluator<'a> {
    mixture: &'a Mixture,
    terms: Vec<Term>,
}

impl<'a> Evaluator<'a> {
    pub fn new(mixture: &'a Mixture) -> Result<Self> {
        let n = mixture.n_dims;
        let mode = mixture.amp_mode;
        let mut terms = Vec::with_capacity(mixture.len() * 2);
        for (ci, comp) in mixture.components.iter().enumerate() {
            if comp.frozen {
                continue;
            }
            let annotate = |e: Error| e.for_component(ci);
            check_finite(&comp.mean_raw, "mean").map_err(annotate)?;
            check_finite(&comp.color_raw, "color").map_err(annotate)?;
            check_finite(&[comp.amp_raw], "amp").map_err(annotate)?;
            let l = activate_cholesky(&comp.chol_raw, n).map_err(annotate)?;
            if let Some(child) = &comp.child {
                check_finite(&child.rel_mean_raw, "child.mean").map_err(annotate)?;
                check_finite(&child.color_raw, "child.color").map_err(annotate)?;
                check_finite(&[child.amp_raw], "child.amp").map_err(annotate)?;
            }
            let child_term = match &comp.child {
                Some(child) => {
                    let u = activate_child_factor(child, n).map_err(annotate)?;
                    let (mean, factor) = compose_activated(&comp.mean_raw, &l, child, &u);
                    Some(make_term(ci, TermKind::Child, mean, factor, mode, child.amp_raw, &child.color_raw))
                }
                None => None,
            };
            terms.push(make_term(
                ci,
                TermKind::Parent,
                comp.mean_raw.clone(),
                l,
                mode,
                comp.amp_raw,
                &comp.color_raw,
            ));
            terms.extend(child_term);
        }
        for t in terms.iter().filter(|t| t.degenerate) {
            log::warn!(
                "component {} ({:?}) has a degenerate factor; contributing zero",
                t.component,
                t.kind
            );
        }
        Ok(Self { mixture, terms })
    }

    pub fn mixture(&self) -> &'a Mixture {
        self.mixture
    }

    pub fn n_dims(&self) -> usize {
        self.mixture.n_dims
    }

    pub fn amp_mode(&self) -> AmpMode {
        self.mixture.amp_mode
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Indices of every term.
    pub fn all_active(&self) -> Vec<usize> {
        (0..self.terms.len()).collect()
    }

    /// Terms flagged degenerate.
    pub fn degenerate(&self) -> Vec<usize> {
        (0..self.terms.len())
            .filter(|&i| self.terms[i].degenerate)
            .collect()
    }

    /// Mixture color at `x` summed over the `active` term indices. `z` is
    /// scratch of length `n_dims`.
    #[inline]
    pub fn eval_with(&self, x: &[f64], active: &[usize], z: &mut [f64]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for &ti in active {
            let t = &self.terms[ti];
            let g = t.density_with(x, z);
            if g == 0.0 {
                continue;
            }
            let w = t.weight();
            c[0] += g * w[0];
            c[1] += g * w[1];
            c[2] += g * w[2];
        }
        c
    }

    pub fn eval(&self, x: &[f64], active: &[usize]) -> [f64; 3] {
        let mut z = vec![0.0; self.n_dims()];
        self.eval_with(x, active, &mut z)
    }

    pub fn eval_all(&self, x: &[f64]) -> [f64; 3] {
        let mut z = vec![0.0; self.n_dims()];
        let mut c = [0.0; 3];
        for t in &self.terms {
            let g = t.density_with(x, &mut z);
            let w = t.weight();
            for ch in 0..3 {
                c[ch] += g * w[ch];
            }
        }
        c
    }
}

fn make_term(
    component: usize,
    kind: TermKind,
    mean: Vec<f64>,
    factor: LowerTriangular,
    mode: AmpMode,
    amp_raw: f64,
    color_raw: &[f64; 3],
) -> Term {
    Term {
        component,
        kind,
        mean,
        degenerate: is_degenerate(&factor),
        factor,
        amplitude: mode.activate(amp_raw),
        color: activate_color(color_raw),
    }
}

/// Mixture color at `x` over the `active` component indices; live children of
/// active components contribute too.
pub fn eval_mixture(mix: &Mixture, x: &[f64], active: &[usize]) -> Result<[f64; 3]> {
    if x.len() != mix.n_dims {
        return Err(Error::DimensionMismatch {
            expected: mix.n_dims,
            got: x.len(),
        });
    }
    for &i in active {
        if i >= mix.len() {
            return Err(Error::InvalidArgument(format!(
                "active index {i} out of range for {} components",
                mix.len()
            )));
        }
    }
    let ev = Evaluator::new(mix)?;
    let mut wanted = vec![false; mix.len()];
    for &i in active {
        wanted[i] = true;
    }
    let terms: Vec<usize> = (0..ev.len())
        .filter(|&t| wanted[ev.terms()[t].component])
        .collect();
    Ok(ev.eval(x, &terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::activation::sigmoid;
    use crate::gmm::factor::packed_len;

    fn unit(_n: usize, mean: Vec<f64>) -> GaussianParams {
        GaussianParams::isotropic(mean, 1.0, [0.0; 3], 0.0)
    }

    #[test]
    fn density_is_one_at_mean() {
        let g = unit(3, vec![0.2, 0.4, 0.6]);
        assert_eq!(eval_gaussian(&g, &[0.2, 0.4, 0.6]).unwrap(), 1.0);
    }

    #[test]
    fn unit_isotropic_offset() {
        let g = unit(3, vec![0.0; 3]);
        let v = eval_gaussian(&g, &[1.0, 0.0, 0.0]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn two_by_two_matches_explicit_inverse() {
        // L = [[2,0],[0.5,1]]: off-diagonal raw = logit(0.75), diagonal raw = ln 2, 0.
        let mut g = unit(2, vec![0.0, 0.0]);
        g.chol_raw = vec![2f64.ln(), (0.75f64 / 0.25).ln(), 0.0];
        let x = [1.0, 1.0];
        // V = [[4, 1], [1, 1.25]], det = 4, V⁻¹ = [[1.25, -1], [-1, 4]] / 4.
        let q = (1.25 - 1.0 - 1.0 + 4.0) / 4.0;
        let expect = (-0.5f64 * q).exp();
        let got = eval_gaussian(&g, &x).unwrap();
        assert!((got - expect).abs() < 1e-14 * expect, "{got} vs {expect}");
    }

    #[test]
    fn degenerate_contributes_zero() {
        let mut g = unit(2, vec![0.0, 0.0]);
        g.chol_raw[0] = -100.0;
        assert_eq!(eval_gaussian(&g, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn neutral_activations_give_half_grey() {
        let mix = Mixture::with_components(2, AmpMode::Brightness, vec![unit(2, vec![0.5, 0.5])])
            .unwrap();
        assert_eq!(eval_mixture(&mix, &[0.5, 0.5], &[0]).unwrap(), [0.5; 3]);
        let two = Mixture::with_components(
            2,
            AmpMode::Brightness,
            vec![unit(2, vec![0.5, 0.5]), unit(2, vec![0.5, 0.5])],
        )
        .unwrap();
        assert_eq!(eval_mixture(&two, &[0.5, 0.5], &[0, 1]).unwrap(), [1.0; 3]);
    }

    #[test]
    fn empty_active_set_is_black() {
        let mix = Mixture::with_components(2, AmpMode::Opacity, vec![unit(2, vec![0.5, 0.5])])
            .unwrap();
        assert_eq!(eval_mixture(&mix, &[0.5, 0.5], &[]).unwrap(), [0.0; 3]);
    }

    #[test]
    fn opacity_mode_uses_sigmoid() {
        let mut g = unit(1, vec![0.0]);
        g.amp_raw = 1.5;
        let mix = Mixture::with_components(1, AmpMode::Opacity, vec![g]).unwrap();
        let c = eval_mixture(&mix, &[0.0], &[0]).unwrap();
        assert!((c[0] - sigmoid(1.5) * 0.5).abs() < 1e-15);
    }

    #[test]
    fn neutral_child_reproduces_parent() {
        let mut g = unit(3, vec![0.1, 0.2, 0.3]);
        g.chol_raw = vec![0.3, 0.4, -0.2, -1.0, 0.9, 0.1];
        let child = ChildParams::neutral(3, [0.0; 3], 0.0);
        let (mean, factor) = compose_child(&g, &child).unwrap();
        assert_eq!(mean, g.mean_raw);
        let l = activate_cholesky(&g.chol_raw, 3).unwrap();
        for (a, b) in factor.packed().iter().zip(l.packed()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn scaled_relative_mean() {
        let mut g = unit(2, vec![0.0, 0.0]);
        g.chol_raw = vec![2f64.ln(), 0.0, 2f64.ln()];
        let mut child = ChildParams::neutral(2, [0.0; 3], 0.0);
        child.rel_mean_raw = vec![1.0, 0.0];
        let (mean, _) = compose_child(&g, &child).unwrap();
        assert!((mean[0] - 2.0).abs() < 1e-15);
        assert_eq!(mean[1], 0.0);
    }

    #[test]
    fn child_terms_follow_their_parent() {
        let mut g = unit(2, vec![0.0, 0.0]);
        g.child = Some(ChildParams::neutral(2, [0.0; 3], 0.0));
        let h = unit(2, vec![1.0, 1.0]);
        let mix = Mixture::with_components(2, AmpMode::Brightness, vec![g, h]).unwrap();
        let ev = Evaluator::new(&mix).unwrap();
        let kinds: Vec<_> = ev.terms().iter().map(|t| (t.component, t.kind)).collect();
        assert_eq!(
            kinds,
            vec![(0, TermKind::Parent), (0, TermKind::Child), (1, TermKind::Parent)]
        );
        // Live child doubles the contribution at the parent's mean.
        assert_eq!(eval_mixture(&mix, &[0.0, 0.0], &[0]).unwrap(), [1.0; 3]);
    }

    #[test]
    fn non_finite_mean_names_component() {
        let mut g = unit(2, vec![0.0, 0.0]);
        g.mean_raw[1] = f64::INFINITY;
        let mix = Mixture::with_components(2, AmpMode::Brightness, vec![unit(2, vec![0.0; 2]), g])
            .unwrap();
        match Evaluator::new(&mix).unwrap_err() {
            Error::InvalidParameter {
                component, block, entry, ..
            } => {
                assert_eq!(component, Some(1));
                assert_eq!(block, "mean");
                assert_eq!(entry, 1);
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn frozen_components_are_skipped() {
        let mut g = unit(2, vec![0.0, 0.0]);
        g.frozen = true;
        let mix = Mixture::with_components(2, AmpMode::Brightness, vec![g]).unwrap();
        assert!(Evaluator::new(&mix).unwrap().is_empty());
        assert_eq!(packed_len(2), 3);
    }
}
