//! Relative L2 loss and its analytic gradient with respect to every raw
//! parameter, plus a central finite-difference oracle.
//!
//! The loss is `mean((p − t)² / (p̂² + eps))` where `p̂` is the prediction held
//! constant: no gradient flows through the denominator.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::culling::eval_tiles;
use crate::datasets::QueryBatch;
use crate::error::{Error, Result};
use crate::gmm::{
    activate_cholesky, activate_child_factor, cholesky_activation_derivative, packed_index,
    packed_len, AmpMode, ChildParams, Evaluator, GaussianParams, Mixture,
    ParamBlock, ParamCoord, ParamLayout, TermKind,
};

/// Default `eps` in the loss denominator.
pub const DEFAULT_LOSS_EPS: f64 = 0.01;

/// `mean over entries of (pred − target)² / (pred² + eps)`.
pub fn loss_rel_l2(pred: &[[f64; 3]], target: &[[f64; 3]], eps: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "batch sizes differ");
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| (0..3).map(move |c| (p[c], t[c])))
        .map(|(p, t)| (p - t) * (p - t) / (p * p + eps))
        .sum();
    sum / (3 * pred.len()) as f64
}

/// Gradients of one component and its child, in [`ParamLayout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotGrads {
    pub parent: Vec<f64>,
    pub child: Option<Vec<f64>>,
}

/// Per-component gradient accumulators, layout-congruent with a mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub layout: ParamLayout,
    pub components: Vec<SlotGrads>,
}

impl GradientBuffer {
    pub fn zeros_like(mix: &Mixture) -> Self {
        let layout = mix.layout();
        let components = mix
            .components
            .iter()
            .map(|c| SlotGrads {
                parent: vec![0.0; layout.len()],
                child: c.child.as_ref().map(|_| vec![0.0; layout.len()]),
            })
            .collect();
        Self { layout, components }
    }

    pub fn get(&self, coord: ParamCoord) -> f64 {
        let slot = &self.components[coord.component];
        let flat = if coord.child {
            slot.child.as_ref().expect("component has no child")
        } else {
            &slot.parent
        };
        flat[self.layout.range(coord.block).start + coord.index]
    }

    pub fn scale(&mut self, factor: f64) {
        for s in &mut self.components {
            s.parent.iter_mut().for_each(|g| *g *= factor);
            if let Some(c) = &mut s.child {
                c.iter_mut().for_each(|g| *g *= factor);
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|s| s.parent.iter().chain(s.child.iter().flatten()))
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Output of [`backward`].
#[derive(Clone, Debug)]
pub struct Backward {
    pub loss: f64,
    pub grads: GradientBuffer,
    pub predictions: Vec<[f64; 3]>,
}

/// Gradient of the loss with respect to one term's absolute quantities.
#[derive(Clone, Debug)]
struct TermGrad {
    mean: Vec<f64>,
    factor: Vec<f64>,
    weight: [f64; 3],
}

impl TermGrad {
    fn zeros(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            factor: vec![0.0; packed_len(n)],
            weight: [0.0; 3],
        }
    }

    fn add(&mut self, other: &TermGrad) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a += b;
        }
        for (a, b) in self.factor.iter_mut().zip(&other.factor) {
            *a += b;
        }
        for c in 0..3 {
            self.weight[c] += other.weight[c];
        }
    }
}

/// `dL/dp` per prediction entry with the detached denominator.
#[inline]
fn output_grad(p: &[f64; 3], t: &[f64; 3], eps: f64, norm: f64) -> ([f64; 3], f64) {
    let mut g = [0.0; 3];
    let mut loss = 0.0;
    for c in 0..3 {
        let w = 1.0 / (p[c] * p[c] + eps);
        let r = p[c] - t[c];
        loss += w * r * r;
        g[c] = 2.0 * w * r * norm;
    }
    (g, loss)
}

/// Loss and gradients over `batch`, each tile restricted to its active term
/// set. Partial sums are reduced in tile order so results are reproducible.
pub fn backward(
    eval: &Evaluator,
    batch: &QueryBatch,
    active: &[Vec<usize>],
    eps: f64,
) -> Result<Backward> {
    let n = eval.n_dims();
    if batch.n_dims != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: batch.n_dims,
        });
    }
    let tiles = batch.tiles();
    if tiles.len() != active.len() {
        return Err(Error::InvalidArgument(format!(
            "{} active sets for {} tiles",
            active.len(),
            tiles.len()
        )));
    }
    let predictions = eval_tiles(eval, &batch.queries, &tiles, active);
    let norm = 1.0 / (3 * batch.len().max(1)) as f64;

    let partials: Vec<(f64, Vec<TermGrad>)> = tiles
        .par_iter()
        .zip(active)
        .map(|(r, act)| tile_backward(eval, batch, &predictions, r.clone(), act, eps, norm))
        .collect();

    let mut loss = 0.0;
    let mut term_grads = vec![TermGrad::zeros(n); eval.len()];
    for ((tile_loss, partial), act) in partials.iter().zip(active) {
        loss += tile_loss;
        for (g, &ti) in partial.iter().zip(act) {
            term_grads[ti].add(g);
        }
    }
    loss *= norm;

    let grads = chain_to_raw(eval, &term_grads)?;
    if let Some(first) = first_non_finite(&grads) {
        let (component, child, block) = overflowed_term(eval).unwrap_or(first);
        let batch_index = locate_non_finite(eval, batch, &predictions, &tiles, active, eps, component);
        return Err(Error::NonFiniteGradient {
            component,
            block: block.name(child),
            batch_index,
        });
    }
    Ok(Backward {
        loss,
        grads,
        predictions,
    })
}

fn tile_backward(
    eval: &Evaluator,
    batch: &QueryBatch,
    predictions: &[[f64; 3]],
    range: Range<usize>,
    act: &[usize],
    eps: f64,
    norm: f64,
) -> (f64, Vec<TermGrad>) {
    let n = eval.n_dims();
    let terms = eval.terms();
    let mut acc = vec![TermGrad::zeros(n); act.len()];
    let mut z = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut loss = 0.0;
    for b in range {
        let q = batch.query(b);
        let (gp, l) = output_grad(&predictions[b], &batch.targets[b], eps, norm);
        loss += l;
        for (slot, &ti) in acc.iter_mut().zip(act) {
            let t = &terms[ti];
            let g = t.density_with(q, &mut z);
            if g == 0.0 {
                continue;
            }
            let w = t.weight();
            let gbar = gp[0] * w[0] + gp[1] * w[1] + gp[2] * w[2];
            for c in 0..3 {
                slot.weight[c] += g * gp[c];
            }
            // dL/dz = −gbar·g·z; dL/d(x − m) = L⁻ᵀ dL/dz.
            let coef = -gbar * g;
            for (yi, zi) in y.iter_mut().zip(&z) {
                *yi = coef * zi;
            }
            t.factor.solve_transpose_in_place(&mut y);
            for i in 0..n {
                slot.mean[i] -= y[i];
                let row = packed_index(i, 0);
                let yi = y[i];
                for j in 0..=i {
                    slot.factor[row + j] -= yi * z[j];
                }
            }
        }
    }
    (loss, acc)
}

/// Chains term-level gradients through child composition and activations.
fn chain_to_raw(eval: &Evaluator, term_grads: &[TermGrad]) -> Result<GradientBuffer> {
    let mix = eval.mixture();
    let n = mix.n_dims;
    let layout = mix.layout();
    let mode = mix.amp_mode;
    let mut buf = GradientBuffer::zeros_like(mix);
    let terms = eval.terms();

    let mut ti = 0;
    while ti < terms.len() {
        let ci = terms[ti].component;
        let comp = &mix.components[ci];
        let l = &terms[ti].factor;
        let mut d_l = term_grads[ti].factor.clone();
        let slot = &mut buf.components[ci];

        slot.parent[layout.range(ParamBlock::Mean)].copy_from_slice(&term_grads[ti].mean);
        write_weight_grads(&mut slot.parent, layout, mode, comp.amp_raw, &comp.color_raw, &term_grads[ti].weight);

        let has_child = ti + 1 < terms.len()
            && terms[ti + 1].component == ci
            && terms[ti + 1].kind == TermKind::Child;
        if has_child {
            let child = comp.child.as_ref().expect("child term without child params");
            let tg = &term_grads[ti + 1];
            let u = activate_child_factor(child, n).map_err(|e| e.for_component(ci))?;
            let cslot = slot.child.as_mut().expect("child gradient slot");

            // m_c = L m_u + m_p
            for (a, b) in slot.parent[layout.range(ParamBlock::Mean)].iter_mut().zip(&tg.mean) {
                *a += b;
            }
            let d_mu = l.transpose_mul_vec(&tg.mean);
            cslot[layout.range(ParamBlock::Mean)].copy_from_slice(&d_mu);
            for i in 0..n {
                for j in 0..=i {
                    d_l[packed_index(i, j)] += tg.mean[i] * child.rel_mean_raw[j];
                }
            }

            // F_c = L U: dL += lower(dF Uᵀ), dU = lower(Lᵀ dF).
            let d_f = &tg.factor;
            let mut d_u = vec![0.0; packed_len(n)];
            for i in 0..n {
                for j in 0..=i {
                    let mut s = 0.0;
                    for k in 0..=j {
                        s += d_f[packed_index(i, k)] * u.get(j, k);
                    }
                    d_l[packed_index(i, j)] += s;

                    let mut s = 0.0;
                    for k in i..n {
                        s += l.get(k, i) * d_f[packed_index(k, j)];
                    }
                    d_u[packed_index(i, j)] = s;
                }
            }
            let du_raw = cholesky_activation_derivative(&child.rel_chol_raw, &u);
            for ((dst, g), d) in cslot[layout.range(ParamBlock::Chol)]
                .iter_mut()
                .zip(&d_u)
                .zip(&du_raw)
            {
                *dst = g * d;
            }
            write_weight_grads(cslot, layout, mode, child.amp_raw, &child.color_raw, &tg.weight);
        }

        let dl_raw = cholesky_activation_derivative(&comp.chol_raw, l);
        for ((dst, g), d) in slot.parent[layout.range(ParamBlock::Chol)]
            .iter_mut()
            .zip(&d_l)
            .zip(&dl_raw)
        {
            *dst = g * d;
        }
        ti += if has_child { 2 } else { 1 };
    }
    Ok(buf)
}

fn write_weight_grads(
    flat: &mut [f64],
    layout: ParamLayout,
    mode: AmpMode,
    amp_raw: f64,
    color_raw: &[f64; 3],
    d_weight: &[f64; 3],
) {
    let a = mode.activate(amp_raw);
    let color = crate::gmm::activate_color(color_raw);
    let d_a: f64 = (0..3).map(|c| d_weight[c] * color[c]).sum();
    flat[layout.range(ParamBlock::Amp).start] = d_a * mode.derivative(a);
    let cr = layout.range(ParamBlock::Color);
    for c in 0..3 {
        flat[cr.start + c] = d_weight[c] * a * color[c] * (1.0 - color[c]);
    }
}

fn first_non_finite(buf: &GradientBuffer) -> Option<(usize, bool, ParamBlock)> {
    for (ci, s) in buf.components.iter().enumerate() {
        if let Some(i) = s.parent.iter().position(|g| !g.is_finite()) {
            return Some((ci, false, buf.layout.block_of(i)));
        }
        if let Some(c) = &s.child {
            if let Some(i) = c.iter().position(|g| !g.is_finite()) {
                return Some((ci, true, buf.layout.block_of(i)));
            }
        }
    }
    None
}

/// A term whose activated values overflowed. Such a term turns every
/// gradient non-finite, so it is the one to report.
fn overflowed_term(eval: &Evaluator) -> Option<(usize, bool, ParamBlock)> {
    eval.terms().iter().find_map(|t| {
        let child = t.kind == TermKind::Child;
        let block = if !t.amplitude.is_finite() {
            ParamBlock::Amp
        } else if t.color.iter().any(|v| !v.is_finite()) {
            ParamBlock::Color
        } else if t.mean.iter().any(|v| !v.is_finite()) {
            ParamBlock::Mean
        } else if t.factor.packed().iter().any(|v| !v.is_finite()) {
            ParamBlock::Chol
        } else {
            return None;
        };
        Some((t.component, child, block))
    })
}

/// First batch index whose contribution to `component` is non-finite.
fn locate_non_finite(
    eval: &Evaluator,
    batch: &QueryBatch,
    predictions: &[[f64; 3]],
    tiles: &[Range<usize>],
    active: &[Vec<usize>],
    eps: f64,
    component: usize,
) -> usize {
    let norm = 1.0 / (3 * batch.len().max(1)) as f64;
    for (r, act) in tiles.iter().zip(active) {
        let own: Vec<usize> = act
            .iter()
            .copied()
            .filter(|&t| eval.terms()[t].component == component)
            .collect();
        for b in r.clone() {
            let (_, partial) = tile_backward(eval, batch, predictions, b..b + 1, &own, eps, norm);
            let bad = partial.iter().any(|g| {
                g.mean.iter().chain(&g.factor).chain(&g.weight).any(|v| !v.is_finite())
            });
            if bad || !predictions[b].iter().all(|v| v.is_finite()) {
                return b;
            }
        }
    }
    0
}

/// Loss with the denominator pinned to `weights_from` predictions.
fn detached_loss(mix: &Mixture, batch: &QueryBatch, pinned: &[[f64; 3]], eps: f64) -> Result<f64> {
    let ev = Evaluator::new(mix)?;
    let all = ev.all_active();
    let mut z = vec![0.0; mix.n_dims];
    let mut sum = 0.0;
    for b in 0..batch.len() {
        let p = ev.eval_with(batch.query(b), &all, &mut z);
        let t = batch.targets[b];
        for c in 0..3 {
            let w = 1.0 / (pinned[b][c] * pinned[b][c] + eps);
            sum += w * (p[c] - t[c]) * (p[c] - t[c]);
        }
    }
    Ok(sum / (3 * batch.len().max(1)) as f64)
}

/// Central difference `(L(θ+h) − L(θ−h)) / 2h` of one raw coordinate with
/// every term active. The loss denominator is held at the unperturbed
/// prediction, matching the detached convention of [`backward`].
pub fn finite_diff_grad(
    mix: &Mixture,
    batch: &QueryBatch,
    coord: ParamCoord,
    h: f64,
    eps: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let base = {
        let ev = Evaluator::new(mix)?;
        let all = ev.all_active();
        let mut z = vec![0.0; mix.n_dims];
        (0..batch.len())
            .map(|b| ev.eval_with(batch.query(b), &all, &mut z))
            .collect::<Vec<_>>()
    };
    let mut probe = mix.clone();
    let x0 = mix
        .param(coord)
        .ok_or_else(|| Error::InvalidArgument(format!("no parameter at {coord:?}")))?;
    *probe.param_mut(coord).unwrap() = x0 + h;
    let up = detached_loss(&probe, batch, &base, eps)?;
    *probe.param_mut(coord).unwrap() = x0 - h;
    let down = detached_loss(&probe, batch, &base, eps)?;
    Ok((up - down) / (2.0 * h))
}

/// Relative error with an absolute floor: the ratio is below `rel_tol`
/// exactly when `|a − b| < max(rel_tol · max(|a|, |b|), abs_floor)`.
pub fn relative_error(a: f64, b: f64, rel_tol: f64, abs_floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(abs_floor / rel_tol)
}

/// Settings for [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub dims: Vec<usize>,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub loss_eps: f64,
    /// Scales every analytic gradient by this factor before comparing;
    /// `1.0` for a genuine check.
    pub corrupt_scale: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100,
            dims: vec![2, 4, 8, 10],
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            loss_eps: DEFAULT_LOSS_EPS,
            corrupt_scale: 1.0,
        }
    }
}

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub n_dims: usize,
    pub mode: AmpMode,
    pub trial: usize,
    pub coord: ParamCoord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub closed_form_error: f64,
    /// Worst coordinates, largest error first.
    pub worst: Vec<GradcheckEntry>,
    pub rel_tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.rel_tol && self.closed_form_error < self.rel_tol
    }
}

const OFFDIAG_SPREAD: f64 = 0.6;

/// Random mixture with live, non-neutral children for gradient checks.
pub fn random_mixture(rng: &mut impl Rng, n: usize, n_comp: usize, mode: AmpMode) -> Mixture {
    // Off-diagonal spread shrinks with N so the strictly lower part of each
    // row stays comparable to its diagonal and covariances stay well
    // conditioned in every dimension.
    let off = Normal::new(0.0, OFFDIAG_SPREAD / (n as f64).sqrt()).unwrap();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let amp_raw = |rng: &mut dyn rand::RngCore| match mode {
        AmpMode::Brightness => rng.random_range(0.2f64..1.0).ln(),
        AmpMode::Opacity => rng.random_range(-1.5..1.5),
    };
    let comps = (0..n_comp)
        .map(|_| {
            let mean = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
            let mut chol_raw = vec![0.0; packed_len(n)];
            for i in 0..n {
                for j in 0..=i {
                    chol_raw[packed_index(i, j)] = if i == j {
                        rng.random_range(0.15f64..0.45).ln()
                    } else {
                        off.sample(rng)
                    };
                }
            }
            let color_raw = [unit.sample(rng), unit.sample(rng), unit.sample(rng)];
            let mut rel_chol_raw = vec![0.0; packed_len(n)];
            for i in 0..n {
                for j in 0..=i {
                    rel_chol_raw[packed_index(i, j)] = if i == j {
                        rng.random_range(-0.4..0.2)
                    } else {
                        off.sample(rng)
                    };
                }
            }
            let child = ChildParams {
                rel_mean_raw: (0..n).map(|_| 0.5 * unit.sample(rng)).collect(),
                rel_chol_raw,
                color_raw: [unit.sample(rng), unit.sample(rng), unit.sample(rng)],
                amp_raw: amp_raw(rng),
            };
            GaussianParams {
                mean_raw: mean,
                chol_raw,
                color_raw,
                amp_raw: amp_raw(rng),
                child: Some(child),
                frozen: false,
            }
        })
        .collect();
    Mixture::with_components(n, mode, comps).expect("consistent dimensions")
}

/// Queries scattered around the mixture's components with random targets.
pub fn random_batch(rng: &mut impl Rng, mix: &Mixture, n_queries: usize) -> QueryBatch {
    let n = mix.n_dims;
    let mut queries = Vec::with_capacity(n_queries * n);
    for b in 0..n_queries {
        let comp = &mix.components[b % mix.len()];
        let l = activate_cholesky(&comp.chol_raw, n).expect("finite factor");
        let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let off = l.mul_vec(&e);
        queries.extend(comp.mean_raw.iter().zip(&off).map(|(m, o)| m + o));
    }
    let targets = (0..n_queries)
        .map(|_| {
            [
                rng.random_range(0.0..0.8),
                rng.random_range(0.0..0.8),
                rng.random_range(0.0..0.8),
            ]
        })
        .collect();
    QueryBatch::new(n, queries, targets, n_queries.max(1))
}

/// Closed-form derivative for one 1-D component, one query, Brightness mode,
/// returned as `(dL/dmean, dL/dchol_raw)`.
fn closed_form_1d(mean: f64, log_scale: f64, amp_raw: f64, color_raw: [f64; 3], x: f64, t: [f64; 3], eps: f64) -> (f64, f64) {
    let ell = log_scale.exp();
    let a = amp_raw.exp();
    let u = (x - mean) / ell;
    let g = (-0.5 * u * u).exp();
    let mut dm = 0.0;
    let mut dr = 0.0;
    for c in 0..3 {
        let col = crate::gmm::sigmoid(color_raw[c]);
        let p = g * a * col;
        let w = 1.0 / (p * p + eps);
        let dp = 2.0 * w * (p - t[c]) / 3.0;
        // dg/dm = g·(x−m)/ℓ², dg/dr = g·(x−m)²/ℓ².
        dm += dp * a * col * g * (x - mean) / (ell * ell);
        dr += dp * a * col * g * u * u;
    }
    (dm, dr)
}

/// Analytic-vs-numeric comparison over random mixtures.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries: Vec<GradcheckEntry> = Vec::new();
    let mut coordinates = 0;

    for &n in &opts.dims {
        for mode in [AmpMode::Brightness, AmpMode::Opacity] {
            for trial in 0..opts.trials {
                let n_comp = rng.random_range(1..=3);
                let mix = random_mixture(&mut rng, n, n_comp, mode);
                let batch = random_batch(&mut rng, &mix, 8);
                let ev = Evaluator::new(&mix)?;
                let active = vec![ev.all_active(); batch.tiles().len()];
                let mut bw = backward(&ev, &batch, &active, opts.loss_eps)?;
                bw.grads.scale(opts.corrupt_scale);
                for coord in mix.coords() {
                    let analytic = bw.grads.get(coord);
                    let numeric = finite_diff_grad(&mix, &batch, coord, opts.step, opts.loss_eps)?;
                    let rel_error = relative_error(analytic, numeric, opts.rel_tol, opts.abs_floor);
                    coordinates += 1;
                    entries.push(GradcheckEntry {
                        n_dims: n,
                        mode,
                        trial,
                        coord,
                        analytic,
                        numeric,
                        rel_error,
                    });
                }
                // Keep memory bounded: only the worst few matter.
                if entries.len() > 4096 {
                    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
                    entries.truncate(16);
                }
            }
        }
    }

    let mut closed_form_error: f64 = 0.0;
    for _ in 0..opts.trials.max(1) {
        let mean = rng.random_range(0.2..0.8);
        let log_scale = rng.random_range(0.1f64..0.5).ln();
        let amp_raw = rng.random_range(0.2f64..1.0).ln();
        let color_raw = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let x = mean + rng.random_range(-0.5..0.5);
        let t = [rng.random_range(0.0..0.8), rng.random_range(0.0..0.8), rng.random_range(0.0..0.8)];
        let mix = Mixture::with_components(
            1,
            AmpMode::Brightness,
            vec![GaussianParams {
                mean_raw: vec![mean],
                chol_raw: vec![log_scale],
                color_raw,
                amp_raw,
                child: None,
                frozen: false,
            }],
        )?;
        let batch = QueryBatch::new(1, vec![x], vec![t], 1);
        let ev = Evaluator::new(&mix)?;
        let mut bw = backward(&ev, &batch, &[vec![0]], opts.loss_eps)?;
        bw.grads.scale(opts.corrupt_scale);
        let (dm, dr) = closed_form_1d(mean, log_scale, amp_raw, color_raw, x, t, opts.loss_eps);
        let coord = |block| ParamCoord {
            component: 0,
            child: false,
            block,
            index: 0,
        };
        closed_form_error = closed_form_error
            .max(relative_error(bw.grads.get(coord(ParamBlock::Mean)), dm, opts.rel_tol, opts.abs_floor))
            .max(relative_error(bw.grads.get(coord(ParamBlock::Chol)), dr, opts.rel_tol, opts.abs_floor));
    }

    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    entries.truncate(16);
    Ok(GradcheckReport {
        max_rel_error: entries.first().map_or(0.0, |e| e.rel_error),
        coordinates,
        closed_form_error,
        worst: entries,
        rel_tol: opts.rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_is_zero_at_target() {
        let p = vec![[0.1, 0.2, 0.3], [1.0, 2.0, 3.0]];
        assert_eq!(loss_rel_l2(&p, &p, 0.01), 0.0);
    }

    #[test]
    fn loss_closed_form() {
        let l = loss_rel_l2(&[[0.0; 3]], &[[1.0; 3]], 0.01);
        assert!((l - 100.0).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<[f64; 3]> = (0..50).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let t: Vec<[f64; 3]> = (0..50).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..50 {
            for c in 0..3 {
                let d = p[i][c] - t[i][c];
                sum += d * d / (p[i][c] * p[i][c] + 0.05);
                count += 1.0;
            }
        }
        assert!((loss_rel_l2(&p, &t, 0.05) - sum / count).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_at_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mix = random_mixture(&mut rng, 3, 2, AmpMode::Brightness);
        let mut batch = random_batch(&mut rng, &mix, 6);
        let ev = Evaluator::new(&mix).unwrap();
        batch.targets = (0..batch.len()).map(|b| ev.eval_all(batch.query(b))).collect();
        let bw = backward(&ev, &batch, &[ev.all_active()], 0.01).unwrap();
        assert_eq!(bw.loss, 0.0);
        assert_eq!(bw.grads.max_abs(), 0.0);
    }

    #[test]
    fn culled_terms_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mix = random_mixture(&mut rng, 2, 3, AmpMode::Opacity);
        let batch = random_batch(&mut rng, &mix, 9);
        let ev = Evaluator::new(&mix).unwrap();
        // Keep only component 0 and its child.
        let keep: Vec<usize> = (0..ev.len()).filter(|&t| ev.terms()[t].component == 0).collect();
        let bw = backward(&ev, &batch, &[keep], 0.01).unwrap();
        for ci in 1..3 {
            let s = &bw.grads.components[ci];
            assert!(s.parent.iter().all(|&g| g == 0.0));
            assert!(s.child.as_ref().unwrap().iter().all(|&g| g == 0.0));
        }
        assert!(bw.grads.components[0].parent.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn matches_finite_differences_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [AmpMode::Brightness, AmpMode::Opacity] {
            let mix = random_mixture(&mut rng, 3, 2, mode);
            let batch = random_batch(&mut rng, &mix, 8);
            let ev = Evaluator::new(&mix).unwrap();
            let bw = backward(&ev, &batch, &[ev.all_active()], 0.01).unwrap();
            for coord in mix.coords() {
                let fd = finite_diff_grad(&mix, &batch, coord, 1e-4, 0.01).unwrap();
                let err = relative_error(bw.grads.get(coord), fd, 1e-4, 1e-6);
                assert!(err < 1e-4, "{coord:?}: {} vs {fd}", bw.grads.get(coord));
            }
        }
    }

    #[test]
    fn parent_factor_receives_gradient_through_child() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mix = random_mixture(&mut rng, 2, 1, AmpMode::Brightness);
        let batch = random_batch(&mut rng, &mix, 8);
        // Silence the parent so its own term carries no gradient.
        mix.components[0].amp_raw = -800.0;
        let ev = Evaluator::new(&mix).unwrap();
        let bw = backward(&ev, &batch, &[ev.all_active()], 0.01).unwrap();
        let coord = ParamCoord {
            component: 0,
            child: false,
            block: ParamBlock::Chol,
            index: 1,
        };
        let analytic = bw.grads.get(coord);
        assert!(analytic.abs() > 1e-8);
        let fd = finite_diff_grad(&mix, &batch, coord, 1e-4, 0.01).unwrap();
        assert!(relative_error(analytic, fd, 1e-4, 1e-6) < 1e-4);
    }

    #[test]
    fn finite_differences_are_second_order() {
        // Quadratic in the mean along one axis: error vs a reference step shrinks ~4x.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mix = random_mixture(&mut rng, 2, 1, AmpMode::Brightness);
        let batch = random_batch(&mut rng, &mix, 4);
        let coord = ParamCoord {
            component: 0,
            child: false,
            block: ParamBlock::Mean,
            index: 0,
        };
        let exact = finite_diff_grad(&mix, &batch, coord, 1e-5, 0.01).unwrap();
        let e1 = (finite_diff_grad(&mix, &batch, coord, 2e-2, 0.01).unwrap() - exact).abs();
        let e2 = (finite_diff_grad(&mix, &batch, coord, 1e-2, 0.01).unwrap() - exact).abs();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mix = random_mixture(&mut rng, 2, 1, AmpMode::Brightness);
        let batch = random_batch(&mut rng, &mix, 2);
        let coord = mix.coords()[0];
        assert!(finite_diff_grad(&mix, &batch, coord, 0.0, 0.01).is_err());
    }

    #[test]
    fn detached_gradient_is_scaled_l2_gradient() {
        // d/dp of (p−t)²/(p̂²+eps) at p = p̂ equals 2(p−t)/(p̂²+eps).
        let (g, _) = output_grad(&[0.5, 0.1, 2.0], &[0.2, 0.4, 1.0], 0.01, 1.0);
        let expect = [0.6 / 0.26, -0.6 / 0.02, 2.0 / 4.01];
        for c in 0..3 {
            assert!((g[c] - expect[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mix = random_mixture(&mut rng, 2, 2, AmpMode::Brightness);
        let batch = random_batch(&mut rng, &mix, 4);
        mix.components[1].amp_raw = 800.0;
        let ev = Evaluator::new(&mix).unwrap();
        match backward(&ev, &batch, &[ev.all_active()], 0.01) {
            Err(Error::NonFiniteGradient { component, .. }) => assert_eq!(component, 1),
            other => panic!("{other:?}"),
        }
    }
}
