//! Conservative culling of mixture terms per query tile.
//!
//! Every term and every tile query is projected onto `k` random unit vectors.
//! A term is culled from a tile when, on any vector, the tile's projected
//! interval lies more than `multiplier · σ_r` away from the projected mean,
//! with `σ_r² = rᵀ V r`. Since `|(q − m)·r| ≤ ‖L⁻¹(q − m)‖ · ‖Lᵀ r‖`, a culled
//! term has Mahalanobis distance above `multiplier` at every tile query.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::Evaluator;

/// Default number of projection vectors.
pub const DEFAULT_PROJECTIONS: usize = 16;
/// Default confidence multiplier.
pub const DEFAULT_MULTIPLIER: f64 = 3.0;
/// Default number of queries per tile (a 16×16 pixel block).
pub const DEFAULT_TILE_SIZE: usize = 256;

/// `k` random unit vectors in `R^N`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub n_dims: usize,
    pub seed: u64,
    vectors: Vec<f64>,
}

/// Draws `k` directions uniformly on the unit sphere by normalizing standard
/// normal vectors.
pub fn make_projection_set(n_dims: usize, k: usize, seed: u64) -> Result<ProjectionSet> {
    if n_dims == 0 || k == 0 {
        return Err(Error::InvalidArgument(
            "projection set needs n_dims >= 1 and k >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors = Vec::with_capacity(k * n_dims);
    while vectors.len() < k * n_dims {
        let v: Vec<f64> = (0..n_dims).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        vectors.extend(v.iter().map(|x| x / norm));
    }
    Ok(ProjectionSet {
        n_dims,
        seed,
        vectors,
    })
}

impl ProjectionSet {
    pub fn k(&self) -> usize {
        self.vectors.len() / self.n_dims
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.n_dims..(i + 1) * self.n_dims]
    }

    /// First `k` vectors of this set.
    pub fn truncated(&self, k: usize) -> ProjectionSet {
        let k = k.min(self.k()).max(1);
        ProjectionSet {
            n_dims: self.n_dims,
            seed: self.seed,
            vectors: self.vectors[..k * self.n_dims].to_vec(),
        }
    }

    #[inline]
    fn project_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, r) in out.iter_mut().zip(self.vectors.chunks_exact(self.n_dims)) {
            *o = r.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        self.project_into(x, &mut out);
        out
    }
}

/// Projected means and standard deviations of every term, term-major
/// (`k` consecutive values per term).
#[derive(Clone, Debug)]
pub struct ProjectedBounds {
    k: usize,
    means: Vec<f64>,
    sigmas: Vec<f64>,
}

impl ProjectedBounds {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_terms(&self) -> usize {
        self.means.len() / self.k
    }

    pub fn mean(&self, term: usize, proj: usize) -> f64 {
        self.means[term * self.k + proj]
    }

    pub fn sigma(&self, term: usize, proj: usize) -> f64 {
        self.sigmas[term * self.k + proj]
    }
}

/// Projects every term of `eval`: `m_r = mᵀ r` and `σ_r = ‖Lᵀ r‖`.
/// Degenerate terms get `σ_r = 0`.
pub fn project_components(eval: &Evaluator, ps: &ProjectionSet) -> ProjectedBounds {
    let k = ps.k();
    let per_term: Vec<(Vec<f64>, Vec<f64>)> = eval
        .terms()
        .par_iter()
        .map(|t| {
            let means = ps.project(&t.mean);
            let sigmas = (0..k)
                .map(|p| {
                    if t.degenerate {
                        0.0
                    } else {
                        let lt_r = t.factor.transpose_mul_vec(ps.vector(p));
                        lt_r.iter().map(|v| v * v).sum::<f64>().sqrt()
                    }
                })
                .collect();
            (means, sigmas)
        })
        .collect();
    let mut means = Vec::with_capacity(per_term.len() * k);
    let mut sigmas = Vec::with_capacity(per_term.len() * k);
    for (m, s) in per_term {
        means.extend(m);
        sigmas.extend(s);
    }
    ProjectedBounds { k, means, sigmas }
}

/// Per-vector `[min, max]` of `qᵀ r` over a tile's queries.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl TileBounds {
    /// Bounds of the queries stored row-major in `queries` (`n_dims` per row).
    pub fn from_queries(ps: &ProjectionSet, queries: &[f64]) -> Self {
        let k = ps.k();
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        let mut proj = vec![0.0; k];
        for q in queries.chunks_exact(ps.n_dims) {
            ps.project_into(q, &mut proj);
            for p in 0..k {
                lo[p] = lo[p].min(proj[p]);
                hi[p] = hi[p].max(proj[p]);
            }
        }
        Self { lo, hi }
    }

    pub fn contains(&self, projected: &[f64]) -> bool {
        projected
            .iter()
            .enumerate()
            .all(|(p, v)| self.lo[p] <= *v && *v <= self.hi[p])
    }
}

/// Term indices kept for one tile. A term is culled when, for any projection,
/// `max(lo − m_r, m_r − hi, 0) > multiplier · σ_r`.
pub fn cull_tile(tb: &TileBounds, pb: &ProjectedBounds, multiplier: f64) -> Vec<usize> {
    let k = pb.k;
    assert_eq!(tb.lo.len(), k, "tile bounds and projections disagree on k");
    let mut active = Vec::new();
    'terms: for term in 0..pb.n_terms() {
        let means = &pb.means[term * k..(term + 1) * k];
        let sigmas = &pb.sigmas[term * k..(term + 1) * k];
        for p in 0..k {
            let s = sigmas[p];
            if !(s > 0.0) {
                continue 'terms;
            }
            let m = means[p];
            let dist = (tb.lo[p] - m).max(m - tb.hi[p]).max(0.0);
            if dist > multiplier * s {
                continue 'terms;
            }
        }
        active.push(term);
    }
    active
}

/// Nondegenerate terms whose density reaches `epsilon` at some tile query.
pub fn brute_force_active(queries: &[f64], eval: &Evaluator, epsilon: f64) -> Vec<usize> {
    let n = eval.n_dims();
    let mut z = vec![0.0; n];
    eval.terms()
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.degenerate)
        .filter(|(_, t)| {
            queries
                .chunks_exact(n)
                .any(|q| t.density_with(q, &mut z) >= epsilon)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Contiguous tiles of `tile_size` queries covering `0..n_queries`.
pub fn tile_ranges(n_queries: usize, tile_size: usize) -> Vec<Range<usize>> {
    let tile_size = tile_size.max(1);
    (0..n_queries)
        .step_by(tile_size)
        .map(|s| s..(s + tile_size).min(n_queries))
        .collect()
}

/// Culling parameters.
#[derive(Clone, Debug)]
pub struct CullSettings {
    pub projections: ProjectionSet,
    pub multiplier: f64,
}

/// Active term sets per tile plus the fraction of (tile, term) pairs culled.
#[derive(Clone, Debug)]
pub struct ActiveSets {
    pub per_tile: Vec<Vec<usize>>,
    pub culled_fraction: f64,
}

/// Culls every tile of `queries`; `None` keeps every term everywhere.
pub fn active_sets(
    eval: &Evaluator,
    queries: &[f64],
    tiles: &[Range<usize>],
    settings: Option<&CullSettings>,
) -> ActiveSets {
    let n = eval.n_dims();
    let Some(settings) = settings else {
        return ActiveSets {
            per_tile: vec![eval.all_active(); tiles.len()],
            culled_fraction: 0.0,
        };
    };
    let pb = project_components(eval, &settings.projections);
    let per_tile: Vec<Vec<usize>> = tiles
        .par_iter()
        .map(|r| {
            let tb = TileBounds::from_queries(&settings.projections, &queries[r.start * n..r.end * n]);
            cull_tile(&tb, &pb, settings.multiplier)
        })
        .collect();
    let total = eval.len() * tiles.len();
    let kept: usize = per_tile.iter().map(Vec::len).sum();
    let culled_fraction = if total == 0 {
        0.0
    } else {
        1.0 - kept as f64 / total as f64
    };
    ActiveSets {
        per_tile,
        culled_fraction,
    }
}

/// Evaluates the mixture at every query, each tile restricted to its active set.
pub fn eval_tiles(
    eval: &Evaluator,
    queries: &[f64],
    tiles: &[Range<usize>],
    active: &[Vec<usize>],
) -> Vec<[f64; 3]> {
    let n = eval.n_dims();
    let per_tile: Vec<Vec<[f64; 3]>> = tiles
        .par_iter()
        .zip(active)
        .map(|(r, act)| {
            let mut z = vec![0.0; n];
            queries[r.start * n..r.end * n]
                .chunks_exact(n)
                .map(|q| eval.eval_with(q, act, &mut z))
                .collect()
        })
        .collect();
    per_tile.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{AmpMode, GaussianParams, Mixture};

    fn mixture(comps: Vec<GaussianParams>) -> Mixture {
        let n = comps[0].n_dims();
        Mixture::with_components(n, AmpMode::Brightness, comps).unwrap()
    }

    fn axis_set() -> ProjectionSet {
        ProjectionSet {
            n_dims: 2,
            seed: 0,
            vectors: vec![1.0, 0.0],
        }
    }

    #[test]
    fn projection_sets_are_deterministic_unit_vectors() {
        let a = make_projection_set(3, 4, 7).unwrap();
        let b = make_projection_set(3, 4, 7).unwrap();
        assert_eq!(a, b);
        for i in 0..a.k() {
            let norm: f64 = a.vector(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert!(make_projection_set(0, 1, 0).is_err());
        assert!(make_projection_set(1, 0, 0).is_err());
    }

    #[test]
    fn isotropic_sigma_is_one() {
        let mix = mixture(vec![GaussianParams::isotropic(vec![0.0; 3], 1.0, [0.0; 3], 0.0)]);
        let ev = Evaluator::new(&mix).unwrap();
        let ps = make_projection_set(3, 5, 1).unwrap();
        let pb = project_components(&ev, &ps);
        for p in 0..5 {
            assert!((pb.sigma(0, p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_aligned_sigma() {
        let mut g = GaussianParams::isotropic(vec![0.0; 2], 1.0, [0.0; 3], 0.0);
        g.chol_raw = vec![2f64.ln(), 0.0, 0.0];
        let mix = mixture(vec![g]);
        let ev = Evaluator::new(&mix).unwrap();
        let pb = project_components(&ev, &axis_set());
        assert!((pb.sigma(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn axis_cull_cases() {
        let mix = mixture(vec![GaussianParams::isotropic(vec![0.0; 2], 1.0, [0.0; 3], 0.0)]);
        let ev = Evaluator::new(&mix).unwrap();
        let ps = axis_set();
        let pb = project_components(&ev, &ps);
        let far = TileBounds::from_queries(&ps, &[4.0, 0.0]);
        assert!(cull_tile(&far, &pb, 3.0).is_empty());
        let near = TileBounds::from_queries(&ps, &[2.0, 0.0]);
        assert_eq!(cull_tile(&near, &pb, 3.0), vec![0]);
    }

    #[test]
    fn degenerate_terms_are_always_culled() {
        let mut g = GaussianParams::isotropic(vec![0.0; 2], 1.0, [0.0; 3], 0.0);
        g.chol_raw[0] = -200.0;
        let mix = mixture(vec![g]);
        let ev = Evaluator::new(&mix).unwrap();
        let ps = axis_set();
        let pb = project_components(&ev, &ps);
        assert_eq!(pb.sigma(0, 0), 0.0);
        let tb = TileBounds::from_queries(&ps, &[0.0, 0.0]);
        assert!(cull_tile(&tb, &pb, 3.0).is_empty());
        assert!(brute_force_active(&[0.0, 0.0], &ev, 0.0).is_empty());
    }

    #[test]
    fn brute_force_thresholds() {
        let mix = mixture(vec![
            GaussianParams::isotropic(vec![0.0; 2], 1.0, [0.0; 3], 0.0),
            GaussianParams::isotropic(vec![50.0; 2], 1.0, [0.0; 3], 0.0),
        ]);
        let ev = Evaluator::new(&mix).unwrap();
        assert_eq!(brute_force_active(&[0.0, 0.0], &ev, 0.0), vec![0, 1]);
        assert_eq!(brute_force_active(&[0.0, 0.0], &ev, (-4.5f64).exp()), vec![0]);
    }

    #[test]
    fn tile_ranges_cover_exactly_once() {
        let r = tile_ranges(10, 4);
        assert_eq!(r, vec![0..4, 4..8, 8..10]);
        assert_eq!(tile_ranges(8, 8), vec![0..8]);
        assert!(tile_ranges(0, 8).is_empty());
    }
}
