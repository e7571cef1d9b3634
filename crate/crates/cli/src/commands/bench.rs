//! Culling benchmark on an inference-shaped workload.
//!
//! Queries are the pixels of a square image slice through the unit cube
//! (dimensions 0 and 1 sweep the image, the rest sit at a random base
//! point). Tiles are square pixel blocks. Component means are scattered near
//! the slice, like a fitted mixture sitting on the data it was trained on.

use std::collections::HashMap;
use std::ops::Range;
use std::path::PathBuf;
use std::time::Instant;

use ndgauss::culling::{active_sets, brute_force_active, eval_tiles, make_projection_set, CullSettings};
use ndgauss::gmm::{logit, packed_index, packed_len, AmpMode, Evaluator, GaussianParams, Mixture};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::{BenchSection, Population, RunConfig};
use crate::error::CliError;

/// Density below which a component counts as not contributing to a query:
/// the 3σ level, `exp(−4.5)`.
pub fn reference_epsilon() -> f64 {
    (-4.5f64).exp()
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BenchRow {
    pub population: &'static str,
    pub tile_size: usize,
    pub k: usize,
    pub multiplier: f64,
    pub components: usize,
    pub queries: usize,
    pub cull_fraction: f64,
    /// (tile, component) pairs culled although the component reaches the
    /// reference density somewhere in the tile.
    pub false_culls: usize,
    /// Largest per-channel deviation from the unculled output.
    pub max_abs_error: f64,
    pub brute_ms: f64,
    pub culled_ms: f64,
    pub speedup: f64,
}

/// Query points of a `size`×`size` slice, ordered so that each run of
/// `tile_size` queries is a square pixel block.
pub fn slice_queries(size: usize, tile_size: usize, base: &[f64]) -> Result<Vec<f64>, CliError> {
    let side = (tile_size as f64).sqrt().round() as usize;
    if side * side != tile_size || !size.is_multiple_of(side) {
        return Err(CliError::Usage(format!(
            "tile size {tile_size} must be a square whose side divides the image size {size}"
        )));
    }
    let n = base.len();
    let mut out = Vec::with_capacity(size * size * n);
    for by in (0..size).step_by(side) {
        for bx in (0..size).step_by(side) {
            for y in by..by + side {
                for x in bx..bx + side {
                    let mut q = base.to_vec();
                    q[0] = (x as f64 + 0.5) / size as f64;
                    q[1] = (y as f64 + 0.5) / size as f64;
                    out.extend(q);
                }
            }
        }
    }
    Ok(out)
}

/// Random mixture scattered around the slice through `base`.
pub fn population_mixture(pop: Population, count: usize, base: &[f64], rng: &mut ChaCha8Rng) -> Mixture {
    let n = base.len();
    let off_plane = Normal::new(0.0, 0.03).unwrap();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let comps = (0..count)
        .map(|_| {
            let mean: Vec<f64> = (0..n)
                .map(|d| if d < 2 { rng.random::<f64>() } else { base[d] + off_plane.sample(rng) })
                .collect();
            let mut chol = vec![0.0; packed_len(n)];
            match pop {
                Population::Isotropic => {
                    let s: f64 = rng.random_range(0.02..0.06);
                    for i in 0..n {
                        chol[packed_index(i, i)] = s.ln();
                    }
                }
                Population::Anisotropic => {
                    let sig: Vec<f64> = (0..n).map(|_| (rng.random_range(0.01f64.ln()..0.1f64.ln())).exp()).collect();
                    for i in 0..n {
                        chol[packed_index(i, i)] = sig[i].ln();
                        for j in 0..i {
                            let v = rng.random_range(-0.9..0.9) * sig[i];
                            chol[packed_index(i, j)] = logit((v + 1.0) / 2.0);
                        }
                    }
                }
            }
            GaussianParams {
                mean_raw: mean,
                chol_raw: chol,
                color_raw: [unit.sample(rng), unit.sample(rng), unit.sample(rng)],
                amp_raw: rng.random_range(0.2f64..1.0).ln(),
                child: None,
                frozen: false,
            }
        })
        .collect();
    Mixture::with_components(n, AmpMode::Brightness, comps).expect("generated mixture is valid")
}

fn time_min<T>(repeats: usize, mut f: impl FnMut() -> T) -> (T, f64) {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let v = f();
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
        last = Some(v);
    }
    (last.expect("at least one repeat"), best)
}

fn tiles_of(count: usize, tile: usize) -> Vec<Range<usize>> {
    (0..count.div_ceil(tile)).map(|t| t * tile..((t + 1) * tile).min(count)).collect()
}

/// Runs the sweep and returns one row per (population, tile size, k,
/// multiplier).
pub fn run_sweep(b: &BenchSection) -> Result<Vec<BenchRow>, CliError> {
    if b.dims < 2 {
        return Err(CliError::Config("[bench] dims must be at least 2".into()));
    }
    let mut rows = Vec::new();
    for (pi, &pop) in b.populations.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(b.seed.wrapping_add(pi as u64));
        let base: Vec<f64> = (0..b.dims).map(|_| rng.random_range(0.3..0.7)).collect();
        let mix = population_mixture(pop, b.components, &base, &mut rng);
        let eval = Evaluator::new(&mix)?;
        let all = eval.all_active();
        for &tile in &b.tile_sizes {
            let queries = slice_queries(b.image_size, tile, &base)?;
            let count = queries.len() / b.dims;
            let tiles = tiles_of(count, tile);
            let full = vec![all.clone(); tiles.len()];
            let (reference, brute_ms) = time_min(b.repeats, || eval_tiles(&eval, &queries, &tiles, &full));
            let needed: Vec<Vec<usize>> = tiles
                .iter()
                .map(|r| brute_force_active(&queries[r.start * b.dims..r.end * b.dims], &eval, reference_epsilon()))
                .collect();
            let mut proj_cache = HashMap::new();
            for &k in &b.projections {
                let projections = proj_cache
                    .entry(k)
                    .or_insert(make_projection_set(b.dims, k, b.seed)?)
                    .clone();
                for &multiplier in &b.multipliers {
                    let settings = CullSettings {
                        projections: projections.clone(),
                        multiplier,
                    };
                    let ((sets, out), culled_ms) = time_min(b.repeats, || {
                        let sets = active_sets(&eval, &queries, &tiles, Some(&settings));
                        let out = eval_tiles(&eval, &queries, &tiles, &sets.per_tile);
                        (sets, out)
                    });
                    let false_culls = needed
                        .iter()
                        .zip(&sets.per_tile)
                        .map(|(need, kept)| need.iter().filter(|t| kept.binary_search(t).is_err()).count())
                        .sum();
                    let max_abs_error = out
                        .iter()
                        .zip(&reference)
                        .flat_map(|(a, r)| (0..3).map(move |c| (a[c] - r[c]).abs()))
                        .fold(0.0, f64::max);
                    rows.push(BenchRow {
                        population: pop.name(),
                        tile_size: tile,
                        k,
                        multiplier,
                        components: mix.len(),
                        queries: count,
                        cull_fraction: sets.culled_fraction,
                        false_culls,
                        max_abs_error,
                        brute_ms,
                        culled_ms,
                        speedup: brute_ms / culled_ms,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn run_bench(args: &BenchArgs) -> Result<Vec<BenchRow>, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.bench.seed = seed;
    }
    let rows = run_sweep(&cfg.bench)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(&args.out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&args.out, e))?;
    Ok(rows)
}
