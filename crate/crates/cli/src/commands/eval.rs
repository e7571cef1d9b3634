use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndgauss::culling::{active_sets, eval_tiles, make_projection_set, tile_ranges, CullSettings};
use ndgauss::datasets::{read_tensor_file, write_pfm, write_ppm, write_tensor_file, DimRole, TensorData};
use ndgauss::gmm::{Evaluator, Mixture};
use ndgauss::grad::{loss_rel_l2, DEFAULT_LOSS_EPS};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::error::CliError;

pub const PREDICTIONS_FILE: &str = "predictions.ndgt";

#[derive(Clone, Debug)]
pub enum QuerySource {
    File(PathBuf),
    Grid(GridSpec),
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub source: QuerySource,
    pub out: PathBuf,
    pub reference: Option<PathBuf>,
    pub no_cull: bool,
    pub seed: Option<u64>,
}

/// A 2-D image slice through the unit cube.
///
/// Written `WxH@A,B` or `WxH@A,B:V0,...,VN-1`: a `W`×`H` image whose
/// horizontal axis sweeps dimension `A` and vertical axis dimension `B`
/// over `[0,1]`, with every other dimension held at its base value (0.5
/// unless given). Coordinates are normalized. Row 0 is the top of the
/// image, at `B` near 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub axes: (usize, usize),
    pub base: Option<Vec<f64>>,
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("bad grid spec `{s}`; expected WxH@A,B[:V0,...]");
        let (size, rest) = s.split_once('@').ok_or_else(bad)?;
        let (w, h) = size.split_once(['x', 'X']).ok_or_else(bad)?;
        let (axes, base) = match rest.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (rest, None),
        };
        let (a, b) = axes.split_once(',').ok_or_else(bad)?;
        let spec = GridSpec {
            width: w.trim().parse().map_err(|_| bad())?,
            height: h.trim().parse().map_err(|_| bad())?,
            axes: (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            base: base
                .map(|b| b.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>())
                .transpose()
                .map_err(|_| bad())?,
        };
        if spec.width == 0 || spec.height == 0 || spec.axes.0 == spec.axes.1 {
            return Err(bad());
        }
        Ok(spec)
    }
}

impl GridSpec {
    /// Normalized queries in image order.
    pub fn queries(&self, n_dims: usize) -> Result<Vec<f64>, CliError> {
        let (a, b) = self.axes;
        if a >= n_dims || b >= n_dims {
            return Err(CliError::Usage(format!("grid axes ({a}, {b}) outside {n_dims} dimensions")));
        }
        let base = match &self.base {
            Some(v) if v.len() != n_dims => {
                return Err(CliError::Core(ndgauss::Error::DimensionMismatch {
                    expected: n_dims,
                    got: v.len(),
                }))
            }
            Some(v) => v.clone(),
            None => vec![0.5; n_dims],
        };
        let mut out = Vec::with_capacity(self.width * self.height * n_dims);
        for row in 0..self.height {
            for col in 0..self.width {
                let mut q = base.clone();
                q[a] = (col as f64 + 0.5) / self.width as f64;
                q[b] = 1.0 - (row as f64 + 0.5) / self.height as f64;
                out.extend(q);
            }
        }
        Ok(out)
    }
}

/// Summary printed by `eval` and saved as `report.json`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalReport {
    pub queries: usize,
    pub culled_fraction: f64,
    pub rel_l2: Option<f64>,
    pub psnr_db: Option<f64>,
}

/// PSNR against `reference`, with the peak taken as the largest reference
/// value.
pub fn psnr(pred: &[[f64; 3]], reference: &[[f64; 3]]) -> f64 {
    let mut se = 0.0;
    let mut peak: f64 = 0.0;
    for (p, r) in pred.iter().zip(reference) {
        for c in 0..3 {
            se += (p[c] - r[c]) * (p[c] - r[c]);
            peak = peak.max(r[c].abs());
        }
    }
    let mse = se / (3 * pred.len().max(1)) as f64;
    10.0 * (peak * peak / mse).log10()
}

/// Evaluates `mix` at normalized `queries`, returning predictions in input
/// order and the culled fraction. Queries are sorted along `sort_dim` and
/// tiled for culling; `settings = None` evaluates every term everywhere.
pub fn predict(
    mix: &Mixture,
    queries: &[f64],
    tile_size: usize,
    sort_dim: usize,
    settings: Option<&CullSettings>,
) -> Result<(Vec<[f64; 3]>, f64), CliError> {
    let n = mix.n_dims;
    let count = queries.len() / n;
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| queries[a * n + sort_dim].total_cmp(&queries[b * n + sort_dim]));
    let sorted: Vec<f64> = order.iter().flat_map(|&i| queries[i * n..(i + 1) * n].iter().copied()).collect();
    let eval = Evaluator::new(mix)?;
    let tiles = tile_ranges(count, tile_size);
    let active = active_sets(&eval, &sorted, &tiles, settings);
    let values = eval_tiles(&eval, &sorted, &tiles, &active.per_tile);
    let mut out = vec![[0.0; 3]; count];
    for (v, &i) in values.into_iter().zip(&order) {
        out[i] = v;
    }
    Ok((out, active.culled_fraction))
}

fn write_report(out: &Path, report: &EvalReport) -> Result<(), CliError> {
    let path = out.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let mix = &ck.state.mixture;
    let n = mix.n_dims;
    let ranges = &ck.dataset.ranges;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;

    let (raw_queries, normalized, roles) = match &args.source {
        QuerySource::File(path) => {
            let data = read_tensor_file(path)?;
            if data.n_dims != n {
                return Err(CliError::Core(ndgauss::Error::DimensionMismatch {
                    expected: n,
                    got: data.n_dims,
                }));
            }
            let normalized: Vec<f64> = data
                .queries
                .chunks_exact(n)
                .flat_map(|q| {
                    q.iter()
                        .zip(ranges)
                        .map(|(&v, (lo, hi))| (v as f64 - lo) / (hi - lo))
                        .collect::<Vec<_>>()
                })
                .collect();
            (data.queries, normalized, data.roles)
        }
        QuerySource::Grid(spec) => {
            let normalized = spec.queries(n)?;
            let raw = normalized
                .chunks_exact(n)
                .flat_map(|q| q.iter().zip(ranges).map(|(v, (lo, hi))| (lo + v * (hi - lo)) as f32).collect::<Vec<_>>())
                .collect();
            (raw, normalized, ck.dataset.roles.clone())
        }
    };
    let count = normalized.len() / n;

    let settings = if args.no_cull {
        None
    } else {
        let seed = args.seed.unwrap_or(ck.config.train.seed);
        Some(CullSettings {
            projections: make_projection_set(n, ck.config.train.cull_k, seed)?,
            multiplier: ck.config.train.cull_multiplier,
        })
    };
    let sort_dim = roles.iter().position(|r| *r == DimRole::Position).unwrap_or(0);
    let (pred, culled_fraction) = if count == 0 {
        (Vec::new(), 0.0)
    } else {
        predict(mix, &normalized, ck.config.train.tile_size, sort_dim, settings.as_ref())?
    };

    write_tensor_file(
        args.out.join(PREDICTIONS_FILE),
        &TensorData {
            n_dims: n,
            roles,
            queries: raw_queries,
            targets: pred.iter().map(|p| p.map(|v| v as f32)).collect(),
        },
    )?;
    if let QuerySource::Grid(spec) = &args.source {
        write_pfm(args.out.join("slice.pfm"), spec.width, spec.height, &pred)?;
        write_ppm(args.out.join("slice.ppm"), spec.width, spec.height, &pred)?;
    }

    let mut report = EvalReport {
        queries: count,
        culled_fraction,
        ..Default::default()
    };
    if let Some(path) = &args.reference {
        let data = read_tensor_file(path)?;
        if data.len() != count {
            return Err(CliError::Usage(format!(
                "reference has {} samples but {count} queries were evaluated",
                data.len()
            )));
        }
        let reference: Vec<[f64; 3]> = data.targets.iter().map(|t| t.map(|v| v as f64)).collect();
        if count > 0 {
            report.rel_l2 = Some(loss_rel_l2(&pred, &reference, DEFAULT_LOSS_EPS));
            report.psnr_db = Some(psnr(&pred, &reference));
        }
    }
    write_report(&args.out, &report)?;
    Ok(report)
}
