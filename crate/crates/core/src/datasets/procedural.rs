//! Procedural targets with exact values everywhere.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DimRole;
use crate::error::{Error, Result};
use crate::gmm::{packed_index, packed_len, AmpMode, Evaluator, GaussianParams, Mixture, Term};

/// Hidden mixture in the model family; targets are its exact output.
#[derive(Clone, Debug)]
pub struct GmmOracle {
    pub seed: u64,
    mixture: Mixture,
    terms: Vec<Term>,
}

impl GmmOracle {
    pub fn new(seed: u64, n_dims: usize, n_components: usize) -> Result<Self> {
        if n_components == 0 || n_dims == 0 {
            return Err(Error::InvalidArgument(
                "oracle needs at least one component and dimension".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let off = Normal::new(0.0, 0.4).unwrap();
        let color = Normal::new(0.0, 1.0).unwrap();
        let components = (0..n_components)
            .map(|_| {
                let mean_raw = (0..n_dims).map(|_| rng.random_range(0.2..0.8)).collect();
                let mut chol_raw = vec![0.0; packed_len(n_dims)];
                for i in 0..n_dims {
                    for j in 0..i {
                        chol_raw[packed_index(i, j)] = off.sample(&mut rng);
                    }
                    chol_raw[packed_index(i, i)] = rng.random_range(0.15f64..0.3).ln();
                }
                GaussianParams {
                    mean_raw,
                    chol_raw,
                    color_raw: [
                        color.sample(&mut rng),
                        color.sample(&mut rng),
                        color.sample(&mut rng),
                    ],
                    amp_raw: rng.random_range(0.4f64..1.0).ln(),
                    child: None,
                    frozen: false,
                }
            })
            .collect();
        let mixture = Mixture::with_components(n_dims, AmpMode::Brightness, components)?;
        Self::from_mixture(seed, mixture)
    }

    /// Oracle over an explicit mixture.
    pub fn from_mixture(seed: u64, mixture: Mixture) -> Result<Self> {
        let terms = Evaluator::new(&mixture)?.terms().to_vec();
        Ok(Self {
            seed,
            mixture,
            terms,
        })
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    pub fn eval(&self, q: &[f64]) -> [f64; 3] {
        let mut z = vec![0.0; q.len()];
        let mut c = [0.0; 3];
        for t in &self.terms {
            let g = t.density_with(q, &mut z);
            let w = t.weight();
            for ch in 0..3 {
                c[ch] += g * w[ch];
            }
        }
        c
    }
}

/// Which input roles a [`ShadingToy`] exposes.
///
/// Dimensions are laid out as position (3), then direction (3), albedo (3),
/// roughness (1) and finally `variables` scene variables, each only if enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadingToyConfig {
    pub seed: u64,
    pub direction: bool,
    pub albedo: bool,
    pub roughness: bool,
    pub variables: usize,
}

impl Default for ShadingToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            direction: true,
            albedo: true,
            roughness: true,
            variables: 0,
        }
    }
}

impl ShadingToyConfig {
    pub fn n_dims(&self) -> usize {
        3 + 3 * self.direction as usize
            + 3 * self.albedo as usize
            + self.roughness as usize
            + self.variables
    }
}

/// How far the bright feature moves per unit of the first variable dimension.
pub const FEATURE_SHIFT: f64 = 0.4;

const LOBE_MAX_EXPONENT: f64 = 6.0;
const FEATURE_WIDTH: f64 = 0.15;

/// Shading-like analytic function of position, view direction, albedo,
/// roughness and scene variables, all normalized to `[0,1]`.
///
/// Diffuse: albedo times a smooth irradiance field over position. Glossy: a
/// cosine-power lobe around a position-dependent reflection direction whose
/// exponent falls to zero as roughness reaches one. Feature: a bright blob
/// over position whose center moves with the first variable dimension.
#[derive(Clone, Debug)]
pub struct ShadingToy {
    pub config: ShadingToyConfig,
    phase: [f64; 3],
}

impl ShadingToy {
    pub fn new(config: ShadingToyConfig) -> Result<Self> {
        let n = config.n_dims();
        if !(4..=10).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "shading toy needs between 4 and 10 dimensions, config gives {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let phase = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..2.0 * PI),
        ];
        Ok(Self { config, phase })
    }

    pub fn n_dims(&self) -> usize {
        self.config.n_dims()
    }

    pub fn roles(&self) -> Vec<DimRole> {
        let c = &self.config;
        let mut r = vec![DimRole::Position; 3];
        if c.direction {
            r.extend([DimRole::Direction; 3]);
        }
        if c.albedo {
            r.extend([DimRole::Material; 3]);
        }
        if c.roughness {
            r.push(DimRole::Material);
        }
        r.extend(std::iter::repeat_n(DimRole::Variable, c.variables));
        r
    }

    /// Nominal physical ranges of each dimension.
    pub fn ranges(&self) -> Vec<(f64, f64)> {
        self.roles()
            .iter()
            .map(|r| match r {
                DimRole::Position | DimRole::Variable => (-2.0, 2.0),
                DimRole::Direction => (-1.0, 1.0),
                DimRole::Material => (0.0, 1.0),
            })
            .collect()
    }

    fn offsets(&self) -> (Option<usize>, Option<usize>, Option<usize>, Option<usize>) {
        let c = &self.config;
        let mut at = 3;
        let mut take = |on: bool, width: usize| {
            let o = on.then_some(at);
            at += if on { width } else { 0 };
            o
        };
        let dir = take(c.direction, 3);
        let alb = take(c.albedo, 3);
        let rough = take(c.roughness, 1);
        let var = take(c.variables > 0, c.variables);
        (dir, alb, rough, var)
    }

    /// Exponent of the glossy lobe for a normalized roughness value.
    pub fn lobe_exponent(roughness: f64) -> f64 {
        LOBE_MAX_EXPONENT * (1.0 - roughness)
    }

    /// Center of the bright feature in normalized position coordinates.
    pub fn feature_center(variable: f64) -> [f64; 3] {
        [0.3 + FEATURE_SHIFT * variable, 0.5, 0.5]
    }

    /// The diffuse, glossy and feature terms separately.
    pub fn eval_terms(&self, q: &[f64]) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (dir, alb, rough, var) = self.offsets();
        let p = &q[..3];
        let [ph0, ph1, ph2] = self.phase;

        let irr = 0.35 + 0.25 * (2.0 * PI * (p[0] + ph0 + 0.3 * p[2])).sin() * (PI * (p[1] + ph1)).cos();
        let albedo = match alb {
            Some(o) => [0.25 + 0.75 * q[o], 0.25 + 0.75 * q[o + 1], 0.25 + 0.75 * q[o + 2]],
            None => [0.7, 0.6, 0.5],
        };
        let diffuse = [albedo[0] * irr, albedo[1] * irr, albedo[2] * irr];

        let glossy = match dir {
            Some(o) => {
                let d = [2.0 * q[o] - 1.0, 2.0 * q[o + 1] - 1.0, 2.0 * q[o + 2] - 1.0];
                let theta = PI * (p[0] + 0.5 * p[1]) + ph2;
                let r = [theta.cos(), theta.sin(), 0.6];
                let rn = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                let cos = (d[0] * r[0] + d[1] * r[1] + d[2] * r[2]) / (rn * 3f64.sqrt());
                let roughness = rough.map_or(0.5, |o| q[o]);
                let lobe = (0.5 * (1.0 + cos)).powf(Self::lobe_exponent(roughness));
                [0.35 * lobe, 0.33 * lobe, 0.315 * lobe]
            }
            None => [0.0; 3],
        };

        let v = var.map_or(0.5, |o| q[o]);
        let c = Self::feature_center(v);
        let d2: f64 = p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        let blob = 0.6 * (-d2 / (2.0 * FEATURE_WIDTH * FEATURE_WIDTH)).exp();
        let feature = [blob, 0.7 * blob, 0.4 * blob];
        (diffuse, glossy, feature)
    }

    pub fn eval(&self, q: &[f64]) -> [f64; 3] {
        let (d, g, f) = self.eval_terms(q);
        [d[0] + g[0] + f[0], d[1] + g[1] + f[1], d[2] + g[2] + f[2]]
    }
}
