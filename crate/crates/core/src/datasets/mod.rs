//! Training data: procedural targets, file-backed samples, batching and
//! augmentation.

mod image;
mod procedural;
mod tensor;

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use image::{encode_pfm, encode_ppm, read_pfm, write_pfm, write_ppm, PfmImage};
pub use procedural::{GmmOracle, ShadingToy, ShadingToyConfig, FEATURE_SHIFT};
pub use tensor::{read_tensor_file, write_tensor_file, TensorData, TENSOR_MAGIC, TENSOR_VERSION};

use crate::culling::tile_ranges;
use crate::error::{Error, Result};

/// Semantic role of an input dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimRole {
    Position,
    Direction,
    Material,
    Variable,
}

impl DimRole {
    pub fn tag(self) -> u8 {
        match self {
            DimRole::Position => 0,
            DimRole::Direction => 1,
            DimRole::Material => 2,
            DimRole::Variable => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => DimRole::Position,
            1 => DimRole::Direction,
            2 => DimRole::Material,
            3 => DimRole::Variable,
            _ => return None,
        })
    }
}

/// Queries, targets and their tile partition.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub n_dims: usize,
    /// Row-major, `n_dims` values per query.
    pub queries: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
    pub tile_size: usize,
}

impl QueryBatch {
    pub fn new(n_dims: usize, queries: Vec<f64>, targets: Vec<[f64; 3]>, tile_size: usize) -> Self {
        assert_eq!(queries.len(), n_dims * targets.len(), "query/target count mismatch");
        Self {
            n_dims,
            queries,
            targets,
            tile_size: tile_size.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    #[inline]
    pub fn query(&self, i: usize) -> &[f64] {
        &self.queries[i * self.n_dims..(i + 1) * self.n_dims]
    }

    /// Contiguous runs of `tile_size` queries; the last may be shorter.
    pub fn tiles(&self) -> Vec<Range<usize>> {
        tile_ranges(self.len(), self.tile_size)
    }

    /// Reorders queries by ascending value of dimension `dim` (stable).
    pub fn sort_by_dim(&mut self, dim: usize) {
        let n = self.n_dims;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.queries[a * n + dim].total_cmp(&self.queries[b * n + dim]));
        let queries = order
            .iter()
            .flat_map(|&i| self.queries[i * n..(i + 1) * n].iter().copied())
            .collect();
        let targets = order.iter().map(|&i| self.targets[i]).collect();
        self.queries = queries;
        self.targets = targets;
    }
}

/// Position of a file-backed dataset within its current shuffled epoch.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EpochCursor {
    pub order: Vec<u32>,
    pub pos: usize,
}

/// Finite sample set held in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub queries: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
    pub cursor: EpochCursor,
}

/// Where targets come from.
#[derive(Clone, Debug)]
pub enum Source {
    GmmOracle(GmmOracle),
    ShadingToy(ShadingToy),
    Samples(SampleSet),
}

/// A fitting target over `[0,1]^N`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n_dims: usize,
    pub roles: Vec<DimRole>,
    /// Original `(lo, hi)` range of each dimension.
    pub ranges: Vec<(f64, f64)>,
    pub source: Source,
}

impl Dataset {
    pub fn gmm_oracle(seed: u64, n_dims: usize, n_components: usize) -> Result<Self> {
        let oracle = GmmOracle::new(seed, n_dims, n_components)?;
        Ok(Self {
            n_dims,
            roles: vec![DimRole::Position; n_dims],
            ranges: vec![(0.0, 1.0); n_dims],
            source: Source::GmmOracle(oracle),
        })
    }

    pub fn shading_toy(config: ShadingToyConfig) -> Result<Self> {
        let toy = ShadingToy::new(config)?;
        Ok(Self {
            n_dims: toy.n_dims(),
            roles: toy.roles(),
            ranges: toy.ranges(),
            source: Source::ShadingToy(toy),
        })
    }

    /// File-backed dataset. Queries are normalized per dimension to `[0,1]`
    /// using their observed range.
    pub fn from_tensor(data: &TensorData) -> Result<Self> {
        let n = data.n_dims;
        let count = data.len();
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
        for q in data.queries.chunks_exact(n.max(1)) {
            for (r, &v) in ranges.iter_mut().zip(q) {
                r.0 = r.0.min(v as f64);
                r.1 = r.1.max(v as f64);
            }
        }
        for r in &mut ranges {
            if !(r.0.is_finite() && r.1.is_finite()) || (r.0 >= 0.0 && r.1 <= 1.0) {
                *r = (0.0, 1.0);
            } else if r.1 <= r.0 {
                *r = (r.0, r.0 + 1.0);
            }
        }
        let mut ds = Self {
            n_dims: n,
            roles: data.roles.clone(),
            ranges,
            source: Source::Samples(SampleSet {
                queries: Vec::new(),
                targets: Vec::new(),
                cursor: EpochCursor::default(),
            }),
        };
        let mut queries = Vec::with_capacity(count * n);
        for q in data.queries.chunks_exact(n.max(1)) {
            let raw: Vec<f64> = q.iter().map(|&v| v as f64).collect();
            queries.extend(ds.normalize(&raw));
        }
        let targets: Vec<[f64; 3]> = data
            .targets
            .iter()
            .map(|t| [t[0] as f64, t[1] as f64, t[2] as f64])
            .collect();
        if targets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite target in tensor file".into()));
        }
        ds.source = Source::Samples(SampleSet {
            queries,
            targets,
            cursor: EpochCursor::default(),
        });
        Ok(ds)
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.ranges)
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    pub fn denormalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.ranges)
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect()
    }

    /// Exact target at a normalized query, for procedural sources.
    pub fn target(&self, q: &[f64]) -> Option<[f64; 3]> {
        match &self.source {
            Source::GmmOracle(o) => Some(o.eval(q)),
            Source::ShadingToy(s) => Some(s.eval(q)),
            Source::Samples(_) => None,
        }
    }

    /// Number of stored samples; `None` for procedural sources.
    pub fn sample_count(&self) -> Option<usize> {
        match &self.source {
            Source::Samples(s) => Some(s.targets.len()),
            _ => None,
        }
    }

    /// Dimension used to sort batches into tiles: the first position
    /// dimension, else dimension 0.
    pub fn sort_dim(&self) -> usize {
        self.roles
            .iter()
            .position(|r| *r == DimRole::Position)
            .unwrap_or(0)
    }

    /// Draws `batch_size` queries and their targets, sorted along
    /// [`Dataset::sort_dim`] so consecutive tiles are spatially tight.
    pub fn sample_batch<R: Rng>(
        &mut self,
        rng: &mut R,
        batch_size: usize,
        tile_size: usize,
    ) -> Result<QueryBatch> {
        if tile_size == 0 || !batch_size.is_multiple_of(tile_size) {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} is not a multiple of tile size {tile_size}"
            )));
        }
        let mut batch = self.sample_unsorted(rng, batch_size)?;
        batch.tile_size = tile_size;
        batch.sort_by_dim(self.sort_dim());
        Ok(batch)
    }

    /// Draws queries without tiling order (tile size = batch size).
    pub fn sample_unsorted<R: Rng>(&mut self, rng: &mut R, count: usize) -> Result<QueryBatch> {
        let n = self.n_dims;
        match &mut self.source {
            Source::Samples(set) => {
                let total = set.targets.len();
                if total == 0 {
                    return Err(Error::InvalidArgument("dataset has no samples".into()));
                }
                let mut queries = Vec::with_capacity(count * n);
                let mut targets = Vec::with_capacity(count);
                for _ in 0..count {
                    if set.cursor.pos >= set.cursor.order.len() {
                        set.cursor.order = (0..total as u32).collect();
                        set.cursor.order.shuffle(rng);
                        set.cursor.pos = 0;
                    }
                    let i = set.cursor.order[set.cursor.pos] as usize;
                    set.cursor.pos += 1;
                    queries.extend_from_slice(&set.queries[i * n..(i + 1) * n]);
                    targets.push(set.targets[i]);
                }
                Ok(QueryBatch::new(n, queries, targets, count.max(1)))
            }
            _ => {
                let queries: Vec<f64> = (0..count * n).map(|_| rng.random::<f64>()).collect();
                let targets = queries
                    .chunks_exact(n)
                    .map(|q| self.target(q).expect("procedural source"))
                    .collect();
                Ok(QueryBatch::new(n, queries, targets, count.max(1)))
            }
        }
    }
}

impl Dataset {
    /// A fixed held-out batch drawn from its own seed. It leaves the epoch
    /// cursor untouched, so taking it does not shift the training stream.
    pub fn validation_batch(&self, seed: u64, count: usize, tile_size: usize) -> QueryBatch {
        let n = self.n_dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f4a_11da_7e00);
        let (queries, targets) = match &self.source {
            Source::Samples(set) if !set.targets.is_empty() => {
                let total = set.targets.len();
                let mut q = Vec::with_capacity(count * n);
                let mut t = Vec::with_capacity(count);
                for _ in 0..count {
                    let i = rng.random_range(0..total);
                    q.extend_from_slice(&set.queries[i * n..(i + 1) * n]);
                    t.push(set.targets[i]);
                }
                (q, t)
            }
            Source::Samples(_) => (Vec::new(), Vec::new()),
            _ => {
                let q: Vec<f64> = (0..count * n).map(|_| rng.random::<f64>()).collect();
                let t = q
                    .chunks_exact(n)
                    .map(|x| self.target(x).expect("procedural source"))
                    .collect();
                (q, t)
            }
        };
        let mut batch = QueryBatch::new(n, queries, targets, tile_size.max(1));
        batch.sort_by_dim(self.sort_dim());
        batch
    }
}

/// Adds clamped Gaussian noise of scale `sigma` to direction dimensions of
/// every query. Targets are left unchanged.
pub fn perturb_directions<R: Rng>(
    batch: &QueryBatch,
    roles: &[DimRole],
    sigma: f64,
    rng: &mut R,
) -> Result<QueryBatch> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument("perturbation sigma must be >= 0".into()));
    }
    if roles.len() != batch.n_dims {
        return Err(Error::DimensionMismatch {
            expected: batch.n_dims,
            got: roles.len(),
        });
    }
    let mut out = batch.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let n = batch.n_dims;
    for q in out.queries.chunks_exact_mut(n) {
        for (v, role) in q.iter_mut().zip(roles) {
            if *role == DimRole::Direction {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Dataset {
        Dataset::shading_toy(ShadingToyConfig::default()).unwrap()
    }

    #[test]
    fn batch_of_one_tile() {
        let mut ds = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ds.sample_batch(&mut rng, 64, 64).unwrap();
        assert_eq!(b.tiles(), vec![0..64]);
    }

    #[test]
    fn batch_must_be_tile_multiple() {
        let mut ds = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ds.sample_batch(&mut rng, 100, 64).is_err());
    }

    #[test]
    fn batches_are_sorted_on_position() {
        let mut ds = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = ds.sample_batch(&mut rng, 256, 64).unwrap();
        let d = ds.sort_dim();
        for i in 1..b.len() {
            assert!(b.query(i - 1)[d] <= b.query(i)[d]);
        }
        for i in 0..b.len() {
            let t = ds.target(b.query(i)).unwrap();
            assert_eq!(t, b.targets[i]);
        }
    }

    #[test]
    fn perturbation_touches_only_directions() {
        let mut ds = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = ds.sample_batch(&mut rng, 128, 64).unwrap();
        let same = perturb_directions(&b, &ds.roles, 0.0, &mut rng).unwrap();
        assert_eq!(same, b);
        let p = perturb_directions(&b, &ds.roles, 0.3, &mut rng).unwrap();
        assert_eq!(p.targets, b.targets);
        assert_eq!(p.queries.len(), b.queries.len());
        let mut moved = false;
        for i in 0..b.len() {
            for (d, role) in ds.roles.iter().enumerate() {
                let (a, c) = (b.query(i)[d], p.query(i)[d]);
                assert!((0.0..=1.0).contains(&c));
                if *role != DimRole::Direction {
                    assert_eq!(a, c);
                } else if a != c {
                    moved = true;
                }
            }
        }
        assert!(moved);
        assert!(perturb_directions(&b, &ds.roles, -1.0, &mut rng).is_err());
    }

    #[test]
    fn file_epochs_wrap_and_reshuffle() {
        let data = TensorData {
            n_dims: 2,
            roles: vec![DimRole::Position; 2],
            queries: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            targets: vec![[1.0; 3], [2.0; 3], [3.0; 3]],
        };
        let mut ds = Dataset::from_tensor(&data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = ds.sample_unsorted(&mut rng, 5).unwrap();
        let mut first: Vec<f64> = b.targets[..3].iter().map(|t| t[0]).collect();
        first.sort_by(f64::total_cmp);
        assert_eq!(first, vec![1.0, 2.0, 3.0]);
        assert_eq!(b.len(), 5);
    }

    #[test]
    fn normalization_inverts() {
        let data = TensorData {
            n_dims: 2,
            roles: vec![DimRole::Position, DimRole::Variable],
            queries: vec![-2.0, 5.0, 2.0, 7.0],
            targets: vec![[0.0; 3], [0.0; 3]],
        };
        let ds = Dataset::from_tensor(&data).unwrap();
        assert_eq!(ds.ranges, vec![(-2.0, 2.0), (5.0, 7.0)]);
        let x = [0.37, 6.1];
        let back = ds.denormalize(&ds.normalize(&x));
        for (a, b) in back.iter().zip(x) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
