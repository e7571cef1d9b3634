//! Checkpoint files.
//!
//! A checkpoint is one little-endian binary:
//!
//! ```text
//! "NDGC" u32 version
//! u32 len, UTF-8 config (canonical TOML)
//! u64 iteration, f64 best validation loss
//! [u8; 32] rng seed, u64 rng stream, u128 rng word position
//! u32 N, u8 amp mode, N role tags, N × (f64 lo, f64 hi) ranges
//! u64 epoch cursor position, u64 len, len × u32 order
//! u64 component count, then per component:
//!     u8 flags (1 = frozen, 2 = has child), f64 × P parent, [f64 × P child]
//! u64 optimizer step, then per component:
//!     moments(parent), u8 has child, [moments(child)]
//!     where moments = u64 steps, f64 × P first, f64 × P second
//! u64 len, f64 × len phase peaks
//! ```
//!
//! `P` is the flat parameter count of one slot, `N + N(N+1)/2 + 4`.

use std::fs;
use std::path::Path;

use ndgauss::datasets::{Dataset, DimRole, EpochCursor, Source};
use ndgauss::gmm::{AmpMode, ChildParams, GaussianParams, Mixture};
use ndgauss::trainer::{Moments, OptimizerState, SlotMoments, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NDGC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a checkpoint remembers about the dataset it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetInfo {
    pub roles: Vec<DimRole>,
    pub ranges: Vec<(f64, f64)>,
    pub cursor: EpochCursor,
}

impl DatasetInfo {
    pub fn of(ds: &Dataset) -> Self {
        let cursor = match &ds.source {
            Source::Samples(s) => s.cursor.clone(),
            _ => EpochCursor::default(),
        };
        Self {
            roles: ds.roles.clone(),
            ranges: ds.ranges.clone(),
            cursor,
        }
    }

    /// Puts the saved epoch position back into a freshly built dataset.
    pub fn restore_into(&self, ds: &mut Dataset) -> Result<(), CliError> {
        if ds.n_dims != self.roles.len() || ds.roles != self.roles {
            return Err(CliError::Usage(
                "checkpoint was trained on a dataset with different dimensions".into(),
            ));
        }
        if let Source::Samples(s) = &mut ds.source {
            if self.cursor.order.iter().any(|&i| i as usize >= s.targets.len()) {
                return Err(CliError::Usage("checkpoint epoch order does not fit the dataset".into()));
            }
            s.cursor = self.cursor.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub dataset: DatasetInfo,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn moments(&mut self, m: &Moments) {
        self.u64(m.steps);
        self.f64s(&m.m);
        self.f64s(&m.v);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> CliError {
        CliError::Core(ndgauss::Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::Core(ndgauss::Error::Parse {
                offset: self.bytes.len() as u64,
                message: "truncated checkpoint".into(),
            }));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, CliError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        (0..n).map(|_| self.f64()).collect()
    }
    /// A length prefix that must fit in the remaining bytes at `unit` bytes
    /// per element.
    fn len(&mut self, unit: usize) -> Result<usize, CliError> {
        let n = self.u64()?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.saturating_mul(unit as u64) > left {
            return Err(self.err(format!("length {n} exceeds the remaining {left} bytes")));
        }
        Ok(n as usize)
    }
    fn moments(&mut self, p: usize) -> Result<Moments, CliError> {
        Ok(Moments {
            steps: self.u64()?,
            m: self.f64s(p)?,
            v: self.f64s(p)?,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let cfg = self.config.to_toml();
        w.u32(cfg.len() as u32);
        w.0.extend_from_slice(cfg.as_bytes());

        let st = &self.state;
        w.u64(st.iteration);
        w.f64(st.best_validation);
        w.0.extend_from_slice(&st.rng.get_seed());
        w.u64(st.rng.get_stream());
        w.0.extend_from_slice(&st.rng.get_word_pos().to_le_bytes());

        let mix = &st.mixture;
        w.u32(mix.n_dims as u32);
        w.u8(mix.amp_mode.tag());
        for r in &self.dataset.roles {
            w.u8(r.tag());
        }
        for &(lo, hi) in &self.dataset.ranges {
            w.f64(lo);
            w.f64(hi);
        }
        w.u64(self.dataset.cursor.pos as u64);
        w.u64(self.dataset.cursor.order.len() as u64);
        for &i in &self.dataset.cursor.order {
            w.u32(i);
        }

        w.u64(mix.len() as u64);
        for c in &mix.components {
            w.u8(c.frozen as u8 | (c.child.is_some() as u8) << 1);
            w.f64s(&c.to_flat());
            if let Some(ch) = &c.child {
                w.f64s(&ch.to_flat());
            }
        }
        w.u64(st.optimizer.step);
        for s in &st.optimizer.slots {
            w.moments(&s.parent);
            w.u8(s.child.is_some() as u8);
            if let Some(m) = &s.child {
                w.moments(m);
            }
        }
        w.u64(st.phase_peaks.len() as u64);
        w.f64s(&st.phase_peaks);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            r.pos = 0;
            return Err(r.err("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            r.pos -= 4;
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| r.err("config is not UTF-8"))?;
        let config = RunConfig::parse(cfg_text, "checkpoint config")?;

        let iteration = r.u64()?;
        let best_validation = r.f64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let n = r.u32()? as usize;
        if n == 0 || n > 4096 {
            return Err(r.err(format!("implausible dimension {n}")));
        }
        let mode = AmpMode::from_tag(r.u8()?).ok_or_else(|| r.err("unknown amplitude mode"))?;
        let roles = (0..n)
            .map(|_| {
                let t = r.u8()?;
                DimRole::from_tag(t).ok_or_else(|| r.err(format!("unknown role tag {t}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let ranges = (0..n)
            .map(|_| Ok((r.f64()?, r.f64()?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        let pos = r.u64()? as usize;
        let order_len = r.len(4)?;
        let order = (0..order_len).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;

        let mut mix = Mixture::new(n, mode);
        let p = mix.layout().len();
        let count = r.len(1 + p * 8)?;
        for _ in 0..count {
            let flags = r.u8()?;
            if flags > 3 {
                return Err(r.err(format!("bad component flags {flags}")));
            }
            let mut g = GaussianParams::isotropic(vec![0.0; n], 1.0, [0.0; 3], 0.0);
            g.set_flat(&r.f64s(p)?);
            g.frozen = flags & 1 != 0;
            if flags & 2 != 0 {
                let mut ch = ChildParams::neutral(n, [0.0; 3], 0.0);
                ch.set_flat(&r.f64s(p)?);
                g.child = Some(ch);
            }
            mix.components.push(g);
        }
        mix.validate()?;

        let step = r.u64()?;
        let mut slots = Vec::with_capacity(count);
        for _ in 0..count {
            let parent = r.moments(p)?;
            let child = match r.u8()? {
                0 => None,
                1 => Some(r.moments(p)?),
                f => return Err(r.err(format!("bad optimizer flag {f}"))),
            };
            slots.push(SlotMoments { parent, child });
        }
        let peaks_len = r.len(8)?;
        let phase_peaks = r.f64s(peaks_len)?;
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        Ok(Checkpoint {
            config,
            state: TrainState {
                mixture: mix,
                optimizer: OptimizerState { step, slots },
                iteration,
                rng,
                phase_peaks,
                best_validation,
            },
            dataset: DatasetInfo {
                roles,
                ranges,
                cursor: EpochCursor { order, pos },
            },
        })
    }

    /// Writes through a temporary file and a rename, so a crash mid-write
    /// never leaves a torn checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
