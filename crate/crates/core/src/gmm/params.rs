//! Raw trainable parameters and their flat layout.

use std::ops::Range;

use super::activation::AmpMode;
use super::factor::packed_len;
use crate::error::{Error, Result};

/// One block of raw parameters inside a component or child.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamBlock {
    Mean,
    Chol,
    Color,
    Amp,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 4] = [
        ParamBlock::Mean,
        ParamBlock::Chol,
        ParamBlock::Color,
        ParamBlock::Amp,
    ];

    pub fn name(self, child: bool) -> &'static str {
        match (self, child) {
            (ParamBlock::Mean, false) => "mean",
            (ParamBlock::Chol, false) => "chol",
            (ParamBlock::Color, false) => "color",
            (ParamBlock::Amp, false) => "amp",
            (ParamBlock::Mean, true) => "child.mean",
            (ParamBlock::Chol, true) => "child.chol",
            (ParamBlock::Color, true) => "child.color",
            (ParamBlock::Amp, true) => "child.amp",
        }
    }
}

/// Offsets of the parameter blocks in the flat per-slot vector
/// `[mean (N) | chol (N(N+1)/2) | color (3) | amp (1)]`.
///
/// Parents and children share the layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_dims: usize,
}

impl ParamLayout {
    pub fn new(n_dims: usize) -> Self {
        Self { n_dims }
    }

    pub fn range(&self, block: ParamBlock) -> Range<usize> {
        let n = self.n_dims;
        let t = packed_len(n);
        match block {
            ParamBlock::Mean => 0..n,
            ParamBlock::Chol => n..n + t,
            ParamBlock::Color => n + t..n + t + 3,
            ParamBlock::Amp => n + t + 3..n + t + 4,
        }
    }

    pub fn len(&self) -> usize {
        self.n_dims + packed_len(self.n_dims) + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Block containing flat offset `offset`.
    pub fn block_of(&self, offset: usize) -> ParamBlock {
        ParamBlock::ALL
            .into_iter()
            .find(|b| self.range(*b).contains(&offset))
            .expect("offset inside layout")
    }
}

/// Address of a single raw scalar in a mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub component: usize,
    pub child: bool,
    pub block: ParamBlock,
    pub index: usize,
}

/// Raw parameters of a child, expressed relative to its parent's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ChildParams {
    /// Child mean in parent coordinates (`m_u`).
    pub rel_mean_raw: Vec<f64>,
    /// Packed raw entries of the relative factor `U`.
    pub rel_chol_raw: Vec<f64>,
    pub color_raw: [f64; 3],
    pub amp_raw: f64,
}

/// Raw parameters of one mixture component.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean_raw: Vec<f64>,
    /// Packed row-major raw entries of the lower-triangular factor `L`.
    pub chol_raw: Vec<f64>,
    pub color_raw: [f64; 3],
    pub amp_raw: f64,
    pub child: Option<ChildParams>,
    /// Frozen components are excluded from evaluation and training.
    pub frozen: bool,
}

macro_rules! flat_access {
    ($ty:ty, $mean:ident, $chol:ident) => {
        impl $ty {
            pub fn block(&self, block: ParamBlock) -> &[f64] {
                match block {
                    ParamBlock::Mean => &self.$mean,
                    ParamBlock::Chol => &self.$chol,
                    ParamBlock::Color => &self.color_raw,
                    ParamBlock::Amp => std::slice::from_ref(&self.amp_raw),
                }
            }

            pub fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
                match block {
                    ParamBlock::Mean => &mut self.$mean,
                    ParamBlock::Chol => &mut self.$chol,
                    ParamBlock::Color => &mut self.color_raw,
                    ParamBlock::Amp => std::slice::from_mut(&mut self.amp_raw),
                }
            }

            /// Parameters in [`ParamLayout`] order.
            pub fn to_flat(&self) -> Vec<f64> {
                let mut v = Vec::with_capacity(self.$mean.len() + self.$chol.len() + 4);
                v.extend_from_slice(&self.$mean);
                v.extend_from_slice(&self.$chol);
                v.extend_from_slice(&self.color_raw);
                v.push(self.amp_raw);
                v
            }

            pub fn set_flat(&mut self, flat: &[f64]) {
                let layout = ParamLayout::new(self.$mean.len());
                assert_eq!(flat.len(), layout.len());
                for b in ParamBlock::ALL {
                    self.block_mut(b).copy_from_slice(&flat[layout.range(b)]);
                }
            }
        }
    };
}

flat_access!(GaussianParams, mean_raw, chol_raw);
flat_access!(ChildParams, rel_mean_raw, rel_chol_raw);

impl ChildParams {
    /// Child that coincides with its parent (`U = I`, `m_u = 0`).
    pub fn neutral(n_dims: usize, color_raw: [f64; 3], amp_raw: f64) -> Self {
        Self {
            rel_mean_raw: vec![0.0; n_dims],
            rel_chol_raw: vec![0.0; packed_len(n_dims)],
            color_raw,
            amp_raw,
        }
    }

    pub fn n_dims(&self) -> usize {
        self.rel_mean_raw.len()
    }
}

impl GaussianParams {
    /// Axis-aligned component with standard deviation `sigma` in every dimension.
    pub fn isotropic(mean: Vec<f64>, sigma: f64, color_raw: [f64; 3], amp_raw: f64) -> Self {
        let n = mean.len();
        let mut chol_raw = vec![0.0; packed_len(n)];
        for i in 0..n {
            chol_raw[super::factor::packed_index(i, i)] = sigma.ln();
        }
        Self {
            mean_raw: mean,
            chol_raw,
            color_raw,
            amp_raw,
            child: None,
            frozen: false,
        }
    }

    pub fn n_dims(&self) -> usize {
        self.mean_raw.len()
    }

    fn check(&self, n_dims: usize) -> Result<()> {
        let mismatch = |got| Error::DimensionMismatch {
            expected: n_dims,
            got,
        };
        if self.mean_raw.len() != n_dims {
            return Err(mismatch(self.mean_raw.len()));
        }
        if self.chol_raw.len() != packed_len(n_dims) {
            return Err(mismatch(self.chol_raw.len()));
        }
        if let Some(c) = &self.child {
            if c.rel_mean_raw.len() != n_dims {
                return Err(mismatch(c.rel_mean_raw.len()));
            }
            if c.rel_chol_raw.len() != packed_len(n_dims) {
                return Err(mismatch(c.rel_chol_raw.len()));
            }
        }
        Ok(())
    }
}

/// Ordered collection of components sharing a dimension and amplitude mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub n_dims: usize,
    pub amp_mode: AmpMode,
    pub components: Vec<GaussianParams>,
}

impl Mixture {
    pub fn new(n_dims: usize, amp_mode: AmpMode) -> Self {
        Self {
            n_dims,
            amp_mode,
            components: Vec::new(),
        }
    }

    pub fn with_components(
        n_dims: usize,
        amp_mode: AmpMode,
        components: Vec<GaussianParams>,
    ) -> Result<Self> {
        let mix = Self {
            n_dims,
            amp_mode,
            components,
        };
        mix.validate()?;
        Ok(mix)
    }

    /// Checks that every component and child has dimension `n_dims`.
    pub fn validate(&self) -> Result<()> {
        if self.n_dims == 0 {
            return Err(Error::InvalidArgument("n_dims must be positive".into()));
        }
        for (i, c) in self.components.iter().enumerate() {
            c.check(self.n_dims).map_err(|e| e.for_component(i))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.n_dims)
    }

    /// Number of components that take part in evaluation.
    pub fn live_count(&self) -> usize {
        self.components.iter().filter(|c| !c.frozen).count()
    }

    pub fn param(&self, coord: ParamCoord) -> Option<f64> {
        let comp = self.components.get(coord.component)?;
        let block = if coord.child {
            comp.child.as_ref()?.block(coord.block)
        } else {
            comp.block(coord.block)
        };
        block.get(coord.index).copied()
    }

    pub fn param_mut(&mut self, coord: ParamCoord) -> Option<&mut f64> {
        let comp = self.components.get_mut(coord.component)?;
        let block = if coord.child {
            comp.child.as_mut()?.block_mut(coord.block)
        } else {
            comp.block_mut(coord.block)
        };
        block.get_mut(coord.index)
    }

    /// Every raw coordinate of every live component and child.
    pub fn coords(&self) -> Vec<ParamCoord> {
        let layout = self.layout();
        let mut out = Vec::new();
        for (ci, comp) in self.components.iter().enumerate() {
            if comp.frozen {
                continue;
            }
            let slots: &[bool] = if comp.child.is_some() {
                &[false, true]
            } else {
                &[false]
            };
            for &child in slots {
                for block in ParamBlock::ALL {
                    for index in 0..layout.range(block).len() {
                        out.push(ParamCoord {
                            component: ci,
                            child,
                            block,
                            index,
                        });
                    }
                }
            }
        }
        out
    }
}
