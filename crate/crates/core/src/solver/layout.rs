use nalgebra::DVector;

use crate::residuals::{retract_block, Calibration, ParamBlock};
use crate::trajectory::Trajectory;

/// Which per-knot blocks are free parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KnotBlocks {
    pub rot: bool,
    pub pos: bool,
    pub bias: bool,
}

impl KnotBlocks {
    pub const FULL: Self = Self {
        rot: true,
        pos: true,
        bias: true,
    };
    pub const ROTATION: Self = Self {
        rot: true,
        pos: false,
        bias: false,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct KnotColumns {
    rot: Option<usize>,
    pos: Option<usize>,
    bias: Option<usize>,
}

/// Maps parameter blocks to columns of the tangent-space step.
///
/// Knot blocks occupy the leading (banded) columns in knot order;
/// calibration, when estimated, forms a trailing border of
/// `3 (q_WU) + 3 (t_WU) + 2 (gravity direction)` columns. Knots outside
/// `[first_knot, first_knot + count)` — the idle knots — have no columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterLayout {
    first_knot: usize,
    knots: Vec<KnotColumns>,
    band_dim: usize,
    calib: bool,
}

pub const CALIB_DIM: usize = 8;

impl ParameterLayout {
    pub fn new(first_knot: usize, count: usize, blocks: KnotBlocks) -> Self {
        Self::with_pinned(first_knot, count, blocks, None)
    }

    /// Like [`ParameterLayout::new`] but with the rotation and position of
    /// global knot `pinned` held fixed (its bias stays free).
    pub fn with_pinned(first_knot: usize, count: usize, blocks: KnotBlocks, pinned: Option<usize>) -> Self {
        let mut next = 0;
        let mut take = |on: bool, dim: usize| {
            on.then(|| {
                next += dim;
                next - dim
            })
        };
        let knots = (first_knot..first_knot + count)
            .map(|k| {
                let pose = Some(k) != pinned;
                KnotColumns {
                    rot: take(blocks.rot && pose, 3),
                    pos: take(blocks.pos && pose, 3),
                    bias: take(blocks.bias, 6),
                }
            })
            .collect();
        Self {
            first_knot,
            knots,
            band_dim: next,
            calib: false,
        }
    }

    pub fn with_calibration(mut self, on: bool) -> Self {
        self.calib = on;
        self
    }

    pub fn first_knot(&self) -> usize {
        self.first_knot
    }

    pub fn knot_count(&self) -> usize {
        self.knots.len()
    }

    pub fn has_calibration(&self) -> bool {
        self.calib
    }

    /// Columns of the banded knot part.
    pub fn band_dim(&self) -> usize {
        self.band_dim
    }

    pub fn calib_dim(&self) -> usize {
        if self.calib {
            CALIB_DIM
        } else {
            0
        }
    }

    pub fn dim(&self) -> usize {
        self.band_dim + self.calib_dim()
    }

    /// First column of `block`, or `None` when the block is fixed.
    pub fn column(&self, block: ParamBlock) -> Option<usize> {
        let knot = |k: usize| k.checked_sub(self.first_knot).and_then(|i| self.knots.get(i));
        let calib = |off: usize| self.calib.then_some(self.band_dim + off);
        match block {
            ParamBlock::Rot(k) => knot(k)?.rot,
            ParamBlock::Pos(k) => knot(k)?.pos,
            ParamBlock::Bias(k) | ParamBlock::BiasAcc(k) => knot(k)?.bias,
            ParamBlock::BiasGyro(k) => knot(k)?.bias.map(|c| c + 3),
            ParamBlock::CalibRot => calib(0),
            ParamBlock::CalibTrans => calib(3),
            ParamBlock::Gravity => calib(6),
        }
    }

    /// Applies `step` to every free block.
    pub fn retract(&self, traj: &mut Trajectory, calib: &mut Calibration, step: &DVector<f64>) {
        debug_assert_eq!(step.len(), self.dim());
        for (i, cols) in self.knots.iter().enumerate() {
            let k = self.first_knot + i;
            if let Some(c) = cols.rot {
                retract_block(traj, calib, ParamBlock::Rot(k), &step.as_slice()[c..c + 3]);
            }
            if let Some(c) = cols.pos {
                retract_block(traj, calib, ParamBlock::Pos(k), &step.as_slice()[c..c + 3]);
            }
            if let Some(c) = cols.bias {
                retract_block(traj, calib, ParamBlock::Bias(k), &step.as_slice()[c..c + 6]);
            }
        }
        if self.calib {
            let s = &step.as_slice()[self.band_dim..];
            retract_block(traj, calib, ParamBlock::CalibRot, &s[0..3]);
            retract_block(traj, calib, ParamBlock::CalibTrans, &s[3..6]);
            retract_block(traj, calib, ParamBlock::Gravity, &s[6..8]);
        }
    }
}
