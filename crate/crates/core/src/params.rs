//! JSON parameter files: per-class shifts, control-point displacements and
//! the control lattice they belong to.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affine::ClassShifts;
use crate::error::{Error, Result};
use crate::pipeline::Deformer;
use crate::tps::{Displacements, TpsSystem};
use crate::volume::{channel_argmax, one_hot, LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub nh: usize,
    pub nw: usize,
    pub nd: usize,
}

impl GridShape {
    pub fn as_array(&self) -> [usize; 3] {
        [self.nh, self.nw, self.nd]
    }

    pub fn points(&self) -> usize {
        self.nh * self.nw * self.nd
    }
}

impl From<[usize; 3]> for GridShape {
    fn from(s: [usize; 3]) -> Self {
        GridShape {
            nh: s[0],
            nw: s[1],
            nd: s[2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeformParams {
    pub theta: ClassShifts,
    pub delta: Displacements,
    pub grid: GridShape,
}

impl DeformParams {
    pub fn identity(c_cls: usize, grid: [usize; 3]) -> Self {
        let grid = GridShape::from(grid);
        DeformParams {
            theta: ClassShifts::zeros(c_cls),
            delta: Displacements::zeros(grid.points()),
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta.len() != self.grid.points() {
            return Err(Error::format(
                "delta",
                format!("{} displacements for a {}x{}x{} grid", self.delta.len(), self.grid.nh, self.grid.nw, self.grid.nd),
            ));
        }
        if self.theta.is_empty() {
            return Err(Error::format("theta", "no class shifts"));
        }
        if self.theta.flat().iter().chain(self.delta.flat()).any(|v| !v.is_finite()) {
            return Err(Error::format("theta", "non-finite parameter"));
        }
        Ok(())
    }

    /// Shifts each channel by its own θ and warps all channels with the TPS
    /// field on a lattice spanning the volume. No displacement bound applies.
    pub fn apply(&self, vol: &Volume) -> Result<Volume> {
        self.validate()?;
        if vol.channels() != self.theta.len() {
            return Err(Error::arg(format!(
                "volume has {} channels, parameters have {} class shifts",
                vol.channels(),
                self.theta.len()
            )));
        }
        let sys = TpsSystem::lattice(self.grid.as_array(), vol.dims())?;
        let deformer = Deformer::new(&sys, vol.dims())?.with_max_disp(f64::INFINITY);
        Ok(deformer.forward(vol, &self.theta, &self.delta)?.deformed.with_spacing(vol.spacing()))
    }

    /// Warps a label map through its one-hot encoding and re-hardens it.
    pub fn apply_labels(&self, labels: &LabelMap) -> Result<LabelMap> {
        let warped = self.apply(&one_hot(labels, self.theta.len())?)?;
        Ok(channel_argmax(&warped).with_spacing(labels.spacing()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: DeformParams = serde_json::from_str(text).map_err(|e| Error::format("params", e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}
