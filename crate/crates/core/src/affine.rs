//! Per-class shift-only affine warp. Rotation and scale stay at identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Coord, Dims, Stencil, Volume};

/// One translation vector per class, in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassShifts(pub Vec<[f64; 3]>);

impl ClassShifts {
    pub fn zeros(c_cls: usize) -> Self {
        ClassShifts(vec![[0.0; 3]; c_cls])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, c: usize) -> Coord {
        Coord(self.0[c])
    }

    pub fn flat(&self) -> &[f64] {
        self.0.as_flattened()
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        self.0.as_flattened_mut()
    }

    /// Checks finiteness and that each component is within the grid diagonal.
    pub fn validate(&self, bound: f64) -> Result<()> {
        for (c, t) in self.0.iter().enumerate() {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("shift of class {c} is not finite")));
            }
            if t.iter().any(|x| x.abs() > bound) {
                return Err(Error::arg(format!(
                    "shift {t:?} of class {c} exceeds bound {bound:.3}"
                )));
            }
        }
        Ok(())
    }
}

/// Source coordinate of target point `p` under shift `theta`.
#[inline]
pub fn affine_map(p: Coord, theta: Coord) -> Coord {
    p + theta
}

/// Backward-warps every channel by its own shift: `out(c, p) = prior(c, p + theta_c)`.
pub fn apply_class_shifts(prior: &Volume, shifts: &ClassShifts) -> Result<Volume> {
    if prior.channels() != shifts.len() {
        return Err(Error::arg(format!(
            "prior has {} channels but {} shifts were given",
            prior.channels(),
            shifts.len()
        )));
    }
    let dims = prior.dims();
    shifts.validate(dims.diagonal())?;
    let mut out = Volume::zeros(prior.channels(), dims)?.with_spacing(prior.spacing());
    for c in 0..prior.channels() {
        let theta = shifts.get(c);
        let src = prior.channel(c);
        let dst = out.channel_mut(c);
        for (i, p) in dims.coords().enumerate() {
            if let Some(s) = Stencil::new(dims, affine_map(p, theta)) {
                dst[i] = s.value(src);
            }
        }
    }
    Ok(out)
}

/// Linear-interpolation taps along one axis for a constant shift. Taps that
/// fall outside the grid carry zero weight; a sample at or beyond `-1` or `n`
/// is zero along with its derivative.
#[derive(Clone, Debug)]
struct AxisTaps {
    idx: Vec<[usize; 2]>,
    w: Vec<[f64; 2]>,
    dw: Vec<[f64; 2]>,
}

impl AxisTaps {
    fn new(n: usize, shift: f64) -> Self {
        let mut taps = AxisTaps {
            idx: vec![[0; 2]; n],
            w: vec![[0.0; 2]; n],
            dw: vec![[0.0; 2]; n],
        };
        for i in 0..n {
            let x = i as f64 + shift;
            if !(x > -1.0 && x < n as f64) {
                continue;
            }
            let f = x.floor();
            let t = x - f;
            let lo = f as isize;
            for (b, (wb, db)) in [(1.0 - t, -1.0), (t, 1.0)].into_iter().enumerate() {
                let j = lo + b as isize;
                if j >= 0 && (j as usize) < n {
                    taps.idx[i][b] = j as usize;
                    taps.w[i][b] = wb;
                    taps.dw[i][b] = db;
                }
            }
        }
        taps
    }
}

/// Trilinear translation by a constant vector, applied as three separable
/// two-tap passes. Agrees with per-voxel trilinear sampling at `p + theta`.
#[derive(Clone, Debug)]
pub(crate) struct Translation {
    dims: Dims,
    taps: [AxisTaps; 3],
}

impl Translation {
    pub(crate) fn new(dims: Dims, theta: Coord) -> Self {
        let n = dims.as_array();
        Translation {
            dims,
            taps: [
                AxisTaps::new(n[0], theta[0]),
                AxisTaps::new(n[1], theta[1]),
                AxisTaps::new(n[2], theta[2]),
            ],
        }
    }

    fn layout(&self, axis: usize) -> (usize, usize, usize) {
        let n = self.dims.as_array();
        let stride: usize = n[axis + 1..].iter().product();
        let outer = self.dims.voxels() / (n[axis] * stride);
        (outer, n[axis], stride)
    }

    fn pass(&self, axis: usize, deriv: bool, src: &[f64], dst: &mut [f64]) {
        let taps = &self.taps[axis];
        let w = if deriv { &taps.dw } else { &taps.w };
        let (outer, len, stride) = self.layout(axis);
        if stride == 1 {
            for (out, row) in dst.chunks_exact_mut(len).zip(src.chunks_exact(len)) {
                for ((y, [j0, j1]), [w0, w1]) in out.iter_mut().zip(&taps.idx).zip(w) {
                    *y = w0 * row[*j0] + w1 * row[*j1];
                }
            }
            return;
        }
        for o in 0..outer {
            let base = o * len * stride;
            for i in 0..len {
                let [j0, j1] = taps.idx[i];
                let [w0, w1] = w[i];
                let out = &mut dst[base + i * stride..base + (i + 1) * stride];
                let a = &src[base + j0 * stride..base + (j0 + 1) * stride];
                let b = &src[base + j1 * stride..base + (j1 + 1) * stride];
                for ((y, x0), x1) in out.iter_mut().zip(a).zip(b) {
                    *y = w0 * x0 + w1 * x1;
                }
            }
        }
    }

    fn pass_adjoint(&self, axis: usize, src: &[f64], dst: &mut [f64]) {
        let taps = &self.taps[axis];
        let (outer, len, stride) = self.layout(axis);
        dst.iter_mut().for_each(|v| *v = 0.0);
        if stride == 1 {
            for (out, row) in dst.chunks_exact_mut(len).zip(src.chunks_exact(len)) {
                for ((g, [j0, j1]), [w0, w1]) in row.iter().zip(&taps.idx).zip(&taps.w) {
                    out[*j0] += w0 * g;
                    out[*j1] += w1 * g;
                }
            }
            return;
        }
        for o in 0..outer {
            let base = o * len * stride;
            for i in 0..len {
                let g = &src[base + i * stride..base + (i + 1) * stride];
                for b in 0..2 {
                    let wb = taps.w[i][b];
                    if wb == 0.0 {
                        continue;
                    }
                    let j = taps.idx[i][b];
                    let out = &mut dst[base + j * stride..base + (j + 1) * stride];
                    for (y, x) in out.iter_mut().zip(g) {
                        *y += wb * x;
                    }
                }
            }
        }
    }

    fn run(&self, deriv_axis: Option<usize>, src: &[f64], dst: &mut [f64]) {
        let mut tmp = vec![0.0; src.len()];
        self.pass(2, deriv_axis == Some(2), src, dst);
        self.pass(1, deriv_axis == Some(1), dst, &mut tmp);
        self.pass(0, deriv_axis == Some(0), &tmp, dst);
    }

    /// `dst(p) = src(p + theta)`.
    pub(crate) fn apply(&self, src: &[f64], dst: &mut [f64]) {
        self.run(None, src, dst);
    }

    /// `dst = T^t g`.
    pub(crate) fn adjoint(&self, g: &[f64], dst: &mut [f64]) {
        let mut tmp = vec![0.0; g.len()];
        self.pass_adjoint(0, g, dst);
        self.pass_adjoint(1, dst, &mut tmp);
        self.pass_adjoint(2, &tmp, dst);
    }

    /// `sum_p g(p) * d/dtheta src(p + theta)`.
    pub(crate) fn grad_theta(&self, src: &[f64], g: &[f64]) -> [f64; 3] {
        let mut buf = vec![0.0; src.len()];
        let mut out = [0.0; 3];
        for (a, o) in out.iter_mut().enumerate() {
            self.run(Some(a), src, &mut buf);
            *o = buf.iter().zip(g).map(|(x, y)| x * y).sum();
        }
        out
    }
}
