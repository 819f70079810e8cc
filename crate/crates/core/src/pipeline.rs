//! Forward and adjoint passes of the deformation chain
//! `probabilities -> per-class shift -> shared TPS field`.

use crate::affine::{ClassShifts, Translation};
use crate::error::{Error, Result};
use crate::tps::{Displacements, Field, TpsBasis, TpsSystem};
use crate::volume::{Dims, Stencil, Volume};

/// Intermediate volumes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Prior after the per-class shifts.
    pub affine: Volume,
    /// Source coordinate of every output voxel under the TPS.
    pub field: Field,
    /// Prior after shifts and TPS.
    pub deformed: Volume,
}

/// Gradients of a scalar with respect to the deformation inputs.
#[derive(Clone, Debug, Default)]
pub struct Adjoint {
    pub d_theta: Vec<[f64; 3]>,
    pub d_delta: Vec<[f64; 3]>,
    pub d_probs: Option<Vec<f64>>,
}

/// Applies shifts and a TPS field on a fixed lattice.
#[derive(Clone, Debug)]
pub struct Deformer {
    basis: TpsBasis,
    max_disp: f64,
}

impl Deformer {
    pub fn new(sys: &TpsSystem, dims: Dims) -> Result<Self> {
        Ok(Deformer {
            basis: TpsBasis::new(sys, dims)?,
            max_disp: sys.grid().default_max_disp(),
        })
    }

    pub fn with_max_disp(mut self, max_disp: f64) -> Self {
        self.max_disp = max_disp;
        self
    }

    pub fn dims(&self) -> Dims {
        self.basis.dims()
    }

    pub fn control_points(&self) -> usize {
        self.basis.control_points()
    }

    pub fn max_disp(&self) -> f64 {
        self.max_disp
    }

    pub fn basis(&self) -> &TpsBasis {
        &self.basis
    }

    fn check(&self, probs: &Volume, shifts: &ClassShifts, disp: &Displacements) -> Result<()> {
        if probs.dims() != self.dims() {
            return Err(Error::arg(format!(
                "volume dims {:?} do not match deformer dims {:?}",
                probs.dims(),
                self.dims()
            )));
        }
        if shifts.len() != probs.channels() {
            return Err(Error::arg(format!(
                "{} shifts for {} channels",
                shifts.len(),
                probs.channels()
            )));
        }
        if disp.len() != self.control_points() {
            return Err(Error::arg(format!(
                "{} displacements for {} control points",
                disp.len(),
                self.control_points()
            )));
        }
        shifts.validate(self.dims().diagonal())?;
        disp.validate(self.max_disp)
    }

    pub fn forward(&self, probs: &Volume, shifts: &ClassShifts, disp: &Displacements) -> Result<Forward> {
        self.check(probs, shifts, disp)?;
        let dims = self.dims();
        let n = dims.voxels();
        let c_cls = probs.channels();

        let mut affine = Volume::zeros(c_cls, dims)?.with_spacing(probs.spacing());
        for c in 0..c_cls {
            Translation::new(dims, shifts.get(c)).apply(probs.channel(c), affine.channel_mut(c));
        }

        let field = self.basis.field(disp);
        let mut out = vec![0.0; c_cls * n];
        for (i, q) in field.coords.iter().enumerate() {
            if let Some(s) = Stencil::new(dims, *q) {
                for c in 0..c_cls {
                    out[c * n + i] = s.value(affine.channel(c));
                }
            }
        }
        let deformed = Volume::from_data(c_cls, dims, out)?.with_spacing(probs.spacing());
        Ok(Forward { affine, field, deformed })
    }

    /// Back-propagates `grad_deformed` (w.r.t. the deformed prior) and
    /// `grad_affine_extra` (direct terms on the shifted prior).
    ///
    /// `want_params` controls the shift/displacement gradients and
    /// `want_probs` the gradient on the input probabilities.
    pub fn backward(
        &self,
        probs: &Volume,
        shifts: &ClassShifts,
        fwd: &Forward,
        grad_deformed: &[f64],
        grad_affine_extra: Option<&[f64]>,
        want_params: bool,
        want_probs: bool,
    ) -> Adjoint {
        let dims = self.dims();
        let n = dims.voxels();
        let c_cls = probs.channels();

        // TPS stage
        let mut g_affine = vec![0.0; c_cls * n];
        let mut g_field = if want_params { vec![[0.0; 3]; n] } else { Vec::new() };
        for (i, q) in fwd.field.coords.iter().enumerate() {
            let upstream: f64 = (0..c_cls).map(|c| grad_deformed[c * n + i].abs()).sum();
            if upstream == 0.0 {
                continue;
            }
            let Some(s) = Stencil::new(dims, *q) else { continue };
            for c in 0..c_cls {
                let g = grad_deformed[c * n + i];
                if g == 0.0 {
                    continue;
                }
                s.scatter(&mut g_affine[c * n..(c + 1) * n], g);
                if want_params {
                    let sg = s.gradient(fwd.affine.channel(c));
                    let gf = &mut g_field[i];
                    gf[0] += g * sg[0];
                    gf[1] += g * sg[1];
                    gf[2] += g * sg[2];
                }
            }
        }
        if let Some(extra) = grad_affine_extra {
            for (a, e) in g_affine.iter_mut().zip(extra) {
                *a += e;
            }
        }
        let d_delta = if want_params {
            self.basis.pullback(&g_field)
        } else {
            vec![[0.0; 3]; self.control_points()]
        };

        // shift stage
        let mut d_theta = vec![[0.0; 3]; c_cls];
        let mut g_probs = if want_probs { vec![0.0; c_cls * n] } else { Vec::new() };
        for c in 0..c_cls {
            let ga = &g_affine[c * n..(c + 1) * n];
            if ga.iter().all(|g| *g == 0.0) {
                continue;
            }
            let shift = Translation::new(dims, shifts.get(c));
            if want_params {
                d_theta[c] = shift.grad_theta(probs.channel(c), ga);
            }
            if want_probs {
                shift.adjoint(ga, &mut g_probs[c * n..(c + 1) * n]);
            }
        }

        Adjoint {
            d_theta,
            d_delta,
            d_probs: want_probs.then_some(g_probs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::apply_class_shifts;
    use crate::tps::warp_volume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_module_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = Dims::cube(7);
        let data = (0..2 * dims.voxels()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let probs = Volume::from_data(2, dims, data).unwrap();
        let sys = TpsSystem::lattice([2, 2, 2], dims).unwrap();
        let shifts = ClassShifts(vec![[0.3, -0.6, 1.2], [-1.1, 0.4, 0.0]]);
        let disp = Displacements((0..8).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5]).collect());
        let fwd = Deformer::new(&sys, dims).unwrap().forward(&probs, &shifts, &disp).unwrap();
        let affine = apply_class_shifts(&probs, &shifts).unwrap();
        for (a, b) in fwd.affine.data().iter().zip(affine.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let coef = sys.solve_coefficients(&disp).unwrap();
        let direct = warp_volume(&affine, &sys.warp_field(&coef, dims).unwrap()).unwrap();
        for (a, b) in fwd.deformed.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_field_equals_uniform_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = Dims::cube(6);
        let data = (0..2 * dims.voxels()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let probs = Volume::from_data(2, dims, data).unwrap();
        let sys = TpsSystem::lattice([2, 2, 2], dims).unwrap();
        let fwd = Deformer::new(&sys, dims)
            .unwrap()
            .forward(&probs, &ClassShifts::zeros(2), &Displacements(vec![[0.0, 0.0, 1.0]; 8]))
            .unwrap();
        let shifted = apply_class_shifts(&probs, &ClassShifts(vec![[0.0, 0.0, 1.0]; 2])).unwrap();
        for (a, b) in fwd.deformed.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let dims = Dims::cube(4);
        let sys = TpsSystem::lattice([2, 2, 2], dims).unwrap();
        let def = Deformer::new(&sys, dims).unwrap();
        let probs = Volume::zeros(2, dims).unwrap();
        assert!(def.forward(&probs, &ClassShifts::zeros(3), &Displacements::zeros(8)).is_err());
        assert!(def.forward(&probs, &ClassShifts::zeros(2), &Displacements::zeros(9)).is_err());
        let other = Volume::zeros(2, Dims::cube(5)).unwrap();
        assert!(def.forward(&other, &ClassShifts::zeros(2), &Displacements::zeros(8)).is_err());
        let big = Displacements(vec![[100.0, 0.0, 0.0]; 8]);
        assert!(def.forward(&probs, &ClassShifts::zeros(2), &big).is_err());
    }
}
