//! 3D thin-plate-spline warp with fixed target control points.
//!
//! The system matrix
//!
//! ```text
//!     | K   P |        K[i][j] = U(|p_i - p_j|)
//! M = |       |        P[i]    = (1, h_i, w_i, d_i)
//!     | P^T 0 |
//! ```
//!
//! depends only on the target control points, so it is factorized once per
//! grid. Solving `M a = v` with `v` the source coordinates of one axis followed
//! by four zeros gives that axis's radial and polynomial coefficients. The
//! four zero rows force the radial coefficients to sum to zero and to have zero
//! first moments against the control points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};
use crate::volume::{Coord, Dims, Stencil, Volume};

/// Condition estimates above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// `U(r) = r^2 ln(r^2)`, continuous at zero.
pub fn kernel_u(r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::arg(format!("kernel argument must be non-negative, got {r}")));
    }
    Ok(kernel_sq(r * r))
}

/// Kernel evaluated from a squared distance, avoiding a square root.
#[inline]
pub(crate) fn kernel_sq(r2: f64) -> f64 {
    if r2 > 0.0 {
        r2 * r2.ln()
    } else {
        0.0
    }
}

#[inline]
fn dist_sq(a: &Coord, b: &Coord) -> f64 {
    let dh = a[0] - b[0];
    let dw = a[1] - b[1];
    let dd = a[2] - b[2];
    dh * dh + dw * dw + dd * dd
}

/// Target control points, ordered `(h, w, d)`-lexicographically with `d` fastest
/// when built as a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    points: Vec<Coord>,
    shape: Option<[usize; 3]>,
    extent: Dims,
}

impl ControlGrid {
    /// Regular `nh x nw x nd` lattice over the voxel-center extent of `dims`,
    /// nodes at fractions `k / (n - 1)` of each axis, borders included.
    pub fn lattice(shape: [usize; 3], dims: Dims) -> Result<Self> {
        dims.validate()?;
        if shape.iter().any(|&n| n < 2) {
            return Err(Error::arg(format!("control lattice needs >= 2 nodes per axis, got {shape:?}")));
        }
        let ext = dims.as_array();
        let axis = |a: usize, k: usize| -> f64 { k as f64 * (ext[a] as f64 - 1.0) / (shape[a] as f64 - 1.0) };
        let mut points = Vec::with_capacity(shape.iter().product());
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    points.push(Coord::new(axis(0, i), axis(1, j), axis(2, k)));
                }
            }
        }
        Ok(ControlGrid {
            points,
            shape: Some(shape),
            extent: dims,
        })
    }

    /// Arbitrary control points (used for tests and custom layouts).
    pub fn from_points(points: Vec<Coord>, extent: Dims) -> Result<Self> {
        if points.len() < 5 {
            return Err(Error::arg(format!("need at least 5 control points, got {}", points.len())));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("control point is not finite".into()));
        }
        Ok(ControlGrid {
            points,
            shape: None,
            extent,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Coord] {
        &self.points
    }

    pub fn shape(&self) -> Option<[usize; 3]> {
        self.shape
    }

    pub fn extent(&self) -> Dims {
        self.extent
    }

    /// Default bound on displacement magnitude: twice the smallest cell edge.
    pub fn default_max_disp(&self) -> f64 {
        match self.shape {
            Some(shape) => {
                let ext = self.extent.as_array();
                let cell = (0..3)
                    .map(|a| (ext[a] as f64 - 1.0) / (shape[a] as f64 - 1.0))
                    .fold(f64::INFINITY, f64::min);
                4.0 * (cell / 2.0)
            }
            None => self.extent.diagonal(),
        }
    }
}

/// Per-control-point offsets; source point `i` is `p_i + delta_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Displacements(pub Vec<[f64; 3]>);

impl Displacements {
    pub fn zeros(n: usize) -> Self {
        Displacements(vec![[0.0; 3]; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        self.0.as_flattened()
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        self.0.as_flattened_mut()
    }

    /// Fails on non-finite entries or any `|delta_i| > max_disp`.
    pub fn validate(&self, max_disp: f64) -> Result<()> {
        for (i, d) in self.0.iter().enumerate() {
            let c = Coord(*d);
            if !c.is_finite() {
                return Err(Error::Numeric(format!("displacement {i} is not finite")));
            }
            if c.norm() > max_disp {
                return Err(Error::arg(format!(
                    "displacement {i} has magnitude {:.3} > max_disp {max_disp:.3}",
                    c.norm()
                )));
            }
        }
        Ok(())
    }
}

/// Coefficients of the mapping for each output axis: `N` radial weights and
/// the polynomial part `(const, h, w, d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpsCoefficients {
    pub radial: [Vec<f64>; 3],
    pub poly: [[f64; 4]; 3],
}

impl TpsCoefficients {
    pub fn identity(n: usize) -> Self {
        let mut poly = [[0.0; 4]; 3];
        for (a, row) in poly.iter_mut().enumerate() {
            row[a + 1] = 1.0;
        }
        TpsCoefficients {
            radial: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            poly,
        }
    }

    /// Largest violation of `sum a_i = 0` and `sum a_i p_i = 0` over all axes.
    pub fn constraint_residual(&self, grid: &ControlGrid) -> f64 {
        let mut worst = 0.0f64;
        for radial in &self.radial {
            let mut sums = [0.0; 4];
            for (a, p) in radial.iter().zip(grid.points()) {
                sums[0] += a;
                sums[1] += a * p[0];
                sums[2] += a * p[1];
                sums[3] += a * p[2];
            }
            worst = sums.iter().fold(worst, |m, s| m.max(s.abs()));
        }
        worst
    }
}

/// The factorized system for one control grid.
#[derive(Clone, Debug)]
pub struct TpsSystem {
    grid: ControlGrid,
    matrix: Matrix,
    lu: Lu,
    inverse: Matrix,
    condition: f64,
}

impl TpsSystem {
    pub fn new(grid: ControlGrid) -> Result<Self> {
        let n = grid.len();
        let pts = grid.points();
        let mut m = Matrix::zeros(n + 4);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m.set(i, j, kernel_sq(dist_sq(&pts[i], &pts[j])));
                }
            }
            let row = [1.0, pts[i][0], pts[i][1], pts[i][2]];
            for (k, v) in row.into_iter().enumerate() {
                m.set(i, n + k, v);
                m.set(n + k, i, v);
            }
        }
        let lu = Lu::factor(&m)?;
        let inverse = lu.inverse();
        let condition = m.norm_one() * inverse.norm_one();
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Singular { condition });
        }
        Ok(TpsSystem {
            grid,
            matrix: m,
            lu,
            inverse,
            condition,
        })
    }

    pub fn lattice(shape: [usize; 3], dims: Dims) -> Result<Self> {
        TpsSystem::new(ControlGrid::lattice(shape, dims)?)
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    /// Number of control points.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// 1-norm condition number of the system matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    fn row_at(&self, p: Coord) -> Vec<f64> {
        let n = self.len();
        let mut row = Vec::with_capacity(n + 4);
        row.extend(self.grid.points().iter().map(|q| kernel_sq(dist_sq(&p, q))));
        row.extend([1.0, p[0], p[1], p[2]]);
        row
    }

    /// Weights `g_i(p)` such that the mapped point is `p + sum_i g_i(p) delta_i`.
    ///
    /// The same weights apply on every axis because all axes share `M`.
    pub fn weights_at(&self, p: Coord) -> Vec<f64> {
        let n = self.len();
        let row = self.row_at(p);
        let mut g = vec![0.0; n];
        for (k, r) in row.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += r * self.inverse.get(k, i);
            }
        }
        g
    }

    /// Solves `M a = (p_i + delta_i | 0 0 0 0)` for each axis.
    ///
    /// The identity part is added analytically, so zero displacements give
    /// exactly the identity coefficients.
    pub fn solve_coefficients(&self, disp: &Displacements) -> Result<TpsCoefficients> {
        let n = self.len();
        if disp.len() != n {
            return Err(Error::arg(format!("expected {n} displacements, got {}", disp.len())));
        }
        let mut coef = TpsCoefficients::identity(n);
        let mut rhs = vec![0.0; n + 4];
        for a in 0..3 {
            for (r, d) in rhs.iter_mut().zip(&disp.0) {
                *r = d[a];
            }
            let x = self.lu.solve(&rhs);
            coef.radial[a].copy_from_slice(&x[..n]);
            for k in 0..4 {
                coef.poly[a][k] += x[n + k];
            }
        }
        Ok(coef)
    }

    /// Maps a target coordinate to its source coordinate.
    pub fn map_point(&self, coef: &TpsCoefficients, p: Coord) -> Coord {
        let u: Vec<f64> = self.grid.points().iter().map(|q| kernel_sq(dist_sq(&p, q))).collect();
        let mut out = Coord::default();
        for a in 0..3 {
            let c = &coef.poly[a];
            let mut v = c[0] + c[1] * p[0] + c[2] * p[1] + c[3] * p[2];
            for (ri, ui) in coef.radial[a].iter().zip(&u) {
                v += ri * ui;
            }
            out[a] = v;
        }
        out
    }

    /// Evaluates [`TpsSystem::map_point`] on every voxel of `dims`.
    pub fn warp_field(&self, coef: &TpsCoefficients, dims: Dims) -> Result<Field> {
        dims.validate()?;
        Ok(Field {
            dims,
            coords: dims.coords().map(|p| self.map_point(coef, p)).collect(),
        })
    }
}

/// A source coordinate for every output voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub dims: Dims,
    pub coords: Vec<Coord>,
}

impl Field {
    pub fn identity(dims: Dims) -> Self {
        Field {
            dims,
            coords: dims.coords().collect(),
        }
    }
}

/// Backward-warps all channels through one shared coordinate field.
pub fn warp_volume(vol: &Volume, field: &Field) -> Result<Volume> {
    if vol.dims() != field.dims || field.coords.len() != field.dims.voxels() {
        return Err(Error::arg(format!(
            "field dims {:?} do not match volume dims {:?}",
            field.dims,
            vol.dims()
        )));
    }
    let dims = vol.dims();
    let n = dims.voxels();
    let mut out = Volume::zeros(vol.channels(), dims)?.with_spacing(vol.spacing());
    for (i, p) in field.coords.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Numeric(format!("field coordinate {i} is not finite")));
        }
        if let Some(s) = Stencil::new(dims, *p) {
            for c in 0..vol.channels() {
                out.data_mut()[c * n + i] = s.value(vol.channel(c));
            }
        }
    }
    Ok(out)
}

/// Precomputed weights `g_i(p)` for every voxel of a lattice; makes the field
/// an explicit linear function of the displacements.
#[derive(Clone, Debug)]
pub struct TpsBasis {
    dims: Dims,
    n: usize,
    /// Control-point major: `weights[i * voxels + v]`.
    weights: Vec<f64>,
}

impl TpsBasis {
    pub fn new(sys: &TpsSystem, dims: Dims) -> Result<Self> {
        dims.validate()?;
        let n = sys.len();
        let nv = dims.voxels();
        let mut weights = vec![0.0; n * nv];
        for (v, p) in dims.coords().enumerate() {
            for (i, g) in sys.weights_at(p).into_iter().enumerate() {
                weights[i * nv + v] = g;
            }
        }
        Ok(TpsBasis { dims, n, weights })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn control_points(&self) -> usize {
        self.n
    }

    /// Weight of control point `i` at a voxel.
    #[inline]
    pub fn weight(&self, voxel: usize, i: usize) -> f64 {
        self.weights[i * self.dims.voxels() + voxel]
    }

    fn column(&self, i: usize) -> &[f64] {
        let nv = self.dims.voxels();
        &self.weights[i * nv..(i + 1) * nv]
    }

    /// Source coordinates `p + sum_i g_i(p) delta_i`. Zero displacements give
    /// the lattice coordinates exactly.
    pub fn field(&self, disp: &Displacements) -> Field {
        let nv = self.dims.voxels();
        let mut off = vec![[0.0; 3]; nv];
        for (i, d) in disp.0.iter().enumerate() {
            if d == &[0.0; 3] {
                continue;
            }
            for (o, g) in off.iter_mut().zip(self.column(i)) {
                o[0] += g * d[0];
                o[1] += g * d[1];
                o[2] += g * d[2];
            }
        }
        let coords = self
            .dims
            .coords()
            .enumerate()
            .map(|(v, p)| p + Coord(off[v]))
            .collect();
        Field {
            dims: self.dims,
            coords,
        }
    }

    /// Pulls a per-voxel gradient on source coordinates back onto the displacements.
    pub fn pullback(&self, grad_field: &[[f64; 3]]) -> Vec<[f64; 3]> {
        (0..self.n)
            .map(|i| {
                let mut acc = [0.0; 3];
                for (w, g) in self.column(i).iter().zip(grad_field) {
                    acc[0] += w * g[0];
                    acc[1] += w * g[1];
                    acc[2] += w * g[2];
                }
                acc
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_disp(rng: &mut impl Rng, n: usize, max: f64) -> Displacements {
        Displacements(
            (0..n)
                .map(|_| [rng.gen_range(-max..max), rng.gen_range(-max..max), rng.gen_range(-max..max)])
                .collect(),
        )
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_u(0.0).unwrap(), 0.0);
        assert_eq!(kernel_u(1.0).unwrap(), 0.0);
        assert!((kernel_u(2.0).unwrap() - 5.545177444479562).abs() < 1e-12);
        assert!(kernel_u(-1.0).is_err());
        assert!(kernel_u(f64::NAN).is_err());
    }

    #[test]
    fn small_grid_structure() {
        let sys = TpsSystem::lattice([2, 2, 2], Dims::cube(6)).unwrap();
        let m = sys.matrix();
        assert_eq!(m.size(), 12);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        for i in 0..8 {
            assert_eq!(m.get(i, i), 0.0);
        }
        for i in 8..12 {
            for j in 8..12 {
                assert_eq!(m.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn lattice_order_and_placement() {
        let g = ControlGrid::lattice([2, 3, 2], Dims::new(5, 9, 3)).unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!(g.points()[0], Coord::new(0.0, 0.0, 0.0));
        assert_eq!(g.points()[1], Coord::new(0.0, 0.0, 2.0));
        assert_eq!(g.points()[2], Coord::new(0.0, 4.0, 0.0));
        assert_eq!(g.points()[11], Coord::new(4.0, 8.0, 2.0));
        assert!(ControlGrid::lattice([1, 3, 3], Dims::cube(5)).is_err());
    }

    #[test]
    fn duplicate_points_are_singular() {
        let mut pts = ControlGrid::lattice([2, 2, 2], Dims::cube(4)).unwrap().points().to_vec();
        pts.push(pts[3]);
        let grid = ControlGrid::from_points(pts, Dims::cube(4)).unwrap();
        assert!(matches!(TpsSystem::new(grid), Err(Error::Singular { .. })));
    }

    #[test]
    fn coplanar_points_are_singular() {
        let pts: Vec<Coord> = (0..9).map(|i| Coord::new((i / 3) as f64, (i % 3) as f64, 0.0)).collect();
        let grid = ControlGrid::from_points(pts, Dims::cube(4)).unwrap();
        assert!(matches!(TpsSystem::new(grid), Err(Error::Singular { .. })));
    }

    #[test]
    fn zero_displacement_is_identity() {
        let sys = TpsSystem::lattice([3, 3, 3], Dims::cube(8)).unwrap();
        let coef = sys.solve_coefficients(&Displacements::zeros(27)).unwrap();
        assert_eq!(coef, TpsCoefficients::identity(27));
        let p = Coord::new(1.25, -3.5, 7.75);
        assert_eq!(sys.map_point(&coef, p), p);
    }

    #[test]
    fn wrong_displacement_count() {
        let sys = TpsSystem::lattice([2, 2, 2], Dims::cube(4)).unwrap();
        assert!(matches!(sys.solve_coefficients(&Displacements::zeros(7)), Err(Error::Argument(_))));
    }

    #[test]
    fn interpolates_control_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sys = TpsSystem::lattice([3, 3, 3], Dims::cube(10)).unwrap();
        let disp = random_disp(&mut rng, 27, 2.0);
        let coef = sys.solve_coefficients(&disp).unwrap();
        for (p, d) in sys.grid().points().iter().zip(&disp.0) {
            let q = sys.map_point(&coef, *p);
            assert!(q.distance(&(*p + Coord(*d))) < 1e-8);
        }
        assert!(coef.constraint_residual(sys.grid()) < 1e-8);
    }

    #[test]
    fn coefficients_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = TpsSystem::lattice([2, 3, 2], Dims::cube(7)).unwrap();
        let n = sys.len();
        let d1 = random_disp(&mut rng, n, 1.5);
        let d2 = random_disp(&mut rng, n, 1.5);
        let (a, b) = (0.7, -1.3);
        let mix = Displacements(
            d1.0.iter()
                .zip(&d2.0)
                .map(|(x, y)| [a * x[0] + b * y[0], a * x[1] + b * y[1], a * x[2] + b * y[2]])
                .collect(),
        );
        let c1 = sys.solve_coefficients(&d1).unwrap();
        let c2 = sys.solve_coefficients(&d2).unwrap();
        let cm = sys.solve_coefficients(&mix).unwrap();
        let id = TpsCoefficients::identity(n);
        for ax in 0..3 {
            for i in 0..n {
                let expect = a * c1.radial[ax][i] + b * c2.radial[ax][i];
                assert!((cm.radial[ax][i] - expect).abs() < 1e-9);
            }
            for k in 0..4 {
                // the identity part is affine, not linear, in the displacements
                let lin = |c: &TpsCoefficients| c.poly[ax][k] - id.poly[ax][k];
                assert!((lin(&cm) - (a * lin(&c1) + b * lin(&c2))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn basis_field_matches_map_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dims = Dims::new(7, 6, 5);
        let sys = TpsSystem::lattice([2, 3, 2], dims).unwrap();
        let disp = random_disp(&mut rng, sys.len(), 1.0);
        let coef = sys.solve_coefficients(&disp).unwrap();
        let direct = sys.warp_field(&coef, dims).unwrap();
        let basis = TpsBasis::new(&sys, dims).unwrap().field(&disp);
        for (a, b) in direct.coords.iter().zip(&basis.coords) {
            assert!(a.distance(b) < 1e-9);
        }
        assert_eq!(TpsBasis::new(&sys, dims).unwrap().field(&Displacements::zeros(sys.len())), Field::identity(dims));
    }

    #[test]
    fn identity_field_reproduces_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = Dims::cube(5);
        let data = (0..2 * 125).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v = Volume::from_data(2, dims, data).unwrap();
        let sys = TpsSystem::lattice([2, 2, 2], dims).unwrap();
        let coef = sys.solve_coefficients(&Displacements::zeros(8)).unwrap();
        let field = sys.warp_field(&coef, dims).unwrap();
        assert_eq!(field, Field::identity(dims));
        assert_eq!(warp_volume(&v, &field).unwrap(), v);
    }

    #[test]
    fn warp_dims_mismatch() {
        let v = Volume::zeros(1, Dims::cube(3)).unwrap();
        assert!(warp_volume(&v, &Field::identity(Dims::cube(4))).is_err());
    }

    #[test]
    fn displacement_bounds() {
        let g = ControlGrid::lattice([3, 3, 3], Dims::cube(32)).unwrap();
        assert_eq!(g.default_max_disp(), 31.0);
        let d = Displacements(vec![[3.0, 4.0, 0.0]]);
        assert!(d.validate(5.0).is_ok());
        assert!(d.validate(4.9).is_err());
        assert!(Displacements(vec![[f64::INFINITY, 0.0, 0.0]]).validate(5.0).is_err());
    }
}
