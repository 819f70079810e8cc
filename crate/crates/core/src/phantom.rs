//! Synthetic multi-organ phantoms: disjoint ellipsoids in a canonical layout,
//! warped per case by known shifts and TPS displacements.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::ClassShifts;
use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};
use crate::losses::hard_centroids;
use crate::pipeline::Deformer;
use crate::tps::{Displacements, TpsSystem};
use crate::volume::{channel_argmax, one_hot, read_volume, write_volume, Coord, Dims, LabelMap, VolumeFile};

/// Minimum empty gap between two organs, in voxels.
pub const ORGAN_MARGIN: usize = 2;
/// Minimum distance from any organ voxel to the grid border, in voxels.
pub const BORDER_CLEARANCE: usize = 3;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CANONICAL_FILE: &str = "canonical.pwv";

/// Axis-aligned ellipsoid; center as a fraction of `dim - 1`, semi-axes as a
/// fraction of `dim`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl OrganSpec {
    fn in_voxels(&self, dims: Dims) -> ([f64; 3], [f64; 3]) {
        let n = dims.as_array();
        let mut c = [0.0; 3];
        let mut s = [0.0; 3];
        for a in 0..3 {
            c[a] = self.center[a] * (n[a] - 1) as f64;
            s[a] = self.semi_axes[a] * n[a] as f64;
        }
        (c, s)
    }

    pub fn contains(&self, dims: Dims, p: [usize; 3]) -> bool {
        let (c, s) = self.in_voxels(dims);
        let mut r = 0.0;
        for a in 0..3 {
            let t = (p[a] as f64 - c[a]) / s[a];
            r += t * t;
        }
        r <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub c_cls: usize,
    pub dims: Dims,
    pub organs: Vec<OrganSpec>,
    /// Bound on every shift component (voxels).
    pub max_theta: f64,
    /// Bound on every displacement component (voxels).
    pub max_delta: f64,
    /// TPS control lattice used to generate the warps.
    pub grid: [usize; 3],
    pub n_cases: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let semi = [0.208, 0.169, 0.169];
        let organ = |center: [f64; 3], perm: [usize; 3]| OrganSpec {
            center,
            semi_axes: [semi[perm[0]], semi[perm[1]], semi[perm[2]]],
        };
        PhantomSpec {
            c_cls: 4,
            dims: Dims::cube(32),
            organs: vec![
                organ([0.3, 0.3, 0.3], [0, 1, 2]),
                organ([0.7, 0.3, 0.7], [1, 0, 2]),
                organ([0.3, 0.7, 0.7], [1, 2, 0]),
                organ([0.7, 0.7, 0.3], [2, 1, 0]),
            ],
            max_theta: 2.0,
            max_delta: 2.0,
            grid: [3, 3, 3],
            n_cases: 20,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Checks organ count, extents, margins and border clearance.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.organs.len() != self.c_cls {
            return Err(Error::arg(format!(
                "{} organs for c_cls = {}",
                self.organs.len(),
                self.c_cls
            )));
        }
        if self.c_cls > u8::MAX as usize {
            return Err(Error::arg("at most 255 classes"));
        }
        if !(self.max_theta >= 0.0 && self.max_delta >= 0.0) {
            return Err(Error::arg("warp bounds must be non-negative"));
        }
        let n = self.dims.as_array();
        let voxels: Vec<Vec<[usize; 3]>> = self.organs.iter().map(|o| self.rasterize(o)).collect();
        for (k, (organ, vox)) in self.organs.iter().zip(&voxels).enumerate() {
            if organ.semi_axes.iter().any(|s| !(*s > 0.0)) || organ.center.iter().any(|c| !c.is_finite()) {
                return Err(Error::arg(format!("organ {} has invalid geometry", k + 1)));
            }
            if vox.is_empty() {
                return Err(Error::arg(format!("organ {} covers no voxel", k + 1)));
            }
            for p in vox {
                for a in 0..3 {
                    if p[a] < BORDER_CLEARANCE || p[a] + BORDER_CLEARANCE >= n[a] {
                        return Err(Error::arg(format!(
                            "organ {} is closer than {BORDER_CLEARANCE} voxels to the border",
                            k + 1
                        )));
                    }
                }
            }
        }
        let min_sq = ((ORGAN_MARGIN + 1) * (ORGAN_MARGIN + 1)) as f64;
        for i in 0..voxels.len() {
            for j in i + 1..voxels.len() {
                for p in &voxels[i] {
                    for q in &voxels[j] {
                        let d2: f64 = (0..3).map(|a| (p[a] as f64 - q[a] as f64).powi(2)).sum();
                        if d2 < min_sq {
                            return Err(Error::arg(format!(
                                "organs {} and {} overlap or are closer than {ORGAN_MARGIN} voxels",
                                i + 1,
                                j + 1
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn rasterize(&self, organ: &OrganSpec) -> Vec<[usize; 3]> {
        let n = self.dims.as_array();
        let mut out = Vec::new();
        for h in 0..n[0] {
            for w in 0..n[1] {
                for d in 0..n[2] {
                    if organ.contains(self.dims, [h, w, d]) {
                        out.push([h, w, d]);
                    }
                }
            }
        }
        out
    }

    /// Seed of case `index`.
    pub fn case_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }

    pub fn system(&self) -> Result<TpsSystem> {
        TpsSystem::lattice(self.grid, self.dims)
    }
}

/// Rasterized canonical layout; label `k + 1` for organ `k`.
pub fn canonical_anatomy(spec: &PhantomSpec) -> Result<LabelMap> {
    spec.validate()?;
    let mut labels = LabelMap::background(spec.dims)?;
    for (k, organ) in spec.organs.iter().enumerate() {
        for p in spec.rasterize(organ) {
            labels.set(p[0], p[1], p[2], (k + 1) as u8);
        }
    }
    Ok(labels)
}

/// Refinement rounds that bring each target centroid onto the shifted organ centroid.
pub const CENTROID_ROUNDS: usize = 12;
/// Residual (voxels) below which refinement stops.
pub const CENTROID_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub labels: LabelMap,
    pub theta: ClassShifts,
    pub delta: Displacements,
    pub seed: u64,
    /// Largest per-axis gap between a target centroid and the matching
    /// shifted canonical centroid.
    pub centroid_residual: f64,
}

/// Draws a shift per class and a displacement per control point, then warps
/// the one-hot canonical anatomy and re-hardens it.
///
/// Shifts are uniform within their bound. Displacements start uniform within
/// theirs and are then corrected, staying within the bound, so that the TPS
/// leaves each shifted organ's centroid in place. The shifts alone then carry
/// the centroid motion, which makes them recoverable.
pub fn sample_case(spec: &PhantomSpec, sys: &TpsSystem, case_seed: u64) -> Result<Case> {
    let canonical = canonical_anatomy(spec)?;
    if sys.grid().extent() != spec.dims {
        return Err(Error::arg("TPS system extent does not match phantom dims"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
    let mut draw = |bound: f64| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 };
    let theta = ClassShifts((0..spec.c_cls).map(|_| [draw(spec.max_theta), draw(spec.max_theta), draw(spec.max_theta)]).collect());
    let mut delta = Displacements((0..sys.len()).map(|_| [draw(spec.max_delta), draw(spec.max_delta), draw(spec.max_delta)]).collect());

    let hot = one_hot(&canonical, spec.c_cls)?;
    let deformer = Deformer::new(sys, spec.dims)?.with_max_disp(f64::INFINITY);
    let canonical_centroids = hard_centroids(&canonical, spec.c_cls);
    let goal: Vec<[f64; 3]> = (0..spec.c_cls)
        .map(|c| {
            let g = canonical_centroids[c].expect("organs are non-empty") - theta.get(c);
            g.0
        })
        .collect();
    let warp = |delta: &Displacements| -> Result<LabelMap> {
        let labels = channel_argmax(&deformer.forward(&hot, &theta, delta)?.deformed);
        for c in 0..spec.c_cls {
            if labels.class_count(c) == 0 {
                return Err(Error::Numeric(format!("class {} vanished in case seeded {case_seed}", c + 1)));
            }
        }
        Ok(labels)
    };

    let shifted: Vec<Vec<Coord>> = (0..spec.c_cls)
        .map(|c| {
            spec.dims
                .coords()
                .zip(canonical.labels())
                .filter(|(_, &l)| l as usize == c + 1)
                .map(|(p, _)| p - theta.get(c))
                .collect()
        })
        .collect();
    if spec.max_delta > 0.0 && spec.c_cls > 0 {
        let a = mean_weights(sys, &shifted);
        correct(&a, &mut delta, |c, axis, d| -a[c].iter().zip(d).map(|(w, x)| w * x[axis]).sum::<f64>())?;
        clamp_to(&mut delta, spec.max_delta);
    }
    let mut labels = warp(&delta)?;
    let mut residual = centroid_gap(&labels, &goal);
    if spec.max_delta > 0.0 && spec.c_cls > 0 {
        for _ in 0..CENTROID_ROUNDS {
            if residual.1 < CENTROID_TOLERANCE {
                break;
            }
            let at_target: Vec<Vec<Coord>> = (0..spec.c_cls)
                .map(|c| {
                    spec.dims
                        .coords()
                        .zip(labels.labels())
                        .filter(|(_, &l)| l as usize == c + 1)
                        .map(|(p, _)| p)
                        .collect()
                })
                .collect();
            let a = mean_weights(sys, &at_target);
            let mut improved = false;
            for step in [1.0, 0.5, 0.25] {
                let mut next = delta.clone();
                correct(&a, &mut next, |c, axis, _| step * residual.0[c][axis])?;
                clamp_to(&mut next, spec.max_delta);
                let next_labels = warp(&next)?;
                let next_residual = centroid_gap(&next_labels, &goal);
                if next_residual.1 < residual.1 {
                    delta = next;
                    labels = next_labels;
                    residual = next_residual;
                    improved = true;
                    break;
                }
            }
            if !improved {
                break;
            }
        }
    }
    Ok(Case {
        labels,
        theta,
        delta,
        seed: case_seed,
        centroid_residual: residual.1,
    })
}

/// Per-class, per-axis gap between target centroids and `goal`, and its maximum.
fn centroid_gap(labels: &LabelMap, goal: &[[f64; 3]]) -> (Vec<[f64; 3]>, f64) {
    let got = hard_centroids(labels, goal.len());
    let mut worst = 0.0f64;
    let gaps = got
        .iter()
        .zip(goal)
        .map(|(g, want)| {
            let g = g.expect("classes are non-empty").0;
            let d = [g[0] - want[0], g[1] - want[1], g[2] - want[2]];
            worst = d.iter().fold(worst, |m, v| m.max(v.abs()));
            d
        })
        .collect();
    (gaps, worst)
}

/// Row `c`: mean TPS basis weight over the points of class `c`.
fn mean_weights(sys: &TpsSystem, points: &[Vec<Coord>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|pts| {
            let mut row = vec![0.0; sys.len()];
            for p in pts {
                for (acc, w) in row.iter_mut().zip(sys.weights_at(*p)) {
                    *acc += w;
                }
            }
            row.iter_mut().for_each(|v| *v /= pts.len().max(1) as f64);
            row
        })
        .collect()
}

/// Adds the minimum-norm `x` with `A x = rhs(c, axis, delta)` to each axis of `delta`.
fn correct(a: &[Vec<f64>], delta: &mut Displacements, rhs: impl Fn(usize, usize, &[[f64; 3]]) -> f64) -> Result<()> {
    let c_cls = a.len();
    let mut gram = Matrix::zeros(c_cls);
    for r in 0..c_cls {
        for s in 0..c_cls {
            gram.set(r, s, a[r].iter().zip(&a[s]).map(|(x, y)| x * y).sum());
        }
    }
    let lu = Lu::factor(&gram)?;
    for axis in 0..3 {
        let b: Vec<f64> = (0..c_cls).map(|c| rhs(c, axis, &delta.0)).collect();
        let y = lu.solve(&b);
        for (j, d) in delta.0.iter_mut().enumerate() {
            d[axis] += (0..c_cls).map(|c| a[c][j] * y[c]).sum::<f64>();
        }
    }
    Ok(())
}

fn clamp_to(delta: &mut Displacements, bound: f64) {
    let peak = delta.flat().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > bound {
        let s = bound / peak;
        delta.flat_mut().iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    pub file: String,
    pub seed: u64,
    pub theta: ClassShifts,
    pub delta: Displacements,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub spec: PhantomSpec,
    pub canonical: String,
    pub cases: Vec<ManifestCase>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn case_paths(&self, dir: impl AsRef<Path>) -> Vec<PathBuf> {
        self.cases.iter().map(|c| dir.as_ref().join(&c.file)).collect()
    }
}

/// Generates `spec.n_cases` cases in parallel.
pub fn generate(spec: &PhantomSpec) -> Result<Vec<Case>> {
    let sys = spec.system()?;
    (0..spec.n_cases)
        .into_par_iter()
        .map(|i| sample_case(spec, &sys, spec.case_seed(i)))
        .collect()
}

/// Writes the canonical anatomy, every case and the manifest into `dir`.
pub fn make_suite(spec: &PhantomSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let canonical = canonical_anatomy(spec)?;
    let cases = generate(spec)?;
    write_volume(&VolumeFile::Labels(canonical), dir.join(CANONICAL_FILE))?;
    let mut entries = Vec::with_capacity(cases.len());
    for (i, case) in cases.into_iter().enumerate() {
        let file = format!("case_{i:04}.pwv");
        write_volume(&VolumeFile::Labels(case.labels), dir.join(&file))?;
        entries.push(ManifestCase {
            file,
            seed: case.seed,
            theta: case.theta,
            delta: case.delta,
        });
    }
    let manifest = Manifest {
        format: crate::VOLUME_FORMAT_VERSION.to_string(),
        spec: spec.clone(),
        canonical: CANONICAL_FILE.to_string(),
        cases: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

/// Reads every case label map listed in the manifest of `dir`.
pub fn load_suite(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<LabelMap>)> {
    let manifest = Manifest::load(&dir)?;
    let cases = manifest
        .case_paths(&dir)
        .iter()
        .map(|p| read_volume(p)?.into_labels())
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, cases))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            c_cls: 1,
            dims: Dims::cube(16),
            organs: vec![OrganSpec {
                center: [0.5; 3],
                semi_axes: [0.125; 3],
            }],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        PhantomSpec::default().validate().unwrap();
    }

    #[test]
    fn centered_ellipsoid_matches_brute_force() {
        let spec = small_spec();
        let lm = canonical_anatomy(&spec).unwrap();
        let mut count = 0;
        for h in 0..16 {
            for w in 0..16 {
                for d in 0..16 {
                    let r2 = (h as f64 - 7.5).powi(2) + (w as f64 - 7.5).powi(2) + (d as f64 - 7.5).powi(2);
                    if r2 <= 4.0 {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(lm.class_count(0), count);
        assert_eq!(count, 32);
    }

    #[test]
    fn zero_organs_is_background() {
        let spec = PhantomSpec {
            c_cls: 0,
            organs: vec![],
            ..small_spec()
        };
        let lm = canonical_anatomy(&spec).unwrap();
        assert_eq!(lm.max_label(), 0);
    }

    #[test]
    fn overlap_is_rejected() {
        let mut spec = PhantomSpec::default();
        spec.organs[1] = spec.organs[0];
        assert!(matches!(canonical_anatomy(&spec), Err(Error::Argument(_))));
    }

    #[test]
    fn border_clearance_is_enforced() {
        let mut spec = small_spec();
        spec.organs[0].center = [0.1, 0.5, 0.5];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_bounds_keep_canonical() {
        let spec = PhantomSpec {
            max_theta: 0.0,
            max_delta: 0.0,
            ..PhantomSpec::default()
        };
        let sys = spec.system().unwrap();
        let case = sample_case(&spec, &sys, 7).unwrap();
        assert_eq!(case.labels, canonical_anatomy(&spec).unwrap());
    }

    #[test]
    fn seeds_give_different_warps_within_bounds() {
        let spec = PhantomSpec::default();
        let sys = spec.system().unwrap();
        let a = sample_case(&spec, &sys, 1).unwrap();
        let b = sample_case(&spec, &sys, 2).unwrap();
        assert_ne!(a.labels, b.labels);
        assert_ne!(a.theta, b.theta);
        for case in [&a, &b] {
            assert!(case.theta.flat().iter().all(|v| v.abs() <= 2.0));
            assert!(case.delta.flat().iter().all(|v| v.abs() <= 2.0 + 1e-12));
            for c in 0..4 {
                assert!(case.labels.class_count(c) > 0);
            }
        }
        assert_eq!(a, sample_case(&spec, &sys, 1).unwrap());
    }

    #[test]
    fn target_centroids_follow_the_shifts() {
        let spec = PhantomSpec::default();
        let sys = spec.system().unwrap();
        let canonical = canonical_anatomy(&spec).unwrap();
        let before = hard_centroids(&canonical, 4);
        for seed in 0..4 {
            let case = sample_case(&spec, &sys, seed).unwrap();
            let after = hard_centroids(&case.labels, 4);
            let mut worst = 0.0f64;
            for c in 0..4 {
                let want = before[c].unwrap() - case.theta.get(c);
                let got = after[c].unwrap();
                for a in 0..3 {
                    worst = worst.max((got[a] - want[a]).abs());
                }
            }
            assert!((worst - case.centroid_residual).abs() < 1e-12);
            assert!(worst < 0.05, "seed {seed}: residual {worst}");
        }
    }
}
