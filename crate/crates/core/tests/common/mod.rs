//! Independent oracles shared by the integration tests. Nothing here calls
//! the library routine it is used to check.
#![allow(dead_code)]

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use priorwarp::affine::apply_class_shifts;
use priorwarp::losses::total_loss;
use priorwarp::prior::normalize;
use priorwarp::tps::warp_volume;
use priorwarp::{ClassShifts, Coord, Dims, Displacements, LabelMap, LossBreakdown, LossWeights, TpsSystem, Volume};

// ---------------------------------------------------------------- TPS

/// `r^2 ln r^2` from squared distance, written out independently.
fn u(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Dense TPS solve with nalgebra: per axis, N radial then 4 polynomial
/// coefficients `(1, h, w, d)`.
pub struct OracleTps {
    pub points: Vec<[f64; 3]>,
    pub coef: [Vec<f64>; 3],
}

impl OracleTps {
    pub fn solve(points: &[Coord], delta: &[[f64; 3]]) -> Self {
        let n = points.len();
        let mut m = DMatrix::<f64>::zeros(n + 4, n + 4);
        for i in 0..n {
            for j in 0..n {
                let r2: f64 = (0..3).map(|a| (points[i].0[a] - points[j].0[a]).powi(2)).sum();
                m[(i, j)] = u(r2);
            }
            let row = [1.0, points[i].0[0], points[i].0[1], points[i].0[2]];
            for k in 0..4 {
                m[(i, n + k)] = row[k];
                m[(n + k, i)] = row[k];
            }
        }
        let lu = m.lu();
        let coef = std::array::from_fn(|a| {
            let mut v = DVector::<f64>::zeros(n + 4);
            for i in 0..n {
                v[i] = points[i].0[a] + delta[i][a];
            }
            lu.solve(&v).expect("nonsingular").iter().copied().collect()
        });
        OracleTps {
            points: points.iter().map(|p| p.0).collect(),
            coef,
        }
    }

    pub fn map(&self, p: [f64; 3]) -> [f64; 3] {
        let n = self.points.len();
        std::array::from_fn(|a| {
            let c = &self.coef[a];
            let mut v = c[n] + c[n + 1] * p[0] + c[n + 2] * p[1] + c[n + 3] * p[2];
            for (i, q) in self.points.iter().enumerate() {
                let r2: f64 = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum();
                v += c[i] * u(r2);
            }
            v
        })
    }
}

/// Uniform draw from the ball of radius `r`.
pub fn in_ball(rng: &mut impl Rng, r: f64) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-r..r));
        if v.iter().map(|x| x * x).sum::<f64>() <= r * r {
            return v;
        }
    }
}

// ---------------------------------------------------------------- losses

/// Loss through the module-level functions, not the fused pipeline.
pub fn reference_loss(
    logits: &Volume,
    theta: &ClassShifts,
    delta: &Displacements,
    sys: &TpsSystem,
    y: &LabelMap,
    w: &LossWeights,
) -> LossBreakdown {
    let probs = normalize(logits);
    let affine = apply_class_shifts(&probs, theta).unwrap();
    let coef = sys.solve_coefficients(delta).unwrap();
    let field = sys.warp_field(&coef, logits.dims()).unwrap();
    let deformed = warp_volume(&affine, &field).unwrap();
    total_loss(y, None, &deformed, &affine, delta, w).unwrap()
}

/// Distance from `x` to the nearest integer.
pub fn kink_distance(x: f64) -> f64 {
    (x - x.round()).abs()
}

/// A small random problem with every sampling coordinate at least
/// `margin` away from a trilinear cell boundary.
pub struct GradInstance {
    pub logits: Volume,
    pub theta: ClassShifts,
    pub delta: Displacements,
    pub sys: TpsSystem,
    pub y: LabelMap,
}

pub fn grad_instance(rng: &mut impl Rng, margin: f64) -> GradInstance {
    let dims = Dims::cube(6);
    let sys = TpsSystem::lattice([2, 2, 2], dims).unwrap();
    loop {
        let logits = Volume::from_data(2, dims, (0..2 * 216).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let theta = ClassShifts(
            (0..2)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1i32..=1) as f64 + rng.gen_range(0.2..0.8)))
                .collect(),
        );
        let delta = Displacements((0..8).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect());
        let labels: Vec<u8> = (0..216)
            .map(|i| {
                let [h, w, d] = dims.position(i);
                let r = ((h as f64 - 2.5).powi(2) + (w as f64 - 2.5).powi(2) + (d as f64 - 2.5).powi(2)).sqrt();
                match (r < 1.8, h < 3) {
                    (true, true) => 1,
                    (true, false) => 2,
                    _ => 0,
                }
            })
            .collect();
        let y = LabelMap::from_labels(dims, labels).unwrap();
        let coef = sys.solve_coefficients(&delta).unwrap();
        let field = sys.warp_field(&coef, dims).unwrap();
        let clear = field.coords.iter().all(|p| p.0.iter().all(|&x| kink_distance(x) >= margin));
        if clear {
            return GradInstance {
                logits,
                theta,
                delta,
                sys,
                y,
            };
        }
    }
}

// ---------------------------------------------------------------- metrics

pub fn class_set(m: &LabelMap, c: usize) -> HashSet<[usize; 3]> {
    let dims = m.dims();
    (0..dims.voxels())
        .filter(|&i| m.labels()[i] as usize == c + 1)
        .map(|i| dims.position(i))
        .collect()
}

pub fn dice_oracle(a: &LabelMap, b: &LabelMap, c: usize) -> f64 {
    let (sa, sb) = (class_set(a, c), class_set(b, c));
    match (sa.len(), sb.len()) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        (x, y) => 2.0 * sa.intersection(&sb).count() as f64 / (x + y) as f64,
    }
}

/// Class voxels with a face neighbour outside the set (or outside the grid).
pub fn surface_oracle(m: &LabelMap, c: usize) -> Vec<[usize; 3]> {
    let set = class_set(m, c);
    let n = m.dims().as_array();
    let mut out: Vec<[usize; 3]> = set
        .iter()
        .filter(|p| {
            (0..3).any(|a| {
                let lo = p[a] == 0 || !set.contains(&with(**p, a, p[a] - 1));
                let hi = p[a] + 1 == n[a] || !set.contains(&with(**p, a, p[a] + 1));
                lo || hi
            })
        })
        .copied()
        .collect();
    out.sort();
    out
}

fn with(mut p: [usize; 3], a: usize, v: usize) -> [usize; 3] {
    p[a] = v;
    p
}

fn directed_oracle(from: &[[usize; 3]], to: &[[usize; 3]], s: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let d: f64 = (0..3).map(|a| ((p[a] as f64 - q[a] as f64) * s[a]).powi(2)).sum();
                    d.sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn rank95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = (0.95 * v.len() as f64).ceil() as usize;
    v[k.max(1) - 1]
}

/// `(hd95, nsd)` by all-pairs search; `None` unless the class is in both maps.
pub fn surface_oracle_metrics(a: &LabelMap, b: &LabelMap, c: usize, tau: f64, s: [f64; 3]) -> Option<(f64, f64)> {
    let (sa, sb) = (surface_oracle(a, c), surface_oracle(b, c));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let ab = directed_oracle(&sa, &sb, s);
    let ba = directed_oracle(&sb, &sa, s);
    let hits = ab.iter().chain(&ba).filter(|&&d| d <= tau).count();
    let nsd = hits as f64 / (ab.len() + ba.len()) as f64;
    Some((rank95(ab).max(rank95(ba)), nsd))
}

/// Random label map with roughly `fill` foreground over `c_cls` classes.
pub fn random_labels(rng: &mut impl Rng, dims: Dims, c_cls: u8, fill: f64) -> LabelMap {
    let labels = (0..dims.voxels())
        .map(|_| if rng.gen_bool(fill) { rng.gen_range(1..=c_cls) } else { 0 })
        .collect();
    LabelMap::from_labels(dims, labels).unwrap()
}
