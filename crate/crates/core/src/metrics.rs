//! Segmentation metrics: Dice, 95th-percentile Hausdorff distance and
//! normalized surface Dice. Distances are between surface-voxel centers in
//! millimetres.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Coord, LabelMap};

/// Default NSD tolerance in millimetres.
pub const DEFAULT_NSD_TAU: f64 = 1.0;

fn check_dims(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::arg(format!("dims mismatch: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Dice of the class-`c` voxel sets (zero-based `c`). Both empty gives 1.
pub fn dsc(a: &LabelMap, b: &LabelMap, c: usize) -> Result<f64> {
    check_dims(a, b)?;
    let l = (c + 1) as u8;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == l, y == l);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    })
}

/// Voxels of class `c` with at least one face neighbour outside the class;
/// the region beyond the grid counts as background.
pub fn surface_voxels(m: &LabelMap, c: usize) -> Vec<[usize; 3]> {
    let l = (c + 1) as u8;
    let dims = m.dims();
    let n = dims.as_array();
    let mut out = Vec::new();
    for (i, &x) in m.labels().iter().enumerate() {
        if x != l {
            continue;
        }
        let p = dims.position(i);
        let mut edge = false;
        for a in 0..3 {
            for step in [-1isize, 1] {
                let q = p[a] as isize + step;
                if q < 0 || q >= n[a] as isize {
                    edge = true;
                } else {
                    let mut r = p;
                    r[a] = q as usize;
                    edge |= m.get(r[0], r[1], r[2]) != l;
                }
            }
        }
        if edge {
            out.push(p);
        }
    }
    out
}

fn to_mm(p: &[usize; 3], spacing: [f64; 3]) -> Coord {
    Coord::new(p[0] as f64 * spacing[0], p[1] as f64 * spacing[1], p[2] as f64 * spacing[2])
}

/// Distance from each point of `from` to the nearest point of `to`.
fn directed(from: &[Coord], to: &[Coord]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let d = *p - *q;
                    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Nearest-rank percentile (`q` in (0, 1]) of an unsorted list.
pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

struct Surfaces {
    a_to_b: Vec<f64>,
    b_to_a: Vec<f64>,
}

fn surfaces(a: &LabelMap, b: &LabelMap, c: usize, spacing: [f64; 3]) -> Result<Option<Surfaces>> {
    check_dims(a, b)?;
    let sa: Vec<Coord> = surface_voxels(a, c).iter().map(|p| to_mm(p, spacing)).collect();
    let sb: Vec<Coord> = surface_voxels(b, c).iter().map(|p| to_mm(p, spacing)).collect();
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    Ok(Some(Surfaces {
        a_to_b: directed(&sa, &sb),
        b_to_a: directed(&sb, &sa),
    }))
}

/// Symmetric 95th-percentile surface distance; `None` when the class is empty
/// in either map.
pub fn hd95(a: &LabelMap, b: &LabelMap, c: usize, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surfaces(a, b, c, spacing)?.map(|s| nearest_rank(&s.a_to_b, 0.95).max(nearest_rank(&s.b_to_a, 0.95))))
}

/// Fraction of both surfaces within `tau` mm of the other; `None` when the
/// class is empty in either map.
pub fn nsd(a: &LabelMap, b: &LabelMap, c: usize, tau: f64, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surfaces(a, b, c, spacing)?.map(|s| {
        let hits = s.a_to_b.iter().chain(&s.b_to_a).filter(|&&d| d <= tau).count();
        hits as f64 / (s.a_to_b.len() + s.b_to_a.len()) as f64
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub nsd: Option<f64>,
    pub empty_a: bool,
    pub empty_b: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tau: f64,
    pub spacing: [f64; 3],
    pub classes: Vec<ClassMetrics>,
    /// Mean Dice over classes not empty in both maps.
    pub mean_dsc: f64,
    /// Mean over classes present in both maps; `None` if there are none.
    pub mean_hd95: Option<f64>,
    pub mean_nsd: Option<f64>,
}

/// Evaluates classes `0..c_cls`.
pub fn evaluate(a: &LabelMap, b: &LabelMap, c_cls: usize, tau: f64, spacing: [f64; 3]) -> Result<MetricReport> {
    check_dims(a, b)?;
    if !(tau >= 0.0) {
        return Err(Error::arg(format!("NSD tolerance must be non-negative, got {tau}")));
    }
    let mut classes = Vec::with_capacity(c_cls);
    for c in 0..c_cls {
        let empty_a = a.class_count(c) == 0;
        let empty_b = b.class_count(c) == 0;
        let s = surfaces(a, b, c, spacing)?;
        let hd = s.as_ref().map(|s| nearest_rank(&s.a_to_b, 0.95).max(nearest_rank(&s.b_to_a, 0.95)));
        let ns = s.as_ref().map(|s| {
            let hits = s.a_to_b.iter().chain(&s.b_to_a).filter(|&&d| d <= tau).count();
            hits as f64 / (s.a_to_b.len() + s.b_to_a.len()) as f64
        });
        classes.push(ClassMetrics {
            class: c,
            dsc: dsc(a, b, c)?,
            hd95: hd,
            nsd: ns,
            empty_a,
            empty_b,
        });
    }
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let mean_dsc = mean(
        classes
            .iter()
            .filter(|m| !(m.empty_a && m.empty_b))
            .map(|m| m.dsc)
            .collect(),
    )
    .unwrap_or(1.0);
    Ok(MetricReport {
        tau,
        spacing,
        mean_dsc,
        mean_hd95: mean(classes.iter().filter_map(|m| m.hd95).collect()),
        mean_nsd: mean(classes.iter().filter_map(|m| m.nsd).collect()),
        classes,
    })
}

impl MetricReport {
    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!("NSD tolerance tau = {} mm\n", self.tau);
        s.push_str(&format!("{:>6}  {:>8}  {:>10}  {:>8}  {}\n", "class", "DSC", "HD95(mm)", "NSD", "flags"));
        for m in &self.classes {
            let flags = match (m.empty_a, m.empty_b) {
                (true, true) => "empty-both",
                (true, false) => "empty-a",
                (false, true) => "empty-b",
                _ => "",
            };
            s.push_str(&format!(
                "{:>6}  {:>8.4}  {:>10}  {:>8}  {}\n",
                m.class + 1,
                m.dsc,
                fmt(m.hd95),
                fmt(m.nsd),
                flags
            ));
        }
        s.push_str(&format!(
            "{:>6}  {:>8.4}  {:>10}  {:>8}\n",
            "mean",
            self.mean_dsc,
            fmt(self.mean_hd95),
            fmt(self.mean_nsd)
        ));
        s
    }
}
