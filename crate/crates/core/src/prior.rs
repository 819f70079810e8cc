//! The learnable anatomical prior: unconstrained logits with an implicit
//! background logit fixed at zero.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{read_volume, write_volume, Dims, LabelMap, Volume, VolumeFile};

/// Standard deviation of the initial logit noise.
pub const INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct AnatomicalPrior {
    logits: Volume,
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    kind: String,
    c_cls: usize,
    seed: Option<u64>,
}

impl AnatomicalPrior {
    pub fn from_logits(logits: Volume) -> Self {
        AnatomicalPrior { logits, seed: None }
    }

    /// Logits that make `labels` the confident argmax: `+confidence` on the
    /// labelled channel, `-confidence` on the others.
    pub fn from_labels(labels: &LabelMap, c_cls: usize, confidence: f64) -> Result<Self> {
        let hot = crate::volume::one_hot(labels, c_cls)?;
        let data = hot.data().iter().map(|&x| if x > 0.0 { confidence } else { -confidence }).collect();
        Ok(AnatomicalPrior::from_logits(
            Volume::from_data(c_cls, labels.dims(), data)?.with_spacing(labels.spacing()),
        ))
    }

    /// Logits from a signed distance to each class boundary: `slope` per
    /// voxel of depth, clamped to `±cap`. Unlike [`AnatomicalPrior::from_labels`]
    /// the probabilities ramp across a few voxels, which keeps the Soft-Dice
    /// landscape smooth under sub-voxel warps.
    pub fn from_labels_smooth(labels: &LabelMap, c_cls: usize, slope: f64, cap: f64) -> Result<Self> {
        if !(slope > 0.0 && slope.is_finite() && cap > 0.0 && cap.is_finite()) {
            return Err(Error::arg(format!("slope and cap must be positive and finite, got {slope} and {cap}")));
        }
        if labels.max_label() as usize > c_cls {
            return Err(Error::arg(format!("label {} exceeds c_cls {c_cls}", labels.max_label())));
        }
        let dims = labels.dims();
        let n = dims.voxels();
        let mut data = Vec::with_capacity(c_cls * n);
        for c in 0..c_cls {
            let l = (c + 1) as u8;
            let (inner, outer) = boundary_shells(labels, l);
            for v in 0..n {
                let inside = labels.labels()[v] == l;
                let shell = if inside { &outer } else { &inner };
                let p = dims.position(v);
                let d2 = shell
                    .iter()
                    .map(|q| (0..3).map(|a| (p[a] as f64 - q[a] as f64).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                // the boundary sits halfway between the two shells
                let depth = d2.sqrt() - 0.5;
                let sd = if inside { depth } else { -depth };
                data.push((slope * sd).clamp(-cap, cap));
            }
        }
        Ok(AnatomicalPrior::from_logits(Volume::from_data(c_cls, dims, data)?.with_spacing(labels.spacing())))
    }

    pub fn logits(&self) -> &Volume {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Volume {
        &mut self.logits
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn c_cls(&self) -> usize {
        self.logits.channels()
    }

    pub fn dims(&self) -> Dims {
        self.logits.dims()
    }

    pub fn normalize(&self) -> Volume {
        normalize(&self.logits)
    }

    /// Writes the logits as PWV1 plus a `<path>.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_volume(&VolumeFile::Volume(self.logits.clone()), path)?;
        let sidecar = Sidecar {
            kind: "prior_logits".into(),
            c_cls: self.c_cls(),
            seed: self.seed,
        };
        fs::write(sidecar_path(path), serde_json::to_string(&sidecar).expect("sidecar serializes"))?;
        Ok(())
    }

    /// Reads logits written by [`AnatomicalPrior::save`]; the sidecar is optional.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let logits = read_volume(path)?.into_volume()?;
        let mut seed = None;
        let side = sidecar_path(path);
        if side.exists() {
            let text = fs::read_to_string(&side)?;
            let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format("sidecar", e.to_string()))?;
            if sc.kind != "prior_logits" {
                return Err(Error::format("kind", format!("expected prior_logits, got {}", sc.kind)));
            }
            if sc.c_cls != logits.channels() {
                return Err(Error::format("c_cls", format!("sidecar says {}, volume has {}", sc.c_cls, logits.channels())));
            }
            seed = sc.seed;
        }
        Ok(AnatomicalPrior { logits, seed })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Voxels of label `l` touching a non-`l` face neighbour, and non-`l`
/// voxels touching an `l` face neighbour. Off-grid neighbours are ignored.
fn boundary_shells(labels: &LabelMap, l: u8) -> (Vec<[usize; 3]>, Vec<[usize; 3]>) {
    let dims = labels.dims();
    let n = dims.as_array();
    let (mut inner, mut outer) = (Vec::new(), Vec::new());
    for (v, &x) in labels.labels().iter().enumerate() {
        let p = dims.position(v);
        let mut mixed = false;
        for a in 0..3 {
            for step in [-1isize, 1] {
                let q = p[a] as isize + step;
                if q >= 0 && q < n[a] as isize {
                    let mut r = p;
                    r[a] = q as usize;
                    mixed |= (labels.get(r[0], r[1], r[2]) == l) != (x == l);
                }
            }
        }
        if mixed {
            if x == l {
                inner.push(p);
            } else {
                outer.push(p);
            }
        }
    }
    (inner, outer)
}

/// Seeded Gaussian logits with standard deviation [`INIT_SCALE`].
pub fn init_prior(c_cls: usize, dims: Dims, seed: u64) -> Result<AnatomicalPrior> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid normal");
    let data = (0..c_cls * dims.voxels()).map(|_| normal.sample(&mut rng)).collect();
    Ok(AnatomicalPrior {
        logits: Volume::from_data(c_cls, dims, data)?,
        seed: Some(seed),
    })
}

/// Channel softmax over `{background = 0} U logits`; returns the foreground
/// probabilities.
pub fn normalize(logits: &Volume) -> Volume {
    let n = logits.dims().voxels();
    let c_cls = logits.channels();
    let src = logits.data();
    let mut out = vec![0.0; src.len()];
    let mut e = vec![0.0; c_cls];
    for i in 0..n {
        let m = (0..c_cls).map(|c| src[c * n + i]).fold(0.0f64, f64::max);
        let mut z = (-m).exp();
        for c in 0..c_cls {
            e[c] = (src[c * n + i] - m).exp();
            z += e[c];
        }
        for c in 0..c_cls {
            out[c * n + i] = e[c] / z;
        }
    }
    Volume::from_data(c_cls, logits.dims(), out)
        .expect("softmax of finite logits is finite")
        .with_spacing(logits.spacing())
}

/// Adjoint of [`normalize`]: maps `dL/dprob` to `dL/dlogit` given the probabilities.
pub fn normalize_backward(probs: &Volume, grad_probs: &[f64]) -> Vec<f64> {
    let n = probs.dims().voxels();
    let c_cls = probs.channels();
    let p = probs.data();
    let mut out = vec![0.0; p.len()];
    for i in 0..n {
        let dot: f64 = (0..c_cls).map(|c| grad_probs[c * n + i] * p[c * n + i]).sum();
        for k in 0..c_cls {
            out[k * n + i] = p[k * n + i] * (grad_probs[k * n + i] - dot);
        }
    }
    out
}
