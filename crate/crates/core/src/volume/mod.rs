//! Grid types, coordinate conventions and trilinear backward sampling.

mod format;

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_volume, write_volume, VolumeFile};
pub use format::{decode, encode};

/// Background threshold applied by [`channel_argmax`] to probability volumes.
pub const BACKGROUND_THRESHOLD: f64 = 0.5;

/// Lattice extent in voxels, `(h, w, d)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Dims {
    pub const fn new(h: usize, w: usize, d: usize) -> Self {
        Dims { h, w, d }
    }

    pub fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn voxels(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(Error::arg(format!("dims must be positive, got {self:?}")));
        }
        Ok(())
    }

    /// Flat index of a voxel within one channel (d fastest).
    #[inline]
    pub fn offset(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.w + w) * self.d + d
    }

    /// Inverse of [`Dims::offset`].
    #[inline]
    pub fn position(&self, offset: usize) -> [usize; 3] {
        let d = offset % self.d;
        let w = (offset / self.d) % self.w;
        let h = offset / (self.d * self.w);
        [h, w, d]
    }

    /// Voxel-center coordinates in storage order.
    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.voxels()).map(move |i| {
            let [h, w, d] = self.position(i);
            Coord::new(h as f64, w as f64, d as f64)
        })
    }

    /// Euclidean length of the lattice diagonal, in voxels.
    pub fn diagonal(&self) -> f64 {
        let [h, w, d] = self.as_array().map(|n| n as f64);
        (h * h + w * w + d * d).sqrt()
    }
}

/// A point in voxel-index space. Integer coordinates coincide with voxel centers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coord(pub [f64; 3]);

impl Coord {
    pub const fn new(h: f64, w: f64, d: f64) -> Self {
        Coord([h, w, d])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Coord) -> f64 {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for Coord {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Coord {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for Coord {
    type Output = Coord;
    fn add(self, o: Coord) -> Coord {
        Coord([self[0] + o[0], self[1] + o[1], self[2] + o[2]])
    }
}

impl Sub for Coord {
    type Output = Coord;
    fn sub(self, o: Coord) -> Coord {
        Coord([self[0] - o[0], self[1] - o[1], self[2] - o[2]])
    }
}

impl Mul<f64> for Coord {
    type Output = Coord;
    fn mul(self, s: f64) -> Coord {
        Coord(self.0.map(|x| x * s))
    }
}

impl From<[f64; 3]> for Coord {
    fn from(v: [f64; 3]) -> Self {
        Coord(v)
    }
}

/// A C-channel real-valued volume, stored `(c, h, w, d)` with d fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(channels: usize, dims: Dims) -> Result<Self> {
        Volume::from_data(channels, dims, vec![0.0; channels * dims.voxels()])
    }

    pub fn from_data(channels: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::arg("volume needs at least one channel"));
        }
        dims.validate()?;
        if data.len() != channels * dims.voxels() {
            return Err(Error::arg(format!(
                "data length {} does not match {} channels x {:?}",
                data.len(),
                channels,
                dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at flat index {i}")));
        }
        Ok(Volume {
            channels,
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.dims.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, h: usize, w: usize, d: usize) -> f64 {
        self.data[c * self.dims.voxels() + self.dims.offset(h, w, d)]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, d: usize, v: f64) {
        let i = c * self.dims.voxels() + self.dims.offset(h, w, d);
        self.data[i] = v;
    }

    pub(crate) fn same_shape(&self, other: &Volume) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    /// Trilinear interpolation with zero padding outside the lattice.
    pub fn sample(&self, channel: usize, p: Coord) -> Result<f64> {
        if channel >= self.channels {
            return Err(Error::arg(format!(
                "channel {channel} out of range for {} channels",
                self.channels
            )));
        }
        Ok(trilinear_sample(self.channel(channel), self.dims, p))
    }
}

/// An integer label per voxel; 0 is background, class `c` is stored as `c + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    spacing: [u64; 3],
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn background(dims: Dims) -> Result<Self> {
        LabelMap::from_labels(dims, vec![0; dims.voxels()])
    }

    pub fn from_labels(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        if labels.len() != dims.voxels() {
            return Err(Error::arg(format!(
                "label count {} does not match {:?}",
                labels.len(),
                dims
            )));
        }
        Ok(LabelMap {
            dims,
            spacing: [1.0f64.to_bits(); 3],
            labels,
        })
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing.map(f64::to_bits);
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing.map(f64::from_bits)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u8 {
        self.labels[self.dims.offset(h, w, d)]
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, label: u8) {
        let i = self.dims.offset(h, w, d);
        self.labels[i] = label;
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of voxels carrying class `c` (zero-based).
    pub fn class_count(&self, c: usize) -> usize {
        let l = c + 1;
        self.labels.iter().filter(|&&x| x as usize == l).count()
    }
}

/// Eight-neighbour trilinear stencil around a point, with zero padding.
///
/// The lower corner is `floor(p)`, so on an integer coordinate the gradient is
/// the right-sided cell derivative.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    offsets: [usize; 8],
    t: [f64; 3],
    valid: u8,
}

impl Stencil {
    #[inline]
    pub(crate) fn new(dims: Dims, p: Coord) -> Option<Stencil> {
        let n = dims.as_array();
        let mut lo = [0isize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let x = p[a];
            if !(x > -1.0 && x < n[a] as f64) {
                return None;
            }
            let f = x.floor();
            lo[a] = f as isize;
            t[a] = x - f;
        }
        let sw = n[2];
        let sh = n[1] * n[2];
        let mut s = Stencil {
            offsets: [0; 8],
            t,
            valid: 0,
        };
        let interior = (0..3).all(|a| lo[a] >= 0 && ((lo[a] + 1) as usize) < n[a]);
        if interior {
            let base = lo[0] as usize * sh + lo[1] as usize * sw + lo[2] as usize;
            s.offsets = [
                base,
                base + 1,
                base + sw,
                base + sw + 1,
                base + sh,
                base + sh + 1,
                base + sh + sw,
                base + sh + sw + 1,
            ];
            s.valid = 0xFF;
            return Some(s);
        }
        for k in 0..8 {
            let bits = [(k >> 2) & 1, (k >> 1) & 1, k & 1];
            let idx: [isize; 3] = [lo[0] + bits[0] as isize, lo[1] + bits[1] as isize, lo[2] + bits[2] as isize];
            if (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < n[a]) {
                s.valid |= 1 << k;
                s.offsets[k] = dims.offset(idx[0] as usize, idx[1] as usize, idx[2] as usize);
            }
        }
        Some(s)
    }

    #[inline]
    fn corners(&self, chan: &[f64]) -> [f64; 8] {
        let mut v = [0.0; 8];
        if self.valid == 0xFF {
            for k in 0..8 {
                v[k] = chan[self.offsets[k]];
            }
        } else {
            for k in 0..8 {
                if self.valid & (1 << k) != 0 {
                    v[k] = chan[self.offsets[k]];
                }
            }
        }
        v
    }

    #[inline]
    pub(crate) fn value(&self, chan: &[f64]) -> f64 {
        let v = self.corners(chan);
        let [x, y, z] = self.t;
        let c00 = v[0] + z * (v[1] - v[0]);
        let c01 = v[2] + z * (v[3] - v[2]);
        let c10 = v[4] + z * (v[5] - v[4]);
        let c11 = v[6] + z * (v[7] - v[6]);
        let c0 = c00 + y * (c01 - c00);
        let c1 = c10 + y * (c11 - c10);
        c0 + x * (c1 - c0)
    }

    /// Spatial gradient of the interpolant with respect to the sample point.
    #[inline]
    pub(crate) fn gradient(&self, chan: &[f64]) -> [f64; 3] {
        let v = self.corners(chan);
        let [x, y, z] = self.t;
        let c00 = v[0] + z * (v[1] - v[0]);
        let c01 = v[2] + z * (v[3] - v[2]);
        let c10 = v[4] + z * (v[5] - v[4]);
        let c11 = v[6] + z * (v[7] - v[6]);
        let c0 = c00 + y * (c01 - c00);
        let c1 = c10 + y * (c11 - c10);
        let gx = c1 - c0;
        let gy = (1.0 - x) * (c01 - c00) + x * (c11 - c10);
        let d00 = v[1] - v[0];
        let d01 = v[3] - v[2];
        let d10 = v[5] - v[4];
        let d11 = v[7] - v[6];
        let d0 = d00 + y * (d01 - d00);
        let d1 = d10 + y * (d11 - d10);
        let gz = d0 + x * (d1 - d0);
        [gx, gy, gz]
    }

    /// Adjoint of [`Stencil::value`]: adds `upstream * weight` into each node.
    #[inline]
    pub(crate) fn scatter(&self, chan: &mut [f64], upstream: f64) {
        let [x, y, z] = self.t;
        let wx = [(1.0 - x) * upstream, x * upstream];
        let wy = [1.0 - y, y];
        let wz = [1.0 - z, z];
        for k in 0..8 {
            if self.valid & (1 << k) != 0 {
                chan[self.offsets[k]] += wx[(k >> 2) & 1] * wy[(k >> 1) & 1] * wz[k & 1];
            }
        }
    }
}

/// Trilinear interpolation of one channel at `p`; outside voxels read as zero.
pub fn trilinear_sample(chan: &[f64], dims: Dims, p: Coord) -> f64 {
    match Stencil::new(dims, p) {
        Some(s) => s.value(chan),
        None => 0.0,
    }
}

/// One-hot encoding: channel `c` is 1 where the label equals `c + 1`.
pub fn one_hot(labels: &LabelMap, c_cls: usize) -> Result<Volume> {
    if c_cls == 0 {
        return Err(Error::arg("one_hot needs at least one class"));
    }
    let max = labels.max_label() as usize;
    if max > c_cls {
        return Err(Error::arg(format!("label {max} exceeds class count {c_cls}")));
    }
    let n = labels.dims().voxels();
    let mut data = vec![0.0; c_cls * n];
    for (i, &l) in labels.labels().iter().enumerate() {
        if l > 0 {
            data[(l as usize - 1) * n + i] = 1.0;
        }
    }
    Ok(Volume::from_data(c_cls, labels.dims(), data)?.with_spacing(labels.spacing()))
}

/// Per-voxel argmax over channels with the default background threshold.
pub fn channel_argmax(vol: &Volume) -> LabelMap {
    channel_argmax_with(vol, BACKGROUND_THRESHOLD)
}

/// Per-voxel argmax: label `argmax + 1` if the maximum exceeds `threshold`,
/// else background. Ties go to the lowest channel.
pub fn channel_argmax_with(vol: &Volume, threshold: f64) -> LabelMap {
    let n = vol.dims().voxels();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = vol.data()[i];
            for c in 1..vol.channels() {
                let v = vol.data()[c * n + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            if best_v > threshold {
                (best + 1) as u8
            } else {
                0
            }
        })
        .collect();
    LabelMap {
        dims: vol.dims(),
        spacing: vol.spacing().map(f64::to_bits),
        labels,
    }
}
