//! 3D scalar volumes: trilinear sampling, precomputed gradient fields,
//! Gaussian pyramids and multi-frame mean fusion onto a panoramic grid.
//!
//! A [`Volume3`] stores intensities as `f32` on a regular grid with
//! per-axis spacing (mm/voxel) and a world origin (mm). Frames may carry
//! an optional validity mask (e.g. a scanner field-of-view); a continuous
//! point is only considered visible when every voxel of its interpolation
//! stencil is valid.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::se3::Pose;

/// A 3D scalar volume with grid metadata.
///
/// Data is stored x-fastest: `index = x + dims[0] * (y + dims[1] * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
    /// Optional per-voxel validity (1 = valid). `None` means all valid.
    mask: Option<Vec<u8>>,
}

impl Volume3 {
    /// Build a volume, validating the structural invariants.
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|p| p.checked_mul(dims[2]))
            .ok_or_else(|| Error::InvalidVolume("dims overflow".into()))?;
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume("zero-sized axis".into()));
        }
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "data length {} != dims product {}",
                data.len(),
                n
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume("spacing must be strictly positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite intensity".into()));
        }
        Ok(Volume3 {
            dims,
            spacing,
            origin,
            data,
            mask: None,
        })
    }

    /// Constant-valued volume.
    pub fn filled(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], value: f32) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Volume3::new(dims, spacing, origin, vec![value; n]).expect("valid constant volume")
    }

    /// Attach a validity mask (same length as the data, 0/1 per voxel).
    pub fn with_mask(mut self, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::InvalidVolume("mask length != data length".into()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[u8]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// World position (mm) of a voxel center.
    #[inline]
    pub fn voxel_to_world(&self, v: Vector3<f64>) -> Point3<f64> {
        Point3::new(
            self.origin[0] + self.spacing[0] * v.x,
            self.origin[1] + self.spacing[1] * v.y,
            self.origin[2] + self.spacing[2] * v.z,
        )
    }

    /// Continuous voxel coordinate of a world position (mm).
    #[inline]
    pub fn world_to_voxel(&self, p: Point3<f64>) -> Vector3<f64> {
        Vector3::new(
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        )
    }

    /// Whether `p` lies in the interpolable domain `[0, dims_k - 1]` per axis.
    #[inline]
    pub fn in_domain(&self, p: Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= 0.0 && p[k] <= (self.dims[k] - 1) as f64)
    }

    /// Interpolation stencil base and fractional weights for an in-domain
    /// point. The base is clamped only at the exact upper boundary, where
    /// the fraction becomes 1.
    #[inline]
    fn stencil(&self, p: Vector3<f64>) -> ([usize; 3], [f64; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for k in 0..3 {
            let mut i = p[k].floor() as isize;
            if i as usize >= self.dims[k] - 1 {
                i = self.dims[k] as isize - 2;
            }
            base[k] = i as usize;
            frac[k] = p[k] - i as f64;
        }
        (base, frac)
    }

    /// Trilinear sample at a continuous voxel coordinate.
    ///
    /// Returns `None` when the point falls outside the interpolable
    /// domain; visibility handling is the caller's job, never a panic.
    #[inline]
    pub fn sample(&self, p: Vector3<f64>) -> Option<f64> {
        if !self.in_domain(p) {
            return None;
        }
        let (b, f) = self.stencil(p);
        Some(trilinear_blend(
            &self.data,
            self.dims,
            b,
            f,
        ))
    }

    /// Visibility of a continuous point: inside the interpolable domain
    /// and, when a mask is present, with all 8 stencil corners valid.
    #[inline]
    pub fn is_visible(&self, p: Vector3<f64>) -> bool {
        if !self.in_domain(p) {
            return false;
        }
        match &self.mask {
            None => true,
            Some(m) => {
                let (b, _) = self.stencil(p);
                let [nx, ny, _] = self.dims;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (b[0] + dx) + nx * ((b[1] + dy) + ny * (b[2] + dz));
                            if m[i] == 0 {
                                return false;
                            }
                        }
                    }
                }
                true
            }
        }
    }

    /// Number of valid voxels (all of them when no mask is attached).
    pub fn valid_count(&self) -> usize {
        match &self.mask {
            None => self.data.len(),
            Some(m) => m.iter().filter(|&&v| v != 0).count(),
        }
    }

    /// Precompute the per-voxel intensity gradient (central differences in
    /// the interior, one-sided on the faces), in intensity per voxel.
    pub fn gradient_field(&self) -> Result<GradientField> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidVolume(
                "gradient needs at least 2 voxels per axis".into(),
            ));
        }
        let [nx, ny, nz] = self.dims;
        let n = self.data.len();
        let mut gx = vec![0f32; n];
        let mut gy = vec![0f32; n];
        let mut gz = vec![0f32; n];
        let d = &self.data;
        let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
        let diff = |hi: f32, lo: f32, two: bool| if two { (hi - lo) * 0.5 } else { hi - lo };
        // Parallel over z-slabs; each slab writes a disjoint region.
        let slab = nx * ny;
        gx.par_chunks_mut(slab)
            .zip(gy.par_chunks_mut(slab))
            .zip(gz.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(z, ((sx, sy), sz))| {
                for y in 0..ny {
                    for x in 0..nx {
                        let o = x + nx * y;
                        sx[o] = match x {
                            0 => diff(d[idx(1, y, z)], d[idx(0, y, z)], false),
                            x if x == nx - 1 => {
                                diff(d[idx(x, y, z)], d[idx(x - 1, y, z)], false)
                            }
                            _ => diff(d[idx(x + 1, y, z)], d[idx(x - 1, y, z)], true),
                        };
                        sy[o] = match y {
                            0 => diff(d[idx(x, 1, z)], d[idx(x, 0, z)], false),
                            y if y == ny - 1 => {
                                diff(d[idx(x, y, z)], d[idx(x, y - 1, z)], false)
                            }
                            _ => diff(d[idx(x, y + 1, z)], d[idx(x, y - 1, z)], true),
                        };
                        sz[o] = match z {
                            0 => diff(d[idx(x, y, 1)], d[idx(x, y, 0)], false),
                            z if z == nz - 1 => {
                                diff(d[idx(x, y, z)], d[idx(x, y, z - 1)], false)
                            }
                            _ => diff(d[idx(x, y, z + 1)], d[idx(x, y, z - 1)], true),
                        };
                    }
                }
            });
        Ok(GradientField {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            gx,
            gy,
            gz,
        })
    }

    /// One 3-tap smoothing pass at constant resolution (replicated
    /// borders, mask-weighted when a mask is present).
    pub fn smoothed(&self) -> Volume3 {
        let (buf, mask) = self.smoothed_once();
        Volume3 {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: buf.values,
            mask,
        }
    }

    /// Coarse-to-fine pyramid: level 0 is the input; each next level is
    /// smoothed with the 3-tap kernel (1/4, 1/2, 1/4) per axis (replicated
    /// borders, mask-weighted when a mask is present) and decimated by 2.
    /// Spacing doubles per level, the origin is unchanged.
    pub fn build_pyramid(&self, levels: usize) -> Result<Vec<Volume3>> {
        if levels < 1 {
            return Err(Error::InvalidConfig("pyramid needs at least 1 level".into()));
        }
        let mut out = Vec::with_capacity(levels);
        out.push(self.clone());
        for l in 1..levels {
            let prev = &out[l - 1];
            if prev.dims.iter().any(|&d| d / 2 + d % 2 < 4 || d < 8) {
                return Err(Error::InvalidConfig(format!(
                    "pyramid level {} would shrink below 4 voxels per axis",
                    l
                )));
            }
            out.push(prev.smooth_decimate());
        }
        Ok(out)
    }

    fn smooth_decimate(&self) -> Volume3 {
        let smoothed = self.smoothed_once();
        let [nx, ny, nz] = self.dims;
        let nd = [(nx - 1) / 2 + 1, (ny - 1) / 2 + 1, (nz - 1) / 2 + 1];
        let mut data = Vec::with_capacity(nd[0] * nd[1] * nd[2]);
        let mut mask = self.mask.as_ref().map(|_| Vec::with_capacity(nd[0] * nd[1] * nd[2]));
        for z in 0..nd[2] {
            for y in 0..nd[1] {
                for x in 0..nd[0] {
                    let i = smoothed.0.index_of(self.dims, 2 * x, 2 * y, 2 * z);
                    data.push(smoothed.0.values[i]);
                    if let Some(mm) = mask.as_mut() {
                        mm.push(smoothed.1.as_ref().unwrap()[i]);
                    }
                }
            }
        }
        Volume3 {
            dims: nd,
            spacing: [
                self.spacing[0] * 2.0,
                self.spacing[1] * 2.0,
                self.spacing[2] * 2.0,
            ],
            origin: self.origin,
            data,
            mask,
        }
    }

    /// Separable 3-tap smoothing over all three axes. With a mask, the
    /// kernel weights of invalid voxels are dropped and the remainder is
    /// renormalized; a voxel stays valid while at least half the kernel
    /// mass along every axis comes from valid voxels.
    fn smoothed_once(&self) -> (SmoothBuf, Option<Vec<u8>>) {
        let n = self.data.len();
        let mut vals: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let mut wts: Vec<f64> = match &self.mask {
            None => vec![1.0; n],
            Some(m) => m.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect(),
        };
        // Pre-multiply by weights, convolve both, divide at the end.
        for i in 0..n {
            vals[i] *= wts[i];
        }
        for axis in 0..3 {
            vals = convolve_axis(&vals, self.dims, axis);
            wts = convolve_axis(&wts, self.dims, axis);
        }
        let mut out = vec![0f32; n];
        let mut mask_out = self.mask.as_ref().map(|_| vec![0u8; n]);
        for i in 0..n {
            if wts[i] > 0.0 {
                out[i] = (vals[i] / wts[i]) as f32;
            }
            if let Some(m) = mask_out.as_mut() {
                // Full kernel mass is 1; keep voxels with a valid majority.
                m[i] = if wts[i] >= 0.5 { 1 } else { 0 };
            }
        }
        (
            SmoothBuf {
                values: out,
            },
            mask_out,
        )
    }
}

struct SmoothBuf {
    values: Vec<f32>,
}

impl SmoothBuf {
    #[inline]
    fn index_of(&self, dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
        x + dims[0] * (y + dims[1] * z)
    }
}

/// 1D (1/4, 1/2, 1/4) convolution along `axis` with replicated borders.
fn convolve_axis(src: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut out = vec![0f64; src.len()];
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let len = dims[axis];
    let for_each_line = |f: &mut dyn FnMut(usize)| {
        // Iterate over all lines perpendicular to `axis`.
        match axis {
            0 => {
                for z in 0..nz {
                    for y in 0..ny {
                        f(nx * (y + ny * z));
                    }
                }
            }
            1 => {
                for z in 0..nz {
                    for x in 0..nx {
                        f(x + nx * ny * z);
                    }
                }
            }
            _ => {
                for y in 0..ny {
                    for x in 0..nx {
                        f(x + nx * y);
                    }
                }
            }
        }
    };
    let mut process = |start: usize| {
        for i in 0..len {
            let lo = if i == 0 { 0 } else { i - 1 };
            let hi = if i == len - 1 { i } else { i + 1 };
            out[start + i * stride] = 0.25 * src[start + lo * stride]
                + 0.5 * src[start + i * stride]
                + 0.25 * src[start + hi * stride];
        }
    };
    for_each_line(&mut process);
    out
}

#[inline]
fn trilinear_blend(data: &[f32], dims: [usize; 3], b: [usize; 3], f: [f64; 3]) -> f64 {
    let [nx, ny, _] = dims;
    let i000 = b[0] + nx * (b[1] + ny * b[2]);
    let i100 = i000 + 1;
    let i010 = i000 + nx;
    let i110 = i010 + 1;
    let i001 = i000 + nx * ny;
    let i101 = i001 + 1;
    let i011 = i001 + nx;
    let i111 = i011 + 1;
    let (fx, fy, fz) = (f[0], f[1], f[2]);
    let c00 = data[i000] as f64 * (1.0 - fx) + data[i100] as f64 * fx;
    let c10 = data[i010] as f64 * (1.0 - fx) + data[i110] as f64 * fx;
    let c01 = data[i001] as f64 * (1.0 - fx) + data[i101] as f64 * fx;
    let c11 = data[i011] as f64 * (1.0 - fx) + data[i111] as f64 * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Precomputed gradient of a [`Volume3`], trilinearly sampled at warped
/// points during the iterations.
#[derive(Debug, Clone)]
pub struct GradientField {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    gx: Vec<f32>,
    gy: Vec<f32>,
    gz: Vec<f32>,
}

impl GradientField {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    /// Stored gradient triple at a grid node, in intensity per voxel.
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = x + self.dims[0] * (y + self.dims[1] * z);
        [self.gx[i], self.gy[i], self.gz[i]]
    }

    /// Componentwise trilinear sample; same domain rule as the volume.
    pub fn sample(&self, p: Vector3<f64>) -> Option<Vector3<f64>> {
        for k in 0..3 {
            if !(p[k] >= 0.0 && p[k] <= (self.dims[k] - 1) as f64) {
                return None;
            }
        }
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for k in 0..3 {
            let mut i = p[k].floor() as isize;
            if i as usize >= self.dims[k] - 1 {
                i = self.dims[k] as isize - 2;
            }
            base[k] = i as usize;
            frac[k] = p[k] - i as f64;
        }
        Some(Vector3::new(
            trilinear_blend(&self.gx, self.dims, base, frac),
            trilinear_blend(&self.gy, self.dims, base, frac),
            trilinear_blend(&self.gz, self.dims, base, frac),
        ))
    }
}

/// Geometry of the panoramic image: a world-axis-aligned grid that holds
/// the fused intensities. Built once from the initial poses and kept
/// fixed over the iterations so the intensity indexing is stable.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaGrid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub margin_voxels: usize,
}

impl PanoramaGrid {
    /// Bounding grid of all frame corners warped into world coordinates by
    /// the given (world-to-frame) poses, expanded by `margin` voxels.
    /// Spacing is copied from frame 0.
    pub fn enclose(frames: &[Volume3], poses: &[Pose], margin: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidConfig("no frames".into()));
        }
        if frames.len() != poses.len() {
            return Err(Error::LengthMismatch(format!(
                "{} frames vs {} poses",
                frames.len(),
                poses.len()
            )));
        }
        let spacing = frames[0].spacing();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for (frame, pose) in frames.iter().zip(poses) {
            let inv = pose.inverse();
            let d = frame.dims();
            for cz in [0, d[2] - 1] {
                for cy in [0, d[1] - 1] {
                    for cx in [0, d[0] - 1] {
                        let fp = frame.voxel_to_world(Vector3::new(cx as f64, cy as f64, cz as f64));
                        let w = inv.apply(fp);
                        for k in 0..3 {
                            lo[k] = lo[k].min(w[k]);
                            hi[k] = hi[k].max(w[k]);
                        }
                    }
                }
            }
        }
        let mut dims = [0usize; 3];
        let mut origin = [0f64; 3];
        for k in 0..3 {
            origin[k] = lo[k] - margin as f64 * spacing[k];
            let extent = hi[k] - lo[k];
            dims[k] = (extent / spacing[k]).ceil() as usize + 1 + 2 * margin;
        }
        Ok(PanoramaGrid {
            dims,
            spacing,
            origin,
            margin_voxels: margin,
        })
    }

    /// Same world extent at pyramid level `level`: spacing scaled by
    /// `2^level`, dims shrunk to still cover the original box.
    pub fn at_level(&self, level: usize) -> PanoramaGrid {
        let f = 1usize << level;
        let mut dims = [0usize; 3];
        let mut spacing = [0f64; 3];
        for k in 0..3 {
            spacing[k] = self.spacing[k] * f as f64;
            dims[k] = (self.dims[k] - 1).div_ceil(f) + 1;
        }
        PanoramaGrid {
            dims,
            spacing,
            origin: self.origin,
            margin_voxels: self.margin_voxels,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World position (mm) of a grid voxel center.
    #[inline]
    pub fn voxel_to_world(&self, v: Vector3<f64>) -> Point3<f64> {
        Point3::new(
            self.origin[0] + self.spacing[0] * v.x,
            self.origin[1] + self.spacing[1] * v.y,
            self.origin[2] + self.spacing[2] * v.z,
        )
    }

    /// Integer coordinates of a linear grid index (x-fastest).
    #[inline]
    pub fn coords_of(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }
}

/// Per-voxel observation counts of a fused panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct CountVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub counts: Vec<u32>,
}

impl CountVolume {
    pub fn covered(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Fuse frames onto the panorama grid by averaging, per grid voxel, the
/// interpolated intensities of every frame that observes it. Voxels seen
/// by no frame carry intensity 0 and count 0; the fused volume's mask
/// marks covered voxels.
pub fn fuse(
    frames: &[Volume3],
    poses: &[Pose],
    grid: &PanoramaGrid,
) -> Result<(Volume3, CountVolume)> {
    if frames.is_empty() {
        return Err(Error::InvalidConfig("fuse: empty frame list".into()));
    }
    if frames.len() != poses.len() {
        return Err(Error::LengthMismatch(format!(
            "{} frames vs {} poses",
            frames.len(),
            poses.len()
        )));
    }
    let n = grid.len();
    let mut data = vec![0f32; n];
    let mut counts = vec![0u32; n];
    let [nx, ny, _] = grid.dims;
    data.par_chunks_mut(nx * ny)
        .zip(counts.par_chunks_mut(nx * ny))
        .enumerate()
        .for_each(|(z, (dslab, cslab))| {
            for y in 0..ny {
                for x in 0..nx {
                    let w = grid.voxel_to_world(Vector3::new(x as f64, y as f64, z as f64));
                    let mut sum = 0f64;
                    let mut cnt = 0u32;
                    for (frame, pose) in frames.iter().zip(poses) {
                        let p = frame.world_to_voxel(pose.apply(w));
                        if frame.is_visible(p) {
                            sum += frame.sample(p).expect("visible point samples");
                            cnt += 1;
                        }
                    }
                    let o = x + nx * y;
                    if cnt > 0 {
                        dslab[o] = (sum / cnt as f64) as f32;
                    }
                    cslab[o] = cnt;
                }
            }
        });
    let mask: Vec<u8> = counts.iter().map(|&c| (c > 0) as u8).collect();
    let vol = Volume3::new(grid.dims, grid.spacing, grid.origin, data)?.with_mask(mask)?;
    Ok((
        vol,
        CountVolume {
            dims: grid.dims,
            spacing: grid.spacing,
            origin: grid.origin,
            counts,
        },
    ))
}
