//! Observation enumeration and normal-equation assembly.
//!
//! For every panorama voxel and every frame whose warped point is visible,
//! one observation holds the interpolated local intensity, the sampled
//! gradient, and the 1x6 pose-Jacobian row of the intensity difference.
//! Observations are stored voxel-major and grouped per active voxel, which
//! is the sparsity of the full Jacobian made explicit: the intensity block
//! has exactly one unit entry per observation, so its Gram matrix is the
//! diagonal of per-voxel observation counts.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::se3::PoseSet;
use crate::volume::{GradientField, PanoramaGrid, Volume3};

/// Grid voxels per parallel work unit; fixed so that reduction order (and
/// therefore the floating-point result) does not depend on thread count.
const CHUNK: usize = 4096;

/// One observed (voxel, frame) pair.
#[derive(Debug, Clone)]
pub struct Observation {
    /// Linear panorama voxel index.
    pub voxel: u32,
    /// Frame index.
    pub frame: u32,
    /// Warped point in frame voxel coordinates.
    pub point: [f64; 3],
    /// Interpolated local intensity at `point`.
    pub intensity: f64,
    /// Interpolated gradient at `point`, intensity per voxel.
    pub gradient: [f32; 3],
    /// Row of the pose Jacobian: d(residual)/d(left increment of the
    /// frame's pose), with voxel-to-mm scaling folded in.
    pub jac_pose: [f64; 6],
}

/// All observations of one iteration, grouped by active panorama voxel.
#[derive(Debug, Clone)]
pub struct ObservationTable {
    entries: Vec<Observation>,
    /// Group boundaries: entries of active voxel `s` are
    /// `entries[offsets[s]..offsets[s+1]]`.
    offsets: Vec<usize>,
    /// Panorama voxel index of each active voxel slot.
    active_voxels: Vec<u32>,
    /// Active slot of each panorama voxel (`u32::MAX` when unobserved).
    slot_of_voxel: Vec<u32>,
    /// Variable block per frame (`None` for anchored frames).
    var_slots: Vec<Option<usize>>,
    n_frames: usize,
}

impl ObservationTable {
    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn n_active(&self) -> usize {
        self.active_voxels.len()
    }

    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Number of free pose variables (6 per non-anchored frame).
    pub fn n_vars(&self) -> usize {
        6 * self.var_slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn var_slots(&self) -> &[Option<usize>] {
        &self.var_slots
    }

    pub fn active_voxels(&self) -> &[u32] {
        &self.active_voxels
    }

    /// Active slot of a panorama voxel, if observed.
    pub fn slot_of(&self, voxel: u32) -> Option<usize> {
        let s = self.slot_of_voxel[voxel as usize];
        (s != u32::MAX).then_some(s as usize)
    }

    /// Entries of one active voxel.
    pub fn group(&self, slot: usize) -> &[Observation] {
        &self.entries[self.offsets[slot]..self.offsets[slot + 1]]
    }

    /// Per-active-voxel observation counts (the intensity-block diagonal).
    pub fn counts(&self) -> Vec<u32> {
        (0..self.n_active())
            .map(|s| (self.offsets[s + 1] - self.offsets[s]) as u32)
            .collect()
    }

    /// Per-active-voxel mean of the observed local intensities; this is
    /// both the fused panorama restricted to observed voxels and the
    /// minimizer of the objective in the intensities at fixed poses.
    pub fn means(&self) -> Vec<f64> {
        (0..self.n_active())
            .into_par_iter()
            .map(|s| {
                let g = self.group(s);
                g.iter().map(|o| o.intensity).sum::<f64>() / g.len() as f64
            })
            .collect()
    }
}

/// Visibility indicator of a warped point in a frame (1 when the point is
/// inside the frame's interpolable, unmasked domain).
pub fn visibility(frame: &Volume3, p: Vector3<f64>) -> bool {
    frame.is_visible(p)
}

/// Enumerate all observed (voxel, frame) pairs under the current poses.
///
/// Gradient fields must be precomputed per frame at the current pyramid
/// level. Returns an error when nothing at all is observed.
pub fn build_observations(
    frames: &[Volume3],
    gradients: &[GradientField],
    poses: &PoseSet,
    grid: &PanoramaGrid,
) -> Result<ObservationTable> {
    assert_eq!(frames.len(), poses.len(), "one pose per frame");
    assert_eq!(frames.len(), gradients.len(), "one gradient field per frame");
    let n_frames = frames.len();
    let n_grid = grid.len();

    // Per-frame affine world -> frame-voxel map and mm gradient scaling.
    struct FrameMap {
        r: nalgebra::Matrix3<f64>,
        t: Vector3<f64>,
        inv_spacing: [f64; 3],
        origin: [f64; 3],
    }
    let maps: Vec<FrameMap> = frames
        .iter()
        .zip(&poses.poses)
        .map(|(f, p)| FrameMap {
            r: *p.rotation(),
            t: p.translation(),
            inv_spacing: {
                let s = f.spacing();
                [1.0 / s[0], 1.0 / s[1], 1.0 / s[2]]
            },
            origin: f.origin(),
        })
        .collect();

    let n_chunks = n_grid.div_ceil(CHUNK);
    let chunks: Vec<Vec<Observation>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n_grid);
            let mut local = Vec::new();
            for j in start..end {
                let [x, y, z] = grid.coords_of(j);
                let w = grid.voxel_to_world(Vector3::new(x as f64, y as f64, z as f64));
                for (i, (frame, map)) in frames.iter().zip(&maps).enumerate() {
                    // q: warped point in frame mm, p: frame voxel coords.
                    let q = map.r * w.coords + map.t;
                    let p = Vector3::new(
                        (q.x - map.origin[0]) * map.inv_spacing[0],
                        (q.y - map.origin[1]) * map.inv_spacing[1],
                        (q.z - map.origin[2]) * map.inv_spacing[2],
                    );
                    if !frame.is_visible(p) {
                        continue;
                    }
                    let b = frame.sample(p).expect("visible point samples");
                    let g = gradients[i].sample(p).expect("visible point samples");
                    // Chain rule of the residual e = M - I(p(xi)):
                    // de/d(delta) = -(g / spacing)^T [I | -skew(q)].
                    let h = Vector3::new(
                        g.x * map.inv_spacing[0],
                        g.y * map.inv_spacing[1],
                        g.z * map.inv_spacing[2],
                    );
                    let rot = q.cross(&h);
                    local.push(Observation {
                        voxel: j as u32,
                        frame: i as u32,
                        point: [p.x, p.y, p.z],
                        intensity: b,
                        gradient: [g.x as f32, g.y as f32, g.z as f32],
                        jac_pose: [-h.x, -h.y, -h.z, -rot.x, -rot.y, -rot.z],
                    });
                }
            }
            local
        })
        .collect();

    let total: usize = chunks.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::NoOverlap);
    }
    let mut entries = Vec::with_capacity(total);
    for c in chunks {
        entries.extend(c);
    }

    // Entries are voxel-major by construction; group them.
    let mut offsets = Vec::new();
    let mut active_voxels = Vec::new();
    let mut slot_of_voxel = vec![u32::MAX; n_grid];
    let mut prev = u32::MAX;
    for (k, e) in entries.iter().enumerate() {
        if e.voxel != prev {
            slot_of_voxel[e.voxel as usize] = active_voxels.len() as u32;
            active_voxels.push(e.voxel);
            offsets.push(k);
            prev = e.voxel;
        }
    }
    offsets.push(entries.len());

    Ok(ObservationTable {
        entries,
        offsets,
        active_voxels,
        slot_of_voxel,
        var_slots: poses.variable_slots(),
        n_frames,
    })
}

/// The block normal equations of one iteration.
///
/// The pose block is dense (6 per free frame); the intensity block is the
/// diagonal of observation counts and is never materialized beyond it.
/// `b_x`/`b_m` carry the joint-system right-hand side when panorama
/// intensities are supplied, or the intensity-eliminated form (local
/// intensities minus their per-voxel means, with `b_m = 0`) when not;
/// the Gram blocks are identical in both modes.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub h_xx: DMatrix<f64>,
    pub b_x: DVector<f64>,
    /// Per active voxel: observation count (the intensity-block diagonal).
    pub h_mm_diag: Vec<u32>,
    /// Per active voxel: intensity-block right-hand side.
    pub b_m: Vec<f64>,
    /// Whether observations at single-count voxels were folded in (their
    /// net contribution to the reduced system is exactly zero).
    pub includes_single: bool,
}

/// Accumulate the block system from grouped observations.
///
/// `m` supplies panorama intensities per active voxel (joint mode); when
/// absent the eliminated form is built directly from per-voxel means.
/// With `skip_single`, voxels observed exactly once are left out of the
/// pose block and its right-hand side; they cancel identically in the
/// reduction either way.
pub fn assemble(obs: &ObservationTable, m: Option<&[f64]>, skip_single: bool) -> BlockSystem {
    let nv = obs.n_vars();
    let n_active = obs.n_active();
    if let Some(m) = m {
        assert_eq!(m.len(), n_active, "one intensity per active voxel");
    }
    let means = if m.is_none() { Some(obs.means()) } else { None };

    struct Partial {
        h: DMatrix<f64>,
        b: DVector<f64>,
    }
    let groups_per_task = 2048;
    let n_tasks = n_active.div_ceil(groups_per_task);
    let mut partials: Vec<(usize, Partial)> = (0..n_tasks)
        .into_par_iter()
        .map(|t| {
            let mut h = DMatrix::zeros(nv, nv);
            let mut b = DVector::zeros(nv);
            let s0 = t * groups_per_task;
            let s1 = (s0 + groups_per_task).min(n_active);
            for s in s0..s1 {
                let group = obs.group(s);
                if skip_single && group.len() == 1 {
                    continue;
                }
                for o in group {
                    let Some(var) = obs.var_slots()[o.frame as usize] else {
                        continue;
                    };
                    let r = &o.jac_pose;
                    let base = 6 * var;
                    for a in 0..6 {
                        for c in a..6 {
                            let v = r[a] * r[c];
                            h[(base + a, base + c)] += v;
                            if c != a {
                                h[(base + c, base + a)] += v;
                            }
                        }
                    }
                    // Residual factor: -(M - B) in joint mode, (B - mean)
                    // in eliminated mode.
                    let f = match (m, &means) {
                        (Some(m), _) => -(m[s] - o.intensity),
                        (None, Some(mu)) => o.intensity - mu[s],
                        _ => unreachable!(),
                    };
                    for a in 0..6 {
                        b[base + a] += r[a] * f;
                    }
                }
            }
            (t, Partial { h, b })
        })
        .collect();
    partials.sort_by_key(|(t, _)| *t);
    let mut h_xx = DMatrix::zeros(nv, nv);
    let mut b_x = DVector::zeros(nv);
    for (_, p) in partials {
        h_xx += p.h;
        b_x += p.b;
    }

    let h_mm_diag = obs.counts();
    let b_m: Vec<f64> = match m {
        Some(m) => (0..n_active)
            .into_par_iter()
            .map(|s| {
                // b_M[j] = -sum of residuals at voxel j.
                obs.group(s)
                    .iter()
                    .map(|o| -(m[s] - o.intensity))
                    .sum::<f64>()
            })
            .collect(),
        None => vec![0.0; n_active],
    };

    BlockSystem {
        h_xx,
        b_x,
        h_mm_diag,
        b_m,
        includes_single: !skip_single,
    }
}

/// Sum of squared intensity differences over all observations for the
/// given panorama intensities.
pub fn objective(obs: &ObservationTable, m: &[f64]) -> f64 {
    assert_eq!(m.len(), obs.n_active());
    (0..obs.n_active())
        .into_par_iter()
        .map(|s| {
            obs.group(s)
                .iter()
                .map(|o| {
                    let e = m[s] - o.intensity;
                    e * e
                })
                .sum::<f64>()
        })
        .sum()
}
