//! Synthetic ground-truth sequences: phantom volumes, random pose
//! trajectories, restricted-field-of-view frame extraction and additive
//! Gaussian noise.
//!
//! Everything is reproducible from a 64-bit seed; per-frame randomness
//! uses independent sub-streams of the same generator so parallel
//! generation cannot change the output.

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se3::{rotation_from_euler_zyx, Pose, PoseSet};
use crate::volume::Volume3;

/// Phantom families used as stand-ins for a real source volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    /// Sum of random Gaussian bumps, rescaled to [0, 255].
    SmoothBlobs,
    /// Thick ellipsoidal shell with a zero-intensity cavity.
    Shell,
    /// Checkerboard softened by repeated 3-tap smoothing.
    CheckerSmoothed,
}

/// Deterministic synthetic volume in [0, 255] with gradients over most of
/// the domain. Unit spacing, origin at zero.
pub fn make_phantom(dims: [usize; 3], kind: PhantomKind, seed: u64) -> Result<Volume3> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::InvalidConfig(
            "phantom needs at least 16 voxels per axis".into(),
        ));
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut data = vec![0f32; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        PhantomKind::SmoothBlobs => {
            let min_dim = *dims.iter().min().unwrap() as f64;
            struct Bump {
                c: [f64; 3],
                inv2s2: f64,
                amp: f64,
            }
            // Bumps over three octaves: broad ones shape the coarse
            // registration basin, small ones provide the fine-scale
            // gradient texture that localizes sub-voxel alignment.
            let octaves: [(usize, f64, f64, f64); 3] = [
                (40, min_dim / 12.0, min_dim / 5.0, 1.0),
                (120, min_dim / 28.0, min_dim / 12.0, 0.55),
                (360, 1.8f64.max(min_dim / 56.0), min_dim / 24.0, 0.3),
            ];
            let mut bumps: Vec<Bump> = Vec::new();
            for &(count, sig_lo, sig_hi, weight) in &octaves {
                for _ in 0..count {
                    let sigma = rng.gen_range(sig_lo..sig_hi.max(sig_lo + 1e-9));
                    bumps.push(Bump {
                        c: [
                            rng.gen_range(0.0..dims[0] as f64),
                            rng.gen_range(0.0..dims[1] as f64),
                            rng.gen_range(0.0..dims[2] as f64),
                        ],
                        inv2s2: 1.0 / (2.0 * sigma * sigma),
                        amp: weight * rng.gen_range(-1.0..1.0),
                    });
                }
            }
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut raw = vec![0f64; n];
            let mut i = 0;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let mut v = 0.0;
                        for b in &bumps {
                            let dx = x as f64 - b.c[0];
                            let dy = y as f64 - b.c[1];
                            let dz = z as f64 - b.c[2];
                            let d2 = dx * dx + dy * dy + dz * dz;
                            // Bumps decay fast; skip far contributions.
                            if d2 * b.inv2s2 < 12.0 {
                                v += b.amp * (-d2 * b.inv2s2).exp();
                            }
                        }
                        raw[i] = v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                        i += 1;
                    }
                }
            }
            let span = (hi - lo).max(1e-12);
            for (d, r) in data.iter_mut().zip(&raw) {
                *d = (255.0 * (r - lo) / span) as f32;
            }
        }
        PhantomKind::Shell => {
            let c = [
                dims[0] as f64 / 2.0 + rng.gen_range(-2.0..2.0),
                dims[1] as f64 / 2.0 + rng.gen_range(-2.0..2.0),
                dims[2] as f64 / 2.0 + rng.gen_range(-2.0..2.0),
            ];
            let radii = [
                dims[0] as f64 * rng.gen_range(0.30..0.38),
                dims[1] as f64 * rng.gen_range(0.30..0.38),
                dims[2] as f64 * rng.gen_range(0.30..0.38),
            ];
            let width = 0.12;
            let mut i = 0;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let rho = (((x as f64 - c[0]) / radii[0]).powi(2)
                            + ((y as f64 - c[1]) / radii[1]).powi(2)
                            + ((z as f64 - c[2]) / radii[2]).powi(2))
                        .sqrt();
                        let g = 255.0 * (-((rho - 1.0) / width).powi(2)).exp();
                        // Clamp the far tail to an exactly-zero cavity and
                        // exterior floor.
                        data[i] = if g < 0.5 { 0.0 } else { g as f32 };
                        i += 1;
                    }
                }
            }
        }
        PhantomKind::CheckerSmoothed => {
            let cell = (*dims.iter().min().unwrap() / 6).max(4);
            let phase = [
                rng.gen_range(0..cell),
                rng.gen_range(0..cell),
                rng.gen_range(0..cell),
            ];
            let mut i = 0;
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let parity = ((x + phase[0]) / cell
                            + (y + phase[1]) / cell
                            + (z + phase[2]) / cell)
                            % 2;
                        data[i] = if parity == 0 { 0.0 } else { 255.0 };
                        i += 1;
                    }
                }
            }
            let vol = Volume3::new(dims, [1.0; 3], [0.0; 3], data)?;
            // Two pyramid-style smoothing passes soften the edges without
            // changing the grid.
            let smoothed = smooth_in_place(&vol, 3);
            return Ok(smoothed);
        }
    }
    Volume3::new(dims, [1.0; 3], [0.0; 3], data)
}

/// Repeated 3-tap smoothing at constant resolution.
fn smooth_in_place(vol: &Volume3, passes: usize) -> Volume3 {
    let mut cur = vol.clone();
    for _ in 0..passes {
        let dims = cur.dims();
        let [nx, ny, nz] = dims;
        let src = cur.data().to_vec();
        let mut dst = vec![0f32; src.len()];
        let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
        let tap = |a: f32, b: f32, c: f32| 0.25 * a + 0.5 * b + 0.25 * c;
        // x pass into dst, then reuse buffers per axis.
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let l = x.saturating_sub(1);
                    let r = (x + 1).min(nx - 1);
                    dst[idx(x, y, z)] = tap(src[idx(l, y, z)], src[idx(x, y, z)], src[idx(r, y, z)]);
                }
            }
        }
        let src = dst.clone();
        let mut dst2 = vec![0f32; src.len()];
        for z in 0..nz {
            for y in 0..ny {
                let l = y.saturating_sub(1);
                let r = (y + 1).min(ny - 1);
                for x in 0..nx {
                    dst2[idx(x, y, z)] = tap(src[idx(x, l, z)], src[idx(x, y, z)], src[idx(x, r, z)]);
                }
            }
        }
        let src = dst2.clone();
        let mut dst3 = vec![0f32; src.len()];
        for z in 0..nz {
            let l = z.saturating_sub(1);
            let r = (z + 1).min(nz - 1);
            for y in 0..ny {
                for x in 0..nx {
                    dst3[idx(x, y, z)] = tap(src[idx(x, y, l)], src[idx(x, y, z)], src[idx(x, y, r)]);
                }
            }
        }
        cur = Volume3::new(dims, cur.spacing(), cur.origin(), dst3).expect("smoothed volume");
    }
    cur
}

/// Optional truncated-pyramid field-of-view mask: the apex sits at the
/// center of the z = 0 face and the valid region widens along +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrustumSpec {
    /// Half-angle of the pyramid, degrees.
    pub half_angle_deg: f64,
    /// Half-width at the apex, voxels (truncation).
    pub near_half_width_vox: f64,
}

/// Frame geometry for extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FovSpec {
    pub dims: [usize; 3],
    /// Frame spacing; source spacing when omitted.
    #[serde(default)]
    pub spacing: Option<[f64; 3]>,
    #[serde(default)]
    pub frustum: Option<FrustumSpec>,
}

/// The simulated acquisition protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimProtocol {
    pub n_frames: usize,
    /// Max |rotation| per axis between consecutive frames, degrees.
    pub rot_range_deg: f64,
    /// Max |translation| per axis between consecutive frames, voxels of
    /// the source volume.
    pub trans_range_vox: f64,
    /// Gaussian noise level on the 0-255 intensity scale.
    pub noise_std: f64,
    pub fov: FovSpec,
    pub seed: u64,
}

impl Default for FovSpec {
    fn default() -> Self {
        FovSpec {
            dims: [64, 64, 64],
            spacing: None,
            frustum: None,
        }
    }
}

impl SimProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::InvalidConfig("need at least 2 frames".into()));
        }
        if self.rot_range_deg < 0.0 || self.trans_range_vox < 0.0 || self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("ranges must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for SimProtocol {
    fn default() -> Self {
        SimProtocol {
            n_frames: 11,
            rot_range_deg: 12.0,
            trans_range_vox: 15.0,
            noise_std: 25.0,
            fov: FovSpec::default(),
            seed: 0,
        }
    }
}

/// A generated sequence with known poses.
#[derive(Debug, Clone)]
pub struct GroundTruthSequence {
    pub frames: Vec<Volume3>,
    pub true_poses: PoseSet,
    pub protocol: SimProtocol,
    pub source_id: String,
    /// Trajectory re-draws needed to obtain consecutive overlap.
    pub retries: u32,
}

/// Random walk of world-to-frame poses: frame 0 at identity, each next
/// frame perturbed by per-axis uniform Euler angles and translations.
pub fn sample_trajectory(protocol: &SimProtocol, spacing: [f64; 3], seed: u64) -> PoseSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = protocol.rot_range_deg.to_radians();
    let mut poses = vec![Pose::identity()];
    for _ in 1..protocol.n_frames {
        let angles = [
            rng.gen_range(-rot..=rot),
            rng.gen_range(-rot..=rot),
            rng.gen_range(-rot..=rot),
        ];
        let t_vox = [
            rng.gen_range(-protocol.trans_range_vox..=protocol.trans_range_vox),
            rng.gen_range(-protocol.trans_range_vox..=protocol.trans_range_vox),
            rng.gen_range(-protocol.trans_range_vox..=protocol.trans_range_vox),
        ];
        let r = rotation_from_euler_zyx(angles[0], angles[1], angles[2]);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m[(0, 3)] = t_vox[0] * spacing[0];
        m[(1, 3)] = t_vox[1] * spacing[1];
        m[(2, 3)] = t_vox[2] * spacing[2];
        let step = Pose::from_matrix(&m);
        let prev = poses.last().unwrap();
        poses.push(step.compose(prev));
    }
    PoseSet::with_first_anchored(poses)
}

/// Resample the source through a pose into a new frame with a restricted
/// field of view. Frame voxels outside the source (or outside the frustum
/// mask) are zeroed and marked invalid. A field of view smaller than the
/// source is centered in it, so an identity pose leaves room on every
/// side.
pub fn extract_frame(source: &Volume3, pose: &Pose, fov: &FovSpec) -> Result<Volume3> {
    let spacing = fov.spacing.unwrap_or(source.spacing());
    let dims = fov.dims;
    let n = dims[0] * dims[1] * dims[2];
    let mut data = vec![0f32; n];
    let mut mask = vec![0u8; n];
    let inv = pose.inverse();
    let src_extent = |k: usize| (source.dims()[k] - 1) as f64 * source.spacing()[k];
    let fov_extent = |k: usize| (dims[k] - 1) as f64 * spacing[k];
    let mut origin = [0f64; 3];
    for k in 0..3 {
        origin[k] = source.origin()[k] + 0.5 * (src_extent(k) - fov_extent(k)).max(0.0);
    }
    let frustum_ok = |x: usize, y: usize, z: usize| -> bool {
        match &fov.frustum {
            None => true,
            Some(fr) => {
                let half = fr.near_half_width_vox + z as f64 * fr.half_angle_deg.to_radians().tan();
                let cx = (dims[0] - 1) as f64 / 2.0;
                let cy = (dims[1] - 1) as f64 / 2.0;
                (x as f64 - cx).abs() <= half && (y as f64 - cy).abs() <= half
            }
        }
    };
    let mut i = 0;
    let mut any = false;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if frustum_ok(x, y, z) {
                    // Frame voxel -> frame mm -> world mm -> source voxel.
                    let f = nalgebra::Point3::new(
                        origin[0] + spacing[0] * x as f64,
                        origin[1] + spacing[1] * y as f64,
                        origin[2] + spacing[2] * z as f64,
                    );
                    let p = source.world_to_voxel(inv.apply(f));
                    if let Some(v) = source.sample(p) {
                        data[i] = v as f32;
                        mask[i] = 1;
                        any = true;
                    }
                }
                i += 1;
            }
        }
    }
    if !any {
        return Err(Error::NoOverlap);
    }
    Volume3::new(dims, spacing, origin, data)?.with_mask(mask)
}

/// Additive i.i.d. Gaussian noise clamped to [0, 255]; the validity mask
/// is untouched.
pub fn add_noise(frame: &Volume3, std: f64, seed: u64) -> Volume3 {
    if std == 0.0 {
        return frame.clone();
    }
    let normal = Normal::new(0.0, std).expect("std >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = frame
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)).clamp(0.0, 255.0) as f32)
        .collect();
    let mut out = Volume3::new(frame.dims(), frame.spacing(), frame.origin(), data)
        .expect("noisy volume stays valid");
    if let Some(mask) = frame.mask() {
        out = out.with_mask(mask.to_vec()).expect("same length");
    }
    out
}

/// Generate a full sequence from a source volume. Consecutive frames are
/// required to overlap; if a trajectory draw fails the check it is
/// redrawn from the next sub-stream and the retry is recorded.
pub fn generate_sequence(
    source: &Volume3,
    protocol: &SimProtocol,
    source_id: &str,
) -> Result<GroundTruthSequence> {
    protocol.validate()?;
    let mut retries = 0u32;
    'outer: loop {
        if retries > 32 {
            return Err(Error::InvalidConfig(
                "could not sample an overlapping trajectory; ranges too large for the FoV".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
        rng.set_stream(u64::from(retries));
        let traj_seed = rng.gen::<u64>();
        let poses = sample_trajectory(protocol, source.spacing(), traj_seed);
        let mut frames = Vec::with_capacity(protocol.n_frames);
        for pose in &poses.poses {
            match extract_frame(source, pose, &protocol.fov) {
                Ok(f) => frames.push(f),
                Err(Error::NoOverlap) => {
                    retries += 1;
                    continue 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        // Consecutive-overlap check: some valid voxel of frame i must be
        // visible in frame i+1 (a world point observed by both).
        for i in 0..frames.len() - 1 {
            if !frames_overlap(&frames[i], &poses.poses[i], &frames[i + 1], &poses.poses[i + 1]) {
                retries += 1;
                continue 'outer;
            }
        }
        // Per-frame noise from independent sub-streams.
        let noisy: Vec<Volume3> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut r = ChaCha8Rng::seed_from_u64(protocol.seed);
                r.set_stream(1000 + i as u64);
                add_noise(f, protocol.noise_std, r.gen::<u64>())
            })
            .collect();
        return Ok(GroundTruthSequence {
            frames: noisy,
            true_poses: poses,
            protocol: protocol.clone(),
            source_id: source_id.to_string(),
            retries,
        });
    }
}

fn frames_overlap(a: &Volume3, pose_a: &Pose, b: &Volume3, pose_b: &Pose) -> bool {
    let inv_a = pose_a.inverse();
    let d = a.dims();
    let stride = 2;
    for z in (0..d[2]).step_by(stride) {
        for y in (0..d[1]).step_by(stride) {
            for x in (0..d[0]).step_by(stride) {
                let v = Vector3::new(x as f64, y as f64, z as f64);
                if !a.is_visible(v) {
                    continue;
                }
                let w = inv_a.apply(a.voxel_to_world(v));
                let p = b.world_to_voxel(pose_b.apply(w));
                if b.is_visible(p) {
                    return true;
                }
            }
        }
    }
    false
}

/// Initial guesses for the solvers: ground truth left-composed with a
/// per-frame random perturbation. Anchored frames are left exact so the
/// gauge matches the truth.
pub fn perturb_poses(
    truth: &PoseSet,
    rot_deg: f64,
    trans_vox: f64,
    spacing: [f64; 3],
    seed: u64,
) -> PoseSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = rot_deg.to_radians();
    let poses = truth
        .poses
        .iter()
        .zip(&truth.anchored)
        .map(|(p, &anchored)| {
            if anchored {
                return p.clone();
            }
            let delta = nalgebra::Vector6::new(
                rng.gen_range(-trans_vox..=trans_vox) * spacing[0],
                rng.gen_range(-trans_vox..=trans_vox) * spacing[1],
                rng.gen_range(-trans_vox..=trans_vox) * spacing[2],
                rng.gen_range(-rot..=rot),
                rng.gen_range(-rot..=rot),
                rng.gen_range(-rot..=rot),
            );
            p.apply_increment(delta)
        })
        .collect();
    PoseSet {
        poses,
        anchored: truth.anchored.clone(),
    }
}
