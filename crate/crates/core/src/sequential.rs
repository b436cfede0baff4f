//! Sequential baseline: register one frame at a time to a growing
//! panoramic image by pairwise intensity Gauss-Newton, fusing each
//! accepted frame into the panorama before the next.
//!
//! The result depends on frame order and serves as the comparison method
//! for the simultaneous solvers; its final objective is evaluated with
//! the same mean-intensity convention so the numbers are comparable.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::residuals::{build_observations, objective};
use crate::se3::{Pose, PoseSet};
use crate::solver::{
    IterationRecord, Mode, SequentialInit, SolveReport, SolverConfig, StopReason,
};
use crate::volume::{CountVolume, GradientField, PanoramaGrid, Volume3};

/// Running fusion state while frames are being registered in.
#[derive(Debug, Clone)]
pub struct SequentialState {
    pub panorama: Volume3,
    pub counts: CountVolume,
    pub registered: Vec<Pose>,
}

impl SequentialState {
    fn new(grid: &PanoramaGrid) -> Self {
        let n = grid.len();
        let panorama = Volume3::new(grid.dims, grid.spacing, grid.origin, vec![0.0; n])
            .expect("grid-shaped volume")
            .with_mask(vec![0u8; n])
            .expect("same length");
        SequentialState {
            panorama,
            counts: CountVolume {
                dims: grid.dims,
                spacing: grid.spacing,
                origin: grid.origin,
                counts: vec![0; n],
            },
            registered: Vec::new(),
        }
    }

    /// Fold one frame in with a running per-voxel mean.
    fn fuse_in(&mut self, frame: &Volume3, pose: &Pose) {
        let dims = self.counts.dims;
        let [nx, ny, _] = dims;
        let spacing = self.counts.spacing;
        let origin = self.counts.origin;
        let mut values: Vec<f32> = self.panorama.data().to_vec();
        let mut mask: Vec<u8> = self.panorama.mask().unwrap().to_vec();
        let counts = &mut self.counts.counts;
        values
            .par_chunks_mut(nx * ny)
            .zip(mask.par_chunks_mut(nx * ny))
            .zip(counts.par_chunks_mut(nx * ny))
            .enumerate()
            .for_each(|(z, ((vslab, mslab), cslab))| {
                for y in 0..ny {
                    for x in 0..nx {
                        let w = nalgebra::Point3::new(
                            origin[0] + spacing[0] * x as f64,
                            origin[1] + spacing[1] * y as f64,
                            origin[2] + spacing[2] * z as f64,
                        );
                        let p = frame.world_to_voxel(pose.apply(w));
                        if !frame.is_visible(p) {
                            continue;
                        }
                        let v = frame.sample(p).expect("visible point samples") as f32;
                        let o = x + nx * y;
                        let c = cslab[o];
                        vslab[o] = if c == 0 {
                            v
                        } else {
                            ((vslab[o] as f64 * c as f64 + v as f64) / (c + 1) as f64) as f32
                        };
                        mslab[o] = 1;
                        cslab[o] = c + 1;
                    }
                }
            });
        self.panorama = Volume3::new(dims, spacing, origin, values)
            .expect("panorama stays valid")
            .with_mask(mask)
            .expect("same length");
        self.registered.push(pose.clone());
    }
}

/// Pairwise SSD Gauss-Newton of one frame against a fixed target volume,
/// restricted to the target's covered (masked-valid) voxels. Shares the
/// pyramid schedule, damping and backtracking of the simultaneous solver.
pub fn register_pairwise(
    target: &Volume3,
    frame: &Volume3,
    init: &Pose,
    config: &SolverConfig,
) -> Result<Pose> {
    config.validate()?;
    let target_pyr = target.build_pyramid(config.pyramid_levels)?;
    let frame_pyr = frame.build_pyramid(config.pyramid_levels)?;
    let mut pose = init.clone();
    for level in (0..config.pyramid_levels).rev() {
        let tgt = &target_pyr[level];
        let frm = &frame_pyr[level];
        let grad = frm.smoothed().gradient_field()?;
        let (mut obj, mut n_obs) = pairwise_objective(tgt, frm, &pose)?;
        for _ in 0..config.max_iters {
            let (h, b, _) = pairwise_system(tgt, frm, &grad, &pose)?;
            let mut hd = h;
            let lambda = config.damping * hd.trace() / 6.0;
            for i in 0..6 {
                hd[(i, i)] += lambda;
            }
            let delta = hd
                .cholesky()
                .ok_or(Error::GaugeUnderdetermined)?
                .solve(&b);
            if delta.norm() < config.step_tol {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            let tries = if config.backtracking { 9 } else { 1 };
            for _ in 0..tries {
                let cand = pose.apply_increment(Vector6::from_column_slice(delta.as_slice()) * alpha);
                match pairwise_objective(tgt, frm, &cand) {
                    // Mean-objective acceptance with a coverage guard, as
                    // in the simultaneous driver.
                    Ok((cand_obj, cand_n)) => {
                        let improves = cand_obj * (n_obs as f64) < obj * (cand_n as f64);
                        if (improves && 2 * cand_n >= n_obs) || !config.backtracking {
                            accepted = Some((cand, cand_obj, cand_n));
                            break;
                        }
                    }
                    Err(Error::NoOverlap) => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
            let Some((new_pose, new_obj, new_n)) = accepted else {
                break;
            };
            let prev_mean = obj / n_obs as f64;
            pose = new_pose;
            obj = new_obj;
            n_obs = new_n;
            let mean_obj = obj / n_obs as f64;
            if (prev_mean - mean_obj) < config.rel_tol * prev_mean.max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }
    Ok(pose)
}

/// Normal equations of the pairwise problem at the current pose.
fn pairwise_system(
    target: &Volume3,
    frame: &Volume3,
    grad: &GradientField,
    pose: &Pose,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let dims = target.dims();
    let [nx, ny, nz] = dims;
    let spacing = frame.spacing();
    let inv_s = [1.0 / spacing[0], 1.0 / spacing[1], 1.0 / spacing[2]];
    struct Acc {
        h: DMatrix<f64>,
        b: DVector<f64>,
        obj: f64,
        n: usize,
    }
    let acc = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut h = DMatrix::<f64>::zeros(6, 6);
            let mut b = DVector::<f64>::zeros(6);
            let mut obj = 0.0;
            let mut n = 0usize;
            for y in 0..ny {
                for x in 0..nx {
                    let v = Vector3::new(x as f64, y as f64, z as f64);
                    if !target.is_visible(v) {
                        continue;
                    }
                    let w = target.voxel_to_world(v);
                    let q = pose.rotation() * w.coords + pose.translation();
                    let p = Vector3::new(
                        (q.x - frame.origin()[0]) * inv_s[0],
                        (q.y - frame.origin()[1]) * inv_s[1],
                        (q.z - frame.origin()[2]) * inv_s[2],
                    );
                    if !frame.is_visible(p) {
                        continue;
                    }
                    let t = target.sample(v).expect("covered target voxel");
                    let f = frame.sample(p).expect("visible point samples");
                    let g = grad.sample(p).expect("visible point samples");
                    let hv = Vector3::new(g.x * inv_s[0], g.y * inv_s[1], g.z * inv_s[2]);
                    let rot = q.cross(&hv);
                    let row = [-hv.x, -hv.y, -hv.z, -rot.x, -rot.y, -rot.z];
                    let e = t - f;
                    for a in 0..6 {
                        for c in a..6 {
                            let val = row[a] * row[c];
                            h[(a, c)] += val;
                            if c != a {
                                h[(c, a)] += val;
                            }
                        }
                        b[a] -= row[a] * e;
                    }
                    obj += e * e;
                    n += 1;
                }
            }
            Acc { h, b, obj, n }
        })
        .reduce(
            || Acc {
                h: DMatrix::zeros(6, 6),
                b: DVector::zeros(6),
                obj: 0.0,
                n: 0,
            },
            |mut a, c| {
                a.h += c.h;
                a.b += c.b;
                a.obj += c.obj;
                a.n += c.n;
                a
            },
        );
    if acc.n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok((acc.h, acc.b, acc.obj))
}

fn pairwise_objective(target: &Volume3, frame: &Volume3, pose: &Pose) -> Result<(f64, usize)> {
    let dims = target.dims();
    let [nx, ny, nz] = dims;
    let spacing = frame.spacing();
    let inv_s = [1.0 / spacing[0], 1.0 / spacing[1], 1.0 / spacing[2]];
    let (obj, n) = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut obj = 0.0;
            let mut n = 0usize;
            for y in 0..ny {
                for x in 0..nx {
                    let v = Vector3::new(x as f64, y as f64, z as f64);
                    if !target.is_visible(v) {
                        continue;
                    }
                    let w = target.voxel_to_world(v);
                    let q = pose.rotation() * w.coords + pose.translation();
                    let p = Vector3::new(
                        (q.x - frame.origin()[0]) * inv_s[0],
                        (q.y - frame.origin()[1]) * inv_s[1],
                        (q.z - frame.origin()[2]) * inv_s[2],
                    );
                    if !frame.is_visible(p) {
                        continue;
                    }
                    let e = target.sample(v).unwrap() - frame.sample(p).unwrap();
                    obj += e * e;
                    n += 1;
                }
            }
            (obj, n)
        })
        .reduce(|| (0.0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok((obj, n))
}

/// Register all frames one at a time against the growing panorama.
///
/// Frame 0 is fused at its given (anchored) pose. Each later frame starts
/// from either its given pose or the previous solution chained with the
/// inter-frame initial guess, is registered pairwise, then fused in. The
/// report's objective is the group objective of the final pose set.
pub fn run_sequential(
    frames: &[Volume3],
    initial: &PoseSet,
    grid: &PanoramaGrid,
    config: &SolverConfig,
) -> Result<SolveReport> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(Error::InvalidConfig(
            "sequential registration needs at least 2 frames".into(),
        ));
    }
    if frames.len() != initial.len() {
        return Err(Error::LengthMismatch(format!(
            "{} frames vs {} poses",
            frames.len(),
            initial.len()
        )));
    }
    let t0 = std::time::Instant::now();
    let mut state = SequentialState::new(grid);
    state.fuse_in(&frames[0], &initial.poses[0]);
    for i in 1..frames.len() {
        let init_pose = match config.sequential_init {
            SequentialInit::AsGiven => initial.poses[i].clone(),
            SequentialInit::Chained => {
                // Inter-frame guess composed onto the previous solution.
                let guess = initial.poses[i].compose(&initial.poses[i - 1].inverse());
                guess.compose(&state.registered[i - 1])
            }
        };
        let pose = register_pairwise(&state.panorama, &frames[i], &init_pose, config)?;
        state.fuse_in(&frames[i], &pose);
    }

    let poses = PoseSet {
        poses: state.registered.clone(),
        anchored: initial.anchored.clone(),
    };
    // Group objective of the final poses, mean convention, for comparison
    // with the simultaneous solvers.
    let gradients = frames
        .iter()
        .map(|f| f.gradient_field())
        .collect::<Result<Vec<_>>>()?;
    let obs = build_observations(frames, &gradients, &poses, grid)?;
    let means = obs.means();
    let final_obj = objective(&obs, &means);
    let record = IterationRecord {
        level: 0,
        iter: frames.len() - 1,
        objective: final_obj,
        step_norm: 0.0,
        projection_identity: 0.0,
        observations: obs.n_entries(),
        active_voxels: obs.n_active(),
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    Ok(SolveReport {
        mode: Mode::Dsr,
        iterations: vec![record],
        stop_reasons: vec![(0, StopReason::ObjectiveTol)],
        poses,
        converged: true,
        panorama: state.panorama,
        counts: state.counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{extract_frame, make_phantom, FovSpec, PhantomKind};
    use crate::volume::fuse;

    fn smooth_frame(seed: u64, pose: &Pose, dims: [usize; 3]) -> Volume3 {
        let src = make_phantom([40, 40, 40], PhantomKind::SmoothBlobs, seed).unwrap();
        extract_frame(
            &src,
            pose,
            &FovSpec {
                dims,
                spacing: None,
                frustum: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn identical_frame_stays_at_identity() {
        let frame = smooth_frame(1, &Pose::identity(), [28, 28, 28]);
        let config = SolverConfig {
            pyramid_levels: 2,
            ..SolverConfig::default()
        };
        let pose = register_pairwise(&frame, &frame, &Pose::identity(), &config).unwrap();
        assert!(pose.xi().norm() < 1e-6, "{:?}", pose.xi());
        let (obj, _) = pairwise_objective(&frame, &frame, &pose).unwrap();
        assert!(obj < 1e-9);
    }

    #[test]
    fn two_voxel_shift_is_recovered() {
        let target = smooth_frame(2, &Pose::identity(), [28, 28, 28]);
        let truth = Pose::from_xi(Vector6::new(2.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let frame = smooth_frame(2, &truth, [28, 28, 28]);
        let config = SolverConfig {
            pyramid_levels: 2,
            ..SolverConfig::default()
        };
        let pose = register_pairwise(&target, &frame, &Pose::identity(), &config).unwrap();
        let err = (pose.xi() - truth.xi()).norm();
        assert!(err < 0.1, "pose {:?}", pose.xi());
    }

    #[test]
    fn no_overlap_is_an_error() {
        let target = smooth_frame(3, &Pose::identity(), [24, 24, 24]);
        let frame = smooth_frame(3, &Pose::identity(), [24, 24, 24]);
        let off = Pose::from_xi(Vector6::new(1e5, 0.0, 0.0, 0.0, 0.0, 0.0));
        let err = register_pairwise(&target, &frame, &off, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NoOverlap));
    }

    #[test]
    fn running_mean_fusion_averages_constants() {
        let grid = PanoramaGrid {
            dims: [6, 6, 6],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            margin_voxels: 0,
        };
        let mut state = SequentialState::new(&grid);
        for value in [10.0, 20.0, 60.0] {
            let f = Volume3::filled([6, 6, 6], [1.0; 3], [0.0; 3], value);
            state.fuse_in(&f, &Pose::identity());
        }
        assert!(state
            .panorama
            .data()
            .iter()
            .all(|&v| (v - 30.0).abs() < 1e-4));
        assert!(state.counts.counts.iter().all(|&c| c == 3));
    }

    #[test]
    fn all_identical_frames_all_identity() {
        let frame = smooth_frame(4, &Pose::identity(), [24, 24, 24]);
        let frames = vec![frame.clone(), frame.clone(), frame.clone()];
        let init = PoseSet::identities(3);
        let grid = PanoramaGrid::enclose(&frames, &init.poses, 2).unwrap();
        let config = SolverConfig {
            pyramid_levels: 2,
            ..SolverConfig::default()
        };
        let report = run_sequential(&frames, &init, &grid, &config).unwrap();
        for p in &report.poses.poses {
            assert!(p.xi().norm() < 1e-5);
        }
        assert!(report.final_objective() < 1e-6);
    }

    #[test]
    fn two_frames_equals_plain_pairwise_plus_fusion() {
        let truth = Pose::from_xi(Vector6::new(1.0, -1.0, 0.5, 0.02, 0.0, -0.01));
        let a = smooth_frame(5, &Pose::identity(), [28, 28, 28]);
        let b = smooth_frame(5, &truth, [28, 28, 28]);
        let frames = vec![a.clone(), b.clone()];
        let init = PoseSet::identities(2);
        let grid = PanoramaGrid::enclose(&frames, &init.poses, 2).unwrap();
        let config = SolverConfig {
            pyramid_levels: 2,
            ..SolverConfig::default()
        };
        let report = run_sequential(&frames, &init, &grid, &config).unwrap();
        // The degenerate sequence: frame 0 fused alone, then one pairwise
        // registration against it.
        let mut state = SequentialState::new(&grid);
        state.fuse_in(&a, &Pose::identity());
        let direct = register_pairwise(&state.panorama, &b, &Pose::identity(), &config).unwrap();
        assert_eq!(report.poses.poses[1].matrix(), direct.matrix());
        // Fusing the registered frame reproduces the report's panorama.
        state.fuse_in(&b, &direct);
        assert_eq!(state.panorama.data(), report.panorama.data());
    }

    #[test]
    fn sequential_tracks_a_short_sweep() {
        let src = make_phantom([48, 48, 48], PhantomKind::SmoothBlobs, 6).unwrap();
        let fov = FovSpec {
            dims: [28, 28, 28],
            spacing: None,
            frustum: None,
        };
        let mut truth = vec![Pose::identity()];
        for i in 1..4 {
            truth.push(Pose::from_xi(Vector6::new(
                2.0 * i as f64,
                -1.0 * i as f64,
                0.5 * i as f64,
                0.02 * i as f64,
                0.0,
                -0.02 * i as f64,
            )));
        }
        let frames: Vec<Volume3> = truth
            .iter()
            .map(|p| extract_frame(&src, p, &fov).unwrap())
            .collect();
        let truth_set = PoseSet::with_first_anchored(truth);
        let init = crate::sim::perturb_poses(&truth_set, 1.0, 1.0, [1.0; 3], 9);
        let grid = PanoramaGrid::enclose(&frames, &init.poses, 2).unwrap();
        let config = SolverConfig {
            pyramid_levels: 2,
            ..SolverConfig::default()
        };
        let report = run_sequential(&frames, &init, &grid, &config).unwrap();
        for (got, want) in report.poses.poses.iter().zip(&truth_set.poses) {
            assert!(
                (got.xi() - want.xi()).norm() < 0.25,
                "got {:?} want {:?}",
                got.xi(),
                want.xi()
            );
        }
        // Sanity: fusing at the solved poses covers at least the union
        // seen by truth fusion.
        let (_, counts) = fuse(&frames, &report.poses.poses, &grid).unwrap();
        assert!(counts.covered() > 0);
    }
}
