// Temporary scale probe; not part of the deliverable.
use std::time::Instant;
use voxalign_core::metrics::{fov_gain, objective_of, pose_errors};
use voxalign_core::se3::{Pose, PoseSet};
use voxalign_core::sim::*;
use voxalign_core::solver::*;
use voxalign_core::volume::{fuse, PanoramaGrid};

fn main() {
    // ---- criterion 1 scale ----
    let t0 = Instant::now();
    let src = make_phantom([72, 72, 72], PhantomKind::SmoothBlobs, 11).unwrap();
    let protocol = SimProtocol {
        n_frames: 5,
        rot_range_deg: 6.0,
        trans_range_vox: 8.0,
        noise_std: 25.0,
        fov: FovSpec { dims: [48, 48, 48], spacing: None, frustum: None },
        seed: 1,
    };
    let seq = generate_sequence(&src, &protocol, "c1").unwrap();
    println!("[c1] generated in {:?} (retries {})", t0.elapsed(), seq.retries);
    let init = perturb_poses(&seq.true_poses, 3.0, 4.0, [1.0; 3], 2);
    let grid = PanoramaGrid::enclose(&seq.frames, &init.poses, 2).unwrap();
    println!("[c1] grid dims {:?} = {} voxels", grid.dims, grid.len());
    let config = SolverConfig { rel_tol: 1e-9, max_iters: 100, ..SolverConfig::default() };
    let t = Instant::now();
    let dsr = solve_dsr(&seq.frames, &init, &grid, &config).unwrap();
    let t_dsr = t.elapsed();
    let t = Instant::now();
    let dba = solve_dba(&seq.frames, &init, &grid, &config).unwrap();
    let t_dba = t.elapsed();
    println!("[c1] dsr {:?} ({} iters), dba {:?} ({} iters)", t_dsr, dsr.iterations.len(), t_dba, dba.iterations.len());
    let mut max_obj_rel: f64 = 0.0;
    for (a, b) in dsr.iterations.iter().zip(&dba.iterations) {
        max_obj_rel = max_obj_rel.max((a.objective - b.objective).abs() / a.objective.max(1e-12));
    }
    let mut max_pose: f64 = 0.0;
    for (a, b) in dsr.poses.poses.iter().zip(&dba.poses.poses) {
        max_pose = max_pose.max((a.xi() - b.xi()).amax());
    }
    let max_proj = dsr.iterations.iter().map(|r| r.projection_identity).fold(0.0f64, f64::max);
    println!("[c1] obj rel diff {max_obj_rel:.2e}, pose diff {max_pose:.2e}, proj {max_proj:.2e}");
    let err = pose_errors(&dsr.poses, &seq.true_poses, grid.spacing).unwrap();
    println!("[c1] dsr MAE_t {:.4} vox, MAE_r {:.6} rad", err.mae_translation, err.mae_rotation);

    // ---- criterion 4 scale over 5 seeds ----
    for sweep_seed in 0..5u64 {
    let t0 = Instant::now();
    let src = make_phantom([96, 96, 96], PhantomKind::SmoothBlobs, 21 + sweep_seed).unwrap();
    let protocol = SimProtocol {
        n_frames: 11,
        rot_range_deg: 12.0,
        trans_range_vox: 15.0,
        noise_std: 25.0,
        fov: FovSpec { dims: [64, 64, 64], spacing: None, frustum: None },
        seed: 300 + sweep_seed,
    };
    let seq = generate_sequence(&src, &protocol, "c4").unwrap();
    println!("[c4] generated in {:?} (retries {})", t0.elapsed(), seq.retries);
    let init = perturb_poses(&seq.true_poses, 6.0, 7.5, [1.0; 3], 4);
    let grid = PanoramaGrid::enclose(&seq.frames, &init.poses, 2).unwrap();
    println!("[c4] grid dims {:?} = {} voxels", grid.dims, grid.len());
    let t = Instant::now();
    let dsr = solve_dsr(&seq.frames, &init, &grid, &config).unwrap();
    println!("[c4] dsr {:?}, converged={} iters={}", t.elapsed(), dsr.converged, dsr.iterations.len());
    let t = Instant::now();
    let seqr = voxalign_core::sequential::run_sequential(&seq.frames, &init, &grid, &config).unwrap();
    println!("[c4] sequential {:?}", t.elapsed());
    let e_dsr = pose_errors(&dsr.poses, &seq.true_poses, grid.spacing).unwrap();
    let e_seq = pose_errors(&seqr.poses, &seq.true_poses, grid.spacing).unwrap();
    println!("[c4] dsr MAE_t {:.4} MAE_r {:.6} | seq MAE_t {:.4} MAE_r {:.6}",
        e_dsr.mae_translation, e_dsr.mae_rotation, e_seq.mae_translation, e_seq.mae_rotation);
    let o_dsr = objective_of(&seq.frames, &dsr.poses, &grid).unwrap();
    let o_seq = objective_of(&seq.frames, &seqr.poses, &grid).unwrap();
    println!("[c4:{sweep_seed}] obj dsr {o_dsr:.6e} vs seq {o_seq:.6e} (dsr <= seq: {})", o_dsr <= o_seq);
    }

    // ---- criterion 7: sweep ----
    let src = make_phantom([128, 96, 96], PhantomKind::SmoothBlobs, 31).unwrap();
    let fov = FovSpec { dims: [48, 48, 48], spacing: None, frustum: None };
    let mut poses = vec![Pose::identity()];
    for k in 1..6 {
        poses.push(Pose::from_xi(nalgebra::Vector6::new(-8.0 * k as f64, 0.0, 0.0, 0.0, 0.0, 0.0)));
    }
    let frames: Vec<_> = poses.iter().map(|p| extract_frame(&src, p, &fov).unwrap()).collect();
    let set = PoseSet::with_first_anchored(poses);
    let grid = PanoramaGrid::enclose(&frames, &set.poses, 2).unwrap();
    let (_, counts) = fuse(&frames, &set.poses, &grid).unwrap();
    let gain = fov_gain(&counts, &frames[0]).unwrap();
    println!("[c7] fov ratio {:.3} (fused {} / single {})", gain.ratio, gain.fused_voxel_count, gain.single_frame_voxel_count);
}
