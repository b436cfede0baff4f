// Temporary diagnosis; not part of the deliverable.
use voxalign_core::metrics::{objective_of, pose_errors};
use voxalign_core::sim::*;
use voxalign_core::solver::*;
use voxalign_core::volume::PanoramaGrid;

fn main() {
    for seed in 0..5u64 {
        let src = make_phantom([96, 96, 96], PhantomKind::SmoothBlobs, 21 + seed).unwrap();
        let protocol = SimProtocol {
            n_frames: 11, rot_range_deg: 12.0, trans_range_vox: 15.0, noise_std: 25.0,
            fov: FovSpec { dims: [64, 64, 64], spacing: None, frustum: None },
            seed: 300 + seed,
        };
        let seq = generate_sequence(&src, &protocol, "diag").unwrap();
        let init = perturb_poses(&seq.true_poses, 6.0, 7.5, [1.0; 3], 4);
        let grid = PanoramaGrid::enclose(&seq.frames, &init.poses, 2).unwrap();
        let config = SolverConfig { rel_tol: 1e-9, max_iters: 100, ..SolverConfig::default() };
        let dsr = solve_dsr(&seq.frames, &init, &grid, &config).unwrap();
        let cfg_given = SolverConfig { sequential_init: SequentialInit::AsGiven, ..config.clone() };
        let s_chain = voxalign_core::sequential::run_sequential(&seq.frames, &init, &grid, &config).unwrap();
        let s_given = voxalign_core::sequential::run_sequential(&seq.frames, &init, &grid, &cfg_given).unwrap();
        let f = |p| objective_of(&seq.frames, p, &grid).unwrap();
        let e = |p| pose_errors(p, &seq.true_poses, grid.spacing).unwrap().mae_translation;
        println!("seed {seed}: dsr f {:.6e} mae {:.4} | chain f {:.6e} mae {:.4} | given f {:.6e} mae {:.4}",
            f(&dsr.poses), e(&dsr.poses), f(&s_chain.poses), e(&s_chain.poses), f(&s_given.poses), e(&s_given.poses));
    }
}
