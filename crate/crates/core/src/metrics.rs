//! Accuracy metrics and result emission: gauge-aligned pose errors,
//! the group objective of a pose set, and field-of-view gain of a fused
//! volume, with CSV and JSON writers.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residuals::{build_observations, objective};
use crate::se3::{euler_zyx_from_rotation, PoseSet};
use crate::volume::{CountVolume, PanoramaGrid, Volume3};

/// How pose errors are measured; recorded in every report so the numbers
/// are interpretable.
pub const ALIGNMENT_CONVENTION: &str =
    "first-frame left-composed gauge alignment; relative transform truth_k^-1 * aligned_k; \
     ZYX Euler angles (rad); translations in panorama voxels";

/// Per-frame and aggregate pose errors after gauge alignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseErrorSummary {
    /// Per-frame translation error components, panorama voxels.
    pub translation_errors: Vec<[f64; 3]>,
    /// Per-frame ZYX Euler angle error components, radians.
    pub rotation_errors: Vec<[f64; 3]>,
    /// Mean of |component| over frames and axes.
    pub mae_translation: f64,
    pub mae_rotation: f64,
    pub alignment_convention: String,
}

/// Gauge-aligned pose errors against ground truth.
///
/// Estimated poses are left-composed with `truth_0 * estimated_0^-1` so a
/// sequence that differs from the truth only by a common frame-side
/// transform scores zero. Translation components are reported in voxels
/// of the panorama spacing.
pub fn pose_errors(
    estimated: &PoseSet,
    truth: &PoseSet,
    panorama_spacing: [f64; 3],
) -> Result<PoseErrorSummary> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch(format!(
            "{} estimated vs {} truth poses",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated.is_empty() {
        return Err(Error::InvalidConfig("empty pose sets".into()));
    }
    let align = truth.poses[0].compose(&estimated.poses[0].inverse());
    let mut translation_errors = Vec::with_capacity(estimated.len());
    let mut rotation_errors = Vec::with_capacity(estimated.len());
    let mut abs_sum_t = 0.0;
    let mut abs_sum_r = 0.0;
    for (est, tru) in estimated.poses.iter().zip(&truth.poses) {
        let aligned = align.compose(est);
        let rel = tru.inverse().compose(&aligned);
        let t = rel.translation();
        let tv = [
            t.x / panorama_spacing[0],
            t.y / panorama_spacing[1],
            t.z / panorama_spacing[2],
        ];
        let e: Vector3<f64> = euler_zyx_from_rotation(rel.rotation());
        translation_errors.push(tv);
        rotation_errors.push([e.x, e.y, e.z]);
        abs_sum_t += tv.iter().map(|v| v.abs()).sum::<f64>();
        abs_sum_r += e.abs().sum();
    }
    let denom = (3 * estimated.len()) as f64;
    Ok(PoseErrorSummary {
        translation_errors,
        rotation_errors,
        mae_translation: abs_sum_t / denom,
        mae_rotation: abs_sum_r / denom,
        alignment_convention: ALIGNMENT_CONVENTION.to_string(),
    })
}

/// Group objective of a pose set: the sum of squared differences between
/// each observed local intensity and its per-voxel mean. Evaluated with
/// the same observation machinery as the solvers.
pub fn objective_of(frames: &[Volume3], poses: &PoseSet, grid: &PanoramaGrid) -> Result<f64> {
    let gradients = frames
        .iter()
        .map(|f| f.gradient_field())
        .collect::<Result<Vec<_>>>()?;
    let obs = build_observations(frames, &gradients, poses, grid)?;
    let means = obs.means();
    Ok(objective(&obs, &means))
}

/// Field-of-view gain of a fused volume over a single frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FovGainReport {
    pub fused_voxel_count: usize,
    pub single_frame_voxel_count: usize,
    pub ratio: f64,
}

/// Covered fused voxels (count >= 1) over the valid voxels of frame 0.
pub fn fov_gain(counts: &CountVolume, frame0: &Volume3) -> Result<FovGainReport> {
    let single = frame0.valid_count();
    if single == 0 {
        return Err(Error::InvalidVolume("frame 0 has no valid voxels".into()));
    }
    let fused = counts.covered();
    Ok(FovGainReport {
        fused_voxel_count: fused,
        single_frame_voxel_count: single,
        ratio: fused as f64 / single as f64,
    })
}

/// One CSV row per frame: translation and rotation error components.
pub fn write_errors_csv(summary: &PoseErrorSummary, mut w: impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "frame,et_x_vox,et_y_vox,et_z_vox,er_roll_rad,er_pitch_rad,er_yaw_rad")?;
    for (i, (t, r)) in summary
        .translation_errors
        .iter()
        .zip(&summary.rotation_errors)
        .enumerate()
    {
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            i, t[0], t[1], t[2], r[0], r[1], r[2]
        )?;
    }
    Ok(())
}

/// JSON summary combining the evaluation products of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub mae_translation_vox: f64,
    pub mae_rotation_rad: f64,
    pub objective: f64,
    pub fov_gain: FovGainReport,
    pub alignment_convention: String,
    pub frames: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Pose;
    use crate::sim::{extract_frame, make_phantom, perturb_poses, FovSpec, PhantomKind};
    use crate::volume::fuse;
    use nalgebra::Vector6;
    use proptest::prelude::*;

    fn truth_set() -> PoseSet {
        PoseSet::with_first_anchored(vec![
            Pose::identity(),
            Pose::from_xi(Vector6::new(2.0, -1.0, 0.5, 0.05, -0.02, 0.1)),
            Pose::from_xi(Vector6::new(-1.0, 3.0, 1.5, -0.03, 0.08, -0.05)),
        ])
    }

    #[test]
    fn zero_error_for_identical_sets() {
        let t = truth_set();
        let s = pose_errors(&t, &t, [1.0; 3]).unwrap();
        assert!(s.mae_translation < 1e-12);
        assert!(s.mae_rotation < 1e-12);
    }

    #[test]
    fn common_left_transform_is_gauged_away() {
        let t = truth_set();
        let g = Pose::from_xi(Vector6::new(5.0, -3.0, 2.0, 0.2, 0.1, -0.15));
        let est = PoseSet {
            poses: t.poses.iter().map(|p| g.compose(p)).collect(),
            anchored: t.anchored.clone(),
        };
        let s = pose_errors(&est, &t, [1.0; 3]).unwrap();
        assert!(s.mae_translation < 1e-9, "{}", s.mae_translation);
        assert!(s.mae_rotation < 1e-9, "{}", s.mae_rotation);
    }

    #[test]
    fn single_axis_offset_has_hand_computable_mae() {
        let t = truth_set();
        let mut est = t.clone();
        // Perturb frame 1 by one panorama voxel along x, in the truth
        // frame's coordinates: rel = truth^-1 * est = translation(1,0,0).
        let rel = crate::se3::exp_map(Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        est.poses[1] = Pose::from_matrix(&(t.poses[1].matrix() * rel));
        let s = pose_errors(&est, &t, [1.0; 3]).unwrap();
        let m_frames = t.len() as f64;
        assert!((s.mae_translation - 1.0 / (3.0 * m_frames)).abs() < 1e-9);
        assert!(s.mae_rotation < 1e-12);
    }

    #[test]
    fn length_mismatch_is_error() {
        let t = truth_set();
        let short = PoseSet::identities(2);
        assert!(pose_errors(&short, &t, [1.0; 3]).is_err());
    }

    fn sequence() -> (Vec<Volume3>, PoseSet, PanoramaGrid) {
        let src = make_phantom([40, 40, 40], PhantomKind::SmoothBlobs, 50).unwrap();
        let fov = FovSpec {
            dims: [24, 24, 24],
            spacing: None,
            frustum: None,
        };
        let poses = truth_set();
        let frames: Vec<Volume3> = poses
            .poses
            .iter()
            .map(|p| extract_frame(&src, p, &fov).unwrap())
            .collect();
        let grid = PanoramaGrid::enclose(&frames, &poses.poses, 2).unwrap();
        (frames, poses, grid)
    }

    #[test]
    fn objective_zero_for_identical_aligned_frames() {
        let vol = make_phantom([24, 24, 24], PhantomKind::SmoothBlobs, 51).unwrap();
        let frames = vec![vol.clone(), vol.clone()];
        let poses = PoseSet::identities(2);
        let grid = PanoramaGrid::enclose(&frames, &poses.poses, 0).unwrap();
        let obj = objective_of(&frames, &poses, &grid).unwrap();
        assert!(obj < 1e-9, "{obj}");
    }

    #[test]
    fn objective_of_constant_frames_hand_value() {
        // Two aligned constant frames 10 and 20: every covered voxel
        // contributes (15-10)^2 + (15-20)^2 = 50.
        let a = Volume3::filled([6, 6, 6], [1.0; 3], [0.0; 3], 10.0);
        let b = Volume3::filled([6, 6, 6], [1.0; 3], [0.0; 3], 20.0);
        let poses = PoseSet::identities(2);
        let grid = PanoramaGrid {
            dims: [6, 6, 6],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            margin_voxels: 0,
        };
        let obj = objective_of(&[a, b], &poses, &grid).unwrap();
        assert!((obj - 50.0 * 216.0).abs() < 1e-6);
    }

    #[test]
    fn truth_beats_perturbations() {
        let (frames, truth, grid) = sequence();
        let base = objective_of(&frames, &truth, &grid).unwrap();
        for k in 0..20 {
            let perturbed = perturb_poses(&truth, 4.0, 3.0, [1.0; 3], 100 + k);
            let obj = objective_of(&frames, &perturbed, &grid).unwrap();
            assert!(obj > base, "perturbation {k}: {obj} vs {base}");
        }
    }

    #[test]
    fn fov_ratio_single_frame_is_one() {
        let vol = make_phantom([20, 20, 20], PhantomKind::SmoothBlobs, 53).unwrap();
        let poses = vec![Pose::identity()];
        let grid = PanoramaGrid {
            dims: vol.dims(),
            spacing: vol.spacing(),
            origin: vol.origin(),
            margin_voxels: 0,
        };
        let (_, counts) = fuse(std::slice::from_ref(&vol), &poses, &grid).unwrap();
        let r = fov_gain(&counts, &vol).unwrap();
        assert_eq!(r.fused_voxel_count, vol.len());
        assert_eq!(r.single_frame_voxel_count, vol.len());
        assert!((r.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fov_ratio_disjoint_frames_is_two() {
        let a = Volume3::filled([8, 8, 8], [1.0; 3], [0.0; 3], 5.0);
        let b = Volume3::filled([8, 8, 8], [1.0; 3], [0.0; 3], 9.0);
        // Frame b sits 20 voxels away along x (world-to-frame maps the
        // shifted world region onto b's grid).
        let poses = vec![
            Pose::identity(),
            Pose::from_xi(Vector6::new(-20.0, 0.0, 0.0, 0.0, 0.0, 0.0)),
        ];
        let frames = [a, b];
        let grid = PanoramaGrid::enclose(&frames, &poses, 0).unwrap();
        let (_, counts) = fuse(&frames, &poses, &grid).unwrap();
        assert!(counts.counts.iter().all(|&c| c <= 1));
        let r = fov_gain(&counts, &frames[0]).unwrap();
        assert!((r.ratio - 2.0).abs() < 1e-9, "ratio {}", r.ratio);
    }

    #[test]
    fn fov_recount_matches_direct_tally() {
        let (frames, truth, grid) = sequence();
        let (_, counts) = fuse(&frames, &truth.poses, &grid).unwrap();
        let r = fov_gain(&counts, &frames[0]).unwrap();
        let direct = counts.counts.iter().filter(|&&c| c >= 1).count();
        assert_eq!(r.fused_voxel_count, direct);
        assert!((r.ratio - direct as f64 / frames[0].valid_count() as f64).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let t = truth_set();
        let s = pose_errors(&t, &t, [1.0; 3]).unwrap();
        let mut buf = Vec::new();
        write_errors_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + t.len());
        assert!(text.starts_with("frame,"));
    }

    proptest! {
        #[test]
        fn prop_gauge_invariance_under_common_left_transform(
            tx in -5f64..5.0, ty in -5f64..5.0, tz in -5f64..5.0,
            wx in -0.4f64..0.4, wy in -0.4f64..0.4, wz in -0.4f64..0.4,
        ) {
            let t = truth_set();
            let est = perturb_poses(&t, 2.0, 2.0, [1.0; 3], 7);
            let base = pose_errors(&est, &t, [1.0; 3]).unwrap();
            let g = Pose::from_xi(Vector6::new(tx, ty, tz, wx, wy, wz));
            let est_g = PoseSet {
                poses: est.poses.iter().map(|p| g.compose(p)).collect(),
                anchored: est.anchored.clone(),
            };
            let t_g = PoseSet {
                poses: t.poses.iter().map(|p| g.compose(p)).collect(),
                anchored: t.anchored.clone(),
            };
            let moved = pose_errors(&est_g, &t_g, [1.0; 3]).unwrap();
            prop_assert!((moved.mae_translation - base.mae_translation).abs() < 1e-9);
            prop_assert!((moved.mae_rotation - base.mae_rotation).abs() < 1e-9);
        }
    }
}
