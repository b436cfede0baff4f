//! Gauss-Newton driver for simultaneous registration.
//!
//! Both solve modes share one iteration pipeline and differ only in how
//! the right-hand side is assembled:
//!
//! * joint mode ("dba") carries panorama intensities as unknowns and
//!   updates them each step from the eliminated pose solution;
//! * reduced mode ("dsr") never forms intensities — eliminating the
//!   diagonal intensity block leaves a pose-only system whose right-hand
//!   side depends only on the local intensities and their per-voxel
//!   means.
//!
//! The two produce identical pose iterates: the intensity part of the
//! residual lies in the column space of the intensity Jacobian, so its
//! contribution to the reduced right-hand side cancels exactly. A runtime
//! diagnostic measures that cancellation every iteration, and the
//! reported objective is always evaluated at the per-voxel means (the
//! conditional optimum), which makes the two modes directly comparable
//! iteration by iteration.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residuals::{assemble, build_observations, objective, BlockSystem, ObservationTable};
use crate::se3::PoseSet;
use crate::volume::{fuse, CountVolume, PanoramaGrid, Volume3};

/// Solve mode selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Reduced pose-only iteration.
    Dsr,
    /// Joint poses + panorama intensities.
    Dba,
}

/// Initial pose handed to each pairwise step of the sequential baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequentialInit {
    /// Previous solved pose composed with the inter-frame initial guess.
    Chained,
    /// The frame's own initial pose, as given.
    AsGiven,
}

/// Solver configuration shared by all registration modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Iteration budget per pyramid level.
    pub max_iters: usize,
    pub pyramid_levels: usize,
    /// Stop when the relative objective decrease falls below this.
    pub rel_tol: f64,
    /// Stop when the largest per-frame increment norm falls below this.
    pub step_tol: f64,
    /// Tikhonov term on the reduced pose Hessian, relative to its mean
    /// diagonal. Never applied to the intensity block.
    pub damping: f64,
    /// Halve the step (up to 8 times) until the objective decreases.
    pub backtracking: bool,
    /// Panorama bounding-box margin, voxels.
    pub margin_voxels: usize,
    /// Re-fuse the panorama intensities at the start of every joint-mode
    /// iteration instead of letting the intensity update evolve them.
    pub refuse_intensities: bool,
    /// Leave single-observation voxels out of the pose system; their net
    /// contribution to the reduced system is identically zero.
    pub skip_single_observations: bool,
    /// Pairwise initialization policy of the sequential baseline.
    pub sequential_init: SequentialInit,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 50,
            pyramid_levels: 3,
            rel_tol: 1e-6,
            step_tol: 1e-6,
            damping: 1e-6,
            backtracking: true,
            margin_voxels: 2,
            refuse_intensities: false,
            skip_single_observations: true,
            sequential_init: SequentialInit::Chained,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if self.pyramid_levels < 1 {
            return Err(Error::InvalidConfig("pyramid_levels must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) || !(self.step_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.damping < 0.0 {
            return Err(Error::InvalidConfig("damping must be non-negative".into()));
        }
        Ok(())
    }
}

/// Why a pyramid level stopped iterating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    ObjectiveTol,
    StepTol,
    LineSearchExhausted,
    MaxIters,
}

/// One accepted iteration (or the level's starting state at `iter` 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub level: usize,
    pub iter: usize,
    /// Sum of squared differences at the per-voxel mean intensities.
    pub objective: f64,
    /// Largest per-frame increment norm of the accepted step.
    pub step_norm: f64,
    /// Relative projection-identity residual (see
    /// [`projection_identity_residual`]).
    pub projection_identity: f64,
    pub observations: usize,
    pub active_voxels: usize,
    pub wall_ms: f64,
}

/// Result of a solve: the trace, the final poses and the fused panorama.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub mode: Mode,
    pub iterations: Vec<IterationRecord>,
    pub stop_reasons: Vec<(usize, StopReason)>,
    pub poses: PoseSet,
    pub converged: bool,
    pub panorama: Volume3,
    pub counts: CountVolume,
}

impl SolveReport {
    /// Objective of the last accepted iteration.
    pub fn final_objective(&self) -> f64 {
        self.iterations.last().map(|r| r.objective).unwrap_or(f64::NAN)
    }
}

/// Reduced pose-only solve.
pub fn solve_dsr(
    frames: &[Volume3],
    initial: &PoseSet,
    grid: &PanoramaGrid,
    config: &SolverConfig,
) -> Result<SolveReport> {
    solve(Mode::Dsr, frames, initial, grid, config)
}

/// Joint poses + intensities solve.
pub fn solve_dba(
    frames: &[Volume3],
    initial: &PoseSet,
    grid: &PanoramaGrid,
    config: &SolverConfig,
) -> Result<SolveReport> {
    solve(Mode::Dba, frames, initial, grid, config)
}

pub fn solve(
    mode: Mode,
    frames: &[Volume3],
    initial: &PoseSet,
    grid: &PanoramaGrid,
    config: &SolverConfig,
) -> Result<SolveReport> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(Error::InvalidConfig(
            "simultaneous registration needs at least 2 frames".into(),
        ));
    }
    if frames.len() != initial.len() {
        return Err(Error::LengthMismatch(format!(
            "{} frames vs {} poses",
            frames.len(),
            initial.len()
        )));
    }
    if initial.anchored_count() == 0 {
        return Err(Error::InvalidConfig(
            "at least one pose must be anchored to fix the gauge".into(),
        ));
    }

    let pyramids: Vec<Vec<Volume3>> = frames
        .iter()
        .map(|f| f.build_pyramid(config.pyramid_levels))
        .collect::<Result<_>>()?;

    let t0 = Instant::now();
    let mut poses = initial.clone();
    let mut iterations = Vec::new();
    let mut stop_reasons = Vec::new();

    for level in (0..config.pyramid_levels).rev() {
        let level_frames: Vec<Volume3> =
            pyramids.iter().map(|p| p[level].clone()).collect();
        // Gradients come from a once-smoothed copy of the level data;
        // raw central differences at noise levels around std 25 are noise
        // dominated and bias the stationary point.
        let gradients = level_frames
            .iter()
            .map(|f| f.smoothed().gradient_field())
            .collect::<Result<Vec<_>>>()?;
        let level_grid = grid.at_level(level);

        let mut obs = build_observations(&level_frames, &gradients, &poses, &level_grid)?;
        // Panorama intensities start at the conditional optimum, the
        // per-voxel means of the observed local intensities.
        let mut m = obs.means();
        let mut obj = objective(&obs, &m);
        iterations.push(IterationRecord {
            level,
            iter: 0,
            objective: obj,
            step_norm: 0.0,
            projection_identity: projection_identity_residual(&obs, &m),
            observations: obs.n_entries(),
            active_voxels: obs.n_active(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        let mut reason = StopReason::MaxIters;
        for iter in 1..=config.max_iters {
            let m_for_assembly: Option<&[f64]> = match mode {
                Mode::Dsr => None,
                Mode::Dba => Some(&m),
            };
            let blocks = assemble(&obs, m_for_assembly, config.skip_single_observations);
            let (reduced, rhs) = schur_reduce(&blocks, &obs, config.damping);
            let delta = reduced
                .cholesky()
                .ok_or(Error::GaugeUnderdetermined)?
                .solve(&rhs);
            let step_norm = max_block_norm(&delta);
            if step_norm < config.step_tol {
                reason = StopReason::StepTol;
                break;
            }
            let delta_m = match mode {
                Mode::Dba => Some(intensity_update(&blocks, &obs, &delta)),
                Mode::Dsr => None,
            };

            // Backtracking on the step scale. The visibility set moves
            // with the poses, so the raw sum jumps discretely as boundary
            // observations churn; acceptance therefore compares the
            // per-observation mean (with a coverage guard), which both
            // modes evaluate identically.
            let mut accepted = None;
            let mut alpha = 1.0;
            let tries = if config.backtracking { 9 } else { 1 };
            for _ in 0..tries {
                let cand_poses = step_poses(&poses, &delta, alpha);
                match build_observations(&level_frames, &gradients, &cand_poses, &level_grid) {
                    Ok(cand_obs) => {
                        let cand_means = cand_obs.means();
                        let cand_obj = objective(&cand_obs, &cand_means);
                        let improves = cand_obj * (obs.n_entries() as f64)
                            < obj * (cand_obs.n_entries() as f64);
                        let keeps_coverage = 2 * cand_obs.n_entries() >= obs.n_entries();
                        if (improves && keeps_coverage) || !config.backtracking {
                            accepted = Some((cand_poses, cand_obs, cand_means, cand_obj));
                            break;
                        }
                    }
                    Err(Error::NoOverlap) => {}
                    Err(e) => return Err(e),
                }
                alpha *= 0.5;
            }
            let Some((new_poses, new_obs, new_means, new_obj)) = accepted else {
                reason = StopReason::LineSearchExhausted;
                break;
            };

            // Joint mode: carry the intensity state to the new active set.
            let new_m = match (&delta_m, config.refuse_intensities) {
                (Some(dm), false) => remap_intensities(&obs, &m, dm, alpha, &new_obs, &new_means),
                _ => new_means.clone(),
            };

            let prev_mean = obj / obs.n_entries() as f64;
            poses = new_poses;
            obs = new_obs;
            m = new_m;
            obj = new_obj;
            iterations.push(IterationRecord {
                level,
                iter,
                objective: obj,
                step_norm: alpha * step_norm,
                projection_identity: projection_identity_residual(&obs, &m),
                observations: obs.n_entries(),
                active_voxels: obs.n_active(),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            let _ = new_means;
            let mean_obj = obj / obs.n_entries() as f64;
            if (prev_mean - mean_obj) < config.rel_tol * prev_mean.max(f64::MIN_POSITIVE) {
                reason = StopReason::ObjectiveTol;
                break;
            }
        }
        stop_reasons.push((level, reason));
    }

    let converged = stop_reasons
        .last()
        .map(|&(_, r)| r != StopReason::MaxIters)
        .unwrap_or(false);
    let finest: Vec<Volume3> = pyramids.iter().map(|p| p[0].clone()).collect();
    let (panorama, counts) = fuse(&finest, &poses.poses, &grid.at_level(0))?;
    Ok(SolveReport {
        mode,
        iterations,
        stop_reasons,
        poses,
        converged,
        panorama,
        counts,
    })
}

/// Apply `alpha * delta` to every non-anchored pose.
fn step_poses(poses: &PoseSet, delta: &DVector<f64>, alpha: f64) -> PoseSet {
    let slots = poses.variable_slots();
    let new = poses
        .poses
        .iter()
        .zip(&slots)
        .map(|(p, slot)| match slot {
            None => p.clone(),
            Some(v) => {
                let d = Vector6::from_column_slice(&delta.as_slice()[6 * v..6 * v + 6]);
                p.apply_increment(d * alpha)
            }
        })
        .collect();
    PoseSet {
        poses: new,
        anchored: poses.anchored.clone(),
    }
}

fn max_block_norm(delta: &DVector<f64>) -> f64 {
    delta
        .as_slice()
        .chunks(6)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Carry joint-mode intensities across an accepted step: voxels present in
/// both active sets take the scaled intensity update, newly observed
/// voxels start at their new mean, vanished voxels are dropped.
fn remap_intensities(
    old: &ObservationTable,
    m: &[f64],
    delta_m: &[f64],
    alpha: f64,
    new: &ObservationTable,
    new_means: &[f64],
) -> Vec<f64> {
    new.active_voxels()
        .iter()
        .enumerate()
        .map(|(s_new, &voxel)| match old.slot_of(voxel) {
            Some(s_old) => m[s_old] + alpha * delta_m[s_old],
            None => new_means[s_new],
        })
        .collect()
}

/// Eliminate the intensity block by streamed per-voxel rank-1 downdates:
/// for voxel j with count n and summed (scattered) Jacobian rows s_j,
/// subtract `s_j s_j^T / n` from the pose Gram matrix and
/// `s_j b_m[j] / n` from the right-hand side. Damping is added to the
/// reduced diagonal afterwards, scaled by the mean diagonal.
pub fn schur_reduce(
    blocks: &BlockSystem,
    obs: &ObservationTable,
    damping: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let nv = obs.n_vars();
    let mut h = blocks.h_xx.clone();
    let mut rhs = blocks.b_x.clone();
    let var_slots = obs.var_slots();
    // (variable block, row) pairs of one voxel; frames observe a voxel at
    // most once so there are at most n_frames of them.
    let mut parts: Vec<(usize, [f64; 6])> = Vec::with_capacity(obs.n_frames());
    for s in 0..obs.n_active() {
        let group = obs.group(s);
        let n = group.len();
        debug_assert!(n >= 1, "active voxel without observations");
        if n == 1 && !blocks.includes_single {
            continue;
        }
        let inv_n = 1.0 / n as f64;
        // Pre-scale rows by sqrt(1/n) so the downdate products commute
        // and the reduced matrix stays symmetric to the last bit.
        let root = inv_n.sqrt();
        parts.clear();
        for o in group {
            if let Some(v) = var_slots[o.frame as usize] {
                let mut r = o.jac_pose;
                for x in &mut r {
                    *x *= root;
                }
                parts.push((v, r));
            }
        }
        if parts.is_empty() {
            continue;
        }
        for (va, ra) in &parts {
            for (vb, rb) in &parts {
                let (ba, bb) = (6 * va, 6 * vb);
                for a in 0..6 {
                    for b in 0..6 {
                        h[(ba + a, bb + b)] -= ra[a] * rb[b];
                    }
                }
            }
            let f = blocks.b_m[s] * inv_n / root;
            for a in 0..6 {
                rhs[6 * va + a] -= ra[a] * f;
            }
        }
    }
    if damping > 0.0 && nv > 0 {
        let lambda = damping * h.trace() / nv as f64;
        for i in 0..nv {
            h[(i, i)] += lambda;
        }
    }
    (h, rhs)
}

/// Per-voxel intensity step given the pose step: division by the count
/// diagonal, `delta_m[j] = (b_m[j] - s_j^T delta) / n_j`.
pub fn intensity_update(
    blocks: &BlockSystem,
    obs: &ObservationTable,
    delta: &DVector<f64>,
) -> Vec<f64> {
    let var_slots = obs.var_slots();
    (0..obs.n_active())
        .map(|s| {
            let group = obs.group(s);
            let mut coupling = 0.0;
            for o in group {
                if let Some(v) = var_slots[o.frame as usize] {
                    for a in 0..6 {
                        coupling += o.jac_pose[a] * delta[6 * v + a];
                    }
                }
            }
            (blocks.b_m[s] - coupling) / group.len() as f64
        })
        .collect()
}

/// Relative cancellation residual of the panorama part of the reduced
/// right-hand side.
///
/// The scattered intensities `A` (one per observation, the voxel's
/// panorama value) lie in the column space of the intensity Jacobian, so
/// `J_xi^T (A - P A)` — with `P` the per-voxel averaging projector — is
/// zero up to rounding. Returns `||J_xi^T (A - P A)||_inf` normalized by
/// `||J_xi^T A||_inf`; a wrong projector grouping makes it large.
pub fn projection_identity_residual(obs: &ObservationTable, m: &[f64]) -> f64 {
    let natural: Vec<u32> = (0..obs.n_active() as u32).collect();
    projection_identity_residual_grouped(obs, m, |slot, _| natural[slot])
}

/// Grouping-parameterized variant of [`projection_identity_residual`];
/// the closure maps (active slot, index within the group) to the group
/// used for averaging. Exists so tests can corrupt the grouping.
pub fn projection_identity_residual_grouped(
    obs: &ObservationTable,
    m: &[f64],
    group_of: impl Fn(usize, usize) -> u32,
) -> f64 {
    assert_eq!(m.len(), obs.n_active());
    let nv = obs.n_vars();
    if nv == 0 {
        return 0.0;
    }
    // Group sums of A under the supplied grouping.
    let mut sums = vec![0.0f64; obs.n_active()];
    let mut counts = vec![0u32; obs.n_active()];
    for s in 0..obs.n_active() {
        for (k, _) in obs.group(s).iter().enumerate() {
            let g = group_of(s, k) as usize;
            sums[g] += m[s];
            counts[g] += 1;
        }
    }
    let mut num = DVector::<f64>::zeros(nv);
    let mut den = DVector::<f64>::zeros(nv);
    for s in 0..obs.n_active() {
        for (k, o) in obs.group(s).iter().enumerate() {
            let Some(v) = obs.var_slots()[o.frame as usize] else {
                continue;
            };
            let g = group_of(s, k) as usize;
            let pa = sums[g] / counts[g] as f64;
            let a = m[s];
            for i in 0..6 {
                num[6 * v + i] += o.jac_pose[i] * (a - pa);
                den[6 * v + i] += o.jac_pose[i] * a;
            }
        }
    }
    num.amax() / den.amax().max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residuals::build_observations;
    use crate::se3::Pose;
    use crate::sim::{make_phantom, PhantomKind};
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(
        frames: &[Volume3],
        poses: &PoseSet,
        grid: &PanoramaGrid,
    ) -> ObservationTable {
        let grads: Vec<_> = frames.iter().map(|f| f.gradient_field().unwrap()).collect();
        build_observations(frames, &grads, poses, grid).unwrap()
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..255.0)).collect();
        Volume3::new(dims, [1.0; 3], [0.0; 3], data).unwrap()
    }

    fn micro_problem(seed: u64, n_frames: usize) -> (Vec<Volume3>, PoseSet, PanoramaGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [
            rng.gen_range(8..=12),
            rng.gen_range(8..=12),
            rng.gen_range(8..=12),
        ];
        let frames: Vec<Volume3> = (0..n_frames)
            .map(|i| random_volume(dims, seed.wrapping_mul(31).wrapping_add(i as u64)))
            .collect();
        let poses = PoseSet::with_first_anchored(
            (0..n_frames)
                .map(|i| {
                    if i == 0 {
                        Pose::identity()
                    } else {
                        Pose::from_xi(Vector6::new(
                            rng.gen_range(-1.5..1.5),
                            rng.gen_range(-1.5..1.5),
                            rng.gen_range(-1.5..1.5),
                            rng.gen_range(-0.1..0.1),
                            rng.gen_range(-0.1..0.1),
                            rng.gen_range(-0.1..0.1),
                        ))
                    }
                })
                .collect(),
        );
        let grid = PanoramaGrid::enclose(&frames, &poses.poses, 1).unwrap();
        (frames, poses, grid)
    }

    /// Dense oracle of the full block system solved by explicit
    /// elimination; returns the pose step.
    fn dense_delta(obs: &ObservationTable, m: &[f64], damping: f64) -> DVector<f64> {
        let nv = obs.n_vars();
        let n = obs.n_active();
        let rows = obs.n_entries();
        let mut j = DMatrix::<f64>::zeros(rows, nv + n);
        let mut e = DVector::<f64>::zeros(rows);
        let mut row = 0;
        for s in 0..n {
            for o in obs.group(s) {
                if let Some(var) = obs.var_slots()[o.frame as usize] {
                    for a in 0..6 {
                        j[(row, 6 * var + a)] = o.jac_pose[a];
                    }
                }
                j[(row, nv + s)] = 1.0;
                e[row] = m[s] - o.intensity;
                row += 1;
            }
        }
        let h = j.transpose() * &j;
        let b = -(j.transpose() * e);
        let h_xx = h.view((0, 0), (nv, nv)).into_owned();
        let h_xm = h.view((0, nv), (nv, n)).into_owned();
        let h_mm_inv = DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            (0..n).map(|s| 1.0 / h[(nv + s, nv + s)]),
        ));
        let mut s_mat = h_xx - &h_xm * &h_mm_inv * h_xm.transpose();
        let rhs = b.rows(0, nv) - &h_xm * &h_mm_inv * b.rows(nv, n);
        let lambda = damping * s_mat.trace() / nv as f64;
        for i in 0..nv {
            s_mat[(i, i)] += lambda;
        }
        s_mat.cholesky().unwrap().solve(&rhs)
    }

    #[test]
    fn schur_single_voxel_single_frame_cancels() {
        // One observation per voxel everywhere (single free frame on its
        // own grid): reduced rhs must be exactly zero and the reduced
        // matrix must equal H_xx minus the self-downdates.
        let vol = random_volume([6, 6, 6], 40);
        let poses = PoseSet {
            poses: vec![Pose::identity()],
            anchored: vec![false],
        };
        let grid = PanoramaGrid {
            dims: vol.dims(),
            spacing: vol.spacing(),
            origin: vol.origin(),
            margin_voxels: 0,
        };
        let obs = table(std::slice::from_ref(&vol), &poses, &grid);
        assert!(obs.counts().iter().all(|&c| c == 1));
        let blocks = assemble(&obs, None, false);
        let (h, rhs) = schur_reduce(&blocks, &obs, 0.0);
        assert!(rhs.amax() < 1e-10, "no information left: {}", rhs.amax());
        // Every downdate removes the single row's outer product exactly.
        assert!(h.norm() / blocks.h_xx.norm() < 1e-12);
        // And the skip flag gives the identical result.
        let blocks_skip = assemble(&obs, None, true);
        let (h2, rhs2) = schur_reduce(&blocks_skip, &obs, 0.0);
        assert!((h2.norm() - 0.0).abs() < 1e-12 && rhs2.amax() < 1e-12);
    }

    #[test]
    fn schur_matches_dense_oracle_on_micro_problems() {
        for seed in 0..20 {
            let n_frames = 2 + (seed % 2) as usize;
            let (frames, poses, grid) = micro_problem(100 + seed, n_frames);
            let obs = table(&frames, &poses, &grid);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<f64> = (0..obs.n_active())
                .map(|_| rng.gen_range(0.0..255.0))
                .collect();
            let damping = 1e-6;
            let blocks = assemble(&obs, Some(&m), false);
            let (h, rhs) = schur_reduce(&blocks, &obs, damping);
            let delta = h.clone().cholesky().unwrap().solve(&rhs);
            let oracle = dense_delta(&obs, &m, damping);
            let rel = (&delta - &oracle).norm() / oracle.norm().max(1e-12);
            assert!(rel < 1e-8, "seed {seed}: rel {rel:.2e}");
            // Count diagonal is the exact voxel histogram.
            let counts = obs.counts();
            assert_eq!(blocks.h_mm_diag, counts);
            // Reduced matrix is symmetric PSD (up to rounding at scale).
            let scale = h.norm();
            assert!((&h - h.transpose()).norm() / scale < 1e-12);
            let eig = h.clone().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&l| l / scale > -1e-8));
        }
    }

    #[test]
    fn skip_single_flag_changes_nothing() {
        let (frames, poses, grid) = micro_problem(300, 3);
        let obs = table(&frames, &poses, &grid);
        let m = obs.means();
        for mode_m in [Some(m.as_slice()), None] {
            let b_all = assemble(&obs, mode_m, false);
            let b_skip = assemble(&obs, mode_m, true);
            let (h1, r1) = schur_reduce(&b_all, &obs, 1e-6);
            let (h2, r2) = schur_reduce(&b_skip, &obs, 1e-6);
            assert!((&h1 - &h2).norm() / h1.norm() < 1e-10);
            assert!((&r1 - &r2).norm() <= 1e-10 * r1.norm().max(1.0));
        }
    }

    #[test]
    fn intensity_update_stationary_at_means() {
        let (frames, poses, grid) = micro_problem(400, 2);
        let obs = table(&frames, &poses, &grid);
        let means = obs.means();
        let blocks = assemble(&obs, Some(&means), false);
        let zero = DVector::zeros(obs.n_vars());
        let dm = intensity_update(&blocks, &obs, &zero);
        assert!(dm.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn intensity_update_moves_to_mean_hand_case() {
        // One voxel, two observations 10 and 20, M = 0, zero pose step:
        // the update is +15.
        let a = Volume3::filled([4, 4, 4], [1.0; 3], [0.0; 3], 10.0);
        let b = Volume3::filled([4, 4, 4], [1.0; 3], [0.0; 3], 20.0);
        let grid = PanoramaGrid {
            dims: [1, 1, 1],
            spacing: [1.0; 3],
            origin: [1.5, 1.5, 1.5],
            margin_voxels: 0,
        };
        let poses = PoseSet::with_first_anchored(vec![Pose::identity(), Pose::identity()]);
        let obs = table(&[a, b], &poses, &grid);
        let blocks = assemble(&obs, Some(&[0.0]), false);
        let dm = intensity_update(&blocks, &obs, &DVector::zeros(obs.n_vars()));
        assert_eq!(dm.len(), 1);
        assert!((dm[0] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn intensity_update_matches_dense_oracle() {
        let (frames, poses, grid) = micro_problem(500, 2);
        let obs = table(&frames, &poses, &grid);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m: Vec<f64> = (0..obs.n_active())
            .map(|_| rng.gen_range(0.0..255.0))
            .collect();
        let blocks = assemble(&obs, Some(&m), false);
        let (h, rhs) = schur_reduce(&blocks, &obs, 1e-6);
        let delta = h.cholesky().unwrap().solve(&rhs);
        let dm = intensity_update(&blocks, &obs, &delta);
        // Dense check of H_mm dm = b_m - H_xm^T delta.
        let nv = obs.n_vars();
        let n = obs.n_active();
        let mut h_xm = DMatrix::<f64>::zeros(nv, n);
        for s in 0..n {
            for o in obs.group(s) {
                if let Some(v) = obs.var_slots()[o.frame as usize] {
                    for a in 0..6 {
                        h_xm[(6 * v + a, s)] += o.jac_pose[a];
                    }
                }
            }
        }
        let rhs_m = DVector::from_column_slice(&blocks.b_m) - h_xm.transpose() * &delta;
        for s in 0..n {
            let want = rhs_m[s] / blocks.h_mm_diag[s] as f64;
            assert!((dm[s] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_identity_is_tiny_and_mutation_is_detected() {
        let (frames, poses, grid) = micro_problem(600, 3);
        let obs = table(&frames, &poses, &grid);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m: Vec<f64> = (0..obs.n_active())
            .map(|_| rng.gen_range(0.0..255.0))
            .collect();
        let clean = projection_identity_residual(&obs, &m);
        assert!(clean < 1e-12, "clean residual {clean:.2e}");
        // Constant panorama: exactly zero even across wrong groupings of
        // equal means, so corrupt with the random one.
        let constant = vec![42.0; obs.n_active()];
        assert!(projection_identity_residual(&obs, &constant) < 1e-14);
        // Corrupted grouping: merge adjacent voxels so the averages mix
        // intensities that belong to different panorama voxels.
        let corrupted =
            projection_identity_residual_grouped(&obs, &m, |slot, _| slot as u32 / 2);
        assert!(corrupted > 1e-3, "mutation must be visible: {corrupted:.2e}");
    }

    fn smooth_sequence(
        seed: u64,
        n_frames: usize,
        shift: Vector6<f64>,
    ) -> (Vec<Volume3>, PoseSet, PanoramaGrid) {
        let src = make_phantom([40, 40, 40], PhantomKind::SmoothBlobs, seed).unwrap();
        let fov = crate::sim::FovSpec {
            dims: [28, 28, 28],
            spacing: None,
            frustum: None,
        };
        let mut poses = vec![Pose::identity()];
        for i in 1..n_frames {
            poses.push(Pose::from_xi(shift * i as f64));
        }
        let frames: Vec<Volume3> = poses
            .iter()
            .map(|p| crate::sim::extract_frame(&src, p, &fov).unwrap())
            .collect();
        let set = PoseSet::with_first_anchored(poses);
        let grid = PanoramaGrid::enclose(&frames, &set.poses, 2).unwrap();
        (frames, set, grid)
    }

    #[test]
    fn aligned_frames_converge_immediately() {
        let (frames, truth, grid) = smooth_sequence(900, 2, Vector6::zeros());
        let config = SolverConfig {
            pyramid_levels: 2,
            ..SolverConfig::default()
        };
        let report = solve_dsr(&frames, &truth, &grid, &config).unwrap();
        assert!(report.converged);
        // Noise-free identical frames: objective stays at zero, and no
        // level needs more than a couple of iterations.
        assert!(report.final_objective() < 1e-6);
        for (_, reason) in &report.stop_reasons {
            assert_ne!(*reason, StopReason::MaxIters);
        }
        let per_level: Vec<usize> = report
            .stop_reasons
            .iter()
            .map(|&(l, _)| report.iterations.iter().filter(|r| r.level == l && r.iter > 0).count())
            .collect();
        assert!(per_level.iter().all(|&c| c <= 2), "{per_level:?}");
        // The anchored pose never moves.
        assert_eq!(report.poses.poses[0].matrix(), truth.poses[0].matrix());
    }

    #[test]
    fn integer_shift_is_recovered() {
        let (frames, truth, grid) =
            smooth_sequence(901, 2, Vector6::new(2.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        // Start both at identity: frame 1 is off by 2 voxels.
        let init = PoseSet::with_first_anchored(vec![Pose::identity(), Pose::identity()]);
        let config = SolverConfig {
            pyramid_levels: 2,
            ..SolverConfig::default()
        };
        let report = solve_dsr(&frames, &init, &grid, &config).unwrap();
        let got = report.poses.poses[1].xi();
        let want = truth.poses[1].xi();
        let err = (got - want).norm();
        assert!(err < 0.1, "recovered {got:?} want {want:?}");
    }

    #[test]
    fn dsr_and_dba_iterate_identically() {
        let (frames, truth, grid) =
            smooth_sequence(902, 3, Vector6::new(1.5, -1.0, 0.5, 0.02, -0.01, 0.03));
        let init = crate::sim::perturb_poses(&truth, 1.5, 1.5, [1.0; 3], 5);
        for refuse in [false, true] {
            let config = SolverConfig {
                pyramid_levels: 2,
                max_iters: 12,
                refuse_intensities: refuse,
                ..SolverConfig::default()
            };
            let dsr = solve_dsr(&frames, &init, &grid, &config).unwrap();
            let dba = solve_dba(&frames, &init, &grid, &config).unwrap();
            assert_eq!(dsr.iterations.len(), dba.iterations.len(), "refuse={refuse}");
            for (a, b) in dsr.iterations.iter().zip(&dba.iterations) {
                assert_eq!((a.level, a.iter), (b.level, b.iter));
                let rel = (a.objective - b.objective).abs() / a.objective.max(1e-12);
                assert!(rel < 1e-8, "objective mismatch {rel:.2e} (refuse={refuse})");
                assert!(a.projection_identity < 1e-8);
                assert!(b.projection_identity < 1e-8);
            }
            for (pa, pb) in dsr.poses.poses.iter().zip(&dba.poses.poses) {
                let d = (pa.xi() - pb.xi()).amax();
                assert!(d < 1e-8, "pose divergence {d:.2e} (refuse={refuse})");
            }
        }
    }

    #[test]
    fn objective_is_non_increasing_within_levels() {
        let (frames, truth, grid) =
            smooth_sequence(903, 3, Vector6::new(1.0, 1.5, -0.5, 0.03, 0.02, -0.02));
        let init = crate::sim::perturb_poses(&truth, 2.0, 2.0, [1.0; 3], 6);
        let config = SolverConfig {
            pyramid_levels: 2,
            ..SolverConfig::default()
        };
        let report = solve_dsr(&frames, &init, &grid, &config).unwrap();
        for w in report.iterations.windows(2) {
            if w[0].level == w[1].level {
                assert!(
                    w[1].objective <= w[0].objective * (1.0 + 1e-12),
                    "objective increased: {} -> {}",
                    w[0].objective,
                    w[1].objective
                );
            }
        }
    }

    #[test]
    fn anchored_pose_is_bitwise_stable() {
        let (frames, truth, grid) =
            smooth_sequence(904, 2, Vector6::new(0.8, -0.6, 0.4, 0.01, 0.02, -0.01));
        let init = crate::sim::perturb_poses(&truth, 1.0, 1.0, [1.0; 3], 7);
        let before = init.poses[0].matrix();
        let report = solve_dba(
            &frames,
            &init,
            &grid,
            &SolverConfig {
                pyramid_levels: 2,
                ..SolverConfig::default()
            },
        )
        .unwrap();
        assert_eq!(report.poses.poses[0].matrix(), before);
    }

    #[test]
    fn solve_rejects_bad_inputs() {
        let vol = random_volume([8, 8, 8], 77);
        let grid = PanoramaGrid {
            dims: [8, 8, 8],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            margin_voxels: 0,
        };
        let one = PoseSet::with_first_anchored(vec![Pose::identity()]);
        assert!(matches!(
            solve_dsr(std::slice::from_ref(&vol), &one, &grid, &SolverConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
        let mut unanchored = PoseSet::identities(2);
        unanchored.anchored = vec![false, false];
        assert!(matches!(
            solve_dsr(&[vol.clone(), vol.clone()], &unanchored, &grid, &SolverConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
    }
}
