//! Rigid-body transforms on SE(3): 6-vector Lie-algebra coordinates
//! (translation first, axis-angle rotation last), the closed-form
//! exponential/logarithm maps, point warping and the warp Jacobian for
//! left-multiplicative increments.
//!
//! Poses map world (panorama) coordinates to frame coordinates, both in
//! millimeters; voxel conversions live with the volumes.

use nalgebra::{Matrix3, Matrix4, Matrix3x6, Point3, Vector3, Vector6};

/// Angle below which Rodrigues terms switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

#[inline]
pub fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation and the SE(3) V-matrix coefficients for an
/// axis-angle vector.
fn rotation_and_v(omega: Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let k2 = k * k;
    let (a, b, c) = if theta < SMALL_ANGLE {
        // sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 to second order.
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let r = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    (r, v)
}

/// Exponential map: a 6-vector `(t, omega)` to a 4x4 rigid transform.
pub fn exp_map(xi: Vector6<f64>) -> Matrix4<f64> {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let omega = Vector3::new(xi[3], xi[4], xi[5]);
    let (r, v) = rotation_and_v(omega);
    let t = v * rho;
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

/// Logarithm map, the inverse of [`exp_map`]. Accurate for rotation
/// angles away from pi.
pub fn log_map(m: &Matrix4<f64>) -> Vector6<f64> {
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t = m.fixed_view::<3, 1>(0, 3).into_owned();
    let omega = log_rotation(&r);
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let k2 = k * k;
    // V^{-1} = I - k/2 + coeff * k^2.
    let coeff = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        let half = theta / 2.0;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k2 * coeff;
    let rho = v_inv * t;
    Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z)
}

fn log_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < SMALL_ANGLE {
        return vee * 0.5;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near pi the sine formula degenerates; recover the axis from the
        // diagonal of R = I + 2 sin^2(t/2) (aa^T - I) ~= 2 aa^T - I.
        let mut axis = Vector3::new(
            ((r[(0, 0)] + 1.0) * 0.5).max(0.0).sqrt(),
            ((r[(1, 1)] + 1.0) * 0.5).max(0.0).sqrt(),
            ((r[(2, 2)] + 1.0) * 0.5).max(0.0).sqrt(),
        );
        // Fix signs against the off-diagonal sums.
        if r[(0, 1)] + r[(1, 0)] < 0.0 {
            axis.y = -axis.y;
        }
        if r[(0, 2)] + r[(2, 0)] < 0.0 {
            axis.z = -axis.z;
        }
        // Keep the convention consistent with the vee part when usable.
        if vee.x < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

/// A rigid pose with cached rotation/translation realization of `exp(xi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    xi: Vector6<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            xi: Vector6::zeros(),
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn from_xi(xi: Vector6<f64>) -> Self {
        let m = exp_map(xi);
        Pose {
            xi,
            r: m.fixed_view::<3, 3>(0, 0).into_owned(),
            t: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// From an explicit rigid matrix; the coordinates are recovered by the
    /// logarithm map.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let xi = log_map(m);
        Pose {
            xi,
            r: m.fixed_view::<3, 3>(0, 0).into_owned(),
            t: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    pub fn xi(&self) -> Vector6<f64> {
        self.xi
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.t
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    /// Warp a 3D point (homogeneous conversion is internal).
    #[inline]
    pub fn apply(&self, p: Point3<f64>) -> Point3<f64> {
        Point3::from(self.r * p.coords + self.t)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        let t = -(rt * self.t);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Pose::from_matrix(&m)
    }

    /// `self . other` as matrices (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::from_matrix(&(self.matrix() * other.matrix()))
    }

    /// Jacobian of the warped point w.r.t. a left-multiplicative increment
    /// delta: `exp(delta) . T` moves `T p` by `delta_t + delta_w x (T p)`,
    /// giving the closed form `[I | -skew(T p)]`.
    pub fn warp_jacobian(&self, p: Point3<f64>) -> Matrix3x6<f64> {
        let q = self.apply(p);
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(q.coords)));
        j
    }

    /// Left-multiplicative update: `T <- exp(delta) . T`, coordinates
    /// refreshed from the logarithm of the product.
    pub fn apply_increment(&self, delta: Vector6<f64>) -> Pose {
        Pose::from_matrix(&(exp_map(delta) * self.matrix()))
    }
}

/// An ordered set of per-frame poses with gauge-fixing flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSet {
    pub poses: Vec<Pose>,
    pub anchored: Vec<bool>,
}

impl PoseSet {
    /// All frames free except frame 0, the default gauge fix.
    pub fn with_first_anchored(poses: Vec<Pose>) -> Self {
        let mut anchored = vec![false; poses.len()];
        if !anchored.is_empty() {
            anchored[0] = true;
        }
        PoseSet { poses, anchored }
    }

    pub fn identities(n: usize) -> Self {
        PoseSet::with_first_anchored((0..n).map(|_| Pose::identity()).collect())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn anchored_count(&self) -> usize {
        self.anchored.iter().filter(|&&a| a).count()
    }

    /// Map each frame to its dense variable block, `None` when anchored.
    pub fn variable_slots(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.anchored
            .iter()
            .map(|&a| {
                if a {
                    None
                } else {
                    let s = next;
                    next += 1;
                    Some(s)
                }
            })
            .collect()
    }

    pub fn free_count(&self) -> usize {
        self.len() - self.anchored_count()
    }
}

/// Rotation matrix from ZYX (yaw-pitch-roll) Euler angles:
/// `R = Rz(yaw) . Ry(pitch) . Rx(roll)`.
pub fn rotation_from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    let (sa, ca) = roll.sin_cos();
    let (sb, cb) = pitch.sin_cos();
    let (sc, cc) = yaw.sin_cos();
    Matrix3::new(
        cc * cb,
        cc * sb * sa - sc * ca,
        cc * sb * ca + sc * sa,
        sc * cb,
        sc * sb * sa + cc * ca,
        sc * sb * ca - cc * sa,
        -sb,
        cb * sa,
        cb * ca,
    )
}

/// ZYX Euler angles `(roll, pitch, yaw)` of a rotation matrix; valid away
/// from the |pitch| = pi/2 gimbal lock.
pub fn euler_zyx_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}
