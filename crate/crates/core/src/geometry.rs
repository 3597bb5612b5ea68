//! Camera poses, pinhole projection and pose information.
//!
//! Poses map world to camera, `X_c = R·p + t`. Pose increments are 6-vectors
//! `δ = (ω, ν)`, rotation first, applied on the right: `T ← T · exp(δ)`.
//! Measurement Jacobians are taken with respect to that increment at zero.

use nalgebra::{Cholesky, Matrix2, Matrix3, Matrix6, Rotation3, SMatrix, SymmetricEigen, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;
use crate::mih::PointId;

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Points closer than this to the image plane are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Damping added inside the logDet metric.
pub const DEFAULT_DAMPING: f64 = 1e-3;

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `exp` of an se(3) vector `(ω, ν)` as a rotation and translation.
pub fn se3_exp(delta: &Vector6<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    let theta = w.norm();
    let rot = Rotation3::new(w).into_inner();
    let k = skew(&w);
    let jl = if theta < 1e-8 {
        Matrix3::identity() + 0.5 * k + k * k / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity() + (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * (k * k)
    };
    (rot, jl * v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Panics if `rotation` is not a proper rotation to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let pose = Self { rotation, translation };
        assert!(pose.is_valid(), "rotation is not orthonormal with det +1");
        pose
    }

    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9 && (r.determinant() - 1.0).abs() < 1e-9
    }

    /// Camera at `eye` looking at `target`; camera y points down the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation,
            translation: -rotation * eye,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// `self · exp(δ)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        let (dr, dt) = se3_exp(delta);
        let rotation = Rotation3::from_matrix(&(self.rotation * dr)).into_inner();
        Self {
            rotation,
            translation: self.rotation * dt + self.translation,
        }
    }

    /// Relative rotation angle in radians.
    pub fn rotation_error(&self, other: &Self) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Distance between camera centres in metres.
    pub fn translation_error(&self, other: &Self) -> f64 {
        (self.camera_center() - other.camera_center()).norm()
    }

    /// Row-major `[R | t]`, 12 numbers.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for PinholeModel {
    fn default() -> Self {
        Self {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
        }
    }
}

impl PinholeModel {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0
    }

    /// Image extent implied by a centred principal point.
    pub fn image_size(&self) -> (f64, f64) {
        (2.0 * self.cx, 2.0 * self.cy)
    }

    pub fn in_image(&self, uv: &Vector2<f64>) -> bool {
        let (w, h) = self.image_size();
        uv.x >= 0.0 && uv.x < w && uv.y >= 0.0 && uv.y < h
    }

    pub fn project_camera(&self, pc: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if pc.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera(pc.z));
        }
        Ok(Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy))
    }

    pub fn unproject(&self, uv: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) / self.fx * depth, (uv.y - self.cy) / self.fy * depth, depth)
    }
}

/// `h(x, p)`: world point to pixel.
pub fn project(pose: &CameraPose, model: &PinholeModel, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    model.project_camera(&pose.transform(p))
}

/// Jacobian of [`project`] with respect to the right pose increment.
pub fn measurement_jacobian(pose: &CameraPose, model: &PinholeModel, p: &Vector3<f64>) -> Result<Matrix2x6, GeometryError> {
    let pc = pose.transform(p);
    if pc.z <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    let dproj = SMatrix::<f64, 2, 3>::new(
        model.fx * iz, 0.0, -model.fx * pc.x * iz2,
        0.0, model.fy * iz, -model.fy * pc.y * iz2,
    );
    let d_rot = -pose.rotation * skew(p);
    let mut h = Matrix2x6::zeros();
    h.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * d_rot));
    h.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dproj * pose.rotation));
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureMatch {
    pub point_id: PointId,
    pub world_point: Vector3<f64>,
    pub measurement: Vector2<f64>,
    pub residual_information: Matrix2<f64>,
}

impl FeatureMatch {
    /// Match with isotropic one-pixel noise, `Ω_r = I`.
    pub fn new(point_id: PointId, world_point: Vector3<f64>, measurement: Vector2<f64>) -> Self {
        Self::with_sigma(point_id, world_point, measurement, 1.0)
    }

    pub fn with_sigma(point_id: PointId, world_point: Vector3<f64>, measurement: Vector2<f64>, sigma_px: f64) -> Self {
        Self {
            point_id,
            world_point,
            measurement,
            residual_information: Matrix2::identity() / (sigma_px * sigma_px),
        }
    }

    pub fn residual(&self, pose: &CameraPose, model: &PinholeModel) -> Result<Vector2<f64>, GeometryError> {
        Ok(project(pose, model, &self.world_point)? - self.measurement)
    }

    /// Squared Mahalanobis reprojection error.
    pub fn chi2(&self, pose: &CameraPose, model: &PinholeModel) -> Result<f64, GeometryError> {
        let r = self.residual(pose, model)?;
        Ok((r.transpose() * self.residual_information * r)[(0, 0)])
    }
}

/// 6×6 pose information contributed by one or more matches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseInfoMatrix(pub Matrix6<f64>);

impl Default for PoseInfoMatrix {
    fn default() -> Self {
        Self(Matrix6::zeros())
    }
}

impl std::ops::AddAssign<&PoseInfoMatrix> for PoseInfoMatrix {
    fn add_assign(&mut self, rhs: &PoseInfoMatrix) {
        self.0 += rhs.0;
    }
}

impl PoseInfoMatrix {
    /// `log det(Ω + λI)` via Cholesky.
    pub fn logdet_damped(&self, damping: f64) -> f64 {
        logdet_damped(&self.0, damping)
    }
}

pub fn logdet_damped(info: &Matrix6<f64>, damping: f64) -> f64 {
    let m = info + Matrix6::identity() * damping;
    match Cholesky::new(m) {
        Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        // round-off pushed an eigenvalue below zero; clamp it at the damping
        None => SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .map(|e| e.max(damping).ln())
            .sum(),
    }
}

/// `Hᵀ Ω_r H` for one match.
pub fn pose_info_single(m: &FeatureMatch, pose: &CameraPose, model: &PinholeModel) -> Result<PoseInfoMatrix, GeometryError> {
    let h = measurement_jacobian(pose, model, &m.world_point)?;
    let mut info = h.transpose() * m.residual_information * h;
    info = (info + info.transpose()) * 0.5;
    Ok(PoseInfoMatrix(info))
}

/// `log det(Σ Ω_x(i) + λI)` over the matches that project in front of the
/// camera.
pub fn logdet_metric(matches: &[FeatureMatch], pose: &CameraPose, model: &PinholeModel, damping: f64) -> f64 {
    let mut sum = PoseInfoMatrix::default();
    for m in matches {
        if let Ok(info) = pose_info_single(m, pose, model) {
            sum += &info;
        }
    }
    sum.logdet_damped(damping)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GnOutcome {
    pub pose: CameraPose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// Smallest-to-largest eigenvalue ratio below which the normal equations
/// count as singular.
const SINGULAR_RATIO: f64 = 1e-10;

fn total_cost(matches: &[&FeatureMatch], pose: &CameraPose, model: &PinholeModel) -> Option<f64> {
    matches.iter().map(|m| m.chi2(pose, model).ok()).sum()
}

/// Minimizes `Σ ‖h(x, p_i) − z_i‖²_{Ω_r}` over the pose.
///
/// Steps that fail to lower the cost are halved up to eight times; if none
/// helps, the solver stops. It also stops when an accepted step lowers the
/// cost by less than `tol`.
pub fn gauss_newton_refine(
    initial: &CameraPose,
    model: &PinholeModel,
    matches: &[FeatureMatch],
    max_iters: usize,
    tol: f64,
) -> Result<GnOutcome, GeometryError> {
    let usable: Vec<&FeatureMatch> = matches
        .iter()
        .filter(|m| initial.transform(&m.world_point).z > MIN_DEPTH)
        .collect();
    if usable.len() < 3 {
        return Err(GeometryError::TooFewMatches(usable.len()));
    }
    let mut pose = *initial;
    let mut cost = total_cost(&usable, &pose, model).expect("all usable matches project");
    let initial_cost = cost;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let mut a = Matrix6::zeros();
        let mut b = Vector6::zeros();
        for m in &usable {
            let h = measurement_jacobian(&pose, model, &m.world_point)?;
            let r = m.residual(&pose, model)?;
            let ht_omega = h.transpose() * m.residual_information;
            a += ht_omega * h;
            b -= ht_omega * r;
        }
        let eig = SymmetricEigen::new(a).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
        let ratio = if hi > 0.0 { lo / hi } else { 0.0 };
        if ratio < SINGULAR_RATIO {
            return Err(GeometryError::Singular(ratio));
        }
        let Some(chol) = Cholesky::new(a) else {
            return Err(GeometryError::Singular(ratio));
        };
        let step = chol.solve(&b);
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=8 {
            let candidate = pose.retract(&(step * scale));
            if let Some(c) = total_cost(&usable, &candidate, model) {
                if c < cost {
                    accepted = Some((candidate, c));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((next, next_cost)) = accepted else {
            break;
        };
        let decrease = cost - next_cost;
        pose = next;
        cost = next_cost;
        iterations += 1;
        if decrease < tol {
            break;
        }
    }
    Ok(GnOutcome {
        pose,
        initial_cost,
        final_cost: cost,
        iterations,
    })
}
