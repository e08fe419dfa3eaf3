//! Turning per-reference relative poses into one absolute query pose.
//!
//! Relative poses `o_i` are the query camera expressed in reference `i`'s
//! camera frame (see [`crate::geom::relative_pose`]), known only up to
//! scale. Motion averaging back-projects each `o_i` into a world ray from
//! reference `i`'s center, intersects the rays in the least-squares sense,
//! and takes the rotation medoid of the candidates `R_{o_i} · R_i`. The
//! Umeyama route instead fits a similarity between predicted and known
//! reference centers and pushes the predicted query pose through it.

use nalgebra::{Matrix3, SymmetricEigen, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, Quaternion, Sim3, DIRECTION_EPS};

/// Normal matrices with a larger condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;
/// Minimum angle (radians) some pair of rays must span.
pub const MIN_RAY_ANGLE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        let n = direction.norm();
        if !(n > DIRECTION_EPS) || !n.is_finite() || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::precondition("ray needs a finite origin and nonzero direction"));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }

    pub fn distance_to(&self, p: &Vector3<f64>) -> f64 {
        let v = p - self.origin;
        (v - self.direction * self.direction.dot(&v)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMethod {
    MotionAveraging,
    Umeyama,
}

impl ScaleMethod {
    /// Fewest references the method accepts.
    pub fn min_references(self) -> usize {
        match self {
            ScaleMethod::MotionAveraging => 2,
            ScaleMethod::Umeyama => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMethod::MotionAveraging => "motion_averaging",
            ScaleMethod::Umeyama => "umeyama",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsolutePoseEstimate {
    pub pose: Pose,
    pub method: ScaleMethod,
    pub num_candidates: usize,
    /// Mean point-to-ray distance (motion averaging) or mean alignment residual (Umeyama).
    pub residual: f64,
}

/// World rays from each reference center toward the query center implied by `rel_poses`.
///
/// Only the direction of each relative translation is used. References whose
/// relative translation is numerically zero are skipped.
pub fn query_rays(ref_poses: &[Pose], rel_poses: &[Pose]) -> Result<Vec<Ray>> {
    if ref_poses.len() != rel_poses.len() || ref_poses.is_empty() {
        return Err(Error::precondition(format!(
            "need matching nonempty pose lists, got {} references and {} relative poses",
            ref_poses.len(),
            rel_poses.len()
        )));
    }
    let rays: Vec<Ray> = ref_poses
        .iter()
        .zip(rel_poses)
        .filter(|(_, rel)| rel.translation.norm() >= DIRECTION_EPS)
        .map(|(reference, rel)| {
            // Query center in the reference camera frame, rotated into the world.
            let in_ref = rel.center();
            let dir = reference.rotation_matrix().transpose() * in_ref;
            Ray::new(reference.center(), dir)
        })
        .collect::<Result<_>>()?;
    if rays.is_empty() {
        return Err(Error::degenerate("every relative translation is zero"));
    }
    Ok(rays)
}

/// Least-squares intersection of rays: minimizes `Σ ‖(I − d dᵀ)(x − o)‖²`.
pub fn triangulate_point(rays: &[Ray]) -> Result<Vector3<f64>> {
    if rays.len() < 2 {
        return Err(Error::degenerate(format!(
            "triangulation needs at least 2 rays, got {}",
            rays.len()
        )));
    }
    let spread = rays.iter().enumerate().any(|(i, a)| {
        rays[i + 1..].iter().any(|b| {
            let s = a.direction.cross(&b.direction).norm();
            s.atan2(a.direction.dot(&b.direction)) > MIN_RAY_ANGLE
        })
    });
    if !spread {
        return Err(Error::degenerate("rays are parallel"));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for ray in rays {
        let proj = Matrix3::identity() - ray.direction * ray.direction.transpose();
        a += proj;
        b += proj * ray.origin;
    }
    let eig = SymmetricEigen::new(a);
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::degenerate(format!(
            "ray bundle is ill-conditioned (eigenvalues {lo:e} .. {hi:e})"
        )));
    }
    a.cholesky()
        .map(|c| c.solve(&b))
        .ok_or_else(|| Error::degenerate("normal matrix is not positive definite"))
}

/// Geodesic medoid: the candidate with the smallest summed angle to all others.
///
/// Returns the index of the winner together with it; ties go to the lowest index.
pub fn median_rotation(candidates: &[Quaternion]) -> Result<(usize, Quaternion)> {
    if candidates.is_empty() {
        return Err(Error::precondition("median_rotation needs a candidate"));
    }
    let n = candidates.len();
    let mut cost = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = candidates[i].angle_to_deg(&candidates[j]);
            cost[i] += d;
            cost[j] += d;
        }
    }
    let mut best = 0;
    for i in 1..n {
        if cost[i] < cost[best] {
            best = i;
        }
    }
    Ok((best, candidates[best]))
}

/// Absolute query pose by ray triangulation and rotation medoid.
pub fn absolute_pose_motion_avg(ref_poses: &[Pose], rel_poses: &[Pose]) -> Result<AbsolutePoseEstimate> {
    if ref_poses.len() < 2 {
        return Err(Error::degenerate(format!(
            "motion averaging needs at least 2 references, got {}",
            ref_poses.len()
        )));
    }
    let rays = query_rays(ref_poses, rel_poses)?;
    let center = triangulate_point(&rays)?;
    let candidates: Vec<Quaternion> = ref_poses
        .iter()
        .zip(rel_poses)
        .map(|(reference, rel)| rel.rotation.mul(&reference.rotation))
        .collect();
    let (_, rotation) = median_rotation(&candidates)?;
    let pose = Pose::from_center(&rotation.to_rotation_matrix()?, &center)?;
    let residual = rays.iter().map(|r| r.distance_to(&center)).sum::<f64>() / rays.len() as f64;
    Ok(AbsolutePoseEstimate {
        pose,
        method: ScaleMethod::MotionAveraging,
        num_candidates: rays.len(),
        residual,
    })
}

/// Similarity `(s, R, t)` minimizing `Σ ‖dst_i − (s R src_i + t)‖²`.
pub fn umeyama_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3> {
    if src.len() != dst.len() {
        return Err(Error::precondition(format!(
            "point sets differ in length ({} vs {})",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::degenerate(format!("Umeyama needs 3 points, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    let svd = SVD::new(cov, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::degenerate("SVD of covariance failed")),
    };
    let mut sv = svd.singular_values;
    // nalgebra does not guarantee ordering.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    if !(var_s > 0.0) || sv[order[1]] <= 1e-12 * sv[order[0]].max(f64::MIN_POSITIVE) {
        return Err(Error::degenerate("point configuration is collinear or coincident"));
    }
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs[order[2]] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&signs) * v_t;
    for i in 0..3 {
        sv[i] *= signs[i];
    }
    let scale = sv.sum() / var_s;
    let t = mu_d - scale * (r * mu_s);
    Sim3::new(scale, Quaternion::from_rotation_matrix(&r)?, t)
}

/// Absolute query pose by aligning predicted reference centers to the known ones.
///
/// `predicted_refs` and `predicted_query` live in the model's relative frame;
/// `ref_poses` are the world poses of the same references.
pub fn absolute_pose_umeyama(
    ref_poses: &[Pose],
    predicted_refs: &[Pose],
    predicted_query: &Pose,
) -> Result<AbsolutePoseEstimate> {
    if ref_poses.len() < 3 {
        return Err(Error::degenerate(format!(
            "Umeyama alignment needs at least 3 references, got {}",
            ref_poses.len()
        )));
    }
    if ref_poses.len() != predicted_refs.len() {
        return Err(Error::precondition("reference and prediction counts differ"));
    }
    let src: Vec<_> = predicted_refs.iter().map(Pose::center).collect();
    let dst: Vec<_> = ref_poses.iter().map(Pose::center).collect();
    let sim = umeyama_sim3(&src, &dst)?;
    let residual = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (d - sim.apply(s)).norm())
        .sum::<f64>()
        / src.len() as f64;

    let center = sim.apply(&predicted_query.center());
    // World-to-camera rotation: R_q · R_simᵀ.
    let rotation = predicted_query
        .rotation
        .mul(&sim.rotation.conjugate())
        .normalize()?;
    let pose = Pose::from_center(&rotation.to_rotation_matrix()?, &center)?;
    Ok(AbsolutePoseEstimate {
        pose,
        method: ScaleMethod::Umeyama,
        num_candidates: src.len(),
        residual,
    })
}
