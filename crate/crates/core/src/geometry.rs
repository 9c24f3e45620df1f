//! 3D value types, SO(3) helpers, rotation averaging and registration error metrics.
//!
//! Rotations are kept as explicit 3x3 matrices ([`RotationMatrix`] is nalgebra's
//! matrix-backed `Rotation3`). All functions here are pure.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type UnitVec3 = Unit<Vector3<f64>>;
pub type RotationMatrix = Rotation3<f64>;

/// Eigenvalues of `R̄ᵀR̄` at or below this make the chordal mean undefined.
pub const DEGENERATE_EIGENVALUE: f64 = 1e-12;

/// Rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(RotationMatrix::identity(), Vec3::zeros())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        apply_transform(self, p)
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -(r_inv * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Row-major rotation followed by the translation (12 values).
    pub fn to_row_major(&self) -> [f64; 12] {
        let m = self.rotation.matrix();
        let t = self.translation;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    /// Inverse of [`to_row_major`](Self::to_row_major). The rotation block must
    /// already be orthonormal with unit determinant (within 1e-6).
    pub fn from_row_major(values: &[f64; 12]) -> Result<Self> {
        let m = Matrix3::new(
            values[0], values[1], values[2], values[3], values[4], values[5], values[6],
            values[7], values[8],
        );
        if !is_rotation(&m, 1e-6) {
            return Err(Error::InvalidInput(
                "rotation block is not in SO(3)".to_string(),
            ));
        }
        Ok(Self::new(
            RotationMatrix::from_matrix_unchecked(m),
            Vec3::new(values[9], values[10], values[11]),
        ))
    }
}

pub fn apply_transform(t: &RigidTransform, p: &Vec3) -> Vec3 {
    t.rotation * p + t.translation
}

/// Rotates a unit vector and renormalizes to absorb round-off.
pub fn rotate_unit(r: &RotationMatrix, v: &UnitVec3) -> UnitVec3 {
    Unit::new_normalize(r * v.into_inner())
}

/// Geodesic angle between two rotations, `arccos((tr(R₁ᵀR₂) − 1)/2)`, in `[0, π]`.
pub fn rotation_error(r_true: &RotationMatrix, r_est: &RotationMatrix) -> f64 {
    let tr = (r_true.matrix().transpose() * r_est.matrix()).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn translation_error(t_true: &Vec3, t_est: &Vec3) -> f64 {
    (t_est - t_true).norm()
}

/// Chordal (Euclidean) mean of rotations projected back onto SO(3):
/// `R = R̄·U·diag(Λ₁^-½, Λ₂^-½, s·Λ₃^-½)·Uᵀ` where `R̄ᵀR̄ = U·diag(Λ)·Uᵀ`
/// and `s = sign(det R̄)`.
///
/// Fails with [`Error::DegenerateMean`] when the input is empty or any `Λᵢ`
/// is at or below [`DEGENERATE_EIGENVALUE`].
pub fn average_rotations(rotations: &[RotationMatrix]) -> Result<RotationMatrix> {
    if rotations.is_empty() {
        return Err(Error::DegenerateMean("no rotations to average".into()));
    }
    let mean = rotations
        .iter()
        .fold(Matrix3::zeros(), |acc, r| acc + r.matrix())
        / rotations.len() as f64;
    let (lambda, u) = sorted_symmetric_eigen(&(mean.transpose() * mean));
    if lambda.iter().any(|&l| l <= DEGENERATE_EIGENVALUE) {
        return Err(Error::DegenerateMean(format!(
            "mean rotation is rank deficient (eigenvalues {:.3e}, {:.3e}, {:.3e})",
            lambda[0], lambda[1], lambda[2]
        )));
    }
    let s = if mean.determinant() >= 0.0 { 1.0 } else { -1.0 };
    let scale = Matrix3::from_diagonal(&Vec3::new(
        1.0 / lambda[0].sqrt(),
        1.0 / lambda[1].sqrt(),
        s / lambda[2].sqrt(),
    ));
    let r = mean * u * scale * u.transpose();
    Ok(project_to_so3(&r))
}

/// Nearest rotation in Frobenius norm (polar factor via SVD, with the
/// reflection case folded onto the smallest singular direction).
pub fn project_to_so3(m: &Matrix3<f64>) -> RotationMatrix {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // nalgebra orders singular values descending
        d[(2, 2)] = -1.0;
    }
    RotationMatrix::from_matrix_unchecked(u * d * v_t)
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (m.transpose() * m - Matrix3::identity()).norm();
    ortho <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Rotation by `angle` radians about `axis` (need not be normalized).
pub fn rotation_about(axis: &Vec3, angle: f64) -> RotationMatrix {
    RotationMatrix::from_axis_angle(&Unit::new_normalize(*axis), angle)
}

/// Eigen-decomposition of a symmetric 3x3 matrix with eigenvalues sorted
/// descending and each eigenvector's first non-negligible component made
/// positive. Columns of the returned matrix are the eigenvectors.
pub fn sorted_symmetric_eigen(m: &Matrix3<f64>) -> (Vec3, Matrix3<f64>) {
    let eig = m.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = Vec3::zeros();
    let mut vectors = Matrix3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut v = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        vectors.set_column(dst, &v);
    }
    (values, vectors)
}

/// Ordered 3D points with optional per-point unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<UnitVec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
        Ok(Self {
            points,
            normals: None,
        })
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<UnitVec3>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(Error::InvalidInput(format!(
                "{} normals for {} points",
                normals.len(),
                points.len()
            )));
        }
        let mut cloud = Self::new(points)?;
        cloud.normals = Some(normals);
        Ok(cloud)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[UnitVec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        mean_point(&self.points)
    }

    /// Applies `t` to every point and rotates normals accordingly.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| rotate_unit(&t.rotation, n)).collect()),
        }
    }

    /// Keeps the points (and normals) at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        match &self.normals {
            Some(ns) => PointCloud::with_normals(points, indices.iter().map(|&i| ns[i]).collect()),
            None => PointCloud::new(points),
        }
    }
}

pub(crate) fn mean_point(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn rz(angle: f64) -> RotationMatrix {
        rotation_about(&Vec3::z(), angle)
    }

    #[test]
    fn apply_transform_examples() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(apply_transform(&RigidTransform::identity(), &p), p);

        let t = RigidTransform::new(rz(FRAC_PI_2), Vec3::zeros());
        assert_relative_eq!(t.apply(&Vec3::x()), Vec3::y(), epsilon = 1e-15);

        let t = RigidTransform::new(rz(FRAC_PI_2), Vec3::new(1.0, 1.0, 1.0));
        // hand multiply: [[0,-1,0],[1,0,0],[0,0,1]]·(1,0,0) = (0,1,0), plus (1,1,1)
        assert_relative_eq!(t.apply(&Vec3::x()), Vec3::new(1.0, 2.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn rotate_unit_examples() {
        let z = UnitVec3::new_normalize(Vec3::z());
        assert_relative_eq!(
            rotate_unit(&RotationMatrix::identity(), &z).into_inner(),
            Vec3::z()
        );
        let flipped = rotate_unit(&rotation_about(&Vec3::x(), PI), &z);
        assert_relative_eq!(flipped.into_inner(), -Vec3::z(), epsilon = 1e-15);
        let x = UnitVec3::new_normalize(Vec3::x());
        assert_relative_eq!(
            rotate_unit(&rz(FRAC_PI_2), &x).into_inner(),
            Vec3::y(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn rotation_error_examples() {
        let r = rotation_about(&Vec3::new(0.3, -1.0, 2.0), 1.1);
        assert!(rotation_error(&r, &r) < 1e-7);
        let axis = Vec3::new(1.0, 2.0, -0.5);
        assert_relative_eq!(
            rotation_error(&RotationMatrix::identity(), &rotation_about(&axis, 0.3)),
            0.3,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            rotation_error(&rz(FRAC_PI_4), &rz(3.0 * FRAC_PI_4)),
            FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rotation_error_clamps_past_pi() {
        let e = rotation_error(&RotationMatrix::identity(), &rz(PI));
        assert!(e.is_finite());
        assert_relative_eq!(e, PI, epsilon = 1e-7);
    }

    #[test]
    fn translation_error_examples() {
        assert_eq!(translation_error(&Vec3::zeros(), &Vec3::zeros()), 0.0);
        assert_eq!(translation_error(&Vec3::x(), &Vec3::zeros()), 1.0);
        assert_eq!(
            translation_error(&Vec3::new(1.0, 2.0, 2.0), &Vec3::zeros()),
            3.0
        );
    }

    #[test]
    fn average_of_identical_rotations() {
        let r = rotation_about(&Vec3::new(1.0, 1.0, 0.0), 0.7);
        let avg = average_rotations(&[r, r, r]).unwrap();
        assert!(rotation_error(&r, &avg) < 1e-9);
    }

    #[test]
    fn average_of_symmetric_pair_is_identity() {
        let pair = [rz(0.2), rz(-0.2)];
        // oracle: R̄ = diag(cos 0.2, cos 0.2, 1), so R̄ᵀR̄ has eigenvalues
        // (1, cos²0.2, cos²0.2) and the projection is I
        let mean = (pair[0].matrix() + pair[1].matrix()) / 2.0;
        let expected = Matrix3::from_diagonal(&Vec3::new(0.2f64.cos(), 0.2f64.cos(), 1.0));
        assert_relative_eq!(mean, expected, epsilon = 1e-15);
        let avg = average_rotations(&pair).unwrap();
        assert_relative_eq!(*avg.matrix(), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn average_about_single_axis_averages_angles() {
        let avg = average_rotations(&[rz(0.1), rz(0.3)]).unwrap();
        assert!(rotation_error(&rz(0.2), &avg) < 1e-6);
    }

    #[test]
    fn average_rejects_opposed_rotations() {
        // a half-turn and the identity cancel in the xy block: R̄ = diag(0, 0, 1)
        let rs = [rz(PI), rz(0.0)];
        assert!(matches!(average_rotations(&rs), Err(Error::DegenerateMean(_))));
        assert!(matches!(average_rotations(&[]), Err(Error::DegenerateMean(_))));
    }

    #[test]
    fn eigen_sorted_and_sign_fixed() {
        let m = Matrix3::from_diagonal(&Vec3::new(1.0, 3.0, 2.0));
        let (values, vectors) = sorted_symmetric_eigen(&m);
        assert_eq!(values, Vec3::new(3.0, 2.0, 1.0));
        assert_relative_eq!(vectors.column(0).into_owned(), Vec3::y());
        assert_relative_eq!(vectors.column(1).into_owned(), Vec3::z());
    }

    #[test]
    fn point_cloud_invariants() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
        let n = UnitVec3::new_normalize(Vec3::z());
        assert!(PointCloud::with_normals(vec![Vec3::zeros(); 2], vec![n]).is_err());
        let c = PointCloud::with_normals(vec![Vec3::zeros(), Vec3::x()], vec![n, n]).unwrap();
        assert_eq!(c.centroid(), Vec3::new(0.5, 0.0, 0.0));
    }

    #[test]
    fn row_major_round_trip() {
        let t = RigidTransform::new(rotation_about(&Vec3::new(0.2, 1.0, -1.0), 0.4), Vec3::new(0.3, -0.1, 2.0));
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert_eq!(back, t);
        let mut bad = t.to_row_major();
        bad[0] = 3.0;
        assert!(RigidTransform::from_row_major(&bad).is_err());
    }

    fn arb_rotation() -> impl Strategy<Value = RotationMatrix> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            0.0f64..PI,
        )
            .prop_filter("axis", |(x, y, z, _)| x * x + y * y + z * z > 1e-3)
            .prop_map(|(x, y, z, a)| rotation_about(&Vec3::new(x, y, z), a))
    }

    fn arb_point() -> impl Strategy<Value = Vec3> {
        (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn rotation_error_is_symmetric(a in arb_rotation(), b in arb_rotation()) {
            prop_assert!((rotation_error(&a, &b) - rotation_error(&b, &a)).abs() < 1e-9);
        }

        #[test]
        fn rotation_error_is_left_invariant(a in arb_rotation(), b in arb_rotation(), q in arb_rotation()) {
            let lhs = rotation_error(&(q * a), &(q * b));
            let rhs = rotation_error(&a, &b);
            // arccos loses precision near 0 and π
            prop_assert!((lhs - rhs).abs() < 1e-6);
        }

        #[test]
        fn average_stays_in_so3(base in arb_rotation(), seed in 0u64..1000) {
            let noisy: Vec<RotationMatrix> = (0..5)
                .map(|i| {
                    let k = (seed + i) as f64;
                    let jitter = Matrix3::from_fn(|r, c| 1e-6 * ((k + 3.0 * r as f64 + c as f64).sin()));
                    RotationMatrix::from_matrix_unchecked(base.matrix() + jitter)
                })
                .collect();
            let avg = average_rotations(&noisy).unwrap();
            prop_assert!(is_rotation(avg.matrix(), 1e-9));
        }

        #[test]
        fn transform_preserves_distances(r in arb_rotation(), t in arb_point(), p in arb_point(), q in arb_point()) {
            let tf = RigidTransform::new(r, t);
            let d0 = (p - q).norm();
            let d1 = (tf.apply(&p) - tf.apply(&q)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }
    }
}
