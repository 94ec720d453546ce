use super::camera::Camera;
use super::dual::{Dual, Real};
use super::RenderError;

/// Explicit renderable primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub center: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    /// Builds a Gaussian, normalizing the quaternion and checking ranges.
    pub fn new(
        center: [f64; 3],
        rotation: [f64; 4],
        scale: [f64; 3],
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self, RenderError> {
        let n = rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
        if !(n > 1e-12) {
            return Err(RenderError::InvalidGaussian("zero quaternion"));
        }
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(RenderError::InvalidGaussian("scale components must be positive"));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(RenderError::InvalidGaussian("opacity outside [0, 1]"));
        }
        Ok(Self {
            center,
            rotation: rotation.map(|q| q / n),
            scale,
            opacity,
            color,
        })
    }
}

/// Which matrix chain forms the screen-space covariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CovarianceConvention {
    /// `Jᵀ Wᵀ Σ W J` with row-vector matrices: `W` maps row vectors to camera
    /// space (the transpose of the column-vector view rotation) and `J` is the
    /// 3×2 transposed perspective Jacobian.
    #[default]
    AsPrinted,
    /// `J W Σ Wᵀ Jᵀ` with column-vector matrices.
    Transposed,
}

impl std::str::FromStr for CovarianceConvention {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as_printed" => Ok(Self::AsPrinted),
            "transposed" => Ok(Self::Transposed),
            other => Err(format!("unknown covariance convention `{other}`")),
        }
    }
}

impl std::fmt::Display for CovarianceConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AsPrinted => "as_printed",
            Self::Transposed => "transposed",
        })
    }
}

/// Screen-space dilation added to the projected covariance diagonal.
pub const COV2D_DILATION: f64 = 0.3;

/// Rotation matrix of a (not necessarily normalized) quaternion `(w, x, y, z)`.
pub(crate) fn quat_to_matrix<T: Real>(q: [T; 4]) -> [[T; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let one = T::cst(1.0);
    let two = T::cst(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// `Σ = Rᵀ Sᵀ S R` with `S = diag(scale)`.
pub(crate) fn covariance<T: Real>(q: [T; 4], s: [T; 3]) -> [[T; 3]; 3] {
    let r = quat_to_matrix(q);
    // M = S R
    let m: [[T; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| s[i] * r[i][j]));
    std::array::from_fn(|i| {
        std::array::from_fn(|j| m[0][i] * m[0][j] + m[1][i] * m[1][j] + m[2][i] * m[2][j])
    })
}

/// 3D covariance of a Gaussian from its rotation and scale.
pub fn build_covariance(rotation: [f64; 4], scale: [f64; 3]) -> Result<[[f64; 3]; 3], RenderError> {
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(RenderError::InvalidGaussian("scale components must be positive"));
    }
    if rotation.iter().map(|q| q * q).sum::<f64>() < 1e-24 {
        return Err(RenderError::InvalidGaussian("zero quaternion"));
    }
    Ok(covariance(rotation, scale))
}

/// Image-plane footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub mean2d: [f64; 2],
    /// Symmetric 2×2 covariance stored as `(xx, xy, yy)`, dilation included.
    pub cov2d: [f64; 3],
    pub depth: f64,
}

/// Generic projection kernel: returns `[u, v, cov_xx, cov_xy, cov_yy, depth]`
/// or `None` when the center is not beyond the near plane.
pub(crate) fn project_generic<T: Real>(
    center: [T; 3],
    rotation: [T; 4],
    scale: [T; 3],
    camera: &Camera,
    convention: CovarianceConvention,
) -> Option<[T; 6]> {
    let rv = camera.rotation();
    let tv = camera.translation();
    let c = T::cst;
    let pc: [T; 3] = std::array::from_fn(|i| {
        c(rv[i][0]) * center[0] + c(rv[i][1]) * center[1] + c(rv[i][2]) * center[2] + c(tv[i])
    });
    if pc[2].re() <= camera.near {
        return None;
    }
    let (x, y, z) = (pc[0], pc[1], pc[2]);
    let inv_z = c(1.0) / z;
    let u = c(camera.fx) * x * inv_z + c(camera.cx);
    let v = c(camera.fy) * y * inv_z + c(camera.cy);

    // Column-vector perspective Jacobian (2×3).
    let zero = c(0.0);
    let jac = [
        [c(camera.fx) * inv_z, zero, -(c(camera.fx) * x) * inv_z * inv_z],
        [zero, c(camera.fy) * inv_z, -(c(camera.fy) * y) * inv_z * inv_z],
    ];
    let sigma = covariance(rotation, scale);

    let cov: [[T; 2]; 2] = match convention {
        CovarianceConvention::AsPrinted => {
            // Row-vector forms: W = Rvᵀ (3×3), J = jacᵀ (3×2); T = W J (3×2).
            let w: [[T; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| c(rv[j][i])));
            let jr: [[T; 2]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| jac[j][i]));
            let t: [[T; 2]; 3] = std::array::from_fn(|i| {
                std::array::from_fn(|j| w[i][0] * jr[0][j] + w[i][1] * jr[1][j] + w[i][2] * jr[2][j])
            });
            // Σ' = Tᵀ Σ T
            let st: [[T; 2]; 3] = std::array::from_fn(|i| {
                std::array::from_fn(|j| {
                    sigma[i][0] * t[0][j] + sigma[i][1] * t[1][j] + sigma[i][2] * t[2][j]
                })
            });
            std::array::from_fn(|i| {
                std::array::from_fn(|j| t[0][i] * st[0][j] + t[1][i] * st[1][j] + t[2][i] * st[2][j])
            })
        }
        CovarianceConvention::Transposed => {
            // T = J W (2×3), Σ' = T Σ Tᵀ
            let t: [[T; 3]; 2] = std::array::from_fn(|i| {
                std::array::from_fn(|j| {
                    jac[i][0] * c(rv[0][j]) + jac[i][1] * c(rv[1][j]) + jac[i][2] * c(rv[2][j])
                })
            });
            let ts: [[T; 3]; 2] = std::array::from_fn(|i| {
                std::array::from_fn(|j| {
                    t[i][0] * sigma[0][j] + t[i][1] * sigma[1][j] + t[i][2] * sigma[2][j]
                })
            });
            std::array::from_fn(|i| {
                std::array::from_fn(|j| ts[i][0] * t[j][0] + ts[i][1] * t[j][1] + ts[i][2] * t[j][2])
            })
        }
    };
    Some([
        u,
        v,
        cov[0][0] + c(COV2D_DILATION),
        cov[0][1],
        cov[1][1] + c(COV2D_DILATION),
        z,
    ])
}

/// Projects a Gaussian; `None` means culled (center not beyond the near plane).
pub fn project(
    gaussian: &Gaussian3D,
    camera: &Camera,
    convention: CovarianceConvention,
) -> Option<Projected> {
    project_generic(gaussian.center, gaussian.rotation, gaussian.scale, camera, convention).map(
        |o| Projected {
            mean2d: [o[0], o[1]],
            cov2d: [o[2], o[3], o[4]],
            depth: o[5],
        },
    )
}

/// Number of differentiable inputs per Gaussian: center (3), quaternion (4), scale (3).
pub(crate) const PROJ_INPUTS: usize = 10;
/// Outputs per Gaussian: u, v, cov_xx, cov_xy, cov_yy, depth.
pub(crate) const PROJ_OUTPUTS: usize = 6;

/// Projection with its 6×10 Jacobian.
pub(crate) fn project_with_jacobian(
    center: [f64; 3],
    rotation: [f64; 4],
    scale: [f64; 3],
    camera: &Camera,
    convention: CovarianceConvention,
) -> Option<([f64; PROJ_OUTPUTS], [[f64; PROJ_INPUTS]; PROJ_OUTPUTS])> {
    type D = Dual<PROJ_INPUTS>;
    let c: [D; 3] = std::array::from_fn(|i| D::var(center[i], i));
    let q: [D; 4] = std::array::from_fn(|i| D::var(rotation[i], 3 + i));
    let s: [D; 3] = std::array::from_fn(|i| D::var(scale[i], 7 + i));
    let out = project_generic(c, q, s, camera, convention)?;
    Some((out.map(|d| d.re), out.map(|d| d.eps)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera {
            view: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            fx: 100.0,
            fy: 100.0,
            cx: 16.0,
            cy: 12.0,
            width: 32,
            height: 24,
            near: 0.01,
        }
    }

    #[test]
    fn covariance_examples() {
        let id = build_covariance([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        let d = build_covariance([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[i][j] - e).abs() < 1e-15);
            }
        }
        assert!((d[0][0] - 4.0).abs() < 1e-15 && (d[1][1] - 1.0).abs() < 1e-15);
        // Hand product for a 90° turn about z: R = [[0,-1,0],[1,0,0],[0,0,1]],
        // Rᵀ diag(4,1,1) R = diag(1,4,1).
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = build_covariance([h, 0.0, 0.0, h], [2.0, 1.0, 1.0]).unwrap();
        let expect = [[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - expect[i][j]).abs() < 1e-12, "{r:?}");
            }
        }
        assert!(build_covariance([1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let g = Gaussian3D::new([0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 0.5, [1.0; 3])
            .unwrap();
        for conv in [CovarianceConvention::AsPrinted, CovarianceConvention::Transposed] {
            let p = project(&g, &cam(), conv).unwrap();
            assert_eq!(p.mean2d, [16.0, 12.0]);
            assert_eq!(p.depth, 1.0);
        }
    }

    #[test]
    fn doubling_depth_halves_offset() {
        let mk = |z: f64| {
            Gaussian3D::new([0.3, -0.2, z], [1.0, 0.0, 0.0, 0.0], [0.1; 3], 0.5, [1.0; 3]).unwrap()
        };
        let c = cam();
        let a = project(&mk(2.0), &c, CovarianceConvention::AsPrinted).unwrap();
        let b = project(&mk(4.0), &c, CovarianceConvention::AsPrinted).unwrap();
        assert!(((a.mean2d[0] - c.cx) - 2.0 * (b.mean2d[0] - c.cx)).abs() < 1e-12);
        assert!(((a.mean2d[1] - c.cy) - 2.0 * (b.mean2d[1] - c.cy)).abs() < 1e-12);
    }

    #[test]
    fn behind_near_is_culled() {
        let g = Gaussian3D::new([0.0, 0.0, -1.0], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 0.5, [1.0; 3])
            .unwrap();
        assert!(project(&g, &cam(), CovarianceConvention::AsPrinted).is_none());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = Camera::look_at([0.4, -0.3, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 0.9, 32, 32).unwrap();
        let center = [0.2, 0.1, 0.3];
        let q = [0.9, 0.2, -0.3, 0.1];
        let s = [0.2, 0.1, 0.05];
        for conv in [CovarianceConvention::AsPrinted, CovarianceConvention::Transposed] {
            let (_, jac) = project_with_jacobian(center, q, s, &c, conv).unwrap();
            let mut x: Vec<f64> = center.iter().chain(&q).chain(&s).copied().collect();
            for k in 0..PROJ_INPUTS {
                let h = 1e-6;
                let orig = x[k];
                let eval = |x: &[f64]| {
                    project_generic::<f64>(
                        [x[0], x[1], x[2]],
                        [x[3], x[4], x[5], x[6]],
                        [x[7], x[8], x[9]],
                        &c,
                        conv,
                    )
                    .unwrap()
                };
                x[k] = orig + h;
                let fp = eval(&x);
                x[k] = orig - h;
                let fm = eval(&x);
                x[k] = orig;
                for o in 0..PROJ_OUTPUTS {
                    let fd = (fp[o] - fm[o]) / (2.0 * h);
                    assert!(
                        (fd - jac[o][k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                        "{conv} out {o} in {k}: {fd} vs {}",
                        jac[o][k]
                    );
                }
            }
        }
    }
}
