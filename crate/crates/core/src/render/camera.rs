use super::RenderError;

/// Pinhole camera. `view` maps world points to camera space
/// (`p_cam = R p + t`, x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub view: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(a, a).sqrt();
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

impl Camera {
    /// Camera at `eye` looking at `target`; `fov_x` is the horizontal field of
    /// view in radians and the principal point sits at the image center.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fov_x: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, RenderError> {
        let fwd = normalize([target[0] - eye[0], target[1] - eye[1], target[2] - eye[2]])
            .ok_or(RenderError::InvalidCamera("eye coincides with target"))?;
        let right = normalize(cross(fwd, up))
            .ok_or(RenderError::InvalidCamera("up vector parallel to view direction"))?;
        let down = cross(fwd, right);
        let rows = [right, down, fwd];
        let mut view = [[0.0; 4]; 4];
        for (i, r) in rows.iter().enumerate() {
            view[i][..3].copy_from_slice(r);
            view[i][3] = -dot(*r, eye);
        }
        view[3][3] = 1.0;
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        let cam = Self {
            view,
            fx: f,
            fy: f,
            cx: 0.5 * (width as f64 - 1.0),
            cy: 0.5 * (height as f64 - 1.0),
            width,
            height,
            near: 0.01,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let v = &self.view;
        [
            [v[0][0], v[0][1], v[0][2]],
            [v[1][0], v[1][1], v[1][2]],
            [v[2][0], v[2][1], v[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.view[0][3], self.view[1][3], self.view[2][3]]
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn position(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        let mut p = [0.0; 3];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]);
        }
        p
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.view[i][0] * p[0] + self.view[i][1] * p[1] + self.view[i][2] * p[2]
                + self.view[i][3];
        }
        out
    }

    /// Pinhole projection of a world point, `None` at or behind the near plane.
    pub fn project_point(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let c = self.to_camera(p);
        (c[2] > self.near).then(|| [self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy])
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::InvalidCamera("focal lengths must be positive"));
        }
        if !(self.near > 0.0) {
            return Err(RenderError::InvalidCamera("near plane must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::InvalidCamera("image size must be non-zero"));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(r[i], r[j]);
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-9 {
                    return Err(RenderError::InvalidCamera("view rotation is not orthonormal"));
                }
            }
        }
        if self.view[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(RenderError::InvalidCamera("view matrix bottom row must be (0,0,0,1)"));
        }
        Ok(())
    }

    /// Row-major flattening used by checkpoints: view (16), fx, fy, cx, cy, width, height, near.
    pub fn to_flat(&self) -> [f64; 23] {
        let mut out = [0.0; 23];
        for i in 0..4 {
            out[i * 4..i * 4 + 4].copy_from_slice(&self.view[i]);
        }
        out[16] = self.fx;
        out[17] = self.fy;
        out[18] = self.cx;
        out[19] = self.cy;
        out[20] = self.width as f64;
        out[21] = self.height as f64;
        out[22] = self.near;
        out
    }

    pub fn from_flat(v: &[f64]) -> Result<Self, RenderError> {
        if v.len() != 23 {
            return Err(RenderError::InvalidCamera("flat camera must have 23 values"));
        }
        let mut view = [[0.0; 4]; 4];
        for i in 0..4 {
            view[i].copy_from_slice(&v[i * 4..i * 4 + 4]);
        }
        let cam = Self {
            view,
            fx: v[16],
            fy: v[17],
            cx: v[18],
            cy: v[19],
            width: v[20] as usize,
            height: v[21] as usize,
            near: v[22],
        };
        cam.validate()?;
        Ok(cam)
    }
}
