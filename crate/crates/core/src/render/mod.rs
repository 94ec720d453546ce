//! Differentiable CPU splatting renderer.
//!
//! Gaussians are projected to screen space with the perspective-Jacobian
//! covariance transform, sorted by depth (stable on ties), and alpha-blended
//! front to back per pixel. Both stages are exposed as fused tape ops:
//! projection differentiates with forward-mode duals, compositing with a
//! hand-written reverse pass.

mod camera;
pub(crate) mod dual;
mod image_io;
mod projection;
mod raster;

pub use camera::Camera;
pub use image_io::{RenderedImage, write_png, write_ppm};
pub use projection::{
    build_covariance, project, CovarianceConvention, Gaussian3D, Projected, COV2D_DILATION,
};
pub use raster::{
    composite, PixelColor, Splat2D, ALPHA_MAX, ALPHA_MIN, DET_MIN, TRANSMITTANCE_MIN,
};

use crate::autodiff::{AutodiffError, Tape, Var};
use projection::{project_with_jacobian, PROJ_INPUTS, PROJ_OUTPUTS};
use raster::Prepared;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error("invalid gaussian: {0}")]
    InvalidGaussian(&'static str),
    #[error("expected {expected} columns for {what}, got shape {shape:?}")]
    BadShape {
        what: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("image io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png encoding: {0}")]
    Png(#[from] image::ImageError),
}

/// Tape handles describing a batch of renderable Gaussians (one per row).
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    /// `[N, 3]`
    pub centers: Var,
    /// `[N, 4]`, normalized inside the projection.
    pub quats: Var,
    /// `[N, 3]`, positive.
    pub scales: Var,
    /// `[N, 1]`
    pub opacity: Var,
    /// `[N, 3]`
    pub colors: Var,
}

fn check_cols(tape: &Tape, v: Var, what: &'static str, cols: usize) -> Result<usize, RenderError> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != cols {
        return Err(RenderError::BadShape {
            what,
            expected: cols,
            shape: s.to_vec(),
        });
    }
    Ok(s[0])
}

/// Projects every Gaussian: `[N, 6]` rows `(u, v, cov_xx, cov_xy, cov_yy, depth)`.
/// Culled rows carry zeros and a depth at or below the near plane.
pub fn project_op(
    tape: &mut Tape,
    centers: Var,
    quats: Var,
    scales: Var,
    camera: &Camera,
    convention: CovarianceConvention,
) -> Result<Var, RenderError> {
    let n = check_cols(tape, centers, "centers", 3)?;
    if check_cols(tape, quats, "quats", 4)? != n || check_cols(tape, scales, "scales", 3)? != n {
        return Err(RenderError::BadShape {
            what: "gaussian batch rows",
            expected: n,
            shape: tape.shape(quats).to_vec(),
        });
    }
    let (c, q, s) = (tape.value(centers), tape.value(quats), tape.value(scales));
    let mut out = vec![0.0; n * PROJ_OUTPUTS];
    let mut jacs = vec![[[0.0; PROJ_INPUTS]; PROJ_OUTPUTS]; n];
    for i in 0..n {
        let center = [c[i * 3], c[i * 3 + 1], c[i * 3 + 2]];
        let quat = [q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]];
        let scale = [s[i * 3], s[i * 3 + 1], s[i * 3 + 2]];
        match project_with_jacobian(center, quat, scale, camera, convention) {
            Some((o, j)) => {
                out[i * PROJ_OUTPUTS..(i + 1) * PROJ_OUTPUTS].copy_from_slice(&o);
                jacs[i] = j;
            }
            None => out[i * PROJ_OUTPUTS + 5] = camera.to_camera(center)[2],
        }
    }
    let backward = Box::new(move |ctx: &crate::autodiff::BackwardCtx<'_>| {
        let g = ctx.grad_output;
        let mut gc = vec![0.0; n * 3];
        let mut gq = vec![0.0; n * 4];
        let mut gs = vec![0.0; n * 3];
        for (i, jac) in jacs.iter().enumerate() {
            let go = &g[i * PROJ_OUTPUTS..(i + 1) * PROJ_OUTPUTS];
            let mut gi = [0.0; PROJ_INPUTS];
            for (o, row) in jac.iter().enumerate() {
                if go[o] == 0.0 {
                    continue;
                }
                for k in 0..PROJ_INPUTS {
                    gi[k] += go[o] * row[k];
                }
            }
            gc[i * 3..i * 3 + 3].copy_from_slice(&gi[0..3]);
            gq[i * 4..i * 4 + 4].copy_from_slice(&gi[3..7]);
            gs[i * 3..i * 3 + 3].copy_from_slice(&gi[7..10]);
        }
        vec![Some(gc), Some(gq), Some(gs)]
    });
    Ok(tape.custom("project", &[centers, quats, scales], vec![n, PROJ_OUTPUTS], out, backward)?)
}

/// Output of [`rasterize_op`].
pub struct Raster {
    /// `[H, W, 3]`
    pub image: Var,
    /// Final per-pixel transmittance, `H·W` values (not differentiated).
    pub transmittance: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

/// Composites projected splats into an image.
pub fn rasterize_op(
    tape: &mut Tape,
    projected: Var,
    opacity: Var,
    colors: Var,
    camera: &Camera,
    background: [f64; 3],
) -> Result<Raster, RenderError> {
    let n = check_cols(tape, projected, "projected", PROJ_OUTPUTS)?;
    if check_cols(tape, opacity, "opacity", 1)? != n || check_cols(tape, colors, "colors", 3)? != n {
        return Err(RenderError::BadShape {
            what: "splat batch rows",
            expected: n,
            shape: tape.shape(colors).to_vec(),
        });
    }
    let p = tape.value(projected);
    let o = tape.value(opacity);
    let col = tape.value(colors);
    let items: Vec<(usize, f64, Splat2D)> = (0..n)
        .filter_map(|i| {
            let r = &p[i * PROJ_OUTPUTS..(i + 1) * PROJ_OUTPUTS];
            (r[5] > camera.near).then(|| {
                (
                    i,
                    r[5],
                    Splat2D {
                        mean: [r[0], r[1]],
                        cov: [r[2], r[3], r[4]],
                        opacity: o[i],
                        color: [col[i * 3], col[i * 3 + 1], col[i * 3 + 2]],
                    },
                )
            })
        })
        .collect();
    let prepared = Prepared::new(items, camera.width, camera.height);
    let (rgb, transmittance) = prepared.forward(background);
    let backward = Box::new(move |ctx: &crate::autodiff::BackwardCtx<'_>| {
        let grads = prepared.backward(background, ctx.grad_output);
        let mut gp = vec![0.0; n * PROJ_OUTPUTS];
        let mut go = vec![0.0; n];
        let mut gc = vec![0.0; n * 3];
        for (sorted, g) in grads.iter().enumerate() {
            let i = prepared.index[sorted];
            gp[i * PROJ_OUTPUTS..i * PROJ_OUTPUTS + 5].copy_from_slice(&g[0..5]);
            go[i] = g[5];
            gc[i * 3..i * 3 + 3].copy_from_slice(&g[6..9]);
        }
        vec![Some(gp), Some(go), Some(gc)]
    });
    let image = tape.custom(
        "rasterize",
        &[projected, opacity, colors],
        vec![camera.height, camera.width, 3],
        rgb,
        backward,
    )?;
    Ok(Raster {
        image,
        transmittance,
        width: camera.width,
        height: camera.height,
    })
}

/// Projection followed by compositing on the tape.
pub fn render_op(
    tape: &mut Tape,
    g: &GaussianVars,
    camera: &Camera,
    background: [f64; 3],
    convention: CovarianceConvention,
) -> Result<Raster, RenderError> {
    let projected = project_op(tape, g.centers, g.quats, g.scales, camera, convention)?;
    rasterize_op(tape, projected, g.opacity, g.colors, camera, background)
}

/// Renders explicit Gaussians without recording gradients.
pub fn render(
    gaussians: &[Gaussian3D],
    camera: &Camera,
    background: [f64; 3],
) -> RenderedImage {
    render_with(gaussians, camera, background, CovarianceConvention::default())
}

pub fn render_with(
    gaussians: &[Gaussian3D],
    camera: &Camera,
    background: [f64; 3],
    convention: CovarianceConvention,
) -> RenderedImage {
    let items = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project(g, camera, convention).map(|p| {
                (
                    i,
                    p.depth,
                    Splat2D {
                        mean: p.mean2d,
                        cov: p.cov2d,
                        opacity: g.opacity,
                        color: g.color,
                    },
                )
            })
        })
        .collect();
    let prepared = Prepared::new(items, camera.width, camera.height);
    let (pixels, transmittance) = prepared.forward(background);
    RenderedImage {
        width: camera.width,
        height: camera.height,
        pixels,
        transmittance,
    }
}

/// Packs explicit Gaussians into tape leaves (constants unless `params`).
pub fn gaussians_to_vars(tape: &mut Tape, gaussians: &[Gaussian3D], params: bool) -> GaussianVars {
    let n = gaussians.len();
    let collect = |f: &dyn Fn(&Gaussian3D) -> Vec<f64>| -> Vec<f64> {
        gaussians.iter().flat_map(f).collect()
    };
    let mk = |tape: &mut Tape, cols: usize, v: Vec<f64>| {
        let t = crate::autodiff::Tensor::new(&[n, cols], v).expect("consistent batch");
        if params {
            tape.param(&t)
        } else {
            tape.leaf(&t)
        }
    };
    let centers = collect(&|g| g.center.to_vec());
    let quats = collect(&|g| g.rotation.to_vec());
    let scales = collect(&|g| g.scale.to_vec());
    let opacity = collect(&|g| vec![g.opacity]);
    let colors = collect(&|g| g.color.to_vec());
    GaussianVars {
        centers: mk(tape, 3, centers),
        quats: mk(tape, 4, quats),
        scales: mk(tape, 3, scales),
        opacity: mk(tape, 1, opacity),
        colors: mk(tape, 3, colors),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> (Vec<Gaussian3D>, Camera) {
        let cam =
            Camera::look_at([0.3, -0.2, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 0.9, 24, 20).unwrap();
        let gs = vec![
            Gaussian3D::new([0.0, 0.0, 0.0], [1.0, 0.1, 0.2, 0.0], [0.25, 0.15, 0.2], 0.7, [0.9, 0.2, 0.1])
                .unwrap(),
            Gaussian3D::new([0.3, 0.1, 0.4], [0.8, -0.2, 0.1, 0.3], [0.2, 0.3, 0.1], 0.6, [0.1, 0.8, 0.3])
                .unwrap(),
            Gaussian3D::new([-0.3, -0.2, -0.3], [0.9, 0.0, -0.3, 0.2], [0.15, 0.2, 0.25], 0.5, [0.2, 0.3, 0.9])
                .unwrap(),
        ];
        (gs, cam)
    }

    #[test]
    fn empty_scene_renders_background() {
        let cam = scene().1;
        let img = render(&[], &cam, [0.25, 0.5, 0.75]);
        for px in img.pixels.chunks(3) {
            assert_eq!(px, &[0.25, 0.5, 0.75]);
        }
        assert!(img.transmittance.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn centered_isotropic_peak_at_projection() {
        let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 0.8, 31, 27).unwrap();
        let center = [0.2, -0.1, 0.0];
        let g = Gaussian3D::new(center, [1.0, 0.0, 0.0, 0.0], [0.1; 3], 0.8, [1.0, 1.0, 1.0]).unwrap();
        let img = render(&[g], &cam, [0.0; 3]);
        let (mut best, mut at) = (-1.0, (0, 0));
        for y in 0..img.height {
            for x in 0..img.width {
                let v = img.pixel(x, y)[0];
                if v > best {
                    best = v;
                    at = (x, y);
                }
            }
        }
        let uv = cam.project_point(center).unwrap();
        assert!((at.0 as f64 - uv[0]).abs() <= 1.0 && (at.1 as f64 - uv[1]).abs() <= 1.0);
    }

    #[test]
    fn tape_render_matches_plain_render_bit_exact() {
        let (gs, cam) = scene();
        let plain = render(&gs, &cam, [0.1, 0.0, 0.2]);
        let mut tape = Tape::new();
        let vars = gaussians_to_vars(&mut tape, &gs, false);
        let r = render_op(&mut tape, &vars, &cam, [0.1, 0.0, 0.2], CovarianceConvention::AsPrinted)
            .unwrap();
        assert_eq!(tape.value(r.image), plain.pixels.as_slice());
        assert_eq!(r.transmittance, plain.transmittance);
    }

    #[test]
    fn conventions_agree() {
        let (gs, cam) = scene();
        for g in &gs {
            let a = project(g, &cam, CovarianceConvention::AsPrinted).unwrap();
            let b = project(g, &cam, CovarianceConvention::Transposed).unwrap();
            for k in 0..3 {
                assert!((a.cov2d[k] - b.cov2d[k]).abs() < 1e-12 * (1.0 + a.cov2d[k].abs()));
            }
            assert_eq!(a.mean2d, b.mean2d);
        }
    }
}
