use rayon::prelude::*;

/// Alpha clamp applied to every splat contribution.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Accumulation stops once transmittance drops below this value.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Splats whose 2D covariance determinant is at or below this are skipped.
pub const DET_MIN: f64 = 1e-12;

/// A projected splat ready for compositing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean: [f64; 2],
    /// `(xx, xy, yy)`
    pub cov: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Inverse of a symmetric 2×2 covariance as `(xx, xy, yy)`, `None` when singular.
fn conic(cov: [f64; 3]) -> Option<([f64; 3], f64)> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > DET_MIN) {
        return None;
    }
    Some(([cov[2] / det, -cov[1] / det, cov[0] / det], det))
}

/// Per-pixel evaluation of one splat.
#[derive(Clone, Copy, Debug)]
struct Hit {
    alpha: f64,
    gauss: f64,
    clamped: bool,
    d: [f64; 2],
}

fn evaluate(s: &Splat2D, k: [f64; 3], pixel: [f64; 2]) -> Option<Hit> {
    let d = [pixel[0] - s.mean[0], pixel[1] - s.mean[1]];
    let q = k[0] * d[0] * d[0] + 2.0 * k[1] * d[0] * d[1] + k[2] * d[1] * d[1];
    let gauss = (-0.5 * q).exp();
    let raw = s.opacity * gauss;
    let clamped = raw > ALPHA_MAX;
    let alpha = if clamped { ALPHA_MAX } else { raw };
    (alpha >= ALPHA_MIN).then_some(Hit {
        alpha,
        gauss,
        clamped,
        d,
    })
}

/// Result of compositing one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelColor {
    pub color: [f64; 3],
    pub transmittance: f64,
}

/// Front-to-back alpha blending of depth-ordered splats at one pixel.
pub fn composite(splats: &[Splat2D], pixel: [f64; 2], background: [f64; 3]) -> PixelColor {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for s in splats {
        let Some((k, _)) = conic(s.cov) else { continue };
        let Some(hit) = evaluate(s, k, pixel) else {
            continue;
        };
        for c in 0..3 {
            color[c] += s.color[c] * hit.alpha * t;
        }
        t *= 1.0 - hit.alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    for c in 0..3 {
        color[c] += background[c] * t;
    }
    PixelColor {
        color,
        transmittance: t,
    }
}

/// Depth-sorted splats with precomputed conics and pixel bounding boxes.
pub(crate) struct Prepared {
    pub splats: Vec<Splat2D>,
    /// Original primitive index of each sorted splat.
    pub index: Vec<usize>,
    conics: Vec<[f64; 3]>,
    xrange: Vec<(i64, i64)>,
    /// Sorted-splat indices touching each row, front to back.
    rows: Vec<Vec<u32>>,
    pub width: usize,
    pub height: usize,
}

impl Prepared {
    /// `items` holds `(primitive index, depth, splat)`; culled primitives are absent.
    pub fn new(mut items: Vec<(usize, f64, Splat2D)>, width: usize, height: usize) -> Self {
        // Stable: equal depths keep primitive order.
        items.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut splats = Vec::with_capacity(items.len());
        let mut index = Vec::with_capacity(items.len());
        let mut conics = Vec::with_capacity(items.len());
        let mut xrange = Vec::with_capacity(items.len());
        let mut rows = vec![Vec::new(); height];
        for (idx, _, s) in items {
            if !(s.opacity * 1.0 >= ALPHA_MIN) {
                continue;
            }
            let Some((k, _)) = conic(s.cov) else { continue };
            // Pixels with alpha >= ALPHA_MIN satisfy dᵀ Σ⁻¹ d <= 2 ln(255·opacity),
            // an ellipse bounded by half-widths sqrt(Q·σxx), sqrt(Q·σyy).
            let qmax = 2.0 * (s.opacity / ALPHA_MIN).ln().max(0.0);
            let hx = (qmax * s.cov[0]).sqrt() * (1.0 + 1e-9) + 1e-9;
            let hy = (qmax * s.cov[2]).sqrt() * (1.0 + 1e-9) + 1e-9;
            let x0 = (s.mean[0] - hx).ceil().max(0.0);
            let x1 = (s.mean[0] + hx).floor().min(width as f64 - 1.0);
            let y0 = (s.mean[1] - hy).ceil().max(0.0);
            let y1 = (s.mean[1] + hy).floor().min(height as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                continue;
            }
            let sorted = splats.len() as u32;
            for row in &mut rows[y0 as usize..=y1 as usize] {
                row.push(sorted);
            }
            splats.push(s);
            index.push(idx);
            conics.push(k);
            xrange.push((x0 as i64, x1 as i64));
        }
        Self {
            splats,
            index,
            conics,
            xrange,
            rows,
            width,
            height,
        }
    }

    fn pixel_hits(&self, y: usize, x: usize, out: &mut Vec<(u32, Hit, f64)>) -> f64 {
        out.clear();
        let mut t = 1.0;
        let pixel = [x as f64, y as f64];
        for &si in &self.rows[y] {
            let (x0, x1) = self.xrange[si as usize];
            let xi = x as i64;
            if xi < x0 || xi > x1 {
                continue;
            }
            let s = &self.splats[si as usize];
            let Some(hit) = evaluate(s, self.conics[si as usize], pixel) else {
                continue;
            };
            out.push((si, hit, t));
            t *= 1.0 - hit.alpha;
            if t < TRANSMITTANCE_MIN {
                break;
            }
        }
        t
    }

    /// Renders `(rgb, transmittance)` buffers, rows in parallel.
    pub fn forward(&self, background: [f64; 3]) -> (Vec<f64>, Vec<f64>) {
        let w = self.width;
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..self.height)
            .into_par_iter()
            .map(|y| {
                let mut rgb = vec![0.0; w * 3];
                let mut trans = vec![0.0; w];
                let mut hits = Vec::new();
                for x in 0..w {
                    let t_final = self.pixel_hits(y, x, &mut hits);
                    let px = &mut rgb[x * 3..x * 3 + 3];
                    for &(si, hit, t) in &hits {
                        let s = &self.splats[si as usize];
                        for c in 0..3 {
                            px[c] += s.color[c] * hit.alpha * t;
                        }
                    }
                    for c in 0..3 {
                        px[c] += background[c] * t_final;
                    }
                    trans[x] = t_final;
                }
                (rgb, trans)
            })
            .collect();
        let mut rgb = Vec::with_capacity(w * self.height * 3);
        let mut trans = Vec::with_capacity(w * self.height);
        for (r, t) in rows {
            rgb.extend(r);
            trans.extend(t);
        }
        (rgb, trans)
    }

    /// Gradients per sorted splat: `[mean(2), cov(3), opacity, color(3)]`.
    /// Row partials are summed in row order, so the result is deterministic.
    pub fn backward(&self, background: [f64; 3], grad_rgb: &[f64]) -> Vec<[f64; 9]> {
        let w = self.width;
        let n = self.splats.len();
        let partials: Vec<Vec<(u32, [f64; 9])>> = (0..self.height)
            .into_par_iter()
            .map(|y| {
                let mut local: Vec<[f64; 9]> = vec![[0.0; 9]; 0];
                let mut touched: Vec<u32> = Vec::new();
                let mut slot: std::collections::HashMap<u32, usize> = Default::default();
                let mut hits = Vec::new();
                for x in 0..w {
                    let t_final = self.pixel_hits(y, x, &mut hits);
                    let dc = &grad_rgb[(y * w + x) * 3..(y * w + x) * 3 + 3];
                    if dc.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let mut acc = [
                        background[0] * t_final,
                        background[1] * t_final,
                        background[2] * t_final,
                    ];
                    for &(si, hit, t) in hits.iter().rev() {
                        let s = &self.splats[si as usize];
                        let k = self.conics[si as usize];
                        let pos = *slot.entry(si).or_insert_with(|| {
                            touched.push(si);
                            local.push([0.0; 9]);
                            local.len() - 1
                        });
                        let g = &mut local[pos];
                        let a = hit.alpha;
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            g[6 + c] += a * t * dc[c];
                            d_alpha += dc[c] * (s.color[c] * t - acc[c] / (1.0 - a));
                            acc[c] += s.color[c] * a * t;
                        }
                        if hit.clamped {
                            continue;
                        }
                        g[5] += d_alpha * hit.gauss;
                        let d_gauss = d_alpha * s.opacity;
                        let dq = -0.5 * hit.gauss * d_gauss;
                        let [dx, dy] = hit.d;
                        // q = K00 dx² + 2 K01 dx dy + K11 dy², d = pixel - mean
                        g[0] -= dq * 2.0 * (k[0] * dx + k[1] * dy);
                        g[1] -= dq * 2.0 * (k[1] * dx + k[2] * dy);
                        // dL/dΣ = -K G K with G = dL/dK (symmetric, off-diagonal halved)
                        let gk = [dq * dx * dx, dq * dx * dy, dq * dy * dy];
                        let kg = [
                            [k[0] * gk[0] + k[1] * gk[1], k[0] * gk[1] + k[1] * gk[2]],
                            [k[1] * gk[0] + k[2] * gk[1], k[1] * gk[1] + k[2] * gk[2]],
                        ];
                        let s00 = -(kg[0][0] * k[0] + kg[0][1] * k[1]);
                        let s01 = -(kg[0][0] * k[1] + kg[0][1] * k[2]);
                        let s11 = -(kg[1][0] * k[1] + kg[1][1] * k[2]);
                        g[2] += s00;
                        g[3] += 2.0 * s01;
                        g[4] += s11;
                    }
                }
                touched.into_iter().zip(local).collect()
            })
            .collect();
        let mut out = vec![[0.0; 9]; n];
        for row in partials {
            for (si, g) in row {
                let o = &mut out[si as usize];
                for c in 0..9 {
                    o[c] += g[c];
                }
            }
        }
        out
    }
}
