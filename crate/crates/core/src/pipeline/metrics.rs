/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub(crate) const SSIM_C1: f64 = 0.01 * 0.01;
pub(crate) const SSIM_C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

/// `−10·log10(MSE)` over `[0, 1]` values, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr needs equal sizes");
    assert!(!a.is_empty(), "psnr of an empty image");
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

pub(crate) fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Same-size separable Gaussian filter of one `h×w` channel, zero padded.
/// The kernel is symmetric, so this is also its own adjoint.
pub(crate) fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_window();
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Local statistics of one channel pair.
pub(crate) struct SsimStats {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub map: Vec<f64>,
    pub n1: Vec<f64>,
    pub n2: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

pub(crate) fn ssim_stats(x: &[f64], y: &[f64], w: usize, h: usize) -> SsimStats {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = blur(x, w, h);
    let mu_y = blur(y, w, h);
    let exx = blur(&sq(x, x), w, h);
    let eyy = blur(&sq(y, y), w, h);
    let exy = blur(&sq(x, y), w, h);
    let n = w * h;
    let (mut map, mut n1, mut n2, mut d1, mut d2) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = exx[i] - mx * mx;
        let syy = eyy[i] - my * my;
        let sxy = exy[i] - mx * my;
        n1[i] = 2.0 * mx * my + SSIM_C1;
        n2[i] = 2.0 * sxy + SSIM_C2;
        d1[i] = mx * mx + my * my + SSIM_C1;
        d2[i] = sxx + syy + SSIM_C2;
        map[i] = n1[i] * n2[i] / (d1[i] * d2[i]);
    }
    SsimStats {
        mu_x,
        mu_y,
        map,
        n1,
        n2,
        d1,
        d2,
    }
}

/// Splits interleaved `[H, W, 3]` pixels into channel planes.
pub(crate) fn planes(pixels: &[f64], w: usize, h: usize) -> [Vec<f64>; 3] {
    let mut out = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c][i] = px[c];
        }
    }
    out
}

/// Mean SSIM over pixels and channels of two `[H, W, 3]` images.
pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    assert_eq!(a.len(), w * h * 3, "ssim image size");
    assert_eq!(b.len(), w * h * 3, "ssim image size");
    let pa = planes(a, w, h);
    let pb = planes(b, w, h);
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_stats(&pa[c], &pb[c], w, h).map.iter().sum::<f64>();
    }
    total / (3 * w * h) as f64
}
