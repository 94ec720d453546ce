use crate::autodiff::{AutodiffError, BackwardCtx, Tape, Var};

use super::metrics::{blur, planes, ssim_stats};

fn check_image(tape: &Tape, image: Var, gt: &[f64]) -> Result<(usize, usize), AutodiffError> {
    let s = tape.shape(image);
    if s.len() != 3 || s[2] != 3 || tape.value(image).len() != gt.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "photometric loss",
            lhs: s.to_vec(),
            rhs: vec![gt.len()],
        });
    }
    Ok((s[1], s[0]))
}

/// Mean absolute difference between an `[H, W, 3]` image and `gt`.
pub fn l1_loss(tape: &mut Tape, image: Var, gt: &[f64]) -> Result<Var, AutodiffError> {
    check_image(tape, image, gt)?;
    let shape = tape.shape(image).to_vec();
    let target = tape.constant(&shape, gt.to_vec())?;
    let d = tape.sub(image, target)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean SSIM of an `[H, W, 3]` image against a constant target, as one fused
/// op with an analytic backward pass.
pub fn ssim_op(tape: &mut Tape, image: Var, gt: &[f64]) -> Result<Var, AutodiffError> {
    let (w, h) = check_image(tape, image, gt)?;
    let xs = planes(tape.value(image), w, h);
    let ys = planes(gt, w, h);
    let stats: Vec<_> = (0..3).map(|c| ssim_stats(&xs[c], &ys[c], w, h)).collect();
    let n = (3 * w * h) as f64;
    let value = stats.iter().map(|s| s.map.iter().sum::<f64>()).sum::<f64>() / n;
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let g = ctx.grad_output[0] / n;
        let mut out = vec![0.0; w * h * 3];
        for (c, st) in stats.iter().enumerate() {
            let m = w * h;
            let (mut ga, mut gb, mut gc) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
            for i in 0..m {
                let (mx, my, s) = (st.mu_x[i], st.mu_y[i], st.map[i]);
                let dd = st.d1[i] * st.d2[i];
                let b = -s / st.d2[i];
                let cc = 2.0 * st.n1[i] / dd;
                let direct = 2.0 * my * st.n2[i] / dd - s * 2.0 * mx / st.d1[i];
                ga[i] = g * (direct - 2.0 * mx * b - my * cc);
                gb[i] = g * b;
                gc[i] = g * cc;
            }
            let (ga, gb, gc) = (blur(&ga, w, h), blur(&gb, w, h), blur(&gc, w, h));
            for i in 0..m {
                out[i * 3 + c] = ga[i] + 2.0 * xs[c][i] * gb[i] + ys[c][i] * gc[i];
            }
        }
        vec![Some(out)]
    });
    tape.custom("ssim", &[image], vec![1], vec![value], backward)
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)`.
pub fn photometric_loss(tape: &mut Tape, image: Var, gt: &[f64], lambda: f64) -> Result<Var, AutodiffError> {
    let l1 = l1_loss(tape, image, gt)?;
    let l1 = tape.scale(l1, 1.0 - lambda);
    if lambda == 0.0 {
        return Ok(l1);
    }
    let s = ssim_op(tape, image, gt)?;
    let d = tape.scale(s, -lambda);
    let d = tape.add_scalar(d, lambda);
    tape.add(l1, d)
}
