use super::{ViewLoss, LossWeights};
use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

/// A perceptual image distance such as LPIPS, returning its value and the
/// gradient with respect to the rendered image.
pub trait PerceptualLoss: Sync {
    fn evaluate(&self, rendered: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, ImageBuffer)>;
}

/// Sum over views of the mean absolute error, plus `λ_LPIPS` times the
/// perceptual term when a hook is given.
pub fn loss_rgb(
    rendered: &[ImageBuffer],
    targets: &[ImageBuffer],
    w: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<ViewLoss<ImageBuffer>> {
    if rendered.is_empty() || rendered.len() != targets.len() {
        return Err(Error::mismatch("loss_rgb views", rendered.len(), targets.len()));
    }
    let mut per_view = Vec::with_capacity(rendered.len());
    let mut grads = Vec::with_capacity(rendered.len());
    for (r, t) in rendered.iter().zip(targets) {
        r.check_shape(t, "loss_rgb image")?;
        let n = r.data.len().max(1) as f64;
        let mut sum = 0.0;
        let mut g = ImageBuffer::zeros(r.width, r.height, r.channels);
        for ((gv, a), b) in g.data.iter_mut().zip(&r.data).zip(&t.data) {
            let d = a - b;
            sum += d.abs();
            // Subgradient of |x| at 0 is taken as 0.
            *gv = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
        let mut value = sum / n;
        if let Some(hook) = perceptual {
            let (pv, pg) = hook.evaluate(r, t)?;
            pg.check_shape(r, "perceptual gradient")?;
            value += w.lambda_lpips * pv;
            crate::grad::axpy(&mut g.data, &pg.data, w.lambda_lpips);
        }
        per_view.push(value);
        grads.push(g);
    }
    Ok(ViewLoss {
        value: per_view.iter().sum(),
        per_view,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> ImageBuffer {
        ImageBuffer::filled(4, 3, 3, v)
    }

    #[test]
    fn examples() {
        let w = LossWeights::default();
        let l = loss_rgb(&[constant(0.3)], &[constant(0.3)], &w, None).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grads[0].data.iter().all(|&g| g == 0.0));
        assert_eq!(loss_rgb(&[constant(0.0)], &[constant(1.0)], &w, None).unwrap().value, 1.0);
        let l = loss_rgb(
            &[constant(0.2), constant(0.0)],
            &[constant(0.0), constant(0.3)],
            &w,
            None,
        )
        .unwrap();
        assert!((l.value - 0.5).abs() < 1e-15);
    }

    struct Constant;
    impl PerceptualLoss for Constant {
        fn evaluate(&self, r: &ImageBuffer, _: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
            Ok((2.0, ImageBuffer::filled(r.width, r.height, r.channels, 1.0)))
        }
    }

    #[test]
    fn perceptual_hook_is_weighted() {
        let w = LossWeights::default();
        let l = loss_rgb(&[constant(0.5)], &[constant(0.5)], &w, Some(&Constant)).unwrap();
        assert!((l.value - 0.1).abs() < 1e-15);
        assert!((l.grads[0].data[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_fail() {
        let w = LossWeights::default();
        assert!(loss_rgb(&[constant(0.0)], &[ImageBuffer::zeros(2, 2, 3)], &w, None).is_err());
        assert!(loss_rgb(&[], &[], &w, None).is_err());
    }
}
