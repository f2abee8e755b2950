use super::ViewLoss;
use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

/// Vectors with norm below this have no defined direction.
const MIN_NORM: f64 = 1e-12;

/// Sum over views of `1 − mean cosine similarity` between decoded and
/// teacher features. Pixels where either vector has no direction are left
/// out of the mean; a view with no such pixels contributes 0.
pub fn loss_sem(decoded: &[ImageBuffer], teacher: &[ImageBuffer]) -> Result<ViewLoss<ImageBuffer>> {
    if decoded.is_empty() || decoded.len() != teacher.len() {
        return Err(Error::mismatch("loss_sem views", decoded.len(), teacher.len()));
    }
    let mut per_view = Vec::with_capacity(decoded.len());
    let mut grads = Vec::with_capacity(decoded.len());
    for (x_img, t_img) in decoded.iter().zip(teacher) {
        x_img.check_shape(t_img, "loss_sem feature map")?;
        let mut g = ImageBuffer::zeros(x_img.width, x_img.height, x_img.channels);
        let mut cos_sum = 0.0;
        let mut valid = Vec::new();
        for p in 0..x_img.pixel_count() {
            let x = x_img.pixel(p);
            let t = t_img.pixel(p);
            let nx2: f64 = x.iter().map(|v| v * v).sum();
            let nt2: f64 = t.iter().map(|v| v * v).sum();
            if nx2.sqrt() < MIN_NORM || nt2.sqrt() < MIN_NORM {
                continue;
            }
            let dot: f64 = x.iter().zip(t).map(|(a, b)| a * b).sum();
            let inv = 1.0 / (nx2 * nt2).sqrt();
            let cos = dot * inv;
            cos_sum += cos;
            // d cos / dx = t/(|x||t|) − cos·x/|x|²
            let c2 = cos / nx2;
            valid.push((p, inv, c2));
        }
        let n = valid.len();
        let value = if n == 0 { 0.0 } else { 1.0 - cos_sum / n as f64 };
        for (p, inv, c2) in valid {
            let t = t_img.pixel(p);
            let x = x_img.pixel(p);
            for ((gv, tv), xv) in g.pixel_mut(p).iter_mut().zip(t).zip(x) {
                *gv = -(tv * inv - xv * c2) / n as f64;
            }
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

    fn map(v: [f64; 3]) -> ImageBuffer {
        ImageBuffer::from_data(2, 1, 3, [v, v].concat()).unwrap()
    }

    #[test]
    fn examples() {
        let t = map([1.0, 2.0, -0.5]);
        let l = loss_sem(&[t.clone()], &[t.clone()]).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grads[0].data.iter().all(|&g| g == 0.0));
        let neg = map([-1.0, -2.0, 0.5]);
        assert!((loss_sem(&[neg], &[t.clone()]).unwrap().value - 2.0).abs() < 1e-15);
        let orth = map([2.0, -1.0, 0.0]);
        assert!((loss_sem(&[orth], &[t]).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_pixels_are_excluded() {
        let mut t = map([1.0, 0.0, 0.0]);
        t.pixel_mut(1).fill(0.0);
        let l = loss_sem(&[t.clone()], &[t.clone()]).unwrap();
        assert_eq!(l.value, 0.0);
        let zero = ImageBuffer::zeros(2, 1, 3);
        assert_eq!(loss_sem(&[zero.clone()], &[zero]).unwrap().value, 0.0);
    }

    #[test]
    fn scale_invariance() {
        let x = ImageBuffer::from_data(2, 1, 3, vec![0.2, -0.4, 1.0, 3.0, 0.1, -2.0]).unwrap();
        let t = ImageBuffer::from_data(2, 1, 3, vec![1.0, 0.5, 0.3, -1.0, 2.0, 0.7]).unwrap();
        let mut scaled = x.clone();
        scaled.pixel_mut(0).iter_mut().for_each(|v| *v *= 7.5);
        scaled.pixel_mut(1).iter_mut().for_each(|v| *v *= 0.01);
        let a = loss_sem(&[x], &[t.clone()]).unwrap().value;
        let b = loss_sem(&[scaled], &[t]).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }
}
