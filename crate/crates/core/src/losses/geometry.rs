//! Confidence-masked, similarity-aligned single-directional Chamfer loss.

use nalgebra::{Matrix3, SVD};

use super::{LossWeights, ViewLoss};
use crate::error::{Error, Result};
use crate::scene::{GeometryMask, PredictedPointMap, ReferencePointMap, Vec3};

/// Keeps the `⌈ratio · HW⌉` most confident pixels; ties go to the lower
/// row-major index.
pub fn build_confidence_mask(
    confidence: &[f64],
    width: usize,
    height: usize,
    ratio: f64,
) -> Result<GeometryMask> {
    let n = width * height;
    if confidence.len() != n {
        return Err(Error::mismatch("confidence map", n, confidence.len()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let keep = mask_count(ratio, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    Ok(GeometryMask {
        width,
        height,
        mask,
        ratio,
    })
}

/// `⌈ratio · n⌉`, robust to the product landing a few ulps above an integer.
fn mask_count(ratio: f64, n: usize) -> usize {
    let exact = ratio * n as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() <= 1e-9 * exact.max(1.0) {
        rounded
    } else {
        exact.ceil()
    };
    (k as usize).clamp(1.min(n), n)
}

/// `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

/// Least-squares similarity mapping `source` onto `target`.
pub fn umeyama(source: &[Vec3], target: &[Vec3]) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(Error::DegenerateAlignment("point count mismatch"));
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::DegenerateAlignment("fewer than 3 points"));
    }
    let inv_n = 1.0 / n as f64;
    let mean_src = source.iter().sum::<Vec3>() * inv_n;
    let mean_dst = target.iter().sum::<Vec3>() * inv_n;
    let var_src = source
        .iter()
        .map(|p| (p - mean_src).norm_squared())
        .sum::<f64>()
        * inv_n;
    let spread = source.iter().map(|p| p.norm_squared()).sum::<f64>() * inv_n;
    if !(var_src > 1e-24 * spread.max(1.0)) {
        return Err(Error::DegenerateAlignment("zero source variance"));
    }
    if source == target {
        return Ok(SimilarityTransform::identity());
    }

    let mut cov = Matrix3::zeros();
    for (s, d) in source.iter().zip(target) {
        cov += (d - mean_dst) * (s - mean_src).transpose();
    }
    cov *= inv_n;

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let sign = if (u * v_t).determinant() < 0.0 { -1.0 } else { 1.0 };
    let signs = Vec3::new(1.0, 1.0, sign);
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = svd.singular_values.dot(&signs) / var_src;
    let translation = mean_dst - rotation * mean_src * scale;
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Uniform-grid exact nearest-neighbour index over a fixed point set.
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: points of cell `c` are `entries[starts[c]..starts[c+1]]`.
    starts: Vec<usize>,
    entries: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let longest = extent.max();
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if longest > 0.0 { longest / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).floor() as usize + 1).min(per_axis as usize + 1));
        let cell_count = dims[0] * dims[1] * dims[2];

        let mut grid = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: vec![0; cell_count + 1],
            entries: vec![0; points.len()],
        };
        let ids: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        for &c in &ids {
            grid.starts[c + 1] += 1;
        }
        for c in 0..cell_count {
            grid.starts[c + 1] += grid.starts[c];
        }
        let mut fill = grid.starts.clone();
        for (i, &c) in ids.iter().enumerate() {
            grid.entries[fill[c]] = i;
            fill[c] += 1;
        }
        Ok(grid)
    }

    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let f = ((p[a] - self.origin[a]) / self.cell).floor();
            if f <= 0.0 {
                0
            } else {
                (f as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Index and squared distance of the nearest point; ties go to the lower index.
    pub fn nearest(&self, q: &Vec3) -> (usize, f64) {
        let c = self.cell_of(q).map(|v| v as i64);
        let dims = self.dims.map(|v| v as i64);
        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |cell: [i64; 3], best: &mut (usize, f64)| {
            let f = self.flat(cell.map(|v| v as usize));
            for &i in &self.entries[self.starts[f]..self.starts[f + 1]] {
                let d2 = (self.points[i] - q).norm_squared();
                if d2 < best.1 || (d2 == best.1 && i < best.0) {
                    *best = (i, d2);
                }
            }
        };
        for r in 0i64.. {
            let lo = [0, 1, 2].map(|a| (c[a] - r).max(0));
            let hi = [0, 1, 2].map(|a| (c[a] + r).min(dims[a] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let ring = (x - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                        if ring == r {
                            consider([x, y, z], &mut best);
                        }
                    }
                }
            }
            // Distance from q to the nearest cell outside the searched block.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if c[a] - r > 0 {
                    let face = self.origin[a] + (c[a] - r) as f64 * self.cell;
                    bound = bound.min(q[a] - face);
                }
                if c[a] + r < dims[a] - 1 {
                    let face = self.origin[a] + (c[a] + r + 1) as f64 * self.cell;
                    bound = bound.min(face - q[a]);
                }
            }
            if bound == f64::INFINITY {
                break;
            }
            let bound = (bound - 1e-9 * self.cell).max(0.0);
            if best.1 < bound * bound {
                break;
            }
        }
        best
    }
}

/// Mean squared distance from each source point to its nearest target point,
/// with the gradient on each source point (nearest neighbour held fixed).
pub fn chamfer_single(source: &[Vec3], target: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    if source.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let grid = PointGrid::new(target)?;
    let inv_n = 1.0 / source.len() as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(source.len());
    for p in source {
        let (j, d2) = grid.nearest(p);
        sum += d2;
        grads.push((p - target[j]) * (2.0 * inv_n));
    }
    Ok((sum / source.len() as f64, grads))
}

/// Geometry loss with the per-view alignment and mask that produced it.
#[derive(Clone, Debug)]
pub struct GeometryLoss {
    pub loss: ViewLoss<Vec<Vec3>>,
    pub transforms: Vec<SimilarityTransform>,
    pub masks: Vec<GeometryMask>,
}

/// Per view: mask by reference confidence, align the masked prediction to the
/// masked reference, then take the Chamfer distance from the aligned
/// prediction to the reference. The alignment is a constant for gradients.
pub fn loss_geo(
    pred: &[PredictedPointMap],
    reference: &[ReferencePointMap],
    w: &LossWeights,
) -> Result<GeometryLoss> {
    if pred.is_empty() || pred.len() != reference.len() {
        return Err(Error::mismatch("loss_geo views", reference.len(), pred.len()));
    }
    let mut per_view = Vec::new();
    let mut grads = Vec::new();
    let mut transforms = Vec::new();
    let mut masks = Vec::new();
    for (p, r) in pred.iter().zip(reference) {
        if (p.width, p.height) != (r.width, r.height) {
            return Err(Error::mismatch(
                "loss_geo point map",
                format!("{}x{}", r.width, r.height),
                format!("{}x{}", p.width, p.height),
            ));
        }
        let mask = build_confidence_mask(&r.confidence, r.width, r.height, w.conf_ratio)?;
        let idx: Vec<usize> = mask.selected().collect();
        let src: Vec<Vec3> = idx.iter().map(|&i| p.points[i]).collect();
        let dst: Vec<Vec3> = idx.iter().map(|&i| r.points[i]).collect();
        let tf = umeyama(&src, &dst)?;
        let aligned: Vec<Vec3> = src.iter().map(|x| tf.apply(x)).collect();
        let (value, g_aligned) = chamfer_single(&aligned, &dst)?;
        let back = tf.rotation.transpose() * tf.scale;
        let mut g = vec![Vec3::zeros(); p.points.len()];
        for (&i, ga) in idx.iter().zip(&g_aligned) {
            g[i] = back * ga;
        }
        per_view.push(value);
        grads.push(g);
        transforms.push(tf);
        masks.push(mask);
    }
    Ok(GeometryLoss {
        loss: ViewLoss {
            value: per_view.iter().sum(),
            per_view,
            grads,
        },
        transforms,
        masks,
    })
}
