//! Inverse-mapped bilinear warping, the masked photometric distance and the
//! gradient of a displacement-driven warp with respect to the displacements.

use crate::dataset::AnnotationRecord;
use crate::geom::{DisplacementSolve, DisplacementVector, Homography};
use crate::image::{BilinearSite, ImageBuffer, ValidityMask};
use crate::linalg::inv3;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy)]
struct Site<T> {
    qx: T,
    qy: T,
    inv_w: T,
}

/// Precomputed inverse mapping from an output grid into a source frame.
///
/// Output pixel `p` samples the source at `G·p` with `G = H⁻¹`. Pixels whose
/// sample location leaves `[0, W−1] × [0, H−1]` are invalid and written as 0.
#[derive(Debug, Clone)]
pub struct WarpPlan<T> {
    out_w: usize,
    out_h: usize,
    src_w: usize,
    src_h: usize,
    inverse: [[T; 3]; 3],
    sites: Vec<Option<Site<T>>>,
}

impl<T: Real> WarpPlan<T> {
    pub fn new(h: &Homography<T>, src_w: usize, src_h: usize, out_w: usize, out_h: usize) -> Result<Self> {
        let inverse =
            inv3(h.matrix()).ok_or_else(|| Error::SingularSystem("warp homography is not invertible".into()))?;
        Ok(Self::from_inverse(inverse, src_w, src_h, out_w, out_h, false))
    }

    /// Variant that clamps out-of-frame sample locations to the border
    /// instead of invalidating them, so every pixel with a finite sample
    /// location is kept. Used when a caller fixes the mask itself.
    pub(crate) fn new_clamped(h: &Homography<T>, src_w: usize, src_h: usize, out_w: usize, out_h: usize) -> Result<Self> {
        let inverse =
            inv3(h.matrix()).ok_or_else(|| Error::SingularSystem("warp homography is not invertible".into()))?;
        Ok(Self::from_inverse(inverse, src_w, src_h, out_w, out_h, true))
    }

    fn from_inverse(g: [[T; 3]; 3], src_w: usize, src_h: usize, out_w: usize, out_h: usize, clamp: bool) -> Self {
        let tol = T::lit(1e-6);
        let max_x = T::lit((src_w - 1) as f64);
        let max_y = T::lit((src_h - 1) as f64);
        let mut sites = Vec::with_capacity(out_w * out_h);
        for y in 0..out_h {
            let py = T::lit(y as f64);
            for x in 0..out_w {
                let px = T::lit(x as f64);
                let w = g[2][0] * px + g[2][1] * py + g[2][2];
                if !(w.abs() >= T::singular_eps()) {
                    sites.push(None);
                    continue;
                }
                let inv_w = T::one() / w;
                let qx = (g[0][0] * px + g[0][1] * py + g[0][2]) * inv_w;
                let qy = (g[1][0] * px + g[1][1] * py + g[1][2]) * inv_w;
                let inside = qx >= -tol && qx <= max_x + tol && qy >= -tol && qy <= max_y + tol;
                sites.push((inside || clamp).then(|| Site {
                    qx: qx.max(T::zero()).min(max_x),
                    qy: qy.max(T::zero()).min(max_y),
                    inv_w,
                }));
            }
        }
        Self { out_w, out_h, src_w, src_h, inverse: g, sites }
    }

    pub fn mask(&self) -> ValidityMask {
        let mut m = ValidityMask::filled(self.out_w, self.out_h, false);
        for (i, s) in self.sites.iter().enumerate() {
            if s.is_some() {
                m.set(i % self.out_w, i / self.out_w, true);
            }
        }
        m
    }

    /// Resamples `src`. Every output row depends only on its own sites, so
    /// the result does not depend on evaluation order.
    pub fn apply(&self, src: &ImageBuffer<T>) -> Result<(ImageBuffer<T>, ValidityMask)> {
        self.check_source(src)?;
        let mut out = ImageBuffer::zeros(self.out_w, self.out_h, src.channels());
        let n = self.out_w * self.out_h;
        for (i, s) in self.sites.iter().enumerate() {
            if let Some(s) = s {
                let b = BilinearSite::new(s.qx, s.qy, self.src_w, self.src_h);
                for c in 0..src.channels() {
                    out.data_mut()[c * n + i] = b.sample(src, c);
                }
            }
        }
        Ok((out, self.mask()))
    }

    /// Like [`apply`](Self::apply), but also invalidates output pixels whose
    /// bilinear footprint touches a source pixel marked invalid in
    /// `src_mask`. Chained warps use this so zero fill never leaks into a
    /// pixel reported as valid.
    pub fn apply_masked(
        &self,
        src: &ImageBuffer<T>,
        src_mask: &ValidityMask,
    ) -> Result<(ImageBuffer<T>, ValidityMask)> {
        if src_mask.width() != self.src_w || src_mask.height() != self.src_h {
            return Err(Error::ShapeMismatch("source mask does not match the plan".into()));
        }
        let (out, mut mask) = self.apply(src)?;
        for (i, s) in self.sites.iter().enumerate() {
            let Some(s) = s else { continue };
            let b = BilinearSite::new(s.qx, s.qy, self.src_w, self.src_h);
            let (wx, wy) = (b.fx > T::zero(), b.fy > T::zero());
            let footprint_ok = src_mask.get(b.x0, b.y0)
                && (!wx || src_mask.get(b.x1, b.y0))
                && (!wy || src_mask.get(b.x0, b.y1))
                && (!(wx && wy) || src_mask.get(b.x1, b.y1));
            if !footprint_ok {
                mask.set(i % self.out_w, i / self.out_w, false);
            }
        }
        Ok((out, mask))
    }

    /// Contracts `upstream` (gradient of a scalar with respect to every
    /// output pixel, planar layout) with the derivative of the output with
    /// respect to the entries of `G = H⁻¹`.
    fn backprop_inverse(&self, src: &ImageBuffer<T>, upstream: &[T]) -> Result<[[T; 3]; 3]> {
        self.check_source(src)?;
        let n = self.out_w * self.out_h;
        if upstream.len() != n * src.channels() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient has {} entries, expected {}",
                upstream.len(),
                n * src.channels()
            )));
        }
        let mut grad = [[T::zero(); 3]; 3];
        for (i, s) in self.sites.iter().enumerate() {
            let Some(s) = s else { continue };
            let b = BilinearSite::new(s.qx, s.qy, self.src_w, self.src_h);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for c in 0..src.channels() {
                let u = upstream[c * n + i];
                if u != T::zero() {
                    let (dx, dy) = b.gradient(src, c);
                    gx += u * dx;
                    gy += u * dy;
                }
            }
            if gx == T::zero() && gy == T::zero() {
                continue;
            }
            let p = [T::lit((i % self.out_w) as f64), T::lit((i / self.out_w) as f64), T::one()];
            let gw = -(gx * s.qx + gy * s.qy);
            for k in 0..3 {
                let pk = p[k] * s.inv_w;
                grad[0][k] += gx * pk;
                grad[1][k] += gy * pk;
                grad[2][k] += gw * pk;
            }
        }
        Ok(grad)
    }

    fn check_source(&self, src: &ImageBuffer<T>) -> Result<()> {
        if src.width() != self.src_w || src.height() != self.src_h {
            return Err(Error::ShapeMismatch(format!(
                "plan built for {}×{} source, got {}×{}",
                self.src_w,
                self.src_h,
                src.width(),
                src.height()
            )));
        }
        Ok(())
    }
}

/// Output pixel `p` takes the bilinear sample of `src` at `H⁻¹·p`.
pub fn warp_image<T: Real>(
    src: &ImageBuffer<T>,
    h: &Homography<T>,
    out_width: usize,
    out_height: usize,
) -> Result<(ImageBuffer<T>, ValidityMask)> {
    WarpPlan::new(h, src.width(), src.height(), out_width, out_height)?.apply(src)
}

/// Warps `img` by the homography of `d` at its own size.
pub fn warp_by_displacement<T: Real>(
    img: &ImageBuffer<T>,
    d: &DisplacementVector<T>,
) -> Result<(ImageBuffer<T>, ValidityMask)> {
    let solve = DisplacementSolve::new(d, T::lit(img.width() as f64), T::lit(img.height() as f64))?;
    warp_image(img, &solve.homography, img.width(), img.height())
}

/// Rectifies an annotated image with its ground-truth displacement. When the
/// image is not at the record's original size the label is rescaled first.
pub fn unwarp_to_fronto_parallel<T: Real>(
    img: &ImageBuffer<T>,
    record: &AnnotationRecord,
) -> Result<(ImageBuffer<T>, ValidityMask)> {
    let d = record.label_at(img.width(), img.height())?;
    warp_by_displacement(img, &d.cast())
}

/// [`warp_by_displacement`] for an input that carries its own validity mask.
pub fn warp_by_displacement_masked<T: Real>(
    img: &ImageBuffer<T>,
    img_mask: &ValidityMask,
    d: &DisplacementVector<T>,
) -> Result<(ImageBuffer<T>, ValidityMask)> {
    let warp = DisplacementWarp::new(d, img.width(), img.height())?;
    warp.plan.apply_masked(img, img_mask)
}

/// Mean of `|a − b|` over masked pixels and all channels.
pub fn photometric_l1<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>, mask: &ValidityMask) -> Result<T> {
    check_pair(a, b, mask)?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let n = a.width() * a.height();
    let mut sum = T::zero();
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for i in 0..n {
            if mask.bits()[i] {
                sum += (pa[i] - pb[i]).abs();
            }
        }
    }
    Ok(sum / T::lit((count * a.channels()) as f64))
}

/// Gradient of [`photometric_l1`] with respect to `a` (planar layout). The
/// subgradient at `a == b` is taken as 0.
pub fn photometric_l1_grad<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>, mask: &ValidityMask) -> Result<Vec<T>> {
    check_pair(a, b, mask)?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = T::one() / T::lit((count * a.channels()) as f64);
    let n = a.width() * a.height();
    let mut g = vec![T::zero(); a.data().len()];
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for i in 0..n {
            if mask.bits()[i] {
                let diff = pa[i] - pb[i];
                g[c * n + i] = if diff > T::zero() {
                    scale
                } else if diff < T::zero() {
                    -scale
                } else {
                    T::zero()
                };
            }
        }
    }
    Ok(g)
}

fn check_pair<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>, mask: &ValidityMask) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("photometric operands differ in shape".into()));
    }
    if mask.width() != a.width() || mask.height() != a.height() {
        return Err(Error::ShapeMismatch("mask does not match image size".into()));
    }
    Ok(())
}

/// Gradient of `Σ upstream · warp(src, H(d))` with respect to the four
/// displacements, with `src` held constant and the output at source size.
///
/// The chain runs through the bilinear weights, the entries of `H⁻¹` and the
/// adjoint of the DLT solve that produced `H`.
pub fn warp_gradient<T: Real>(src: &ImageBuffer<T>, d: &DisplacementVector<T>, upstream: &[T]) -> Result<[T; 4]> {
    let (w, h) = (src.width(), src.height());
    let solve = DisplacementSolve::new(d, T::lit(w as f64), T::lit(h as f64))?;
    let plan = WarpPlan::new(&solve.homography, w, h, w, h)?;
    displacement_backprop(&solve, &plan, src, upstream)
}

/// Shared tail of [`warp_gradient`] for callers that already hold the plan.
pub(crate) fn displacement_backprop<T: Real>(
    solve: &DisplacementSolve<T>,
    plan: &WarpPlan<T>,
    src: &ImageBuffer<T>,
    upstream: &[T],
) -> Result<[T; 4]> {
    let grad_g = plan.backprop_inverse(src, upstream)?;
    let g = &plan.inverse;
    // G = H⁻¹  ⇒  ∂L/∂H = −Gᵀ (∂L/∂G) Gᵀ
    let mut tmp = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            tmp[r][c] = (0..3).map(|k| g[k][r] * grad_g[k][c]).sum();
        }
    }
    let mut grad_h = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            grad_h[r][c] = -(0..3).map(|k| tmp[r][k] * g[c][k]).sum::<T>();
        }
    }
    solve.backprop(&grad_h)
}

/// Warp plus everything needed to differentiate it with respect to `d`.
#[derive(Debug, Clone)]
pub(crate) struct DisplacementWarp<T> {
    pub solve: DisplacementSolve<T>,
    pub plan: WarpPlan<T>,
}

impl<T: Real> DisplacementWarp<T> {
    pub fn new(d: &DisplacementVector<T>, w: usize, h: usize) -> Result<Self> {
        let solve = DisplacementSolve::new(d, T::lit(w as f64), T::lit(h as f64))?;
        let plan = WarpPlan::new(&solve.homography, w, h, w, h)?;
        Ok(Self { solve, plan })
    }

    pub fn new_clamped(d: &DisplacementVector<T>, w: usize, h: usize) -> Result<Self> {
        let solve = DisplacementSolve::new(d, T::lit(w as f64), T::lit(h as f64))?;
        let plan = WarpPlan::new_clamped(&solve.homography, w, h, w, h)?;
        Ok(Self { solve, plan })
    }

    pub fn backprop(&self, src: &ImageBuffer<T>, upstream: &[T]) -> Result<[T; 4]> {
        displacement_backprop(&self.solve, &self.plan, src, upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::displacement_to_homography;

    fn gradient_image(w: usize, h: usize) -> ImageBuffer<f64> {
        ImageBuffer::from_fn(w, h, 1, |_, x, _| x as f64 / (w - 1) as f64)
    }

    fn smooth_image(w: usize, h: usize, channels: usize) -> ImageBuffer<f64> {
        ImageBuffer::from_fn(w, h, channels, |c, x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2 * (0.21 * x + 0.13 * y + c as f64).sin() + 0.15 * (0.17 * y - 0.05 * x).cos()
        })
    }

    #[test]
    fn identity_warp_is_lossless() {
        let img = smooth_image(9, 7, 3);
        let (out, mask) = warp_image(&img, &Homography::identity(), 9, 7).unwrap();
        assert_eq!(out, img);
        assert!(mask.all_valid());
    }

    #[test]
    fn vertical_translation_shifts_rows() {
        // Columns vary, rows repeat: a shift by 4 leaves visible rows
        // unchanged and invalidates the top 4.
        let img = ImageBuffer::<f64>::from_fn(8, 8, 1, |_, x, y| (x * 8 + y) as f64 / 64.0);
        let (out, mask) = warp_image(&img, &Homography::translation(0.0, 4.0), 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if y < 4 {
                    assert!(!mask.get(x, y));
                    assert_eq!(out.get(0, x, y), 0.0);
                } else {
                    assert!(mask.get(x, y));
                    assert_eq!(out.get(0, x, y), img.get(0, x, y - 4));
                }
            }
        }
        let g = gradient_image(8, 8);
        let (out, _) = warp_image(&g, &Homography::translation(0.0, 4.0), 8, 8).unwrap();
        assert_eq!(out.get(0, 5, 6), g.get(0, 5, 2));
    }

    #[test]
    fn warp_then_inverse_recovers_interior() {
        let img = smooth_image(48, 40, 1);
        let h = displacement_to_homography(&DisplacementVector([4.0, 0.0, 0.0, -3.0]), 48.0, 40.0).unwrap();
        let (fwd, m1) = warp_image(&img, &h, 48, 40).unwrap();
        let (back, m2) = warp_image(&fwd, &h.invert().unwrap(), 48, 40).unwrap();
        // m2 alone does not know which samples of `fwd` were zero fill.
        let mut valid = m2.clone();
        for y in 0..40 {
            for x in 0..48 {
                if let Ok(p) = h.apply(crate::Point::new(x as f64, y as f64)) {
                    let (px, py) = (p.x.round() as isize, p.y.round() as isize);
                    let inside = px >= 0 && py >= 0 && (px as usize) < 48 && (py as usize) < 40;
                    if !inside || !m1.get(px as usize, py as usize) {
                        valid.set(x, y, false);
                    }
                } else {
                    valid.set(x, y, false);
                }
            }
        }
        let interior = valid.eroded(2);
        assert!(interior.count() > 500);
        for y in 0..40 {
            for x in 0..48 {
                if interior.get(x, y) {
                    assert!((back.get(0, x, y) - img.get(0, x, y)).abs() <= 0.02);
                }
            }
        }
    }

    #[test]
    fn warp_keeps_range() {
        let img = ImageBuffer::<f64>::from_fn(20, 20, 3, |c, x, y| if (x + y + c) % 2 == 0 { 1.0 } else { 0.0 });
        let h = displacement_to_homography(&DisplacementVector([0.0, 3.3, -2.7, 0.0]), 20.0, 20.0).unwrap();
        let (out, _) = warp_image(&img, &h, 20, 20).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn photometric_examples() {
        let a = smooth_image(4, 4, 3);
        let mask = ValidityMask::filled(4, 4, true);
        assert_eq!(photometric_l1(&a, &a, &mask).unwrap(), 0.0);

        let lo = ImageBuffer::<f64>::from_fn(4, 4, 1, |_, _, _| 0.25);
        let hi = ImageBuffer::<f64>::from_fn(4, 4, 1, |_, _, _| 0.75);
        assert_eq!(photometric_l1(&lo, &hi, &mask).unwrap(), 0.5);

        // Half of the 8 masked pixels differ by 0.2.
        let mut half = ValidityMask::filled(4, 4, false);
        for y in 0..2 {
            for x in 0..4 {
                half.set(x, y, true);
            }
        }
        let b = ImageBuffer::<f64>::from_fn(4, 4, 1, |_, x, y| if y == 0 { 0.45 } else { 0.25 } + 0.0 * x as f64);
        let v = photometric_l1(&lo, &b, &half).unwrap();
        assert!((v - 0.1).abs() < 1e-15);

        let empty = ValidityMask::filled(4, 4, false);
        assert!(matches!(photometric_l1(&lo, &hi, &empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn zero_upstream_and_flat_source_give_zero_gradient() {
        let img = smooth_image(16, 16, 1);
        let d = DisplacementVector([2.0, 0.0, 0.0, 1.0]);
        let g = warp_gradient(&img, &d, &vec![0.0; 256]).unwrap();
        assert_eq!(g, [0.0; 4]);

        let flat = ImageBuffer::<f64>::from_fn(16, 16, 1, |_, _, _| 0.4);
        let g = warp_gradient(&flat, &d, &vec![1.0; 256]).unwrap();
        assert_eq!(g, [0.0; 4]);
    }

    #[test]
    fn warp_gradient_matches_central_differences() {
        let (w, h) = (32, 32);
        let img = smooth_image(w, h, 3);
        for base in [[2.3, 0.0, 0.0, -1.7], [0.0, -2.9, 3.4, 0.0]] {
            // Upstream weights vanish near the mask boundary, where the
            // zero fill makes the warp discontinuous in `d`.
            let (_, mask) = warp_by_displacement(&img, &DisplacementVector(base)).unwrap();
            let interior = mask.eroded(2);
            let upstream: Vec<f64> = (0..w * h * 3)
                .map(|i| if interior.bits()[i % (w * h)] { ((i * 7919 % 101) as f64 / 50.0) - 1.0 } else { 0.0 })
                .collect();
            let objective = |d: [f64; 4]| {
                let (out, _) = warp_by_displacement(&img, &DisplacementVector(d)).unwrap();
                out.data().iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
            };
            let g = warp_gradient(&img, &DisplacementVector(base), &upstream).unwrap();
            for i in 0..4 {
                let (mut p, mut m) = (base, base);
                p[i] += 1e-3;
                m[i] -= 1e-3;
                let fd = (objective(p) - objective(m)) / 2e-3;
                let rel = (g[i] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel <= 1e-3, "corner {i}: analytic {} vs fd {fd} (rel {rel})", g[i]);
            }
        }
    }
}
