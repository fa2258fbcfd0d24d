use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::polygon::{clip_generic, shoelace};
use super::rbox::corners;
use super::{Dual, Real, RotatedBox};

fn iou_generic<T: Real>(a: [T; 5], b: [T; 5]) -> T {
    let pa = corners(a);
    let pb = corners(b);
    let inter_poly = clip_generic(&pa, &pb);
    let inter = shoelace(&inter_poly);
    if inter.re() <= 0.0 {
        return T::cst(0.0);
    }
    let area_a = a[2] * a[3];
    let area_b = b[2] * b[3];
    inter / (area_a + area_b - inter)
}

/// Exact IoU of two oriented rectangles via convex clipping.
///
/// The pair is put in a canonical order before clipping, so swapping the
/// arguments gives a bit-identical result.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let (ka, kb) = (a.to_array(), b.to_array());
    if ka == kb {
        return 1.0;
    }
    let a_first = ka
        .iter()
        .zip(&kb)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .is_none_or(|o| o.is_lt());
    let (p, q) = if a_first { (ka, kb) } else { (kb, ka) };
    iou_generic(p, q).clamp(0.0, 1.0)
}

/// IoU of a raw predicted box `(cx, cy, w, h, alpha)` against a fixed box,
/// with its gradient w.r.t. the five predicted parameters.
pub fn iou_with_grad(pred: [f64; 5], target: &RotatedBox) -> (f64, [f64; 5]) {
    let p: [Dual<5>; 5] = std::array::from_fn(|i| Dual::var(pred[i], i));
    let t = target.to_array().map(Dual::<5>::cst);
    let r = iou_generic(p, t);
    (r.re, r.eps)
}

/// Closed-form IoU of two axis-aligned boxes in center form.
pub fn axis_aligned_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let ix = ((a.cx + 0.5 * a.w).min(b.cx + 0.5 * b.w) - (a.cx - 0.5 * a.w).max(b.cx - 0.5 * b.w))
        .max(0.0);
    let iy = ((a.cy + 0.5 * a.h).min(b.cy + 0.5 * b.h) - (a.cy - 0.5 * a.h).max(b.cy - 0.5 * b.h))
        .max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Monte-Carlo IoU estimate from uniform samples over the bounding rectangle
/// of both boxes.
pub fn monte_carlo_iou(a: &RotatedBox, b: &RotatedBox, n_samples: usize, seed: u64) -> f64 {
    assert!(n_samples >= 1, "monte_carlo_iou needs at least one sample");
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for v in a
        .to_polygon()
        .vertices()
        .iter()
        .chain(b.to_polygon().vertices())
    {
        x0 = x0.min(v[0]);
        y0 = y0.min(v[1]);
        x1 = x1.max(v[0]);
        y1 = y1.max(v[1]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..n_samples {
        let x = rng.gen_range(x0..=x1);
        let y = rng.gen_range(y0..=y1);
        let (ia, ib) = (a.contains(x, y), b.contains(x, y));
        both += u64::from(ia && ib);
        either += u64::from(ia || ib);
    }
    if either == 0 {
        return 0.0;
    }
    both as f64 / either as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn bx(cx: f64, cy: f64, w: f64, h: f64, a: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, a).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = bx(0.5, 0.5, 0.3, 0.1, 0.4);
        assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = bx(0.1, 0.1, 0.05, 0.05, 0.0);
        assert_eq!(rotated_iou(&a, &b), 0.0);
        assert_eq!(monte_carlo_iou(&a, &a, 1000, 1), 1.0);
        assert_eq!(monte_carlo_iou(&a, &b, 1000, 1), 0.0);
    }

    #[test]
    fn square_vs_rotated_square() {
        let a = bx(0.5, 0.5, 0.2, 0.2, 0.0);
        let b = bx(0.5, 0.5, 0.2, 0.2, PI / 4.0);
        // intersection is a regular octagon
        let expect = (2f64.sqrt() - 1.0) / (2.0 - 2f64.sqrt());
        assert!((rotated_iou(&a, &b) - expect).abs() < 1e-12);
        let mc = monte_carlo_iou(&a, &b, 200_000, 3);
        assert!((mc - expect).abs() < 1e-2);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let gt = bx(0.5, 0.45, 0.3, 0.15, 0.3);
        let pred = [0.52, 0.47, 0.25, 0.18, 0.1];
        let (_, g) = iou_with_grad(pred, &gt);
        let eps = 1e-6;
        for i in 0..5 {
            let mut hi = pred;
            let mut lo = pred;
            hi[i] += eps;
            lo[i] -= eps;
            let fd = (iou_with_grad(hi, &gt).0 - iou_with_grad(lo, &gt).0) / (2.0 * eps);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    fn arb_box() -> impl Strategy<Value = RotatedBox> {
        (
            0.2f64..0.8,
            0.2f64..0.8,
            0.05f64..0.4,
            0.05f64..0.4,
            -PI..PI,
        )
            .prop_map(|(cx, cy, w, h, a)| bx(cx, cy, w, h, a))
    }

    proptest! {
        #[test]
        fn symmetric_exactly(a in arb_box(), b in arb_box()) {
            let ab = rotated_iou(&a, &b);
            prop_assert_eq!(ab.to_bits(), rotated_iou(&b, &a).to_bits());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn axis_aligned_matches_closed_form(
            a in (0.2f64..0.8, 0.2f64..0.8, 0.05f64..0.4, 0.05f64..0.4),
            b in (0.2f64..0.8, 0.2f64..0.8, 0.05f64..0.4, 0.05f64..0.4),
        ) {
            let a = bx(a.0, a.1, a.2, a.3, 0.0);
            let b = bx(b.0, b.1, b.2, b.3, 0.0);
            prop_assert!((rotated_iou(&a, &b) - axis_aligned_iou(&a, &b)).abs() <= 1e-12);
        }

        #[test]
        fn invariant_under_common_rotation(
            a in arb_box(), b in arb_box(), theta in -PI..PI,
            px in 0.0f64..1.0, py in 0.0f64..1.0,
        ) {
            let base = rotated_iou(&a, &b);
            let ra = a.rotated_about(px, py, theta);
            let rb = b.rotated_about(px, py, theta);
            prop_assert!((rotated_iou(&ra, &rb) - base).abs() <= 1e-12);
        }
    }
}
