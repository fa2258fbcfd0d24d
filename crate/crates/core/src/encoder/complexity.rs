use serde::Serialize;

use crate::config::EncoderKind;

/// Analytic cost of one encoder layer on an `H×W×C` map.
///
/// `core_macs` is the headline term used to compare the two layer kinds:
/// `(HW)²·C²` for attention (HW tokens, each at `HW·C²`) and
/// `HW·(K²·C + C²)` for the separable convolution, reading the kernel size
/// `k` as the kernel area `K²`. `exact_macs` counts the multiply-adds the
/// implemented layer actually performs, excluding normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCount {
    pub tokens: u64,
    pub core_macs: u128,
    pub projection_macs: u128,
    pub exact_macs: u128,
    pub parameters: u64,
}

pub fn count_ops(kind: EncoderKind, h: u64, w: u64, c: u64, k: u64) -> OpCount {
    let hw = (h * w) as u128;
    let (c128, k2) = (c as u128, (k * k) as u128);
    match kind {
        EncoderKind::Attention => {
            let projection = 3 * hw * c128 * c128;
            OpCount {
                tokens: h * w,
                core_macs: hw * hw * c128 * c128,
                projection_macs: projection,
                // QKᵀ and A·V
                exact_macs: projection + 2 * hw * hw * c128,
                parameters: 3 * c * c + 3 * c + 2 * c,
            }
        }
        EncoderKind::Dsconv => {
            let pointwise = hw * c128 * c128;
            let core = hw * (k2 * c128 + c128 * c128);
            OpCount {
                tokens: h * w,
                core_macs: core,
                projection_macs: pointwise,
                exact_macs: core,
                parameters: k * k * c + c * c + c + 2 * c,
            }
        }
    }
}

/// `attention.core_macs / dsconv.core_macs`, which simplifies to
/// `HW·C / (K² + C)`.
pub fn core_ratio(h: u64, w: u64, c: u64, k: u64) -> f64 {
    let a = count_ops(EncoderKind::Attention, h, w, c, k).core_macs as f64;
    let d = count_ops(EncoderKind::Dsconv, h, w, c, k).core_macs as f64;
    a / d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_scale_ratio_matches_closed_form() {
        let a = count_ops(EncoderKind::Attention, 32, 32, 256, 3);
        assert_eq!(a.core_macs, 32 * 32 * (32 * 32) * 256 * 256);
        let r = core_ratio(32, 32, 256, 3);
        let expect = (32.0 * 32.0 * 256.0) / (9.0 + 256.0);
        assert!((r - expect).abs() / expect < 1e-12);
    }

    #[test]
    fn single_pixel() {
        let a = count_ops(EncoderKind::Attention, 1, 1, 8, 3);
        let d = count_ops(EncoderKind::Dsconv, 1, 1, 8, 3);
        assert_eq!(a.tokens, 1);
        assert_eq!(d.core_macs, 9 * 8 + 64);
    }

    #[test]
    fn doubling_channels_quadruples_square_term() {
        let (h, w, c, k) = (4u64, 4u64, 16u64, 3u64);
        let hw = (h * w) as u128;
        let a1 = count_ops(EncoderKind::Attention, h, w, c, k).core_macs;
        let a2 = count_ops(EncoderKind::Attention, h, w, 2 * c, k).core_macs;
        assert_eq!(a2, 4 * a1);
        let d1 = count_ops(EncoderKind::Dsconv, h, w, c, k).core_macs - hw * (k * k * c) as u128;
        let d2 =
            count_ops(EncoderKind::Dsconv, h, w, 2 * c, k).core_macs - hw * (k * k * 2 * c) as u128;
        assert_eq!(d2, 4 * d1);
    }

    proptest! {
        #[test]
        fn dsconv_cheaper_beyond_kernel_area(h in 1u64..64, w in 1u64..64, c in 1u64..512, kh in 0u64..4) {
            let k = 2 * kh + 1;
            prop_assume!(h * w > k * k + 1);
            let a = count_ops(EncoderKind::Attention, h, w, c, k);
            let d = count_ops(EncoderKind::Dsconv, h, w, c, k);
            prop_assert!(d.core_macs < a.core_macs);
            prop_assert!(d.exact_macs < a.exact_macs);
        }
    }
}
