//! Branch-free `sin`/`cos` over slices, written so the loop vectorizes.
//! Accurate to a couple of ulps for `|x| < 2^19`; larger arguments fall back
//! to the standard library.

const TWO_OVER_PI: f64 = std::f64::consts::FRAC_2_PI;
// pi/2 split into three pieces, the first two with trailing zero bits so
// `k * piece` is exact for |k| < 2^20.
const PIO2_1: f64 = 1.570_796_326_734_125_614_17e0;
const PIO2_2: f64 = 6.077_100_506_303_965_976_60e-11;
const PIO2_3: f64 = 2.022_266_248_711_166_455_80e-21;
const PIO2_3T: f64 = 8.478_427_660_368_899_569_97e-32;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52

const S1: f64 = -1.666_666_666_666_663_243_48e-1;
const S2: f64 = 8.333_333_333_322_489_461_24e-3;
const S3: f64 = -1.984_126_982_985_794_931_34e-4;
const S4: f64 = 2.755_731_370_707_006_767_89e-6;
const S5: f64 = -2.505_076_025_340_686_341_95e-8;
const S6: f64 = 1.589_690_995_211_550_102_21e-10;

const C1: f64 = 4.166_666_666_666_660_190_37e-2;
const C2: f64 = -1.388_888_888_887_410_957_49e-3;
const C3: f64 = 2.480_158_728_947_672_941_78e-5;
const C4: f64 = -2.755_731_435_139_066_330_35e-7;
const C5: f64 = 2.087_572_321_298_174_827_90e-9;
const C6: f64 = -1.135_964_755_778_819_482_65e-11;

const LIMIT: f64 = 524_288.0; // 2^19
const SIGN: u64 = 1 << 63;

#[inline(always)]
fn kernel(x: f64) -> (f64, f64) {
    let shifted = x * TWO_OVER_PI + ROUND_MAGIC;
    let q = shifted.to_bits();
    let k = shifted - ROUND_MAGIC;
    let r = ((x - k * PIO2_1) - k * PIO2_2) - k * PIO2_3 - k * PIO2_3T;
    let z = r * r;
    let s = r + r * z * (S1 + z * (S2 + z * (S3 + z * (S4 + z * (S5 + z * S6)))));
    let c = 1.0 - 0.5 * z + z * z * (C1 + z * (C2 + z * (C3 + z * (C4 + z * (C5 + z * C6)))));
    let swap = 0u64.wrapping_sub(q & 1);
    let (sb, cb) = (s.to_bits(), c.to_bits());
    let sin_bits = (cb & swap) | (sb & !swap);
    let cos_bits = (sb & swap) | (cb & !swap);
    let sin_sign = (q & 2) << 62;
    let cos_sign = (q.wrapping_add(1) & 2) << 62;
    (
        f64::from_bits(sin_bits ^ (sin_sign & SIGN)),
        f64::from_bits(cos_bits ^ (cos_sign & SIGN)),
    )
}

/// `sin_out[i] = sin(w x[i])`, `cos_out[i] = w cos(w x[i])`.
pub(crate) fn scaled_sin_cos(x: &[f64], w: f64, sin_out: &mut [f64], dcos_out: &mut [f64]) {
    debug_assert!(x.len() == sin_out.len() && x.len() == dcos_out.len());
    let in_range = x.iter().fold(0.0f64, |m, v| m.max((w * v).abs())) < LIMIT;
    if in_range {
        for ((xi, so), co) in x.iter().zip(sin_out.iter_mut()).zip(dcos_out.iter_mut()) {
            let (s, c) = kernel(w * xi);
            *so = s;
            *co = w * c;
        }
    } else {
        for ((xi, so), co) in x.iter().zip(sin_out.iter_mut()).zip(dcos_out.iter_mut()) {
            let (s, c) = (w * xi).sin_cos();
            *so = s;
            *co = w * c;
        }
    }
}
