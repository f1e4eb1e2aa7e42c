//! Cylinder functions of real positive argument: J_n, Y_n and H^(1)_n.
//!
//! J is computed by downward (Miller) recurrence. For x below
//! [`ASYMPTOTIC_X`] the sequence is normalized with J_0 + 2 sum J_2k = 1 and
//! Y_0, Y_1 come from the Neumann series in the same J values; above it both
//! normalization and Y_0, Y_1 come from the Hankel asymptotic expansion.
//! Y_n for n >= 2 follows by upward recurrence.
//!
//! The scaled variants `J_n(x) / s^n` and `H_n(x) * s^n` keep expansion
//! coefficients representable when the argument is tiny and the order large.

use crate::{Error, Result, C64};
use std::f64::consts::{FRAC_2_PI, PI};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Above this argument Y_0, Y_1 and the J normalization use the asymptotic
/// Hankel expansion.
pub const ASYMPTOTIC_X: f64 = 25.0;

const RESCALE_AT: f64 = 1e200;
const RESCALE_BY: f64 = 1e-200;

/// A sequence of cylinder function values for orders `0..=order_max`.
#[derive(Clone, Debug)]
pub struct CylFunSeq {
    pub order_max: usize,
    pub argument: f64,
    pub values: Vec<C64>,
}

impl CylFunSeq {
    /// Value at any integer order, using `Z_{-l} = (-1)^l Z_l`.
    pub fn at(&self, order: i64) -> C64 {
        let n = order.unsigned_abs() as usize;
        let v = self.values[n];
        if order < 0 && n % 2 == 1 {
            -v
        } else {
            v
        }
    }
}

fn check_arg(x: f64) -> Result<()> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("argument must be finite and positive, got {x}")));
    }
    Ok(())
}

/// J_0..J_nmax at `x`.
pub fn bessel_j_seq(x: f64, nmax: usize) -> Result<CylFunSeq> {
    check_arg(x)?;
    let mut j = vec![0.0; nmax + 1];
    j_scaled(x, nmax, 1.0, &mut j);
    Ok(CylFunSeq {
        order_max: nmax,
        argument: x,
        values: j.into_iter().map(|v| C64::new(v, 0.0)).collect(),
    })
}

/// H^(1)_0..H^(1)_nmax at `x`. Fails when a value leaves the representable range.
pub fn hankel1_seq(x: f64, nmax: usize) -> Result<CylFunSeq> {
    check_arg(x)?;
    let mut h = vec![C64::new(0.0, 0.0); nmax + 1];
    h_scaled(x, nmax, 1.0, &mut h);
    if let Some(n) = h.iter().position(|v| !v.im.is_finite()) {
        return Err(Error::Overflow(format!("Y_{n}({x}) exceeds the double range")));
    }
    Ok(CylFunSeq { order_max: nmax, argument: x, values: h })
}

trait Store {
    fn put(&mut self, m: usize, v: f64);
    fn rescale(&mut self, from: usize, f: f64);
}

impl Store for [f64] {
    #[inline]
    fn put(&mut self, m: usize, v: f64) {
        self[m] = v;
    }
    fn rescale(&mut self, from: usize, f: f64) {
        for v in &mut self[from..] {
            *v *= f;
        }
    }
}

impl Store for [C64] {
    #[inline]
    fn put(&mut self, m: usize, v: f64) {
        self[m].re = v;
    }
    fn rescale(&mut self, from: usize, f: f64) {
        for v in &mut self[from..] {
            v.re *= f;
        }
    }
}

fn miller_start(x: f64, nmax: usize) -> usize {
    nmax.max(x.ceil() as usize) + 30 + (4.0 * x.cbrt()).ceil() as usize
}

/// Unnormalized downward recurrence for `J_m / s^m`, `m = 0..=nmax`, stored
/// through `out`. Returns the normalization sum J_0 + 2 sum J_2k (unscaled)
/// and, when `s == 1`, the two Neumann sums used for Y_0 and Y_1.
fn miller_core<S: Store + ?Sized>(x: f64, nmax: usize, s: f64, out: &mut S) -> (f64, f64, f64) {
    let start = miller_start(x, nmax);
    let s2 = s * s;
    let mut jp1 = 0.0f64;
    let mut jc = 1.0f64;
    // Horner accumulation of sum_{k>=1} J_2k = sum s^2k (J_2k / s^2k).
    let mut horner = 0.0;
    let mut norm = 0.0;
    let mut sy0 = 0.0;
    let mut sy1 = 0.0;
    let want_sums = s == 1.0;
    let mut m = start;
    loop {
        if m <= nmax {
            out.put(m, jc);
        }
        if m % 2 == 0 {
            if m == 0 {
                norm = jc + 2.0 * s2 * horner;
            } else {
                horner = jc + s2 * horner;
                if want_sums {
                    let k = (m / 2) as f64;
                    let sign = if (m / 2) % 2 == 0 { 1.0 } else { -1.0 };
                    sy0 += sign * jc / k;
                }
            }
        } else if want_sums {
            let k1 = (m + 1) / 2;
            let mut c = if k1 % 2 == 0 { 1.0 } else { -1.0 } / k1 as f64;
            if m >= 3 {
                let k2 = (m - 1) / 2;
                c -= if k2 % 2 == 0 { 1.0 } else { -1.0 } / k2 as f64;
            }
            sy1 += c * jc;
        }
        if m == 0 {
            break;
        }
        let jm1 = (2.0 * m as f64 * s / x) * jc - s2 * jp1;
        jp1 = jc;
        jc = jm1;
        m -= 1;
        if jc.abs() > RESCALE_AT {
            jc *= RESCALE_BY;
            jp1 *= RESCALE_BY;
            horner *= RESCALE_BY;
            sy0 *= RESCALE_BY;
            sy1 *= RESCALE_BY;
            if m < nmax {
                out.rescale(m + 1, RESCALE_BY);
            }
        }
    }
    (norm, sy0, sy1)
}

/// H^(1)_0 and H^(1)_1 by the large-argument asymptotic expansion.
fn hankel01_asymptotic(x: f64) -> (C64, C64) {
    let mut res = [C64::new(0.0, 0.0); 2];
    let (sx, cx) = x.sin_cos();
    let eix = C64::new(cx, sx);
    let amp = (2.0 / (PI * x)).sqrt();
    for (nu, r) in res.iter_mut().enumerate() {
        let mu = 4.0 * (nu * nu) as f64;
        let mut term = 1.0f64;
        let mut sum = C64::new(1.0, 0.0);
        let ipow = [C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(-1.0, 0.0), C64::new(0.0, -1.0)];
        for k in 1..80 {
            let odd = (2 * k - 1) as f64;
            let next = term * (mu - odd * odd) / (8.0 * k as f64 * x);
            if next.abs() > term.abs() {
                break;
            }
            term = next;
            sum += ipow[k % 4] * term;
            if term.abs() < 1e-18 {
                break;
            }
        }
        // exp(-i (nu pi/2 + pi/4))
        let phase = if nu == 0 {
            C64::new(1.0, -1.0) / 2f64.sqrt()
        } else {
            C64::new(-1.0, -1.0) / 2f64.sqrt()
        };
        *r = amp * eix * phase * sum;
    }
    (res[0], res[1])
}

/// Normalized J_0..J_nmax (unscaled) into `out` and returns (Y_0, Y_1).
fn j_and_y01<S: Store + ?Sized>(x: f64, nmax: usize, out: &mut S, get: impl Fn(&S, usize) -> f64) -> (f64, f64) {
    let nn = nmax.max(1);
    if x >= ASYMPTOTIC_X {
        let (norm, _, _) = miller_core(x, nn, 1.0, out);
        let _ = norm;
        let (h0, h1) = hankel01_asymptotic(x);
        let (u0, u1) = (get(out, 0), get(out, 1));
        let f = if h0.re.abs() >= h1.re.abs() { h0.re / u0 } else { h1.re / u1 };
        out.rescale(0, f);
        return (h0.im, h1.im);
    }
    let (norm, sy0, sy1) = miller_core(x, nn, 1.0, out);
    let f = 1.0 / norm;
    out.rescale(0, f);
    let (j0, j1) = (get(out, 0), get(out, 1));
    let lg = (0.5 * x).ln() + EULER_GAMMA;
    let y0 = FRAC_2_PI * (lg * j0 - 2.0 * sy0 * f);
    let y1 = FRAC_2_PI * (-j0 / x + lg * j1 + sy1 * f);
    (y0, y1)
}

/// Writes `J_n(x) / s^n` for `n = 0..out.len()` into `out`; `x >= 0`.
pub fn j_scaled(x: f64, nmax: usize, s: f64, out: &mut [f64]) {
    let out = &mut out[..=nmax];
    if x == 0.0 {
        out.fill(0.0);
        out[0] = 1.0;
        return;
    }
    if s == 1.0 {
        if nmax == 0 {
            let mut tmp = [0.0f64; 2];
            j_and_y01(x, 1, &mut tmp[..], |o, m| o[m]);
            out[0] = tmp[0];
        } else {
            j_and_y01(x, nmax, out, |o, m| o[m]);
        }
        return;
    }
    let nn = nmax.max(1);
    if nmax == 0 {
        let mut tmp = [0.0f64; 2];
        j_scaled(x, 1, s, &mut tmp);
        out[0] = tmp[0];
        return;
    }
    let (norm, _, _) = miller_core(x, nn, s, out);
    let f = if x >= ASYMPTOTIC_X {
        let (h0, h1) = hankel01_asymptotic(x);
        if h0.re.abs() >= h1.re.abs() {
            h0.re / out[0]
        } else {
            h1.re / (out[1] * s)
        }
    } else {
        1.0 / norm
    };
    for v in out.iter_mut() {
        *v *= f;
    }
}

/// Writes `H^(1)_n(x) * s^n` for `n = 0..=nmax` into `out`; `x > 0`.
/// Non-finite entries signal overflow of the scaled value.
pub fn h_scaled(x: f64, nmax: usize, s: f64, out: &mut [C64]) {
    let out = &mut out[..=nmax];
    let (y0, y1) = if nmax == 0 {
        let mut tmp = [C64::new(0.0, 0.0); 2];
        let r = j_and_y01(x, 1, &mut tmp[..], |o, m| o[m].re);
        out[0].re = tmp[0].re;
        r
    } else {
        j_and_y01(x, nmax, out, |o, m| o[m].re)
    };
    out[0].im = y0;
    if nmax == 0 {
        return;
    }
    let mut ym = y0;
    let mut yc = y1 * s;
    let mut pw = s;
    out[1] = C64::new(out[1].re * pw, yc);
    let s2 = s * s;
    for n in 1..nmax {
        let yn = (2.0 * n as f64 / x) * s * yc - s2 * ym;
        ym = yc;
        yc = yn;
        pw *= s;
        out[n + 1] = C64::new(out[n + 1].re * pw, yc);
    }
}

/// H^(1)_0(x) and H^(1)_1(x).
#[inline]
pub fn h0_h1(x: f64) -> (C64, C64) {
    if x >= ASYMPTOTIC_X {
        return hankel01_asymptotic(x);
    }
    let mut tmp = [0.0f64; 2];
    let (y0, y1) = j_and_y01(x, 1, &mut tmp[..], |o, m| o[m]);
    (C64::new(tmp[0], y0), C64::new(tmp[1], y1))
}

/// `e^{i n phi}` for `n = 0..=nmax` given the unit vector `(cos phi, sin phi)`.
pub fn phases(unit: C64, nmax: usize, out: &mut [C64]) {
    let mut z = C64::new(1.0, 0.0);
    for v in out[..=nmax].iter_mut() {
        *v = z;
        z *= unit;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn j0_series(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        let q = -(x * x) / 4.0;
        for k in 1..30 {
            term *= q / ((k * k) as f64);
            sum += term;
        }
        sum
    }

    fn y0_series(x: f64) -> f64 {
        // Y0 = (2/pi)(ln(x/2)+gamma) J0 + (2/pi) sum_{k>=1} (-1)^{k+1} H_k (x^2/4)^k / (k!)^2
        let q = x * x / 4.0;
        let mut term = 1.0;
        let mut harm = 0.0;
        let mut sum = 0.0;
        for k in 1..30 {
            term *= q / ((k * k) as f64);
            harm += 1.0 / k as f64;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sum += sign * harm * term;
        }
        FRAC_2_PI * (((0.5 * x).ln() + EULER_GAMMA) * j0_series(x) + sum)
    }

    #[test]
    fn j0_small_argument_limit() {
        let j = bessel_j_seq(1e-30, 3).unwrap();
        assert!((j.values[0].re - 1.0).abs() < 1e-15);
        assert!(j.values[1].re.abs() < 1e-29);
    }

    #[test]
    fn j0_matches_power_series() {
        let j = bessel_j_seq(1.0, 5).unwrap();
        let oracle = j0_series(1.0);
        assert!((j.values[0].re - oracle).abs() <= 1e-14 * oracle.abs());
    }

    #[test]
    fn j0_y0_match_series_over_a_range() {
        for &x in &[0.05, 0.3, 1.0, 2.5, 4.0, 6.0] {
            let (h0, _) = h0_h1(x);
            let j = j0_series(x);
            let y = y0_series(x);
            assert!((h0.re - j).abs() < 1e-13, "J0({x})");
            assert!((h0.im - y).abs() < 1e-13 * y.abs().max(1.0), "Y0({x})");
        }
    }

    #[test]
    fn tabulated_values_at_ten() {
        let (h0, h1) = h0_h1(10.0);
        assert!((h0.re + 0.245_935_764_451_348_3).abs() < 1e-14);
        assert!((h0.im - 0.055_671_167_283_599_39).abs() < 1e-14);
        assert!((h1.re - 0.043_472_746_168_861_44).abs() < 1e-14);
        assert!((h1.im - 0.249_015_424_206_953_9).abs() < 1e-14);
    }

    #[test]
    fn hankel0_matches_series_oracle() {
        let h = hankel1_seq(1.0, 2).unwrap();
        assert!((h.values[0].re - j0_series(1.0)).abs() < 1e-13);
        assert!((h.values[0].im - y0_series(1.0)).abs() < 1e-13);
    }

    #[test]
    fn hankel_real_part_is_j() {
        let x = 2.5;
        let h = hankel1_seq(x, 30).unwrap();
        let j = bessel_j_seq(x, 30).unwrap();
        for n in 0..=30 {
            assert!((h.values[n].re - j.values[n].re).abs() <= 1e-13 * j.values[n].re.abs().max(1e-300) + 1e-300);
        }
        let (h0, _) = h0_h1(x);
        assert!((h.values[0].im - h0.im).abs() < 1e-13);
    }

    #[test]
    fn wronskian() {
        for &x in &[3.7, 0.2, 11.0, 24.0, 26.0, 60.0] {
            let h = hankel1_seq(x, 21).unwrap();
            let want = 2.0 / (PI * x);
            for l in 0..=20 {
                let (jl, yl) = (h.values[l].re, h.values[l].im);
                let (jl1, yl1) = (h.values[l + 1].re, h.values[l + 1].im);
                let w = jl1 * yl - jl * yl1;
                assert!((w - want).abs() < 1e-12 * want, "x={x} l={l} w={w} want={want}");
            }
        }
    }

    #[test]
    fn negative_orders_by_symmetry() {
        let h = hankel1_seq(1.3, 5).unwrap();
        assert_eq!(h.at(-3), -h.values[3]);
        assert_eq!(h.at(-2), h.values[2]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(bessel_j_seq(0.0, 3).is_err());
        assert!(bessel_j_seq(f64::NAN, 3).is_err());
        assert!(hankel1_seq(-1.0, 3).is_err());
        assert!(matches!(hankel1_seq(1e-3, 400), Err(Error::Overflow(_))));
    }

    #[test]
    fn asymptotic_and_recurrence_regimes_agree() {
        // Miller normalization by the sum identity vs. by the asymptotic J0.
        for &x in &[25.0, 27.5, 31.0] {
            let mut a = vec![0.0; 11];
            let (norm, sy0, sy1) = miller_core(x, 10, 1.0, &mut a[..]);
            for v in a.iter_mut() {
                *v /= norm;
            }
            let lg = (0.5 * x).ln() + EULER_GAMMA;
            let y0 = FRAC_2_PI * (lg * a[0] - 2.0 * sy0 / norm);
            let y1 = FRAC_2_PI * (-a[0] / x + lg * a[1] + sy1 / norm);
            let h = hankel1_seq(x, 10).unwrap();
            for n in 0..=10 {
                assert!((a[n] - h.values[n].re).abs() < 2e-14, "J_{n}({x})");
            }
            assert!((y0 - h.values[0].im).abs() < 1e-13);
            assert!((y1 - h.values[1].im).abs() < 1e-13);
        }
    }

    #[test]
    fn scaled_sequences_match_unscaled() {
        let x = 0.7;
        let s = 0.05;
        let mut js = vec![0.0; 21];
        j_scaled(x, 20, s, &mut js);
        let j = bessel_j_seq(x, 20).unwrap();
        let mut hs = vec![C64::new(0.0, 0.0); 21];
        h_scaled(x, 20, s, &mut hs);
        let h = hankel1_seq(x, 20).unwrap();
        for n in 0..=20 {
            let sn = s.powi(n as i32);
            assert!((js[n] * sn - j.values[n].re).abs() <= 1e-14 * j.values[n].re.abs());
            assert!((hs[n] / sn - h.values[n]).norm() <= 1e-13 * h.values[n].norm());
        }
        // tiny argument, large order: representable only in scaled form
        let mut hs = vec![C64::new(0.0, 0.0); 121];
        h_scaled(1e-3, 120, 1e-3, &mut hs);
        assert!(hs.iter().all(|v| v.norm().is_finite()));
        let mut js = vec![0.0; 121];
        j_scaled(1e-3, 120, 1e-3, &mut js);
        assert!((js[1] - 0.5).abs() < 1e-6);
        assert!(js.iter().all(|v| v.is_finite()));
    }

    fn graf_error(omega: f64, x: [f64; 2], xs: [f64; 2], c: [f64; 2], p: usize) -> f64 {
        let d = crate::dist(x, xs);
        let direct = C64::new(0.0, 0.25) * h0_h1(omega * d).0;
        let rs = crate::dist(xs, c);
        let rt = crate::dist(x, c);
        let ts = (xs[1] - c[1]).atan2(xs[0] - c[0]);
        let tt = (x[1] - c[1]).atan2(x[0] - c[0]);
        let h = hankel1_seq(omega * rs, p).unwrap();
        let j = bessel_j_seq(omega * rt, p).unwrap();
        let mut sum = C64::new(0.0, 0.0);
        for l in -(p as i64)..=(p as i64) {
            let lf = l as f64;
            sum += h.at(l) * C64::from_polar(1.0, lf * ts) * j.at(l) * C64::from_polar(1.0, -lf * tt);
        }
        sum *= C64::new(0.0, 0.25);
        (sum - direct).norm() / direct.norm()
    }

    #[test]
    fn graf_addition_self_test() {
        let c = [0.1, -0.2];
        let xs = [c[0] + 1.0 * 0.8f64.cos(), c[1] + 1.0 * 0.8f64.sin()];
        let x = [c[0] + 0.3 * 2.1f64.cos(), c[1] + 0.3 * 2.1f64.sin()];
        assert!(graf_error(5.0, x, xs, c, 40) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn recurrence_residual(x in 0.1f64..100.0, l in 1usize..50) {
            let j = bessel_j_seq(x, 51).unwrap();
            let jm = j.values.iter().map(|v| v.re.abs()).fold(0.0, f64::max);
            let r = j.values[l - 1].re + j.values[l + 1].re - (2.0 * l as f64 / x) * j.values[l].re;
            prop_assert!(r.abs() <= 1e-12 * jm);
        }

        #[test]
        fn graf_identity_random(
            rs in 0.5f64..2.0, ts in 0.0f64..6.28, ratio in 0.05f64..0.5, tt in 0.0f64..6.28,
            cx in -1.0f64..1.0, cy in -1.0f64..1.0,
        ) {
            let c = [cx, cy];
            let xs = [c[0] + rs * ts.cos(), c[1] + rs * ts.sin()];
            let x = [c[0] + ratio * rs * tt.cos(), c[1] + ratio * rs * tt.sin()];
            prop_assert!(graf_error(5.0, x, xs, c, 100) < 1e-12);
        }
    }
}
