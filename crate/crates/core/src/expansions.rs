//! Fourier-Bessel expansions for the kernel `G(x) = (i/4) H_0(omega |x|)`.
//!
//! With `Phi^Z_n(v) = Z_n(omega |v|) e^{i n arg v}`:
//!
//! * an outgoing expansion about `c` represents `(i/4) sum_k a_k Phi^H_k(x - c)`,
//! * a local expansion about `c` represents `sum_l alpha_l J_l(omega rho) e^{-i l theta}`
//!   with `x - c = rho e^{i theta}` (the `i/4` is folded into `alpha`).
//!
//! Coefficients are stored scaled by `s = min(omega R, 1)`, `R` the
//! expansion radius: outgoing `a_k / s^|k|`, local `alpha_l s^|l|`. This keeps
//! high orders representable for small boxes. [`Expansion::coeff`] returns
//! the unscaled value.

use crate::specfun::{h_scaled, j_scaled};
use crate::{Error, Point, Result, C64};

const I4: C64 = C64 { re: 0.0, im: 0.25 };

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Outgoing,
    Local,
}

/// Scaling parameter for an expansion of radius `radius`.
#[inline]
pub fn scale_for(omega: f64, radius: f64) -> f64 {
    (omega * radius).min(1.0).max(f64::MIN_POSITIVE)
}

/// Sources with quadrature weights already folded into the strengths.
#[derive(Clone, Copy, Debug)]
pub struct SourceBatch<'a> {
    pub points: &'a [Point],
    pub normals: &'a [Point],
    /// Single-layer strengths.
    pub slp: Option<&'a [C64]>,
    /// Double-layer strengths (dipoles along `normals`).
    pub dlp: Option<&'a [C64]>,
}

impl<'a> SourceBatch<'a> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.points.len();
        let ok = self.slp.is_none_or(|s| s.len() == n)
            && self.dlp.is_none_or(|d| d.len() == n && self.normals.len() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("source batch arrays are not aligned".into()))
        }
    }
}

/// `Phi^H_m(d) * scale^|m|` for `m = -n..=n`, index `m + n`.
pub fn phi_h_scaled(omega: f64, d: Point, n: usize, scale: f64, out: &mut Vec<C64>) {
    let rho = crate::norm(d);
    let mut h = vec![C64::new(0.0, 0.0); n + 1];
    h_scaled(omega * rho, n, scale, &mut h);
    fill_phi(&h, d, rho, n, out);
}

/// `Phi^J_m(d) / scale^|m|` for `m = -n..=n`, index `m + n`.
pub fn phi_j_scaled(omega: f64, d: Point, n: usize, scale: f64, out: &mut Vec<C64>) {
    let rho = crate::norm(d);
    let mut j = vec![0.0; n + 1];
    j_scaled(omega * rho, n, scale, &mut j);
    let jc: Vec<C64> = j.into_iter().map(|v| C64::new(v, 0.0)).collect();
    fill_phi(&jc, d, rho, n, out);
}

fn fill_phi(z: &[C64], d: Point, rho: f64, n: usize, out: &mut Vec<C64>) {
    out.clear();
    out.resize(2 * n + 1, C64::new(0.0, 0.0));
    let unit = if rho > 0.0 { C64::new(d[0] / rho, d[1] / rho) } else { C64::new(1.0, 0.0) };
    let mut e = C64::new(1.0, 0.0);
    for m in 0..=n {
        let v = z[m] * e;
        out[n + m] = v;
        // Phi_{-m} = (-1)^m Z_m e^{-i m phi}
        let w = z[m] * e.conj();
        out[n - m] = if m % 2 == 0 { w } else { -w };
        e *= unit;
    }
}

#[inline]
fn sgn(m: i64) -> f64 {
    if m & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn powers(base: f64, n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n + 1);
    let mut x = 1.0;
    for _ in 0..=n {
        v.push(x);
        x *= base;
    }
    v
}

/// Accumulates scaled outgoing coefficients of `batch` about `center`.
pub fn p2m_acc(omega: f64, center: Point, scale: f64, p: usize, batch: &SourceBatch, out: &mut [C64]) {
    let pi = p as i64;
    let mut jv = vec![0.0; p + 2];
    let mut e = vec![C64::new(0.0, 0.0); 2 * p + 3];
    for i in 0..batch.len() {
        let d = crate::sub(batch.points[i], center);
        let rho = crate::norm(d);
        j_scaled(omega * rho, p + 1, scale, &mut jv);
        // e[k + p + 1] = J_k e^{-ik theta} / s^|k|
        let unit = if rho > 0.0 { C64::new(d[0] / rho, -d[1] / rho) } else { C64::new(1.0, 0.0) };
        let mut ph = C64::new(1.0, 0.0);
        for k in 0..=p + 1 {
            let v = jv[k] * ph;
            e[p + 1 + k] = v;
            let w = jv[k] * ph.conj();
            e[p + 1 - k] = if k % 2 == 0 { w } else { -w };
            ph *= unit;
        }
        if let Some(s) = batch.slp {
            let sv = s[i];
            for k in -pi..=pi {
                out[(k + pi) as usize] += sv * e[(k + pi + 1) as usize];
            }
        }
        if let Some(dl) = batch.dlp {
            let nv = batch.normals[i];
            let nu = C64::new(nv[0], nv[1]);
            let mu = dl[i] * (0.5 * omega);
            // a_k += mu (omega/2) [conj(nu) e_{k-1} - nu e_{k+1}]
            for k in -pi..=pi {
                let fm = if k >= 1 { 1.0 / scale } else { scale };
                let fp = if k >= 0 { scale } else { 1.0 / scale };
                let em = e[(k + pi) as usize];
                let ep = e[(k + pi + 2) as usize];
                out[(k + pi) as usize] += mu * (nu.conj() * em * fm - nu * ep * fp);
            }
        }
    }
}

/// Accumulates scaled local coefficients about `center` due to `batch`
/// (sources outside the expansion disk).
pub fn p2l_acc(omega: f64, center: Point, scale: f64, p: usize, batch: &SourceBatch, out: &mut [C64]) {
    let pi = p as i64;
    let mut hv = vec![C64::new(0.0, 0.0); p + 2];
    let mut phi = vec![C64::new(0.0, 0.0); 2 * p + 3];
    for i in 0..batch.len() {
        let d = crate::sub(batch.points[i], center);
        let rho = crate::norm(d);
        h_scaled(omega * rho, p + 1, scale, &mut hv);
        fill_phi(&hv, d, rho, p + 1, &mut phi);
        if let Some(s) = batch.slp {
            let sv = s[i] * I4;
            for l in -pi..=pi {
                out[(l + pi) as usize] += sv * phi[(l + pi + 1) as usize];
            }
        }
        if let Some(dl) = batch.dlp {
            let nv = batch.normals[i];
            let nu = C64::new(nv[0], nv[1]);
            let mu = dl[i] * I4 * (0.5 * omega);
            // alpha_l += mu (omega/2) [nu Phi_{l-1} - conj(nu) Phi_{l+1}]
            for l in -pi..=pi {
                let fm = if l >= 1 { scale } else { 1.0 / scale };
                let fp = if l >= 0 { 1.0 / scale } else { scale };
                let hm = phi[(l + pi) as usize];
                let hp = phi[(l + pi + 2) as usize];
                out[(l + pi) as usize] += mu * (nu * hm * fm - nu.conj() * hp * fp);
            }
        }
    }
}

/// Direct sum of the kernel (and its dipole version) at `x`, skipping
/// coincident points.
pub fn p2p(omega: f64, batch: &SourceBatch, x: Point) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..batch.len() {
        let d = crate::sub(x, batch.points[i]);
        let r = crate::norm(d);
        if r == 0.0 {
            continue;
        }
        let (h0, h1) = crate::specfun::h0_h1(omega * r);
        if let Some(s) = batch.slp {
            acc += s[i] * h0;
        }
        if let Some(dl) = batch.dlp {
            let nv = batch.normals[i];
            let proj = (nv[0] * d[0] + nv[1] * d[1]) / r;
            acc += dl[i] * h1 * (omega * proj);
        }
    }
    acc * I4
}

/// Evaluates scaled outgoing coefficients at `x`.
pub fn eval_outgoing(omega: f64, center: Point, scale: f64, p: usize, coeffs: &[C64], x: Point) -> C64 {
    let mut phi = Vec::new();
    phi_h_scaled(omega, crate::sub(x, center), p, scale, &mut phi);
    coeffs.iter().zip(&phi).map(|(a, h)| a * h).sum::<C64>() * I4
}

/// Evaluates scaled local coefficients at `x`.
pub fn eval_local(omega: f64, center: Point, scale: f64, p: usize, coeffs: &[C64], x: Point) -> C64 {
    let d = crate::sub(x, center);
    let rho = crate::norm(d);
    let mut jv = vec![0.0; p + 1];
    j_scaled(omega * rho, p, scale, &mut jv);
    let unit = if rho > 0.0 { C64::new(d[0] / rho, -d[1] / rho) } else { C64::new(1.0, 0.0) };
    let mut ph = C64::new(1.0, 0.0);
    let mut acc = coeffs[p] * jv[0];
    for l in 1..=p {
        ph *= unit;
        let a = coeffs[p + l] * ph;
        let b = coeffs[p - l] * ph.conj();
        acc += (a + if l % 2 == 0 { b } else { -b }) * jv[l];
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TransKind {
    M2M,
    M2L,
    L2L,
}

/// A precomputed translation operator between two centers.
#[derive(Clone, Debug)]
pub struct Translation {
    kind: TransKind,
    p_src: usize,
    p_dst: usize,
    kernel: Vec<C64>,
    pow_a: Vec<f64>,
    pow_b: Vec<f64>,
    pow_c: Vec<f64>,
}

impl Translation {
    /// Outgoing about `from` (scale `s_src`) to outgoing about `to`.
    pub fn m2m(omega: f64, from: Point, to: Point, p_src: usize, s_src: f64, p_dst: usize, s_dst: f64) -> Self {
        let n = p_src + p_dst;
        let mut kernel = Vec::new();
        phi_j_scaled(omega, crate::sub(to, from), n, s_src, &mut kernel);
        // factor (s1/s2)^|n| s1^(|k|+|k-n|-|n|)
        Translation {
            kind: TransKind::M2M,
            p_src,
            p_dst,
            kernel,
            pow_a: powers(s_src / s_dst, p_dst),
            pow_b: powers(s_src, 2 * n),
            pow_c: Vec::new(),
        }
    }

    /// Outgoing about `from` to local about `to`; needs well-separated disks.
    pub fn m2l(omega: f64, from: Point, to: Point, p_src: usize, s_src: f64, p_dst: usize, s_dst: f64) -> Self {
        let n = p_src + p_dst;
        let sigma = s_src.max(s_dst);
        let mut kernel = Vec::new();
        phi_h_scaled(omega, crate::sub(from, to), n, sigma, &mut kernel);
        // factor r1^|k| r2^|l| sigma^(|k|+|l|-|k+l|)
        Translation {
            kind: TransKind::M2L,
            p_src,
            p_dst,
            kernel,
            pow_a: powers(s_src / sigma, p_src),
            pow_b: powers(s_dst / sigma, p_dst),
            pow_c: powers(sigma, 2 * p_src.min(p_dst)),
        }
    }

    /// Local about `from` to local about `to`.
    pub fn l2l(omega: f64, from: Point, to: Point, p_src: usize, s_src: f64, p_dst: usize, s_dst: f64) -> Self {
        let n = p_src + p_dst;
        let mut kernel = Vec::new();
        phi_j_scaled(omega, crate::sub(from, to), n, s_src, &mut kernel);
        // factor (s2/s1)^|l| s1^(|l|+|l-k|-|k|)
        Translation {
            kind: TransKind::L2L,
            p_src,
            p_dst,
            kernel,
            pow_a: powers(s_dst / s_src, p_dst),
            pow_b: powers(s_src, 2 * p_dst),
            pow_c: Vec::new(),
        }
    }

    pub fn p_src(&self) -> usize {
        self.p_src
    }

    pub fn p_dst(&self) -> usize {
        self.p_dst
    }

    /// `dst += T src` on scaled coefficient vectors.
    pub fn apply(&self, src: &[C64], dst: &mut [C64]) {
        let (ps, pd) = (self.p_src as i64, self.p_dst as i64);
        let off = ps + pd;
        match self.kind {
            TransKind::M2M => {
                for n in -pd..=pd {
                    let fa = self.pow_a[n.unsigned_abs() as usize];
                    let mut acc = C64::new(0.0, 0.0);
                    for k in -ps..=ps {
                        let e = k.abs() + (k - n).abs() - n.abs();
                        acc += src[(k + ps) as usize] * self.kernel[(k - n + off) as usize] * self.pow_b[e as usize];
                    }
                    dst[(n + pd) as usize] += acc * fa;
                }
            }
            TransKind::M2L => {
                for l in -pd..=pd {
                    let fb = self.pow_b[l.unsigned_abs() as usize];
                    let mut acc = C64::new(0.0, 0.0);
                    for k in -ps..=ps {
                        let e = if (k < 0) != (l < 0) && k != 0 && l != 0 { 2 * k.abs().min(l.abs()) } else { 0 };
                        let f = sgn(k) * self.pow_a[k.unsigned_abs() as usize] * self.pow_c[e as usize];
                        acc += src[(k + ps) as usize] * self.kernel[(k + l + off) as usize] * f;
                    }
                    dst[(l + pd) as usize] += acc * fb * I4;
                }
            }
            TransKind::L2L => {
                for l in -pd..=pd {
                    let fa = self.pow_a[l.unsigned_abs() as usize];
                    let mut acc = C64::new(0.0, 0.0);
                    for k in -ps..=ps {
                        let e = l.abs() + (l - k).abs() - k.abs();
                        acc += src[(k + ps) as usize] * self.kernel[(l - k + off) as usize] * self.pow_b[e as usize];
                    }
                    dst[(l + pd) as usize] += acc * fa;
                }
            }
        }
    }
}

/// An outgoing or local expansion with scaled coefficient storage.
#[derive(Clone, Debug)]
pub struct Expansion {
    pub kind: Kind,
    pub center: Point,
    /// Validity radius: sources lie within it (outgoing) or targets do (local).
    pub radius: f64,
    pub order: usize,
    pub omega: f64,
    /// Scaled coefficients for orders `-order..=order`, index `l + order`.
    pub coeffs: Vec<C64>,
}

impl Expansion {
    pub fn zero(kind: Kind, center: Point, radius: f64, order: usize, omega: f64) -> Self {
        Expansion { kind, center, radius, order, omega, coeffs: vec![C64::new(0.0, 0.0); 2 * order + 1] }
    }

    pub fn scale(&self) -> f64 {
        scale_for(self.omega, self.radius)
    }

    /// Unscaled coefficient of order `l` (zero outside `-order..=order`).
    pub fn coeff(&self, l: i64) -> C64 {
        let p = self.order as i64;
        if l.abs() > p {
            return C64::new(0.0, 0.0);
        }
        let s = self.scale().powi(l.abs() as i32);
        let c = self.coeffs[(l + p) as usize];
        match self.kind {
            Kind::Outgoing => c * s,
            Kind::Local => c / s,
        }
    }

    pub fn physical_coeffs(&self) -> Vec<C64> {
        let p = self.order as i64;
        (-p..=p).map(|l| self.coeff(l)).collect()
    }

    /// Outgoing expansion of `batch` about `center`; sources within `radius`.
    pub fn p2m(batch: &SourceBatch, center: Point, radius: f64, p: usize, omega: f64) -> Result<Self> {
        batch.check()?;
        let mut e = Self::zero(Kind::Outgoing, center, radius, p, omega);
        p2m_acc(omega, center, e.scale(), p, batch, &mut e.coeffs);
        Ok(e)
    }

    /// Local expansion about `center` due to sources outside its disk.
    pub fn p2l(batch: &SourceBatch, center: Point, radius: f64, p: usize, omega: f64) -> Result<Self> {
        batch.check()?;
        let mut e = Self::zero(Kind::Local, center, radius, p, omega);
        p2l_acc(omega, center, e.scale(), p, batch, &mut e.coeffs);
        Ok(e)
    }

    /// QBX local expansion; every source must lie outside the open disk.
    pub fn p2qbx(batch: &SourceBatch, center: Point, radius: f64, p: usize, omega: f64) -> Result<Self> {
        if let Some(i) = batch.points.iter().position(|&y| crate::dist(y, center) < radius * (1.0 - 1e-12)) {
            return Err(Error::Precondition(format!("source {i} lies inside the expansion disk")));
        }
        Self::p2l(batch, center, radius, p, omega)
    }

    fn same_omega(&self, omega: f64) -> Result<()> {
        if self.omega != omega {
            return Err(Error::Precondition(format!("mixing wavenumbers {} and {omega}", self.omega)));
        }
        Ok(())
    }

    pub fn m2m(&self, center: Point, radius: f64, p_out: usize) -> Result<Self> {
        self.expect(Kind::Outgoing)?;
        if crate::dist(center, self.center) + self.radius > radius * (1.0 + 1e-12) {
            return Err(Error::Precondition("new outgoing disk does not contain the old one".into()));
        }
        let mut out = Self::zero(Kind::Outgoing, center, radius, p_out, self.omega);
        Translation::m2m(self.omega, self.center, center, self.order, self.scale(), p_out, out.scale())
            .apply(&self.coeffs, &mut out.coeffs);
        Ok(out)
    }

    pub fn m2l(&self, center: Point, radius: f64, p_out: usize) -> Result<Self> {
        self.expect(Kind::Outgoing)?;
        if crate::dist(center, self.center) <= self.radius + radius {
            return Err(Error::Precondition("m2l between overlapping disks".into()));
        }
        let mut out = Self::zero(Kind::Local, center, radius, p_out, self.omega);
        Translation::m2l(self.omega, self.center, center, self.order, self.scale(), p_out, out.scale())
            .apply(&self.coeffs, &mut out.coeffs);
        Ok(out)
    }

    pub fn l2l(&self, center: Point, radius: f64, p_out: usize) -> Result<Self> {
        self.expect(Kind::Local)?;
        if crate::dist(center, self.center) >= self.radius {
            return Err(Error::Precondition("l2l target center outside the validity disk".into()));
        }
        let mut out = Self::zero(Kind::Local, center, radius, p_out, self.omega);
        Translation::l2l(self.omega, self.center, center, self.order, self.scale(), p_out, out.scale())
            .apply(&self.coeffs, &mut out.coeffs);
        Ok(out)
    }

    /// Outgoing expansion of a W-list box to a QBX center.
    pub fn m2qbx(&self, center: Point, radius: f64, p: usize) -> Result<Self> {
        self.m2l(center, radius, p)
    }

    /// Box local expansion to a QBX center.
    pub fn l2qbx(&self, center: Point, radius: f64, p: usize) -> Result<Self> {
        self.l2l(center, radius, p)
    }

    fn expect(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Precondition(format!("expected a {kind:?} expansion")));
        }
        Ok(())
    }

    pub fn eval(&self, x: Point) -> C64 {
        match self.kind {
            Kind::Outgoing => eval_outgoing(self.omega, self.center, self.scale(), self.order, &self.coeffs, x),
            Kind::Local => eval_local(self.omega, self.center, self.scale(), self.order, &self.coeffs, x),
        }
    }

    pub fn add(&mut self, other: &Expansion) -> Result<()> {
        self.same_omega(other.omega)?;
        if self.kind != other.kind || self.order != other.order || self.center != other.center || self.radius != other.radius {
            return Err(Error::Precondition("adding incompatible expansions".into()));
        }
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: f64 = 5.0;

    struct Owned {
        pts: Vec<Point>,
        nrm: Vec<Point>,
        slp: Vec<C64>,
        dlp: Vec<C64>,
    }

    impl Owned {
        fn batch(&self, slp: bool, dlp: bool) -> SourceBatch<'_> {
            SourceBatch {
                points: &self.pts,
                normals: &self.nrm,
                slp: slp.then_some(&self.slp[..]),
                dlp: dlp.then_some(&self.dlp[..]),
            }
        }
    }

    fn random_batch(seed: u64, n: usize, center: Point, radius: f64) -> Owned {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut o = Owned { pts: vec![], nrm: vec![], slp: vec![], dlp: vec![] };
        for _ in 0..n {
            let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            o.pts.push([center[0] + r * a.cos(), center[1] + r * a.sin()]);
            let b = rng.gen_range(0.0..std::f64::consts::TAU);
            o.nrm.push([b.cos(), b.sin()]);
            o.slp.push(C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            o.dlp.push(C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        }
        o
    }

    fn rel(a: C64, b: C64) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn unit_charge_at_center() {
        let o = Owned { pts: vec![[0.2, 0.3]], nrm: vec![[1.0, 0.0]], slp: vec![C64::new(1.0, 0.0)], dlp: vec![] };
        let e = Expansion::p2m(&o.batch(true, false), [0.2, 0.3], 0.1, 6, W).unwrap();
        assert!((e.coeff(0) - 1.0).norm() < 1e-15);
        for l in 1..=6 {
            assert!(e.coeff(l).norm() < 1e-15 && e.coeff(-l).norm() < 1e-15);
        }
    }

    #[test]
    fn single_charge_far_field() {
        let c = [0.0, 0.0];
        let o = Owned { pts: vec![[0.05, -0.07]], nrm: vec![[0.0, 1.0]], slp: vec![C64::new(1.0, 0.0)], dlp: vec![] };
        let e = Expansion::p2m(&o.batch(true, false), c, 0.1, 40, W).unwrap();
        let x = [0.3, 0.4];
        let direct = p2p(W, &o.batch(true, false), x);
        assert!(rel(e.eval(x), direct) < 1e-12);
    }

    #[test]
    fn batch_far_field_slp_and_dlp() {
        let c = [0.1, -0.2];
        let o = random_batch(1, 50, c, 0.3);
        for (s, d) in [(true, false), (false, true), (true, true)] {
            let e = Expansion::p2m(&o.batch(s, d), c, 0.3, 40, W).unwrap();
            let x = [c[0] + 1.5 * 0.8f64.cos(), c[1] + 1.5 * 0.8f64.sin()];
            assert!(rel(e.eval(x), p2p(W, &o.batch(s, d), x)) < 1e-12);
        }
    }

    #[test]
    fn dlp_kernel_cross_check() {
        // analytic H1 kernel against a centered difference of the monopole kernel
        let y = [0.1, 0.2];
        let n = [0.6, 0.8];
        let x = [0.9, -0.3];
        let one = [C64::new(1.0, 0.0)];
        let dip = p2p(W, &SourceBatch { points: &[y], normals: &[n], slp: None, dlp: Some(&one) }, x);
        let step = 1e-5 * 0.1;
        let mono = |yy: Point| p2p(W, &SourceBatch { points: &[yy], normals: &[n], slp: Some(&one), dlp: None }, x);
        let fd = (mono([y[0] + step * n[0], y[1] + step * n[1]]) - mono([y[0] - step * n[0], y[1] - step * n[1]]))
            / (2.0 * step);
        assert!(rel(dip, fd) < 1e-7);
        // local expansion of the dipole: analytic recurrence form vs finite difference
        let c = [0.8, -0.25];
        let e = Expansion::p2l(&SourceBatch { points: &[y], normals: &[n], slp: None, dlp: Some(&one) }, c, 0.15, 30, W)
            .unwrap();
        let xt = [0.85, -0.3];
        let direct = p2p(W, &SourceBatch { points: &[y], normals: &[n], slp: None, dlp: Some(&one) }, xt);
        assert!(rel(e.eval(xt), direct) < 1e-12);
        let mono_l = |yy: Point| {
            Expansion::p2l(&SourceBatch { points: &[yy], normals: &[n], slp: Some(&one), dlp: None }, c, 0.15, 30, W)
                .unwrap()
        };
        let (a, b) = (mono_l([y[0] + step * n[0], y[1] + step * n[1]]), mono_l([y[0] - step * n[0], y[1] - step * n[1]]));
        for l in -5i64..=5 {
            let fdl = (a.coeff(l) - b.coeff(l)) / (2.0 * step);
            assert!((e.coeff(l) - fdl).norm() <= 1e-7 * fdl.norm().max(e.coeff(0).norm()));
        }
    }

    #[test]
    fn zero_translation_is_identity() {
        let c = [0.1, 0.1];
        let o = random_batch(2, 10, c, 0.1);
        let e = Expansion::p2m(&o.batch(true, true), c, 0.1, 12, W).unwrap();
        let m = e.m2m(c, 0.1, 12).unwrap();
        for (a, b) in e.coeffs.iter().zip(&m.coeffs) {
            assert!((a - b).norm() <= 1e-14 * a.norm().max(1e-300));
        }
        let l = Expansion::p2l(&o.batch(true, true), [2.0, 0.0], 0.3, 12, W).unwrap();
        let l2 = l.l2l([2.0, 0.0], 0.3, 12).unwrap();
        for (a, b) in l.coeffs.iter().zip(&l2.coeffs) {
            assert!((a - b).norm() <= 1e-14 * a.norm().max(1e-300));
        }
    }

    #[test]
    fn m2m_preserves_far_field() {
        let c1 = [0.1, 0.1];
        let o = random_batch(3, 30, c1, 0.1);
        let e = Expansion::p2m(&o.batch(true, true), c1, 0.1, 30, W).unwrap();
        let m = e.m2m([0.0, 0.0], 0.25, 40).unwrap();
        let x = [1.2, -0.9];
        assert!(rel(m.eval(x), p2p(W, &o.batch(true, true), x)) < 1e-12);
    }

    #[test]
    fn full_chain_matches_direct() {
        let c1 = [0.05, 0.05];
        let o = random_batch(4, 40, c1, 0.05);
        let b = o.batch(true, true);
        let leaf = Expansion::p2m(&b, c1, 0.05 * 2f64.sqrt(), 40, W).unwrap();
        let parent = leaf.m2m([0.1, 0.1], 0.1 * 2f64.sqrt(), 40).unwrap();
        let local = parent.m2l([0.9, 0.1], 0.1 * 2f64.sqrt(), 40).unwrap();
        let child = local.l2l([0.85, 0.05], 0.05 * 2f64.sqrt(), 40).unwrap();
        let x = [0.87, 0.03];
        assert!(rel(child.eval(x), p2p(W, &b, x)) < 1e-11);
        let qbx = child.l2qbx([0.86, 0.04], 0.02, 12).unwrap();
        assert!(rel(qbx.eval(x), p2p(W, &b, x)) < 1e-11);
        // l2qbx agrees with forming the QBX expansion directly
        let direct = Expansion::p2qbx(&b, [0.86, 0.04], 0.02, 12, W).unwrap();
        for l in -12i64..=12 {
            assert!((qbx.coeff(l) - direct.coeff(l)).norm() <= 1e-10 * direct.coeff(l).norm().max(direct.coeff(0).norm()));
        }
    }

    #[test]
    fn m2qbx_matches_direct_formation() {
        let c1 = [0.0, 0.0];
        let o = random_batch(5, 30, c1, 0.05);
        let b = o.batch(true, true);
        let out = Expansion::p2m(&b, c1, 0.05 * 2f64.sqrt(), 40, W).unwrap();
        let cq = [0.3, 0.05];
        let q = out.m2qbx(cq, 0.03, 12).unwrap();
        let d = Expansion::p2qbx(&b, cq, 0.03, 12, W).unwrap();
        for l in -12i64..=12 {
            assert!((q.coeff(l) - d.coeff(l)).norm() <= 1e-11 * d.coeff(0).norm().max(d.coeff(l).norm()));
        }
        let x = [0.31, 0.07];
        assert!(rel(q.eval(x), p2p(W, &b, x)) < 1e-11);
    }

    #[test]
    fn qbx_of_distant_charge_at_node() {
        let o = Owned { pts: vec![[1.0, 1.0]], nrm: vec![[1.0, 0.0]], slp: vec![C64::new(1.0, 0.0)], dlp: vec![] };
        let c = [0.0, 0.1];
        let e = Expansion::p2qbx(&o.batch(true, false), c, 0.1, 30, W).unwrap();
        let x = [0.0, 0.0];
        assert!(rel(e.eval(x), p2p(W, &o.batch(true, false), x)) < 1e-12);
        let zero = Owned { pts: vec![[1.0, 1.0]], nrm: vec![[1.0, 0.0]], slp: vec![C64::new(0.0, 0.0)], dlp: vec![] };
        assert!(Expansion::p2qbx(&zero.batch(true, false), c, 0.1, 5, W).unwrap().coeffs.iter().all(|v| v.norm() == 0.0));
        assert!(Expansion::p2qbx(&o.batch(true, false), [0.95, 1.0], 0.1, 5, W).is_err());
    }

    #[test]
    fn local_at_center_is_alpha0() {
        let mut e = Expansion::zero(Kind::Local, [0.3, 0.3], 0.1, 0, W);
        e.coeffs[0] = C64::new(1.0, 0.0);
        assert!((e.eval([0.3, 0.3]) - 1.0).norm() < 1e-15);
    }

    #[test]
    fn preconditions() {
        let o = random_batch(6, 5, [0.0, 0.0], 0.1);
        let e = Expansion::p2m(&o.batch(true, false), [0.0, 0.0], 0.1, 5, W).unwrap();
        assert!(e.m2l([0.15, 0.0], 0.1, 5).is_err());
        let mut other = Expansion::zero(Kind::Outgoing, [0.0, 0.0], 0.1, 5, 3.0);
        assert!(other.add(&e).is_err());
        let bad = SourceBatch { points: &o.pts, normals: &o.nrm, slp: Some(&o.slp[..2]), dlp: None };
        assert!(matches!(Expansion::p2m(&bad, [0.0, 0.0], 0.1, 5, W), Err(Error::Shape(_))));
    }

    #[test]
    fn tiny_boxes_stay_finite() {
        let c = [0.0, 0.0];
        let o = random_batch(7, 10, c, 1e-6);
        let b = o.batch(true, true);
        let e = Expansion::p2m(&b, c, 1e-6 * 2f64.sqrt(), 60, W).unwrap();
        assert!(e.coeffs.iter().all(|v| v.norm().is_finite()));
        let l = e.m2l([5e-6, 0.0], 1e-6 * 2f64.sqrt(), 60).unwrap();
        assert!(l.coeffs.iter().all(|v| v.norm().is_finite()));
        let x = [5.2e-6, 0.3e-6];
        assert!(rel(l.eval(x), p2p(W, &b, x)) < 1e-10);
    }

    #[test]
    fn truncation_error_decays_with_order() {
        let c = [0.0, 0.0];
        let o = random_batch(8, 20, c, 0.2);
        let b = o.batch(true, false);
        let x = [0.7, 0.2];
        let err = |p: usize| rel(Expansion::p2m(&b, c, 0.2, p, W).unwrap().eval(x), p2p(W, &b, x));
        for p in [4, 8, 12] {
            assert!(err(p + 5) / err(p) < 0.5, "p={p}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn translations_are_linear(seed in 0u64..10_000, a in -2.0f64..2.0, bcoef in -2.0f64..2.0) {
            let c = [0.0, 0.0];
            let o1 = random_batch(seed, 8, c, 0.1);
            let o2 = random_batch(seed + 1, 8, c, 0.1);
            let mut sum = Expansion::p2m(&o1.batch(true, true), c, 0.1, 10, W).unwrap();
            let e2 = Expansion::p2m(&o2.batch(true, true), c, 0.1, 10, W).unwrap();
            let e1 = sum.clone();
            for (s, (x, y)) in sum.coeffs.iter_mut().zip(e1.coeffs.iter().zip(&e2.coeffs)) {
                *s = x * a + y * bcoef;
            }
            let t = |e: &Expansion| e.m2l([0.6, 0.3], 0.12, 10).unwrap().l2l([0.62, 0.31], 0.05, 8).unwrap();
            let (ts, t1, t2) = (t(&sum), t(&e1), t(&e2));
            for i in 0..ts.coeffs.len() {
                let lin = t1.coeffs[i] * a + t2.coeffs[i] * bcoef;
                prop_assert!((ts.coeffs[i] - lin).norm() <= 1e-13 * (t1.coeffs[i].norm() + t2.coeffs[i].norm()) * 4.0 + 1e-300);
            }
            let x = [0.61, 0.3];
            let lv = t1.eval(x) * a + t2.eval(x) * bcoef;
            prop_assert!((ts.eval(x) - lv).norm() <= 1e-12 * (t1.eval(x).norm() + t2.eval(x).norm()));
        }

        #[test]
        fn random_batches_match_direct(seed in 0u64..10_000) {
            let c = [0.2, -0.1];
            let o = random_batch(seed, 50, c, 0.1);
            let b = o.batch(true, true);
            let e = Expansion::p2m(&b, c, 0.1, 40, W).unwrap();
            let x = [c[0] + 0.5, c[1] - 0.3];
            prop_assert!(rel(e.eval(x), p2p(W, &b, x)) < 1e-12);
        }
    }
}
