//! Adaptive FMM that produces, in one pass, potentials at ordinary targets
//! and QBX local coefficients at expansion centers.
//!
//! Box expansions at level `l` carry `p_qbx(l) = p_fmm(l) + p_add` terms so
//! that translated expansions stay accurate enough for the QBX coefficients.
//! Per center the coefficients are assembled from three parts: sources in
//! the U list of the center's leaf (formed directly), W-list boxes (outgoing
//! expansion translated to the center) and the far field (the leaf's local
//! expansion translated to the center).

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::expansions::{eval_local, eval_outgoing, p2l_acc, p2m_acc, p2p, scale_for, SourceBatch, Translation};
use crate::quadtree::{build_tree_with, interaction_lists, Category, InteractionLists, Particles, Tree};
use crate::specfun::{h_scaled, j_scaled};
use crate::{Error, Point, Result, C64};

/// Largest expansion order the estimator will return.
pub const PFMM_CAP: usize = 400;

/// Smallest box expansion order.
pub const PFMM_FLOOR: usize = 4;

/// Default leaf capacity (sources + targets + centers).
pub const DEFAULT_N_MAX: usize = 64;
/// Default for [`FmmOptions::leaf_floor`].
pub const DEFAULT_LEAF_FLOOR: f64 = 2.0;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Smallest `p` with `|H_n(3 omega R) J_n(sqrt(2) omega R)| <= eps` for all `n > p`,
/// floored at [`PFMM_FLOOR`].
pub fn estimate_pfmm(omega: f64, radius: f64, eps: f64) -> Result<usize> {
    if !(radius > 0.0 && eps > 0.0 && omega > 0.0) {
        return Err(Error::Domain(format!("need omega, R, eps > 0 (got {omega}, {radius}, {eps})")));
    }
    let n = PFMM_CAP + 2;
    let s = scale_for(omega, radius);
    let mut h = vec![ZERO; n + 1];
    let mut j = vec![0.0; n + 1];
    h_scaled(3.0 * omega * radius, n, s, &mut h);
    j_scaled(2f64.sqrt() * omega * radius, n, s, &mut j);
    let mut last_bad = None;
    for k in 0..=n {
        let hv = h[k].norm();
        if !hv.is_finite() {
            // beyond this order the product only keeps shrinking
            break;
        }
        if hv * j[k].abs() > eps {
            last_bad = Some(k);
        }
    }
    let p = last_bad.unwrap_or(0);
    if p > PFMM_CAP {
        return Err(Error::Unsupported(format!("omega R = {} needs more than {PFMM_CAP} terms", omega * radius)));
    }
    Ok(p.max(PFMM_FLOOR))
}

/// Extra box order needed for QBX order `p`.
pub fn lookup_padd(p: usize) -> usize {
    match p {
        0..=4 => 5,
        5..=6 => 15,
        7..=8 => 20,
        _ => 20 + (p - 8),
    }
}

/// Which interaction mechanisms to include; all by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mechanisms {
    pub u: bool,
    pub v: bool,
    pub w: bool,
    pub x: bool,
}

impl Mechanisms {
    pub const ALL: Mechanisms = Mechanisms { u: true, v: true, w: true, x: true };
}

impl Default for Mechanisms {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug)]
pub struct FmmOptions {
    pub omega: f64,
    pub eps: f64,
    /// QBX expansion order.
    pub qbx_order: usize,
    /// Extra box order; `None` uses [`lookup_padd`].
    pub p_add: Option<usize>,
    pub n_max: usize,
    /// A box holding a center of radius `r` is not split into children of
    /// radius below `leaf_floor * r`. Zero disables the floor.
    pub leaf_floor: f64,
    pub mechanisms: Mechanisms,
}

impl FmmOptions {
    pub fn new(omega: f64, eps: f64, qbx_order: usize) -> Self {
        FmmOptions { omega, eps, qbx_order, p_add: None, n_max: DEFAULT_N_MAX, leaf_floor: DEFAULT_LEAF_FLOOR, mechanisms: Mechanisms::ALL }
    }

    /// A plain point FMM: no QBX padding.
    pub fn point(omega: f64, eps: f64) -> Self {
        FmmOptions { p_add: Some(0), ..Self::new(omega, eps, 0) }
    }
}

/// Number of source contributions handled by each mechanism, summed over
/// all targets and centers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Audit {
    pub u: u64,
    pub w: u64,
    pub v: u64,
    pub x: u64,
    /// `(targets + centers) * sources`.
    pub total: u64,
}

impl Audit {
    pub fn is_partition(&self) -> bool {
        self.u + self.w + self.v + self.x == self.total
    }
}

/// Precomputed geometry, tree and translation operators. Reusable across
/// densities on the same sources.
pub struct FmmPlan {
    pub opts: FmmOptions,
    pub tree: Tree,
    pub lists: InteractionLists,
    pub p_fmm: Vec<usize>,
    pub p_box: Vec<usize>,
    pub p_add: usize,
    sources: Vec<Point>,
    normals: Vec<Point>,
    targets: Vec<Point>,
    centers: Vec<Point>,
    center_radius: Vec<f64>,
    scale: Vec<f64>,
    m2m: Vec<[Option<Translation>; 4]>,
    l2l: Vec<[Option<Translation>; 4]>,
    m2l: HashMap<(u32, i64, i64), Translation>,
}

/// FMM results in the caller's ordering.
#[derive(Clone, Debug)]
pub struct FmmOutput {
    pub potentials: Vec<C64>,
    pub qbx_order: usize,
    /// Scaled QBX coefficients, `2 qbx_order + 1` per center.
    pub qbx_coeffs: Vec<C64>,
    /// Scale used for each center's coefficients.
    pub qbx_scales: Vec<f64>,
    pub audit: Audit,
}

impl FmmOutput {
    /// Scaled coefficients of center `c`.
    pub fn center_coeffs(&self, c: usize) -> &[C64] {
        let m = 2 * self.qbx_order + 1;
        &self.qbx_coeffs[c * m..(c + 1) * m]
    }

    /// Unscaled coefficient of order `l` at center `c`.
    pub fn coeff(&self, c: usize, l: i64) -> C64 {
        self.center_coeffs(c)[(l + self.qbx_order as i64) as usize] / self.qbx_scales[c].powi(l.abs() as i32)
    }
}

/// Source strengths: quadrature weights must already be applied.
#[derive(Clone, Copy, Debug, Default)]
pub struct Densities<'a> {
    pub slp: Option<&'a [C64]>,
    pub dlp: Option<&'a [C64]>,
}

impl FmmPlan {
    /// Builds the tree over sources, targets and centers (`(location, radius)`).
    pub fn new(sources: &[Point], normals: &[Point], targets: &[Point], centers: &[(Point, f64)], opts: FmmOptions) -> Result<Self> {
        if sources.len() != normals.len() {
            return Err(Error::Shape("sources and normals differ in length".into()));
        }
        if !(opts.eps > 0.0 && opts.eps < 1.0) {
            return Err(Error::Domain(format!("eps must lie in (0, 1), got {}", opts.eps)));
        }
        let cpts: Vec<Point> = centers.iter().map(|c| c.0).collect();
        let particles = Particles::default()
            .with(Category::Source, sources.to_vec())
            .with(Category::Target, targets.to_vec())
            .with(Category::Center, cpts.clone());
        let subdivide = [Category::Source, Category::Target, Category::Center];
        let tree = build_tree_with(particles, opts.n_max, &subdivide, true, |t, b| {
            let bx = &t.boxes[b];
            let (lo, hi) = bx.ranges[Category::Center as usize];
            let rmax = t.perm[Category::Center as usize][lo..hi].iter().map(|&i| centers[i].1).fold(0.0, f64::max);
            0.5 * bx.radius < opts.leaf_floor * rmax
        })?;
        let lists = interaction_lists(&tree)?;
        let omega = opts.omega;
        let nl = tree.n_levels();
        let p_add = opts.p_add.unwrap_or_else(|| lookup_padd(opts.qbx_order));
        let mut p_fmm = Vec::with_capacity(nl);
        let mut p_box = Vec::with_capacity(nl);
        for l in 0..nl {
            let r = tree.root_radius / (1u64 << l) as f64;
            let pf = estimate_pfmm(omega, r, opts.eps)?;
            p_fmm.push(pf);
            p_box.push((pf + p_add).max(opts.qbx_order));
        }
        let scale: Vec<f64> = (0..nl).map(|l| scale_for(omega, tree.root_radius / (1u64 << l) as f64)).collect();
        let mut m2m = Vec::with_capacity(nl);
        let mut l2l = Vec::with_capacity(nl);
        for l in 0..nl {
            // translations between level l (parent) and l+1 (child), per quadrant
            let mk = |quad: usize, up: bool| -> Option<Translation> {
                if l + 1 >= nl {
                    return None;
                }
                let rc = tree.root_radius / (1u64 << (l + 1)) as f64;
                let off = [if quad & 1 == 1 { rc } else { -rc }, if quad & 2 == 2 { rc } else { -rc }];
                let (pp, pc) = (p_box[l], p_box[l + 1]);
                Some(if up {
                    Translation::m2m(omega, off, [0.0, 0.0], pc, scale[l + 1], pp, scale[l])
                } else {
                    Translation::l2l(omega, [0.0, 0.0], off, pp, scale[l], pc, scale[l + 1])
                })
            };
            m2m.push(std::array::from_fn(|q| mk(q, true)));
            l2l.push(std::array::from_fn(|q| mk(q, false)));
        }
        let mut keys: Vec<(u32, i64, i64)> = Vec::new();
        for (b, vs) in lists.v.iter().enumerate() {
            let bb = &tree.boxes[b];
            for &v in vs {
                let vb = &tree.boxes[v];
                keys.push((bb.level, vb.ix as i64 - bb.ix as i64, vb.iy as i64 - bb.iy as i64));
            }
        }
        keys.sort_unstable();
        keys.dedup();
        let m2l: HashMap<(u32, i64, i64), Translation> = keys
            .par_iter()
            .map(|&(l, dx, dy)| {
                let lu = l as usize;
                let w = 2.0 * tree.root_radius / (1u64 << l) as f64;
                let t = Translation::m2l(omega, [dx as f64 * w, dy as f64 * w], [0.0, 0.0], p_box[lu], scale[lu], p_box[lu], scale[lu]);
                ((l, dx, dy), t)
            })
            .collect();
        let center_radius: Vec<f64> = centers.iter().map(|c| c.1).collect();
        Ok(FmmPlan {
            opts,
            tree,
            lists,
            p_fmm,
            p_box,
            p_add,
            sources: sources.to_vec(),
            normals: normals.to_vec(),
            targets: targets.to_vec(),
            centers: cpts,
            center_radius,
            scale,
            m2m,
            l2l,
            m2l,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn n_centers(&self) -> usize {
        self.centers.len()
    }

    fn level_of(&self, b: usize) -> usize {
        self.tree.boxes[b].level as usize
    }

    fn quadrant(&self, child: usize) -> usize {
        let c = &self.tree.boxes[child];
        ((c.ix & 1) + 2 * (c.iy & 1)) as usize
    }

    /// Runs all stages for one set of densities.
    pub fn run(&self, dens: Densities) -> Result<FmmOutput> {
        let ns = self.sources.len();
        for d in [dens.slp, dens.dlp].into_iter().flatten() {
            if d.len() != ns {
                return Err(Error::Shape(format!("expected {ns} source strengths, got {}", d.len())));
            }
        }
        let tree = &self.tree;
        let omega = self.opts.omega;
        let mech = self.opts.mechanisms;
        let perm = &tree.perm[Category::Source as usize];
        let spts: Vec<Point> = perm.iter().map(|&i| self.sources[i]).collect();
        let snrm: Vec<Point> = perm.iter().map(|&i| self.normals[i]).collect();
        let sslp: Option<Vec<C64>> = dens.slp.map(|s| perm.iter().map(|&i| s[i]).collect());
        let sdlp: Option<Vec<C64>> = dens.dlp.map(|s| perm.iter().map(|&i| s[i]).collect());
        let batch_of = |b: usize| -> SourceBatch<'_> {
            let (lo, hi) = tree.boxes[b].ranges[Category::Source as usize];
            SourceBatch {
                points: &spts[lo..hi],
                normals: &snrm[lo..hi],
                slp: sslp.as_ref().map(|v| &v[lo..hi]),
                dlp: sdlp.as_ref().map(|v| &v[lo..hi]),
            }
        };
        let nb = tree.boxes.len();
        let plen = |b: usize| 2 * self.p_box[self.level_of(b)] + 1;

        // upward pass
        let mut outgoing: Vec<Vec<C64>> = vec![Vec::new(); nb];
        for lvl in (0..tree.n_levels()).rev() {
            let level_boxes = &tree.levels[lvl];
            let computed: Vec<Vec<C64>> = level_boxes
                .par_iter()
                .map(|&b| {
                    let bx = &tree.boxes[b];
                    let mut out = vec![ZERO; plen(b)];
                    if bx.count(Category::Source) == 0 {
                        return out;
                    }
                    if bx.is_leaf() {
                        p2m_acc(omega, bx.center, self.scale[lvl], self.p_box[lvl], &batch_of(b), &mut out);
                    } else {
                        for c in bx.child_ids() {
                            if tree.boxes[c].count(Category::Source) > 0 {
                                self.m2m[lvl][self.quadrant(c)].as_ref().unwrap().apply(&outgoing[c], &mut out);
                            }
                        }
                    }
                    out
                })
                .collect();
            for (&b, v) in level_boxes.iter().zip(computed) {
                outgoing[b] = v;
            }
        }

        // V and X lists into each box's incoming local expansion
        let incoming: Vec<Vec<C64>> = (0..nb)
            .into_par_iter()
            .map(|b| {
                let bx = &tree.boxes[b];
                let lvl = bx.level as usize;
                let mut loc = vec![ZERO; plen(b)];
                if bx.count(Category::Target) + bx.count(Category::Center) == 0 {
                    return loc;
                }
                if mech.v {
                    for &v in &self.lists.v[b] {
                        let vb = &tree.boxes[v];
                        if vb.count(Category::Source) == 0 {
                            continue;
                        }
                        let key = (bx.level, vb.ix as i64 - bx.ix as i64, vb.iy as i64 - bx.iy as i64);
                        self.m2l[&key].apply(&outgoing[v], &mut loc);
                    }
                }
                if mech.x {
                    for &x in &self.lists.x[b] {
                        if tree.boxes[x].count(Category::Source) > 0 {
                            p2l_acc(omega, bx.center, self.scale[lvl], self.p_box[lvl], &batch_of(x), &mut loc);
                        }
                    }
                }
                loc
            })
            .collect();

        // downward pass
        let mut local = incoming;
        for lvl in 1..tree.n_levels() {
            let level_boxes = &tree.levels[lvl];
            let added: Vec<Vec<C64>> = level_boxes
                .par_iter()
                .map(|&b| {
                    let bx = &tree.boxes[b];
                    let mut out = local[b].clone();
                    if bx.count(Category::Target) + bx.count(Category::Center) > 0 {
                        let parent = bx.parent;
                        self.l2l[lvl - 1][self.quadrant(b)].as_ref().unwrap().apply(&local[parent], &mut out);
                    }
                    out
                })
                .collect();
            for (&b, v) in level_boxes.iter().zip(added) {
                local[b] = v;
            }
        }

        // leaves: targets and centers
        let leaves: Vec<usize> = tree.leaves().collect();
        let p = self.opts.qbx_order;
        let m = 2 * p + 1;
        let tperm = &tree.perm[Category::Target as usize];
        let cperm = &tree.perm[Category::Center as usize];
        type LeafOut = (Vec<(usize, C64)>, Vec<(usize, Vec<C64>)>);
        let per_leaf: Vec<LeafOut> = leaves
            .par_iter()
            .map(|&b| {
                let bx = &tree.boxes[b];
                let lvl = bx.level as usize;
                let (pb, sb) = (self.p_box[lvl], self.scale[lvl]);
                let (tlo, thi) = bx.ranges[Category::Target as usize];
                let (clo, chi) = bx.ranges[Category::Center as usize];
                let mut pots = Vec::with_capacity(thi - tlo);
                for &ti in &tperm[tlo..thi] {
                    let x = self.targets[ti];
                    let mut acc = ZERO;
                    if mech.u {
                        for &u in &self.lists.u[b] {
                            acc += p2p(omega, &batch_of(u), x);
                        }
                    }
                    if mech.w {
                        for &w in &self.lists.w[b] {
                            let wb = &tree.boxes[w];
                            if wb.count(Category::Source) > 0 {
                                let wl = wb.level as usize;
                                acc += eval_outgoing(omega, wb.center, self.scale[wl], self.p_box[wl], &outgoing[w], x);
                            }
                        }
                    }
                    acc += eval_local(omega, bx.center, sb, pb, &local[b], x);
                    pots.push((ti, acc));
                }
                let mut coeffs = Vec::with_capacity(chi - clo);
                for &ci in &cperm[clo..chi] {
                    let c = self.centers[ci];
                    let sc = scale_for(omega, self.center_radius[ci]);
                    let mut out = vec![ZERO; m];
                    if mech.u {
                        for &u in &self.lists.u[b] {
                            p2l_acc(omega, c, sc, p, &batch_of(u), &mut out);
                        }
                    }
                    if mech.w {
                        for &w in &self.lists.w[b] {
                            let wb = &tree.boxes[w];
                            if wb.count(Category::Source) > 0 {
                                let wl = wb.level as usize;
                                Translation::m2l(omega, wb.center, c, self.p_box[wl], self.scale[wl], p, sc)
                                    .apply(&outgoing[w], &mut out);
                            }
                        }
                    }
                    Translation::l2l(omega, bx.center, c, pb, sb, p, sc).apply(&local[b], &mut out);
                    coeffs.push((ci, out));
                }
                (pots, coeffs)
            })
            .collect();

        let mut potentials = vec![ZERO; self.targets.len()];
        let mut qbx_coeffs = vec![ZERO; self.centers.len() * m];
        for (pots, coeffs) in per_leaf {
            for (i, v) in pots {
                potentials[i] = v;
            }
            for (i, v) in coeffs {
                qbx_coeffs[i * m..(i + 1) * m].copy_from_slice(&v);
            }
        }
        let qbx_scales = self.center_radius.iter().map(|&r| scale_for(omega, r)).collect();
        Ok(FmmOutput { potentials, qbx_order: p, qbx_coeffs, qbx_scales, audit: self.audit() })
    }

    /// Source counts per mechanism; independent of the densities.
    pub fn audit(&self) -> Audit {
        let tree = &self.tree;
        let src = |b: usize| tree.boxes[b].count(Category::Source) as u64;
        let mut a = Audit::default();
        for b in tree.leaves() {
            let n = (tree.boxes[b].count(Category::Target) + tree.boxes[b].count(Category::Center)) as u64;
            if n == 0 {
                continue;
            }
            a.u += n * self.lists.u[b].iter().map(|&u| src(u)).sum::<u64>();
            a.w += n * self.lists.w[b].iter().map(|&w| src(w)).sum::<u64>();
            let mut anc = Some(b);
            while let Some(x) = anc {
                a.v += n * self.lists.v[x].iter().map(|&v| src(v)).sum::<u64>();
                a.x += n * self.lists.x[x].iter().map(|&v| src(v)).sum::<u64>();
                anc = tree.boxes[x].parent();
            }
        }
        a.total = ((self.targets.len() + self.centers.len()) * self.sources.len()) as u64;
        a
    }
}

/// O(n^2) reference: direct sums at targets and direct QBX formation at centers.
pub fn direct_reference(
    omega: f64,
    sources: &[Point],
    normals: &[Point],
    dens: Densities,
    targets: &[Point],
    centers: &[(Point, f64)],
    qbx_order: usize,
) -> FmmOutput {
    let batch = SourceBatch { points: sources, normals, slp: dens.slp, dlp: dens.dlp };
    let potentials = targets.par_iter().map(|&x| p2p(omega, &batch, x)).collect();
    let m = 2 * qbx_order + 1;
    let per: Vec<Vec<C64>> = centers
        .par_iter()
        .map(|&(c, r)| {
            let mut out = vec![ZERO; m];
            p2l_acc(omega, c, scale_for(omega, r), qbx_order, &batch, &mut out);
            out
        })
        .collect();
    FmmOutput {
        potentials,
        qbx_order,
        qbx_coeffs: per.concat(),
        qbx_scales: centers.iter().map(|c| scale_for(omega, c.1)).collect(),
        audit: Audit::default(),
    }
}

/// Relative l2 difference `|a - b| / |b|` (0 when both vanish).
pub fn rel_l2(a: &[C64], b: &[C64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}
