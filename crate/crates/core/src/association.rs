//! Target association: decide for each evaluation point whether plain
//! quadrature on the source grid is accurate, or which QBX center to use.
//!
//! A target is *near* (in the tube around the boundary) when its distance to
//! some panel `k` is at most `h_k / 4`. Near targets must be served by a
//! center; any target inside a center's disk (slightly enlarged by
//! `eps_assoc`) is served by the closest such center.

use rayon::prelude::*;
use serde::Serialize;

use crate::geometry::Discretization;
use crate::quadtree::{build_tree, Category, Particles};
use crate::{Error, Point, Result};

/// Default relative slack on the disk radius.
pub const DEFAULT_EPS_ASSOC: f64 = 1e-6;

/// Relative slack of the second tier, used only for near targets that no
/// disk covers.
pub const DEFAULT_EPS_GAP: f64 = 0.5;

const TARGET_TREE_CAPACITY: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Any,
    Exterior,
    Interior,
}

impl Side {
    pub fn admits(self, side: i8) -> bool {
        match self {
            Side::Any => true,
            Side::Exterior => side > 0,
            Side::Interior => side < 0,
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" => Ok(Side::Any),
            "exterior" | "ext" | "+" => Ok(Side::Exterior),
            "interior" | "int" | "-" => Ok(Side::Interior),
            _ => Err(Error::Parse(format!("unknown side '{s}' (any, exterior, interior)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Direct,
    Qbx(usize),
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct TargetAssociation {
    pub verdicts: Vec<Verdict>,
    pub needs_qbx: Vec<bool>,
    pub side: Side,
}

impl TargetAssociation {
    pub fn failed(&self) -> Vec<usize> {
        self.verdicts.iter().enumerate().filter(|(_, v)| **v == Verdict::Failed).map(|(i, _)| i).collect()
    }

    pub fn n_qbx(&self) -> usize {
        self.verdicts.iter().filter(|v| matches!(v, Verdict::Qbx(_))).count()
    }

    /// Targets grouped by their center, as `(center, target)` pairs sorted by center.
    pub fn by_center(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self
            .verdicts
            .iter()
            .enumerate()
            .filter_map(|(t, v)| if let Verdict::Qbx(c) = v { Some((*c, t)) } else { None })
            .collect();
        v.sort_unstable();
        v
    }
}

/// Options for [`associate_targets`].
#[derive(Clone, Copy, Debug)]
pub struct AssocOptions {
    pub side: Side,
    pub eps_assoc: f64,
    pub eps_gap: f64,
}

impl Default for AssocOptions {
    fn default() -> Self {
        AssocOptions { side: Side::Any, eps_assoc: DEFAULT_EPS_ASSOC, eps_gap: DEFAULT_EPS_GAP }
    }
}

/// Whether `t` lies within `h_k / 4` of some panel `k`.
pub fn gamma_near_test(d: &Discretization, t: Point) -> bool {
    d.panels.iter().enumerate().any(|(k, p)| {
        let m = p.center_of_mass;
        (t[0] - m[0]).abs().max((t[1] - m[1]).abs()) <= p.radius + 0.25 * p.h
            && d.distance_to_panel(k, t).0 <= 0.25 * p.h
    })
}

/// Candidate panels per target: those whose search square contains it.
fn candidate_panels(d: &Discretization, targets: &[Point], reach: f64) -> Result<Vec<Vec<usize>>> {
    let mut cands = vec![Vec::new(); targets.len()];
    if targets.is_empty() {
        return Ok(cands);
    }
    // the tree must also span the panels so every query center is inside the root
    let masses: Vec<Point> = d.panels.iter().map(|p| p.center_of_mass).collect();
    let tree = build_tree(
        Particles::default().with(Category::Target, targets.to_vec()).with(Category::PanelMass, masses),
        TARGET_TREE_CAPACITY,
        &[Category::Target],
        false,
    )?;
    let pairs: Vec<Vec<(usize, usize)>> = d
        .panels
        .par_iter()
        .enumerate()
        .map(|(k, p)| -> Result<Vec<(usize, usize)>> {
            let r = p.radius + reach * p.h;
            let m = p.center_of_mass;
            let mut out = Vec::new();
            for b in tree.area_query(m, r)? {
                for &t in tree.particles(b, Category::Target) {
                    let x = targets[t];
                    if (x[0] - m[0]).abs().max((x[1] - m[1]).abs()) <= r {
                        out.push((t, k));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    for (t, k) in pairs.into_iter().flatten() {
        cands[t].push(k);
    }
    Ok(cands)
}

/// Associates targets without failing; unserved near targets get [`Verdict::Failed`].
pub fn associate(d: &Discretization, targets: &[Point], opts: &AssocOptions) -> Result<TargetAssociation> {
    if !d.sides.iter().any(|&s| opts.side.admits(s)) {
        return Err(Error::Precondition(format!("no centers on the requested side {:?}", opts.side)));
    }
    if !(opts.eps_assoc >= 0.0 && opts.eps_gap >= opts.eps_assoc) {
        return Err(Error::Domain("need 0 <= eps_assoc <= eps_gap".into()));
    }
    // centers sit h/2 off the curve; disks reach another (h/2)(1 + eps_gap)
    let reach = 0.5 + 0.5 * (1.0 + opts.eps_gap);
    let cands = candidate_panels(d, targets, reach)?;
    let q = d.q;
    let n = d.n_panels();
    let side_slots: Vec<(usize, i8)> =
        d.sides.iter().enumerate().filter(|(_, &s)| opts.side.admits(s)).map(|(i, &s)| (i, s)).collect();
    let results: Vec<(Verdict, bool)> = targets
        .par_iter()
        .zip(cands.par_iter())
        .map(|(&t, ks)| {
            let near = ks.iter().any(|&k| d.distance_to_panel(k, t).0 <= 0.25 * d.panels[k].h);
            let pick = |slack: f64| {
                let mut best: Option<(f64, usize, usize, usize)> = None;
                for &k in ks {
                    let lim = 0.5 * d.panels[k].h * (1.0 + slack);
                    for &(si, _) in &side_slots {
                        for j in 0..q {
                            let ci = (si * n + k) * q + j;
                            let dist = crate::dist(t, d.centers[ci].location);
                            if dist <= lim {
                                let key = (dist, k, j, ci);
                                if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                                    best = Some(key);
                                }
                            }
                        }
                    }
                }
                best.map(|b| b.3)
            };
            match pick(opts.eps_assoc) {
                Some(c) => (Verdict::Qbx(c), near),
                None if !near => (Verdict::Direct, false),
                None => match pick(opts.eps_gap) {
                    Some(c) => (Verdict::Qbx(c), true),
                    None => (Verdict::Failed, true),
                },
            }
        })
        .collect();
    let (verdicts, needs_qbx) = results.into_iter().unzip();
    Ok(TargetAssociation { verdicts, needs_qbx, side: opts.side })
}

/// Associates targets, failing with the offending indices if any near
/// target has no eligible center.
pub fn associate_targets(d: &Discretization, targets: &[Point], opts: &AssocOptions) -> Result<TargetAssociation> {
    let a = associate(d, targets, opts)?;
    let failed = a.failed();
    if failed.is_empty() {
        Ok(a)
    } else {
        Err(Error::Association(failed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_panels_with, BuildOptions, FourierCurve};
    use crate::refinement::refine_to_conditions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fish_two_sided() -> Discretization {
        let d = build_panels_with(&[FourierCurve::fish()], &BuildOptions { sides: vec![1, -1], ..BuildOptions::new(4, 1e-4) })
            .unwrap();
        refine_to_conditions(&d, 12.43, 50).unwrap().0
    }

    #[test]
    fn far_target_is_direct() {
        let d = fish_two_sided();
        let hmax = d.panels.iter().map(|p| p.h).fold(0.0, f64::max);
        let a = associate_targets(&d, &[[0.5 + 10.0 * hmax, 0.0]], &AssocOptions::default()).unwrap();
        assert_eq!(a.verdicts, vec![Verdict::Direct]);
        assert!(!gamma_near_test(&d, [0.5 + 10.0 * hmax, 0.0]));
    }

    #[test]
    fn density_nodes_use_their_own_center() {
        let d = fish_two_sided();
        let pts = d.density_points();
        for (side, sidx) in [(Side::Exterior, 0usize), (Side::Interior, 1)] {
            let a = associate_targets(&d, &pts, &AssocOptions { side, ..Default::default() }).unwrap();
            for (i, v) in a.verdicts.iter().enumerate() {
                assert_eq!(*v, Verdict::Qbx(sidx * d.n_density() + i), "node {i}");
                assert!(a.needs_qbx[i]);
            }
        }
    }

    #[test]
    fn flat_threshold_quarter_panel() {
        let d = build_panels_with(
            &[FourierCurve::circle(50.0, [0.0, 0.0]).unwrap()],
            &BuildOptions { sides: vec![1], ..BuildOptions::new(8, 1e-6) },
        )
        .unwrap();
        let p = &d.panels[0];
        let x = p.nodes[3];
        let nv = p.normals[3];
        let at = |f: f64| [x[0] + f * p.h * nv[0], x[1] + f * p.h * nv[1]];
        assert!(gamma_near_test(&d, at(0.0)));
        assert!(gamma_near_test(&d, at(0.24)));
        assert!(!gamma_near_test(&d, at(0.5)));
    }

    #[test]
    fn random_annulus_matches_brute_force() {
        let d = fish_two_sided();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hmax = d.panels.iter().map(|p| p.h).fold(0.0, f64::max);
        let pts = d.density_points();
        let targets: Vec<Point> = (0..10_000)
            .map(|_| {
                let base = pts[rng.gen_range(0..pts.len())];
                let r = rng.gen_range(0.0..1.5 * hmax);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                [base[0] + r * a.cos(), base[1] + r * a.sin()]
            })
            .collect();
        let opts = AssocOptions::default();
        let a = associate(&d, &targets, &opts).unwrap();
        for (i, &t) in targets.iter().enumerate() {
            let near = (0..d.n_panels()).any(|k| d.distance_to_panel(k, t).0 <= 0.25 * d.panels[k].h);
            assert_eq!(a.needs_qbx[i], near, "target {i}");
            let mut best: Option<(f64, usize, usize, usize)> = None;
            for (ci, c) in d.centers.iter().enumerate() {
                let dist = crate::dist(t, c.location);
                if dist <= 0.5 * d.panels[c.panel].h * (1.0 + opts.eps_assoc) {
                    let key = (dist, c.panel, c.node, ci);
                    if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                        best = Some(key);
                    }
                }
            }
            match (best, a.verdicts[i]) {
                (Some(b), v) => assert_eq!(v, Verdict::Qbx(b.3)),
                (None, Verdict::Direct) => assert!(!near),
                (None, Verdict::Qbx(c)) => {
                    assert!(near);
                    let cc = &d.centers[c];
                    assert!(crate::dist(t, cc.location) <= 0.5 * d.panels[cc.panel].h * (1.0 + opts.eps_gap));
                }
                (None, Verdict::Failed) => assert!(near),
            }
        }
    }

    #[test]
    fn side_preference_is_honored() {
        let d = fish_two_sided();
        let pts = d.density_points();
        let nrm = d.density_normals();
        let targets: Vec<Point> = pts
            .iter()
            .zip(&nrm)
            .enumerate()
            .map(|(i, (x, n))| {
                let h = d.panels[i / d.q].h;
                [x[0] + 0.05 * h * n[0], x[1] + 0.05 * h * n[1]]
            })
            .collect();
        let a = associate_targets(&d, &targets, &AssocOptions { side: Side::Exterior, ..Default::default() }).unwrap();
        for v in &a.verdicts {
            let Verdict::Qbx(c) = v else { panic!("expected QBX") };
            assert_eq!(d.centers[*c].side, 1);
        }
        let only_ext = d.with_sides(&[1]);
        assert!(associate(&only_ext, &targets, &AssocOptions { side: Side::Interior, ..Default::default() }).is_err());
    }

    #[test]
    fn parses_sides() {
        assert_eq!("exterior".parse::<Side>().unwrap(), Side::Exterior);
        assert!("up".parse::<Side>().is_err());
    }
}
