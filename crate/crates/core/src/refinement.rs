//! Geometric admissibility of a discretization for QBX, and the refinement
//! loop that enforces it.
//!
//! The four conditions, per expansion center `c` of panel `n` (disk radius
//! `h_n / 2`):
//!
//! 1. no panel other than `n` comes within `h_n / 2` of `c`;
//! 2. adjacent panels differ in length by at most a factor of two;
//! 3. `c` keeps a distance of at least `h_l / 4` from every panel `l` that is
//!    neither `n` nor adjacent to it;
//! 4. `omega h_k <= 5` for every panel.

use rayon::prelude::*;
use serde::Serialize;

use crate::geometry::{build_panels_with, BuildOptions, Discretization, FourierCurve};
use crate::quadtree::{build_tree, Category, Particles, Tree};
use crate::{Error, Result};

/// Leaf capacity of the trees used by the checkers.
pub const CHECK_TREE_CAPACITY: usize = 10;

/// Largest admissible `omega h`.
pub const MAX_OMEGA_H: f64 = 5.0;

/// Tabulated source orders, indexed by panel order and tolerance bucket.
pub struct QuadratureTable;

impl QuadratureTable {
    pub const EPS: [f64; 4] = [1e-3, 1e-6, 1e-9, 1e-12];
    pub const ORDERS: [usize; 4] = [2, 4, 8, 16];
    pub const QHAT: [[usize; 4]; 4] = [[8, 16, 24, 32], [12, 24, 32, 40], [16, 32, 40, 48], [32, 48, 64, 64]];
}

/// Source quadrature order for panel order `q` at tolerance `eps`; `eps` is
/// rounded down to the next tabulated tolerance.
pub fn lookup_qhat(q: usize, eps: f64) -> Result<usize> {
    let row = QuadratureTable::ORDERS
        .iter()
        .position(|&o| o == q)
        .ok_or_else(|| Error::Unsupported(format!("panel order q={q} (expected 2, 4, 8 or 16)")))?;
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {eps}")));
    }
    let col = QuadratureTable::EPS.iter().position(|&e| e <= eps * (1.0 + 1e-12)).unwrap_or(3);
    Ok(QuadratureTable::QHAT[row][col])
}

/// Outcome of one check of all four conditions.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ConditionReport {
    pub passed: [bool; 4],
    /// Flagged panel ids per condition, sorted.
    pub flagged: [Vec<usize>; 4],
    /// Number of split rounds performed by the driver.
    pub iterations: usize,
    /// Flag counts per condition for each round, the last entry being the final check.
    pub history: Vec<[usize; 4]>,
    pub n_panels: usize,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.passed.iter().all(|&p| p)
    }

    fn from_flags(flagged: [Vec<usize>; 4], n_panels: usize) -> Self {
        ConditionReport {
            passed: std::array::from_fn(|i| flagged[i].is_empty()),
            flagged,
            iterations: 0,
            history: Vec::new(),
            n_panels,
        }
    }

    fn union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.flagged.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Tree over expansion centers, panel centers of mass and source nodes.
pub fn check_tree(d: &Discretization) -> Result<Tree> {
    let centers = d.centers.iter().map(|c| c.location).collect();
    let masses = d.panels.iter().map(|p| p.center_of_mass).collect();
    let particles = Particles::default()
        .with(Category::Center, centers)
        .with(Category::PanelMass, masses)
        .with(Category::Source, d.source_points());
    build_tree(particles, CHECK_TREE_CAPACITY, &[Category::Center, Category::Source], false)
}

fn adjacent(d: &Discretization, a: usize, b: usize) -> bool {
    let p = &d.panels[a];
    p.prev == b || p.next == b
}

/// Panels some other panel's expansion disk comes too close to: `n` is
/// flagged when a center of `n` lies within `h_n / 2` of a panel `m != n`.
pub fn check_condition1(d: &Discretization, tree: &Tree) -> Result<Vec<usize>> {
    let qhat = d.qhat;
    let gap = d
        .panels
        .iter()
        .flat_map(|p| p.source_nodes.windows(2).map(|w| crate::dist(w[0], w[1])).chain([p.h / qhat as f64]))
        .fold(0.0, f64::max);
    let hits: Vec<Option<usize>> = d
        .centers
        .par_iter()
        .map(|c| -> Result<Option<usize>> {
            let n = c.panel;
            let r = 0.5 * d.panels[n].h;
            let leaves = tree.area_query(c.location, r + gap)?;
            let mut seen: Vec<usize> = Vec::new();
            for b in leaves {
                for &i in tree.particles(b, Category::Source) {
                    let m = i / qhat;
                    if m != n && !seen.contains(&m) {
                        seen.push(m);
                        if d.distance_to_panel(m, c.location).0 <= r {
                            return Ok(Some(n));
                        }
                    }
                }
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    Ok(sorted(hits.into_iter().flatten().collect()))
}

/// The longer panel of each adjacent pair whose length ratio exceeds two.
pub fn check_condition2(d: &Discretization) -> Vec<usize> {
    let mut out = Vec::new();
    for (k, p) in d.panels.iter().enumerate() {
        let nb = &d.panels[p.next];
        if p.next == k {
            continue;
        }
        if p.h > 2.0 * nb.h {
            out.push(k);
        } else if nb.h > 2.0 * p.h {
            out.push(p.next);
        }
    }
    sorted(out)
}

/// Source panels `l` whose tube `{x : d(x, panel l) <= h_l / 4}` contains a
/// center of a panel that is neither `l` nor adjacent to it.
pub fn check_condition3(d: &Discretization, tree: &Tree) -> Result<Vec<usize>> {
    let flags: Vec<Option<usize>> = (0..d.n_panels())
        .into_par_iter()
        .map(|l| -> Result<Option<usize>> {
            let p = &d.panels[l];
            let tube = 0.25 * p.h;
            let leaves = tree.area_query(p.center_of_mass, p.radius + tube)?;
            for b in leaves {
                for &ci in tree.particles(b, Category::Center) {
                    let c = &d.centers[ci];
                    let k = c.panel;
                    if k == l || adjacent(d, l, k) {
                        continue;
                    }
                    if d.distance_to_panel(l, c.location).0 <= tube {
                        return Ok(Some(l));
                    }
                }
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;
    Ok(flags.into_iter().flatten().collect())
}

/// Panels longer than `MAX_OMEGA_H / omega`.
pub fn check_condition4(d: &Discretization, omega: f64) -> Result<Vec<usize>> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::Domain(format!("omega must be positive, got {omega}")));
    }
    Ok(d.panels.iter().enumerate().filter(|(_, p)| omega * p.h > MAX_OMEGA_H).map(|(k, _)| k).collect())
}

/// Runs all four checks, in the order 4, 2, 1, 3.
pub fn check_all(d: &Discretization, omega: f64) -> Result<ConditionReport> {
    let c4 = check_condition4(d, omega)?;
    let c2 = check_condition2(d);
    let tree = check_tree(d)?;
    let c1 = check_condition1(d, &tree)?;
    let c3 = check_condition3(d, &tree)?;
    Ok(ConditionReport::from_flags([c1, c2, c3, c4], d.n_panels()))
}

/// Splits flagged panels until all four conditions hold.
pub fn refine_to_conditions(d: &Discretization, omega: f64, max_iters: usize) -> Result<(Discretization, ConditionReport)> {
    let mut cur = d.clone();
    let mut history = Vec::new();
    let mut rounds = 0;
    loop {
        let mut report = check_all(&cur, omega)?;
        history.push(std::array::from_fn(|i| report.flagged[i].len()));
        let flagged = report.union();
        log::debug!("refinement round {rounds}: {} panels, flags {:?}", cur.n_panels(), history.last().unwrap());
        if flagged.is_empty() {
            report.iterations = rounds;
            report.history = history;
            return Ok((cur, report));
        }
        if rounds >= max_iters {
            return Err(Error::Refinement { iterations: rounds, remaining: flagged.len() });
        }
        cur = cur.split_panels(&flagged);
        rounds += 1;
    }
}

/// Rounds allowed by [`prepare`].
pub const DEFAULT_MAX_ROUNDS: usize = 50;

/// Discretizes `curves` for density order `q` at tolerance `eps` with the
/// tabulated source order, centers on `sides`, then refines for `omega`.
pub fn prepare(
    curves: &[FourierCurve],
    q: usize,
    eps: f64,
    omega: f64,
    sides: &[i8],
) -> Result<(Discretization, ConditionReport)> {
    let qhat = lookup_qhat(q, eps)?;
    let d = build_panels_with(curves, &BuildOptions { qhat, sides: sides.to_vec(), ..BuildOptions::new(q, eps) })?;
    refine_to_conditions(&d, omega, DEFAULT_MAX_ROUNDS)
}

/// Quadratic-cost versions of the checkers, used as test oracles.
pub mod brute {
    use super::*;

    pub fn condition1(d: &Discretization) -> Vec<usize> {
        let out: Vec<usize> = d
            .centers
            .par_iter()
            .filter(|c| {
                let r = 0.5 * d.panels[c.panel].h;
                (0..d.n_panels()).any(|m| m != c.panel && d.distance_to_panel(m, c.location).0 <= r)
            })
            .map(|c| c.panel)
            .collect();
        sorted(out)
    }

    pub fn condition2(d: &Discretization) -> Vec<usize> {
        let mut out = Vec::new();
        for a in 0..d.n_panels() {
            for b in 0..d.n_panels() {
                if a != b && adjacent(d, a, b) && d.panels[a].h > 2.0 * d.panels[b].h {
                    out.push(a);
                }
            }
        }
        sorted(out)
    }

    pub fn condition3(d: &Discretization) -> Vec<usize> {
        (0..d.n_panels())
            .into_par_iter()
            .filter(|&l| {
                d.centers.iter().any(|c| {
                    c.panel != l && !adjacent(d, l, c.panel) && d.distance_to_panel(l, c.location).0 <= 0.25 * d.panels[l].h
                })
            })
            .collect()
    }

    pub fn condition4(d: &Discretization, omega: f64) -> Vec<usize> {
        (0..d.n_panels()).filter(|&k| omega * d.panels[k].h > MAX_OMEGA_H).collect()
    }

    pub fn all(d: &Discretization, omega: f64) -> [Vec<usize>; 4] {
        [condition1(d), condition2(d), condition3(d), condition4(d, omega)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_panels, build_panels_with, Affine, BuildOptions, FourierCurve};

    #[test]
    fn qhat_table_lookup() {
        assert_eq!(lookup_qhat(4, 1e-6).unwrap(), 24);
        assert_eq!(lookup_qhat(16, 1e-12).unwrap(), 64);
        assert_eq!(lookup_qhat(2, 1e-3).unwrap(), 8);
        assert_eq!(lookup_qhat(4, 1e-7).unwrap(), 32);
        assert_eq!(lookup_qhat(4, 5e-7).unwrap(), 32);
        assert_eq!(lookup_qhat(8, 0.1).unwrap(), 16);
        assert_eq!(lookup_qhat(8, 1e-15).unwrap(), 48);
        assert!(matches!(lookup_qhat(3, 1e-6), Err(Error::Unsupported(_))));
        for row in QuadratureTable::QHAT.iter().zip(QuadratureTable::ORDERS) {
            assert!(row.0.windows(2).all(|w| w[0] <= w[1]));
            assert!(row.0.iter().all(|&v| v >= row.1));
        }
    }

    fn circle(n_split: usize) -> Discretization {
        let mut d = build_panels(&[FourierCurve::circle(1.0, [0.0, 0.0]).unwrap()], 8, 1e-4).unwrap();
        for _ in 0..n_split {
            d = d.uniform_split();
        }
        d.with_sides(&[1, -1])
    }

    #[test]
    fn conforming_circle_is_a_fixed_point() {
        let d = circle(2);
        let (out, report) = refine_to_conditions(&d, 1.0, 50).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(report.all_pass());
        assert_eq!(out.n_panels(), d.n_panels());
    }

    #[test]
    fn condition4_threshold() {
        let d = circle(0);
        let hmax = d.panels.iter().map(|p| p.h).fold(0.0, f64::max);
        assert!(check_condition4(&d, 5.0 / hmax).unwrap().is_empty());
        assert!(!check_condition4(&d, 5.0 / hmax * 1.0001).unwrap().is_empty());
        assert!(check_condition4(&d, 0.0).is_err());
    }

    #[test]
    fn condition2_flags_longer_panel() {
        let d = circle(1);
        let s = d.split_panels(&[3]).split_panels(&[3]);
        // panel 2 is now four times as long as panel 3
        let f = check_condition2(&s);
        assert_eq!(f, brute::condition2(&s));
        assert!(f.contains(&2));
        assert!(!f.contains(&3));
    }

    #[test]
    fn parallel_panels_close_together_are_flagged() {
        // two long thin ellipses stacked with a small gap
        let top = FourierCurve::radial(1.0, vec![]).unwrap().transformed(&Affine {
            matrix: [[1.0, 0.0], [0.0, 0.05]],
            offset: [0.0, 0.0],
        });
        let bottom = top.as_ref().unwrap().transformed(&Affine::rotate_scale_translate(0.0, 1.0, [0.0, -0.11]));
        let d = build_panels_with(&[top.unwrap(), bottom.unwrap()], &BuildOptions { sides: vec![1, -1], ..BuildOptions::new(4, 1e-3) })
            .unwrap();
        let tree = check_tree(&d).unwrap();
        let c1 = check_condition1(&d, &tree).unwrap();
        assert!(!c1.is_empty());
        assert_eq!(c1, brute::condition1(&d));
        assert_eq!(check_condition3(&d, &tree).unwrap(), brute::condition3(&d));
    }

    fn two_fish(gap: f64) -> Vec<FourierCurve> {
        let a = FourierCurve::fish();
        let (mut xmax, mut xmin) = (f64::MIN, f64::MAX);
        for i in 0..2000 {
            let x = a.eval(i as f64 / 2000.0).pos[0];
            xmax = xmax.max(x);
            xmin = xmin.min(x);
        }
        let b = a.transformed(&Affine::rotate_scale_translate(0.0, 1.0, [xmax - xmin + gap, 0.0])).unwrap();
        vec![a, b]
    }

    #[test]
    fn fast_checkers_match_brute_force_on_fish() {
        let d = build_panels_with(&[FourierCurve::fish()], &BuildOptions { sides: vec![1, -1], ..BuildOptions::new(4, 1e-3) })
            .unwrap();
        let tree = check_tree(&d).unwrap();
        let fast = [
            check_condition1(&d, &tree).unwrap(),
            check_condition2(&d),
            check_condition3(&d, &tree).unwrap(),
            check_condition4(&d, 12.43).unwrap(),
        ];
        assert_eq!(fast, brute::all(&d, 12.43));
    }

    #[test]
    fn nearly_touching_fish_refine_to_admissible() {
        let curves = two_fish(2e-3);
        let d = build_panels_with(&curves, &BuildOptions { sides: vec![1], ..BuildOptions::new(4, 1e-3) }).unwrap();
        let tree = check_tree(&d).unwrap();
        assert_eq!(check_condition3(&d, &tree).unwrap(), brute::condition3(&d));
        assert_eq!(check_condition1(&d, &tree).unwrap(), brute::condition1(&d));
        let (r, report) = refine_to_conditions(&d, 12.43, 50).unwrap();
        assert!(report.all_pass() && report.iterations <= 50);
        assert!(report.iterations > 0);
        assert!(brute::all(&r, 12.43).iter().all(|f| f.is_empty()));
        // refinement concentrates in the gap
        let hmin = r.panels.iter().map(|p| p.h).fold(f64::MAX, f64::min);
        let hmax = r.panels.iter().map(|p| p.h).fold(0.0, f64::max);
        assert!(hmax / hmin > 4.0);
    }

    #[test]
    fn refinement_driver_errors_when_capped() {
        let curves = two_fish(1e-3);
        let d = build_panels_with(&curves, &BuildOptions { sides: vec![1], ..BuildOptions::new(4, 1e-3) }).unwrap();
        assert!(matches!(refine_to_conditions(&d, 12.43, 1), Err(Error::Refinement { iterations: 1, .. })));
    }
}
