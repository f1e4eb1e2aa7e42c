//! Adaptive, pruned, optionally level-restricted quad-tree with peer
//! computation, area queries and the U/V/W/X interaction lists.
//!
//! Boxes are addressed by integer coordinates `(level, ix, iy)`, so
//! containment and adjacency are exact.

use crate::{Error, Point, Result};
use rayon::prelude::*;
use std::io::Write;

/// Maximum refinement depth.
pub const MAX_DEPTH: u32 = 40;
const NONE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Source = 0,
    Target = 1,
    Center = 2,
    PanelMass = 3,
}

pub const N_CATEGORIES: usize = 4;
pub const CATEGORIES: [Category; N_CATEGORIES] =
    [Category::Source, Category::Target, Category::Center, Category::PanelMass];

#[derive(Clone, Debug)]
pub struct BoxNode {
    pub level: u32,
    pub ix: u64,
    pub iy: u64,
    pub center: Point,
    /// Half the side length.
    pub radius: f64,
    pub parent: usize,
    /// Child per quadrant (`qx + 2 qy`), `usize::MAX` when pruned.
    pub children: [usize; 4],
    /// Per-category `[start, end)` into [`Tree::perm`].
    pub ranges: [(usize, usize); N_CATEGORIES],
}

impl BoxNode {
    pub fn is_leaf(&self) -> bool {
        self.children.iter().all(|&c| c == NONE)
    }

    pub fn child_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.children.iter().copied().filter(|&c| c != NONE)
    }

    pub fn parent(&self) -> Option<usize> {
        (self.parent != NONE).then_some(self.parent)
    }

    pub fn count(&self, cat: Category) -> usize {
        let (a, b) = self.ranges[cat as usize];
        b - a
    }
}

/// Particles per category for [`build_tree`].
#[derive(Clone, Debug, Default)]
pub struct Particles {
    pub points: [Vec<Point>; N_CATEGORIES],
}

impl Particles {
    pub fn with(mut self, cat: Category, pts: Vec<Point>) -> Self {
        self.points[cat as usize] = pts;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Tree {
    pub boxes: Vec<BoxNode>,
    pub root_radius: f64,
    pub points: [Vec<Point>; N_CATEGORIES],
    /// Per category, particle indices ordered so every box owns a contiguous range.
    pub perm: [Vec<usize>; N_CATEGORIES],
    /// Per category, the leaf holding each particle.
    pub leaf_of: [Vec<usize>; N_CATEGORIES],
    /// Box ids by level.
    pub levels: Vec<Vec<usize>>,
    pub n_max: usize,
    pub subdivide_on: Vec<Category>,
    pub level_restricted: bool,
    keys: [Vec<[u64; 2]>; N_CATEGORIES],
}

fn quadrant(key: [u64; 2], level: u32) -> usize {
    let shift = MAX_DEPTH - level - 1;
    (((key[0] >> shift) & 1) + 2 * ((key[1] >> shift) & 1)) as usize
}

/// Builds a tree whose leaves hold at most `n_max` particles of the
/// `subdivide_on` categories combined.
pub fn build_tree(particles: Particles, n_max: usize, subdivide_on: &[Category], level_restrict: bool) -> Result<Tree> {
    build_tree_with(particles, n_max, subdivide_on, level_restrict, |_, _| false)
}

/// [`build_tree`] where `keep_whole(tree, b)` can veto splitting box `b`
/// even when it holds more than `n_max` particles. Level restriction may
/// still split a vetoed leaf.
pub fn build_tree_with<F>(particles: Particles, n_max: usize, subdivide_on: &[Category], level_restrict: bool, keep_whole: F) -> Result<Tree>
where
    F: Fn(&Tree, usize) -> bool,
{
    if n_max == 0 {
        return Err(Error::Domain("n_max must be positive".into()));
    }
    let total: usize = particles.points.iter().map(|p| p.len()).sum();
    if total == 0 {
        return Err(Error::Domain("tree needs at least one point".into()));
    }
    let mut extent = 0.0f64;
    for p in particles.points.iter().flatten() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::Domain("non-finite particle coordinate".into()));
        }
        extent = extent.max(p[0].abs()).max(p[1].abs());
    }
    let root_radius = if extent > 0.0 { extent * (1.0 + 1e-9) } else { 1.0 };
    let scale = (1u64 << MAX_DEPTH) as f64;
    let keys: [Vec<[u64; 2]>; N_CATEGORIES] = std::array::from_fn(|c| {
        particles.points[c]
            .iter()
            .map(|p| {
                let k = |v: f64| (((v + root_radius) / (2.0 * root_radius)) * scale).floor().clamp(0.0, scale - 1.0) as u64;
                [k(p[0]), k(p[1])]
            })
            .collect()
    });
    let perm: [Vec<usize>; N_CATEGORIES] = std::array::from_fn(|c| (0..particles.points[c].len()).collect());
    let ranges = std::array::from_fn(|c| (0, particles.points[c].len()));
    let root = BoxNode {
        level: 0,
        ix: 0,
        iy: 0,
        center: [0.0, 0.0],
        radius: root_radius,
        parent: NONE,
        children: [NONE; 4],
        ranges,
    };
    let mut tree = Tree {
        boxes: vec![root],
        root_radius,
        leaf_of: std::array::from_fn(|c| vec![0; particles.points[c].len()]),
        points: particles.points,
        perm,
        levels: Vec::new(),
        n_max,
        subdivide_on: subdivide_on.to_vec(),
        level_restricted: level_restrict,
        keys,
    };
    let mut stack = vec![0usize];
    while let Some(b) = stack.pop() {
        let count: usize = subdivide_on.iter().map(|&c| tree.boxes[b].count(c)).sum();
        if count <= n_max || keep_whole(&tree, b) {
            continue;
        }
        if tree.boxes[b].level >= MAX_DEPTH - 1 {
            return Err(Error::Geometry(format!(
                "tree depth cap {MAX_DEPTH} reached with {count} coincident particles"
            )));
        }
        tree.split(b);
        stack.extend(tree.boxes[b].child_ids());
    }
    if level_restrict {
        tree.restrict_levels();
    }
    tree.finish();
    Ok(tree)
}

impl Tree {
    fn split(&mut self, b: usize) {
        let level = self.boxes[b].level;
        let (bix, biy) = (self.boxes[b].ix, self.boxes[b].iy);
        let mut child_ranges = [[(0usize, 0usize); N_CATEGORIES]; 4];
        for c in 0..N_CATEGORIES {
            let (lo, hi) = self.boxes[b].ranges[c];
            let keys = &self.keys[c];
            let slice = &mut self.perm[c][lo..hi];
            slice.sort_by_key(|&i| quadrant(keys[i], level));
            let mut pos = lo;
            for (qd, cr) in child_ranges.iter_mut().enumerate() {
                let n = slice.iter().filter(|&&i| quadrant(keys[i], level) == qd).count();
                cr[c] = (pos, pos + n);
                pos += n;
            }
        }
        let radius = self.boxes[b].radius * 0.5;
        for (qd, cr) in child_ranges.iter().enumerate() {
            if cr.iter().all(|(a, z)| a == z) {
                continue;
            }
            let ix = 2 * bix + (qd & 1) as u64;
            let iy = 2 * biy + (qd >> 1) as u64;
            let center = [
                -self.root_radius + (2 * ix + 1) as f64 * radius,
                -self.root_radius + (2 * iy + 1) as f64 * radius,
            ];
            let id = self.boxes.len();
            self.boxes.push(BoxNode {
                level: level + 1,
                ix,
                iy,
                center,
                radius,
                parent: b,
                children: [NONE; 4],
                ranges: *cr,
            });
            self.boxes[b].children[qd] = id;
        }
    }

    /// Deepest box containing integer point `(x, y)` at full depth.
    fn deepest_containing(&self, x: u64, y: u64) -> usize {
        let mut b = 0;
        loop {
            let lvl = self.boxes[b].level;
            if lvl >= MAX_DEPTH {
                return b;
            }
            let c = self.boxes[b].children[quadrant([x, y], lvl)];
            if c == NONE {
                return b;
            }
            b = c;
        }
    }

    fn restrict_levels(&mut self) {
        let full = 1i128 << MAX_DEPTH;
        loop {
            let mut to_split = Vec::new();
            for b in 0..self.boxes.len() {
                let bx = &self.boxes[b];
                if !bx.is_leaf() || bx.level < 2 {
                    continue;
                }
                let w = 1i128 << (MAX_DEPTH - bx.level);
                let x0 = bx.ix as i128 * w;
                let y0 = bx.iy as i128 * w;
                let xs = [x0 - 1, x0 + w / 2, x0 + w];
                let ys = [y0 - 1, y0 + w / 2, y0 + w];
                for (i, &px) in xs.iter().enumerate() {
                    for (j, &py) in ys.iter().enumerate() {
                        if (i == 1 && j == 1) || px < 0 || py < 0 || px >= full || py >= full {
                            continue;
                        }
                        let d = self.deepest_containing(px as u64, py as u64);
                        if self.boxes[d].is_leaf() && self.boxes[d].level + 1 < bx.level {
                            to_split.push(d);
                        }
                    }
                }
            }
            if to_split.is_empty() {
                break;
            }
            to_split.sort_unstable();
            to_split.dedup();
            for b in to_split {
                if self.boxes[b].is_leaf() {
                    self.split(b);
                }
            }
        }
    }

    fn finish(&mut self) {
        let depth = self.boxes.iter().map(|b| b.level).max().unwrap_or(0) as usize;
        self.levels = vec![Vec::new(); depth + 1];
        // breadth-first id order within each level keeps traversal deterministic
        let mut frontier = vec![0usize];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &b in &frontier {
                self.levels[self.boxes[b].level as usize].push(b);
                next.extend(self.boxes[b].child_ids());
            }
            frontier = next;
        }
        for b in 0..self.boxes.len() {
            if self.boxes[b].is_leaf() {
                for c in 0..N_CATEGORIES {
                    let (lo, hi) = self.boxes[b].ranges[c];
                    for &i in &self.perm[c][lo..hi] {
                        self.leaf_of[c][i] = b;
                    }
                }
            }
        }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.boxes.len()).filter(|&b| self.boxes[b].is_leaf())
    }

    /// Particle indices of `cat` inside box `b`.
    pub fn particles(&self, b: usize, cat: Category) -> &[usize] {
        let (lo, hi) = self.boxes[b].ranges[cat as usize];
        &self.perm[cat as usize][lo..hi]
    }

    /// Whether the closed squares of `a` and `b` intersect (exact).
    pub fn touches(&self, a: usize, b: usize) -> bool {
        let (ba, bb) = (&self.boxes[a], &self.boxes[b]);
        let lvl = ba.level.max(bb.level);
        let span = |bx: &BoxNode, v: u64| {
            let w = 1u128 << (lvl - bx.level);
            (v as u128 * w, (v as u128 + 1) * w)
        };
        let (ax0, ax1) = span(ba, ba.ix);
        let (bx0, bx1) = span(bb, bb.ix);
        let (ay0, ay1) = span(ba, ba.iy);
        let (by0, by1) = span(bb, bb.iy);
        ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1
    }

    /// Whether box `b` meets the closed square of half side `r` about `c`.
    #[inline]
    pub fn box_meets_square(&self, b: usize, c: Point, r: f64) -> bool {
        let bx = &self.boxes[b];
        (c[0] - bx.center[0]).abs() <= bx.radius + r && (c[1] - bx.center[1]).abs() <= bx.radius + r
    }

    /// Peers of `b`: boxes at least as large as `b`, touching it, none of
    /// whose children at least as large as `b` touch it. Includes `b`.
    pub fn peers(&self, b: usize) -> Vec<usize> {
        let lvl = self.boxes[b].level;
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(a) = stack.pop() {
            if !self.touches(a, b) {
                continue;
            }
            if self.boxes[a].level == lvl {
                out.push(a);
                continue;
            }
            let kids: Vec<usize> = self.boxes[a].child_ids().filter(|&k| self.touches(k, b)).collect();
            if kids.is_empty() {
                out.push(a);
            } else {
                stack.extend(kids);
            }
        }
        out.sort_unstable();
        out
    }

    /// Leaves meeting the closed square of half side `r` about `c`.
    pub fn area_query(&self, c: Point, r: f64) -> Result<Vec<usize>> {
        Ok(self.area_query_counted(c, r)?.0)
    }

    /// [`Tree::area_query`] plus the number of boxes visited.
    pub fn area_query_counted(&self, c: Point, r: f64) -> Result<(Vec<usize>, usize)> {
        let r0 = self.root_radius;
        if !(c[0].abs() <= r0 && c[1].abs() <= r0) {
            return Err(Error::Domain(format!("query center {c:?} outside the root box")));
        }
        let scale = (1u64 << MAX_DEPTH) as f64;
        let key = |v: f64| (((v + r0) / (2.0 * r0)) * scale).floor().clamp(0.0, scale - 1.0) as u64;
        let ck = [key(c[0]), key(c[1])];
        let mut visits = 1;
        let mut b = 0usize;
        loop {
            let bx = &self.boxes[b];
            if bx.is_leaf() || r > bx.radius * 0.5 {
                break;
            }
            let child = bx.children[quadrant(ck, bx.level)];
            if child == NONE {
                break;
            }
            visits += 1;
            b = child;
        }
        let mut out = Vec::new();
        let mut stack = self.peers(b);
        visits += 9;
        while let Some(a) = stack.pop() {
            visits += 1;
            if !self.box_meets_square(a, c, r) {
                continue;
            }
            if self.boxes[a].is_leaf() {
                out.push(a);
            } else {
                stack.extend(self.boxes[a].child_ids());
            }
        }
        out.sort_unstable();
        Ok((out, visits))
    }

    /// Area queries for many squares, in parallel.
    pub fn area_query_batch(&self, queries: &[(Point, f64)]) -> Result<Vec<Vec<usize>>> {
        queries.par_iter().map(|&(c, r)| self.area_query(c, r)).collect()
    }

    /// Debug dump: `id level cx cy radius parent nchildren counts...`.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            let parent = b.parent().map(|p| p as i64).unwrap_or(-1);
            write!(w, "{i} {} {:e} {:e} {:e} {parent} {}", b.level, b.center[0], b.center[1], b.radius, b.child_ids().count())?;
            for c in CATEGORIES {
                write!(w, " {}", b.count(c))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Interaction lists for every box.
#[derive(Clone, Debug, Default)]
pub struct InteractionLists {
    pub colleagues: Vec<Vec<usize>>,
    /// Leaves touching a leaf, itself included. Empty for non-leaves.
    pub u: Vec<Vec<usize>>,
    /// Children of the parent's colleagues that do not touch the box.
    pub v: Vec<Vec<usize>>,
    /// For leaves: descendants of colleagues not touching the box whose parent does.
    pub w: Vec<Vec<usize>>,
    /// Dual of `w`.
    pub x: Vec<Vec<usize>>,
}

pub fn interaction_lists(tree: &Tree) -> Result<InteractionLists> {
    if !tree.level_restricted {
        return Err(Error::Precondition("interaction lists need a level-restricted tree".into()));
    }
    let nb = tree.boxes.len();
    let mut colleagues = vec![Vec::new(); nb];
    for lvl in &tree.levels {
        for &b in lvl {
            colleagues[b] = match tree.boxes[b].parent() {
                None => vec![b],
                Some(p) => {
                    let mut cs: Vec<usize> = colleagues[p]
                        .iter()
                        .flat_map(|&pc| tree.boxes[pc].child_ids())
                        .filter(|&k| tree.touches(k, b))
                        .collect();
                    cs.sort_unstable();
                    cs
                }
            };
        }
    }
    let per_box: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = (0..nb)
        .into_par_iter()
        .map(|b| {
            let bx = &tree.boxes[b];
            let mut v = Vec::new();
            if let Some(p) = bx.parent() {
                for &pc in &colleagues[p] {
                    for k in tree.boxes[pc].child_ids() {
                        if !tree.touches(k, b) {
                            v.push(k);
                        }
                    }
                }
            }
            v.sort_unstable();
            let mut u = Vec::new();
            let mut w = Vec::new();
            if bx.is_leaf() {
                let mut stack: Vec<usize> = colleagues[b].clone();
                while let Some(a) = stack.pop() {
                    if tree.boxes[a].is_leaf() {
                        u.push(a);
                        continue;
                    }
                    for k in tree.boxes[a].child_ids() {
                        if tree.touches(k, b) {
                            stack.push(k);
                        } else {
                            w.push(k);
                        }
                    }
                }
                // coarser touching leaves
                let mut a = bx.parent;
                while a != NONE {
                    if let Some(pa) = tree.boxes[a].parent() {
                        for &pc in &colleagues[pa] {
                            for k in tree.boxes[pc].child_ids() {
                                if k != a && tree.boxes[k].is_leaf() && tree.touches(k, b) {
                                    u.push(k);
                                }
                            }
                        }
                    }
                    a = tree.boxes[a].parent;
                }
                u.sort_unstable();
                u.dedup();
                w.sort_unstable();
            }
            (u, v, w)
        })
        .collect();
    let mut lists = InteractionLists { colleagues, ..Default::default() };
    lists.x = vec![Vec::new(); nb];
    for (b, (u, v, w)) in per_box.into_iter().enumerate() {
        for &a in &w {
            lists.x[a].push(b);
        }
        lists.u.push(u);
        lists.v.push(v);
        lists.w.push(w);
    }
    for xs in &mut lists.x {
        xs.sort_unstable();
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(seed: u64, n: usize, clustered: bool) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                if clustered && rng.gen_bool(0.6) {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let r = 0.5 + rng.gen_range(-1e-3..1e-3);
                    [r * a.cos(), r * a.sin()]
                } else {
                    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]
                }
            })
            .collect()
    }

    fn source_tree(pts: Vec<Point>, n_max: usize, restrict: bool) -> Tree {
        build_tree(Particles::default().with(Category::Source, pts), n_max, &[Category::Source], restrict).unwrap()
    }

    #[test]
    fn single_point_tree() {
        let t = source_tree(vec![[0.3, -0.2]], 1, true);
        assert_eq!(t.boxes.len(), 1);
        assert!(t.boxes[0].is_leaf());
        assert_eq!(t.area_query([0.3, -0.2], 0.01).unwrap(), vec![0]);
        let l = interaction_lists(&t).unwrap();
        assert_eq!(l.u[0], vec![0]);
        assert!(l.v[0].is_empty() && l.w[0].is_empty() && l.x[0].is_empty());
    }

    #[test]
    fn four_quadrant_points() {
        let t = source_tree(vec![[0.5, 0.5], [-0.5, 0.5], [0.5, -0.5], [-0.5, -0.5]], 1, false);
        assert_eq!(t.boxes.len(), 5);
        assert!(t.boxes[1..].iter().all(|b| b.level == 1 && b.is_leaf()));
    }

    #[test]
    fn depth_cap_on_coincident_points() {
        let pts = vec![[0.1, 0.1]; 5];
        let r = build_tree(Particles::default().with(Category::Source, pts), 2, &[Category::Source], false);
        assert!(r.is_err());
    }

    #[test]
    fn uniform_points_respect_capacity_and_partition() {
        let pts = random_points(1, 10_000, false);
        let t = source_tree(pts.clone(), 30, true);
        let mut seen = vec![0; pts.len()];
        for b in t.leaves() {
            assert!(t.boxes[b].count(Category::Source) <= 30);
            for &i in t.particles(b, Category::Source) {
                seen[i] += 1;
                let bx = &t.boxes[b];
                assert!((pts[i][0] - bx.center[0]).abs() <= bx.radius * (1.0 + 1e-12));
                assert!((pts[i][1] - bx.center[1]).abs() <= bx.radius * (1.0 + 1e-12));
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
        for (b, bx) in t.boxes.iter().enumerate().skip(1) {
            let total: usize = CATEGORIES.iter().map(|&c| bx.count(c)).sum();
            assert!(total > 0, "box {b} empty");
        }
    }

    fn brute_peers(t: &Tree, b: usize) -> Vec<usize> {
        let lvl = t.boxes[b].level;
        let mut out: Vec<usize> = (0..t.boxes.len())
            .filter(|&a| {
                t.boxes[a].level <= lvl
                    && t.touches(a, b)
                    && !t.boxes[a].child_ids().any(|k| t.boxes[k].level <= lvl && t.touches(k, b))
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn brute_area(t: &Tree, c: Point, r: f64) -> Vec<usize> {
        let mut out: Vec<usize> = t.leaves().filter(|&b| t.box_meets_square(b, c, r)).collect();
        out.sort_unstable();
        out
    }

    fn check_level_restriction(t: &Tree) {
        let leaves: Vec<usize> = t.leaves().collect();
        for &a in &leaves {
            for &b in &leaves {
                if a != b && t.touches(a, b) {
                    assert!(t.boxes[a].level.abs_diff(t.boxes[b].level) <= 1);
                }
            }
        }
    }

    #[test]
    fn figure_three_coarse_neighbor_is_a_peer() {
        // one quadrant refined deeply next to a coarse leaf
        let mut pts: Vec<Point> = (0..40).map(|i| [0.01 + 0.002 * i as f64, 0.01 + 0.001 * i as f64]).collect();
        pts.push([-0.7, 0.7]);
        pts.push([0.7, -0.7]);
        let t = source_tree(pts, 4, false);
        let fine = t.leaf_of[0][0];
        let coarse = t.leaf_of[0][40];
        let peers = t.peers(fine);
        assert!(peers.len() <= 9 && peers.contains(&fine));
        let lv = t.boxes[fine].level;
        assert!(lv > 1);
        let brute = brute_peers(&t, fine);
        assert_eq!(peers, brute);
        let _ = coarse;
    }

    #[test]
    fn uniform_tree_peers_are_colleagues() {
        let mut pts = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                pts.push([-0.875 + 0.25 * i as f64, -0.875 + 0.25 * j as f64]);
            }
        }
        let t = source_tree(pts, 1, true);
        let l = interaction_lists(&t).unwrap();
        for b in t.leaves() {
            assert_eq!(t.peers(b), l.colleagues[b]);
            // well-separated V entries
            for &v in &l.v[b] {
                let (bb, vb) = (&t.boxes[b], &t.boxes[v]);
                let d = (bb.center[0] - vb.center[0]).abs().max((bb.center[1] - vb.center[1]).abs());
                assert!(d >= 4.0 * bb.radius - 1e-12);
            }
            assert!(l.v[b].len() <= 27);
        }
    }

    #[test]
    fn non_restricted_tree_rejected_for_lists() {
        let t = source_tree(random_points(3, 200, true), 5, false);
        assert!(matches!(interaction_lists(&t), Err(Error::Precondition(_))));
    }

    /// Sources seen by a leaf through its own lists and its ancestors' V and X lists.
    fn coverage(t: &Tree, l: &InteractionLists, leaf: usize, nsrc: usize) -> Vec<u32> {
        let mut seen = vec![0u32; nsrc];
        let add_sub = |b: usize, seen: &mut Vec<u32>| {
            for &i in t.particles(b, Category::Source) {
                seen[i] += 1;
            }
        };
        for &a in l.u[leaf].iter().chain(&l.w[leaf]) {
            add_sub(a, &mut seen);
        }
        let mut a = leaf;
        while a != NONE {
            for &v in l.v[a].iter().chain(&l.x[a]) {
                add_sub(v, &mut seen);
            }
            a = t.boxes[a].parent;
        }
        seen
    }

    fn check_lists(t: &Tree) {
        let l = interaction_lists(t).unwrap();
        let n = t.points[0].len();
        let leaves: Vec<usize> = t.leaves().collect();
        for &b in &leaves {
            assert!(coverage(t, &l, b, n).iter().all(|&s| s == 1), "partition fails at leaf {b}");
            let mut brute_u: Vec<usize> = leaves.iter().copied().filter(|&a| t.touches(a, b)).collect();
            brute_u.sort_unstable();
            assert_eq!(l.u[b], brute_u);
            for &w in &l.w[b] {
                assert!(l.x[w].contains(&b));
                assert!(!t.touches(w, b));
            }
        }
        for (b, xs) in l.x.iter().enumerate() {
            for &a in xs {
                assert!(l.w[a].contains(&b));
            }
        }
    }

    #[test]
    fn lists_partition_sources_on_clustered_tree() {
        let t = source_tree(random_points(7, 3000, true), 10, true);
        check_level_restriction(&t);
        check_lists(&t);
    }

    #[test]
    fn large_query_returns_all_leaves() {
        let t = source_tree(random_points(5, 500, true), 8, true);
        let mut all: Vec<usize> = t.leaves().collect();
        all.sort_unstable();
        assert_eq!(t.area_query([0.1, 0.2], 2.0 * t.root_radius).unwrap(), all);
        assert!(t.area_query([5.0, 0.0], 0.1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn area_query_matches_brute_force(seed in 0u64..40, qi in 0usize..10_000, logr in -6.0f64..0.5) {
            let pts = random_points(seed, 400, true);
            let t = source_tree(pts.clone(), 6, seed % 2 == 0);
            let c = pts[qi % pts.len()];
            let r = 10f64.powf(logr);
            let (got, visits) = t.area_query_counted(c, r).unwrap();
            prop_assert_eq!(&got, &brute_area(&t, c, r));
            prop_assert!(visits <= 36 * (t.n_levels() + got.len()));
        }

        #[test]
        fn peers_match_brute_force(seed in 0u64..40, bi in 0usize..100_000) {
            let t = source_tree(random_points(seed, 300, true), 4, seed % 3 != 0);
            let b = bi % t.boxes.len();
            let p = t.peers(b);
            prop_assert!(p.contains(&b) && p.len() <= 9);
            prop_assert_eq!(p, brute_peers(&t, b));
        }

        #[test]
        fn lists_partition_random_trees(seed in 0u64..1000, nmax in 1usize..12) {
            let t = source_tree(random_points(seed, 150, seed % 2 == 0), nmax, true);
            check_level_restriction(&t);
            check_lists(&t);
        }
    }
}
