//! Probability map to topology-valid label map, topology checks, and
//! interface (boundary) extraction.
//!
//! `clean` iterates one pass of small-object removal, per-A-line order repair,
//! interface smoothing and a second order repair until the map stops
//! changing. The order repair is an exact dynamic program over the valid
//! A-line patterns `L+ I* M* O+`, `L+ G+ O+` and `L+ P+ O+`, so every output
//! satisfies [`verify_topology`].

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::{Class, LabelMap, ProbMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub min_object_px: usize,
    pub smooth_radius: usize,
    pub max_iterations: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self { min_object_px: 16, smooth_radius: 3, max_iterations: 8 }
    }
}

impl CleanConfig {
    /// Defaults scaled from the 64x128 reference grid.
    pub fn for_grid(r: usize, a: usize) -> Self {
        let area = (r * a) as f64 / (64.0 * 128.0);
        Self {
            min_object_px: ((16.0 * area).round() as usize).max(1),
            smooth_radius: ((3.0 * a as f64 / 128.0).round() as usize).max(1),
            ..Self::default()
        }
    }
}

/// 4-connected components of `class` (angular axis wraps), as flat pixel indices.
pub fn components(labels: &LabelMap, class: Class) -> Vec<Vec<usize>> {
    components_where(labels.r, labels.a, |p| labels.classes[p] == class.code())
}

fn components_where(r: usize, a: usize, member: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; r * a];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..r * a {
        if seen[start] || !member(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (i, j) = (p / a, p % a);
            let mut visit = |q: usize| {
                if !seen[q] && member(q) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(p - a);
            }
            if i + 1 < r {
                visit(p + a);
            }
            visit(i * a + (j + 1) % a);
            visit(i * a + (j + a - 1) % a);
        }
        out.push(comp);
    }
    out
}

/// True when some region not of `class` is enclosed by it, i.e. touches neither radial border.
pub fn has_void(labels: &LabelMap, class: Class) -> bool {
    let (r, a) = (labels.r, labels.a);
    if labels.count(class) == 0 {
        return false;
    }
    components_where(r, a, |p| labels.classes[p] != class.code())
        .iter()
        .any(|comp| comp.iter().all(|&p| p / a != 0 && p / a != r - 1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyReport {
    pub lumen_single_component: bool,
    pub gshadow_single_component: bool,
    pub outside_single_component: bool,
    pub shadows_confined: bool,
    pub layer_order_valid: bool,
    /// A-lines that break the layer order or shadow confinement.
    pub violations: Vec<usize>,
}

impl TopologyReport {
    pub fn is_valid(&self) -> bool {
        self.lumen_single_component
            && self.gshadow_single_component
            && self.outside_single_component
            && self.shadows_confined
            && self.layer_order_valid
    }
}

/// Class runs along one A-line, top to bottom.
fn runs(col: &[Class]) -> Vec<(Class, usize)> {
    let mut out: Vec<(Class, usize)> = Vec::new();
    for &c in col {
        match out.last_mut() {
            Some((k, n)) if *k == c => *n += 1,
            _ => out.push((c, 1)),
        }
    }
    out
}

fn order_rank(c: Class) -> Option<u8> {
    match c {
        Class::Lumen => Some(0),
        Class::Intima => Some(1),
        Class::Media => Some(2),
        Class::Outside => Some(3),
        _ => None,
    }
}

/// Evaluates the five topology rules.
pub fn verify_topology(y: &LabelMap) -> TopologyReport {
    let single = |c: Class| components(y, c).len() <= 1 && !has_void(y, c);
    let mut order_ok = true;
    let mut confined = true;
    let mut violations = Vec::new();
    for j in 0..y.a {
        let rs = runs(&y.aline(j));
        let ranks: Vec<u8> = rs.iter().filter_map(|&(c, _)| order_rank(c)).collect();
        let ordered = ranks.windows(2).all(|w| w[0] < w[1]);
        let has_shadow = rs.iter().any(|(c, _)| c.is_shadow());
        let shadow_ok = !has_shadow
            || (rs.len() == 3 && rs[0].0 == Class::Lumen && rs[1].0.is_shadow() && rs[2].0 == Class::Outside);
        order_ok &= ordered;
        confined &= shadow_ok;
        if !ordered || !shadow_ok {
            violations.push(j);
        }
    }
    TopologyReport {
        lumen_single_component: single(Class::Lumen),
        gshadow_single_component: single(Class::GShadow),
        outside_single_component: single(Class::Outside),
        shadows_confined: confined,
        layer_order_valid: order_ok,
        violations,
    }
}

/// One stage of an A-line pattern: its class and whether it may be empty.
type Stage = (Class, bool);

const LAYERED: [Stage; 4] =
    [(Class::Lumen, false), (Class::Intima, true), (Class::Media, true), (Class::Outside, false)];
const GUIDEWIRE: [Stage; 3] = [(Class::Lumen, false), (Class::GShadow, false), (Class::Outside, false)];
const PLAQUE: [Stage; 3] = [(Class::Lumen, false), (Class::PShadow, false), (Class::Outside, false)];

/// Closest column (fewest changed pixels) matching `pattern`; `None` if the
/// column is too short.
fn fit_pattern(col: &[Class], pattern: &[Stage]) -> Option<(usize, Vec<Class>)> {
    let (r, s) = (col.len(), pattern.len());
    let mandatory = pattern.iter().filter(|st| !st.1).count();
    if r < mandatory {
        return None;
    }
    const INF: usize = usize::MAX / 2;
    let mut cost = vec![INF; r * s];
    let mut back = vec![0usize; r * s];
    cost[0] = (col[0] != pattern[0].0) as usize;
    for i in 1..r {
        for k in 0..s {
            let here = (col[i] != pattern[k].0) as usize;
            let mut best = (INF, k);
            // Staying first keeps ties on the earlier boundary.
            for prev in (0..=k).rev() {
                if prev < k && !pattern[prev + 1..k].iter().all(|st| st.1) {
                    break;
                }
                let c = cost[(i - 1) * s + prev];
                if c < best.0 {
                    best = (c, prev);
                }
            }
            if best.0 < INF {
                cost[i * s + k] = best.0 + here;
                back[i * s + k] = best.1;
            }
        }
    }
    let total = cost[(r - 1) * s + s - 1];
    if total >= INF {
        return None;
    }
    let mut out = vec![Class::Outside; r];
    let mut k = s - 1;
    for i in (0..r).rev() {
        out[i] = pattern[k].0;
        k = back[i * s + k];
    }
    Some((total, out))
}

fn repair_column(col: &[Class], allow_guidewire: bool) -> Vec<Class> {
    let mut best: Option<(usize, Vec<Class>)> = None;
    let patterns: &[&[Stage]] = if allow_guidewire { &[&LAYERED, &GUIDEWIRE, &PLAQUE] } else { &[&LAYERED, &PLAQUE] };
    for pattern in patterns {
        if let Some((c, fitted)) = fit_pattern(col, pattern) {
            if best.as_ref().is_none_or(|b| c < b.0) {
                best = Some((c, fitted));
            }
        }
    }
    best.map(|b| b.1).unwrap_or_else(|| col.to_vec())
}

/// Per-A-line order repair followed by keeping only the largest guidewire shadow.
fn enforce_order(y: &LabelMap) -> LabelMap {
    let mut out = y.clone();
    for j in 0..y.a {
        out.set_aline(j, &repair_column(&y.aline(j), true));
    }
    let g = components(&out, Class::GShadow);
    if g.len() > 1 {
        let keep = largest(&g);
        let mut redo = vec![false; y.a];
        for (n, comp) in g.iter().enumerate() {
            if n != keep {
                comp.iter().for_each(|&p| redo[p % y.a] = true);
            }
        }
        for (j, _) in redo.iter().enumerate().filter(|(_, &r)| r) {
            out.set_aline(j, &repair_column(&y.aline(j), false));
        }
    }
    out
}

/// Index of the largest component; ties go to the one found first.
fn largest(comps: &[Vec<usize>]) -> usize {
    let mut best = 0;
    for (n, c) in comps.iter().enumerate() {
        if c.len() > comps[best].len() {
            best = n;
        }
    }
    best
}

/// Reassigns every component smaller than `min_px` (other than the largest of
/// its class) from the surrounding classes.
fn remove_small_objects(y: &LabelMap, min_px: usize) -> LabelMap {
    let (r, a) = (y.r, y.a);
    let mut unknown = vec![false; r * a];
    for class in Class::ALL {
        let comps = components(y, class);
        if comps.len() < 2 {
            continue;
        }
        let keep = largest(&comps);
        for (n, comp) in comps.iter().enumerate() {
            if n != keep && comp.len() < min_px {
                comp.iter().for_each(|&p| unknown[p] = true);
            }
        }
    }
    if !unknown.iter().any(|&u| u) {
        return y.clone();
    }
    let mut out = y.clone();
    let known = |p: usize| if unknown[p] { None } else { Some(y.classes[p]) };
    for j in 0..a {
        let mut i = 0;
        while i < r {
            if !unknown[i * a + j] {
                i += 1;
                continue;
            }
            let start = i;
            while i < r && unknown[i * a + j] {
                i += 1;
            }
            let above = (start > 0).then(|| y.classes[(start - 1) * a + j]);
            let below = (i < r).then(|| y.classes[i * a + j]);
            match (above, below) {
                (Some(x), Some(z)) if x != z => {
                    // Split the gap where it best agrees with the neighbouring A-lines.
                    let score = |row: usize, c: u8| -> i32 {
                        [(j + a - 1) % a, (j + 1) % a]
                            .iter()
                            .filter_map(|&jj| known(row * a + jj))
                            .map(|k| (k == c) as i32)
                            .sum()
                    };
                    let mut best = (i32::MIN, start);
                    for split in start..=i {
                        let s: i32 = (start..i).map(|row| score(row, if row < split { x } else { z })).sum();
                        if s > best.0 {
                            best = (s, split);
                        }
                    }
                    for row in start..i {
                        out.classes[row * a + j] = if row < best.1 { x } else { z };
                    }
                }
                (Some(c), _) | (None, Some(c)) => {
                    for row in start..i {
                        out.classes[row * a + j] = c;
                    }
                }
                (None, None) => {
                    for row in start..i {
                        let side = (1..a).find_map(|d| known(row * a + (j + d) % a).or(known(row * a + (j + a - d) % a)));
                        out.classes[row * a + j] = side.unwrap_or(Class::Outside.code());
                    }
                }
            }
        }
    }
    out
}

/// Median of the values at circular positions within `radius` that are present.
fn windowed_median(values: &[Option<usize>], j: usize, radius: usize) -> Option<usize> {
    let a = values.len();
    values[j]?;
    let span = radius.min((a - 1) / 2);
    let mut w: Vec<usize> = (0..=2 * span).filter_map(|k| values[(j + a + k - span) % a]).collect();
    w.sort_unstable();
    Some(w[w.len() / 2])
}

/// Repeated running median until the profile no longer changes.
fn median_root(profile: &[Option<usize>], radius: usize) -> Vec<Option<usize>> {
    let mut cur = profile.to_vec();
    for _ in 0..32 {
        let next: Vec<Option<usize>> = (0..cur.len()).map(|j| windowed_median(&cur, j, radius)).collect();
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Interface depths of a repaired A-line: lumen end, intima end (layered
/// A-lines only), outside start, and the shadow class if any.
fn column_profile(col: &[Class]) -> (usize, Option<usize>, usize, Option<Class>) {
    let r = col.len();
    let l = col.iter().position(|&c| c != Class::Lumen).unwrap_or(r);
    let e = col.iter().position(|&c| c == Class::Outside).unwrap_or(r);
    let shadow = col.get(l).copied().filter(|c| c.is_shadow());
    let m = shadow.is_none().then(|| (l..r).find(|&i| col[i] != Class::Intima).unwrap_or(r));
    (l, m, e, shadow)
}

/// Median-smooths the three interface profiles along the angular axis.
/// Expects per-A-line valid input.
fn smooth_interfaces(y: &LabelMap, radius: usize) -> LabelMap {
    let (r, a) = (y.r, y.a);
    if radius == 0 {
        return y.clone();
    }
    let prof: Vec<_> = (0..a).map(|j| column_profile(&y.aline(j))).collect();
    let lumen = median_root(&prof.iter().map(|p| Some(p.0)).collect::<Vec<_>>(), radius);
    let iel = median_root(&prof.iter().map(|p| p.1).collect::<Vec<_>>(), radius);
    let eel = median_root(&prof.iter().map(|p| Some(p.2)).collect::<Vec<_>>(), radius);
    let mut out = y.clone();
    for j in 0..a {
        let (l0, m0, e0, shadow) = prof[j];
        let (l, m, e) = (lumen[j].unwrap_or(l0), iel[j].or(m0), eel[j].unwrap_or(e0));
        if (l, m, e) == (l0, m0, e0) {
            continue;
        }
        let l = l.max(1);
        let e = e.clamp(l, r);
        let col: Vec<Class> = (0..r)
            .map(|i| {
                if i < l {
                    Class::Lumen
                } else if i >= e {
                    Class::Outside
                } else if let Some(s) = shadow {
                    s
                } else if i < m.unwrap_or(l).clamp(l, e) {
                    Class::Intima
                } else {
                    Class::Media
                }
            })
            .collect();
        out.set_aline(j, &col);
    }
    out
}

fn clean_pass(y: &LabelMap, cfg: &CleanConfig) -> LabelMap {
    let y = remove_small_objects(y, cfg.min_object_px);
    let y = enforce_order(&y);
    let y = smooth_interfaces(&y, cfg.smooth_radius);
    enforce_order(&y)
}

/// Topology enforcement on a hard label map, iterated to a fixed point.
pub fn clean_labels(y: &LabelMap, cfg: &CleanConfig) -> LabelMap {
    if y.count(Class::Lumen) == 0 {
        log::warn!("clean: no lumen pixels, returning an all-outside map");
        return LabelMap::filled(y.r, y.a, Class::Outside);
    }
    let mut cur = y.clone();
    for _ in 0..cfg.max_iterations.max(1) {
        let next = clean_pass(&cur, cfg);
        if next == cur {
            return cur;
        }
        cur = next;
    }
    cur
}

/// Hard argmax followed by [`clean_labels`].
pub fn clean(yhat: &ProbMap, cfg: &CleanConfig) -> LabelMap {
    clean_labels(&yhat.argmax(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interface {
    /// Outer lumen boundary.
    Lumen,
    /// Outer intima boundary.
    Iel,
    /// Outer media boundary.
    Eel,
}

impl Interface {
    pub const ALL: [Interface; 3] = [Interface::Lumen, Interface::Iel, Interface::Eel];

    pub fn name(self) -> &'static str {
        match self {
            Interface::Lumen => "lumen",
            Interface::Iel => "iel",
            Interface::Eel => "eel",
        }
    }

    /// Class whose outer edge this interface is, and the classes that may follow it.
    fn transition(self) -> (Class, &'static [Class]) {
        match self {
            Interface::Lumen => (Class::Lumen, &[Class::Intima, Class::Media, Class::Outside, Class::GShadow, Class::PShadow]),
            Interface::Iel => (Class::Intima, &[Class::Media, Class::Outside]),
            Interface::Eel => (Class::Media, &[Class::Outside]),
        }
    }
}

/// Boundary pixels `(radial, angular)`: the first pixel past the inner class
/// on each A-line, sorted by A-line then depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub points: Vec<(usize, usize)>,
    pub pixel_pitch_um: f32,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_boundary(y: &LabelMap, interface: Interface, pixel_pitch_um: f32) -> Result<BoundarySet> {
    let (inner, outer) = interface.transition();
    let mut points = Vec::new();
    for j in 0..y.a {
        for i in 1..y.r {
            if y.get(i - 1, j) == inner && outer.contains(&y.get(i, j)) {
                points.push((i, j));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::MissingInterface(interface.name()));
    }
    Ok(BoundarySet { points, pixel_pitch_um })
}

pub fn extract_boundaries(y: &LabelMap, pixel_pitch_um: f32) -> Vec<(Interface, Result<BoundarySet>)> {
    Interface::ALL.iter().map(|&f| (f, extract_boundary(y, f, pixel_pitch_um))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnnotationSet, ShadowKind, ShadowWedge};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layered(r: usize, a: usize, l: usize, m: usize, e: usize) -> LabelMap {
        let ann = AnnotationSet {
            lumen: vec![l as f64; a],
            iel: vec![m as f64; a],
            eel: vec![e as f64; a],
            shadow_wedges: vec![],
        };
        ann.to_labels(r, a).unwrap()
    }

    fn random_probmap(r: usize, a: usize, seed: u64) -> ProbMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Vec::with_capacity(r * a * 6);
        for _ in 0..r * a {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        ProbMap::new(r, a, probs).unwrap()
    }

    #[test]
    fn components_wrap_around_the_angular_seam() {
        let mut y = LabelMap::filled(8, 8, Class::Outside);
        y.set(3, 0, Class::Lumen);
        y.set(3, 7, Class::Lumen);
        assert_eq!(components(&y, Class::Lumen).len(), 1);
        y.set(5, 3, Class::Lumen);
        assert_eq!(components(&y, Class::Lumen).len(), 2);
    }

    #[test]
    fn verify_flags_constructed_counterexamples() {
        let good = layered(12, 8, 3, 5, 8);
        assert!(verify_topology(&good).is_valid());

        let mut two_lumens = good.clone();
        two_lumens.set(10, 2, Class::Lumen);
        assert!(!verify_topology(&two_lumens).lumen_single_component);

        let mut swapped = LabelMap::filled(8, 8, Class::Outside);
        swapped.set_aline(3, &[Class::Lumen, Class::Media, Class::Intima, Class::Outside].repeat(2));
        let rep = verify_topology(&swapped);
        assert!(!rep.layer_order_valid);
        assert!(rep.violations.contains(&3));

        let mut stray_shadow = good.clone();
        stray_shadow.set(4, 1, Class::PShadow);
        assert!(!verify_topology(&stray_shadow).shadows_confined);
    }

    #[test]
    fn valid_map_is_a_fixed_point() {
        let y = layered(16, 16, 4, 7, 11);
        assert_eq!(clean(&ProbMap::from_labels(&y), &CleanConfig::for_grid(16, 16)), y);
    }

    #[test]
    fn isolated_wrong_pixels_are_removed() {
        let y = layered(32, 32, 8, 14, 20);
        let mut bad = y.clone();
        bad.set(3, 5, Class::Media);
        bad.set(17, 20, Class::Lumen);
        bad.set(26, 9, Class::PShadow);
        assert_eq!(clean_labels(&bad, &CleanConfig::for_grid(32, 32)), y);
    }

    #[test]
    fn single_aline_notch_is_smoothed_away() {
        let y = layered(32, 32, 8, 14, 20);
        let mut bad = y.clone();
        bad.set(13, 6, Class::Media);
        assert_eq!(clean_labels(&bad, &CleanConfig::for_grid(32, 32)), y);
    }

    #[test]
    fn outputs_are_valid_and_idempotent_on_random_maps() {
        let cfg = CleanConfig::for_grid(16, 32);
        for seed in 0..30 {
            let once = clean(&random_probmap(16, 32, seed), &cfg);
            assert!(verify_topology(&once).is_valid(), "seed {seed}");
            assert_eq!(clean(&ProbMap::from_labels(&once), &cfg), once, "seed {seed}");
        }
    }

    #[test]
    fn no_lumen_gives_all_outside() {
        let y = LabelMap::filled(8, 8, Class::Media);
        let out = clean_labels(&y, &CleanConfig::default());
        assert_eq!(out, LabelMap::filled(8, 8, Class::Outside));
    }

    #[test]
    fn boundaries_follow_rasterised_contours() {
        let ann = AnnotationSet {
            lumen: (0..16).map(|j| 3.0 + (j % 3) as f64 * 0.4).collect(),
            iel: (0..16).map(|j| 6.2 + (j % 2) as f64).collect(),
            eel: vec![9.6; 16],
            shadow_wedges: vec![ShadowWedge { kind: ShadowKind::Guidewire, a_start: 10, a_end: 12 }],
        };
        let y = ann.to_labels(14, 16).unwrap();
        let lumen = extract_boundary(&y, Interface::Lumen, 1.0).unwrap();
        let iel = extract_boundary(&y, Interface::Iel, 1.0).unwrap();
        for j in (0..16).filter(|j| !(10..=12).contains(j)) {
            assert!(lumen.points.contains(&(crate::data::rasterize(ann.lumen[j]), j)));
            assert!(iel.points.contains(&(crate::data::rasterize(ann.iel[j]), j)));
        }
        assert_eq!(iel.len(), 13);
        let empty = LabelMap::filled(8, 8, Class::Outside);
        for (_, b) in extract_boundaries(&empty, 1.0) {
            assert!(matches!(b, Err(Error::MissingInterface(_))));
        }
    }
}
