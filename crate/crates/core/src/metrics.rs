//! Segmentation metrics: multi-class accuracy, Dice, one-vs-rest rates and
//! boundary distances (ADE and modified Hausdorff).

use serde::{Deserialize, Serialize};

use crate::data::{Class, LabelMap, NUM_CLASSES};
use crate::postprocess::{extract_boundary, BoundarySet, Interface};
use crate::{Error, Result};

/// `m[t][p]`: pixels of true class `t` predicted as `p` (class indices 0..6).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub m: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Confusion {
    pub fn new(y: &LabelMap, yhat: &LabelMap) -> Self {
        Self::masked(y, yhat, None)
    }

    /// Counts only A-lines with `keep[j] == true`.
    pub fn masked(y: &LabelMap, yhat: &LabelMap, keep: Option<&[bool]>) -> Self {
        assert_eq!((y.r, y.a), (yhat.r, yhat.a), "label maps differ in shape");
        let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (p, (&t, &q)) in y.classes.iter().zip(&yhat.classes).enumerate() {
            if keep.map_or(true, |k| k[p % y.a]) {
                m[t as usize - 1][q as usize - 1] += 1;
            }
        }
        Confusion { m }
    }

    pub fn total(&self) -> u64 {
        self.m.iter().flatten().sum()
    }

    fn true_count(&self, c: usize) -> u64 {
        self.m[c].iter().sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        self.m.iter().map(|row| row[c]).sum()
    }

    /// `|Y_c ∆ Ŷ_c|`
    pub fn symmetric_difference(&self, c: usize) -> u64 {
        self.true_count(c) + self.pred_count(c) - 2 * self.m[c][c]
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 1.0;
        }
        (0..NUM_CLASSES).map(|c| (n - self.symmetric_difference(c) as f64) / n).sum::<f64>() / NUM_CLASSES as f64
    }

    /// `None` when the class is absent on both sides.
    pub fn dice(&self, c: usize) -> Option<f64> {
        let denom = self.true_count(c) + self.pred_count(c);
        (denom > 0).then(|| 2.0 * self.m[c][c] as f64 / denom as f64)
    }

    pub fn mean_dice(&self) -> f64 {
        mean((0..NUM_CLASSES).filter_map(|c| self.dice(c))).unwrap_or(1.0)
    }

    pub fn rates(&self, c: usize) -> Rates {
        let tp = self.m[c][c];
        let pos = self.true_count(c);
        let fp = self.pred_count(c) - tp;
        let neg = self.total() - pos;
        Rates {
            sensitivity: (pos > 0).then(|| tp as f64 / pos as f64),
            specificity: (neg > 0).then(|| (neg - fp) as f64 / neg as f64),
        }
    }
}

/// One-vs-rest rates; a rate is `None` when its denominator class set is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn mean(it: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn accuracy(y: &LabelMap, yhat: &LabelMap) -> f64 {
    Confusion::new(y, yhat).accuracy()
}

pub fn dice_per_class(y: &LabelMap, yhat: &LabelMap) -> [Option<f64>; NUM_CLASSES] {
    let c = Confusion::new(y, yhat);
    std::array::from_fn(|k| c.dice(k))
}

pub fn dice_coef(y: &LabelMap, yhat: &LabelMap) -> f64 {
    Confusion::new(y, yhat).mean_dice()
}

pub fn sensitivity_specificity(y: &LabelMap, yhat: &LabelMap, class: Class) -> Rates {
    Confusion::new(y, yhat).rates(class.index())
}

/// Nearest-neighbour index over boundary points bucketed by A-line.
struct ColumnIndex {
    cols: Vec<Vec<usize>>,
}

impl ColumnIndex {
    fn new(points: &[(usize, usize)]) -> Self {
        let width = points.iter().map(|p| p.1 + 1).max().unwrap_or(0);
        let mut cols = vec![Vec::new(); width];
        for &(i, j) in points {
            cols[j].push(i);
        }
        for c in &mut cols {
            c.sort_unstable();
        }
        ColumnIndex { cols }
    }

    fn column(&self, j: usize) -> &[usize] {
        self.cols.get(j).map_or(&[], |c| c.as_slice())
    }

    /// Smallest |i - i'| within column `j`.
    fn radial(&self, i: usize, j: usize) -> Option<usize> {
        let col = self.column(j);
        let k = col.partition_point(|&v| v < i);
        let above = k.checked_sub(1).map(|k| i - col[k]);
        let below = col.get(k).map(|&v| v - i);
        match (above, below) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Squared Euclidean distance to the nearest point.
    fn nearest_sq(&self, i: usize, j: usize) -> u64 {
        let mut best = u64::MAX;
        for d in 0..self.cols.len().max(j + 1) {
            if (d as u64) * (d as u64) >= best {
                break;
            }
            let mut visit = |jj: usize| {
                if let Some(di) = self.radial(i, jj) {
                    best = best.min((di * di + d * d) as u64);
                }
            };
            visit(j + d);
            if d > 0 && d <= j {
                visit(j - d);
            }
        }
        best
    }
}

fn require(b: &BoundarySet) -> Result<()> {
    if b.is_empty() {
        Err(Error::EmptyBoundary)
    } else {
        Ok(())
    }
}

/// Directed 2D average distance: mean over `from` of the Euclidean distance to
/// the nearest point of `to`, in pixels.
pub fn ade_2d(from: &BoundarySet, to: &BoundarySet) -> Result<f64> {
    require(from)?;
    require(to)?;
    let index = ColumnIndex::new(&to.points);
    let sum: f64 = from.points.iter().map(|&(i, j)| (index.nearest_sq(i, j) as f64).sqrt()).sum();
    Ok(sum / from.len() as f64)
}

/// Radial average distance from `pred` to `gt`, in pixels. A point whose
/// A-line also carries ground truth is scored by radial distance along that
/// A-line; otherwise by 2D nearest-neighbour distance.
pub fn ade(pred: &BoundarySet, gt: &BoundarySet) -> Result<f64> {
    require(pred)?;
    require(gt)?;
    let index = ColumnIndex::new(&gt.points);
    let sum: f64 = pred
        .points
        .iter()
        .map(|&(i, j)| match index.radial(i, j) {
            Some(d) => d as f64,
            None => (index.nearest_sq(i, j) as f64).sqrt(),
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Modified Hausdorff distance in pixels.
pub fn mhd(pred: &BoundarySet, gt: &BoundarySet) -> Result<f64> {
    Ok(ade_2d(pred, gt)?.max(ade_2d(gt, pred)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// One-vs-rest pixel accuracy.
    pub accuracy: f64,
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceMetrics {
    pub interface: Interface,
    /// Radial ADE, prediction to ground truth.
    pub ade_px: f64,
    pub ade_um: f64,
    /// Radial ADE, ground truth to prediction.
    pub ade_reverse_px: f64,
    pub ade_2d_px: f64,
    pub mhd_px: f64,
    pub mhd_um: f64,
    /// The prediction lacks this interface; distances are set to the radial size.
    pub missing_prediction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub pixels: u64,
    pub excluded_alines: usize,
    pub accuracy: f64,
    pub dice: f64,
    /// Mean over interfaces present in the ground truth.
    pub mhd_px: Option<f64>,
    pub mhd_um: Option<f64>,
    pub classes: Vec<ClassMetrics>,
    pub interfaces: Vec<InterfaceMetrics>,
}

fn keep_points(b: BoundarySet, keep: Option<&[bool]>) -> BoundarySet {
    match keep {
        None => b,
        Some(k) => BoundarySet { points: b.points.into_iter().filter(|p| k[p.1]).collect(), ..b },
    }
}

fn interface_metrics(y: &LabelMap, yhat: &LabelMap, f: Interface, pitch: f32, keep: Option<&[bool]>) -> Option<InterfaceMetrics> {
    let gt = keep_points(extract_boundary(y, f, pitch).ok()?, keep);
    if gt.is_empty() {
        return None;
    }
    let pitch = pitch as f64;
    let pred = extract_boundary(yhat, f, pitch as f32).ok().map(|b| keep_points(b, keep)).filter(|b| !b.is_empty());
    let Some(pred) = pred else {
        let r = y.r as f64;
        return Some(InterfaceMetrics {
            interface: f,
            ade_px: r,
            ade_um: r * pitch,
            ade_reverse_px: r,
            ade_2d_px: r,
            mhd_px: r,
            mhd_um: r * pitch,
            missing_prediction: true,
        });
    };
    let ade_px = ade(&pred, &gt).ok()?;
    let mhd_px = mhd(&pred, &gt).ok()?;
    Some(InterfaceMetrics {
        interface: f,
        ade_px,
        ade_um: ade_px * pitch,
        ade_reverse_px: ade(&gt, &pred).ok()?,
        ade_2d_px: ade_2d(&pred, &gt).ok()?,
        mhd_px,
        mhd_um: mhd_px * pitch,
        missing_prediction: false,
    })
}

/// Scores one frame. A-lines with `keep[j] == false` are left out of every
/// count and boundary set.
pub fn evaluate(y: &LabelMap, yhat: &LabelMap, pixel_pitch_um: f32, keep: Option<&[bool]>) -> EvalReport {
    let conf = Confusion::masked(y, yhat, keep);
    let n = conf.total() as f64;
    let classes = Class::ALL
        .iter()
        .map(|&c| {
            let k = c.index();
            let rates = conf.rates(k);
            ClassMetrics {
                class: c.name().to_string(),
                sensitivity: rates.sensitivity,
                specificity: rates.specificity,
                accuracy: if n > 0.0 { (n - conf.symmetric_difference(k) as f64) / n } else { 1.0 },
                dice: conf.dice(k),
            }
        })
        .collect();
    let interfaces: Vec<_> = Interface::ALL.iter().filter_map(|&f| interface_metrics(y, yhat, f, pixel_pitch_um, keep)).collect();
    let mhd_px = mean(interfaces.iter().map(|m| m.mhd_px));
    EvalReport {
        frames: 1,
        pixels: conf.total(),
        excluded_alines: keep.map_or(0, |k| k.iter().filter(|&&v| !v).count()),
        accuracy: conf.accuracy(),
        dice: conf.mean_dice(),
        mhd_px,
        mhd_um: mhd_px.map(|v| v * pixel_pitch_um as f64),
        classes,
        interfaces,
    }
}

/// Frame-averaged report. Optional entries average over the frames where they
/// are defined.
pub fn mean_report(reports: &[EvalReport]) -> Option<EvalReport> {
    let first = reports.first()?;
    let avg = |f: &dyn Fn(&EvalReport) -> Option<f64>| mean(reports.iter().filter_map(f));
    let classes = (0..NUM_CLASSES)
        .map(|k| ClassMetrics {
            class: first.classes[k].class.clone(),
            sensitivity: avg(&|r| r.classes[k].sensitivity),
            specificity: avg(&|r| r.classes[k].specificity),
            accuracy: avg(&|r| Some(r.classes[k].accuracy)).unwrap_or(1.0),
            dice: avg(&|r| r.classes[k].dice),
        })
        .collect();
    let interfaces = Interface::ALL
        .iter()
        .filter_map(|&f| {
            let rows: Vec<&InterfaceMetrics> = reports.iter().flat_map(|r| r.interfaces.iter().filter(move |m| m.interface == f)).collect();
            let m = |g: fn(&InterfaceMetrics) -> f64| mean(rows.iter().map(|x| g(x)));
            Some(InterfaceMetrics {
                interface: f,
                ade_px: m(|x| x.ade_px)?,
                ade_um: m(|x| x.ade_um)?,
                ade_reverse_px: m(|x| x.ade_reverse_px)?,
                ade_2d_px: m(|x| x.ade_2d_px)?,
                mhd_px: m(|x| x.mhd_px)?,
                mhd_um: m(|x| x.mhd_um)?,
                missing_prediction: rows.iter().any(|x| x.missing_prediction),
            })
        })
        .collect();
    Some(EvalReport {
        frames: reports.iter().map(|r| r.frames).sum(),
        pixels: reports.iter().map(|r| r.pixels).sum(),
        excluded_alines: reports.iter().map(|r| r.excluded_alines).sum(),
        accuracy: avg(&|r| Some(r.accuracy)).unwrap_or(1.0),
        dice: avg(&|r| Some(r.dice)).unwrap_or(1.0),
        mhd_px: avg(&|r| r.mhd_px),
        mhd_um: avg(&|r| r.mhd_um),
        classes,
        interfaces,
    })
}

/// A-lines to keep when thickened walls are excluded: those whose
/// lumen-to-outside wall thickness is at most `max_wall_px`.
pub fn thin_wall_alines(y: &LabelMap, max_wall_px: usize) -> Vec<bool> {
    (0..y.a)
        .map(|j| {
            let wall = (0..y.r).filter(|&i| !matches!(y.get(i, j), Class::Lumen | Class::Outside)).count();
            wall <= max_wall_px
        })
        .collect()
}

/// `frame,interface,ade_px,ade_um,ade_reverse_px,mhd_px,mhd_um,missing_prediction`
pub fn interface_csv(frames: &[(String, EvalReport)]) -> String {
    let mut s = String::from("frame,interface,ade_px,ade_um,ade_reverse_px,mhd_px,mhd_um,missing_prediction\n");
    for (name, r) in frames {
        for m in &r.interfaces {
            s.push_str(&format!(
                "{name},{},{},{},{},{},{},{}\n",
                m.interface.name(),
                m.ade_px,
                m.ade_um,
                m.ade_reverse_px,
                m.mhd_px,
                m.mhd_um,
                m.missing_prediction
            ));
        }
    }
    s
}
