//! Segmentation metrics: voxel overlap, lesion-wise detection through 3-D
//! connected components, and symmetric surface distances.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelMetrics {
    pub soft_dice: f64,
    pub hard_dice: f64,
    pub jaccard: f64,
    pub ppv: f64,
}

/// Confusion counts of two masks binarized at `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn check_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} and reference {:?} differ in dims",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn confusion(pred: &Volume, gt: &Volume, threshold: f32) -> Result<Confusion> {
    check_dims(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= threshold, g >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

/// `num / den`, or `empty` when `den` is zero.
fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Soft Dice on the raw values and hard Dice, Jaccard and PPV on the masks
/// binarized at `threshold`. Two empty masks score 1 everywhere; an empty
/// prediction against a nonempty reference has PPV 0.
pub fn voxel_metrics(pred: &Volume, gt: &Volume, threshold: f32) -> Result<VoxelMetrics> {
    let c = confusion(pred, gt, threshold)?;
    let (mut inter, mut denom) = (0.0f64, 0.0f64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += p as f64 * g as f64;
        denom += p as f64 + g as f64;
    }
    let soft_dice = if denom == 0.0 {
        1.0
    } else {
        2.0 * inter / denom
    };
    let union = c.tp + c.fp + c.fn_;
    let ppv_empty = if c.fn_ == 0 { 1.0 } else { 0.0 };
    Ok(VoxelMetrics {
        soft_dice,
        hard_dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1.0),
        jaccard: ratio(c.tp, union, 1.0),
        ppv: ratio(c.tp, c.tp + c.fp, ppv_empty),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::invalid(format!(
                "connectivity must be 6, 18 or 26, got {n}"
            ))),
        }
    }

    fn max_manhattan(self) -> i32 {
        match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        }
    }

    /// Neighbour offsets that precede the voxel in raster order.
    fn backward_offsets(self) -> Vec<[i32; 3]> {
        let mut out = Vec::new();
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let m = dz.abs() + dy.abs() + dx.abs();
                    let before = dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0)));
                    if m >= 1 && m <= self.max_manhattan() && before {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Component labels, `0` for background and `1..=n_components` otherwise,
/// numbered in raster order of each component's first voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub labels: Vec<u32>,
    pub n_components: usize,
}

impl LabelVolume {
    /// Voxel count of each component, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_components];
        for &l in &self.labels {
            if l > 0 {
                s[l as usize - 1] += 1;
            }
        }
        s
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn require_binary(v: &Volume, what: &str) -> Result<()> {
    if v.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::invalid(format!("{what} must be binary (0 or 1)")));
    }
    Ok(())
}

/// Two-pass union-find labeling.
pub fn connected_components_3d(mask: &Volume, connectivity: Connectivity) -> Result<LabelVolume> {
    require_binary(mask, "connected-component input")?;
    let [d, h, w] = mask.dims();
    let offsets = connectivity.backward_offsets();
    let mut provisional = vec![0u32; mask.len()];
    let mut parent: Vec<u32> = vec![0];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = mask.index(z, y, x);
                if mask.data()[i] == 0.0 {
                    continue;
                }
                let mut label = 0u32;
                for o in &offsets {
                    let (nz, ny, nx) = (z as i32 + o[0], y as i32 + o[1], x as i32 + o[2]);
                    if nz < 0 || ny < 0 || nx < 0 || ny >= h as i32 || nx >= w as i32 {
                        continue;
                    }
                    let nl = provisional[mask.index(nz as usize, ny as usize, nx as usize)];
                    if nl == 0 {
                        continue;
                    }
                    if label == 0 {
                        label = find(&mut parent, nl);
                    } else {
                        let (a, b) = (find(&mut parent, label), find(&mut parent, nl));
                        if a != b {
                            let (lo, hi) = (a.min(b), a.max(b));
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == 0 {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }
    let mut compact = vec![0u32; parent.len()];
    let mut n = 0u32;
    let labels = (0..provisional.len())
        .map(|i| {
            let l = provisional[i];
            if l == 0 {
                return 0;
            }
            let root = find(&mut parent, l) as usize;
            if compact[root] == 0 {
                n += 1;
                compact[root] = n;
            }
            compact[root]
        })
        .collect();
    Ok(LabelVolume {
        dims: mask.dims(),
        spacing: mask.spacing(),
        labels,
        n_components: n as usize,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionDetection {
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub detected_gt: usize,
    pub true_pred: usize,
    pub n_gt: usize,
    pub n_pred: usize,
}

/// A reference lesion counts as detected when at least `overlap_frac` of its
/// voxels are predicted foreground; a predicted lesion is a true detection
/// when it touches any reference lesion. No lesions on either side scores 1;
/// an empty side against a nonempty one scores 0.
pub fn lesion_detection(
    pred_cc: &LabelVolume,
    gt_cc: &LabelVolume,
    overlap_frac: f64,
) -> Result<LesionDetection> {
    if pred_cc.dims != gt_cc.dims {
        return Err(Error::shape(format!(
            "label volumes differ in dims: {:?} vs {:?}",
            pred_cc.dims, gt_cc.dims
        )));
    }
    if !(overlap_frac > 0.0 && overlap_frac <= 1.0) {
        return Err(Error::invalid(format!(
            "overlap fraction must lie in (0, 1], got {overlap_frac}"
        )));
    }
    let (n_gt, n_pred) = (gt_cc.n_components, pred_cc.n_components);
    let mut covered = vec![0usize; n_gt];
    let mut touches = vec![false; n_pred];
    for (&p, &g) in pred_cc.labels.iter().zip(&gt_cc.labels) {
        if p > 0 && g > 0 {
            covered[g as usize - 1] += 1;
            touches[p as usize - 1] = true;
        }
    }
    let sizes = gt_cc.sizes();
    // as a ratio: `0.1 * 30.0` rounds above 3, which would reject an overlap
    // of exactly one tenth
    let detected_gt = (0..n_gt)
        .filter(|&k| covered[k] as f64 / sizes[k] as f64 >= overlap_frac)
        .count();
    let true_pred = touches.iter().filter(|&&t| t).count();
    let both_empty = n_gt == 0 && n_pred == 0;
    let empty = if both_empty { 1.0 } else { 0.0 };
    let recall = ratio(detected_gt as u64, n_gt as u64, empty);
    let precision = ratio(true_pred as u64, n_pred as u64, empty);
    let f1 = if both_empty {
        1.0
    } else if recall + precision == 0.0 {
        0.0
    } else {
        2.0 * recall * precision / (recall + precision)
    };
    Ok(LesionDetection {
        f1,
        recall,
        precision,
        detected_gt,
        true_pred,
        n_gt,
        n_pred,
    })
}

/// Foreground voxels with at least one background 6-neighbour; outside the
/// volume counts as background.
pub fn surface_voxels(mask: &Volume) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims();
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask.get(z as usize, y as usize, x as usize) != 0.0
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                if !fg(zi, yi, xi) {
                    continue;
                }
                let boundary = [
                    (-1, 0, 0),
                    (1, 0, 0),
                    (0, -1, 0),
                    (0, 1, 0),
                    (0, 0, -1),
                    (0, 0, 1),
                ]
                .iter()
                .any(|&(a, b, c)| !fg(zi + a, yi + b, xi + c));
                if boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// For each point of `from`, the distance in mm to the nearest point of `to`.
fn directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    (0..3)
                        .map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// `(ASSD, Hausdorff)` in mm between the surfaces of two binary masks, by
/// exhaustive pairwise search.
pub fn surface_distance(pred: &Volume, gt: &Volume, spacing: [f32; 3]) -> Result<(f64, f64)> {
    check_dims(pred, gt)?;
    require_binary(pred, "surface-distance prediction")?;
    require_binary(gt, "surface-distance reference")?;
    let (a, b) = (surface_voxels(pred), surface_voxels(gt));
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedDistance);
    }
    let sp = spacing.map(|s| s as f64);
    let ab = directed(&a, &b, sp);
    let ba = directed(&b, &a, sp);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(((mean(&ab) + mean(&ba)) / 2.0, max(&ab).max(max(&ba))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f32,
    /// 6, 18 or 26.
    pub connectivity: u32,
    pub overlap_frac: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            connectivity: 26,
            overlap_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subject: String,
    pub soft_dice: f64,
    pub hard_dice: f64,
    pub jaccard: f64,
    pub ppv: f64,
    /// Voxel-wise F1, identical to the hard Dice.
    pub voxel_f1: f64,
    pub lesion_f1: f64,
    pub lesion_recall: f64,
    pub lesion_ppv: f64,
    /// `None` when either mask is empty.
    pub assd_mm: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    pub n_gt_lesions: usize,
    pub n_pred_lesions: usize,
}

/// All metrics for one subject. The reference is binarized at the same
/// threshold for the hard and lesion-wise metrics.
pub fn evaluate(
    subject: &str,
    pred: &Volume,
    gt: &Volume,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if !pred.same_grid(gt) {
        return Err(Error::shape(format!(
            "prediction {:?}@{:?} and reference {:?}@{:?} are on different grids",
            pred.dims(),
            pred.spacing(),
            gt.dims(),
            gt.spacing()
        )));
    }
    let conn = Connectivity::from_count(cfg.connectivity)?;
    let v = voxel_metrics(pred, gt, cfg.threshold)?;
    let bin = |x: &Volume| x.map(|t| if t >= cfg.threshold { 1.0 } else { 0.0 });
    let (pb, gb) = (bin(pred), bin(gt));
    let pcc = connected_components_3d(&pb, conn)?;
    let gcc = connected_components_3d(&gb, conn)?;
    let det = lesion_detection(&pcc, &gcc, cfg.overlap_frac)?;
    let dist = match surface_distance(&pb, &gb, gt.spacing()) {
        Ok(d) => Some(d),
        Err(Error::UndefinedDistance) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        subject: subject.to_string(),
        soft_dice: v.soft_dice,
        hard_dice: v.hard_dice,
        jaccard: v.jaccard,
        ppv: v.ppv,
        voxel_f1: v.hard_dice,
        lesion_f1: det.f1,
        lesion_recall: det.recall,
        lesion_ppv: det.precision,
        assd_mm: dist.map(|d| d.0),
        hausdorff_mm: dist.map(|d| d.1),
        n_gt_lesions: det.n_gt,
        n_pred_lesions: det.n_pred,
    })
}

/// A report row with every numeric field as a float, used for the mean row.
#[derive(Clone, Debug, PartialEq, Serialize)]
struct Row {
    subject: String,
    soft_dice: f64,
    hard_dice: f64,
    jaccard: f64,
    ppv: f64,
    voxel_f1: f64,
    lesion_f1: f64,
    lesion_recall: f64,
    lesion_ppv: f64,
    assd_mm: Option<f64>,
    hausdorff_mm: Option<f64>,
    n_gt_lesions: f64,
    n_pred_lesions: f64,
}

impl From<&MetricsReport> for Row {
    fn from(r: &MetricsReport) -> Self {
        Row {
            subject: r.subject.clone(),
            soft_dice: r.soft_dice,
            hard_dice: r.hard_dice,
            jaccard: r.jaccard,
            ppv: r.ppv,
            voxel_f1: r.voxel_f1,
            lesion_f1: r.lesion_f1,
            lesion_recall: r.lesion_recall,
            lesion_ppv: r.lesion_ppv,
            assd_mm: r.assd_mm,
            hausdorff_mm: r.hausdorff_mm,
            n_gt_lesions: r.n_gt_lesions as f64,
            n_pred_lesions: r.n_pred_lesions as f64,
        }
    }
}

fn mean_row(reports: &[MetricsReport]) -> Row {
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let avg_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let vals: Vec<f64> = reports.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Row {
        subject: "mean".into(),
        soft_dice: avg(&|r| r.soft_dice),
        hard_dice: avg(&|r| r.hard_dice),
        jaccard: avg(&|r| r.jaccard),
        ppv: avg(&|r| r.ppv),
        voxel_f1: avg(&|r| r.voxel_f1),
        lesion_f1: avg(&|r| r.lesion_f1),
        lesion_recall: avg(&|r| r.lesion_recall),
        lesion_ppv: avg(&|r| r.lesion_ppv),
        assd_mm: avg_opt(&|r| r.assd_mm),
        hausdorff_mm: avg_opt(&|r| r.hausdorff_mm),
        n_gt_lesions: avg(&|r| r.n_gt_lesions as f64),
        n_pred_lesions: avg(&|r| r.n_pred_lesions as f64),
    }
}

fn rows(reports: &[MetricsReport]) -> Vec<Row> {
    let mut rows: Vec<Row> = reports.iter().map(Row::from).collect();
    if !reports.is_empty() {
        rows.push(mean_row(reports));
    }
    rows
}

/// One line per subject plus a final `mean` line; missing distances are
/// empty cells.
pub fn reports_to_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows(reports) {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// One JSON object per line, subjects first and the `mean` record last;
/// missing distances are `null`.
pub fn reports_to_jsonl(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in rows(reports) {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&r).expect("row serializes")
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_reports(
    csv_path: impl AsRef<Path>,
    jsonl_path: impl AsRef<Path>,
    reports: &[MetricsReport],
) -> Result<()> {
    crate::volume_io::write_file(csv_path.as_ref(), reports_to_csv(reports)?.as_bytes())?;
    crate::volume_io::write_file(jsonl_path.as_ref(), reports_to_jsonl(reports).as_bytes())
}
