//! Joint detection/localization metrics.
//!
//! Matching happens per 100 ms frame and per class: references and
//! predictions of one class are paired by a minimum-total-angle assignment.
//! A pair within 20° is a true positive; a pair beyond it counts as one false
//! negative and one false positive for ER/F but still feeds LE and LR.
//!
//! ER is micro-averaged over frames (`S = min(FN, FP)`, `D = FN - S`,
//! `I = FP - S`); F, LE and LR are macro-averaged over classes with at least
//! one reference. A class with references but no matched pair scores 180° LE.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{doa_vector, Annotation};

pub const DOA_THRESHOLD_DEG: f64 = 20.0;

/// Angle between two directions in degrees (inputs need not be unit length).
pub fn angular_distance(u: [f64; 3], v: [f64; 3]) -> Result<f64> {
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::ZeroVector);
    }
    let dot = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
    Ok(dot.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Minimum-cost assignment for an `n × m` cost matrix. Returns
/// `min(n, m)` pairs `(row, col)` sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let mut pairs: Vec<_> = hungarian(&t).into_iter().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    // potentials formulation, rows 1..=n, cols 1..=m, n <= m
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// One event instance in a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub class: usize,
    pub doa: [f64; 3],
}

/// Per-class counts for one or many frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub n_ref: u64,
    pub n_matched: u64,
    pub le_sum: f64,
}

impl ClassCounts {
    fn merge(&mut self, o: &ClassCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.n_ref += o.n_ref;
        self.n_matched += o.n_matched;
        self.le_sum += o.le_sum;
    }
}

/// Outcome of matching one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    pub per_class: Vec<ClassCounts>,
    /// `(class, ref index, pred index, angle)` of each assigned pair.
    pub pairs: Vec<(usize, usize, usize, f64)>,
    pub fn_total: u64,
    pub fp_total: u64,
    pub n_ref: u64,
}

pub fn match_frame(refs: &[Instance], preds: &[Instance], n_classes: usize) -> Result<FrameMatch> {
    let mut per_class = vec![ClassCounts::default(); n_classes];
    let mut pairs = Vec::new();
    for inst in refs.iter().chain(preds) {
        if inst.class >= n_classes {
            return Err(Error::UnknownClass(inst.class));
        }
    }
    for (c, cc) in per_class.iter_mut().enumerate() {
        let r: Vec<usize> = (0..refs.len()).filter(|&i| refs[i].class == c).collect();
        let p: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class == c).collect();
        cc.n_ref = r.len() as u64;
        if r.is_empty() && p.is_empty() {
            continue;
        }
        let cost = r
            .iter()
            .map(|&i| p.iter().map(|&j| angular_distance(refs[i].doa, preds[j].doa)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let assigned = hungarian(&cost);
        let mut tp = 0u64;
        for &(a, b) in &assigned {
            let d = cost[a][b];
            pairs.push((c, r[a], p[b], d));
            cc.le_sum += d;
            if d <= DOA_THRESHOLD_DEG {
                tp += 1;
            }
        }
        cc.n_matched = assigned.len() as u64;
        cc.tp = tp;
        cc.fn_ = r.len() as u64 - tp;
        cc.fp = p.len() as u64 - tp;
    }
    let fn_total = per_class.iter().map(|c| c.fn_).sum();
    let fp_total = per_class.iter().map(|c| c.fp).sum();
    Ok(FrameMatch {
        per_class,
        pairs,
        fn_total,
        fp_total,
        n_ref: refs.len() as u64,
    })
}

/// Mergeable sufficient statistics for a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accumulator {
    pub per_class: Vec<ClassCounts>,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub n_ref: u64,
}

impl Accumulator {
    pub fn new(n_classes: usize) -> Self {
        Accumulator {
            per_class: vec![ClassCounts::default(); n_classes],
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            n_ref: 0,
        }
    }

    pub fn add_frame(&mut self, m: &FrameMatch) {
        for (a, b) in self.per_class.iter_mut().zip(&m.per_class) {
            a.merge(b);
        }
        let s = m.fn_total.min(m.fp_total);
        self.substitutions += s;
        self.deletions += m.fn_total - s;
        self.insertions += m.fp_total - s;
        self.n_ref += m.n_ref;
    }

    pub fn push(&mut self, refs: &[Instance], preds: &[Instance]) -> Result<()> {
        let m = match_frame(refs, preds, self.per_class.len())?;
        self.add_frame(&m);
        Ok(())
    }

    /// Accumulate two label streams of one clip frame by frame.
    pub fn push_annotations(&mut self, refs: &Annotation, preds: &Annotation) -> Result<()> {
        let mut frames: BTreeMap<usize, (Vec<Instance>, Vec<Instance>)> = BTreeMap::new();
        for r in &refs.rows {
            frames.entry(r.frame).or_default().0.push(Instance {
                class: r.class,
                doa: doa_vector(r.azimuth, r.elevation),
            });
        }
        for r in &preds.rows {
            frames.entry(r.frame).or_default().1.push(Instance {
                class: r.class,
                doa: doa_vector(r.azimuth, r.elevation),
            });
        }
        for (rf, pf) in frames.values() {
            self.push(rf, pf)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Accumulator) -> Result<()> {
        if other.per_class.len() != self.per_class.len() {
            return Err(Error::Misaligned("accumulators with different class counts".into()));
        }
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.merge(b);
        }
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.n_ref += other.n_ref;
        Ok(())
    }

    pub fn finalize(&self) -> Result<MetricsReport> {
        if self.n_ref == 0 {
            return Err(Error::NoReferenceEvents);
        }
        let er = (self.substitutions + self.deletions + self.insertions) as f64 / self.n_ref as f64;
        let mut per_class = Vec::new();
        for (c, cc) in self.per_class.iter().enumerate() {
            if cc.n_ref == 0 {
                continue;
            }
            let denom = 2 * cc.tp + cc.fp + cc.fn_;
            per_class.push(ClassMetrics {
                class: c,
                f: if denom == 0 { 0.0 } else { 2.0 * cc.tp as f64 / denom as f64 },
                le: if cc.n_matched == 0 {
                    180.0
                } else {
                    cc.le_sum / cc.n_matched as f64
                },
                lr: cc.n_matched as f64 / cc.n_ref as f64,
            });
        }
        let k = per_class.len() as f64;
        let f = per_class.iter().map(|c| c.f).sum::<f64>() / k;
        let le = per_class.iter().map(|c| c.le).sum::<f64>() / k;
        let lr = per_class.iter().map(|c| c.lr).sum::<f64>() / k;
        Ok(MetricsReport {
            er20: er,
            f20: f,
            le_cd: le,
            lr_cd: lr,
            e_seld: e_seld(er, f, le, lr)?,
            per_class,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub f: f64,
    pub le: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub er20: f64,
    pub f20: f64,
    pub le_cd: f64,
    pub lr_cd: f64,
    pub e_seld: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Aggregate score: `(ER + (1 - F) + LE/180 + (1 - LR)) / 4`.
pub fn e_seld(er: f64, f: f64, le_deg: f64, lr: f64) -> Result<f64> {
    if !(0.0..=180.0).contains(&le_deg) {
        return Err(Error::OutOfRange(format!("localization error {le_deg}° outside [0, 180]")));
    }
    Ok((er + (1.0 - f) + le_deg / 180.0 + (1.0 - lr)) / 4.0)
}

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub room: String,
    pub er20: f64,
    pub f20: f64,
    pub le_cd: f64,
    pub lr_cd: f64,
    pub e_seld: f64,
}

impl MetricsRow {
    pub fn new(room: impl Into<String>, r: &MetricsReport) -> Self {
        MetricsRow {
            room: room.into(),
            er20: r.er20,
            f20: r.f20,
            le_cd: r.le_cd,
            lr_cd: r.lr_cd,
            e_seld: r.e_seld,
        }
    }
}

/// Per-room rows followed by an `Overall` row pooled over all rooms.
pub fn room_table(rooms: &[(String, Accumulator)]) -> Result<Vec<MetricsRow>> {
    let first = rooms.first().ok_or(Error::NoReferenceEvents)?;
    let mut pooled = Accumulator::new(first.1.per_class.len());
    let mut rows = Vec::with_capacity(rooms.len() + 1);
    for (room, acc) in rooms {
        rows.push(MetricsRow::new(room.clone(), &acc.finalize()?));
        pooled.merge(acc)?;
    }
    rows.push(MetricsRow::new("Overall", &pooled.finalize()?));
    Ok(rows)
}

pub fn write_metrics_csv(rows: &[MetricsRow], w: impl std::io::Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    wr.flush().map_err(|e| Error::Invalid(e.to_string()))
}

pub fn read_metrics_csv(r: impl std::io::Read, origin: &std::path::Path) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::format(origin, e.to_string()))
}
