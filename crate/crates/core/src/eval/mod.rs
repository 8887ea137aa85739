//! Segmentation and detection metrics pooled over a dataset split.

mod matching;

pub use matching::{match_detections, overlap, MatchMode, MatchPair, MATCHING_RULE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::DetectionSet;
use crate::volume::{LabelVolume, CLASS_NAMES, NUM_CLASSES};

/// Per-class IoU with the absent-in-both convention (IoU = 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub per_class: [f64; NUM_CLASSES],
    pub mean: f64,
}

impl SegScore {
    pub fn mean_foreground(&self) -> f64 {
        self.per_class[1..].iter().sum::<f64>() / (NUM_CLASSES - 1) as f64
    }
}

/// Intersection and union voxel counts per class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegCounts {
    pub intersection: [u64; NUM_CLASSES],
    pub union: [u64; NUM_CLASSES],
}

impl SegCounts {
    pub fn add(&mut self, pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
        if pred.dims != gt.dims {
            return Err(Error::Shape(format!(
                "prediction dims {:?} vs ground truth {:?}",
                pred.dims, gt.dims
            )));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if p == g {
                self.intersection[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn score(&self) -> SegScore {
        let mut per_class = [0.0; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            per_class[c] = if self.union[c] == 0 {
                1.0
            } else {
                self.intersection[c] as f64 / self.union[c] as f64
            };
        }
        SegScore {
            per_class,
            mean: per_class.iter().sum::<f64>() / NUM_CLASSES as f64,
        }
    }
}

pub fn iou(pred: &LabelVolume, gt: &LabelVolume) -> Result<SegScore> {
    let mut counts = SegCounts::default();
    counts.add(pred, gt)?;
    Ok(counts.score())
}

/// Precision/recall in percent; `None` where the denominator is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub per_class: [(Option<f64>, Option<f64>); NUM_CLASSES],
    pub overall: (Option<f64>, Option<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdPfa {
    pub pd_per_class: [Option<f64>; NUM_CLASSES],
    pub pd: Option<f64>,
    pub pfa: f64,
}

fn pct(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// How the false-alarm probability is normalised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfaMode {
    /// Unmatched detections over all detections.
    PerDetection,
    /// Bags with at least one unmatched detection over all bags.
    PerBag,
}

/// Object-level counts accumulated over bags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetCounts {
    pub tp: [u64; NUM_CLASSES],
    pub det: [u64; NUM_CLASSES],
    pub gt: [u64; NUM_CLASSES],
    /// Ground-truth objects hit by any detection, per class.
    pub detected: [u64; NUM_CLASSES],
    pub false_alarms: u64,
    pub detections: u64,
    pub bags: u64,
    pub bags_with_false_alarm: u64,
}

impl Default for DetCounts {
    fn default() -> Self {
        DetCounts {
            tp: [0; NUM_CLASSES],
            det: [0; NUM_CLASSES],
            gt: [0; NUM_CLASSES],
            detected: [0; NUM_CLASSES],
            false_alarms: 0,
            detections: 0,
            bags: 0,
            bags_with_false_alarm: 0,
        }
    }
}

impl DetCounts {
    /// Scores one bag with both the class-required and class-agnostic
    /// matchings.
    pub fn add(&mut self, dets: &DetectionSet, gts: &DetectionSet) -> Result<()> {
        let strict = match_detections(dets, gts, MatchMode::ClassRequired)?;
        let loose = match_detections(dets, gts, MatchMode::ClassAgnostic)?;
        self.add_matches(dets, gts, &strict, &loose);
        Ok(())
    }

    pub fn add_matches(
        &mut self,
        dets: &DetectionSet,
        gts: &DetectionSet,
        strict: &[MatchPair],
        loose: &[MatchPair],
    ) {
        for d in &dets.detections {
            self.det[d.class as usize] += 1;
        }
        for g in &gts.detections {
            self.gt[g.class as usize] += 1;
        }
        for m in strict {
            self.tp[gts.detections[m.gt].class as usize] += 1;
        }
        for m in loose {
            self.detected[gts.detections[m.gt].class as usize] += 1;
        }
        let fa = (dets.detections.len() - loose.len()) as u64;
        self.false_alarms += fa;
        self.detections += dets.detections.len() as u64;
        self.bags += 1;
        if fa > 0 {
            self.bags_with_false_alarm += 1;
        }
    }

    pub fn precision_recall(&self) -> PrecisionRecall {
        let mut per_class = [(None, None); NUM_CLASSES];
        for c in 1..NUM_CLASSES {
            per_class[c] = (pct(self.tp[c], self.det[c]), pct(self.tp[c], self.gt[c]));
        }
        let tp: u64 = self.tp.iter().sum();
        PrecisionRecall {
            per_class,
            overall: (
                pct(tp, self.det.iter().sum()),
                pct(tp, self.gt.iter().sum()),
            ),
        }
    }

    pub fn pd_pfa(&self, mode: PfaMode) -> PdPfa {
        let mut pd_per_class = [None; NUM_CLASSES];
        for c in 1..NUM_CLASSES {
            pd_per_class[c] = pct(self.detected[c], self.gt[c]);
        }
        let pfa = match mode {
            PfaMode::PerDetection => pct(self.false_alarms, self.detections),
            PfaMode::PerBag => pct(self.bags_with_false_alarm, self.bags),
        }
        .unwrap_or(0.0);
        PdPfa {
            pd_per_class,
            pd: pct(self.detected.iter().sum(), self.gt.iter().sum()),
            pfa,
        }
    }
}

pub fn precision_recall(
    matches: &[MatchPair],
    dets: &DetectionSet,
    gts: &DetectionSet,
) -> PrecisionRecall {
    let mut counts = DetCounts::default();
    counts.add_matches(dets, gts, matches, &[]);
    counts.precision_recall()
}

pub fn pd_pfa(matches: &[MatchPair], dets: &DetectionSet, gts: &DetectionSet) -> PdPfa {
    let mut counts = DetCounts::default();
    counts.add_matches(dets, gts, &[], matches);
    counts.pd_pfa(PfaMode::PerDetection)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub iou: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub pd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub pd: Option<f64>,
    pub pfa: f64,
}

/// Score report; IoU values are fractions, detection metrics percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_class: std::collections::BTreeMap<String, ClassRow>,
    pub mean_iou: f64,
    pub mean_foreground_iou: f64,
    pub overall: OverallRow,
    pub matching_rule: String,
    pub pfa_mode: PfaMode,
    pub volumes: u64,
}

pub fn build_report(seg: &SegCounts, det: &DetCounts, mode: PfaMode) -> ScoreReport {
    let s = seg.score();
    let pr = det.precision_recall();
    let pp = det.pd_pfa(mode);
    let per_class = (0..NUM_CLASSES)
        .map(|c| {
            (
                CLASS_NAMES[c].to_string(),
                ClassRow {
                    iou: s.per_class[c],
                    precision: pr.per_class[c].0,
                    recall: pr.per_class[c].1,
                    pd: pp.pd_per_class[c],
                },
            )
        })
        .collect();
    ScoreReport {
        per_class,
        mean_iou: s.mean,
        mean_foreground_iou: s.mean_foreground(),
        overall: OverallRow {
            precision: pr.overall.0,
            recall: pr.overall.1,
            pd: pp.pd,
            pfa: pp.pfa,
        },
        matching_rule: MATCHING_RULE.to_string(),
        pfa_mode: mode,
        volumes: det.bags,
    }
}

impl ScoreReport {
    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        let mut out = format!(
            "{:<12} {:>7} {:>9} {:>7} {:>7}\n",
            "class", "IoU%", "precision", "recall", "PD"
        );
        for name in CLASS_NAMES {
            let r = &self.per_class[name];
            out += &format!(
                "{:<12} {:>7.1} {:>9} {:>7} {:>7}\n",
                name,
                100.0 * r.iou,
                f(r.precision),
                f(r.recall),
                f(r.pd)
            );
        }
        out += &format!(
            "mean IoU {:.1}%  foreground {:.1}%  precision {}  recall {}  PD {}  PFA {:.1}\nmatching: {}\n",
            100.0 * self.mean_iou,
            100.0 * self.mean_foreground_iou,
            f(self.overall.precision),
            f(self.overall.recall),
            f(self.overall.pd),
            self.overall.pfa,
            self.matching_rule
        );
        out
    }
}
