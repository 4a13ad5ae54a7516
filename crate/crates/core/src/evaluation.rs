//! Dice similarity, per-class aggregation and 95% confidence intervals.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::volume::{percentile_of, LabelVolume};

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 42;

/// Stand-in evaluation classes: twenty abdominal TotalSegmentator labels.
/// The exact set used for any given ground truth must come from config;
/// this list only fills the gap when none is supplied.
pub const DEFAULT_ABDOMINAL_CLASSES: [&str; 20] = [
    "spleen",
    "kidney_right",
    "kidney_left",
    "gallbladder",
    "liver",
    "stomach",
    "pancreas",
    "adrenal_gland_right",
    "adrenal_gland_left",
    "aorta",
    "inferior_vena_cava",
    "portal_vein_and_splenic_vein",
    "small_bowel",
    "duodenum",
    "colon",
    "urinary_bladder",
    "autochthon_left",
    "autochthon_right",
    "iliopsoas_left",
    "iliopsoas_right",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceStatus {
    Ok,
    BothEmpty,
    OneEmpty,
    /// Segmentation produced but no ground truth to compare against.
    NoGt,
    /// Preprocessing or the backend failed for this case.
    Failed,
}

impl DiceStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DiceStatus::Ok => "ok",
            DiceStatus::BothEmpty => "both-empty",
            DiceStatus::OneEmpty => "one-empty",
            DiceStatus::NoGt => "no-gt",
            DiceStatus::Failed => "failed",
        }
    }
}

impl fmt::Display for DiceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Voxel counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiceCounts {
    pub gt: u64,
    pub pred: u64,
    pub overlap: u64,
}

impl DiceCounts {
    pub fn status(&self) -> DiceStatus {
        match (self.gt, self.pred) {
            (0, 0) => DiceStatus::BothEmpty,
            (0, _) | (_, 0) => DiceStatus::OneEmpty,
            _ => DiceStatus::Ok,
        }
    }

    pub fn dsc(&self) -> f64 {
        match self.status() {
            DiceStatus::BothEmpty => 1.0,
            DiceStatus::OneEmpty => 0.0,
            _ => 2.0 * self.overlap as f64 / (self.gt + self.pred) as f64,
        }
    }

    pub fn into_result(self, case_id: &str, class_name: &str) -> DiceResult {
        DiceResult {
            case_id: case_id.to_string(),
            class_name: class_name.to_string(),
            dsc: Some(self.dsc()),
            status: self.status(),
            gt_voxels: self.gt,
            pred_voxels: self.pred,
            overlap_voxels: self.overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    pub case_id: String,
    pub class_name: String,
    /// Absent for `no-gt` and `failed`.
    pub dsc: Option<f64>,
    pub status: DiceStatus,
    pub gt_voxels: u64,
    pub pred_voxels: u64,
    pub overlap_voxels: u64,
}

/// Dice for one label id, shared by both volumes.
pub fn dice(pred: &LabelVolume, gt: &LabelVolume, label: u32) -> Result<DiceCounts> {
    pred.grid().check_same_dims(gt.grid())?;
    let mut c = DiceCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let in_p = p == label;
        let in_g = g == label;
        c.pred += in_p as u64;
        c.gt += in_g as u64;
        c.overlap += (in_p && in_g) as u64;
    }
    Ok(c)
}

/// Dice for every class in `classes`, matched by name through each
/// volume's own class map. One pass over the voxels.
pub fn dice_all(
    pred: &LabelVolume,
    gt: &LabelVolume,
    case_id: &str,
    classes: &[String],
) -> Result<Vec<DiceResult>> {
    pred.grid().check_same_dims(gt.grid())?;
    let pred_lut = class_lut(pred, classes);
    let gt_lut = class_lut(gt, classes);
    let mut counts = vec![DiceCounts::default(); classes.len()];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let pi = pred_lut[p as usize];
        let gi = gt_lut[g as usize];
        if pi != NO_CLASS {
            counts[pi].pred += 1;
        }
        if gi != NO_CLASS {
            counts[gi].gt += 1;
            if pi == gi {
                counts[gi].overlap += 1;
            }
        }
    }
    Ok(classes
        .iter()
        .zip(counts)
        .map(|(name, c)| c.into_result(case_id, name))
        .collect())
}

const NO_CLASS: usize = usize::MAX;

/// label id → index into `classes`.
fn class_lut(v: &LabelVolume, classes: &[String]) -> Vec<usize> {
    let mut lut = vec![NO_CLASS; v.class_map().max_id() as usize + 1];
    for (idx, name) in classes.iter().enumerate() {
        if let Some(id) = v.class_map().id(name) {
            lut[id as usize] = idx;
        }
    }
    lut
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyPolicy {
    /// Both-empty results are left out of class means.
    #[default]
    Exclude,
    /// Both-empty results count as a perfect 1.0.
    IncludeAsOne,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassMean {
    Mean { mean: f64, n: usize },
    Absent,
}

impl ClassMean {
    pub fn value(&self) -> Option<f64> {
        match self {
            ClassMean::Mean { mean, .. } => Some(*mean),
            ClassMean::Absent => None,
        }
    }
}

fn includable(r: &DiceResult, policy: EmptyPolicy) -> Option<f64> {
    match r.status {
        DiceStatus::Ok | DiceStatus::OneEmpty => r.dsc,
        DiceStatus::BothEmpty => match policy {
            EmptyPolicy::Exclude => None,
            EmptyPolicy::IncludeAsOne => Some(1.0),
        },
        DiceStatus::NoGt | DiceStatus::Failed => None,
    }
}

/// Mean DSC over cases for one class, in the order given.
pub fn per_class_mean(results: &[DiceResult], class_name: &str, policy: EmptyPolicy) -> ClassMean {
    let values: Vec<f64> = results
        .iter()
        .filter(|r| r.class_name == class_name)
        .filter_map(|r| includable(r, policy))
        .collect();
    if values.is_empty() {
        ClassMean::Absent
    } else {
        ClassMean::Mean {
            mean: mean(&values),
            n: values.len(),
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    #[default]
    BootstrapPercentile,
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
    pub method: CiMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn confidence_interval_95(values: &[f64], method: CiMethod, seed: u64) -> Result<SummaryStats> {
    match method {
        CiMethod::BootstrapPercentile => bootstrap_ci(values, BOOTSTRAP_RESAMPLES, seed, 95.0),
        CiMethod::StudentT => student_t_ci(values, 95.0),
    }
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Evaluation("confidence interval of an empty sample".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite value in sample".into()));
    }
    Ok(())
}

/// Percentile bootstrap of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64, level: f64) -> Result<SummaryStats> {
    check_values(values)?;
    if resamples == 0 {
        return Err(Error::Evaluation("bootstrap needs at least one resample".into()));
    }
    let n = values.len();
    let m = mean(values);
    let (lo, hi) = if n == 1 {
        (m, m)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means: Vec<f64> = (0..resamples)
            .map(|_| {
                let sum: f64 = (0..n).map(|_| values[rng.random_range(0..n)]).sum();
                sum / n as f64
            })
            .collect();
        let tail = (100.0 - level) / 2.0;
        (
            percentile_of(&means, tail)?,
            percentile_of(&means, 100.0 - tail)?,
        )
    };
    Ok(SummaryStats {
        mean: m,
        // Resampled sums can differ from the sample sum in the last ulp.
        ci_lo: lo.min(m),
        ci_hi: hi.max(m),
        n,
        method: CiMethod::BootstrapPercentile,
        seed: Some(seed),
    })
}

/// `mean ± t(1 - α/2, n - 1) · s / √n`.
pub fn student_t_ci(values: &[f64], level: f64) -> Result<SummaryStats> {
    check_values(values)?;
    let n = values.len();
    let m = mean(values);
    let half = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::Evaluation(e.to_string()))?
            .inverse_cdf(1.0 - (100.0 - level) / 200.0);
        t * var.sqrt() / (n as f64).sqrt()
    };
    Ok(SummaryStats {
        mean: m,
        ci_lo: m - half,
        ci_hi: m + half,
        n,
        method: CiMethod::StudentT,
        seed: None,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    /// Mean per class over cases, then mean/CI over the class means.
    #[default]
    ByClass,
    /// Mean/CI over every includable case×class value.
    Pooled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummaryOptions {
    pub empty_policy: EmptyPolicy,
    pub aggregate: Aggregate,
    pub ci_method: CiMethod,
    pub seed: Option<u64>,
}

impl SummaryOptions {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_name: String,
    pub mean: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub stats: SummaryStats,
    pub per_class: Vec<ClassSummary>,
    pub absent: Vec<String>,
}

/// Per-class means followed by mean and 95% CI across classes (or across
/// pooled values). Results are sorted by case id, then class name, before
/// any reduction so the outcome does not depend on input order.
pub fn summarize_variant(
    results: &[DiceResult],
    classes: &[String],
    opts: &SummaryOptions,
) -> Result<VariantSummary> {
    if classes.is_empty() {
        return Err(Error::Evaluation("class list is empty".into()));
    }
    let mut sorted: Vec<&DiceResult> = results.iter().collect();
    sorted.sort_by(|a, b| {
        (a.case_id.as_str(), a.class_name.as_str()).cmp(&(b.case_id.as_str(), b.class_name.as_str()))
    });
    let sorted: Vec<DiceResult> = sorted.into_iter().cloned().collect();

    let mut per_class = Vec::with_capacity(classes.len());
    let mut absent = Vec::new();
    let mut class_means = Vec::new();
    for class in classes {
        match per_class_mean(&sorted, class, opts.empty_policy) {
            ClassMean::Mean { mean, n } => {
                class_means.push(mean);
                per_class.push(ClassSummary {
                    class_name: class.clone(),
                    mean: Some(mean),
                    n,
                });
            }
            ClassMean::Absent => {
                log::warn!("class {class} has no includable results; dropped from aggregate");
                absent.push(class.clone());
                per_class.push(ClassSummary {
                    class_name: class.clone(),
                    mean: None,
                    n: 0,
                });
            }
        }
    }
    let values = match opts.aggregate {
        Aggregate::ByClass => class_means,
        Aggregate::Pooled => sorted
            .iter()
            .filter(|r| classes.contains(&r.class_name) && !absent.contains(&r.class_name))
            .filter_map(|r| includable(r, opts.empty_policy))
            .collect(),
    };
    if values.is_empty() {
        return Err(Error::Evaluation("every class is absent".into()));
    }
    let stats = confidence_interval_95(&values, opts.ci_method, opts.seed())?;
    Ok(VariantSummary {
        stats,
        per_class,
        absent,
    })
}
