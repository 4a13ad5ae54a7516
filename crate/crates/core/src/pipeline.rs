//! Batch experiment driver: every case in a manifest is preprocessed under
//! every configured variant, segmented, and scored against its ground
//! truth.
//!
//! Output layout under the run directory:
//!
//! ```text
//! <case_id>/<variant>/preprocessed.nii.gz   (unless intermediates are dropped)
//! <case_id>/<variant>/segmentation.nii.gz
//! <case_id>/<variant>/<case_id>.backend.log
//! <case_id>/<variant>/rows.csv              (unit done; read back on --resume)
//! <case_id>/<variant>/error.txt             (unit failed)
//! dice.csv                                  all per-case rows
//! report.json, summary.csv, report.md       aggregates
//! run_metadata.json                         timestamps, kept apart
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{run_backend, BackendSpec, Invocation};
use crate::error::{Error, Result};
use crate::evaluation::{
    dice_all, summarize_variant, DiceResult, DiceStatus, SummaryOptions, VariantSummary,
    DEFAULT_ABDOMINAL_CLASSES,
};
use crate::preprocess::{preprocess_case, Mode, PreprocessSpec};
use crate::report::{render_report, ReportFormat};
use crate::volume::{read_labels, read_volume, write_labels, write_volume, ClassMap, LabelReadOptions, LabelVolume};

pub const DICE_CSV: &str = "dice.csv";
pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const REPORT_MD: &str = "report.md";
pub const METADATA_JSON: &str = "run_metadata.json";
pub const UNIT_ROWS: &str = "rows.csv";
pub const UNIT_ERROR: &str = "error.txt";
pub const PREPROCESSED_FILE: &str = "preprocessed.nii.gz";
pub const SEGMENTATION_FILE: &str = "segmentation.nii.gz";
pub const BACKEND_OUT_DIR: &str = "backend_out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SequenceTag {
    T1,
    T2,
    #[serde(rename = "other")]
    Other,
}

impl SequenceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SequenceTag::T1 => "T1",
            SequenceTag::T2 => "T2",
            SequenceTag::Other => "other",
        }
    }
}

impl fmt::Display for SequenceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SequenceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "T1" | "t1" => Ok(SequenceTag::T1),
            "T2" | "t2" => Ok(SequenceTag::T2),
            "other" | "" => Ok(SequenceTag::Other),
            other => Err(Error::Config(format!("unknown sequence tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub case_id: String,
    pub image_path: PathBuf,
    #[serde(default)]
    pub gt_path: Option<PathBuf>,
    #[serde(default = "default_tag")]
    pub sequence_tag: SequenceTag,
}

fn default_tag() -> SequenceTag {
    SequenceTag::Other
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub cases: Vec<CaseEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestRepr {
    Wrapped { cases: Vec<CaseEntry> },
    List(Vec<CaseEntry>),
}

#[derive(Deserialize)]
struct CsvCase {
    case_id: String,
    image_path: String,
    #[serde(default)]
    gt_path: String,
    #[serde(default)]
    sequence_tag: String,
}

impl CaseManifest {
    /// Loads a JSON or CSV manifest (chosen by the `.csv` extension).
    /// Relative paths are resolved against the manifest's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_csv = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let mut manifest = if is_csv {
            Self::parse_csv(&text)
        } else {
            Self::parse_json(&text)
        }
        .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
        manifest.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(manifest)
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        let cases = match serde_json::from_str::<ManifestRepr>(text)? {
            ManifestRepr::Wrapped { cases } | ManifestRepr::List(cases) => cases,
        };
        Ok(CaseManifest { cases })
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        for required in ["case_id", "image_path"] {
            if !headers.iter().any(|h| h == required) {
                return Err(Error::Config(format!("CSV manifest lacks column {required}")));
            }
        }
        let mut cases = Vec::new();
        for row in rdr.deserialize::<CsvCase>() {
            let row = row?;
            cases.push(CaseEntry {
                case_id: row.case_id,
                image_path: row.image_path.into(),
                gt_path: (!row.gt_path.is_empty()).then(|| row.gt_path.into()),
                sequence_tag: row.sequence_tag.parse()?,
            });
        }
        Ok(CaseManifest { cases })
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for c in &mut self.cases {
            fix(&mut c.image_path);
            if let Some(g) = &mut c.gt_path {
                fix(g);
            }
        }
    }

    /// Unique, path-safe case ids; every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        if self.cases.is_empty() {
            return Err(Error::Config("manifest has no cases".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.cases {
            let id = c.case_id.as_str();
            if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
                return Err(Error::Config(format!("case id {id:?} is not a valid directory name")));
            }
            if !seen.insert(id) {
                return Err(Error::Config(format!("duplicate case id {id:?}")));
            }
            if !c.image_path.is_file() {
                return Err(Error::Config(format!(
                    "case {id}: image {} does not exist",
                    c.image_path.display()
                )));
            }
            if let Some(g) = &c.gt_path {
                if !g.is_file() {
                    return Err(Error::Config(format!(
                        "case {id}: ground truth {} does not exist",
                        g.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Clip and gate settings shared by all variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub bg_percentile: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        let d = PreprocessSpec::default();
        PreprocessParams {
            clip_lo: d.clip_lo,
            clip_hi: d.clip_hi,
            bg_percentile: d.bg_percentile,
        }
    }
}

impl PreprocessParams {
    pub fn spec(&self, mode: Mode) -> PreprocessSpec {
        PreprocessSpec {
            clip_lo: self.clip_lo,
            clip_hi: self.clip_hi,
            mode,
            bg_percentile: self.bg_percentile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variants: Vec<Mode>,
    #[serde(default)]
    pub preprocess: PreprocessParams,
    pub backend: BackendSpec,
    /// Evaluation classes in report order. Defaults to
    /// [`DEFAULT_ABDOMINAL_CLASSES`].
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    /// Class map for ground-truth masks; the backend's map when absent.
    #[serde(default)]
    pub gt_class_map_path: Option<PathBuf>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub empty_policy: crate::evaluation::EmptyPolicy,
    #[serde(default)]
    pub aggregate: crate::evaluation::Aggregate,
    #[serde(default)]
    pub ci_method: crate::evaluation::CiMethod,
    #[serde(default = "default_true")]
    pub keep_intermediates: bool,
    #[serde(default)]
    pub allow_unknown_labels: bool,
}

fn default_jobs() -> usize {
    1
}

fn default_seed() -> u64 {
    crate::evaluation::DEFAULT_SEED
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(variants: Vec<Mode>, backend: BackendSpec) -> Self {
        RunConfig {
            variants,
            preprocess: PreprocessParams::default(),
            backend,
            classes: None,
            gt_class_map_path: None,
            jobs: default_jobs(),
            seed: default_seed(),
            empty_policy: Default::default(),
            aggregate: Default::default(),
            ci_method: Default::default(),
            keep_intermediates: true,
            allow_unknown_labels: false,
        }
    }

    /// Relative paths inside the config are resolved against its directory.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("run config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.backend.resolve_paths(base);
        if let Some(p) = &cfg.gt_class_map_path {
            if p.is_relative() {
                cfg.gt_class_map_path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn class_list(&self) -> Vec<String> {
        match &self.classes {
            Some(c) => c.clone(),
            None => DEFAULT_ABDOMINAL_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn gt_class_map(&self) -> Result<ClassMap> {
        match &self.gt_class_map_path {
            Some(p) => ClassMap::from_json_file(p),
            None => self.backend.class_map(),
        }
    }

    pub fn summary_options(&self) -> SummaryOptions {
        SummaryOptions {
            empty_policy: self.empty_policy,
            aggregate: self.aggregate,
            ci_method: self.ci_method,
            seed: Some(self.seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.variants.iter().find(|v| !seen.insert(**v)) {
            return Err(Error::Config(format!("variant {dup} listed twice")));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        for mode in &self.variants {
            self.preprocess.spec(*mode).validate()?;
        }
        self.backend.validate()?;
        let classes = self.class_list();
        if classes.is_empty() {
            return Err(Error::Config("class list is empty".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = classes.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Config(format!("class {dup} listed twice")));
        }
        self.gt_class_map()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub output_dir: PathBuf,
    /// Overrides `RunConfig::jobs`.
    pub jobs: Option<usize>,
    pub resume: bool,
    /// Overrides `RunConfig::keep_intermediates`.
    pub keep_intermediates: Option<bool>,
}

/// One line of `dice.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub case_id: String,
    pub class_name: String,
    pub variant: String,
    pub dsc: Option<f64>,
    pub status: DiceStatus,
    pub gt_voxels: u64,
    pub pred_voxels: u64,
    pub overlap_voxels: u64,
}

impl DiceRow {
    pub fn new(r: DiceResult, variant: &str) -> Self {
        DiceRow {
            case_id: r.case_id,
            class_name: r.class_name,
            variant: variant.to_string(),
            dsc: r.dsc,
            status: r.status,
            gt_voxels: r.gt_voxels,
            pred_voxels: r.pred_voxels,
            overlap_voxels: r.overlap_voxels,
        }
    }

    pub fn to_result(&self) -> DiceResult {
        DiceResult {
            case_id: self.case_id.clone(),
            class_name: self.class_name.clone(),
            dsc: self.dsc,
            status: self.status,
            gt_voxels: self.gt_voxels,
            pred_voxels: self.pred_voxels,
            overlap_voxels: self.overlap_voxels,
        }
    }
}

/// CSV bytes for `rows`, header included even when empty.
pub fn rows_to_csv(rows: &[DiceRow]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        wtr.write_record([
            "case_id",
            "class_name",
            "variant",
            "dsc",
            "status",
            "gt_voxels",
            "pred_voxels",
            "overlap_voxels",
        ])?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.into_inner()
        .map_err(|e| Error::Csv(csv::Error::from(e.into_error())))
}

pub fn write_rows(path: &Path, rows: &[DiceRow]) -> Result<()> {
    write_atomic(path, &rows_to_csv(rows)?)
}

pub fn read_rows(path: &Path) -> Result<Vec<DiceRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub sequence_tag: SequenceTag,
    pub variant: Mode,
    /// `None` when nothing in this cell could be scored.
    pub summary: Option<VariantSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub case_id: String,
    pub variant: Mode,
    pub message: String,
    /// Relative to the run directory.
    pub log: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variants: Vec<Mode>,
    pub sequence_tags: Vec<SequenceTag>,
    pub classes: Vec<String>,
    pub summary_options: SummaryOptions,
    pub cells: Vec<ReportCell>,
    pub failures: Vec<FailureRecord>,
}

impl RunReport {
    pub fn cell(&self, tag: SequenceTag, variant: Mode) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.sequence_tag == tag && c.variant == variant)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub rows: Vec<DiceRow>,
    /// Units that were skipped because `--resume` found their rows.
    pub resumed_units: usize,
}

impl RunOutcome {
    pub fn has_failures(&self) -> bool {
        !self.report.failures.is_empty()
    }
}

struct Unit<'a> {
    case: &'a CaseEntry,
    variant: Mode,
    dir: PathBuf,
}

enum UnitResult {
    Done { rows: Vec<DiceRow>, resumed: bool },
    Failed(FailureRecord),
}

pub fn unit_dir(output_dir: &Path, case_id: &str, variant: Mode) -> PathBuf {
    output_dir.join(case_id).join(variant.as_str())
}

/// Runs the whole experiment. Configuration and manifest problems abort
/// before any work; a failing case×variant unit is recorded and the run
/// continues.
pub fn run(config: &RunConfig, manifest: &CaseManifest, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    manifest.validate()?;
    let classes = config.class_list();
    let gt_map = config.gt_class_map()?;
    let keep = opts.keep_intermediates.unwrap_or(config.keep_intermediates);
    let jobs = opts.jobs.unwrap_or(config.jobs);
    if jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    let out = &opts.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = unix_now();

    let units: Vec<Unit> = manifest
        .cases
        .iter()
        .flat_map(|case| {
            config.variants.iter().map(move |&variant| Unit {
                case,
                variant,
                dir: unit_dir(out, &case.case_id, variant),
            })
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ctx = UnitContext {
        config,
        classes: &classes,
        gt_map: &gt_map,
        keep,
        resume: opts.resume,
        output_dir: out,
    };
    let results: Vec<UnitResult> = pool.install(|| units.par_iter().map(|u| ctx.run_unit(u)).collect());

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut resumed_units = 0;
    for (unit, res) in units.iter().zip(results) {
        match res {
            UnitResult::Done { rows: r, resumed } => {
                resumed_units += resumed as usize;
                rows.extend(r);
            }
            UnitResult::Failed(f) => {
                log::error!("{} / {}: {}", f.case_id, f.variant, f.message);
                rows.extend(classes.iter().map(|c| DiceRow {
                    case_id: unit.case.case_id.clone(),
                    class_name: c.clone(),
                    variant: unit.variant.as_str().into(),
                    dsc: None,
                    status: DiceStatus::Failed,
                    gt_voxels: 0,
                    pred_voxels: 0,
                    overlap_voxels: 0,
                }));
                failures.push(f);
            }
        }
    }
    sort_rows(&mut rows, &config.variants);
    failures.sort_by(|a, b| (&a.case_id, a.variant).cmp(&(&b.case_id, b.variant)));

    let tags: Vec<SequenceTag> = {
        let mut t: Vec<SequenceTag> = manifest.cases.iter().map(|c| c.sequence_tag).collect();
        t.sort();
        t.dedup();
        t
    };
    let report = build_report(
        &rows,
        manifest,
        &config.variants,
        &tags,
        &classes,
        config.summary_options(),
        failures,
    );

    write_rows(&out.join(DICE_CSV), &rows)?;
    write_atomic(
        &out.join(REPORT_JSON),
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;
    if report.cells.iter().any(|c| c.summary.is_some()) {
        write_atomic(
            &out.join(SUMMARY_CSV),
            render_report(&report, ReportFormat::Csv)?.as_bytes(),
        )?;
        write_atomic(
            &out.join(REPORT_MD),
            render_report(&report, ReportFormat::Markdown)?.as_bytes(),
        )?;
    }
    let metadata = serde_json::json!({
        "started_unix": started,
        "finished_unix": unix_now(),
        "version": env!("CARGO_PKG_VERSION"),
        "units": units.len(),
        "resumed_units": resumed_units,
        "failed_units": report.failures.len(),
    });
    write_atomic(
        &out.join(METADATA_JSON),
        (serde_json::to_string_pretty(&metadata)? + "\n").as_bytes(),
    )?;

    Ok(RunOutcome {
        report,
        rows,
        resumed_units,
    })
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// case id, then variant in config order, then class name.
fn sort_rows(rows: &mut [DiceRow], variants: &[Mode]) {
    let vpos = |v: &str| variants.iter().position(|m| m.as_str() == v).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        (a.case_id.as_str(), vpos(&a.variant), a.class_name.as_str()).cmp(&(
            b.case_id.as_str(),
            vpos(&b.variant),
            b.class_name.as_str(),
        ))
    });
}

/// Aggregates rows into one cell per sequence tag × variant.
pub fn build_report(
    rows: &[DiceRow],
    manifest: &CaseManifest,
    variants: &[Mode],
    tags: &[SequenceTag],
    classes: &[String],
    summary_options: SummaryOptions,
    failures: Vec<FailureRecord>,
) -> RunReport {
    let tags_by_case: HashMap<&str, SequenceTag> = manifest
        .cases
        .iter()
        .map(|c| (c.case_id.as_str(), c.sequence_tag))
        .collect();
    let tag_of = |case_id: &str| tags_by_case.get(case_id).copied();
    let mut cells = Vec::new();
    for &tag in tags {
        for &variant in variants {
            let results: Vec<DiceResult> = rows
                .iter()
                .filter(|r| r.variant == variant.as_str() && tag_of(&r.case_id) == Some(tag))
                .map(DiceRow::to_result)
                .collect();
            let (summary, note) = match summarize_variant(&results, classes, &summary_options) {
                Ok(s) => (Some(s), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(ReportCell {
                sequence_tag: tag,
                variant,
                summary,
                note,
            });
        }
    }
    RunReport {
        variants: variants.to_vec(),
        sequence_tags: tags.to_vec(),
        classes: classes.to_vec(),
        summary_options,
        cells,
        failures,
    }
}

struct UnitContext<'a> {
    config: &'a RunConfig,
    classes: &'a [String],
    gt_map: &'a ClassMap,
    keep: bool,
    resume: bool,
    output_dir: &'a Path,
}

impl UnitContext<'_> {
    fn run_unit(&self, unit: &Unit) -> UnitResult {
        let rows_path = unit.dir.join(UNIT_ROWS);
        if self.resume && rows_path.is_file() {
            match read_rows(&rows_path) {
                Ok(rows) => return UnitResult::Done { rows, resumed: true },
                Err(e) => log::warn!("{}: unreadable ({e}); recomputing", rows_path.display()),
            }
        }
        let log_rel = Path::new(&unit.case.case_id)
            .join(unit.variant.as_str())
            .join(format!("{}.backend.log", unit.case.case_id));
        match self.process(unit) {
            Ok(rows) => {
                let _ = std::fs::remove_file(unit.dir.join(UNIT_ERROR));
                match write_rows(&rows_path, &rows) {
                    Ok(()) => UnitResult::Done { rows, resumed: false },
                    Err(e) => UnitResult::Failed(self.failure(unit, &e, &log_rel)),
                }
            }
            Err(e) => {
                let f = self.failure(unit, &e, &log_rel);
                let _ = std::fs::write(unit.dir.join(UNIT_ERROR), format!("{}\n", f.message));
                UnitResult::Failed(f)
            }
        }
    }

    fn failure(&self, unit: &Unit, e: &Error, log_rel: &Path) -> FailureRecord {
        // Messages may carry absolute paths; strip the run directory so
        // reports do not depend on where the run was written.
        let prefix = format!("{}/", self.output_dir.display());
        FailureRecord {
            case_id: unit.case.case_id.clone(),
            variant: unit.variant,
            message: e.to_string().replace(&prefix, ""),
            log: log_rel.to_string_lossy().into_owned(),
        }
    }

    fn process(&self, unit: &Unit) -> Result<Vec<DiceRow>> {
        let dir = &unit.dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let backend_out = dir.join(BACKEND_OUT_DIR);
        if backend_out.exists() {
            std::fs::remove_dir_all(&backend_out).map_err(|e| Error::io(&backend_out, e))?;
        }

        let image = read_volume(&unit.case.image_path)?;
        let processed = preprocess_case(&image, &self.config.preprocess.spec(unit.variant))?;
        let pre_path = dir.join(PREPROCESSED_FILE);
        write_volume(&processed, &pre_path)?;

        let inv = Invocation {
            output_dir: backend_out.clone(),
            log_path: dir.join(format!("{}.backend.log", unit.case.case_id)),
        };
        let pred = run_backend(&self.config.backend, &pre_path, &inv)?;
        write_labels(&pred, &dir.join(SEGMENTATION_FILE))?;

        if !self.keep {
            let _ = std::fs::remove_file(&pre_path);
            let _ = std::fs::remove_dir_all(&backend_out);
        }

        let variant = unit.variant.as_str();
        let case_id = unit.case.case_id.as_str();
        let rows = match &unit.case.gt_path {
            Some(gt_path) => {
                let gt = read_labels(
                    gt_path,
                    self.gt_map,
                    LabelReadOptions {
                        allow_unknown_labels: self.config.allow_unknown_labels,
                    },
                )?;
                dice_all(&pred, &gt, case_id, self.classes)?
                    .into_iter()
                    .map(|r| DiceRow::new(r, variant))
                    .collect()
            }
            None => no_gt_rows(&pred, case_id, variant, self.classes),
        };
        Ok(rows)
    }
}

fn no_gt_rows(pred: &LabelVolume, case_id: &str, variant: &str, classes: &[String]) -> Vec<DiceRow> {
    classes
        .iter()
        .map(|c| DiceRow {
            case_id: case_id.into(),
            class_name: c.clone(),
            variant: variant.into(),
            dsc: None,
            status: DiceStatus::NoGt,
            gt_voxels: 0,
            pred_voxels: pred.class_map().id(c).map_or(0, |id| pred.count(id)),
            overlap_voxels: 0,
        })
        .collect()
}
