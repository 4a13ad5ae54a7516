use std::path::Path;

use mrinv::evaluation::DiceStatus;
use mrinv::phantom::{self, PhantomSpec};
use mrinv::pipeline::{
    self, read_rows, CaseEntry, CaseManifest, RunConfig, RunOptions, SequenceTag,
};
use mrinv::{Error, Mode};

fn bundle(dir: &Path, size: usize) -> (RunConfig, CaseManifest) {
    phantom::write_bundle(dir, &PhantomSpec::default_with_size(size, 42)).unwrap();
    let config = RunConfig::from_json_file(&dir.join(phantom::RUN_CONFIG_FILE)).unwrap();
    let manifest = CaseManifest::from_path(&dir.join(phantom::MANIFEST_FILE)).unwrap();
    (config, manifest)
}

fn options(out: &Path) -> RunOptions {
    RunOptions {
        output_dir: out.to_path_buf(),
        jobs: None,
        resume: false,
        keep_intermediates: None,
    }
}

#[test]
fn single_case_invert_bg_beats_unprocessed() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, mut manifest) = bundle(dir.path(), 32);
    config.variants = vec![Mode::None, Mode::InvertBg];
    manifest.cases.retain(|c| c.sequence_tag == SequenceTag::T1);
    let outcome = pipeline::run(&config, &manifest, &options(&dir.path().join("run"))).unwrap();
    let mean = |m| {
        outcome
            .report
            .cell(SequenceTag::T1, m)
            .and_then(|c| c.summary.as_ref())
            .unwrap()
            .stats
            .mean
    };
    assert!(mean(Mode::InvertBg) > mean(Mode::None));
    assert!(!outcome.has_failures());
}

#[test]
fn empty_variant_list_aborts_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, manifest) = bundle(dir.path(), 16);
    config.variants.clear();
    let out = dir.path().join("run");
    assert!(matches!(pipeline::run(&config, &manifest, &options(&out)), Err(Error::Config(_))));
    assert!(!out.exists());
}

#[test]
fn missing_ground_truth_yields_no_gt_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, mut manifest) = bundle(dir.path(), 16);
    config.variants = vec![Mode::InvertBg];
    manifest.cases.truncate(1);
    manifest.cases[0].gt_path = None;
    let out = dir.path().join("run");
    let outcome = pipeline::run(&config, &manifest, &options(&out)).unwrap();
    assert!(outcome.rows.iter().all(|r| r.status == DiceStatus::NoGt && r.dsc.is_none()));
    assert!(outcome.rows.iter().any(|r| r.pred_voxels > 0));
    let unit = pipeline::unit_dir(&out, "phantom_t1", Mode::InvertBg);
    assert!(unit.join(pipeline::SEGMENTATION_FILE).is_file());
    assert!(unit.join(pipeline::PREPROCESSED_FILE).is_file());
}

#[test]
fn a_failing_case_does_not_touch_other_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (config, mut manifest) = bundle(dir.path(), 16);
    let out_ok = dir.path().join("ok");
    let clean = pipeline::run(&config, &manifest, &options(&out_ok)).unwrap();

    let broken = dir.path().join("broken.nii.gz");
    std::fs::write(&broken, b"not a nifti file").unwrap();
    manifest.cases.push(CaseEntry {
        case_id: "broken".into(),
        image_path: broken,
        gt_path: None,
        sequence_tag: SequenceTag::T2,
    });
    let out = dir.path().join("mixed");
    let outcome = pipeline::run(&config, &manifest, &options(&out)).unwrap();
    assert!(outcome.has_failures());
    assert_eq!(outcome.report.failures.len(), config.variants.len());
    let healthy: Vec<_> = outcome.rows.iter().filter(|r| r.case_id != "broken").cloned().collect();
    assert_eq!(healthy, clean.rows);
    assert!(outcome
        .rows
        .iter()
        .filter(|r| r.case_id == "broken")
        .all(|r| r.status == DiceStatus::Failed));
    assert!(pipeline::unit_dir(&out, "broken", Mode::None).join(pipeline::UNIT_ERROR).is_file());
    // The T2 row exists but has nothing to aggregate.
    let t2 = outcome.report.cell(SequenceTag::T2, Mode::None).unwrap();
    assert!(t2.summary.is_none() && t2.note.is_some());
    // Reports are still written for the healthy cells.
    assert!(out.join(pipeline::REPORT_MD).is_file());
}

#[test]
fn job_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (config, manifest) = bundle(dir.path(), 24);
    let mut read = Vec::new();
    for jobs in [1, 4] {
        let out = dir.path().join(format!("jobs{jobs}"));
        let opts = RunOptions {
            jobs: Some(jobs),
            ..options(&out)
        };
        pipeline::run(&config, &manifest, &opts).unwrap();
        read.push((
            std::fs::read(out.join(pipeline::DICE_CSV)).unwrap(),
            std::fs::read(out.join(pipeline::REPORT_JSON)).unwrap(),
        ));
    }
    assert_eq!(read[0], read[1]);
}

#[test]
fn intermediates_can_be_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, mut manifest) = bundle(dir.path(), 16);
    config.variants = vec![Mode::Invert];
    manifest.cases.truncate(1);
    let out = dir.path().join("run");
    let opts = RunOptions {
        keep_intermediates: Some(false),
        ..options(&out)
    };
    pipeline::run(&config, &manifest, &opts).unwrap();
    let unit = pipeline::unit_dir(&out, "phantom_t1", Mode::Invert);
    assert!(!unit.join(pipeline::PREPROCESSED_FILE).exists());
    assert!(unit.join(pipeline::SEGMENTATION_FILE).is_file());
    assert_eq!(read_rows(&unit.join(pipeline::UNIT_ROWS)).unwrap().len(), 5);
}

#[test]
fn csv_manifest_is_equivalent_to_json() {
    let dir = tempfile::tempdir().unwrap();
    let (_, json) = bundle(dir.path(), 16);
    let csv = dir.path().join("manifest.csv");
    std::fs::write(
        &csv,
        "case_id,image_path,gt_path,sequence_tag\nphantom_t1,t1.nii.gz,gt.nii.gz,T1\nphantom_ct,ct.nii.gz,gt.nii.gz,other\n",
    )
    .unwrap();
    assert_eq!(CaseManifest::from_path(&csv).unwrap(), json);
}
