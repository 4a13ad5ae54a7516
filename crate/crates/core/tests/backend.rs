use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mrinv::backend::{
    check_output_schema, run_backend, validate_backend, BackendSpec, Invocation, OutputFormat,
    ThresholdRule,
};
use mrinv::evaluation::dice;
use mrinv::volume::{write_labels, write_volume};
use mrinv::{ClassMap, Error, Grid, LabelVolume, Volume3D};

const DIMS: [usize; 3] = [8, 6, 4];

fn grid() -> Grid {
    Grid::new(DIMS, [1.0; 3]).unwrap()
}

fn write_input(dir: &Path) -> PathBuf {
    let data = (0..grid().len()).map(|i| (i % 50) as f64 * 40.0).collect();
    let path = dir.join("input.nii.gz");
    write_volume(&Volume3D::new(grid(), data).unwrap(), &path).unwrap();
    path
}

fn class_map_file(dir: &Path, names: &[&str]) -> PathBuf {
    let path = dir.join("classes.json");
    ClassMap::from_names(names.iter().copied()).unwrap().write_json(&path).unwrap();
    path
}

/// Binary mask file for voxels whose flat index satisfies `inside`.
fn write_mask(path: &Path, inside: impl Fn(usize) -> bool) -> u64 {
    let data: Vec<f64> = (0..grid().len()).map(|i| if inside(i) { 1.0 } else { 0.0 }).collect();
    let count = data.iter().filter(|&&v| v == 1.0).count() as u64;
    write_volume(&Volume3D::new(grid(), data).unwrap(), path).unwrap();
    count
}

fn invocation(dir: &Path) -> Invocation {
    Invocation {
        output_dir: dir.join("out"),
        log_path: dir.join("backend.log"),
    }
}

fn sh_quote(p: &Path) -> String {
    format!("'{}'", p.display())
}

#[test]
fn nonzero_exit_is_reported_with_code() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(dir.path());
    let spec = BackendSpec::external(
        "false {input} {output_dir}",
        OutputFormat::PerClassFiles,
        class_map_file(dir.path(), &["liver"]),
    );
    match run_backend(&spec, &input, &invocation(dir.path())) {
        Err(Error::BackendExit { code, log }) => {
            assert_eq!(code, Some(1));
            assert!(log.exists());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn timeout_kills_the_process_group() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(dir.path());
    let marker = dir.path().join("survived");
    // The grandchild would create the marker if it outlived the kill.
    let template = format!(
        "(sleep 2; touch {}) & sleep 30; echo {{input}} {{output_dir}}",
        sh_quote(&marker)
    );
    let mut spec =
        BackendSpec::external(template, OutputFormat::PerClassFiles, class_map_file(dir.path(), &["liver"]));
    spec.timeout_secs = 0.5;
    let start = Instant::now();
    let err = run_backend(&spec, &input, &invocation(dir.path())).unwrap_err();
    assert!(matches!(err, Error::BackendTimeout { .. }), "{err:?}");
    assert!(start.elapsed() < Duration::from_secs(5));
    std::thread::sleep(Duration::from_millis(2500));
    assert!(!marker.exists(), "background child was not killed");
}

#[test]
fn per_class_files_are_merged_and_input_is_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(dir.path());
    let before = std::fs::read(&input).unwrap();
    let staged = dir.path().join("staged");
    std::fs::create_dir(&staged).unwrap();
    let n_liver = write_mask(&staged.join("liver.nii.gz"), |i| i < 40);
    let n_spleen = write_mask(&staged.join("spleen.nii.gz"), |i| (100..130).contains(&i));
    let template = format!("cp {}/*.nii.gz {{output_dir}}/ && echo segmented {{input}} --fast", sh_quote(&staged));
    let spec = BackendSpec::external(
        template,
        OutputFormat::PerClassFiles,
        class_map_file(dir.path(), &["liver", "spleen", "aorta"]),
    );
    let inv = invocation(dir.path());
    let labels = run_backend(&spec, &input, &inv).unwrap();
    assert_eq!(labels.count(1), n_liver);
    assert_eq!(labels.count(2), n_spleen);
    // No aorta file: treated as empty, not an error.
    assert_eq!(labels.count(3), 0);
    assert_eq!(std::fs::read(&input).unwrap(), before);
    let log = std::fs::read_to_string(&inv.log_path).unwrap();
    assert!(log.contains("--fast"), "{log}");
    assert!(log.contains("segmented"), "{log}");
}

#[test]
fn overlapping_masks_keep_the_lowest_class_id() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(dir.path());
    let staged = dir.path().join("staged");
    std::fs::create_dir(&staged).unwrap();
    write_mask(&staged.join("liver.nii.gz"), |i| i < 20);
    write_mask(&staged.join("spleen.nii.gz"), |i| (10..30).contains(&i));
    let template = format!("cp {}/*.nii.gz {{output_dir}}/ # {{input}}", sh_quote(&staged));
    let spec = BackendSpec::external(
        template,
        OutputFormat::PerClassFiles,
        class_map_file(dir.path(), &["liver", "spleen"]),
    );
    let labels = run_backend(&spec, &input, &invocation(dir.path())).unwrap();
    assert_eq!(labels.labels()[15], 1);
    assert_eq!(labels.count(1), 20);
    assert_eq!(labels.count(2), 10);
}

#[test]
fn no_output_at_all_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(dir.path());
    let spec = BackendSpec::external(
        "true {input} {output_dir}",
        OutputFormat::PerClassFiles,
        class_map_file(dir.path(), &["liver"]),
    );
    assert!(matches!(
        run_backend(&spec, &input, &invocation(dir.path())),
        Err(Error::BackendOutput(_))
    ));
}

#[test]
fn multilabel_output_is_read_through_the_class_map() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(dir.path());
    let map_path = class_map_file(dir.path(), &["liver", "spleen"]);
    let map = ClassMap::from_json_file(&map_path).unwrap();
    let labels: Vec<u32> = (0..grid().len() as u32).map(|i| i % 3).collect();
    let expected = LabelVolume::new(grid(), labels, map.clone()).unwrap();
    let staged = dir.path().join("seg.nii.gz");
    write_labels(&expected, &staged).unwrap();
    let template = format!("cp {} {{output_dir}}/segmentation.nii.gz # {{input}}", sh_quote(&staged));
    let spec = BackendSpec::external(template, OutputFormat::Multilabel, map_path);
    let got = run_backend(&spec, &input, &invocation(dir.path())).unwrap();
    assert_eq!(got.labels(), expected.labels());
}

#[test]
fn paths_with_spaces_survive_substitution() {
    let dir = tempfile::tempdir().unwrap();
    let spaced = dir.path().join("with space");
    std::fs::create_dir(&spaced).unwrap();
    let input = write_input(&spaced);
    let staged = spaced.join("staged");
    std::fs::create_dir(&staged).unwrap();
    write_mask(&staged.join("liver.nii.gz"), |i| i < 5);
    let template = format!("test -f \"{{input}}\" && cp {}/liver.nii.gz \"{{output_dir}}/\"", sh_quote(&staged));
    let spec = BackendSpec::external(template, OutputFormat::PerClassFiles, class_map_file(&spaced, &["liver"]));
    let labels = run_backend(&spec, &input, &invocation(&spaced)).unwrap();
    assert_eq!(labels.count(1), 5);
}

#[test]
fn mock_threshold_recovers_a_bright_ellipsoid() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::new([20, 20, 20], [1.0; 3]).unwrap();
    let mut data = vec![0.0; g.len()];
    let mut truth = vec![0u32; g.len()];
    for k in 0..20 {
        for j in 0..20 {
            for i in 0..20 {
                let (x, y, z) = ((i as f64 - 9.5) / 6.0, (j as f64 - 9.5) / 4.0, (k as f64 - 9.5) / 5.0);
                if x * x + y * y + z * z <= 1.0 {
                    data[g.index(i, j, k)] = 1000.0;
                    truth[g.index(i, j, k)] = 1;
                }
            }
        }
    }
    let input = dir.path().join("ellipsoid.nii.gz");
    write_volume(&Volume3D::new(g.clone(), data).unwrap(), &input).unwrap();
    let spec = BackendSpec::mock(vec![ThresholdRule::new("bone", 700.0, 3000.0)]);
    let pred = run_backend(&spec, &input, &invocation(dir.path())).unwrap();
    let gt = LabelVolume::new(g, truth, ClassMap::from_names(["bone"]).unwrap()).unwrap();
    assert!(gt.count(1) > 100);
    assert_eq!(dice(&pred, &gt, 1).unwrap().dsc(), 1.0);
}

#[test]
fn validation_reports_each_problem() {
    let dir = tempfile::tempdir().unwrap();
    let bad_template =
        BackendSpec::external("run {input}", OutputFormat::PerClassFiles, class_map_file(dir.path(), &["a"]));
    let diags = validate_backend(&bad_template);
    assert_eq!(diags.len(), 1, "{diags:?}");
    assert!(diags[0].message.contains("{output_dir}"));

    let overlapping = BackendSpec::mock(vec![
        ThresholdRule::new("a", 0.0, 100.0),
        ThresholdRule::new("b", 100.0, 200.0),
    ]);
    assert_eq!(validate_backend(&overlapping).len(), 1);

    let mut no_timeout = BackendSpec::mock(vec![ThresholdRule::new("a", 0.0, 100.0)]);
    no_timeout.timeout_secs = 0.0;
    assert_eq!(validate_backend(&no_timeout).len(), 1);

    let missing_map = BackendSpec::external(
        "x {input} {output_dir}",
        OutputFormat::Multilabel,
        dir.path().join("nope.json"),
    );
    assert_eq!(validate_backend(&missing_map).len(), 1);
}

#[test]
fn spec_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
        "kind": "external-command",
        "command_template": "seg -i {input} -o {output_dir} --fast",
        "output_format": "multilabel",
        "timeout_secs": 120,
        "class_map_path": "classes.json"
    }"#;
    let path = dir.path().join("backend.json");
    std::fs::write(&path, text).unwrap();
    let spec = BackendSpec::from_json_file(&path).unwrap();
    assert_eq!(spec.class_map_path.as_deref(), Some(dir.path().join("classes.json").as_path()));
    assert_eq!(spec.timeout(), Duration::from_secs(120));
    let again: BackendSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(again, spec);
}

#[test]
fn schema_checker_accepts_good_and_flags_bad_output() {
    let dir = tempfile::tempdir().unwrap();
    let map = ClassMap::from_names(["liver", "spleen"]).unwrap();
    let good = dir.path().join("good");
    std::fs::create_dir(&good).unwrap();
    write_mask(&good.join("liver.nii.gz"), |i| i < 10);
    assert!(check_output_schema(&good, OutputFormat::PerClassFiles, &map, DIMS).is_empty());
    assert_eq!(check_output_schema(&good, OutputFormat::PerClassFiles, &map, [2, 2, 2]).len(), 1);
    // Multilabel file absent.
    assert_eq!(check_output_schema(&good, OutputFormat::Multilabel, &map, DIMS).len(), 1);

    let bad = dir.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    write_mask(&bad.join("pancreas.nii.gz"), |i| i < 10);
    let data = (0..grid().len()).map(|i| (i % 3) as f64).collect();
    write_volume(&Volume3D::new(grid(), data).unwrap(), &bad.join("spleen.nii")).unwrap();
    let diags = check_output_schema(&bad, OutputFormat::PerClassFiles, &map, DIMS);
    assert_eq!(diags.len(), 2, "{diags:?}");

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(check_output_schema(&empty, OutputFormat::PerClassFiles, &map, DIMS).len(), 1);

    let labels: Vec<u32> = (0..grid().len() as u32).map(|i| i % 3).collect();
    write_labels(&LabelVolume::new(grid(), labels, map.clone()).unwrap(), &empty.join("segmentation.nii.gz"))
        .unwrap();
    assert!(check_output_schema(&empty, OutputFormat::Multilabel, &map, DIMS).is_empty());
}
