//! Segmentation backends.
//!
//! An external backend is any command line containing `{input}` and
//! `{output_dir}`. The placeholders are replaced literally and the result
//! is run through `sh -c` with the caller's environment. The command must
//! leave either `segmentation.nii.gz` (one multilabel volume) or one
//! binary `<class_name>.nii.gz` per class in the output directory.
//!
//! The mock backend labels voxels by fixed intensity bands, which is all
//! a CT-trained model amounts to on the synthetic phantoms.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{read_labels, read_volume, ClassMap, Grid, LabelReadOptions, LabelVolume, Volume3D};

pub const INPUT_PLACEHOLDER: &str = "{input}";
pub const OUTPUT_DIR_PLACEHOLDER: &str = "{output_dir}";
pub const MULTILABEL_FILE: &str = "segmentation.nii.gz";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    PerClassFiles,
    Multilabel,
}

/// Voxels with `lo <= x <= hi` get `class_name`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdRule {
    pub class_name: String,
    pub lo: f64,
    pub hi: f64,
}

impl ThresholdRule {
    pub fn new(class_name: impl Into<String>, lo: f64, hi: f64) -> Self {
        ThresholdRule {
            class_name: class_name.into(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    fn overlaps(&self, other: &ThresholdRule) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendKind {
    ExternalCommand {
        command_template: String,
        #[serde(default)]
        output_format: OutputFormat,
    },
    MockThreshold {
        rules: Vec<ThresholdRule>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Required for external commands. For the mock, ids default to rule
    /// order starting at 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_map_path: Option<PathBuf>,
}

fn default_timeout() -> f64 {
    3600.0
}

impl BackendSpec {
    pub fn mock(rules: Vec<ThresholdRule>) -> Self {
        BackendSpec {
            kind: BackendKind::MockThreshold { rules },
            timeout_secs: default_timeout(),
            class_map_path: None,
        }
    }

    pub fn external(template: impl Into<String>, format: OutputFormat, class_map: PathBuf) -> Self {
        BackendSpec {
            kind: BackendKind::ExternalCommand {
                command_template: template.into(),
                output_format: format,
            },
            timeout_secs: default_timeout(),
            class_map_path: Some(class_map),
        }
    }

    /// Loads a JSON spec; a relative `class_map_path` is taken relative to
    /// the spec file's directory.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: BackendSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("backend config {}: {e}", path.display())))?;
        spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(spec)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.class_map_path {
            if p.is_relative() {
                self.class_map_path = Some(base.join(p));
            }
        }
    }

    pub fn class_map(&self) -> Result<ClassMap> {
        match (&self.class_map_path, &self.kind) {
            (Some(path), _) => ClassMap::from_json_file(path),
            (None, BackendKind::MockThreshold { rules }) => {
                ClassMap::from_names(rules.iter().map(|r| r.class_name.clone()))
            }
            (None, BackendKind::ExternalCommand { .. }) => Err(Error::Config(
                "external-command backend needs class_map_path".into(),
            )),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.0))
    }

    /// Errors out with every diagnostic joined, if any.
    pub fn validate(&self) -> Result<()> {
        let diags = validate_backend(self);
        if diags.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(
                diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Dry-run checks. An empty list means the spec is usable.
pub fn validate_backend(spec: &BackendSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |m: String| out.push(Diagnostic { message: m });

    if !(spec.timeout_secs > 0.0 && spec.timeout_secs.is_finite()) {
        diag(format!("timeout must be positive, got {}", spec.timeout_secs));
    }
    match &spec.kind {
        BackendKind::ExternalCommand { command_template, .. } => {
            for ph in [INPUT_PLACEHOLDER, OUTPUT_DIR_PLACEHOLDER] {
                let n = command_template.matches(ph).count();
                if n != 1 {
                    diag(format!("command template must contain {ph} exactly once, found {n}"));
                }
            }
        }
        BackendKind::MockThreshold { rules } => {
            if rules.is_empty() {
                diag("mock backend has no threshold rules".into());
            }
            for r in rules {
                if r.lo.is_nan() || r.hi.is_nan() || r.lo >= r.hi {
                    diag(format!("rule {}: lo {} must be below hi {}", r.class_name, r.lo, r.hi));
                }
            }
            for (i, a) in rules.iter().enumerate() {
                for b in &rules[i + 1..] {
                    if a.overlaps(b) {
                        diag(format!(
                            "rules {} [{}, {}] and {} [{}, {}] overlap",
                            a.class_name, a.lo, a.hi, b.class_name, b.lo, b.hi
                        ));
                    }
                }
            }
        }
    }
    match spec.class_map() {
        Ok(map) => {
            if let BackendKind::MockThreshold { rules } = &spec.kind {
                for r in rules {
                    if map.id(&r.class_name).is_none() {
                        diag(format!("rule class {} is not in the class map", r.class_name));
                    }
                }
            }
        }
        Err(e) => diag(format!("class map: {e}")),
    }
    out
}

pub fn substitute(template: &str, input: &Path, output_dir: &Path) -> String {
    template
        .replace(INPUT_PLACEHOLDER, &input.to_string_lossy())
        .replace(OUTPUT_DIR_PLACEHOLDER, &output_dir.to_string_lossy())
}

/// Where one backend invocation may write.
#[derive(Debug, Clone)]
pub struct Invocation {
    /// Private directory handed to the external command.
    pub output_dir: PathBuf,
    /// Captured stdout/stderr.
    pub log_path: PathBuf,
}

pub fn run_backend(spec: &BackendSpec, input: &Path, inv: &Invocation) -> Result<LabelVolume> {
    spec.validate()?;
    let class_map = spec.class_map()?;
    let volume = read_volume(input)?;
    match &spec.kind {
        BackendKind::MockThreshold { rules } => {
            let mut log = File::create(&inv.log_path).map_err(|e| Error::io(&inv.log_path, e))?;
            writeln!(log, "mock-threshold backend, {} rules, input {}", rules.len(), input.display())
                .map_err(|e| Error::io(&inv.log_path, e))?;
            apply_rules(&volume, rules, &class_map)
        }
        BackendKind::ExternalCommand {
            command_template,
            output_format,
        } => {
            std::fs::create_dir_all(&inv.output_dir).map_err(|e| Error::io(&inv.output_dir, e))?;
            let cmdline = substitute(command_template, input, &inv.output_dir);
            run_command(&cmdline, spec.timeout(), &inv.log_path)?;
            match output_format {
                OutputFormat::Multilabel => {
                    load_multilabel(&inv.output_dir.join(MULTILABEL_FILE), &class_map, volume.grid())
                }
                OutputFormat::PerClassFiles => {
                    merge_per_class(&inv.output_dir, &class_map, volume.grid())
                }
            }
        }
    }
}

/// Runs `sh -c cmdline` in its own process group, killing the group on
/// timeout.
pub fn run_command(cmdline: &str, timeout: Duration, log_path: &Path) -> Result<()> {
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(log_path)
        .map_err(|e| Error::io(log_path, e))?;
    writeln!(log, "$ {cmdline}").map_err(|e| Error::io(log_path, e))?;
    let stdout = log.try_clone().map_err(|e| Error::io(log_path, e))?;
    let stderr = log.try_clone().map_err(|e| Error::io(log_path, e))?;

    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmdline)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .process_group(0)
        .spawn()
        .map_err(|e| Error::io("sh", e))?;

    let status = child
        .wait_timeout(timeout)
        .map_err(|e| Error::io(log_path, e))?;
    match status {
        Some(status) if status.success() => Ok(()),
        Some(status) => {
            let _ = writeln!(log, "[exit status: {status}]");
            Err(Error::BackendExit {
                code: status.code(),
                log: log_path.to_path_buf(),
            })
        }
        None => {
            // SAFETY: plain syscall on a process group we created.
            unsafe {
                libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
            }
            let _ = child.wait();
            let _ = writeln!(log, "[killed after {}s timeout]", timeout.as_secs_f64());
            Err(Error::BackendTimeout {
                seconds: timeout.as_secs_f64(),
                log: log_path.to_path_buf(),
            })
        }
    }
}

/// Voxel-wise band lookup. Pure: same inputs, same labels.
pub fn apply_rules(v: &Volume3D, rules: &[ThresholdRule], class_map: &ClassMap) -> Result<LabelVolume> {
    let ids = rules
        .iter()
        .map(|r| {
            class_map.id(&r.class_name).ok_or_else(|| {
                Error::Config(format!("rule class {} is not in the class map", r.class_name))
            })
        })
        .collect::<Result<Vec<u32>>>()?;
    let labels = v
        .data()
        .iter()
        .map(|&x| {
            rules
                .iter()
                .position(|r| r.contains(x))
                .map_or(0, |i| ids[i])
        })
        .collect();
    LabelVolume::new(v.grid().clone(), labels, class_map.clone())
}

fn load_multilabel(path: &Path, class_map: &ClassMap, grid: &Grid) -> Result<LabelVolume> {
    if !path.exists() {
        return Err(Error::BackendOutput(format!("missing {}", path.display())));
    }
    let labels = read_labels(path, class_map, LabelReadOptions::default())?;
    labels.grid().check_same_dims(grid).map_err(|_| {
        Error::BackendOutput(format!(
            "{} has dims {:?}, input has {:?}",
            path.display(),
            labels.dims(),
            grid.dims
        ))
    })?;
    LabelVolume::new(grid.clone(), labels.labels().to_vec(), class_map.clone())
}

/// Finds `<name>.nii.gz` (or `.nii`) for a class in `dir`.
pub fn class_file(dir: &Path, class_name: &str) -> Option<PathBuf> {
    [format!("{class_name}.nii.gz"), format!("{class_name}.nii")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
}

/// Merges binary per-class masks (voxel value ≥ 0.5 is inside). Where
/// masks overlap the lowest class id wins. Classes without a file are
/// treated as empty; no file at all is an error.
pub fn merge_per_class(dir: &Path, class_map: &ClassMap, grid: &Grid) -> Result<LabelVolume> {
    let mut labels = vec![0u32; grid.len()];
    let mut found = 0usize;
    let mut overlapping = 0u64;
    for (id, name) in class_map.iter() {
        let Some(path) = class_file(dir, name) else {
            log::warn!("{}: no mask for class {name}; treated as empty", dir.display());
            continue;
        };
        let img = nifti::read_image(&path)?;
        if img.dims != grid.dims {
            return Err(Error::BackendOutput(format!(
                "{} has dims {:?}, input has {:?}",
                path.display(),
                img.dims,
                grid.dims
            )));
        }
        found += 1;
        for (slot, &v) in labels.iter_mut().zip(&img.values) {
            if v >= 0.5 {
                if *slot == 0 {
                    *slot = id;
                } else {
                    overlapping += 1;
                }
            }
        }
    }
    if found == 0 {
        return Err(Error::BackendOutput(format!(
            "no per-class masks found in {}",
            dir.display()
        )));
    }
    if overlapping > 0 {
        log::warn!(
            "{}: {overlapping} voxels claimed by more than one class; lowest class id kept",
            dir.display()
        );
    }
    LabelVolume::new(grid.clone(), labels, class_map.clone())
}

/// Checks a backend output directory against the expected layout without
/// building a label volume. An empty list means the output is usable.
///
/// Per-class files must be named after known classes, match `dims` and
/// hold only 0/1 values. A multilabel file must match `dims` and hold only
/// labels from the class map.
pub fn check_output_schema(
    dir: &Path,
    format: OutputFormat,
    class_map: &ClassMap,
    dims: [usize; 3],
) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |m: String| out.push(Diagnostic { message: m });
    match format {
        OutputFormat::Multilabel => {
            let path = dir.join(MULTILABEL_FILE);
            if !path.is_file() {
                diag(format!("missing {}", path.display()));
            } else {
                match read_labels(&path, class_map, LabelReadOptions::default()) {
                    Ok(l) if l.dims() != dims => {
                        diag(format!("{} has dims {:?}, expected {dims:?}", path.display(), l.dims()))
                    }
                    Ok(_) => {}
                    Err(e) => diag(e.to_string()),
                }
            }
        }
        OutputFormat::PerClassFiles => {
            let entries = match std::fs::read_dir(dir) {
                Ok(e) => e,
                Err(e) => {
                    diag(format!("{}: {e}", dir.display()));
                    return out;
                }
            };
            let mut names: Vec<String> = entries
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().into_string().ok())
                .filter(|n| n.ends_with(".nii") || n.ends_with(".nii.gz"))
                .collect();
            names.sort();
            if names.is_empty() {
                diag(format!("no per-class masks in {}", dir.display()));
            }
            for file in names {
                let class = file.trim_end_matches(".gz").trim_end_matches(".nii");
                if class_map.id(class).is_none() {
                    diag(format!("{file}: {class} is not in the class map"));
                    continue;
                }
                match nifti::read_image(&dir.join(&file)) {
                    Ok(img) if img.dims != dims => {
                        diag(format!("{file} has dims {:?}, expected {dims:?}", img.dims))
                    }
                    Ok(img) => {
                        if let Some(v) = img.values.iter().find(|&&v| v != 0.0 && v != 1.0) {
                            diag(format!("{file} is not binary (value {v})"));
                        }
                    }
                    Err(e) => diag(e.to_string()),
                }
            }
        }
    }
    out
}
