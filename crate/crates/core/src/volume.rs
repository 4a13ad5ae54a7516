//! Voxel volumes and the file gateway for images and label masks.
//!
//! Voxels are stored in NIfTI order: the linear index of `(i, j, k)` is
//! `i + ni * (j + nj * k)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{self, Datatype};

pub type Affine = [[f64; 4]; 4];

pub fn diagonal_affine(spacing: [f64; 3]) -> Affine {
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// On-disk storage type and scaling a volume was read with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceDtype {
    pub datatype: Datatype,
    pub scl_slope: f64,
    pub scl_inter: f64,
}

impl Default for SourceDtype {
    fn default() -> Self {
        SourceDtype {
            datatype: Datatype::Float32,
            scl_slope: 1.0,
            scl_inter: 0.0,
        }
    }
}

/// Voxel geometry shared by intensity and label volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let g = Grid {
            dims,
            spacing,
            affine: diagonal_affine(spacing),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_affine(mut self, affine: Affine) -> Self {
        self.affine = affine;
        self
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidVolume(format!(
                "dimensions must be positive, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn check_same_dims(&self, other: &Grid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch {
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }
}

/// Scalar 3D intensity volume. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f64>,
    source: SourceDtype,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        Self::with_source(grid, data, SourceDtype::default())
    }

    pub fn with_source(grid: Grid, data: Vec<f64>, source: SourceDtype) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "{} intensities for dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "non-finite intensity {} at voxel {pos}",
                data[pos]
            )));
        }
        Ok(Volume3D { grid, data, source })
    }

    /// New volume on the same grid. Caller guarantees length and finiteness.
    pub(crate) fn derive(&self, data: Vec<f64>) -> Volume3D {
        debug_assert_eq!(data.len(), self.data.len());
        Volume3D {
            grid: self.grid.clone(),
            data,
            source: self.source,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.grid.affine
    }

    pub fn source_dtype(&self) -> SourceDtype {
        self.source
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    /// `(min, max)` over all voxels.
    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Label id → class name. Id 0 is background and never appears here.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ClassMapRepr", into = "BTreeMap<String, String>")]
pub struct ClassMap(BTreeMap<u32, String>);

#[derive(Deserialize)]
#[serde(untagged)]
enum ClassMapRepr {
    /// `{"1": "liver", "2": "spleen"}`
    Map(BTreeMap<String, String>),
    /// `["liver", "spleen"]`, ids assigned from 1
    List(Vec<String>),
}

impl TryFrom<ClassMapRepr> for ClassMap {
    type Error = String;

    fn try_from(repr: ClassMapRepr) -> std::result::Result<Self, String> {
        let pairs: Vec<(u32, String)> = match repr {
            ClassMapRepr::Map(m) => m
                .into_iter()
                .map(|(k, v)| {
                    k.trim()
                        .parse::<u32>()
                        .map(|id| (id, v))
                        .map_err(|_| format!("class id {k:?} is not a non-negative integer"))
                })
                .collect::<std::result::Result<_, _>>()?,
            ClassMapRepr::List(names) => names
                .into_iter()
                .enumerate()
                .map(|(i, n)| (i as u32 + 1, n))
                .collect(),
        };
        ClassMap::from_pairs(pairs).map_err(|e| e.to_string())
    }
}

impl From<ClassMap> for BTreeMap<String, String> {
    fn from(m: ClassMap) -> Self {
        m.0.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

impl ClassMap {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, name) in pairs {
            if id == 0 {
                return Err(Error::InvalidLabels(format!(
                    "label 0 is reserved for background, got class {name:?}"
                )));
            }
            if name.is_empty() {
                return Err(Error::InvalidLabels(format!("empty class name for label {id}")));
            }
            if map.values().any(|n| n == &name) {
                return Err(Error::InvalidLabels(format!("duplicate class name {name:?}")));
            }
            if map.insert(id, name).is_some() {
                return Err(Error::InvalidLabels(format!("duplicate label id {id}")));
            }
        }
        Ok(ClassMap(map))
    }

    /// Ids 1.. in the given order.
    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::from_pairs(
            names
                .into_iter()
                .enumerate()
                .map(|(i, n)| (i as u32 + 1, n.into())),
        )
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("class map {}: {e}", path.display())))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.0.get(&id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.0.iter().find(|(_, n)| n.as_str() == name).map(|(id, _)| *id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.0.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.0.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn names(&self) -> Vec<String> {
        self.0.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_id(&self) -> u32 {
        self.0.keys().next_back().copied().unwrap_or(0)
    }
}

/// Integer-labelled voxel grid with its class mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    labels: Vec<u32>,
    class_map: ClassMap,
}

impl LabelVolume {
    pub fn new(grid: Grid, labels: Vec<u32>, class_map: ClassMap) -> Result<Self> {
        grid.validate()?;
        if labels.len() != grid.len() {
            return Err(Error::InvalidLabels(format!(
                "{} labels for dims {:?}",
                labels.len(),
                grid.dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != 0 && !class_map.contains(l)) {
            return Err(Error::InvalidLabels(format!(
                "label {bad} is not in the class map"
            )));
        }
        Ok(LabelVolume {
            grid,
            labels,
            class_map,
        })
    }

    pub fn background(grid: Grid, class_map: ClassMap) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![0; n], class_map)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.class_map
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: u32) -> u64 {
        self.labels.iter().filter(|&&l| l == label).count() as u64
    }
}

/// Reads an intensity volume, applying `scl_slope`/`scl_inter`.
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let img = nifti::read_image(path)?;
    let grid = Grid {
        dims: img.dims,
        spacing: img.header.spacing(),
        affine: img.header.affine(),
    };
    let (slope, inter) = if img.header.has_scaling() {
        (img.header.scl_slope as f64, img.header.scl_inter as f64)
    } else {
        (1.0, 0.0)
    };
    if let Some(pos) = img.values.iter().position(|v| v.is_nan()) {
        return Err(Error::nifti(path, format!("NaN intensity at voxel {pos}")));
    }
    let source = SourceDtype {
        datatype: img.datatype,
        scl_slope: slope,
        scl_inter: inter,
    };
    Volume3D::with_source(grid, img.values, source).map_err(|e| match e {
        Error::InvalidVolume(reason) => Error::nifti(path, reason),
        other => other,
    })
}

/// Writes float32, slope 1, intercept 0, affine in the sform.
pub fn write_volume(v: &Volume3D, path: &Path) -> Result<()> {
    let header = nifti::header_for(v.dims(), v.spacing(), v.affine(), Datatype::Float32);
    let mut payload = Vec::with_capacity(v.len() * 4);
    for &x in v.data() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    nifti::write_image(path, &header, &payload)
}

/// Maximum distance from the nearest integer accepted for float-typed masks.
pub const LABEL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default)]
pub struct LabelReadOptions {
    /// Keep labels missing from the class map, naming them `label_<id>`.
    pub allow_unknown_labels: bool,
}

pub fn read_labels(path: &Path, class_map: &ClassMap, opts: LabelReadOptions) -> Result<LabelVolume> {
    let img = nifti::read_image(path)?;
    let grid = Grid {
        dims: img.dims,
        spacing: img.header.spacing(),
        affine: img.header.affine(),
    };
    grid.validate()
        .map_err(|e| Error::nifti(path, e.to_string()))?;
    let labels = labels_from_values(&img.values)
        .map_err(|reason| Error::InvalidLabels(format!("{}: {reason}", path.display())))?;
    let mut class_map = class_map.clone();
    let unknown: std::collections::BTreeSet<u32> = labels
        .iter()
        .copied()
        .filter(|&l| l != 0 && !class_map.contains(l))
        .collect();
    if !unknown.is_empty() {
        if !opts.allow_unknown_labels {
            return Err(Error::InvalidLabels(format!(
                "{}: labels {:?} are not in the class map",
                path.display(),
                unknown
            )));
        }
        let mut pairs: Vec<(u32, String)> =
            class_map.iter().map(|(id, n)| (id, n.to_string())).collect();
        pairs.extend(unknown.into_iter().map(|id| (id, format!("label_{id}"))));
        class_map = ClassMap::from_pairs(pairs)?;
    }
    LabelVolume::new(grid, labels, class_map)
}

fn labels_from_values(values: &[f64]) -> std::result::Result<Vec<u32>, String> {
    values
        .iter()
        .enumerate()
        .map(|(pos, &v)| {
            let r = v.round();
            if !v.is_finite() || (v - r).abs() > LABEL_TOLERANCE {
                Err(format!("voxel {pos} has non-integral label value {v}"))
            } else if r < 0.0 || r > u32::MAX as f64 {
                Err(format!("voxel {pos} has out-of-range label {r}"))
            } else {
                Ok(r as u32)
            }
        })
        .collect()
}

/// Writes labels with the narrowest unsigned/int type that holds them.
pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    let max = labels.labels().iter().copied().max().unwrap_or(0);
    let datatype = if max <= u8::MAX as u32 {
        Datatype::Uint8
    } else if max <= u16::MAX as u32 {
        Datatype::Uint16
    } else if max <= i32::MAX as u32 {
        Datatype::Int32
    } else {
        return Err(Error::InvalidLabels(format!("label {max} does not fit int32")));
    };
    let g = labels.grid();
    let header = nifti::header_for(g.dims, g.spacing, &g.affine, datatype);
    let mut payload = Vec::with_capacity(labels.len() * datatype.size());
    for &l in labels.labels() {
        match datatype {
            Datatype::Uint8 => payload.push(l as u8),
            Datatype::Uint16 => payload.extend_from_slice(&(l as u16).to_le_bytes()),
            _ => payload.extend_from_slice(&(l as i32).to_le_bytes()),
        }
    }
    nifti::write_image(path, &header, &payload)
}

/// Linear-interpolation percentile over all voxels of `v`.
pub fn percentile(v: &Volume3D, p: f64) -> Result<f64> {
    percentile_of(v.data(), p)
}

/// Linear interpolation between closest ranks: with sorted values
/// `y[0..n]` and `h = (n - 1) * p / 100`, returns
/// `y[⌊h⌋] + (h - ⌊h⌋) * (y[⌊h⌋ + 1] - y[⌊h⌋])`.
///
/// Runs in O(n) via selection on a scratch copy.
pub fn percentile_of(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidVolume("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidSpec(format!("percentile {p} outside [0, 100]")));
    }
    let n = values.len();
    let h = (n - 1) as f64 * p / 100.0;
    let lo = (h.floor() as usize).min(n - 1);
    let frac = h - lo as f64;

    let mut scratch = values.to_vec();
    let (_, y_lo, upper) = scratch.select_nth_unstable_by(lo, f64::total_cmp);
    let y_lo = *y_lo;
    if frac == 0.0 || upper.is_empty() {
        return Ok(y_lo);
    }
    let y_hi = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((y_lo + frac * (y_hi - y_lo)).clamp(y_lo, y_hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: &[f64]) -> Volume3D {
        Volume3D::new(Grid::new([values.len(), 1, 1], [1.0; 3]).unwrap(), values.to_vec()).unwrap()
    }

    #[test]
    fn percentile_constant_volume() {
        assert_eq!(percentile(&vol(&[10.0; 4]), 1.0).unwrap(), 10.0);
    }

    #[test]
    fn percentile_midpoint() {
        assert_eq!(percentile(&vol(&[100.0, 0.0]), 50.0).unwrap(), 50.0);
    }

    #[test]
    fn percentile_thousand_values() {
        // numpy.percentile(np.arange(1000), 1.0, method="linear") == 9.99
        let values: Vec<f64> = (0..1000).rev().map(f64::from).collect();
        let p = percentile(&vol(&values), 1.0).unwrap();
        assert!((p - 9.99).abs() < 1e-12, "{p}");
    }

    #[test]
    fn percentile_endpoints() {
        let v = vol(&[3.0, -1.0, 7.5, 2.0]);
        assert_eq!(percentile(&v, 0.0).unwrap(), -1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 7.5);
    }

    #[test]
    fn percentile_rejects_bad_p() {
        assert!(percentile_of(&[1.0], 101.0).is_err());
        assert!(percentile_of(&[1.0], -0.5).is_err());
        assert!(percentile_of(&[1.0], f64::NAN).is_err());
        assert!(percentile_of(&[], 5.0).is_err());
    }

    #[test]
    fn volume_invariants() {
        let g = Grid::new([2, 2, 2], [1.0; 3]).unwrap();
        assert!(Volume3D::new(g.clone(), vec![0.0; 7]).is_err());
        assert!(Volume3D::new(g.clone(), vec![f64::NAN; 8]).is_err());
        assert!(Volume3D::new(g, vec![0.0; 8]).is_ok());
        assert!(Grid::new([2, 0, 2], [1.0; 3]).is_err());
        assert!(Grid::new([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn index_is_i_fastest() {
        let g = Grid::new([3, 4, 5], [1.0; 3]).unwrap();
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
    }

    #[test]
    fn class_map_json_forms() {
        let a: ClassMap = serde_json::from_str(r#"{"1": "liver", "3": "spleen"}"#).unwrap();
        assert_eq!(a.name(3), Some("spleen"));
        assert_eq!(a.id("liver"), Some(1));
        let b: ClassMap = serde_json::from_str(r#"["liver", "spleen"]"#).unwrap();
        assert_eq!(b.id("spleen"), Some(2));
        assert!(serde_json::from_str::<ClassMap>(r#"{"0": "bg"}"#).is_err());
        assert!(serde_json::from_str::<ClassMap>(r#"["a", "a"]"#).is_err());
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ClassMap>(&text).unwrap(), a);
    }

    #[test]
    fn label_value_tolerance() {
        assert_eq!(labels_from_values(&[3.0000001, 0.0]).unwrap(), vec![3, 0]);
        assert!(labels_from_values(&[2.5]).is_err());
        assert!(labels_from_values(&[-1.0]).is_err());
    }

    #[test]
    fn label_volume_rejects_unmapped_labels() {
        let g = Grid::new([2, 1, 1], [1.0; 3]).unwrap();
        let cm = ClassMap::from_names(["liver"]).unwrap();
        assert!(LabelVolume::new(g.clone(), vec![0, 1], cm.clone()).is_ok());
        assert!(LabelVolume::new(g, vec![0, 2], cm).is_err());
    }
}
