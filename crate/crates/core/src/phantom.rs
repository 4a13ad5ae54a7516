//! Synthetic abdominal phantoms with exact ground truth.
//!
//! Each phantom is a set of non-overlapping ellipsoidal organs inside an
//! ellipsoidal body, surrounded by air. The same geometry is rendered
//! twice: once with CT-like intensities and once with T1-like ones whose
//! organ ordering is reversed (dense tissue bright in CT, dark in T1; fat
//! the other way round).
//!
//! Default intensity table (64³ grid, noise σ = 20):
//!
//! | region     | CT   | T1   |
//! |------------|------|------|
//! | air        | 0    | 30   |
//! | body (fat) | 150  | 2950 |
//! | liver      | 500  | 2500 |
//! | spleen     | 900  | 2100 |
//! | kidney_left| 1300 | 1700 |
//! | aorta      | 1700 | 1300 |
//! | vertebrae  | 2100 | 900  |
//!
//! T1 organ values are `3000 - CT`. The body sits close enough to 3000
//! that clipping pins the T1 maximum there, and air (noise-free) is the
//! T1 minimum, so inverting the clipped T1 volume maps every organ to its
//! CT value plus 30. [`default_ct_rules`] are the matching CT bands.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backend::{BackendSpec, ThresholdRule};
use crate::error::{Error, Result};
use crate::volume::{write_labels, write_volume, ClassMap, Grid, LabelVolume, Volume3D};

pub const INTENSITY_MIN: f64 = 0.0;
pub const INTENSITY_MAX: f64 = 3000.0;
pub const DEFAULT_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Voxel coordinates.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        let p = [i as f64, j as f64, k as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn fits(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| {
            self.radii[a] > 0.0
                && self.center[a] - self.radii[a] >= 0.0
                && self.center[a] + self.radii[a] <= (dims[a] - 1) as f64
        })
    }

    fn scaled(&self, f: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center.map(|c| (c + 0.5) * f - 0.5),
            radii: self.radii.map(|r| r * f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Organ {
    pub class_name: String,
    #[serde(flatten)]
    pub shape: Ellipsoid,
    pub ct_intensity: f64,
    pub t1_intensity: f64,
}

/// Unlabelled tissue enclosing the organs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Body {
    #[serde(flatten)]
    pub shape: Ellipsoid,
    pub ct_intensity: f64,
    pub t1_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    pub organs: Vec<Organ>,
    pub body: Option<Body>,
    /// Gaussian noise inside the body and organs.
    pub noise_sigma: f64,
    pub background_ct: f64,
    pub background_t1: f64,
    pub background_noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::default_with_size(DEFAULT_SIZE, 42)
    }
}

fn organ(name: &str, center: [f64; 3], radii: [f64; 3], ct: f64) -> Organ {
    Organ {
        class_name: name.into(),
        shape: Ellipsoid { center, radii },
        ct_intensity: ct,
        t1_intensity: INTENSITY_MAX - ct,
    }
}

impl PhantomSpec {
    /// The default five-organ layout, scaled to an `n`³ grid.
    pub fn default_with_size(n: usize, seed: u64) -> Self {
        let f = n as f64 / DEFAULT_SIZE as f64;
        let organs = vec![
            organ("liver", [20.0, 28.0, 32.0], [9.0, 8.0, 10.0], 500.0),
            organ("spleen", [44.0, 24.0, 30.0], [6.0, 5.0, 8.0], 900.0),
            organ("kidney_left", [46.0, 40.0, 32.0], [5.0, 4.0, 7.0], 1300.0),
            organ("aorta", [31.5, 38.0, 32.0], [3.0, 3.0, 14.0], 1700.0),
            organ("vertebrae", [31.5, 48.0, 32.0], [5.0, 4.0, 18.0], 2100.0),
        ]
        .into_iter()
        .map(|o| Organ {
            shape: o.shape.scaled(f),
            ..o
        })
        .collect();
        PhantomSpec {
            dims: [n; 3],
            spacing: [1.0; 3],
            seed,
            organs,
            body: Some(Body {
                shape: Ellipsoid {
                    center: [31.5, 31.5, 31.5],
                    radii: [29.0, 24.0, 29.0],
                }
                .scaled(f),
                ct_intensity: 150.0,
                t1_intensity: 2950.0,
            }),
            noise_sigma: 20.0,
            background_ct: 0.0,
            background_t1: 30.0,
            background_noise_sigma: 0.0,
        }
    }

    pub fn class_map(&self) -> Result<ClassMap> {
        ClassMap::from_names(self.organs.iter().map(|o| o.class_name.clone()))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.organs.iter().map(|o| o.class_name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::Phantom(format!("dims {:?} too small", self.dims)));
        }
        if self.organs.is_empty() {
            return Err(Error::Phantom("no organs".into()));
        }
        for s in [self.noise_sigma, self.background_noise_sigma] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Phantom(format!("noise sigma {s} must be >= 0")));
            }
        }
        let in_range = |x: f64| (INTENSITY_MIN..=INTENSITY_MAX).contains(&x);
        for o in &self.organs {
            if !o.shape.fits(self.dims) {
                return Err(Error::Phantom(format!("{} does not fit inside {:?}", o.class_name, self.dims)));
            }
            if !in_range(o.ct_intensity) {
                return Err(Error::Phantom(format!(
                    "{} CT intensity {} outside [0, 3000]",
                    o.class_name, o.ct_intensity
                )));
            }
            if !o.t1_intensity.is_finite() {
                return Err(Error::Phantom(format!("{} T1 intensity not finite", o.class_name)));
            }
        }
        if let Some(b) = &self.body {
            if !b.shape.fits(self.dims) {
                return Err(Error::Phantom(format!("body does not fit inside {:?}", self.dims)));
            }
            if !in_range(b.ct_intensity) {
                return Err(Error::Phantom(format!("body CT intensity {} outside [0, 3000]", b.ct_intensity)));
            }
        }
        if !in_range(self.background_ct) {
            return Err(Error::Phantom("background CT outside [0, 3000]".into()));
        }
        self.class_map()?;
        Grid::new(self.dims, self.spacing)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub ct: Volume3D,
    pub t1: Volume3D,
    pub gt: LabelVolume,
}

/// Renders the phantom. Same spec and seed give bit-identical volumes.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = Grid::new(spec.dims, spec.spacing)?;
    let n = grid.len();
    let class_map = spec.class_map()?;

    let noise = |sigma: f64| Normal::new(0.0, sigma).map_err(|e| Error::Phantom(e.to_string()));
    let organ_noise = noise(spec.noise_sigma)?;
    let bg_noise = noise(spec.background_noise_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut ct = Vec::with_capacity(n);
    let mut t1 = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let [ni, nj, nk] = spec.dims;
    for k in 0..nk {
        for j in 0..nj {
            for i in 0..ni {
                let mut hit: Option<usize> = None;
                for (idx, o) in spec.organs.iter().enumerate() {
                    if o.shape.contains(i, j, k) {
                        if let Some(prev) = hit {
                            return Err(Error::Phantom(format!(
                                "{} and {} overlap at voxel ({i}, {j}, {k})",
                                spec.organs[prev].class_name, o.class_name
                            )));
                        }
                        hit = Some(idx);
                    }
                }
                let (base_ct, base_t1, dist, label) = match hit {
                    Some(idx) => {
                        let o = &spec.organs[idx];
                        (o.ct_intensity, o.t1_intensity, &organ_noise, idx as u32 + 1)
                    }
                    None => match &spec.body {
                        Some(b) if b.shape.contains(i, j, k) => {
                            (b.ct_intensity, b.t1_intensity, &organ_noise, 0)
                        }
                        _ => (spec.background_ct, spec.background_t1, &bg_noise, 0),
                    },
                };
                let (dct, dt1) = if dist.std_dev() > 0.0 {
                    (dist.sample(&mut rng), dist.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                ct.push((base_ct + dct).clamp(INTENSITY_MIN, INTENSITY_MAX));
                t1.push((base_t1 + dt1).clamp(INTENSITY_MIN, INTENSITY_MAX));
                labels.push(label);
            }
        }
    }
    Ok(Phantom {
        ct: Volume3D::new(grid.clone(), ct)?,
        t1: Volume3D::new(grid.clone(), t1)?,
        gt: LabelVolume::new(grid, labels, class_map)?,
    })
}

/// CT intensity bands matching the default organ table, for the mock
/// backend.
pub fn default_ct_rules() -> Vec<ThresholdRule> {
    vec![
        ThresholdRule::new("liver", 300.0, 699.9),
        ThresholdRule::new("spleen", 700.0, 1099.9),
        ThresholdRule::new("kidney_left", 1100.0, 1499.9),
        ThresholdRule::new("aorta", 1500.0, 1899.9),
        ThresholdRule::new("vertebrae", 1900.0, 3000.0),
    ]
}

pub const CT_FILE: &str = "ct.nii.gz";
pub const T1_FILE: &str = "t1.nii.gz";
pub const GT_FILE: &str = "gt.nii.gz";
pub const ORGANS_FILE: &str = "organs.json";
pub const CLASSES_FILE: &str = "classes.json";
pub const BACKEND_FILE: &str = "mock_backend.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Writes the three volumes and the organ table, plus a class map, a mock
/// backend config, a two-case manifest and a run config so the directory
/// can be fed straight to `run`.
pub fn write_bundle(dir: &Path, spec: &PhantomSpec) -> Result<Phantom> {
    let phantom = generate(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_volume(&phantom.ct, &dir.join(CT_FILE))?;
    write_volume(&phantom.t1, &dir.join(T1_FILE))?;
    write_labels(&phantom.gt, &dir.join(GT_FILE))?;
    write_json(&dir.join(ORGANS_FILE), spec)?;
    let class_map = spec.class_map()?;
    class_map.write_json(&dir.join(CLASSES_FILE))?;

    let mut backend = BackendSpec::mock(default_ct_rules());
    backend.class_map_path = Some(CLASSES_FILE.into());
    write_json(&dir.join(BACKEND_FILE), &backend)?;

    let manifest = serde_json::json!({
        "cases": [
            {"case_id": "phantom_t1", "image_path": T1_FILE, "gt_path": GT_FILE, "sequence_tag": "T1"},
            {"case_id": "phantom_ct", "image_path": CT_FILE, "gt_path": GT_FILE, "sequence_tag": "other"},
        ]
    });
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;

    let config = serde_json::json!({
        "variants": ["none", "invert", "invert-bg"],
        "backend": backend,
        "classes": spec.class_names(),
        "gt_class_map_path": CLASSES_FILE,
        "seed": 42,
    });
    write_json(&dir.join(RUN_CONFIG_FILE), &config)?;
    Ok(phantom)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
