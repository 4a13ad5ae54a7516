use mrinv::phantom::{self, generate, PhantomSpec};
use mrinv::volume::{percentile, read_labels, read_volume, LabelReadOptions};
use mrinv::PreprocessSpec;

/// Ranks with ties averaged, 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

/// Mean intensity per tissue, so noise does not dominate the ranking.
fn tissue_means(values: &[f64], p: &phantom::Phantom) -> Vec<f64> {
    let mut out = Vec::new();
    for label in 1..=p.gt.class_map().len() as u32 {
        let (s, n) = p
            .gt
            .labels()
            .iter()
            .zip(values)
            .filter(|(&l, _)| l == label)
            .fold((0.0, 0usize), |(s, n), (_, &v)| (s + v, n + 1));
        out.push(s / n as f64);
    }
    out
}

#[test]
fn organs_are_anti_correlated_before_and_correlated_after_inversion() {
    let p = generate(&PhantomSpec::default_with_size(32, 42)).unwrap();
    let ct = tissue_means(p.ct.data(), &p);
    let t1 = tissue_means(p.t1.data(), &p);
    assert!(spearman(&ct, &t1) < -0.99, "{ct:?} {t1:?}");
    let inv = mrinv::preprocess::preprocess_case(&p.t1, &PreprocessSpec::default()).unwrap();
    let t1_inv = tissue_means(inv.data(), &p);
    assert!(spearman(&ct, &t1_inv) > 0.99, "{ct:?} {t1_inv:?}");

    // Voxel-wise inside the organs too. Air is dark in both modalities, so
    // it is left out.
    let pick = |v: &[f64]| -> Vec<f64> {
        v.iter().zip(p.gt.labels()).filter(|(_, &l)| l != 0).map(|(&x, _)| x).collect()
    };
    // Within-organ noise is independent, which caps the voxel-wise value.
    assert!(spearman(&pick(p.ct.data()), &pick(p.t1.data())) < -0.8);
    assert!(spearman(&pick(p.ct.data()), &pick(inv.data())) > 0.8);
}

#[test]
fn air_sits_at_or_below_the_first_percentile() {
    let p = generate(&PhantomSpec::default_with_size(32, 7)).unwrap();
    let t = percentile(&p.t1, 1.0).unwrap();
    let spec = PhantomSpec::default_with_size(32, 7);
    assert!(spec.background_t1 <= t);
    let air = p.ct.data().iter().filter(|&&x| x == spec.background_ct).count();
    assert!(air as f64 >= 0.01 * p.ct.len() as f64);
}

#[test]
fn same_seed_same_phantom() {
    let a = generate(&PhantomSpec::default_with_size(24, 3)).unwrap();
    let b = generate(&PhantomSpec::default_with_size(24, 3)).unwrap();
    let c = generate(&PhantomSpec::default_with_size(24, 4)).unwrap();
    assert_eq!(a.t1, b.t1);
    assert_eq!(a.gt, b.gt);
    assert_ne!(a.t1, c.t1);
    assert_eq!(a.gt, c.gt);
}

#[test]
fn overlapping_organs_are_rejected() {
    let mut spec = PhantomSpec::default_with_size(32, 1);
    spec.organs[1].shape = spec.organs[0].shape;
    assert!(generate(&spec).is_err());
}

#[test]
fn bundle_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::default_with_size(24, 11);
    let p = phantom::write_bundle(dir.path(), &spec).unwrap();
    let classes = spec.class_map().unwrap();
    let gt = read_labels(&dir.path().join(phantom::GT_FILE), &classes, LabelReadOptions::default()).unwrap();
    assert_eq!(gt.labels(), p.gt.labels());
    let t1 = read_volume(&dir.path().join(phantom::T1_FILE)).unwrap();
    for (a, b) in t1.data().iter().zip(p.t1.data()) {
        assert!((a - b).abs() <= 0.25);
    }
    let back: PhantomSpec =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(phantom::ORGANS_FILE)).unwrap()).unwrap();
    assert_eq!(back.organs.len(), spec.organs.len());
    for name in [phantom::MANIFEST_FILE, phantom::RUN_CONFIG_FILE, phantom::BACKEND_FILE] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
}

#[test]
fn every_organ_is_present_at_small_sizes() {
    for n in [16, 24, 48] {
        let p = generate(&PhantomSpec::default_with_size(n, 0)).unwrap();
        for id in 1..=5 {
            assert!(p.gt.count(id) > 0, "size {n}, label {id}");
        }
    }
}
