use std::fs;

use mtlswin::data::augment::{apply, rotate, Flip, Grid, Interp};
use mtlswin::data::generate::binary_correlation;
use mtlswin::data::{generate_dataset, load_dataset, save_dataset, AugmentPlan, Dataset, GenConfig, Split};
use mtlswin::numerics::rng::seeded;
use mtlswin::numerics::Tensor;
use mtlswin::Error;
use proptest::prelude::*;
use rand::Rng;

fn small() -> GenConfig {
    GenConfig { image_size: 32, n_train: 60, n_val: 12, n_test: 10, ..GenConfig::default() }
}

fn cue_correlation(ds: &Dataset, split: Split) -> f64 {
    let s = ds.split(split);
    let cues: Vec<u8> = s.iter().map(|x| x.cue.unwrap()).collect();
    let labels: Vec<u8> = s.iter().map(|x| x.label).collect();
    binary_correlation(&cues, &labels)
}

#[test]
fn cue_correlation_tracks_rho() {
    let cfg = GenConfig { image_size: 32, n_train: 10_000, n_val: 10, n_test: 2000, ..GenConfig::default() };
    let ds = generate_dataset(&cfg).unwrap();
    assert!(ds.count(Split::Train) >= 10_000);
    let train = cue_correlation(&ds, Split::Train);
    assert!((train - 0.9).abs() <= 0.05, "train correlation {train}");
    let shift = cue_correlation(&ds, Split::TestShift);
    assert!(shift.abs() <= 0.05, "shifted correlation {shift}");

    let cfg = GenConfig { rho_train: 0.5, rho_shift: 0.7, ..cfg };
    let ds = generate_dataset(&cfg).unwrap();
    assert!((cue_correlation(&ds, Split::Train) - 0.5).abs() <= 0.05);
    assert!((cue_correlation(&ds, Split::TestShift) - 0.7).abs() <= 0.05);
}

#[test]
fn cue_only_rule_on_test_sets() {
    let cfg = GenConfig { image_size: 32, n_test: 2000, ..GenConfig::default() };
    let ds = generate_dataset(&cfg).unwrap();
    let acc = |split| {
        let s = ds.split(split);
        s.iter().filter(|x| x.cue == Some(x.label)).count() as f64 / s.len() as f64
    };
    // cue equals the label with prob rho and is a fair coin otherwise
    assert!((acc(Split::TestIn) - 0.95).abs() < 0.03);
    assert!((acc(Split::TestShift) - 0.5).abs() < 0.04);
}

#[test]
fn default_split_sizes() {
    let ds = generate_dataset(&GenConfig::default()).unwrap();
    let sizes: Vec<usize> = Split::ALL.iter().map(|&s| ds.count(s)).collect();
    assert_eq!(sizes, vec![2000, 200, 179, 179]);
    for s in ds.split(Split::TestIn).iter().chain(&ds.split(Split::Val)) {
        assert_eq!(s.hospital, 1);
    }
    assert!(ds.split(Split::TestShift).iter().all(|s| (5..=11).contains(&s.hospital)));
    assert!(ds.split(Split::Train).iter().all(|s| (1..=4).contains(&s.hospital)));
    let pos = |split| ds.split(split).iter().filter(|s| s.label == 1).count();
    assert_eq!(pos(Split::TestIn), pos(Split::TestShift));
}

#[test]
fn generation_is_deterministic() {
    let a = generate_dataset(&small()).unwrap();
    let b = generate_dataset(&small()).unwrap();
    assert_eq!(a.samples, b.samples);
    let c = generate_dataset(&GenConfig { seed: 1, ..small() }).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn positives_have_darker_core_and_full_mask() {
    let ds = generate_dataset(&small()).unwrap();
    for s in ds.samples.iter().filter(|s| s.label == 1 && s.mask.is_some()) {
        let m = s.mask.as_ref().unwrap();
        let b = s.lesion.unwrap();
        let (cy, cx) = ((b.y0 + b.y1) / 2, (b.x0 + b.x1) / 2);
        assert_eq!(m.data()[cy * 32 + cx], 1.0, "{}: mask misses the blob center", s.id);
        let inside: Vec<f32> = m.data().iter().zip(s.image.data()).filter(|(m, _)| **m > 0.5).map(|(_, v)| *v).collect();
        let lo = inside.iter().cloned().fold(f32::MAX, f32::min);
        let hi = inside.iter().cloned().fold(f32::MIN, f32::max);
        assert!(hi - lo > 0.15, "{}: no visible core", s.id);
    }
}

#[test]
fn slices_of_a_patient_share_the_lesion() {
    let ds = generate_dataset(&small()).unwrap();
    let mut by_patient: std::collections::BTreeMap<(u8, u32), Vec<(f64, f64)>> = Default::default();
    for s in &ds.samples {
        if let Some(b) = s.lesion {
            let c = ((b.y0 + b.y1) as f64 / 2.0, (b.x0 + b.x1) as f64 / 2.0);
            by_patient.entry((s.hospital, s.patient)).or_default().push(c);
        }
    }
    for centers in by_patient.values() {
        for c in centers {
            assert!((c.0 - centers[0].0).abs() <= 3.0 && (c.1 - centers[0].1).abs() <= 3.0);
        }
    }
}

#[test]
fn rho_out_of_range_is_rejected() {
    assert!(matches!(generate_dataset(&GenConfig { rho_train: 1.2, ..small() }), Err(Error::Config(_))));
    assert!(matches!(generate_dataset(&GenConfig { image_size: 48, ..small() }), Err(Error::Config(_))));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&GenConfig { n_train: 100, ..small() }).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.samples.len(), ds.samples.len());
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        assert_eq!((&a.id, a.label, a.hospital, a.patient, a.split), (&b.id, b.label, b.hospital, b.patient, b.split));
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask, b.mask);
        if a.mask.is_some() {
            assert_eq!(a.lesion, b.lesion);
        }
    }
    // saving twice gives the same bytes
    let again = tempfile::tempdir().unwrap();
    save_dataset(&back, again.path()).unwrap();
    for f in ["index.csv", "split.csv", "images/000000.pgm"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
    }
}

fn saved() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&generate_dataset(&small()).unwrap(), dir.path()).unwrap();
    let index = fs::read_to_string(dir.path().join("index.csv")).unwrap();
    (dir, index)
}

fn first_masked_row(index: &str) -> (usize, Vec<String>) {
    index
        .lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i, l.split(',').map(String::from).collect::<Vec<_>>()))
        .find(|(_, r)| r[1] != "none")
        .unwrap()
}

fn with_row(index: &str, n: usize, row: &[String]) -> String {
    let mut lines: Vec<String> = index.lines().map(String::from).collect();
    lines[n] = row.join(",");
    lines.join("\n") + "\n"
}

#[test]
fn missing_mask_file_is_an_error() {
    let (dir, index) = saved();
    let (_, row) = first_masked_row(&index);
    fs::remove_file(dir.path().join(&row[1])).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn hospital_twelve_is_an_error() {
    let (dir, index) = saved();
    let (n, mut row) = first_masked_row(&index);
    row[3] = "12".into();
    fs::write(dir.path().join("index.csv"), with_row(&index, n, &row)).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
}

#[test]
fn malformed_rows_are_errors() {
    let (dir, index) = saved();
    let (n, row) = first_masked_row(&index);
    let mut bad = row.clone();
    bad[2] = "2".into();
    fs::write(dir.path().join("index.csv"), with_row(&index, n, &bad)).unwrap();
    assert!(load_dataset(dir.path()).is_err());
    fs::write(dir.path().join("index.csv"), with_row(&index, n, &row[..3])).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn mask_size_mismatch_is_an_error() {
    let (dir, index) = saved();
    let (_, row) = first_masked_row(&index);
    mtlswin::data::write_pgm(&dir.path().join(&row[1]), 16, 16, &[0u8; 256]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
}

fn blob_mask(rng: &mut impl Rng, n: usize) -> Tensor<f32> {
    let (cy, cx) = (rng.random_range(0.35..0.65) * n as f64, rng.random_range(0.35..0.65) * n as f64);
    let (a, b) = (rng.random_range(0.12..0.25) * n as f64, rng.random_range(0.12..0.25) * n as f64);
    let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
    Tensor::from_fn(&[n, n], |i| {
        let (y, x) = ((i / n) as f64 + 0.5 - cy, (i % n) as f64 + 0.5 - cx);
        let (u, v) = (y * th.cos() + x * th.sin(), -y * th.sin() + x * th.cos());
        if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
            1.0
        } else {
            0.0
        }
    })
}

fn mask_count(t: &Tensor<f32>) -> usize {
    t.data().iter().filter(|&&v| v > 0.5).count()
}

#[test]
fn mask_area_under_augmentation() {
    let mut rng = seeded(21);
    let n = 64;
    for _ in 0..100 {
        let mask = blob_mask(&mut rng, n);
        let image = mask.reshape(&[n, n, 1]).unwrap();
        let base = mask_count(&mask);
        let k = rng.random_range(0..4u8);
        let flip = if rng.random_bool(0.5) { Flip::Horizontal } else { Flip::Vertical };
        let plan = AugmentPlan { dihedral: Some((k, flip)), angle: None };
        let (_, m) = apply(&plan, &image, Some(&mask));
        assert_eq!(mask_count(&m.unwrap()), base);

        let angle = rng.random_range(-20.0..=20.0);
        let plan = AugmentPlan { dihedral: None, angle: Some(angle) };
        let (_, m) = apply(&plan, &image, Some(&mask));
        let got = mask_count(&m.unwrap()) as f64;
        assert!((got - base as f64).abs() <= 0.02 * base as f64, "angle {angle}: {got} vs {base}");
    }
}

#[test]
fn identity_plan_leaves_inputs_alone() {
    let mut rng = seeded(2);
    let mask = blob_mask(&mut rng, 32);
    let image = Tensor::from_fn(&[32, 32, 1], |i| (i % 7) as f32 / 7.0);
    let (i2, m2) = apply(&AugmentPlan::IDENTITY, &image, Some(&mask));
    assert_eq!(i2, image);
    assert_eq!(m2.unwrap(), mask);
}

#[test]
fn identity_plan_frequency() {
    let mut rng = seeded(4);
    let n = 20_000;
    let skipped = (0..n).filter(|_| AugmentPlan::sample(&mut rng) == AugmentPlan::IDENTITY).count();
    assert!((skipped as f64 / n as f64 - 0.25).abs() < 0.015);
}

#[test]
fn image_and_mask_move_together() {
    let mut rng = seeded(9);
    for _ in 0..20 {
        let mask = blob_mask(&mut rng, 32);
        let image = mask.reshape(&[32, 32, 1]).unwrap();
        let plan = AugmentPlan::sample(&mut rng);
        let (img, m) = apply(&plan, &image, Some(&mask));
        let m = m.unwrap();
        // bilinear and nearest resampling of the same field agree away from edges
        let agree = img.data().iter().zip(m.data()).filter(|(a, b)| (**a > 0.5) == (**b > 0.5)).count();
        assert!(agree as f64 >= 0.97 * 1024.0);
    }
}

proptest! {
    #[test]
    fn quarter_turns_and_flips_are_permutations(h in 1usize..9, w in 1usize..9, k in 0u8..4, v in any::<bool>()) {
        let g = Grid { h, w, data: (0..h * w).map(|i| i as f32).collect() };
        let f = if v { Flip::Vertical } else { Flip::Horizontal };
        let out = g.rot90(k).flip(f);
        let mut seen: Vec<f32> = out.data.clone();
        seen.sort_by(f32::total_cmp);
        prop_assert_eq!(seen, g.data.clone());
        prop_assert_eq!(g.rot90(k).rot90((4 - k) % 4), g.clone());
        prop_assert_eq!(g.flip(f).flip(f), g);
    }

    #[test]
    fn zero_angle_rotation_is_identity(h in 1usize..12, w in 1usize..12) {
        let g = Grid { h, w, data: (0..h * w).map(|i| (i * 7 % 13) as f32).collect() };
        prop_assert_eq!(rotate(&g, 0.0, Interp::Bilinear), g.clone());
        prop_assert_eq!(rotate(&g, 0.0, Interp::Nearest), g);
    }
}
