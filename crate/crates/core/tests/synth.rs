use std::collections::BTreeMap;
use std::path::Path;

use octnet::cohort::{classify_all, ClinicalTables, CohortRules, Label};
use octnet::image::load_pgm;
use octnet::synth::{
    generate_dataset, generate_phantom, generate_phantom_with, generate_scan, slice_scale, DatasetSpec, PhantomClass,
    PhantomParams, IMAGES_DIR,
};

fn spec(per_class: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        patients_per_class: per_class,
        scans_per_patient: 1,
        slices_per_scan: 61,
        params: PhantomParams::default(),
        seed,
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn small_dataset_has_every_slice_and_intended_labels() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&spec(5, 11), dir.path()).unwrap();
    let pgms = std::fs::read_dir(dir.path().join(IMAGES_DIR)).unwrap().count();
    assert_eq!(pgms, 610);
    assert_eq!(ds.n_images, 610);

    let tables = ClinicalTables::load(dir.path()).unwrap();
    assert_eq!(tables, ds.tables);
    let labels = classify_all(&tables, &CohortRules::default());
    assert_eq!(labels.len(), 10);
    for (l, t) in labels.iter().zip(&ds.truth) {
        assert_eq!(l.patient_id, t.patient_id);
        let want = match t.class {
            PhantomClass::Normal => Label::Normal,
            PhantomClass::Amd => Label::Amd,
        };
        assert_eq!(l.label, want, "{}", l.patient_id);
    }
    assert_eq!(ds.truth.iter().filter(|t| t.class == PhantomClass::Amd).count(), 5);
    assert!(ds
        .lesions
        .iter()
        .all(|r| ds.truth.iter().any(|t| t.patient_id == r.patient_id && t.class == PhantomClass::Amd)));

    let img = load_pgm(&dir.path().join(IMAGES_DIR).join(format!("{}S1_30.pgm", ds.truth[0].patient_id))).unwrap();
    assert_eq!((img.width(), img.height()), (96, 64));
}

#[test]
fn same_seed_writes_identical_tree_regardless_of_threads() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let s = DatasetSpec { slices_per_scan: 13, ..spec(3, 4) };
    generate_dataset(&s, a.path()).unwrap();
    rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| generate_dataset(&s, b.path()).unwrap());
    assert_eq!(tree(a.path()), tree(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&DatasetSpec { seed: 5, ..s }, c.path()).unwrap();
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn invalid_specs_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate_dataset(&spec(0, 1), dir.path()).is_err());
    assert!(generate_dataset(&DatasetSpec { slices_per_scan: 0, ..spec(2, 1) }, dir.path()).is_err());
    let tiny = DatasetSpec { params: PhantomParams::with_dims(16, 16), ..spec(2, 1) };
    assert!(generate_dataset(&tiny, dir.path()).is_err());
}

#[test]
fn lesions_change_pixels_only_inside_their_boxes() {
    let params = PhantomParams::default();
    for seed in 0..20 {
        let normal = generate_phantom(PhantomClass::Normal, &params, seed).unwrap();
        let amd = generate_phantom(PhantomClass::Amd, &params, seed).unwrap();
        assert!(normal.lesions.is_empty());
        assert!(!amd.lesions.is_empty());
        let mut changed = 0;
        for y in 0..params.height {
            for x in 0..params.width {
                if normal.image.get(x, y) != amd.image.get(x, y) {
                    changed += 1;
                    assert!(amd.lesions.iter().any(|b| b.contains(x, y)), "seed {seed} pixel ({x},{y})");
                }
            }
        }
        assert!(changed > 0);
    }
}

#[test]
fn lesion_amplitude_peaks_at_the_central_slice() {
    assert_eq!(slice_scale(30, 61), 1.0);
    for i in 0..30 {
        assert!(slice_scale(i, 61) < slice_scale(i + 1, 61));
        assert_eq!(slice_scale(30 - i, 61), slice_scale(30 + i, 61));
    }
    assert!(slice_scale(0, 61) > 0.0);

    let params = PhantomParams::default();
    let (amd, boxes) = generate_scan(PhantomClass::Amd, &params, 3, 61).unwrap();
    let (normal, none) = generate_scan(PhantomClass::Normal, &params, 3, 61).unwrap();
    assert!(none.is_empty() && !boxes.is_empty());
    let diff = |i: usize| -> u64 {
        amd[i].pixels().iter().zip(normal[i].pixels()).map(|(&a, &b)| (a as i64 - b as i64).unsigned_abs()).sum()
    };
    assert!(diff(30) > diff(5));
    assert!(diff(30) > diff(55));
}

#[test]
fn phantom_is_deterministic_and_count_is_honoured() {
    let params = PhantomParams::default();
    assert_eq!(
        generate_phantom(PhantomClass::Amd, &params, 9).unwrap(),
        generate_phantom(PhantomClass::Amd, &params, 9).unwrap()
    );
    for n in 1..=3 {
        assert_eq!(generate_phantom_with(PhantomClass::Amd, &params, 9, n).unwrap().lesions.len(), n as usize);
    }
    assert!(generate_phantom_with(PhantomClass::Normal, &params, 9, 3).unwrap().lesions.is_empty());
}
