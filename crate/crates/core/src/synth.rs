//! Deterministic synthetic OCT B-scan phantoms and matching clinical tables.
//!
//! A phantom is a stack of horizontal retinal bands with a gentle sinusoidal
//! undulation. AMD phantoms add drusen-like domes that lift the bright RPE
//! band, or a dark fluid pocket just above it.

use std::f32::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{write_csv, AcuityExam, ClinicalTables, Diagnosis, Eye, Injection, ScanRecord};
use crate::error::{Error, Result};
use crate::image::{encode_pgm, slice_file_name, GrayImage};
use crate::rng::{hash_str, Rng};

pub const MIN_DIM: usize = 32;
pub const DESK_WIDTH: usize = 96;
pub const DESK_HEIGHT: usize = 64;
pub const IMAGES_DIR: &str = "images";
pub const TRUTH_CSV: &str = "phantom_truth.csv";
pub const LESIONS_CSV: &str = "lesions.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomClass {
    Normal,
    Amd,
}

impl FromStr for PhantomClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "amd" => Ok(Self::Amd),
            other => Err(Error::Config(format!("unknown phantom class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    DrusenBumps,
    FluidPocket,
}

impl FromStr for Perturbation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drusen" | "drusen_bumps" => Ok(Self::DrusenBumps),
            "fluid" | "fluid_pocket" => Ok(Self::FluidPocket),
            other => Err(Error::Config(format!("unknown perturbation {other:?}"))),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DrusenBumps => "drusen_bumps",
            Self::FluidPocket => "fluid_pocket",
        })
    }
}

/// A horizontal reflectivity band; depth and thickness are fractions of the
/// image height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub depth: f32,
    pub thickness: f32,
    pub intensity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub width: usize,
    pub height: usize,
    pub background: u8,
    /// Top to bottom; the band at `rpe_band` is the one domes deform.
    pub bands: Vec<Band>,
    pub rpe_band: usize,
    /// Peak undulation as a fraction of height.
    pub undulation: f32,
    pub perturbation: Perturbation,
    /// Inclusive range of lesions per AMD scan.
    pub lesion_count: (u32, u32),
    /// Lesion half-width range as a fraction of image width.
    pub lesion_radius: (f32, f32),
    /// Lesion height range as a fraction of image height.
    pub lesion_height: (f32, f32),
    /// Intensity of the material under a lifted RPE.
    pub drusen_intensity: u8,
    pub fluid_intensity: u8,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f32,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self::with_dims(DESK_WIDTH, DESK_HEIGHT)
    }
}

impl PhantomParams {
    pub fn with_dims(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            background: 18,
            bands: vec![
                Band { depth: 0.28, thickness: 0.06, intensity: 170 },
                Band { depth: 0.38, thickness: 0.05, intensity: 105 },
                Band { depth: 0.48, thickness: 0.04, intensity: 120 },
                Band { depth: 0.62, thickness: 0.07, intensity: 230 },
                Band { depth: 0.72, thickness: 0.10, intensity: 85 },
            ],
            rpe_band: 3,
            undulation: 0.03,
            perturbation: Perturbation::DrusenBumps,
            lesion_count: (1, 3),
            lesion_radius: (0.09, 0.14),
            lesion_height: (0.11, 0.17),
            drusen_intensity: 150,
            fluid_intensity: 4,
            noise: 12.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_DIM || self.height < MIN_DIM {
            return Err(Error::Config(format!(
                "phantoms need at least {MIN_DIM}x{MIN_DIM} pixels, got {}x{}",
                self.width, self.height
            )));
        }
        if self.rpe_band >= self.bands.len() {
            return Err(Error::Config("rpe_band index out of range".into()));
        }
        let ranges = [self.lesion_radius, self.lesion_height];
        if self.noise < 0.0
            || ranges.iter().any(|&(lo, hi)| lo < 0.0 || hi < lo)
            || self.lesion_count.0 > self.lesion_count.1
        {
            return Err(Error::Config("amplitude ranges must be non-negative and ordered".into()));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    /// Grown by `margin` on every side (unclipped at the origin).
    pub fn dilate(&self, margin: usize) -> BBox {
        BBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: self.x1 + margin,
            y1: self.y1 + margin,
        }
    }

    /// Maps the box onto an image resampled from `from` to `to` (w, h).
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> BBox {
        let lo = |v: usize, a: usize, b: usize| v * b / a;
        let hi = |v: usize, a: usize, b: usize| (v * b).div_ceil(a);
        BBox {
            x0: lo(self.x0, from.0, to.0),
            y0: lo(self.y0, from.1, to.1),
            x1: hi(self.x1, from.0, to.0),
            y1: hi(self.y1, from.1, to.1),
        }
    }
}

/// Geometry shared by every slice of a scan.
#[derive(Debug, Clone, PartialEq)]
struct Anatomy {
    phase: f32,
    period: f32,
    shift: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Lesion {
    center_x: f32,
    radius: f32,
    height: f32,
}

fn draw_anatomy(params: &PhantomParams, rng: &mut Rng) -> Anatomy {
    let w = params.width as f32;
    Anatomy {
        phase: rng.uniform(0.0, 2.0 * PI),
        period: rng.uniform(0.7 * w, 1.6 * w),
        shift: rng.uniform(-0.03, 0.03) * params.height as f32,
    }
}

fn draw_lesions(params: &PhantomParams, count: u32, rng: &mut Rng) -> Vec<Lesion> {
    let (w, h) = (params.width as f32, params.height as f32);
    (0..count)
        .map(|_| {
            let radius = rng.uniform(params.lesion_radius.0, params.lesion_radius.1) * w;
            Lesion {
                center_x: rng.uniform(radius, w - radius),
                radius,
                height: rng.uniform(params.lesion_height.0, params.lesion_height.1) * h,
            }
        })
        .collect()
}

fn offset(anatomy: &Anatomy, params: &PhantomParams, x: f32) -> f32 {
    anatomy.shift + params.undulation * params.height as f32 * (2.0 * PI * x / anatomy.period + anatomy.phase).sin()
}

fn dome(lesion: &Lesion, x: f32) -> f32 {
    let u = (x - lesion.center_x) / lesion.radius;
    if u.abs() >= 1.0 {
        0.0
    } else {
        lesion.height * (1.0 - u * u).sqrt()
    }
}

/// Noise-free intensity field, in floating point.
fn render_field(params: &PhantomParams, anatomy: &Anatomy, lesions: &[Lesion], scale: f32) -> Vec<f32> {
    let (w, h) = (params.width, params.height);
    let hf = h as f32;
    let rpe = params.bands[params.rpe_band];
    let mut field = vec![params.background as f32; w * h];
    for x in 0..w {
        let xc = x as f32 + 0.5;
        let off = offset(anatomy, params, xc);
        let lift = match params.perturbation {
            Perturbation::DrusenBumps => lesions.iter().map(|l| dome(l, xc) * scale).fold(0.0, f32::max),
            Perturbation::FluidPocket => 0.0,
        };
        let rpe_top = (rpe.depth - rpe.thickness / 2.0) * hf + off;
        let rpe_bottom = (rpe.depth + rpe.thickness / 2.0) * hf + off;
        for y in 0..h {
            let yc = y as f32 + 0.5;
            let mut v = params.background as f32;
            for (i, band) in params.bands.iter().enumerate() {
                let centre = band.depth * hf + off;
                let half = band.thickness * hf / 2.0;
                if i == params.rpe_band {
                    if yc >= rpe_top - lift && yc < rpe_bottom - lift {
                        v = band.intensity as f32;
                    } else if lift > 0.0 && yc >= rpe_bottom - lift && yc < rpe_bottom {
                        v = params.drusen_intensity as f32;
                    }
                } else if (yc - centre).abs() < half {
                    v = band.intensity as f32;
                }
            }
            if params.perturbation == Perturbation::FluidPocket {
                for l in lesions {
                    let ry = l.height * scale / 2.0;
                    if ry <= 0.0 {
                        continue;
                    }
                    let cy = rpe_top - ry - 1.0;
                    let u = (xc - l.center_x) / l.radius;
                    let t = (yc - cy) / ry;
                    if u * u + t * t < 1.0 {
                        v = params.fluid_intensity as f32;
                    }
                }
            }
            field[y * w + x] = v;
        }
    }
    field
}

fn quantize(field: &[f32], params: &PhantomParams, noise: Option<&mut Rng>) -> GrayImage {
    let pixels = match noise {
        Some(rng) if params.noise > 0.0 => field
            .iter()
            .map(|&v| (v + rng.uniform(-params.noise, params.noise) + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect(),
        _ => field.iter().map(|&v| (v + 0.5).floor().clamp(0.0, 255.0) as u8).collect(),
    };
    GrayImage::new(params.width, params.height, pixels).expect("validated dims")
}

fn lesion_bbox(params: &PhantomParams, anatomy: &Anatomy, lesion: &Lesion) -> BBox {
    let base = render_field(params, anatomy, &[], 1.0);
    let with = render_field(params, anatomy, std::slice::from_ref(lesion), 1.0);
    let w = params.width;
    let mut bb: Option<BBox> = None;
    for (i, _) in base.iter().zip(&with).enumerate().filter(|(_, (a, b))| a != b) {
        let (x, y) = (i % w, i / w);
        let b = bb.get_or_insert(BBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
        b.x0 = b.x0.min(x);
        b.y0 = b.y0.min(y);
        b.x1 = b.x1.max(x + 1);
        b.y1 = b.y1.max(y + 1);
    }
    bb.unwrap_or(BBox { x0: 0, y0: 0, x1: 0, y1: 0 })
}

/// A rendered slice and the boxes of the lesions it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: GrayImage,
    pub lesions: Vec<BBox>,
}

/// Independent streams for anatomy, lesions and noise, so the class never
/// changes the anatomy drawn for a seed.
fn streams(seed: u64) -> (Rng, Rng, Rng) {
    (Rng::derive(seed, 1), Rng::derive(seed, 2), Rng::derive(seed, 3))
}

/// Single phantom at full lesion amplitude, lesion count drawn from
/// `params.lesion_count`.
pub fn generate_phantom(class: PhantomClass, params: &PhantomParams, seed: u64) -> Result<Phantom> {
    params.validate()?;
    let (_, mut lesion_rng, _) = streams(seed);
    let count = lesion_rng.range_inclusive(params.lesion_count.0, params.lesion_count.1);
    generate_phantom_with(class, params, seed, count)
}

/// Single phantom with exactly `lesion_count` lesions (ignored for normal).
pub fn generate_phantom_with(
    class: PhantomClass,
    params: &PhantomParams,
    seed: u64,
    lesion_count: u32,
) -> Result<Phantom> {
    params.validate()?;
    let (mut anatomy_rng, mut lesion_rng, mut noise_rng) = streams(seed);
    let anatomy = draw_anatomy(params, &mut anatomy_rng);
    // Same draw sequence as generate_phantom: count first, then geometry.
    let _ = lesion_rng.range_inclusive(params.lesion_count.0, params.lesion_count.1);
    let lesions = match class {
        PhantomClass::Normal => Vec::new(),
        PhantomClass::Amd => draw_lesions(params, lesion_count, &mut lesion_rng),
    };
    let field = render_field(params, &anatomy, &lesions, 1.0);
    Ok(Phantom {
        image: quantize(&field, params, Some(&mut noise_rng)),
        lesions: lesions.iter().map(|l| lesion_bbox(params, &anatomy, l)).collect(),
    })
}

/// Lesion amplitude for slice `index` of `n`: 1 at the centre, falling
/// linearly towards the edges of the raster.
pub fn slice_scale(index: usize, n: usize) -> f32 {
    let centre = (n / 2) as f32;
    1.0 - (index as f32 - centre).abs() / (centre + 1.0)
}

/// Every slice of one scan plus the scan's lesion boxes at full amplitude.
pub fn generate_scan(
    class: PhantomClass,
    params: &PhantomParams,
    seed: u64,
    n_slices: usize,
) -> Result<(Vec<GrayImage>, Vec<BBox>)> {
    params.validate()?;
    let (mut anatomy_rng, mut lesion_rng, _) = streams(seed);
    let anatomy = draw_anatomy(params, &mut anatomy_rng);
    let count = lesion_rng.range_inclusive(params.lesion_count.0, params.lesion_count.1);
    let lesions = match class {
        PhantomClass::Normal => Vec::new(),
        PhantomClass::Amd => draw_lesions(params, count, &mut lesion_rng),
    };
    let slices = (0..n_slices)
        .map(|i| {
            let field = render_field(params, &anatomy, &lesions, slice_scale(i, n_slices));
            let mut noise = Rng::derive(seed, 1000 + i as u64);
            quantize(&field, params, Some(&mut noise))
        })
        .collect();
    let boxes = lesions.iter().map(|l| lesion_bbox(params, &anatomy, l)).collect();
    Ok((slices, boxes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub patients_per_class: usize,
    pub scans_per_patient: usize,
    pub slices_per_scan: usize,
    pub params: PhantomParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub patient_id: String,
    pub class: PhantomClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRow {
    pub patient_id: String,
    pub scan_id: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl LesionRow {
    pub fn bbox(&self) -> BBox {
        BBox { x0: self.x0, y0: self.y0, x1: self.x1, y1: self.y1 }
    }
}

/// What [`generate_dataset`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    pub root: PathBuf,
    pub truth: Vec<TruthRow>,
    pub tables: ClinicalTables,
    pub lesions: Vec<LesionRow>,
    pub n_images: usize,
}

const NON_RETINAL_CODES: [&str; 4] = ["401.9", "250.00", "272.4", "V72.0"];
const AMD_CODES: [&str; 3] = ["362.50", "362.51", "362.52"];
const NORMAL_ACUITY: [f64; 3] = [15.0, 20.0, 25.0];
const AMD_ACUITY: [f64; 7] = [40.0, 50.0, 60.0, 70.0, 80.0, 100.0, 200.0];

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len() as u64) as usize]
}

fn date(rng: &mut Rng, year: u32) -> String {
    format!("{year}-{:02}-{:02}", rng.range_inclusive(1, 12), rng.range_inclusive(1, 28))
}

struct PatientOutput {
    tables: ClinicalTables,
    lesions: Vec<LesionRow>,
    files: Vec<(String, Vec<u8>)>,
}

fn generate_patient(id: &str, class: PhantomClass, spec: &DatasetSpec) -> Result<PatientOutput> {
    let mut rng = Rng::derive(spec.seed, hash_str(id));
    let mut tables = ClinicalTables::default();
    let diag =
        |code: &str, rng: &mut Rng| Diagnosis { patient_id: id.into(), icd9: code.into(), date: date(rng, 2014) };
    match class {
        PhantomClass::Normal => {
            let d = diag(pick(&mut rng, &NON_RETINAL_CODES), &mut rng);
            tables.diagnoses.push(d);
        }
        PhantomClass::Amd => {
            let d = diag(pick(&mut rng, &AMD_CODES), &mut rng);
            tables.diagnoses.push(d);
            let eye = if rng.below(2) == 0 { Eye::Right } else { Eye::Left };
            tables.injections.push(Injection { patient_id: id.into(), eye, date: date(&mut rng, 2015) });
        }
    }
    let choices: &[f64] = match class {
        PhantomClass::Normal => &NORMAL_ACUITY,
        PhantomClass::Amd => &AMD_ACUITY,
    };
    for eye in [Eye::Right, Eye::Left] {
        for _ in 0..2 {
            tables.acuity.push(AcuityExam {
                patient_id: id.into(),
                eye,
                denominator: pick(&mut rng, choices),
                date: date(&mut rng, 2015),
            });
        }
    }

    let mut lesions = Vec::new();
    let mut files = Vec::new();
    for k in 1..=spec.scans_per_patient {
        let scan_id = format!("{id}S{k}");
        tables.scans.push(ScanRecord {
            patient_id: id.into(),
            scan_id: scan_id.clone(),
            date: date(&mut rng, 2016),
            n_slices: spec.slices_per_scan,
        });
        let scan_seed = rng.next_u64();
        let (slices, boxes) = generate_scan(class, &spec.params, scan_seed, spec.slices_per_scan)?;
        for (i, img) in slices.iter().enumerate() {
            files.push((slice_file_name(&scan_id, i), encode_pgm(img)));
        }
        lesions.extend(boxes.into_iter().map(|b| LesionRow {
            patient_id: id.into(),
            scan_id: scan_id.clone(),
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
        }));
    }
    Ok(PatientOutput { tables, lesions, files })
}

/// Writes `images/<scan>_<i>.pgm`, the four clinical CSVs, the intended
/// class of every patient and the lesion boxes of every AMD scan.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<PhantomDataset> {
    spec.params.validate()?;
    if spec.patients_per_class == 0 || spec.scans_per_patient == 0 || spec.slices_per_scan == 0 {
        return Err(Error::Config("patient, scan and slice counts must all be at least 1".into()));
    }
    let images = out_dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let n = spec.patients_per_class;
    let mut classes: Vec<PhantomClass> =
        std::iter::repeat_n(PhantomClass::Normal, n).chain(std::iter::repeat_n(PhantomClass::Amd, n)).collect();
    Rng::new(spec.seed).shuffle(&mut classes);
    let width = (2 * n).to_string().len().max(3);
    let truth: Vec<TruthRow> = classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| TruthRow { patient_id: format!("P{:0width$}", i + 1), class })
        .collect();

    let outputs: Vec<PatientOutput> = truth
        .par_iter()
        .map(|t| {
            let out = generate_patient(&t.patient_id, t.class, spec)?;
            for (name, bytes) in &out.files {
                let path = images.join(name);
                std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut tables = ClinicalTables::default();
    let mut lesions = Vec::new();
    let mut n_images = 0;
    for out in outputs {
        tables.diagnoses.extend(out.tables.diagnoses);
        tables.acuity.extend(out.tables.acuity);
        tables.injections.extend(out.tables.injections);
        tables.scans.extend(out.tables.scans);
        lesions.extend(out.lesions);
        n_images += out.files.len();
    }
    tables.save(out_dir)?;
    write_csv(&out_dir.join(TRUTH_CSV), &truth)?;
    write_csv(&out_dir.join(LESIONS_CSV), &lesions)?;
    Ok(PhantomDataset { root: out_dir.to_path_buf(), truth, tables, lesions, n_images })
}
