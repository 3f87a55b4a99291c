//! Synthetic grayscale images with planted, localizable class signals.
//!
//! A positive label for class `c` draws a bright rectangle inside quadrant
//! `c mod 4` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right). Each
//! class has its own rectangle size, so classes that share a quadrant stay
//! distinguishable and detection needs no absolute-position information.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::manifest::{write_manifest, Manifest, SampleRecord};
use crate::data::netpbm::{write_pgm, GrayImage};
use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 64;
pub const FOREGROUND: u8 = 192;
/// Share of patients that own two or three images.
pub const MULTI_IMAGE_PATIENTS: f64 = 0.2;

/// Rectangle `(height, width)` per class on a 16×16 quadrant; scaled to the
/// actual quadrant size. Shapes within one quadrant (same index mod 4)
/// differ, while areas stay within 35..=42 pixels so every class carries a
/// similar amount of signal.
const SHAPES: [(usize, usize); 16] = [
    (6, 6),
    (4, 9),
    (9, 4),
    (3, 12),
    (12, 3),
    (5, 7),
    (7, 5),
    (4, 10),
    (10, 4),
    (5, 8),
    (8, 5),
    (7, 6),
    (3, 13),
    (13, 3),
    (6, 7),
    (6, 6),
];

pub const MAX_CLASSES: usize = SHAPES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub prevalence: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument(format!(
                "need n_images > 0 and at least 8x8 images, got n={} {}x{}",
                self.n_images, self.height, self.width
            )));
        }
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "num_classes {} outside 1..={MAX_CLASSES}",
                self.num_classes
            )));
        }
        if self.prevalence.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} prevalence values for {} classes",
                self.prevalence.len(),
                self.num_classes
            )));
        }
        if let Some(p) = self.prevalence.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidArgument(format!("prevalence {p} outside (0,1)")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("Class{c}")).collect()
    }

    /// Quadrant `(x0, y0, x1, y1)` (exclusive ends) holding class `c`.
    pub fn quadrant(&self, c: usize) -> Region {
        let (qh, qw) = (self.height / 2, self.width / 2);
        let q = c % 4;
        let (x0, y0) = ((q % 2) * qw, (q / 2) * qh);
        let x1 = if q % 2 == 1 { self.width } else { qw };
        let y1 = if q / 2 == 1 { self.height } else { qh };
        Region { x0, y0, x1, y1 }
    }

    /// Rectangle `(height, width)` planted for class `c`.
    pub fn shape(&self, c: usize) -> (usize, usize) {
        let q = self.quadrant(c);
        let (qh, qw) = (q.y1 - q.y0, q.x1 - q.x0);
        let (sh, sw) = SHAPES[c];
        let scale = |s: usize, q: usize| ((s * q + 8) / 16).clamp(1, q);
        (scale(sh, qh), scale(sw, qw))
    }
}

/// Axis-aligned pixel rectangle, `x1`/`y1` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Ground truth for one planted signal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantedRegion {
    pub image: String,
    pub class_index: usize,
    pub quadrant: Region,
    pub rect: Region,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: GrayImage,
    pub record: SampleRecord,
    pub planted: Vec<PlantedRegion>,
}

/// Patient sizes: 1 image, or 2–3 with probability [`MULTI_IMAGE_PATIENTS`].
fn patient_ids(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut ids = Vec::with_capacity(n);
    let mut p = 0usize;
    while ids.len() < n {
        let size = if rng.random::<f64>() < MULTI_IMAGE_PATIENTS {
            rng.random_range(2..=3)
        } else {
            1
        };
        for _ in 0..size.min(n - ids.len()) {
            ids.push(format!("P{p:05}"));
        }
        p += 1;
    }
    ids
}

/// Renders the dataset in memory; deterministic in `spec`.
pub fn render(spec: &SyntheticDatasetSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patients = patient_ids(spec.n_images, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.n_images);
    for (i, patient) in patients.into_iter().enumerate() {
        let name = format!("img_{i:05}.pgm");
        let labels: Vec<u8> = spec.prevalence.iter().map(|&p| u8::from(rng.random::<f64>() < p)).collect();
        let mut canvas = vec![BACKGROUND as f64; spec.height * spec.width];
        let mut planted = Vec::new();
        for (c, _) in labels.iter().enumerate().filter(|(_, &y)| y == 1) {
            let q = spec.quadrant(c);
            let (rh, rw) = spec.shape(c);
            let x0 = rng.random_range(q.x0..=q.x1 - rw);
            let y0 = rng.random_range(q.y0..=q.y1 - rh);
            let rect = Region {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
            };
            for y in rect.y0..rect.y1 {
                canvas[y * spec.width + x0..y * spec.width + rect.x1].fill(FOREGROUND as f64);
            }
            planted.push(PlantedRegion {
                image: name.clone(),
                class_index: c,
                quadrant: q,
                rect,
            });
        }
        let pixels = canvas
            .iter()
            .map(|&v| {
                let v = if spec.noise_std > 0.0 { v + noise.sample(&mut rng) } else { v };
                v.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        out.push(SyntheticSample {
            image: GrayImage::new(spec.width, spec.height, pixels)?,
            record: SampleRecord {
                image_path: name,
                patient_id: patient,
                labels,
            },
            planted,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub regions: Vec<PlantedRegion>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const REGIONS_FILE: &str = "regions.csv";

/// Writes `img_*.pgm`, `manifest.csv` and `regions.csv` into `out_dir`.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec, out_dir: &Path) -> Result<SyntheticDataset> {
    let samples = render(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    let mut regions = Vec::new();
    for s in samples {
        write_pgm(&out_dir.join(&s.record.image_path), &s.image)?;
        records.push(s.record);
        regions.extend(s.planted);
    }
    let manifest = Manifest {
        class_names: spec.class_names(),
        records,
    };
    write_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    let path = out_dir.join(REGIONS_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_regions(&regions, file)?;
    Ok(SyntheticDataset { manifest, regions })
}

pub fn write_regions<W: Write>(regions: &[PlantedRegion], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image", "class", "x0", "y0", "x1", "y1", "rect_x0", "rect_y0", "rect_x1", "rect_y1"])?;
    for r in regions {
        let (q, b) = (r.quadrant, r.rect);
        w.write_record(
            [
                r.image.clone(),
                r.class_index.to_string(),
                q.x0.to_string(),
                q.y0.to_string(),
                q.x1.to_string(),
                q.y1.to_string(),
                b.x0.to_string(),
                b.y0.to_string(),
                b.x1.to_string(),
                b.y1.to_string(),
            ]
            .iter(),
        )?;
    }
    w.flush().map_err(|e| Error::io("<regions>", e))?;
    Ok(())
}

pub fn load_regions(path: &Path) -> Result<Vec<PlantedRegion>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let num = |k: usize| {
            row.get(k).and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| Error::Parse {
                row: i + 1,
                message: format!("bad numeric cell in column {k}"),
            })
        };
        out.push(PlantedRegion {
            image: row.get(0).unwrap_or_default().to_string(),
            class_index: num(1)?,
            quadrant: Region {
                x0: num(2)?,
                y0: num(3)?,
                x1: num(4)?,
                y1: num(5)?,
            },
            rect: Region {
                x0: num(6)?,
                y0: num(7)?,
                x1: num(8)?,
                y1: num(9)?,
            },
        });
    }
    Ok(out)
}
