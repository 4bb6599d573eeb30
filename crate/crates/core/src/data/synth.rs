//! Procedural shapes dataset: every image holds one target shape and a few
//! distractor shapes of other classes on a noisy background.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::descriptions::{write_class_descriptions, ClassRecord};
use super::image::{Image, Mask};
use super::meta::{Dataset, DatasetMeta, ImageRecord, Sample, DESCRIPTIONS_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Ellipse,
    Hexagon,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Ellipse,
        ShapeKind::Hexagon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Hexagon => "hexagon",
        }
    }

    /// Base appearance of the class; instances jitter around it.
    fn base_color(self) -> [f32; 3] {
        match self {
            ShapeKind::Disk => [0.90, 0.25, 0.20],
            ShapeKind::Square => [0.20, 0.75, 0.30],
            ShapeKind::Triangle => [0.25, 0.40, 0.95],
            ShapeKind::Ring => [0.95, 0.85, 0.20],
            ShapeKind::Cross => [0.85, 0.30, 0.85],
            ShapeKind::Diamond => [0.20, 0.85, 0.85],
            ShapeKind::Ellipse => [0.95, 0.55, 0.15],
            ShapeKind::Hexagon => [0.85, 0.85, 0.85],
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ShapeKind::Disk => "A disk is a solid round shape with a smooth circular outline and no corners. \
                Its interior is completely filled with a single warm reddish color. The disk looks the same \
                from every direction and has no hole, unlike a ring.",
            ShapeKind::Square => "A square is a solid shape with four straight edges of equal length and four \
                sharp right-angled corners. It is filled with a green color. Unlike a diamond it usually sits \
                with its sides close to horizontal and vertical.",
            ShapeKind::Triangle => "A triangle is a solid shape bounded by three straight edges that meet at \
                three pointed corners. It is filled with a blue color. It is narrower at its tips than a \
                square or a hexagon.",
            ShapeKind::Ring => "A ring is a round band with a circular outer edge and a hollow circular hole \
                in the middle that shows the background. It has a yellow color. Unlike a disk its center is \
                empty.",
            ShapeKind::Cross => "A cross is made of two thick perpendicular bars that intersect at their \
                centers, forming four arms of equal length. It has a purple color and concave inner corners \
                between the arms.",
            ShapeKind::Diamond => "A diamond is a solid square shape turned on its point, with four straight \
                edges and corners pointing up, down, left and right. It is filled with a cyan color.",
            ShapeKind::Ellipse => "An ellipse is a solid oval shape, longer in one direction than the other, \
                with a smooth curved outline and no corners. It is filled with an orange color.",
            ShapeKind::Hexagon => "A hexagon is a solid shape with six straight edges of equal length and six \
                blunt corners. It is filled with a light gray color and looks rounder than a square.",
        }
    }

    /// Point-in-shape test in shape-local coordinates scaled by the radius.
    fn contains(self, x: f32, y: f32) -> bool {
        let d2 = x * x + y * y;
        match self {
            ShapeKind::Disk => d2 <= 1.0,
            ShapeKind::Ring => (0.55 * 0.55..=1.0).contains(&d2),
            ShapeKind::Square => x.abs() <= 0.78 && y.abs() <= 0.78,
            ShapeKind::Diamond => x.abs() + y.abs() <= 1.0,
            ShapeKind::Cross => {
                (x.abs() <= 1.0 && y.abs() <= 0.32) || (x.abs() <= 0.32 && y.abs() <= 1.0)
            }
            ShapeKind::Ellipse => x * x + (y / 0.55) * (y / 0.55) <= 1.0,
            ShapeKind::Triangle => {
                // equilateral, circumradius 1, apex up; inside iff on the inner side of all edges
                (0..3).all(|i| {
                    let a = PI / 2.0 + i as f32 * 2.0 * PI / 3.0 + PI / 3.0;
                    x * a.cos() + y * a.sin() <= 0.5
                })
            }
            ShapeKind::Hexagon => (0..3).all(|i| {
                let a = i as f32 * PI / 3.0;
                (x * a.cos() + y * a.sin()).abs() <= 0.866
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub classes: Vec<ShapeKind>,
    pub image_size: usize,
    pub per_class: usize,
    pub distractors: usize,
    /// Per-channel uniform jitter applied to the class base color.
    pub color_jitter: f32,
    pub background_noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic-shapes".into(),
            classes: ShapeKind::ALL[..4].to_vec(),
            image_size: 128,
            per_class: 50,
            distractors: 2,
            color_jitter: 0.08,
            background_noise: 0.04,
        }
    }
}

pub const MIN_IMAGE_SIZE: usize = 24;

#[derive(Debug, Clone)]
struct Placement {
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    radius: f32,
    angle: f32,
    color: [f32; 3],
}

impl Placement {
    fn covers(&self, px: f32, py: f32) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        let lx = (c * dx + s * dy) / self.radius;
        let ly = (-s * dx + c * dy) / self.radius;
        self.kind.contains(lx, ly)
    }
}

/// In-memory result of [`gen_synthetic_dataset`]. Class ids start at 1.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub meta: DatasetMeta,
    pub classes: BTreeMap<u32, ClassRecord>,
    pub samples: BTreeMap<u32, Vec<(Image, Mask)>>,
}

impl SyntheticDataset {
    pub fn into_dataset(self) -> Result<Dataset> {
        let resolution = self.meta.resolution.expect("synthetic datasets record their resolution");
        let mut samples = BTreeMap::new();
        for (class_id, pairs) in self.samples {
            let records = &self.meta.image_index[&class_id];
            let loaded = pairs
                .into_iter()
                .zip(records)
                .enumerate()
                .map(|(index, ((image, mask), record))| Sample {
                    class_id,
                    index,
                    record: record.clone(),
                    image: Arc::new(image),
                    mask: Arc::new(mask),
                })
                .collect();
            samples.insert(class_id, loaded);
        }
        Dataset::from_parts(self.meta, resolution, self.classes, samples)
    }

    /// Writes images, masks, `index.json` and `descriptions.json` under the meta root.
    pub fn write(&self) -> Result<()> {
        let root = &self.meta.root;
        for (class_id, pairs) in &self.samples {
            for sub in ["images", "masks"] {
                let dir = root.join(sub).join(class_id.to_string());
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            for ((image, mask), record) in pairs.iter().zip(&self.meta.image_index[class_id]) {
                image.save(&root.join(&record.image))?;
                mask.save(&root.join(&record.mask))?;
            }
        }
        self.meta.write_index()?;
        write_class_descriptions(&root.join(DESCRIPTIONS_FILE), &self.classes)
    }
}

fn class_color<R: Rng + ?Sized>(kind: ShapeKind, jitter: f32, rng: &mut R) -> [f32; 3] {
    let base = kind.base_color();
    let mut c = [0.0; 3];
    for (o, b) in c.iter_mut().zip(base) {
        let j = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
        *o = (b + j).clamp(0.0, 1.0);
    }
    c
}

fn place<R: Rng + ?Sized>(
    kind: ShapeKind,
    size: f32,
    existing: &[Placement],
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Placement> {
    let (r_lo, r_hi) = (0.12 * size, 0.2 * size);
    for _ in 0..1000 {
        let radius = rng.random_range(r_lo..=r_hi);
        let margin = radius + 1.0;
        if size - margin <= margin {
            break;
        }
        let cx = rng.random_range(margin..size - margin);
        let cy = rng.random_range(margin..size - margin);
        let clear = existing.iter().all(|p| {
            let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
            d >= p.radius + radius + 2.0
        });
        if clear {
            return Ok(Placement {
                kind,
                cx,
                cy,
                radius,
                angle: rng.random_range(-PI / 8.0..PI / 8.0),
                color: class_color(kind, cfg.color_jitter, rng),
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "image size {} too small to place {} shapes",
        cfg.image_size,
        existing.len() + 1
    )))
}

fn render<R: Rng + ?Sized>(
    target: ShapeKind,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<(Image, Mask)> {
    let size = cfg.image_size;
    let sf = size as f32;
    let mut shapes = vec![place(target, sf, &[], cfg, rng)?];
    let mut others: Vec<ShapeKind> = cfg.classes.iter().copied().filter(|&k| k != target).collect();
    others.shuffle(rng);
    for i in 0..cfg.distractors {
        if others.is_empty() {
            break;
        }
        let kind = others[i % others.len()];
        let p = place(kind, sf, &shapes, cfg, rng)?;
        shapes.push(p);
    }
    let bg: f32 = rng.random_range(0.05..0.3);
    let mut image = Image::new(size, size);
    let mut mask = Mask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut rgb = [bg; 3];
            for (i, s) in shapes.iter().enumerate() {
                if s.covers(px, py) {
                    rgb = s.color;
                    if i == 0 {
                        mask.data[y * size + x] = 1;
                    }
                }
            }
            if cfg.background_noise > 0.0 {
                for c in &mut rgb {
                    *c = (*c + rng.random_range(-cfg.background_noise..=cfg.background_noise))
                        .clamp(0.0, 1.0);
                }
            }
            image.set_pixel(y, x, rgb);
        }
    }
    Ok((image, mask))
}

/// Generates `per_class` image/mask pairs for each configured shape class.
pub fn gen_synthetic_dataset<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    root: impl Into<PathBuf>,
    rng: &mut R,
) -> Result<SyntheticDataset> {
    if cfg.classes.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 shape classes, got {}",
            cfg.classes.len()
        )));
    }
    let mut seen = cfg.classes.clone();
    seen.sort_by_key(|k| *k as u8);
    seen.dedup();
    if seen.len() != cfg.classes.len() {
        return Err(Error::InvalidArgument("shape classes must be distinct".into()));
    }
    if cfg.image_size < MIN_IMAGE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image size {} too small to place shapes (minimum {MIN_IMAGE_SIZE})",
            cfg.image_size
        )));
    }
    if cfg.per_class < 2 {
        return Err(Error::InvalidArgument("need at least 2 images per class".into()));
    }
    let root = root.into();
    let mut classes = BTreeMap::new();
    let mut samples = BTreeMap::new();
    let mut index = BTreeMap::new();
    for (i, &kind) in cfg.classes.iter().enumerate() {
        let class_id = i as u32 + 1;
        classes.insert(
            class_id,
            ClassRecord {
                class_id,
                class_name: kind.name().to_string(),
                description: kind.description().split_whitespace().collect::<Vec<_>>().join(" "),
            },
        );
        let mut pairs = Vec::with_capacity(cfg.per_class);
        let mut records = Vec::with_capacity(cfg.per_class);
        for n in 0..cfg.per_class {
            pairs.push(render(kind, cfg, rng)?);
            records.push(ImageRecord {
                image: Path::new("images").join(class_id.to_string()).join(format!("{n:04}.png")),
                mask: Path::new("masks").join(class_id.to_string()).join(format!("{n:04}.png")),
            });
        }
        samples.insert(class_id, pairs);
        index.insert(class_id, records);
    }
    let meta = DatasetMeta::new(cfg.name.clone(), root, Some(cfg.image_size), index)?;
    Ok(SyntheticDataset {
        meta,
        classes,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SynthConfig {
        SynthConfig {
            image_size: 64,
            per_class: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn every_mask_has_foreground() {
        let ds = gen_synthetic_dataset(&small(), "/tmp/x", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for pairs in ds.samples.values() {
            for (_, m) in pairs {
                assert!(m.foreground() > 0);
            }
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = gen_synthetic_dataset(&small(), "/tmp/x", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_synthetic_dataset(&small(), "/tmp/x", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn writes_two_hundred_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            image_size: 64,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic_dataset(&cfg, dir.path(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        ds.write().unwrap();
        let count = |sub: &str| {
            walk(&dir.path().join(sub))
        };
        assert_eq!(count("images"), 200);
        assert_eq!(count("masks"), 200);
        assert!(dir.path().join("index.json").exists());
        let reread = DatasetMeta::read_index(dir.path()).unwrap();
        assert_eq!(reread.class_ids, vec![1, 2, 3, 4]);
        assert_eq!(reread.image_index, ds.meta.image_index);
    }

    fn walk(dir: &Path) -> usize {
        fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                if p.is_dir() { walk(&p) } else { 1 }
            })
            .sum()
    }

    #[test]
    fn too_small_is_rejected() {
        let cfg = SynthConfig {
            image_size: 16,
            ..SynthConfig::default()
        };
        assert!(gen_synthetic_dataset(&cfg, "/tmp/x", &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn shape_tests_hit_their_centers() {
        for k in ShapeKind::ALL {
            let center_inside = k.contains(0.0, 0.0);
            assert_eq!(center_inside, k != ShapeKind::Ring, "{k:?}");
            assert!(!k.contains(1.2, 1.2));
        }
    }
}
