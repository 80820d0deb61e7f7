//! Synthetic scenes whose object classes are assembled from named parts.
//!
//! Each sample carries the image, the class label map, the part label map
//! and an ignore mask. Part annotations come from the renderer, so every
//! perturbation experiment over parts has a known ground truth.

mod io;
mod render;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{load_dataset, save_dataset, MANIFEST_FILE, MANIFEST_VERSION};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Sentinel in [`SegmentationSample::parts`] for pixels without a part.
pub const NO_PART: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rect,
    Ellipse,
}

/// Box in coordinates relative to the owning object's bounding box, `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RelBox {
    pub const FULL: RelBox = RelBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

/// Spatial arrangement of a part's two colors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Solid,
    HStripes { period: usize },
    VStripes { period: usize },
    Checker { cell: usize },
}

/// Color distribution of a part: a two-color pattern whose colors receive a
/// per-object Gaussian jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
    pub pattern: Pattern,
    pub jitter: f64,
}

impl ColorSpec {
    pub fn solid(rgb: [f64; 3], jitter: f64) -> Self {
        Self {
            primary: rgb,
            secondary: rgb,
            pattern: Pattern::Solid,
            jitter,
        }
    }

    pub fn pattern(primary: [f64; 3], secondary: [f64; 3], pattern: Pattern, jitter: f64) -> Self {
        Self {
            primary,
            secondary,
            pattern,
            jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub part_id: i32,
    pub name: String,
    pub shape: Shape,
    /// One entry per instance drawn on every object of the class.
    pub placements: Vec<RelBox>,
    pub color: ColorSpec,
}

/// Inclusive object size range in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min_w: usize,
    pub max_w: usize,
    pub min_h: usize,
    pub max_h: usize,
}

impl SizeRange {
    pub fn fixed(w: usize, h: usize) -> Self {
        Self {
            min_w: w,
            max_w: w,
            min_h: h,
            max_h: h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub name: String,
    /// Object size; unused for the background class, which fills the canvas.
    pub size: SizeRange,
    /// Painted in order, later parts on top.
    pub parts: Vec<PartSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassSpec>,
    pub background_class_id: usize,
    pub objects_per_image: CountRange,
    pub noise_std: f64,
    pub seed: u64,
    /// Pixels within this distance of a class boundary are marked ignore.
    #[serde(default)]
    pub ignore_border: usize,
}

/// One part as listed in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartInfo {
    pub part_id: i32,
    pub name: String,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    /// `(H, W, 3)`, values are multiples of 1/255 in `[0, 1]`.
    pub image: Array3<f32>,
    pub label: Array2<u16>,
    /// Part id per pixel or [`NO_PART`].
    pub parts: Array2<i32>,
    pub ignore: Array2<bool>,
}

impl SegmentationSample {
    pub fn height(&self) -> usize {
        self.label.nrows()
    }

    pub fn width(&self) -> usize {
        self.label.ncols()
    }

    pub fn valid_pixels(&self) -> usize {
        self.ignore.iter().filter(|&&i| !i).count()
    }
}

/// A generated or loaded dataset together with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub class_names: Vec<String>,
    pub parts: Vec<PartInfo>,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn part_name(&self, part_id: i32) -> Option<&str> {
        self.parts.iter().find(|p| p.part_id == part_id).map(|p| p.name.as_str())
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn part_infos(&self) -> Vec<PartInfo> {
        self.classes
            .iter()
            .flat_map(|c| {
                c.parts.iter().map(move |p| PartInfo {
                    part_id: p.part_id,
                    name: p.name.clone(),
                    class_id: c.class_id,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.height < 32 || self.width < 32 {
            return bad(format!("image size {}x{} below 32", self.height, self.width));
        }
        if self.classes.len() < 2 {
            return bad("need at least two classes".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                return bad(format!("class ids must be 0..C-1 in order, found {} at {i}", c.class_id));
            }
            if c.parts.is_empty() {
                return bad(format!("class `{}` has no parts", c.name));
            }
            let s = c.size;
            if i != self.background_class_id && (s.min_w == 0 || s.min_h == 0 || s.min_w > s.max_w || s.min_h > s.max_h) {
                return bad(format!("class `{}` has an invalid size range", c.name));
            }
        }
        if self.background_class_id >= self.classes.len() {
            return bad(format!("background class {} out of range", self.background_class_id));
        }
        if self.objects_per_image.min > self.objects_per_image.max {
            return bad("objects_per_image min exceeds max".into());
        }
        if !(0.0..=1.0).contains(&self.noise_std) {
            return bad(format!("noise_std {} outside [0, 1]", self.noise_std));
        }
        let mut ids = BTreeSet::new();
        let mut owners: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for c in &self.classes {
            for p in &c.parts {
                if p.part_id < 0 || p.part_id >= u16::MAX as i32 {
                    return bad(format!("part id {} out of range", p.part_id));
                }
                if !ids.insert(p.part_id) {
                    return bad(format!("duplicate part id {}", p.part_id));
                }
                if p.placements.is_empty() {
                    return bad(format!("part `{}` has no placement", p.name));
                }
                for b in &p.placements {
                    let ok = (0.0..=1.0).contains(&b.x0)
                        && (0.0..=1.0).contains(&b.y0)
                        && (0.0..=1.0).contains(&b.x1)
                        && (0.0..=1.0).contains(&b.y1)
                        && b.x0 < b.x1
                        && b.y0 < b.y1;
                    if !ok {
                        return bad(format!("part `{}` placement outside the object box", p.name));
                    }
                }
                owners.entry(p.name.as_str()).or_default().insert(c.class_id);
            }
        }
        if !owners.values().any(|classes| classes.len() == 1) {
            return bad("no part name is unique to a single class".into());
        }
        Ok(())
    }

    /// The default six-class scene: two vehicle-like classes sharing window
    /// and wheel parts (one with a headlight, one with a ladder), two
    /// person-like classes, a foliage texture class and a background.
    pub fn default_scene(seed: u64) -> Self {
        let glass = ([0.20, 0.30, 0.80], [0.90, 0.90, 0.95]);
        let window = |id| PartSpec {
            part_id: id,
            name: "window".into(),
            shape: Shape::Rect,
            placements: vec![RelBox::new(0.12, 0.22, 0.42, 0.5), RelBox::new(0.55, 0.22, 0.85, 0.5)],
            color: ColorSpec::pattern(glass.0, glass.1, Pattern::HStripes { period: 2 }, 0.03),
        };
        let wheel = |id| PartSpec {
            part_id: id,
            name: "wheel".into(),
            shape: Shape::Ellipse,
            placements: vec![RelBox::new(0.05, 0.65, 0.35, 1.0), RelBox::new(0.65, 0.65, 0.95, 1.0)],
            color: ColorSpec::pattern([0.08, 0.08, 0.08], [0.35, 0.35, 0.35], Pattern::Checker { cell: 2 }, 0.02),
        };
        let legs = |id| PartSpec {
            part_id: id,
            name: "legs".into(),
            shape: Shape::Rect,
            placements: vec![RelBox::new(0.15, 0.6, 0.85, 1.0)],
            color: ColorSpec::solid([0.15, 0.15, 0.45], 0.04),
        };
        let classes = vec![
            ClassSpec {
                class_id: 0,
                name: "background".into(),
                size: SizeRange::fixed(1, 1),
                parts: vec![PartSpec {
                    part_id: 0,
                    name: "ground".into(),
                    shape: Shape::Rect,
                    placements: vec![RelBox::FULL],
                    color: ColorSpec::solid([0.45, 0.45, 0.42], 0.04),
                }],
            },
            ClassSpec {
                class_id: 1,
                name: "car".into(),
                size: SizeRange {
                    min_w: 14,
                    max_w: 20,
                    min_h: 10,
                    max_h: 14,
                },
                parts: vec![
                    PartSpec {
                        part_id: 1,
                        name: "body".into(),
                        shape: Shape::Rect,
                        placements: vec![RelBox::new(0.0, 0.15, 1.0, 0.85)],
                        color: ColorSpec::solid([0.75, 0.15, 0.15], 0.05),
                    },
                    window(2),
                    wheel(3),
                    PartSpec {
                        part_id: 4,
                        name: "headlight".into(),
                        shape: Shape::Rect,
                        placements: vec![RelBox::new(0.8, 0.5, 1.0, 0.75)],
                        color: ColorSpec::pattern(glass.0, glass.1, Pattern::VStripes { period: 2 }, 0.03),
                    },
                ],
            },
            ClassSpec {
                class_id: 2,
                name: "truck".into(),
                size: SizeRange {
                    min_w: 18,
                    max_w: 24,
                    min_h: 12,
                    max_h: 16,
                },
                parts: vec![
                    PartSpec {
                        part_id: 5,
                        name: "body".into(),
                        shape: Shape::Rect,
                        placements: vec![RelBox::new(0.0, 0.15, 1.0, 0.85)],
                        color: ColorSpec::solid([0.80, 0.40, 0.10], 0.05),
                    },
                    window(6),
                    wheel(7),
                    PartSpec {
                        part_id: 8,
                        name: "ladder".into(),
                        shape: Shape::Rect,
                        placements: vec![RelBox::new(0.05, 0.0, 0.95, 0.2)],
                        color: ColorSpec::pattern(
                            [0.60, 0.60, 0.60],
                            [0.95, 0.95, 0.95],
                            Pattern::VStripes { period: 3 },
                            0.03,
                        ),
                    },
                ],
            },
            ClassSpec {
                class_id: 3,
                name: "person".into(),
                size: SizeRange {
                    min_w: 6,
                    max_w: 9,
                    min_h: 14,
                    max_h: 20,
                },
                parts: vec![
                    PartSpec {
                        part_id: 9,
                        name: "head".into(),
                        shape: Shape::Ellipse,
                        placements: vec![RelBox::new(0.2, 0.0, 0.8, 0.25)],
                        color: ColorSpec::solid([0.90, 0.70, 0.55], 0.04),
                    },
                    PartSpec {
                        part_id: 10,
                        name: "torso".into(),
                        shape: Shape::Rect,
                        placements: vec![RelBox::new(0.05, 0.25, 0.95, 0.6)],
                        color: ColorSpec::solid([0.20, 0.60, 0.30], 0.05),
                    },
                    legs(11),
                ],
            },
            ClassSpec {
                class_id: 4,
                name: "rider".into(),
                size: SizeRange {
                    min_w: 8,
                    max_w: 12,
                    min_h: 14,
                    max_h: 20,
                },
                parts: vec![
                    PartSpec {
                        part_id: 12,
                        name: "helmet".into(),
                        shape: Shape::Ellipse,
                        placements: vec![RelBox::new(0.2, 0.0, 0.8, 0.25)],
                        color: ColorSpec::pattern(
                            [0.95, 0.95, 0.95],
                            [0.10, 0.10, 0.10],
                            Pattern::HStripes { period: 2 },
                            0.02,
                        ),
                    },
                    PartSpec {
                        part_id: 13,
                        name: "torso".into(),
                        shape: Shape::Rect,
                        placements: vec![RelBox::new(0.05, 0.25, 0.95, 0.6)],
                        color: ColorSpec::solid([0.55, 0.25, 0.60], 0.05),
                    },
                    legs(14),
                ],
            },
            ClassSpec {
                class_id: 5,
                name: "foliage".into(),
                size: SizeRange {
                    min_w: 12,
                    max_w: 22,
                    min_h: 12,
                    max_h: 22,
                },
                parts: vec![PartSpec {
                    part_id: 15,
                    name: "leaves".into(),
                    shape: Shape::Ellipse,
                    placements: vec![RelBox::FULL],
                    color: ColorSpec::pattern(
                        [0.10, 0.45, 0.10],
                        [0.30, 0.70, 0.20],
                        Pattern::Checker { cell: 2 },
                        0.04,
                    ),
                }],
            },
        ];
        Self {
            height: 48,
            width: 48,
            classes,
            background_class_id: 0,
            objects_per_image: CountRange { min: 2, max: 5 },
            noise_std: 0.04,
            seed,
            ignore_border: 0,
        }
    }
}

/// Per-sample seed: a stable hash of the scene seed and the sample index.
pub fn sample_seed(scene_seed: u64, index: usize) -> u64 {
    derive_seed(scene_seed, &[index as u64])
}

/// Renders `count` samples. Sample `i` depends only on `(spec, i)`.
pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidSpec("count must be at least 1".into()));
    }
    let samples = (0..count)
        .into_par_iter()
        .map(|i| render::render_sample(spec, sample_seed(spec.seed, i)))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        class_names: spec.class_names(),
        parts: spec.part_infos(),
        samples,
    })
}

/// Fraction of non-ignore pixels belonging to each class.
pub fn class_frequency(samples: &[SegmentationSample], num_classes: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for s in samples {
        for (&l, &ign) in s.label.iter().zip(s.ignore.iter()) {
            if ign {
                continue;
            }
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::InvalidArgument(format!("label {l} exceeds class count {num_classes}")));
            }
            counts[l] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}
