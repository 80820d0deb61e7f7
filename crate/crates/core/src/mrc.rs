//! Minimum required context: for every pixel, the smallest centred crop in
//! the schedule `beta, 2 beta, .., n beta` on which the model still gets
//! that pixel right (MRC), or still agrees with its full-image prediction
//! (UMRC, no labels needed).

use std::collections::VecDeque;
use std::io::Write;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::InducedHierarchy;
use crate::model::Segmenter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingPolicy {
    /// Out-of-image positions read the nearest edge pixel.
    Clamp,
    /// Out-of-image positions mirror around the edge (edge not repeated).
    Reflect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrcConfig {
    pub beta: usize,
    pub n: usize,
    /// Odd side of the patch around the centre that must be correct.
    pub center_patch: usize,
    pub padding: PaddingPolicy,
}

impl Default for MrcConfig {
    fn default() -> Self {
        Self {
            beta: 25,
            n: 10,
            center_patch: 1,
            padding: PaddingPolicy::Clamp,
        }
    }
}

impl MrcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("beta and n must be at least 1".into()));
        }
        if self.center_patch % 2 == 0 || self.center_patch > self.beta {
            return Err(Error::InvalidArgument(format!(
                "center_patch {} must be odd and at most beta",
                self.center_patch
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> impl DoubleEndedIterator<Item = usize> + '_ {
        (1..=self.n).map(|i| i * self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MrcValue {
    Size(usize),
    Miss,
    Ignore,
}

impl MrcValue {
    pub fn size(self) -> Option<usize> {
        match self {
            Self::Size(m) => Some(m),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrcMap {
    pub values: Array2<MrcValue>,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    (if r < n as isize { r } else { period - r }) as usize
}

fn source_index(i: isize, n: usize, policy: PaddingPolicy) -> usize {
    match policy {
        PaddingPolicy::Clamp => i.clamp(0, n as isize - 1) as usize,
        PaddingPolicy::Reflect => reflect(i, n),
    }
}

/// Crop offset: crop row `r` reads image row `y - size / 2 + r`, so the
/// centre lands at crop index `size / 2`.
fn origin(center: usize, size: usize) -> isize {
    center as isize - (size / 2) as isize
}

/// `m x m` crop of an `(H, W, 3)` image centred at `(x, y)`.
pub fn extract_crop(image: ArrayView3<f32>, spec: CropSpec, policy: PaddingPolicy) -> Result<Array3<f32>> {
    let (h, w, c) = image.dim();
    if spec.x >= w || spec.y >= h {
        return Err(Error::CenterOutOfBounds {
            x: spec.x,
            y: spec.y,
            width: w,
            height: h,
        });
    }
    let (oy, ox) = (origin(spec.y, spec.size), origin(spec.x, spec.size));
    let rows: Vec<usize> = (0..spec.size).map(|r| source_index(oy + r as isize, h, policy)).collect();
    let cols: Vec<usize> = (0..spec.size).map(|r| source_index(ox + r as isize, w, policy)).collect();
    Ok(Array3::from_shape_fn((spec.size, spec.size, c), |(r, q, k)| image[[rows[r], cols[q], k]]))
}

/// Whether the crop prediction agrees with `target` on every non-ignore,
/// in-image pixel of the centre patch.
fn patch_agrees(
    crop_pred: &Array2<u16>,
    target: ArrayView2<u16>,
    ignore: Option<ArrayView2<bool>>,
    x: usize,
    y: usize,
    size: usize,
    patch: usize,
) -> bool {
    let (h, w) = target.dim();
    let r = (patch / 2) as isize;
    let c = (size / 2) as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let (iy, ix) = (y as isize + dy, x as isize + dx);
            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                continue;
            }
            let (iy, ix) = (iy as usize, ix as usize);
            if ignore.is_some_and(|ig| ig[[iy, ix]]) {
                continue;
            }
            if crop_pred[[(c + dy) as usize, (c + dx) as usize]] != target[[iy, ix]] {
                return false;
            }
        }
    }
    true
}

fn crop_matches(
    model: &dyn Segmenter,
    image: ArrayView3<f32>,
    target: ArrayView2<u16>,
    ignore: Option<ArrayView2<bool>>,
    x: usize,
    y: usize,
    size: usize,
    cfg: &MrcConfig,
) -> Result<bool> {
    let crop = extract_crop(image, CropSpec { x, y, size }, cfg.padding)?;
    let pred = model.segment(crop.view())?;
    Ok(patch_agrees(&pred, target, ignore, x, y, size, cfg.center_patch))
}

/// Smallest crop size in the schedule whose centre patch is predicted
/// correctly, searching upwards and stopping at the first success.
pub fn mrc_pixel(
    model: &dyn Segmenter,
    image: ArrayView3<f32>,
    label: ArrayView2<u16>,
    ignore: ArrayView2<bool>,
    x: usize,
    y: usize,
    cfg: &MrcConfig,
) -> Result<MrcValue> {
    cfg.validate()?;
    let (h, w) = label.dim();
    if x >= w || y >= h {
        return Err(Error::CenterOutOfBounds {
            x,
            y,
            width: w,
            height: h,
        });
    }
    if ignore[[y, x]] {
        return Err(Error::IgnorePixel { x, y });
    }
    for m in cfg.schedule() {
        if crop_matches(model, image, label, Some(ignore), x, y, m, cfg)? {
            return Ok(MrcValue::Size(m));
        }
    }
    Ok(MrcValue::Miss)
}

/// Label-free variant of [`mrc_pixel`] against a given target map.
/// `monotone` scans from the largest crop downwards and returns the
/// smallest size reached before the prediction first changes.
pub fn umrc_pixel(
    model: &dyn Segmenter,
    image: ArrayView3<f32>,
    target: ArrayView2<u16>,
    x: usize,
    y: usize,
    cfg: &MrcConfig,
    monotone: bool,
) -> Result<MrcValue> {
    cfg.validate()?;
    if monotone {
        let mut best = MrcValue::Miss;
        for m in cfg.schedule().rev() {
            if !crop_matches(model, image, target, None, x, y, m, cfg)? {
                break;
            }
            best = MrcValue::Size(m);
        }
        return Ok(best);
    }
    for m in cfg.schedule() {
        if crop_matches(model, image, target, None, x, y, m, cfg)? {
            return Ok(MrcValue::Size(m));
        }
    }
    Ok(MrcValue::Miss)
}

fn pixel_grid(h: usize, w: usize) -> Vec<(usize, usize)> {
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect()
}

pub fn mrc_map(
    model: &dyn Segmenter,
    image: ArrayView3<f32>,
    label: ArrayView2<u16>,
    ignore: ArrayView2<bool>,
    cfg: &MrcConfig,
) -> Result<MrcMap> {
    cfg.validate()?;
    let (h, w) = label.dim();
    let values: Vec<MrcValue> = pixel_grid(h, w)
        .into_par_iter()
        .map(|(y, x)| {
            if ignore[[y, x]] {
                Ok(MrcValue::Ignore)
            } else {
                mrc_pixel(model, image, label, ignore, x, y, cfg)
            }
        })
        .collect::<Result<_>>()?;
    Ok(MrcMap {
        values: Array2::from_shape_vec((h, w), values).expect("one value per pixel"),
    })
}

/// UMRC for every pixel, against the model's own full-image prediction.
pub fn umrc_map(model: &dyn Segmenter, image: ArrayView3<f32>, cfg: &MrcConfig, monotone: bool) -> Result<MrcMap> {
    cfg.validate()?;
    let full = model.segment(image)?;
    let (h, w) = full.dim();
    let values: Vec<MrcValue> = pixel_grid(h, w)
        .into_par_iter()
        .map(|(y, x)| umrc_pixel(model, image, full.view(), x, y, cfg, monotone))
        .collect::<Result<_>>()?;
    Ok(MrcMap {
        values: Array2::from_shape_vec((h, w), values).expect("one value per pixel"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMrcStats {
    pub class: usize,
    /// Mean over pixels with a finite MRC; `None` when there are none.
    pub avg_mrc: Option<f64>,
    pub miss_rate: Option<f64>,
    /// Share of all non-ignore pixels.
    pub frequency: f64,
    /// Mean height of 4-connected label components.
    pub avg_object_height: Option<f64>,
    pub leaf_depth: Option<usize>,
    pub pixels: usize,
}

/// Heights of the 4-connected components of `class` in `label`.
pub fn component_heights(label: ArrayView2<u16>, class: u16) -> Vec<usize> {
    let (h, w) = label.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut heights = Vec::new();
    for (y0, x0) in pixel_grid(h, w) {
        if seen[[y0, x0]] || label[[y0, x0]] != class {
            continue;
        }
        seen[[y0, x0]] = true;
        let (mut top, mut bottom) = (y0, y0);
        let mut queue = VecDeque::from([(y0, x0)]);
        while let Some((y, x)) = queue.pop_front() {
            top = top.min(y);
            bottom = bottom.max(y);
            let nbrs = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            for (ny, nx) in nbrs {
                if ny < h && nx < w && !seen[[ny, nx]] && label[[ny, nx]] == class {
                    seen[[ny, nx]] = true;
                    queue.push_back((ny, nx));
                }
            }
        }
        heights.push(bottom - top + 1);
    }
    heights
}

/// Per-class aggregates over aligned MRC maps and labels. Pixels marked
/// IGNORE in a map are skipped everywhere.
pub fn mrc_class_stats(
    maps: &[MrcMap],
    labels: &[Array2<u16>],
    num_classes: usize,
    hierarchy: Option<&InducedHierarchy>,
) -> Result<Vec<ClassMrcStats>> {
    if maps.is_empty() || maps.len() != labels.len() {
        return Err(Error::EmptyInput(format!("{} maps for {} labels", maps.len(), labels.len())));
    }
    let mut sum = vec![0.0; num_classes];
    let mut finite = vec![0usize; num_classes];
    let mut miss = vec![0usize; num_classes];
    let mut heights: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let mut total = 0usize;
    for (map, label) in maps.iter().zip(labels) {
        if map.values.dim() != label.dim() {
            return Err(Error::EmptyInput("map and label shapes differ".into()));
        }
        for (v, &l) in map.values.iter().zip(label.iter()) {
            let c = l as usize;
            if c >= num_classes {
                return Err(Error::UnknownClass(c));
            }
            match v {
                MrcValue::Ignore => continue,
                MrcValue::Miss => miss[c] += 1,
                MrcValue::Size(m) => {
                    sum[c] += *m as f64;
                    finite[c] += 1;
                }
            }
            total += 1;
        }
        for (c, hs) in heights.iter_mut().enumerate() {
            hs.extend(component_heights(label.view(), c as u16));
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("every pixel is ignored".into()));
    }
    (0..num_classes)
        .map(|c| {
            let pixels = finite[c] + miss[c];
            Ok(ClassMrcStats {
                class: c,
                avg_mrc: (finite[c] > 0).then(|| sum[c] / finite[c] as f64),
                miss_rate: (pixels > 0).then(|| miss[c] as f64 / pixels as f64),
                frequency: pixels as f64 / total as f64,
                avg_object_height: (!heights[c].is_empty())
                    .then(|| heights[c].iter().sum::<usize>() as f64 / heights[c].len() as f64),
                leaf_depth: hierarchy.map(|h| h.leaf_depth(c)).transpose()?,
                pixels,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `mrc_stats.csv`: class, avg_mrc, miss_rate, frequency, avg_object_height, leaf_depth.
pub fn write_stats_csv(stats: &[ClassMrcStats], class_names: &[String], out: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["class", "avg_mrc", "miss_rate", "frequency", "avg_object_height", "leaf_depth"])
        .map_err(csv_err)?;
    for s in stats {
        let name = class_names.get(s.class).cloned().unwrap_or_else(|| s.class.to_string());
        wtr.write_record([
            name,
            opt(s.avg_mrc),
            opt(s.miss_rate),
            s.frequency.to_string(),
            opt(s.avg_object_height),
            s.leaf_depth.map(|d| d.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefaultClassRow {
    pub class: usize,
    pub avg_mrc: Option<f64>,
    /// 1 = least context; absent when the class has no finite MRC.
    pub mrc_rank: Option<usize>,
    pub leaf_depth: Option<usize>,
    pub frequency: f64,
    /// 1 = most frequent.
    pub frequency_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefaultClassReport {
    pub rows: Vec<DefaultClassRow>,
    /// Class with the strictly smallest average MRC.
    pub candidate: Option<usize>,
    /// Several classes share the smallest average MRC.
    pub tie: bool,
    pub median_leaf_depth: Option<f64>,
    pub candidate_depth_at_most_median: Option<bool>,
    pub candidate_not_most_frequent: Option<bool>,
}

/// Flags the class needing the least context as the candidate "default"
/// class and checks whether it sits shallow in the tree and whether it is
/// not simply the most frequent class.
pub fn default_class_report(stats: &[ClassMrcStats], hierarchy: Option<&InducedHierarchy>) -> Result<DefaultClassReport> {
    let depth = |c: usize| -> Result<Option<usize>> {
        match hierarchy {
            Some(h) => Ok(Some(h.leaf_depth(c)?)),
            None => Ok(stats[c].leaf_depth),
        }
    };
    let mut by_mrc: Vec<&ClassMrcStats> = stats.iter().filter(|s| s.avg_mrc.is_some()).collect();
    by_mrc.sort_by(|a, b| a.avg_mrc.partial_cmp(&b.avg_mrc).expect("finite").then(a.class.cmp(&b.class)));
    let mut by_freq: Vec<&ClassMrcStats> = stats.iter().collect();
    by_freq.sort_by(|a, b| b.frequency.partial_cmp(&a.frequency).expect("finite").then(a.class.cmp(&b.class)));
    let rows = stats
        .iter()
        .map(|s| {
            Ok(DefaultClassRow {
                class: s.class,
                avg_mrc: s.avg_mrc,
                mrc_rank: by_mrc.iter().position(|o| o.class == s.class).map(|p| p + 1),
                leaf_depth: depth(s.class)?,
                frequency: s.frequency,
                frequency_rank: by_freq.iter().position(|o| o.class == s.class).expect("present") + 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tie = by_mrc.len() >= 2 && by_mrc[0].avg_mrc == by_mrc[1].avg_mrc;
    let candidate = if tie { None } else { by_mrc.first().map(|s| s.class) };
    let mut depths: Vec<usize> = rows.iter().filter_map(|r| r.leaf_depth).collect();
    depths.sort_unstable();
    let median_leaf_depth = (!depths.is_empty()).then(|| {
        let n = depths.len();
        if n % 2 == 1 {
            depths[n / 2] as f64
        } else {
            (depths[n / 2 - 1] + depths[n / 2]) as f64 / 2.0
        }
    });
    let cand_row = candidate.map(|c| &rows[stats.iter().position(|s| s.class == c).expect("present")]);
    Ok(DefaultClassReport {
        candidate_depth_at_most_median: cand_row
            .and_then(|r| Some(r.leaf_depth? as f64 <= median_leaf_depth?)),
        candidate_not_most_frequent: cand_row.map(|r| r.frequency_rank != 1),
        rows,
        candidate,
        tie,
        median_leaf_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Network};
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    struct Fixed(u16);

    impl Segmenter for Fixed {
        fn segment(&self, image: ArrayView3<f32>) -> Result<Array2<u16>> {
            Ok(Array2::from_elem((image.dim().0, image.dim().1), self.0))
        }
    }

    /// Predicts 1 at pixels whose crop is at least `k` wide, 0 otherwise.
    struct SizeGate(usize);

    impl Segmenter for SizeGate {
        fn segment(&self, image: ArrayView3<f32>) -> Result<Array2<u16>> {
            let (h, w, _) = image.dim();
            Ok(Array2::from_elem((h, w), u16::from(h >= self.0)))
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = rng_for(seed, &[]);
        Array3::from_shape_simple_fn((h, w, 3), || rng.gen::<f32>())
    }

    fn gather_oracle(img: &Array3<f32>, x: usize, y: usize, m: usize) -> Array3<f32> {
        let (h, w, _) = img.dim();
        let mut out = Array3::zeros((m, m, 3));
        for r in 0..m {
            for q in 0..m {
                let sy = (y as i64 - (m / 2) as i64 + r as i64).clamp(0, h as i64 - 1) as usize;
                let sx = (x as i64 - (m / 2) as i64 + q as i64).clamp(0, w as i64 - 1) as usize;
                for k in 0..3 {
                    out[[r, q, k]] = img[[sy, sx, k]];
                }
            }
        }
        out
    }

    #[test]
    fn crop_special_cases() {
        let img = random_image(9, 9, 1);
        let full = extract_crop(img.view(), CropSpec { x: 4, y: 4, size: 9 }, PaddingPolicy::Clamp).unwrap();
        assert_eq!(full, img);
        let one = extract_crop(img.view(), CropSpec { x: 2, y: 7, size: 1 }, PaddingPolicy::Reflect).unwrap();
        assert_eq!(one.as_slice().unwrap(), img.slice(ndarray::s![7, 2, ..]).to_vec().as_slice());
        for (x, y) in [(0, 0), (8, 0), (0, 8), (8, 8), (3, 0)] {
            for m in [1, 4, 5, 12, 25] {
                let got = extract_crop(img.view(), CropSpec { x, y, size: m }, PaddingPolicy::Clamp).unwrap();
                assert_eq!(got, gather_oracle(&img, x, y, m));
            }
        }
        assert!(matches!(
            extract_crop(img.view(), CropSpec { x: 9, y: 0, size: 3 }, PaddingPolicy::Clamp),
            Err(Error::CenterOutOfBounds { .. })
        ));
    }

    #[test]
    fn reflect_mirrors_without_repeating_edges() {
        assert_eq!((-3..8).map(|i| reflect(i, 4)).collect::<Vec<_>>(), [3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        let img = Array3::from_shape_fn((1, 4, 1), |(_, x, _)| x as f32);
        let crop = extract_crop(img.view(), CropSpec { x: 0, y: 0, size: 5 }, PaddingPolicy::Reflect).unwrap();
        assert_eq!(crop.slice(ndarray::s![2, .., 0]).to_vec(), [2.0, 1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn first_success_and_miss() {
        let img = random_image(12, 12, 2);
        let label = Array2::from_elem((12, 12), 1u16);
        let ignore = Array2::from_elem((12, 12), false);
        let cfg = MrcConfig {
            beta: 2,
            n: 5,
            ..Default::default()
        };
        let v = mrc_pixel(&Fixed(1), img.view(), label.view(), ignore.view(), 3, 3, &cfg).unwrap();
        assert_eq!(v, MrcValue::Size(2));
        let v = mrc_pixel(&Fixed(0), img.view(), label.view(), ignore.view(), 3, 3, &cfg).unwrap();
        assert_eq!(v, MrcValue::Miss);
        let v = mrc_pixel(&SizeGate(6), img.view(), label.view(), ignore.view(), 3, 3, &cfg).unwrap();
        assert_eq!(v, MrcValue::Size(6));
        let mut ig = ignore.clone();
        ig[[3, 3]] = true;
        assert!(matches!(
            mrc_pixel(&Fixed(1), img.view(), label.view(), ig.view(), 3, 3, &cfg),
            Err(Error::IgnorePixel { x: 3, y: 3 })
        ));
    }

    #[test]
    fn constant_model_has_unit_umrc() {
        let img = Array3::from_elem((8, 8, 3), 0.5f32);
        let cfg = MrcConfig {
            beta: 3,
            n: 4,
            ..Default::default()
        };
        let map = umrc_map(&Fixed(2), img.view(), &cfg, false).unwrap();
        assert!(map.values.iter().all(|&v| v == MrcValue::Size(3)));
        let mono = umrc_map(&Fixed(2), img.view(), &cfg, true).unwrap();
        assert!(mono.values.iter().all(|&v| v == MrcValue::Size(3)));
    }

    #[test]
    fn monotone_stops_at_first_change() {
        // Matches at sizes >= 6 only: upward search and downward scan agree.
        let img = random_image(10, 10, 3);
        let target = Array2::from_elem((10, 10), 1u16);
        let cfg = MrcConfig {
            beta: 2,
            n: 5,
            ..Default::default()
        };
        assert_eq!(
            umrc_pixel(&SizeGate(6), img.view(), target.view(), 1, 1, &cfg, false).unwrap(),
            MrcValue::Size(6)
        );
        assert_eq!(
            umrc_pixel(&SizeGate(6), img.view(), target.view(), 1, 1, &cfg, true).unwrap(),
            MrcValue::Size(6)
        );
        let never = Array2::from_elem((10, 10), 0u16);
        assert_eq!(
            umrc_pixel(&SizeGate(6), img.view(), never.view(), 1, 1, &cfg, true).unwrap(),
            MrcValue::Miss
        );
    }

    #[test]
    fn center_patch_requires_every_pixel() {
        let img = random_image(10, 10, 4);
        let mut label = Array2::from_elem((10, 10), 1u16);
        label[[5, 6]] = 0;
        let mut ignore = Array2::from_elem((10, 10), false);
        let cfg = MrcConfig {
            beta: 3,
            n: 3,
            center_patch: 3,
            padding: PaddingPolicy::Clamp,
        };
        let v = mrc_pixel(&Fixed(1), img.view(), label.view(), ignore.view(), 5, 5, &cfg).unwrap();
        assert_eq!(v, MrcValue::Miss);
        ignore[[5, 6]] = true;
        let v = mrc_pixel(&Fixed(1), img.view(), label.view(), ignore.view(), 5, 5, &cfg).unwrap();
        assert_eq!(v, MrcValue::Size(3));
    }

    #[test]
    fn config_validation() {
        let bad = MrcConfig {
            center_patch: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(MrcConfig::default().validate().is_ok());
    }

    #[test]
    fn connected_component_heights() {
        let label = ndarray::array![[1u16, 0, 1], [1, 0, 1], [0, 0, 1], [1, 1, 0]];
        let mut hs = component_heights(label.view(), 1);
        hs.sort_unstable();
        assert_eq!(hs, [1, 2, 3]);
    }

    #[test]
    fn class_stats() {
        let map = MrcMap {
            values: ndarray::array![
                [MrcValue::Size(4), MrcValue::Size(8)],
                [MrcValue::Miss, MrcValue::Ignore]
            ],
        };
        let label = ndarray::array![[0u16, 0], [1, 1]];
        let stats = mrc_class_stats(&[map], &[label], 2, None).unwrap();
        assert_eq!(stats[0].avg_mrc, Some(6.0));
        assert_eq!(stats[0].miss_rate, Some(0.0));
        assert_eq!(stats[1].avg_mrc, None);
        assert_eq!(stats[1].miss_rate, Some(1.0));
        assert!((stats[0].frequency - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(mrc_class_stats(&[], &[], 2, None), Err(Error::EmptyInput(_))));
        let mut csv = Vec::new();
        write_stats_csv(&stats, &["a".into(), "b".into()], &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), "class,avg_mrc,miss_rate,frequency,avg_object_height,leaf_depth");
        assert!(text.contains("a,6,0,"));
    }

    #[test]
    fn single_class_uniform_stats() {
        let map = MrcMap {
            values: Array2::from_elem((3, 3), MrcValue::Size(5)),
        };
        let stats = mrc_class_stats(&[map], &[Array2::zeros((3, 3))], 1, None).unwrap();
        assert_eq!(stats[0].avg_mrc, Some(5.0));
        assert_eq!(stats[0].miss_rate, Some(0.0));
    }

    #[test]
    fn default_class_tie_and_candidate() {
        let row = |class, avg: f64, frequency| ClassMrcStats {
            class,
            avg_mrc: Some(avg),
            miss_rate: Some(0.0),
            frequency,
            avg_object_height: None,
            leaf_depth: Some(class),
            pixels: 1,
        };
        let tie = default_class_report(&[row(0, 3.0, 0.5), row(1, 3.0, 0.5)], None).unwrap();
        assert!(tie.tie);
        assert_eq!(tie.candidate, None);
        let rep = default_class_report(&[row(0, 9.0, 0.6), row(1, 2.0, 0.3), row(2, 5.0, 0.1)], None).unwrap();
        assert_eq!(rep.candidate, Some(1));
        assert_eq!(rep.candidate_not_most_frequent, Some(true));
        assert_eq!(rep.candidate_depth_at_most_median, Some(true));
        assert_eq!(rep.rows[0].mrc_rank, Some(3));
        assert_eq!(rep.rows[0].frequency_rank, 1);
    }

    fn exhaustive(
        model: &dyn Segmenter,
        img: &Array3<f32>,
        target: &Array2<u16>,
        ignore: Option<&Array2<bool>>,
        x: usize,
        y: usize,
        cfg: &MrcConfig,
    ) -> MrcValue {
        let ok: Vec<usize> = (1..=cfg.n)
            .map(|i| i * cfg.beta)
            .filter(|&m| {
                let crop = gather_oracle(img, x, y, m);
                let pred = model.segment(crop.view()).unwrap();
                pred[[m / 2, m / 2]] == target[[y, x]]
            })
            .collect();
        if ignore.is_some_and(|ig| ig[[y, x]]) {
            return MrcValue::Ignore;
        }
        ok.first().map_or(MrcValue::Miss, |&m| MrcValue::Size(m))
    }

    #[test]
    fn maps_match_exhaustive_oracle() {
        let mut mc = ModelConfig::new(3, 5);
        mc.min_input = 1;
        let net = Network::<f32>::new(mc).unwrap();
        let img = random_image(16, 16, 6);
        let mut rng = rng_for(7, &[]);
        let label = Array2::from_shape_simple_fn((16, 16), || rng.gen_range(0..3u16));
        let ignore = Array2::from_shape_simple_fn((16, 16), || rng.gen_bool(0.1));
        let cfg = MrcConfig {
            beta: 3,
            n: 5,
            ..Default::default()
        };
        let map = mrc_map(&net, img.view(), label.view(), ignore.view(), &cfg).unwrap();
        let full = net.predict(img.view()).unwrap();
        let umap = umrc_map(&net, img.view(), &cfg, false).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(map.values[[y, x]], exhaustive(&net, &img, &label, Some(&ignore), x, y, &cfg));
                assert_eq!(umap.values[[y, x]], exhaustive(&net, &img, &full, None, x, y, &cfg));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn crops_match_gather(h in 1usize..12, w in 1usize..12, m in 1usize..20, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let img = random_image(h, w, (h * 31 + w) as u64);
            let (x, y) = (((w as f64) * fx) as usize % w, ((h as f64) * fy) as usize % h);
            let got = extract_crop(img.view(), CropSpec { x, y, size: m }, PaddingPolicy::Clamp).unwrap();
            prop_assert_eq!(got, gather_oracle(&img, x, y, m));
        }
    }
}
