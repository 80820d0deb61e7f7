//! Semantic input removal: rank object parts by how much removing them
//! hurts one node's routing decision.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::InducedHierarchy;
use crate::model::Network;
use crate::mrc::csv_err;
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::synth::{SegmentationSample, NO_PART};
use crate::tree::hard_path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RemovalMode {
    /// Permutes pixels within each connected instance of the part.
    Shuffle { seed: u64 },
    /// Permutes pixels across all instances of the part in the image.
    ShuffleClass { seed: u64 },
    Zero,
}

impl RemovalMode {
    pub fn name(&self) -> &'static str {
        match self {
            RemovalMode::Shuffle { .. } => "shuffle",
            RemovalMode::ShuffleClass { .. } => "shuffle_class",
            RemovalMode::Zero => "zero",
        }
    }

    /// Same mode with the shuffle seed specialised to one `(image, part)`.
    fn for_task(&self, image: usize, part: i32) -> RemovalMode {
        match *self {
            RemovalMode::Shuffle { seed } => RemovalMode::Shuffle {
                seed: derive_seed(seed, &[image as u64, part as u64]),
            },
            RemovalMode::ShuffleClass { seed } => RemovalMode::ShuffleClass {
                seed: derive_seed(seed, &[image as u64, part as u64]),
            },
            RemovalMode::Zero => RemovalMode::Zero,
        }
    }
}

/// 4-connected components of `mask`, each listed in row-major order.
pub fn connected_components(mask: ArrayView2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if seen[[y0, x0]] || !mask[[y0, x0]] {
                continue;
            }
            seen[[y0, x0]] = true;
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(y0, x0)]);
            while let Some((y, x)) = queue.pop_front() {
                comp.push((y, x));
                for (ny, nx) in [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)] {
                    if ny < h && nx < w && !seen[[ny, nx]] && mask[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
    }
    out
}

fn permute(out: &mut Array3<f32>, image: ArrayView3<f32>, pixels: &[(usize, usize)], seed: u64, stream: u64) {
    let mut order = pixels.to_vec();
    order.shuffle(&mut rng_for(seed, &[stream]));
    for (&(ty, tx), &(sy, sx)) in pixels.iter().zip(&order) {
        out.slice_mut(s![ty, tx, ..]).assign(&image.slice(s![sy, sx, ..]));
    }
}

/// Removes the masked pixels of an `(H, W, 3)` image. Shuffle permutes the
/// RGB vectors within each connected piece of the mask.
pub fn remove_part(image: ArrayView3<f32>, mask: ArrayView2<bool>, mode: RemovalMode) -> Result<Array3<f32>> {
    let (h, w, _) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::InvalidArgument(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dim()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    let mut out = image.to_owned();
    match mode {
        RemovalMode::Zero => {
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    out.slice_mut(s![y, x, ..]).fill(0.0);
                }
            }
        }
        RemovalMode::Shuffle { seed } => {
            for (k, comp) in connected_components(mask).into_iter().enumerate() {
                permute(&mut out, image, &comp, seed, k as u64);
            }
        }
        RemovalMode::ShuffleClass { seed } => {
            let pixels: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &m)| m).map(|(p, _)| p).collect();
            permute(&mut out, image, &pixels, seed, 0);
        }
    }
    Ok(out)
}

/// Correct and total routed pixels of `node` in one image. A routed pixel
/// is correct when the child it is sent to contains its label.
pub fn node_decision_counts<T: Scalar>(
    net: &Network<T>,
    h: &InducedHierarchy,
    node: usize,
    image: ArrayView3<f32>,
    label: ArrayView2<u16>,
    ignore: ArrayView2<bool>,
) -> Result<(usize, usize)> {
    let n = h.nodes.get(node).ok_or(Error::InvalidArgument(format!("no node {node}")))?;
    if n.is_leaf() {
        return Err(Error::LeafHasNoChildren(node));
    }
    let features = net.features(image)?;
    let (_, height, width) = features.dim();
    let (mut correct, mut routed) = (0, 0);
    for y in 0..height {
        for x in 0..width {
            if ignore[[y, x]] {
                continue;
            }
            let f: Vec<f64> = features.slice(s![.., y, x]).iter().map(|v| v.as_f64()).collect();
            let path = hard_path(h, &f)?;
            if let Some(step) = path.steps.iter().find(|st| st.node == node) {
                routed += 1;
                let child = &h.nodes[n.children[step.chosen]];
                if child.class_set.contains(&(label[[y, x]] as usize)) {
                    correct += 1;
                }
            }
        }
    }
    Ok((correct, routed))
}

fn ratio(correct: usize, routed: usize) -> f64 {
    if routed == 0 {
        0.0
    } else {
        correct as f64 / routed as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartDamage {
    pub part_id: i32,
    pub baseline: f64,
    pub removed: f64,
    pub damage: f64,
    pub pixels: usize,
    pub damage_per_pixel: f64,
    /// Images containing the part.
    pub images: usize,
}

/// Accuracy damage of removing `part` from every image that contains it.
/// Both accuracies are micro-averages over the routed pixels of those
/// images.
pub fn accuracy_damage<T: Scalar>(
    net: &Network<T>,
    h: &InducedHierarchy,
    node: usize,
    samples: &[SegmentationSample],
    part: i32,
    mode: RemovalMode,
) -> Result<PartDamage> {
    if h.nodes.get(node).is_some_and(|n| n.is_leaf()) {
        return Err(Error::LeafHasNoChildren(node));
    }
    let tasks: Vec<(usize, Array2<bool>)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.parts.mapv(|p| p == part && p != NO_PART)))
        .filter(|(_, m)| m.iter().any(|&b| b))
        .collect();
    if tasks.is_empty() {
        return Err(Error::PartAbsent(part));
    }
    let counts = tasks
        .par_iter()
        .map(|(i, mask)| {
            let s = &samples[*i];
            let base = node_decision_counts(net, h, node, s.image.view(), s.label.view(), s.ignore.view())?;
            let img = remove_part(s.image.view(), mask.view(), mode.for_task(*i, part))?;
            let removed = node_decision_counts(net, h, node, img.view(), s.label.view(), s.ignore.view())?;
            Ok((base, removed, mask.iter().filter(|&&b| b).count()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut bc, mut br, mut rc, mut rr, mut pixels) = (0, 0, 0, 0, 0);
    for ((c0, r0), (c1, r1), p) in counts {
        bc += c0;
        br += r0;
        rc += c1;
        rr += r1;
        pixels += p;
    }
    let baseline = ratio(bc, br);
    let removed = ratio(rc, rr);
    let damage = baseline - removed;
    Ok(PartDamage {
        part_id: part,
        baseline,
        removed,
        damage,
        pixels,
        damage_per_pixel: damage / pixels as f64,
        images: tasks.len(),
    })
}

/// Part ids present anywhere in `samples`, ascending.
pub fn parts_present(samples: &[SegmentationSample]) -> Vec<i32> {
    let set: BTreeSet<i32> = samples
        .iter()
        .flat_map(|s| s.parts.iter().copied().filter(|&p| p != NO_PART))
        .collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPart {
    pub damage: PartDamage,
    /// 1-based rank by raw damage.
    pub rank_raw: usize,
    /// 1-based rank by damage per pixel.
    pub rank_per_pixel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineRule {
    pub node: usize,
    pub mode: RemovalMode,
    /// Sorted by damage per pixel, descending, ties by part id.
    pub parts: Vec<RankedPart>,
}

impl FineRule {
    /// Part ids ordered by raw damage.
    pub fn raw_order(&self) -> Vec<i32> {
        let mut v: Vec<&RankedPart> = self.parts.iter().collect();
        v.sort_by_key(|p| p.rank_raw);
        v.into_iter().map(|p| p.damage.part_id).collect()
    }

    pub fn per_pixel_order(&self) -> Vec<i32> {
        self.parts.iter().map(|p| p.damage.part_id).collect()
    }
}

fn order_by(damages: &[PartDamage], key: impl Fn(&PartDamage) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..damages.len()).collect();
    idx.sort_by(|&a, &b| {
        key(&damages[b])
            .total_cmp(&key(&damages[a]))
            .then(damages[a].part_id.cmp(&damages[b].part_id))
    });
    idx
}

/// Ranks already computed damages.
pub fn rank_parts(node: usize, mode: RemovalMode, damages: Vec<PartDamage>) -> Result<FineRule> {
    if damages.len() < 2 {
        return Err(Error::InsufficientParts(damages.len()));
    }
    let raw = order_by(&damages, |d| d.damage);
    let mut rank_raw = vec![0; damages.len()];
    for (r, &i) in raw.iter().enumerate() {
        rank_raw[i] = r + 1;
    }
    let per_pixel = order_by(&damages, |d| d.damage_per_pixel);
    let parts = per_pixel
        .iter()
        .enumerate()
        .map(|(r, &i)| RankedPart {
            damage: damages[i].clone(),
            rank_raw: rank_raw[i],
            rank_per_pixel: r + 1,
        })
        .collect();
    Ok(FineRule { node, mode, parts })
}

/// Damage of every candidate part (all present parts when `None`), ranked.
pub fn fine_rule<T: Scalar>(
    net: &Network<T>,
    h: &InducedHierarchy,
    node: usize,
    samples: &[SegmentationSample],
    candidates: Option<&[i32]>,
    mode: RemovalMode,
) -> Result<FineRule> {
    let parts = match candidates {
        Some(c) => c.to_vec(),
        None => parts_present(samples),
    };
    if parts.len() < 2 {
        return Err(Error::InsufficientParts(parts.len()));
    }
    let damages = parts
        .iter()
        .map(|&p| accuracy_damage(net, h, node, samples, p, mode))
        .collect::<Result<Vec<_>>>()?;
    rank_parts(node, mode, damages)
}

/// Writes `sir_ranking.csv` rows for any number of rules.
pub fn write_ranking_csv(rules: &[FineRule], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "node",
        "part",
        "mode",
        "baseline",
        "removed",
        "damage",
        "pixels",
        "damage_per_pixel",
        "rank_raw",
        "rank_per_pixel",
    ])
    .map_err(csv_err)?;
    for rule in rules {
        for p in &rule.parts {
            let d = &p.damage;
            w.write_record([
                rule.node.to_string(),
                d.part_id.to_string(),
                rule.mode.name().to_string(),
                d.baseline.to_string(),
                d.removed.to_string(),
                d.damage.to_string(),
                d.pixels.to_string(),
                d.damage_per_pixel.to_string(),
                p.rank_raw.to_string(),
                p.rank_per_pixel.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Side-by-side damages of the same parts under two removal modes, one
/// `(a, b)` pair of rules per node.
pub fn write_mode_comparison_csv(
    pairs: &[(&FineRule, &FineRule)],
    part_names: &BTreeMap<i32, String>,
    out: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (ma, mb) = match pairs.first() {
        Some((a, b)) => (a.mode.name(), b.mode.name()),
        None => ("a", "b"),
    };
    w.write_record(vec![
        "node".to_string(),
        "part".into(),
        "part_name".into(),
        "baseline".into(),
        format!("removed_{ma}"),
        format!("removed_{mb}"),
        format!("damage_{ma}"),
        format!("damage_{mb}"),
        format!("damage_per_pixel_{ma}"),
        format!("damage_per_pixel_{mb}"),
    ])
    .map_err(csv_err)?;
    for (a, b) in pairs {
        if a.node != b.node || a.mode.name() != ma || b.mode.name() != mb {
            return Err(Error::InvalidArgument("mode comparison pairs must share node and modes".into()));
        }
        let mut ids: Vec<i32> = a.per_pixel_order();
        ids.sort_unstable();
        for id in ids {
            let da = &a.parts.iter().find(|p| p.damage.part_id == id).expect("listed").damage;
            let Some(db) = b.parts.iter().find(|p| p.damage.part_id == id).map(|p| &p.damage) else {
                continue;
            };
            w.write_record([
                a.node.to_string(),
                id.to_string(),
                part_names.get(&id).cloned().unwrap_or_default(),
                da.baseline.to_string(),
                da.removed.to_string(),
                db.removed.to_string(),
                da.damage.to_string(),
                db.damage.to_string(),
                da.damage_per_pixel.to_string(),
                db.damage_per_pixel.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_dataset, SceneSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn histogram(image: &Array3<f32>, mask: &Array2<bool>, channel: usize) -> Vec<u32> {
        let mut v: Vec<u32> = mask
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|((y, x), _)| image[[y, x, channel]].to_bits())
            .collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn constant_region_shuffle_is_identity() {
        let mut img = Array3::<f32>::from_shape_fn((6, 6, 3), |(y, x, c)| (y * 7 + x * 3 + c) as f32 / 100.0);
        let mask = Array2::from_shape_fn((6, 6), |(y, x)| (1..4).contains(&y) && (2..5).contains(&x));
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                img.slice_mut(s![y, x, ..]).assign(&ndarray::arr1(&[0.5, 0.25, 0.75]));
            }
        }
        let out = remove_part(img.view(), mask.view(), RemovalMode::Shuffle { seed: 3 }).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn zero_mode_clears_only_the_mask() {
        let img = Array3::<f32>::from_elem((4, 5, 3), 0.6);
        let mask = Array2::from_shape_fn((4, 5), |(y, x)| y == 1 && x > 1);
        let out = remove_part(img.view(), mask.view(), RemovalMode::Zero).unwrap();
        for ((y, x, _), &v) in out.indexed_iter() {
            assert_eq!(v, if mask[[y, x]] { 0.0 } else { 0.6 });
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let img = Array3::<f32>::zeros((3, 3, 3));
        let mask = Array2::from_elem((3, 3), false);
        assert!(matches!(remove_part(img.view(), mask.view(), RemovalMode::Zero), Err(Error::EmptyMask)));
    }

    #[test]
    fn shuffle_stays_within_each_instance() {
        // Two instances with different constant colours never mix.
        let mut img = Array3::<f32>::zeros((4, 8, 3));
        img.slice_mut(s![.., 0..3, ..]).fill(0.2);
        img.slice_mut(s![.., 5..8, ..]).fill(0.9);
        let mask = Array2::from_shape_fn((4, 8), |(_, x)| x != 3 && x != 4);
        let out = remove_part(img.view(), mask.view(), RemovalMode::Shuffle { seed: 1 }).unwrap();
        assert_eq!(out, img);
        assert_eq!(connected_components(mask.view()).len(), 2);
    }

    #[test]
    fn class_shuffle_mixes_instances() {
        let mut img = Array3::<f32>::zeros((4, 8, 3));
        img.slice_mut(s![.., 0..3, ..]).fill(0.2);
        img.slice_mut(s![.., 5..8, ..]).fill(0.9);
        let mask = Array2::from_shape_fn((4, 8), |(_, x)| x != 3 && x != 4);
        let out = remove_part(img.view(), mask.view(), RemovalMode::ShuffleClass { seed: 1 }).unwrap();
        assert_ne!(out, img);
        for c in 0..3 {
            assert_eq!(histogram(&img, &mask, c), histogram(&out, &mask, c));
        }
        assert_eq!(out.slice(s![.., 3..5, ..]), img.slice(s![.., 3..5, ..]));
    }

    proptest! {
        #[test]
        fn shuffle_preserves_histograms(seed in 0u64..1000, density in 0.1f64..0.9) {
            let mut rng = rng_for(seed, &[]);
            let img = Array3::from_shape_simple_fn((9, 11, 3), || rng.gen::<f32>());
            let mut mask = Array2::from_shape_simple_fn((9, 11), || rng.gen_bool(density));
            mask[[4, 4]] = true;
            let out = remove_part(img.view(), mask.view(), RemovalMode::Shuffle { seed }).unwrap();
            for c in 0..3 {
                prop_assert_eq!(histogram(&img, &mask, c), histogram(&out, &mask, c));
            }
            for ((y, x, c), &v) in out.indexed_iter() {
                if !mask[[y, x]] {
                    prop_assert_eq!(v.to_bits(), img[[y, x, c]].to_bits());
                }
            }
            let again = remove_part(img.view(), mask.view(), RemovalMode::Shuffle { seed }).unwrap();
            prop_assert_eq!(out, again);
        }
    }

    fn damage(id: i32, damage: f64, pixels: usize) -> PartDamage {
        PartDamage {
            part_id: id,
            baseline: 0.9,
            removed: 0.9 - damage,
            damage,
            pixels,
            damage_per_pixel: damage / pixels as f64,
            images: 1,
        }
    }

    #[test]
    fn per_pixel_ranking_favours_small_parts() {
        let rule = rank_parts(0, RemovalMode::Zero, vec![damage(1, 0.2, 100), damage(2, 0.2, 10)]).unwrap();
        assert_eq!(rule.per_pixel_order(), vec![2, 1]);
        assert_eq!(rule.raw_order(), vec![1, 2]);
        let ratio = rule.parts[0].damage.damage_per_pixel / rule.parts[1].damage.damage_per_pixel;
        assert!((ratio - 10.0).abs() < 1e-12);
        assert!(matches!(
            rank_parts(0, RemovalMode::Zero, vec![damage(1, 0.1, 1)]),
            Err(Error::InsufficientParts(1))
        ));
    }

    #[test]
    fn negative_damage_ranks_last() {
        let rule = rank_parts(0, RemovalMode::Zero, vec![damage(1, -0.1, 10), damage(2, 0.0, 10), damage(3, 0.05, 50)])
            .unwrap();
        assert_eq!(rule.per_pixel_order(), vec![3, 2, 1]);
    }

    fn small_model(seed: u64) -> (Network<f64>, InducedHierarchy, Vec<SegmentationSample>) {
        let mut spec = SceneSpec::default_scene(seed);
        spec.height = 32;
        spec.width = 32;
        let data = generate_dataset(&spec, 3).unwrap();
        let net = Network::<f64>::new(ModelConfig::new(spec.num_classes(), seed)).unwrap();
        let h = InducedHierarchy::induce(net.final_layer_weights()).unwrap();
        (net, h, data.samples)
    }

    #[test]
    fn removal_outside_the_receptive_field_does_nothing() {
        let (net, h, samples) = small_model(4);
        let radius = net.config().receptive_radius();
        let mut s = samples[0].clone();
        // Only the top-left pixel is evaluated; the part sits beyond its reach.
        s.ignore = Array2::from_shape_fn(s.label.dim(), |(y, x)| (y, x) != (0, 0));
        s.parts.fill(NO_PART);
        s.parts[[radius + 1, radius + 1]] = 99;
        s.parts[[31, 31]] = 99;
        let d = accuracy_damage(&net, &h, h.root_id, &[s], 99, RemovalMode::Zero).unwrap();
        assert_eq!(d.damage, 0.0);
        assert_eq!(d.pixels, 2);
    }

    #[test]
    fn fine_rule_matches_independent_damages() {
        let (net, h, samples) = small_model(5);
        let mode = RemovalMode::Shuffle { seed: 11 };
        let present = parts_present(&samples);
        let rule = fine_rule(&net, &h, h.root_id, &samples, None, mode).unwrap();
        let mut oracle: Vec<PartDamage> = present
            .iter()
            .map(|&p| accuracy_damage(&net, &h, h.root_id, &samples, p, mode).unwrap())
            .collect();
        oracle.sort_by(|a, b| {
            b.damage_per_pixel
                .partial_cmp(&a.damage_per_pixel)
                .unwrap()
                .then(a.part_id.cmp(&b.part_id))
        });
        let got: Vec<PartDamage> = rule.parts.iter().map(|p| p.damage.clone()).collect();
        assert_eq!(got, oracle);
        assert_eq!(rule, fine_rule(&net, &h, h.root_id, &samples, None, mode).unwrap());
        assert!(matches!(
            accuracy_damage(&net, &h, h.root_id, &samples, 4242, mode),
            Err(Error::PartAbsent(4242))
        ));

        let mut buf = Vec::new();
        write_ranking_csv(&[rule.clone()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("node,part,mode,baseline,removed,damage,pixels,damage_per_pixel,rank_raw,rank_per_pixel\n"));
        assert_eq!(text.lines().count(), present.len() + 1);
    }
}
