use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::{ClassSpec, ColorSpec, Pattern, SceneSpec, SegmentationSample, Shape, NO_PART};

struct Canvas {
    rgb: Array3<f64>,
    label: Array2<u16>,
    parts: Array2<i32>,
}

fn jittered(rgb: [f64; 3], jitter: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    if jitter <= 0.0 {
        return rgb;
    }
    let n = Normal::new(0.0, jitter).expect("finite jitter");
    let mut out = rgb;
    for v in &mut out {
        *v += n.sample(rng);
    }
    out
}

fn pattern_pick(pattern: Pattern, dy: usize, dx: usize) -> bool {
    match pattern {
        Pattern::Solid => true,
        Pattern::HStripes { period } => (dy / period.max(1)) % 2 == 0,
        Pattern::VStripes { period } => (dx / period.max(1)) % 2 == 0,
        Pattern::Checker { cell } => (dy / cell.max(1) + dx / cell.max(1)) % 2 == 0,
    }
}

/// Paints every part of `class` into the object box `(ox, oy, w, h)`.
fn paint_object(canvas: &mut Canvas, class: &ClassSpec, ox: usize, oy: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) {
    let (ch, cw) = canvas.label.dim();
    for part in &class.parts {
        let ColorSpec {
            primary,
            secondary,
            pattern,
            jitter,
        } = &part.color;
        let a = jittered(*primary, *jitter, rng);
        let b = jittered(*secondary, *jitter, rng);
        for rel in &part.placements {
            let px0 = ox + (rel.x0 * w as f64).round() as usize;
            let py0 = oy + (rel.y0 * h as f64).round() as usize;
            let px1 = (ox + (rel.x1 * w as f64).round() as usize).max(px0 + 1).min(cw);
            let py1 = (oy + (rel.y1 * h as f64).round() as usize).max(py0 + 1).min(ch);
            if px0 >= cw || py0 >= ch {
                continue;
            }
            let cx = (px0 + px1) as f64 / 2.0;
            let cy = (py0 + py1) as f64 / 2.0;
            let rx = (px1 - px0) as f64 / 2.0;
            let ry = (py1 - py0) as f64 / 2.0;
            for y in py0..py1 {
                for x in px0..px1 {
                    if part.shape == Shape::Ellipse {
                        let ex = (x as f64 + 0.5 - cx) / rx;
                        let ey = (y as f64 + 0.5 - cy) / ry;
                        if ex * ex + ey * ey > 1.0 {
                            continue;
                        }
                    }
                    let color = if pattern_pick(*pattern, y - py0, x - px0) { a } else { b };
                    for (k, &v) in color.iter().enumerate() {
                        canvas.rgb[[y, x, k]] = v;
                    }
                    canvas.label[[y, x]] = class.class_id as u16;
                    canvas.parts[[y, x]] = part.part_id;
                }
            }
        }
    }
}

fn boundary_ignore(label: &Array2<u16>, width: usize) -> Array2<bool> {
    let (h, w) = label.dim();
    let mut ignore = Array2::from_elem((h, w), false);
    if width == 0 {
        return ignore;
    }
    let mut edge = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = label[[y, x]];
            let differs = (y > 0 && label[[y - 1, x]] != l)
                || (y + 1 < h && label[[y + 1, x]] != l)
                || (x > 0 && label[[y, x - 1]] != l)
                || (x + 1 < w && label[[y, x + 1]] != l);
            if differs {
                edge.push((y, x));
            }
        }
    }
    let r = width - 1;
    for (y, x) in edge {
        for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                ignore[[yy, xx]] = true;
            }
        }
    }
    ignore
}

pub(super) fn render_sample(spec: &SceneSpec, seed: u64) -> SegmentationSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let bg = spec.background_class_id;
    let mut canvas = Canvas {
        rgb: Array3::zeros((h, w, 3)),
        label: Array2::from_elem((h, w), bg as u16),
        parts: Array2::from_elem((h, w), NO_PART),
    };
    paint_object(&mut canvas, &spec.classes[bg], 0, 0, w, h, &mut rng);

    let objects: Vec<&ClassSpec> = spec.classes.iter().filter(|c| c.class_id != bg).collect();
    let n = rng.gen_range(spec.objects_per_image.min..=spec.objects_per_image.max);
    if !objects.is_empty() {
        for _ in 0..n {
            let class = objects[rng.gen_range(0..objects.len())];
            let s = class.size;
            let ow = rng.gen_range(s.min_w..=s.max_w).min(w);
            let oh = rng.gen_range(s.min_h..=s.max_h).min(h);
            let ox = rng.gen_range(0..=w - ow);
            let oy = rng.gen_range(0..=h - oh);
            paint_object(&mut canvas, class, ox, oy, ow, oh, &mut rng);
        }
    }

    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("finite noise"));
    let image = canvas.rgb.mapv(|v| {
        let v = match &noise {
            Some(n) => v + n.sample(&mut rng),
            None => v,
        };
        (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
    });
    let ignore = boundary_ignore(&canvas.label, spec.ignore_border);
    SegmentationSample {
        image,
        label: canvas.label,
        parts: canvas.parts,
        ignore,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns_alternate() {
        assert!(pattern_pick(Pattern::HStripes { period: 2 }, 0, 5));
        assert!(pattern_pick(Pattern::HStripes { period: 2 }, 1, 5));
        assert!(!pattern_pick(Pattern::HStripes { period: 2 }, 2, 5));
        assert!(!pattern_pick(Pattern::VStripes { period: 1 }, 0, 1));
        assert!(pattern_pick(Pattern::Checker { cell: 1 }, 1, 1));
        assert!(!pattern_pick(Pattern::Checker { cell: 1 }, 0, 1));
    }

    #[test]
    fn boundary_ignore_width_one() {
        let mut label = Array2::zeros((6, 6));
        label[[2, 2]] = 1;
        let ig = boundary_ignore(&label, 1);
        assert!(ig[[2, 2]] && ig[[1, 2]] && ig[[2, 3]]);
        assert!(!ig[[0, 0]] && !ig[[1, 1]]);
    }
}
