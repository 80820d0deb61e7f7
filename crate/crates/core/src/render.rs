//! PNG figures: images, label maps, MRC maps, saliency heat maps and
//! horizontal panel strips.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{ArrayView2, ArrayView3};

use crate::error::Result;
use crate::mrc::{MrcMap, MrcValue};

pub const MISS_COLOR: [u8; 3] = [40, 90, 230];
pub const IGNORE_COLOR: [u8; 3] = [128, 128, 128];

const PALETTE: [[u8; 3]; 12] = [
    [60, 60, 60],
    [220, 40, 40],
    [240, 150, 30],
    [70, 130, 230],
    [160, 80, 200],
    [40, 170, 70],
    [240, 220, 60],
    [30, 200, 200],
    [230, 110, 170],
    [140, 100, 60],
    [180, 220, 120],
    [250, 250, 250],
];

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `(H, W, 3)` image in `[0, 1]`.
pub fn render_image(image: ArrayView3<f32>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| to_u8(f64::from(image[[y, x, c]]))))
    })
}

pub fn render_labels(label: ArrayView2<u16>) -> RgbImage {
    let (h, w) = label.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(class_color(label[[y as usize, x as usize]] as usize)))
}

/// Grayscale by crop size relative to `max_size`; MISS and IGNORE get
/// fixed colours.
pub fn render_mrc(map: &MrcMap, max_size: usize) -> RgbImage {
    let (h, w) = map.values.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| match map.values[[y as usize, x as usize]] {
        MrcValue::Size(m) => {
            let g = to_u8(m as f64 / max_size.max(1) as f64);
            Rgb([g, g, g])
        }
        MrcValue::Miss => Rgb(MISS_COLOR),
        MrcValue::Ignore => Rgb(IGNORE_COLOR),
    })
}

/// Black, red, yellow, white ramp over `[0, 1]`.
pub fn hot(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    [to_u8(t), to_u8(t - 1.0), to_u8(t - 2.0)]
}

/// Heat map normalised by its own maximum; an all-zero map renders black.
pub fn render_saliency(values: ArrayView2<f64>) -> RgbImage {
    let (h, w) = values.dim();
    let max = values.iter().copied().fold(0.0, f64::max);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[[y as usize, x as usize]];
        Rgb(hot(if max > 0.0 { v / max } else { 0.0 }))
    })
}

/// Nearest-neighbour enlargement.
pub fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    let f = factor.max(1);
    RgbImage::from_fn(img.width() * f, img.height() * f, |x, y| *img.get_pixel(x / f, y / f))
}

/// Panels side by side, top aligned, separated by `gap` white columns.
pub fn hstack(panels: &[RgbImage], gap: u32) -> RgbImage {
    let width = panels.iter().map(|p| p.width()).sum::<u32>() + gap * panels.len().saturating_sub(1) as u32;
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let mut out = RgbImage::from_pixel(width.max(1), height.max(1), Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width() + gap;
    }
    out
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn mrc_colours() {
        let map = MrcMap {
            values: array![[MrcValue::Size(10), MrcValue::Miss, MrcValue::Ignore]],
        };
        let img = render_mrc(&map, 10);
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(1, 0).0, MISS_COLOR);
        assert_eq!(img.get_pixel(2, 0).0, IGNORE_COLOR);
    }

    #[test]
    fn saliency_is_normalised_at_render_time() {
        let a = array![[0.0, 1.0, 2.0]];
        let b = &a * 7.5;
        assert_eq!(render_saliency(a.view()), render_saliency(b.view()));
        let img = render_saliency(a.view());
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(2, 0).0, [255, 255, 255]);
        let zero = Array2::<f64>::zeros((2, 2));
        assert!(render_saliency(zero.view()).pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn strip_layout_and_png_round_trip() {
        let a = RgbImage::from_pixel(3, 2, Rgb([1, 2, 3]));
        let b = RgbImage::from_pixel(4, 5, Rgb([9, 9, 9]));
        let s = hstack(&[a, upscale(&b, 2)], 1);
        assert_eq!(s.dimensions(), (3 + 1 + 8, 10));
        assert_eq!(s.get_pixel(3, 0).0, [255, 255, 255]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        save_png(&s, &path).unwrap();
        assert_eq!(image::open(&path).unwrap().into_rgb8(), s);
    }

    #[test]
    fn labels_use_the_palette() {
        let img = render_labels(array![[0u16, 1, 13]].view());
        assert_eq!(img.get_pixel(1, 0).0, class_color(1));
        assert_eq!(img.get_pixel(2, 0).0, class_color(1));
    }
}
