//! Directory layout:
//!
//! ```text
//! manifest.json
//! images/{idx}.png   8-bit RGB
//! labels/{idx}.png   16-bit gray, class id
//! parts/{idx}.png    16-bit gray, part id + 1 (0 = no part)
//! ignore/{idx}.png   16-bit gray, 0/1
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Dataset, PartInfo, SceneSpec, SegmentationSample, NO_PART};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec: SceneSpec,
    classes: Vec<String>,
    parts: Vec<PartInfo>,
    samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    index: usize,
    image: String,
    label: String,
    parts: String,
    ignore: String,
}

fn write_gray16(path: &Path, values: impl Iterator<Item = u16>, h: usize, w: usize) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, values.collect()).expect("buffer sized from the mask");
    buf.save(path)?;
    Ok(())
}

fn read_gray16(path: &Path, h: usize, w: usize) -> Result<Array2<u16>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.into_luma16();
    if img.dimensions() != (w as u32, h as u32) {
        return Err(Error::CorruptManifest(format!("{} is not {w}x{h}", path.display())));
    }
    Ok(Array2::from_shape_vec((h, w), img.into_raw()).expect("dimensions checked"))
}

/// Writes the dataset under `dir` and returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "labels", "parts", "ignore"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let (h, w) = s.label.dim();
        let entry = SampleEntry {
            index: i,
            image: format!("images/{i}.png"),
            label: format!("labels/{i}.png"),
            parts: format!("parts/{i}.png"),
            ignore: format!("ignore/{i}.png"),
        };
        let rgb: Vec<u8> = s.image.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(w as u32, h as u32, rgb).expect("buffer sized from the image");
        buf.save(dir.join(&entry.image))?;
        write_gray16(&dir.join(&entry.label), s.label.iter().copied(), h, w)?;
        write_gray16(&dir.join(&entry.parts), s.parts.iter().map(|&p| (p + 1) as u16), h, w)?;
        write_gray16(&dir.join(&entry.ignore), s.ignore.iter().map(|&b| b as u16), h, w)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: dataset.spec.clone(),
        classes: dataset.class_names.clone(),
        parts: dataset.parts.clone(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::CorruptManifest(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::CorruptManifest(format!("unsupported version {}", manifest.version)));
    }
    if manifest.classes.len() != manifest.spec.classes.len() {
        return Err(Error::CorruptManifest("class list does not match spec".into()));
    }
    let (h, w) = (manifest.spec.height, manifest.spec.width);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image_path = dir.join(&entry.image);
        if !image_path.exists() {
            return Err(Error::MissingFile(image_path));
        }
        let rgb = image::open(&image_path)?.into_rgb8();
        if rgb.dimensions() != (w as u32, h as u32) {
            return Err(Error::CorruptManifest(format!("{} is not {w}x{h}", image_path.display())));
        }
        let image = Array3::from_shape_vec((h, w, 3), rgb.into_raw())
            .expect("dimensions checked")
            .mapv(|v| v as f32 / 255.0);
        let label = read_gray16(&dir.join(&entry.label), h, w)?;
        let parts = read_gray16(&dir.join(&entry.parts), h, w)?.mapv(|p| p as i32 - 1);
        debug_assert!(parts.iter().all(|&p| p >= NO_PART));
        let ignore = read_gray16(&dir.join(&entry.ignore), h, w)?.mapv(|v| v != 0);
        samples.push(SegmentationSample {
            image,
            label,
            parts,
            ignore,
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        class_names: manifest.classes,
        parts: manifest.parts,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    #[test]
    fn round_trip_is_exact() {
        let mut spec = SceneSpec::default_scene(21);
        spec.ignore_border = 1;
        let ds = generate_dataset(&spec, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        assert!(manifest.ends_with(MANIFEST_FILE));
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn manifest_exposes_class_names() {
        let mut spec = SceneSpec::default_scene(2);
        spec.classes.truncate(3);
        spec.classes[1].name = "vehicle".into();
        spec.classes[2].name = "person".into();
        let ds = generate_dataset(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.class_names, ["background", "vehicle", "person"]);
        assert_eq!(back.num_classes(), 3);
    }

    #[test]
    fn empty_directory_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::CorruptManifest(_))));
    }

    #[test]
    fn missing_sample_file_is_reported() {
        let ds = generate_dataset(&SceneSpec::default_scene(3), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("parts/1.png")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
    }
}
