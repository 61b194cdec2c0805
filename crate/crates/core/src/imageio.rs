//! PNG input/output, heatmap rendering and the raw map archive.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::numfmt;
use crate::{Error, Result};

pub const MAPS_VERSION: &str = "advise-maps/1";

fn image_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// RGB image scaled to `[0, 1]`, shape `[H, W, 3]`. Alpha is dropped and
/// grayscale is expanded.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
        f64::from(img.get_pixel(j as u32, i as u32)[c]) / 255.0
    }))
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_image(image: ArrayView3<'_, f64>) -> Result<RgbImage> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([
            to_u8(image[[i, j, 0]]),
            to_u8(image[[i, j, 1]]),
            to_u8(image[[i, j, 2]]),
        ])
    }))
}

pub fn write_rgb(path: impl AsRef<Path>, image: ArrayView3<'_, f64>) -> Result<()> {
    let path = path.as_ref();
    rgb_to_image(image)?.save(path).map_err(|e| image_error(path, e))
}

/// Writes a `[0, 1]` map as 8-bit grayscale.
pub fn write_gray(path: impl AsRef<Path>, map: ArrayView2<'_, f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(map[[y as usize, x as usize]])]));
    img.save(path).map_err(|e| image_error(path, e))
}

// blue, cyan, green, yellow, red
const RAMP: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.5],
    [0.0, 0.75, 1.0],
    [0.25, 0.9, 0.25],
    [1.0, 0.85, 0.0],
    [0.8, 0.0, 0.0],
];

/// Fixed colour ramp for a value in `[0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * (RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    [
        a[0] + f * (b[0] - a[0]),
        a[1] + f * (b[1] - a[1]),
        a[2] + f * (b[2] - a[2]),
    ]
}

/// Half input, half coloured map.
pub fn overlay(image: ArrayView3<'_, f64>, map: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    let (h, w, c) = image.dim();
    if c != 3 || map.dim() != (h, w) {
        return Err(Error::invalid(format!(
            "overlay of map {:?} on image {:?}",
            map.dim(),
            image.dim()
        )));
    }
    Ok(Array3::from_shape_fn((h, w, 3), |(i, j, k)| {
        0.5 * image[[i, j, k]] + 0.5 * colormap(map[[i, j]])[k]
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMapEntry {
    pub id: String,
    pub score_group: Option<u32>,
    pub units: usize,
    pub shape: [usize; 2],
    pub dtype: String,
    pub byte_order: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawMapManifest {
    pub version: String,
    pub relu_applied: bool,
    pub maps: Vec<RawMapEntry>,
}

/// One raw map for the archive.
pub struct RawMap<'a> {
    pub id: String,
    pub score_group: Option<u32>,
    pub units: usize,
    pub data: ArrayView2<'a, f64>,
}

/// Writes maps as a directory of little-endian f32 blobs plus
/// `manifest.json`.
pub fn write_raw_maps(dir: impl AsRef<Path>, relu_applied: bool, maps: &[RawMap<'_>]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(maps.len());
    for m in maps {
        let file = format!("{}.bin", m.id);
        let mut bytes = Vec::with_capacity(m.data.len() * 4);
        for &x in m.data.iter() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let (h, w) = m.data.dim();
        entries.push(RawMapEntry {
            id: m.id.clone(),
            score_group: m.score_group,
            units: m.units,
            shape: [h, w],
            dtype: "f32".into(),
            byte_order: "LE".into(),
            file,
        });
    }
    let manifest = RawMapManifest {
        version: MAPS_VERSION.into(),
        relu_applied,
        maps: entries,
    };
    numfmt::write_json(dir.join("manifest.json"), &manifest)
}

pub fn read_raw_maps(dir: impl AsRef<Path>) -> Result<(RawMapManifest, Vec<Array2<f32>>)> {
    let dir = dir.as_ref();
    let manifest: RawMapManifest = numfmt::read_json(dir.join("manifest.json"))?;
    if manifest.version != MAPS_VERSION {
        return Err(Error::invalid(format!(
            "{}: version {:?}, expected {MAPS_VERSION:?}",
            dir.display(),
            manifest.version
        )));
    }
    let mut out = Vec::with_capacity(manifest.maps.len());
    for entry in &manifest.maps {
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let [h, w] = entry.shape;
        if bytes.len() != h * w * 4 {
            return Err(Error::invalid(format!(
                "{}: {} bytes for shape [{h}, {w}]",
                path.display(),
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(Array2::from_shape_vec((h, w), data).expect("length checked"));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((5, 7, 3), |(i, j, c)| ((i * 31 + j * 17 + c * 5) % 256) as f64 / 255.0);
        let path = dir.path().join("a.png");
        write_rgb(&path, img.view()).unwrap();
        assert_eq!(read_rgb(&path).unwrap(), img);
    }

    #[test]
    fn ramp_endpoints_and_continuity() {
        assert_eq!(colormap(0.0), RAMP[0]);
        assert_eq!(colormap(1.0), RAMP[4]);
        assert_eq!(colormap(0.5), RAMP[2]);
        let a = colormap(0.25 - 1e-12);
        let b = colormap(0.25 + 1e-12);
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn overlay_blends_half_and_half() {
        let img = Array3::from_elem((2, 2, 3), 1.0);
        let map = Array2::zeros((2, 2));
        let out = overlay(img.view(), map.view()).unwrap();
        assert_eq!(out[[0, 0, 0]], 0.5);
        assert_eq!(out[[0, 0, 2]], 0.75);
    }

    #[test]
    fn raw_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 * 0.5 - j as f64);
        write_raw_maps(
            dir.path(),
            true,
            &[RawMap {
                id: "score_2".into(),
                score_group: Some(2),
                units: 9,
                data: m.view(),
            }],
        )
        .unwrap();
        let (manifest, maps) = read_raw_maps(dir.path()).unwrap();
        assert_eq!(manifest.maps[0].score_group, Some(2));
        assert_eq!(maps[0], m.mapv(|x| x as f32));
    }
}
