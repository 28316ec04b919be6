//! Image files on disk: grayscale slices, 0/255 masks, probability maps and
//! palette-indexed label maps.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::data::{BinaryMask, MultiClassMask};
use crate::error::{Error, Result};
use crate::plane::Plane;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Palette for label PNGs: background black, GGO red, consolidation green.
pub const LABEL_PALETTE: [[u8; 3]; 3] = [[0, 0, 0], [255, 0, 0], [0, 255, 0]];

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Image files directly under `dir`, as `(stem, path)` sorted by stem.
/// A missing directory yields an empty list.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    image::open(path).map_err(|e| image_err(path, e))
}

/// Grayscale intensities at the file's native bit depth.
pub fn read_gray_raw(path: &Path) -> Result<Plane<f64>> {
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Plane::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(f64::from).collect(),
    )
}

pub fn read_gray8(path: &Path) -> Result<Plane<u8>> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Plane::new(h as usize, w as usize, img.into_raw())
}

pub fn read_mask(path: &Path, id: &str) -> Result<BinaryMask> {
    BinaryMask::from_gray(id, &read_gray8(path)?)
}

/// 8-bit probability map scaled back to `[0, 1]`.
pub fn read_probability(path: &Path) -> Result<Plane<f64>> {
    Ok(read_gray8(path)?.map(|v| f64::from(v) / 255.0))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn write_gray8(path: &Path, plane: &Plane<u8>) -> Result<()> {
    ensure_parent(path)?;
    let img = image::GrayImage::from_raw(
        plane.width() as u32,
        plane.height() as u32,
        plane.as_slice().to_vec(),
    )
    .expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Quantizes `[0, 1]` values to 8 bits (round to nearest).
pub fn quantize(plane: &Plane<f64>) -> Plane<u8> {
    plane.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn write_probability(path: &Path, plane: &Plane<f64>) -> Result<()> {
    write_gray8(path, &quantize(plane))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_gray8(path, &mask.values().map(|v| v * 255))
}

pub fn write_rgb(path: &Path, width: usize, height: usize, rgb: Vec<u8>) -> Result<()> {
    ensure_parent(path)?;
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb)
        .expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Writes labels as an 8-bit palette PNG whose indices are the class ids.
pub fn write_labels(path: &Path, mask: &MultiClassMask) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let (h, w) = mask.dims();
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(LABEL_PALETTE.concat());
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer
        .write_image_data(mask.values().as_slice())
        .map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Reads a label map stored either as palette indices or as 8-bit gray values.
pub fn read_labels(path: &Path, id: &str) -> Result<MultiClassMask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, e))?;
    let ok = matches!(
        info.color_type,
        png::ColorType::Indexed | png::ColorType::Grayscale
    ) && info.bit_depth == png::BitDepth::Eight;
    if !ok {
        return Err(Error::Validation(format!(
            "label map {} must be 8-bit palette or grayscale, found {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend_from_slice(&row[..w]);
    }
    MultiClassMask::new(id, Plane::new(h, w, data)?)
}
