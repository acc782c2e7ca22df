//! Image and label file IO. PNG and binary PPM are read; PNG is written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage as Buffer};
use stainvar::RgbImage;

use crate::error::{CliError, CliResult};

const EXTENSIONS: [&str; 2] = ["png", "ppm"];

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn read_rgb(path: &Path) -> CliResult<RgbImage> {
    let img = image::open(path).map_err(|e| CliError::Image { path: path.to_owned(), message: e.to_string() })?;
    let rgb = img.to_rgb8();
    Ok(RgbImage::from_u8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())?)
}

pub fn write_png(path: &Path, img: &RgbImage) -> CliResult<()> {
    let buf = Buffer::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| CliError::Image { path: path.to_owned(), message: e.to_string() })
}

/// Any nonzero channel marks a positive pixel.
pub fn read_mask(path: &Path) -> CliResult<Vec<bool>> {
    let img = image::open(path).map_err(|e| CliError::Image { path: path.to_owned(), message: e.to_string() })?;
    Ok(img.to_rgb8().pixels().map(|p| p.0.iter().any(|&c| c > 0)).collect())
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Parses `file,label` rows (header required) into a stem → label map.
pub fn read_labels(path: &Path) -> CliResult<BTreeMap<String, usize>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("file,label") {
        return Err(CliError::Config(format!("{}: expected header 'file,label'", path.display())));
    }
    let mut labels = BTreeMap::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || CliError::Config(format!("{}: line {}: expected 'file,label'", path.display(), n + 2));
        let (file, label) = line.split_once(',').ok_or_else(bad)?;
        let label = label.trim().parse().map_err(|_| bad())?;
        labels.insert(stem(Path::new(file.trim())), label);
    }
    Ok(labels)
}

pub fn labels_csv<'a>(rows: impl IntoIterator<Item = (&'a str, usize)>) -> String {
    let mut out = String::from("file,label\n");
    for (file, label) in rows {
        out.push_str(&format!("{file},{label}\n"));
    }
    out
}
