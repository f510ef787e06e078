//! Image decoding and labeled-manifest parsing.

use std::fs;
use std::path::{Path, PathBuf};

use cactus_core::pipeline::{self, RawImage};
use cactus_core::Tensor;

use crate::error::{EdgeError, Result};

/// Decodes a PNG or JPEG file into 8-bit RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|source| EdgeError::Io { path: path.to_path_buf(), source })?
        .with_guessed_format()
        .map_err(|source| EdgeError::Io { path: path.to_path_buf(), source })?
        .decode()
        .map_err(|source| EdgeError::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RawImage::rgb(w as usize, h as usize, img.into_raw())?)
}

/// Loads and resizes an image for a model expecting `[1, h, w, 3]`.
pub fn load_input(path: impl AsRef<Path>, input_shape: [usize; 4]) -> Result<Tensor> {
    let raw = load_image(path)?;
    Ok(pipeline::preprocess_to(&raw, input_shape[1], input_shape[2])?)
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(path: impl AsRef<Path>, img: &RawImage) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|source| EdgeError::Image { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
}

/// Reads `relative-path<TAB>label` lines. Paths resolve against the
/// manifest's directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EdgeError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(rel), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(EdgeError::Manifest { line: i + 1, reason: "expected `path<TAB>label`".into() });
        };
        let (rel, label) = (rel.trim(), label.trim());
        if rel.is_empty() || label.is_empty() {
            return Err(EdgeError::Manifest { line: i + 1, reason: "empty path or label".into() });
        }
        entries.push(ManifestEntry { path: base.join(rel), label: label.to_string() });
    }
    if entries.is_empty() {
        return Err(EdgeError::Core(cactus_core::Error::EmptyDataset));
    }
    Ok(entries)
}

/// Fails with every missing file listed when any entry does not exist.
pub fn check_entries(entries: &[ManifestEntry]) -> Result<()> {
    let missing: Vec<PathBuf> = entries.iter().filter(|e| !e.path.is_file()).map(|e| e.path.clone()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(EdgeError::MissingImages(missing))
    }
}
