//! Filesystem helpers: image tree listing, decoding with typed errors,
//! content hashing and atomic writes.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Result, RsadError};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// One file of a directory-per-class image tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeEntry {
    pub class: String,
    /// `<class>/<file stem>`.
    pub id: String,
    pub path: PathBuf,
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| RsadError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| RsadError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Class directory names under `root`, sorted.
pub fn list_classes(root: &Path) -> Result<Vec<String>> {
    Ok(sorted_dir(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
        .collect())
}

/// Every image below `root/<class>/`, sorted by id.
pub fn list_image_tree(root: &Path) -> Result<Vec<TreeEntry>> {
    let mut out = Vec::new();
    for class in list_classes(root)? {
        for path in sorted_dir(&root.join(&class))? {
            if !path.is_file() || !is_image(&path) {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            out.push(TreeEntry {
                id: format!("{class}/{stem}"),
                class: class.clone(),
                path,
            });
        }
    }
    Ok(out)
}

/// Finds `dir/<id>.<ext>` for any supported extension.
pub fn find_by_id(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| RsadError::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| RsadError::corrupt(path, e.to_string()))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(decode(path)?.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(decode(path)?.to_luma8())
}

pub fn encode_png_rgb(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory png encode");
    buf.into_inner()
}

pub fn encode_png_gray(img: &GrayImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory png encode");
    buf.into_inner()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| RsadError::io(parent, e))?;
    }
    Ok(())
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| RsadError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RsadError::io(path, e))
}
