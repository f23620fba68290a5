//! Discovery of MVTec-style dataset trees:
//! `<category>/test/<defect>/*.png`, masks under `<category>/ground_truth/<defect>/`,
//! normal training images under `<category>/train/good/`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const GOOD_DEFECT: &str = "good";
const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSample {
    pub category: String,
    pub defect: String,
    pub path: PathBuf,
    /// `<category>/test/<defect>/<file>`, with forward slashes.
    pub name: String,
    pub anomalous: bool,
    pub mask_path: Option<PathBuf>,
}

impl TestSample {
    /// `<defect>/<file>`: the name relative to the category's test directory.
    pub fn short_name(&self) -> String {
        let file = self.path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        format!("{}/{}", self.defect, file)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub name: String,
    pub root: PathBuf,
    pub test: Vec<TestSample>,
    pub train_good: Vec<PathBuf>,
}

impl Category {
    /// Finds a test sample by full or short name, or by a name ending in either.
    pub fn find(&self, name: &str) -> Option<&TestSample> {
        let name = name.replace('\\', "/");
        self.test
            .iter()
            .find(|s| s.name == name)
            .or_else(|| self.test.iter().find(|s| s.short_name() == name))
            .or_else(|| self.test.iter().find(|s| name.ends_with(&format!("/{}", s.short_name()))))
    }
}

/// `(width, height)` of an image file, read from its header.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path)?;
    Ok((w as usize, h as usize))
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect())
}

fn dir_name(path: &Path) -> String {
    path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

fn violation(path: &Path, reason: impl Into<String>) -> Error {
    Error::LayoutViolation { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads one category directory. Every anomalous test image needs a mask.
pub fn load_category(root: &Path) -> Result<Category> {
    let name = dir_name(root);
    let test_dir = root.join("test");
    if !test_dir.is_dir() {
        return Err(violation(root, "missing test directory"));
    }
    let gt_dir = root.join("ground_truth");
    let mut test = Vec::new();
    for defect_dir in sorted_entries(&test_dir)? {
        if !defect_dir.is_dir() {
            if is_image(&defect_dir) {
                return Err(violation(&defect_dir, "test images must sit in a defect subdirectory"));
            }
            continue;
        }
        let defect = dir_name(&defect_dir);
        let anomalous = defect != GOOD_DEFECT;
        for path in images_in(&defect_dir)? {
            let file = dir_name(&path);
            let mask_path = if anomalous {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let candidates = [
                    gt_dir.join(&defect).join(format!("{stem}_mask.png")),
                    gt_dir.join(&defect).join(format!("{stem}.png")),
                ];
                match candidates.into_iter().find(|c| c.is_file()) {
                    Some(m) => Some(m),
                    None => return Err(Error::MissingMask(path)),
                }
            } else {
                None
            };
            test.push(TestSample {
                category: name.clone(),
                name: format!("{name}/test/{defect}/{file}"),
                defect: defect.clone(),
                path,
                anomalous,
                mask_path,
            });
        }
    }
    if test.is_empty() {
        return Err(violation(&test_dir, "no test images"));
    }
    let train_dir = root.join("train").join(GOOD_DEFECT);
    let train_good = if train_dir.is_dir() { images_in(&train_dir)? } else { Vec::new() };
    Ok(Category { name, root: root.to_path_buf(), test, train_good })
}

/// All categories under `root`, sorted by name. A root that is itself a
/// category (has a `test` directory) yields just that category.
pub fn discover(root: &Path) -> Result<Vec<Category>> {
    if !root.is_dir() {
        return Err(violation(root, "dataset root is not a directory"));
    }
    if root.join("test").is_dir() {
        return Ok(vec![load_category(root)?]);
    }
    let mut out = Vec::new();
    for dir in sorted_entries(root)? {
        if dir.is_dir() && dir.join("test").is_dir() {
            out.push(load_category(&dir)?);
        }
    }
    if out.is_empty() {
        return Err(violation(root, "no category with a test directory"));
    }
    Ok(out)
}
