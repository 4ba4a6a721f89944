//! Directory-per-class image trees.
//!
//! ```text
//! root/<class name>/<image>.{png,ppm,pgm}
//! ```
//!
//! Class labels follow the sorted order of the class directory names; images
//! within a class are read in sorted file-name order.

use std::path::{Path, PathBuf};

use afd_core::image::ImageRgb;

use crate::error::{AfdError, Result};
use crate::imageio::{is_image_path, read_image, write_image};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub class_names: Vec<String>,
    pub images: Vec<ImageRgb>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| AfdError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| AfdError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image_path(p))
        .collect())
}

pub fn load_class_tree(root: &Path) -> Result<LabeledSet> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(AfdError::format(
            root.display().to_string(),
            format!("expected at least 2 class directories, found {}", class_dirs.len()),
        ));
    }
    let mut set = LabeledSet {
        class_names: Vec::new(),
        images: Vec::new(),
        labels: Vec::new(),
        paths: Vec::new(),
    };
    for (label, dir) in class_dirs.iter().enumerate() {
        let files = image_files(dir)?;
        if files.is_empty() {
            return Err(AfdError::format(dir.display().to_string(), "class directory has no images"));
        }
        set.class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        for f in files {
            set.images.push(read_image(&f)?);
            set.labels.push(label);
            set.paths.push(f);
        }
    }
    Ok(set)
}

/// Every image under `root`, recursively, in sorted path order.
pub fn load_images(root: &Path) -> Result<(Vec<ImageRgb>, Vec<PathBuf>)> {
    let mut paths = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for p in sorted_entries(&dir)? {
            if p.is_dir() {
                stack.push(p);
            } else if is_image_path(&p) {
                paths.push(p);
            }
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(AfdError::format(root.display().to_string(), "no images found"));
    }
    let images = paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    Ok((images, paths))
}

/// Writes `root/class_XX/img_XXXXX.png`.
pub fn write_class_tree(root: &Path, images: &[ImageRgb], labels: &[usize]) -> Result<Vec<PathBuf>> {
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    let mut written = Vec::with_capacity(images.len());
    for (img, &label) in images.iter().zip(labels) {
        let n = counts.entry(label).or_default();
        let path = root.join(format!("class_{label:02}")).join(format!("img_{n:05}.png"));
        *n += 1;
        write_image(&path, img)?;
        written.push(path);
    }
    Ok(written)
}
