//! Directory conventions: `<case>_image.nii.gz`, `<case>_label.nii.gz`,
//! `<case>_pred.nii.gz`.

use std::path::{Path, PathBuf};

use dualview_core::{LabelMask, Volume};

use crate::error::{CliError, Result};
use crate::nifti_io::{case_id, is_nifti, load_labels, load_volume, LabelMap};

pub const IMAGE_SUFFIX: &str = "_image";
pub const LABEL_SUFFIX: &str = "_label";
pub const PRED_SUFFIX: &str = "_pred";

/// NIfTI files in `dir`, sorted by name.
pub fn list_nifti(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && is_nifti(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Files whose id ends in `suffix`, keyed by the id with the suffix removed.
pub fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    Ok(list_nifti(dir)?
        .into_iter()
        .filter_map(|p| {
            let id = case_id(&p);
            id.strip_suffix(suffix).map(|case| (case.to_string(), p.clone()))
        })
        .collect())
}

/// Image files: ids ending in `_image`, or, if there are none, every file that
/// is not a label, prediction or derived view.
pub fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let tagged = files_with_suffix(dir, IMAGE_SUFFIX)?;
    if !tagged.is_empty() {
        return Ok(tagged);
    }
    Ok(list_nifti(dir)?
        .into_iter()
        .map(|p| (case_id(&p), p))
        .filter(|(id, _)| ![LABEL_SUFFIX, PRED_SUFFIX, "_hf", "_diff"].iter().any(|s| id.ends_with(s)))
        .collect())
}

/// Image/label pairs of a training directory, ids set to the case name.
pub fn load_pairs(dir: &Path, map: &LabelMap) -> Result<Vec<(Volume, LabelMask)>> {
    let labels = files_with_suffix(dir, LABEL_SUFFIX)?;
    let mut pairs = Vec::new();
    for (case, image_path) in files_with_suffix(dir, IMAGE_SUFFIX)? {
        let Some((_, label_path)) = labels.iter().find(|(c, _)| *c == case) else {
            log::warn!("{} has no label file; skipped", image_path.display());
            continue;
        };
        let mut image = load_volume(&image_path)?;
        let mut label = load_labels(label_path, map)?;
        if image.shape() != label.shape() {
            return Err(CliError::format(
                label_path,
                format!("label grid {:?} differs from image grid {:?}", label.shape(), image.shape()),
            ));
        }
        image.id = case.clone();
        label.id = case;
        pairs.push((image, label));
    }
    Ok(pairs)
}
