//! Dataset directory layout:
//!
//! ```text
//! <root>/dataset.txt                 key=value description
//! <root>/<split>/images/<id>.pgm     8-bit grayscale
//! <root>/<split>/labels/<id>.pgm     dense class indices
//! <root>/<split>/scribbles/<id>.pgm  class indices, 255 = unlabeled
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::config::ConfigFile;
use crate::dataio::pgm::{read_image, read_labels, read_scribbles, write_image, write_labels, write_scribbles};
use crate::dataio::synthetic::{Split, SyntheticDataset, SyntheticSpec};
use crate::dataio::{write_atomic, Sample};
use crate::error::{Error, Result};
use crate::maps::Image;

pub const INFO_FILE: &str = "dataset.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetInfo {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl DatasetInfo {
    pub fn load(root: &Path) -> Result<Self> {
        let c = ConfigFile::load(&root.join(INFO_FILE))?;
        let need = |k: &str| -> Result<usize> {
            c.get::<usize>(k)?.ok_or_else(|| Error::config(format!("{} lacks {k}", root.join(INFO_FILE).display())))
        };
        Ok(Self { classes: need("classes")?, height: need("height")?, width: need("width")? })
    }
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

pub fn map_path(root: &Path, split: &str, kind: &str, id: &str) -> PathBuf {
    split_dir(root, split).join(kind).join(format!("{id}.pgm"))
}

/// Write every split and the description file; returns the written paths.
pub fn write_dataset(root: &Path, spec: &SyntheticSpec, ds: &SyntheticDataset) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for split in Split::ALL {
        for s in ds.split(split) {
            let name = split.name();
            let paths = [map_path(root, name, "images", &s.id), map_path(root, name, "labels", &s.id), map_path(root, name, "scribbles", &s.id)];
            write_image(&paths[0], &s.image)?;
            write_labels(&paths[1], &s.labels)?;
            write_scribbles(&paths[2], &s.scribbles)?;
            written.extend(paths);
        }
    }
    let info = format!(
        "classes={}\nheight={}\nwidth={}\nseed={}\ntrain={}\nval={}\ntest={}\nnoise-sigma={}\n",
        spec.classes, spec.height, spec.width, spec.seed, spec.train, spec.val, spec.test, spec.noise_sigma
    );
    let info_path = root.join(INFO_FILE);
    write_atomic(&info_path, info.as_bytes())?;
    written.push(info_path);
    Ok(written)
}

/// Sorted ids of the `.pgm` files in `dir`.
pub fn list_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "pgm") {
            if let Some(stem) = p.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_images(root: &Path, split: &str) -> Result<Vec<(String, Image)>> {
    let dir = split_dir(root, split).join("images");
    list_ids(&dir)?
        .into_iter()
        .map(|id| {
            let img = read_image(&dir.join(format!("{id}.pgm")))?;
            Ok((id, img))
        })
        .collect()
}

/// Images with labels and scribbles for every id of `split`.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    read_images(root, split)?
        .into_iter()
        .map(|(id, image)| {
            let labels = read_labels(&map_path(root, split, "labels", &id))?;
            let scribbles = read_scribbles(&map_path(root, split, "scribbles", &id))?;
            if !labels.same_extent(image.height, image.width) || !scribbles.same_extent(image.height, image.width) {
                return Err(Error::contract(format!("sample {id}: image, labels and scribbles differ in extent")));
            }
            Ok(Sample { id, image, labels, scribbles })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic::generate_synthetic;

    #[test]
    fn dataset_round_trips_through_disk() {
        let spec = SyntheticSpec { train: 3, val: 1, test: 2, ..Default::default() };
        let ds = generate_synthetic(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_dataset(dir.path(), &spec, &ds).unwrap();
        assert_eq!(files.len(), 6 * 3 + 1);
        assert_eq!(DatasetInfo::load(dir.path()).unwrap(), DatasetInfo { classes: 4, height: 64, width: 64 });
        let back = read_split(dir.path(), "train").unwrap();
        assert_eq!(back, ds.train);
    }
}
