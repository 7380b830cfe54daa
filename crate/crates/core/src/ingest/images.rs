//! Directory of input images for `dump-activations`: an `images.json`
//! listing each image's id, tensor file and class name, next to the tensor
//! files themselves (one block each).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor3};

pub const IMAGE_MANIFEST_FILE: &str = "images.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDirEntry {
    pub image_id: u32,
    pub file: String,
    /// Class name; must be one of the model's classes.
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDirManifest {
    pub images: Vec<ImageDirEntry>,
}

impl ImageDirManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(IMAGE_MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::parse("image manifest", e.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        for e in &m.images {
            if !seen.insert(e.image_id) {
                return Err(Error::parse(
                    "image manifest",
                    format!("image {} listed twice", e.image_id),
                ));
            }
        }
        Ok(m)
    }

    /// Resolves each entry's label against `classes`.
    pub fn labels(&self, classes: &[String]) -> Result<Vec<u32>> {
        self.images
            .iter()
            .map(|e| {
                let name = e.label.as_deref().ok_or_else(|| {
                    Error::Data(format!("image {} ({}) has no label", e.image_id, e.file))
                })?;
                classes
                    .iter()
                    .position(|c| c == name)
                    .map(|i| i as u32)
                    .ok_or_else(|| {
                        Error::Data(format!("image {} has unknown label `{name}`", e.image_id))
                    })
            })
            .collect()
    }
}

pub fn read_image_file(dir: &Path, entry: &ImageDirEntry) -> Result<Tensor3> {
    let path: PathBuf = dir.join(&entry.file);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    read_tensor(&mut BufReader::new(file), &entry.file)
}

/// Loads the manifest and every image in listed order.
pub fn read_image_dir(dir: impl AsRef<Path>) -> Result<(ImageDirManifest, Vec<Tensor3>)> {
    let dir = dir.as_ref();
    let manifest = ImageDirManifest::load(dir)?;
    let images = manifest
        .images
        .iter()
        .map(|e| read_image_file(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, images))
}

/// Writes `(image_id, class name, image)` triples as an image directory.
pub fn write_image_dir<'a>(
    dir: impl AsRef<Path>,
    images: impl IntoIterator<Item = (u32, &'a str, &'a Tensor3)>,
) -> Result<ImageDirManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = ImageDirManifest { images: Vec::new() };
    for (image_id, label, t) in images {
        let file = format!("img-{image_id:06}.ft3");
        let path = dir.join(&file);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        write_tensor(&mut w, t).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        manifest.images.push(ImageDirEntry {
            image_id,
            file,
            label: Some(label.to_owned()),
        });
    }
    let path = dir.join(IMAGE_MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
