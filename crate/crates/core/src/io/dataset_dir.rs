//! Dataset directories: `images/NNNNNN.ppm` (or `.pgm`) plus `annotations.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::pnm::Pnm;
use crate::io::shapes::{Annotation, BoxRect, ShapesDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexItem {
    pub image_id: usize,
    pub file: String,
    pub label: usize,
    pub boxes: Vec<BoxRect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub num_classes: usize,
    pub seed: u64,
    pub items: Vec<IndexItem>,
}

pub fn export_dataset(ds: &ShapesDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let mut items = Vec::with_capacity(ds.len());
    for (i, img) in ds.images.iter().enumerate() {
        let pnm = Pnm::from_tensor(img)?;
        let ext = if pnm.channels == 1 { "pgm" } else { "ppm" };
        let file = format!("images/{i:06}.{ext}");
        pnm.write(dir.join(&file))?;
        items.push(IndexItem {
            image_id: ds.annotations[i].image_id,
            file,
            label: ds.labels[i],
            boxes: ds.annotations[i].boxes.clone(),
        });
    }
    let index = DatasetIndex { format_version: 1, num_classes: ds.num_classes, seed: ds.seed, items };
    fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn import_dataset(dir: impl AsRef<Path>) -> Result<ShapesDataset> {
    let dir = dir.as_ref();
    let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(dir.join("annotations.json"))?)?;
    if index.format_version != 1 {
        return Err(Error::Version { found: index.format_version, expected: 1 });
    }
    let mut ds = ShapesDataset {
        images: Vec::with_capacity(index.items.len()),
        labels: Vec::with_capacity(index.items.len()),
        annotations: Vec::with_capacity(index.items.len()),
        num_classes: index.num_classes,
        seed: index.seed,
    };
    for item in index.items {
        let img = Pnm::read(dir.join(&item.file))?.to_tensor();
        let (_, h, w) = img.dims3()?;
        if item.boxes.iter().any(|b| b.x1 >= w || b.y1 >= h || b.x0 > b.x1 || b.y0 > b.y1) {
            return Err(Error::Format(format!("box outside image bounds in {}", item.file)));
        }
        if item.label >= index.num_classes {
            return Err(Error::Format(format!("label {} out of range in {}", item.label, item.file)));
        }
        ds.images.push(img);
        ds.labels.push(item.label);
        ds.annotations.push(Annotation { image_id: item.image_id, class: item.label, boxes: item.boxes });
    }
    Ok(ds)
}
