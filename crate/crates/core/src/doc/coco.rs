//! MSCOCO detection annotations.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

/// One ground-truth box; `class` indexes [`CocoDataset::categories`].
#[derive(Clone, Debug, PartialEq)]
pub struct CocoAnnotation {
    pub image_index: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// Images, categories remapped to contiguous classes `0..K` (sorted by
/// original id), and corner-format boxes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    /// `(original category id, name)`; position is the class index.
    pub categories: Vec<(u64, String)>,
    pub annotations: Vec<CocoAnnotation>,
}

impl CocoDataset {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Ground truth of image `i` as `(class, box)` pairs.
    pub fn boxes_of(&self, image_index: usize) -> Vec<(usize, BBox)> {
        self.annotations
            .iter()
            .filter(|a| a.image_index == image_index)
            .map(|a| (a.class, a.bbox))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct RawCoco {
    images: Vec<CocoImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

pub fn load_coco(path: &Path) -> Result<CocoDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawCoco = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cats: Vec<(u64, String)> = raw.categories.into_iter().map(|c| (c.id, c.name)).collect();
    cats.sort_by_key(|c| c.0);
    let class_of: HashMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.0, i)).collect();
    let image_of: HashMap<u64, usize> = raw.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let mut annotations = Vec::with_capacity(raw.annotations.len());
    for a in raw.annotations {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let image_index = *image_of
            .get(&a.image_id)
            .ok_or_else(|| bad(format!("annotation {} references unknown image {}", a.id, a.image_id)))?;
        let class = *class_of
            .get(&a.category_id)
            .ok_or_else(|| bad(format!("annotation {} references unknown category {}", a.id, a.category_id)))?;
        let [x, y, w, h] = a.bbox;
        annotations.push(CocoAnnotation {
            image_index,
            class,
            bbox: BBox::new(x, y, x + w, y + h),
        });
    }
    Ok(CocoDataset {
        images: raw.images,
        categories: cats,
        annotations,
    })
}

pub fn save_coco(ds: &CocoDataset, path: &Path) -> Result<()> {
    let raw = RawCoco {
        images: ds.images.clone(),
        categories: ds
            .categories
            .iter()
            .map(|(id, name)| RawCategory {
                id: *id,
                name: name.clone(),
            })
            .collect(),
        annotations: ds
            .annotations
            .iter()
            .enumerate()
            .map(|(i, a)| RawAnnotation {
                id: i as u64 + 1,
                image_id: ds.images[a.image_index].id,
                category_id: ds.categories[a.class].0,
                bbox: [a.bbox.x0, a.bbox.y0, a.bbox.width(), a.bbox.height()],
                area: a.bbox.area(),
                iscrowd: 0,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&raw).expect("coco serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
