//! Document pages: words, sub-word tokens, text-line segments and the raster.

mod coco;
mod ocr;
mod synth;
mod vocab;

use std::path::Path;

pub use coco::{load_coco, save_coco, CocoAnnotation, CocoDataset, CocoImage};
pub use ocr::{group_segments, load_ocr_page, page_to_json, save_ocr_page};
pub use synth::{class_pools, page_seed, synth_generate, SynthConfig, SynthPage, SYNTH_CLASS_NAMES};
pub use vocab::{Vocab, CLS, FIRST_REGULAR, MASK, PAD, RESERVED, TOY_VOCAB, UNK};

use crate::error::{Error, Result};
use crate::geom::PixelBox;

/// The 27 layout categories of the diverse-document benchmark taxonomy.
pub const D4LA_CATEGORIES: [&str; 27] = [
    "DocTitle",
    "ListText",
    "LetterHead",
    "Question",
    "RegionList",
    "TableName",
    "FigureName",
    "Footer",
    "Number",
    "ParaTitle",
    "RegionTitle",
    "LetterDear",
    "OtherText",
    "Abstract",
    "Table",
    "Equation",
    "PageHeader",
    "Catalog",
    "ParaText",
    "Date",
    "LetterSign",
    "RegionKV",
    "Author",
    "Figure",
    "Reference",
    "PageFooter",
    "PageNumber",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Word {
    pub text: String,
    pub bbox: PixelBox,
}

/// One sub-word token placed on the page.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubToken {
    pub token_id: u32,
    pub bbox: PixelBox,
    pub parent_word: usize,
}

/// A text line.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub text: String,
    pub bbox: PixelBox,
}

/// `H × W × 3` raster in `[0, 1]`, row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub const CHANNELS: usize = 3;

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn fill_box(&mut self, b: &PixelBox, value: f32) {
        let b = b.clamp_to(self.width as i32, self.height as i32);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let o = (y as usize * self.width + x as usize) * Self::CHANNELS;
                self.data[o..o + Self::CHANNELS].iter_mut().for_each(|v| *v = value);
            }
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("raster size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Resamples to `height × width` with bilinear filtering.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let img = image::imageops::resize(&self.to_rgb8(), width as u32, height as u32, image::imageops::FilterType::Triangle);
        Self::from_rgb8(&img)
    }
}

/// One document page at a fixed resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DocPage {
    pub height: u32,
    pub width: u32,
    pub words: Vec<Word>,
    pub tokens: Vec<SubToken>,
    pub segments: Vec<Segment>,
    pub image: Raster,
}

impl DocPage {
    /// Builds a page from words; boxes are clamped and tokens derived.
    pub fn from_words(height: u32, width: u32, words: Vec<Word>, segments: Vec<Segment>, image: Raster, vocab: &Vocab) -> Self {
        let (w, h) = (width as i32, height as i32);
        let words: Vec<Word> = words
            .into_iter()
            .map(|wd| Word {
                bbox: wd.bbox.clamp_to(w, h),
                text: wd.text,
            })
            .collect();
        let segments = segments
            .into_iter()
            .map(|s| Segment {
                bbox: s.bbox.clamp_to(w, h),
                text: s.text,
            })
            .collect();
        let tokens = tokenize_words(&words, vocab);
        Self {
            height,
            width,
            words,
            tokens,
            segments,
            image,
        }
    }

    /// The same page at `height × width`; boxes rescale with round-half-up and
    /// tokens are re-split at the new resolution.
    pub fn resized(&self, height: u32, width: u32, vocab: &Vocab) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let words = self
            .words
            .iter()
            .map(|w| Word {
                text: w.text.clone(),
                bbox: w.bbox.rescale(sx, sy),
            })
            .collect();
        let segments = self
            .segments
            .iter()
            .map(|s| Segment {
                text: s.text.clone(),
                bbox: s.bbox.rescale(sx, sy),
            })
            .collect();
        let image = self.image.resized(height as usize, width as usize);
        Self::from_words(height, width, words, segments, image, vocab)
    }
}

/// Tokenizes every word and splits its box among the sub-words.
pub fn tokenize_words(words: &[Word], vocab: &Vocab) -> Vec<SubToken> {
    let mut tokens = Vec::new();
    for (wi, w) in words.iter().enumerate() {
        let ids = vocab.tokenize(&w.text);
        for (id, bbox) in ids.iter().zip(split_word_box(&w.bbox, ids.len())) {
            tokens.push(SubToken {
                token_id: *id,
                bbox,
                parent_word: wi,
            });
        }
    }
    tokens
}

/// Splits a word box horizontally into `n` equal-width boxes; the last one
/// absorbs the integer remainder. When `n` exceeds the width every piece is
/// one pixel wide and the trailing pieces share the last column.
pub fn split_word_box(b: &PixelBox, n: usize) -> Vec<PixelBox> {
    assert!(n >= 1, "split_word_box needs at least one piece");
    let width = b.width();
    let n_i = n as i32;
    if n_i > width {
        log::warn!("word box {b:?} is narrower than its {n} sub-words; using 1-px boxes");
        return (0..n_i)
            .map(|i| {
                let x = b.x0 + i.min(width - 1);
                PixelBox::new(x, b.y0, x + 1, b.y1)
            })
            .collect();
    }
    let base = width / n_i;
    (0..n_i)
        .map(|i| {
            let x0 = b.x0 + i * base;
            let x1 = if i == n_i - 1 { b.x1 } else { x0 + base };
            PixelBox::new(x0, b.y0, x1, b.y1)
        })
        .collect()
}
