//! OCR-JSON pages:
//! `{"page": {"h": int, "w": int}, "words": [{"text": str, "box": [x0,y0,x1,y1]}]}`
//!
//! An optional `"segments"` array with the same item shape as `"words"`
//! carries text lines; without it lines are grouped from the words.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use super::{DocPage, Raster, Segment, Vocab, Word};
use crate::error::{Error, Result};
use crate::geom::PixelBox;

fn field_err(path: &Path, field: impl Into<String>) -> Error {
    Error::Field {
        path: path.to_path_buf(),
        field: field.into(),
    }
}

fn parse_items(path: &Path, root: &Value, key: &str) -> Result<Option<Vec<(String, PixelBox)>>> {
    let Some(items) = root.get(key) else {
        return Ok(None);
    };
    let items = items.as_array().ok_or_else(|| field_err(path, key))?;
    let mut out = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let text = it
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| field_err(path, format!("{key}[{i}].text")))?;
        let coords: Vec<f64> = it
            .get("box")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 4)
            .and_then(|a| a.iter().map(Value::as_f64).collect())
            .ok_or_else(|| field_err(path, format!("{key}[{i}].box")))?;
        let r = |v: f64| (v + 0.5).floor() as i32;
        let b = PixelBox::new(r(coords[0]), r(coords[1]), r(coords[2]), r(coords[3]));
        if !b.is_valid() {
            return Err(field_err(path, format!("{key}[{i}].box")));
        }
        out.push((text.to_string(), b));
    }
    Ok(Some(out))
}

/// Reads an OCR-JSON page. The raster comes from a PNG next to the file
/// with the same stem when present, otherwise a blank page.
pub fn load_ocr_page(path: &Path, vocab: &Vocab) -> Result<DocPage> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let page = root.get("page").ok_or_else(|| field_err(path, "page"))?;
    let dim = |k: &str| -> Result<u32> {
        page.get(k)
            .and_then(Value::as_u64)
            .filter(|&v| v > 0 && v <= u32::MAX as u64)
            .map(|v| v as u32)
            .ok_or_else(|| field_err(path, format!("page.{k}")))
    };
    let (h, w) = (dim("h")?, dim("w")?);
    let words: Vec<Word> = parse_items(path, &root, "words")?
        .ok_or_else(|| field_err(path, "words"))?
        .into_iter()
        .map(|(text, bbox)| Word { text, bbox })
        .collect();
    let png = path.with_extension("png");
    let image = if png.exists() {
        let r = Raster::load_png(&png)?;
        r.resized(h as usize, w as usize)
    } else {
        Raster::filled(h as usize, w as usize, 1.0)
    };
    let mut page = DocPage::from_words(h, w, words, vec![], image, vocab);
    page.segments = match parse_items(path, &root, "segments")? {
        Some(items) => items
            .into_iter()
            .map(|(text, bbox)| Segment {
                text,
                bbox: bbox.clamp_to(w as i32, h as i32),
            })
            .collect(),
        None => group_segments(&page.words),
    };
    Ok(page)
}

pub fn page_to_json(page: &DocPage) -> Value {
    let item = |text: &str, b: &PixelBox| json!({"text": text, "box": [b.x0, b.y0, b.x1, b.y1]});
    json!({
        "page": {"h": page.height, "w": page.width},
        "words": page.words.iter().map(|w| item(&w.text, &w.bbox)).collect::<Vec<_>>(),
        "segments": page.segments.iter().map(|s| item(&s.text, &s.bbox)).collect::<Vec<_>>(),
    })
}

/// Writes the page as OCR-JSON at `path` plus its raster as a sibling PNG.
pub fn save_ocr_page(page: &DocPage, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&page_to_json(page)).expect("json value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    page.image.save_png(&path.with_extension("png"))
}

/// Groups words into text lines: a word joins a line when it overlaps the
/// line's last word vertically by at least half the smaller height and
/// starts no further right of it than one median character width.
pub fn group_segments(words: &[Word]) -> Vec<Segment> {
    if words.is_empty() {
        return vec![];
    }
    let mut char_w: Vec<f64> = words
        .iter()
        .map(|w| w.bbox.width() as f64 / w.text.chars().count().max(1) as f64)
        .collect();
    char_w.sort_by(|a, b| a.total_cmp(b));
    let median = char_w[char_w.len() / 2];

    let mut order: Vec<usize> = (0..words.len()).collect();
    order.sort_by_key(|&i| (words[i].bbox.x0, words[i].bbox.y0));
    let mut lines: Vec<Vec<usize>> = Vec::new();
    for i in order {
        let b = words[i].bbox;
        let joined = lines.iter_mut().find(|line| {
            let last = words[*line.last().unwrap()].bbox;
            let overlap = (b.y1.min(last.y1) - b.y0.max(last.y0)) as f64;
            let min_h = b.height().min(last.height()) as f64;
            let gap = (b.x0 - last.x1) as f64;
            overlap >= 0.5 * min_h && gap >= -0.5 * min_h && gap <= median
        });
        match joined {
            Some(line) => line.push(i),
            None => lines.push(vec![i]),
        }
    }
    let mut segs: Vec<Segment> = lines
        .into_iter()
        .map(|line| {
            let bbox = line.iter().skip(1).fold(words[line[0]].bbox, |u, &i| u.union(&words[i].bbox));
            let text = line.iter().map(|&i| words[i].text.as_str()).collect::<Vec<_>>().join(" ");
            Segment { text, bbox }
        })
        .collect();
    segs.sort_by_key(|s| (s.bbox.y0, s.bbox.x0));
    segs
}
