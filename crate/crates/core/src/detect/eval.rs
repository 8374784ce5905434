//! Box overlap, non-maximum suppression and COCO-style mAP@[0.50:0.95].

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::BBox;

/// One scored box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy per-class suppression. Higher scores go first; equal scores keep
/// input order. Survivors are returned in that visiting order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-class AP (`None` for classes without ground truth) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl MapReport {
    /// Mean AP over `classes`, skipping those without ground truth.
    pub fn mean_over(&self, classes: &[usize]) -> f64 {
        let v: Vec<f64> = classes.iter().filter_map(|&c| self.per_class.get(c).copied().flatten()).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// `class,ap` rows plus a trailing `mean` row.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("class,ap\n");
        for (c, ap) in self.per_class.iter().enumerate() {
            let name = names.get(c).cloned().unwrap_or_else(|| c.to_string());
            match ap {
                Some(v) => s.push_str(&format!("{name},{v:.6}\n")),
                None => s.push_str(&format!("{name},\n")),
            }
        }
        s.push_str(&format!("mean,{:.6}\n", self.mean));
        s
    }
}

/// AP of one class at one IoU threshold.
fn average_precision(dets: &[(usize, &Detection)], gts: &[Vec<BBox>], thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for &(img, d) in dets {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts[img].iter().enumerate() {
            if matched[img][k] {
                continue;
            }
            let o = iou(&d.bbox, g);
            if o >= thr && best.map_or(true, |(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        match best {
            Some((k, _)) => {
                matched[img][k] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = rec.partition_point(|&x| x < r);
        if idx < prec.len() {
            sum += prec[idx];
        }
    }
    sum / 101.0
}

/// COCO-style evaluation. `dets[i]` and `gts[i]` belong to image `i`;
/// `gts` entries are `(class, box)`. Each image contributes at most its
/// `max_dets` highest-scoring detections of each class.
pub fn evaluate_map(dets: &[Vec<Detection>], gts: &[Vec<(usize, BBox)>], num_classes: usize, max_dets: usize) -> MapReport {
    let thresholds = iou_thresholds();
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let gt_c: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().filter(|x| x.0 == c).map(|x| x.1).collect()).collect();
            if gt_c.iter().all(Vec::is_empty) {
                return None;
            }
            let mut dc: Vec<(usize, &Detection)> = Vec::new();
            for (i, v) in dets.iter().enumerate().take(gt_c.len()) {
                let mut mine: Vec<&Detection> = v.iter().filter(|d| d.class == c).collect();
                mine.sort_by(|a, b| b.score.total_cmp(&a.score));
                mine.truncate(max_dets);
                dc.extend(mine.into_iter().map(|d| (i, d)));
            }
            // stable: equal scores keep image order
            dc.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
            let aps: f64 = thresholds.iter().map(|&t| average_precision(&dc, &gt_c, t)).sum();
            Some(aps / thresholds.len() as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MapReport { per_class, mean }
}

#[derive(Serialize)]
struct CocoResult {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
}

/// COCO results array; `image_ids[i]` and `category_ids[c]` give the
/// external ids of image `i` and class `c`.
pub fn results_json(dets: &[Vec<Detection>], image_ids: &[u64], category_ids: &[u64]) -> Result<String> {
    let mut rows = Vec::new();
    for (i, ds) in dets.iter().enumerate() {
        for d in ds {
            let b = d.bbox;
            rows.push(CocoResult {
                image_id: image_ids[i],
                category_id: category_ids[d.class],
                bbox: [b.x0, b.y0, b.width(), b.height()],
                score: d.score,
            });
        }
    }
    serde_json::to_string_pretty(&rows).map_err(|e| Error::Format {
        path: "<results>".into(),
        msg: e.to_string(),
    })
}

/// Reads a COCO results array back into per-image detections.
pub fn load_results(path: &Path, image_ids: &[u64], category_ids: &[u64]) -> Result<Vec<Vec<Detection>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let arr = v.as_array().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        msg: "results must be a JSON array".into(),
    })?;
    let mut out = vec![Vec::new(); image_ids.len()];
    for (k, r) in arr.iter().enumerate() {
        let field = |name: &str| Error::Field {
            path: path.to_path_buf(),
            field: format!("[{k}].{name}"),
        };
        let img = r["image_id"].as_u64().ok_or_else(|| field("image_id"))?;
        let cat = r["category_id"].as_u64().ok_or_else(|| field("category_id"))?;
        let score = r["score"].as_f64().ok_or_else(|| field("score"))?;
        let b: Vec<f64> = r["bbox"]
            .as_array()
            .filter(|a| a.len() == 4)
            .and_then(|a| a.iter().map(|x| x.as_f64()).collect())
            .ok_or_else(|| field("bbox"))?;
        let i = image_ids.iter().position(|&x| x == img).ok_or_else(|| field("image_id"))?;
        let class = category_ids.iter().position(|&x| x == cat).ok_or_else(|| field("category_id"))?;
        out[i].push(Detection {
            class,
            score,
            bbox: BBox::new(b[0], b[1], b[0] + b[2], b[1] + b[3]),
        });
    }
    Ok(out)
}
