//! Single-stage anchor-free detector over the fused pyramid.
//!
//! Every pyramid location predicts a class score per category and the
//! distances `(l, t, r, b)` from its centre to the box edges, in units of
//! the level's stride.

mod eval;

pub use eval::{evaluate_map, iou, iou_thresholds, load_results, nms, results_json, Detection, MapReport};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneConfig, FeaturePyramid, LEVELS};
use crate::doc::Raster;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::geom::BBox;
use crate::graph::{Graph, Var};
use crate::grid::TokenIdGrid;
use crate::optim::AdamW;
use crate::par;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Initial class bias, so that sigmoid starts near 0.01.
pub const PRIOR_BIAS: f64 = -4.6;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl DetectConfig {
    pub fn desk(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::desk(vocab_size),
            num_classes,
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(Error::invalid("detect config", "need at least one class"));
        }
        if !(self.score_thresh > 0.0 && self.score_thresh < 1.0) {
            return Err(Error::invalid("detect config", format!("score threshold {} outside (0, 1)", self.score_thresh)));
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.backbone.vision.height, self.backbone.vision.width)
    }
}

pub fn init_head<T: Float, R: Rng>(store: &mut ParamStore<T>, d: usize, num_classes: usize, rng: &mut R) {
    let std3 = (1.0 / (9 * d) as f64).sqrt();
    for t in ["tower0", "tower1"] {
        store.insert(format!("det.{t}.w"), Tensor::randn(&[d, d, 3, 3], std3, rng));
        store.insert(format!("det.{t}.b"), Tensor::zeros(&[d]));
    }
    store.insert("det.cls.w", Tensor::randn(&[num_classes, d, 1, 1], 0.01, rng));
    store.insert("det.cls.b", Tensor::full(&[num_classes], T::from_f64(PRIOR_BIAS)));
    store.insert("det.reg.w", Tensor::randn(&[4, d, 1, 1], 0.01, rng));
    store.insert("det.reg.b", Tensor::zeros(&[4]));
}

pub fn init_detector<T: Float, R: Rng>(store: &mut ParamStore<T>, cfg: &DetectConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    backbone::init_backbone(store, &cfg.backbone, rng)?;
    init_head(store, cfg.backbone.fpn_dim, cfg.num_classes, rng);
    Ok(())
}

/// Head outputs of one level: logits `[K, h, w]` and positive distances `[4, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct LevelPreds {
    pub level: usize,
    pub cls: Var,
    pub reg: Var,
}

/// Shared tower and branches applied to every pyramid level.
pub fn detect_forward<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, p: &FeaturePyramid) -> Result<Vec<LevelPreds>> {
    let mut out = Vec::with_capacity(4);
    for (slot, &level) in LEVELS.iter().enumerate() {
        let t = backbone::conv(g, store, "det.tower0", p.levels[slot], 1)?;
        let t = g.gelu(t);
        let t = backbone::conv(g, store, "det.tower1", t, 1)?;
        let t = g.gelu(t);
        let cls = backbone::conv(g, store, "det.cls", t, 0)?;
        let reg = backbone::conv(g, store, "det.reg", t, 0)?;
        let reg = g.exp(reg);
        out.push(LevelPreds { level, cls, reg });
    }
    Ok(out)
}

/// Image-space centre of location `(i, j)` at `stride`.
pub fn location_center(i: usize, j: usize, stride: f64) -> (f64, f64) {
    ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride)
}

/// Box from stride-unit distances at location `(i, j)`.
pub fn decode_box(i: usize, j: usize, stride: f64, ltrb: [f64; 4]) -> BBox {
    let (x, y) = location_center(i, j, stride);
    BBox::new(x - ltrb[0] * stride, y - ltrb[1] * stride, x + ltrb[2] * stride, y + ltrb[3] * stride)
}

/// Targets of one level, row-major over locations.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    /// Index into the GT list of the box each location regresses, if positive.
    pub gt: Vec<Option<usize>>,
    pub labels: Vec<Option<usize>>,
    /// Stride-unit distances to the assigned box edges (zero for background).
    pub ltrb: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets {
    pub levels: Vec<LevelTargets>,
}

impl HeadTargets {
    pub fn num_positive(&self) -> usize {
        self.levels.iter().map(|l| l.labels.iter().flatten().count()).sum()
    }
}

/// Pyramid level of a box by the square root of its area, with the
/// 32/64/128 thresholds scaled from a 128-pixel reference image.
pub fn gt_level(b: &BBox, image_size: usize) -> usize {
    let s = image_size as f64 / 128.0;
    let r = b.area().sqrt();
    if r < 32.0 * s {
        2
    } else if r < 64.0 * s {
        3
    } else if r < 128.0 * s {
        4
    } else {
        5
    }
}

/// Marks every location whose centre lies strictly inside a GT box of its
/// level; overlapping claims go to the smaller box.
pub fn assign_targets(gt: &[(usize, BBox)], height: usize, width: usize) -> HeadTargets {
    let clamped: Vec<(usize, BBox)> = gt
        .iter()
        .map(|&(c, b)| {
            let cl = BBox::new(b.x0.max(0.0), b.y0.max(0.0), b.x1.min(width as f64), b.y1.min(height as f64));
            (c, cl)
        })
        .collect();
    let size = height.max(width);
    let levels = LEVELS
        .iter()
        .map(|&level| {
            let stride = (1usize << level) as f64;
            let (h, w) = (height >> level, width >> level);
            let mut t = LevelTargets {
                level,
                height: h,
                width: w,
                gt: vec![None; h * w],
                labels: vec![None; h * w],
                ltrb: vec![[0.0; 4]; h * w],
            };
            for (k, (c, b)) in clamped.iter().enumerate() {
                if !b.is_valid() || gt_level(b, size) != level {
                    continue;
                }
                for i in 0..h {
                    for j in 0..w {
                        let (x, y) = location_center(i, j, stride);
                        if !(x > b.x0 && x < b.x1 && y > b.y0 && y < b.y1) {
                            continue;
                        }
                        let loc = i * w + j;
                        if let Some(prev) = t.gt[loc] {
                            let pa = clamped[prev].1.area();
                            if pa < b.area() || (pa == b.area() && prev < k) {
                                continue;
                            }
                        }
                        t.gt[loc] = Some(k);
                        t.labels[loc] = Some(*c);
                        t.ltrb[loc] = [(x - b.x0) / stride, (y - b.y0) / stride, (b.x1 - x) / stride, (b.y1 - y) / stride];
                    }
                }
            }
            t
        })
        .collect();
    HeadTargets { levels }
}

/// Focal loss over every logit plus IoU loss over positive locations, both
/// divided by `max(num_pos, 1)`.
pub fn detection_loss<T: Float>(g: &mut Graph<T>, preds: &[LevelPreds], targets: &HeadTargets) -> Result<Var> {
    if preds.len() != targets.levels.len() {
        return Err(Error::invalid("detection_loss", "level count mismatch"));
    }
    let mut cls_flat = Vec::new();
    let mut reg_flat = Vec::new();
    let mut cls_t = Vec::new();
    let mut reg_index = Vec::new();
    let mut reg_t = Vec::new();
    let mut offset = 0;
    for (p, t) in preds.iter().zip(&targets.levels) {
        let cs = g.shape(p.cls).to_vec();
        let hw = t.height * t.width;
        if cs[1..] != [t.height, t.width] || g.shape(p.reg) != [4, t.height, t.width] {
            return Err(Error::ShapeMismatch {
                op: "detection_loss",
                lhs: cs,
                rhs: vec![t.height, t.width],
            });
        }
        let k = cs[0];
        for c in 0..k {
            for loc in 0..hw {
                cls_t.push(if t.labels[loc] == Some(c) { T::one() } else { T::zero() });
            }
        }
        for loc in 0..hw {
            if t.labels[loc].is_some() {
                for side in 0..4 {
                    reg_index.push(offset + side * hw + loc);
                    reg_t.push(T::from_f64(t.ltrb[loc][side]));
                }
            }
        }
        offset += 4 * hw;
        let n = g.value(p.cls).numel();
        cls_flat.push(g.reshape(p.cls, &[n])?);
        reg_flat.push(g.reshape(p.reg, &[4 * hw])?);
    }
    let npos = reg_index.len() / 4;
    let norm = T::from_f64(1.0 / npos.max(1) as f64);
    let cls = g.concat_rows(&cls_flat)?;
    let focal = g.focal_loss(cls, cls_t, FOCAL_ALPHA, FOCAL_GAMMA)?;
    let total = if npos > 0 {
        let reg = g.concat_rows(&reg_flat)?;
        let picked = g.gather(reg, reg_index, &[npos, 4])?;
        let box_loss = g.iou_loss(picked, reg_t)?;
        g.add(focal, box_loss)?
    } else {
        focal
    };
    Ok(g.scale(total, norm))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every (location, class) whose score reaches `score_thresh`.
pub fn decode_predictions<T: Float>(g: &Graph<T>, preds: &[LevelPreds], score_thresh: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for p in preds {
        let cs = g.shape(p.cls);
        let (k, h, w) = (cs[0], cs[1], cs[2]);
        let stride = (1usize << p.level) as f64;
        let cls = g.value(p.cls).data();
        let reg = g.value(p.reg).data();
        for i in 0..h {
            for j in 0..w {
                let loc = i * w + j;
                let ltrb = [0, 1, 2, 3].map(|s| Float::to_f64(reg[s * h * w + loc]));
                for c in 0..k {
                    let score = sigmoid(Float::to_f64(cls[c * h * w + loc]));
                    if score >= score_thresh {
                        out.push(Detection {
                            class: c,
                            score,
                            bbox: decode_box(i, j, stride, ltrb),
                        });
                    }
                }
            }
        }
    }
    out
}

/// One page ready for the detector.
#[derive(Clone, Debug)]
pub struct DetSample {
    pub image: Raster,
    pub grid: TokenIdGrid,
    pub gt: Vec<(usize, BBox)>,
}

/// Records backbone and head for one sample.
pub fn forward_sample<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &DetectConfig, s: &DetSample) -> Result<Vec<LevelPreds>> {
    let img = backbone::image_tensor::<T>(&s.image);
    let p = backbone::backbone_forward(g, store, &cfg.backbone, &img, &s.grid)?;
    detect_forward(g, store, &p)
}

/// Thresholded, suppressed and capped detections of one sample.
pub fn predict<T: Float>(store: &ParamStore<T>, cfg: &DetectConfig, s: &DetSample) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let preds = forward_sample(&mut g, store, cfg, s)?;
    let mut dets = nms(&decode_predictions(&g, &preds, cfg.score_thresh), cfg.nms_iou);
    dets.truncate(cfg.max_dets);
    Ok(dets)
}

pub fn predict_all<T: Float>(store: &ParamStore<T>, cfg: &DetectConfig, samples: &[DetSample]) -> Result<Vec<Vec<Detection>>> {
    par::map(samples, |s| predict(store, cfg, s)).into_iter().collect()
}

pub fn evaluate<T: Float>(store: &ParamStore<T>, cfg: &DetectConfig, samples: &[DetSample]) -> Result<(MapReport, Vec<Vec<Detection>>)> {
    let dets = predict_all(store, cfg, samples)?;
    let gts: Vec<Vec<(usize, BBox)>> = samples.iter().map(|s| s.gt.clone()).collect();
    Ok((evaluate_map(&dets, &gts, cfg.num_classes, cfg.max_dets), dets))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectSchedule {
    pub steps: usize,
    pub batch: usize,
    /// Evaluate on the validation split every this many steps (0: only at the end).
    pub eval_every: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectLog {
    pub losses: Vec<f64>,
    /// `(step, validation mAP)` after each evaluation.
    pub evals: Vec<(usize, f64)>,
}

/// Loss and gradients of one sample, accumulated into `store`.
fn sample_step<T: Float>(store: &ParamStore<T>, cfg: &DetectConfig, s: &DetSample) -> Result<(f64, Graph<T>, crate::graph::Gradients<T>)> {
    let mut g = Graph::new();
    let preds = forward_sample(&mut g, store, cfg, s)?;
    let (h, w) = cfg.image_size();
    let targets = assign_targets(&s.gt, h, w);
    let loss = detection_loss(&mut g, &preds, &targets)?;
    let grads = g.backward(loss)?;
    Ok((Float::to_f64(g.scalar_value(loss)), g, grads))
}

/// Forward, loss, backward and optimizer step over shuffled mini-batches,
/// with periodic validation.
pub fn train_detector<T: Float>(
    train: &[DetSample],
    val: &[DetSample],
    store: &mut ParamStore<T>,
    cfg: &DetectConfig,
    opt: &AdamW,
    schedule: &DetectSchedule,
    mut log_step: impl FnMut(usize, f64),
) -> Result<DetectLog> {
    if train.is_empty() {
        return Err(Error::invalid("train_detector", "empty dataset"));
    }
    let batch = schedule.batch.clamp(1, train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = DetectLog::default();
    for step in 0..schedule.steps {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            rand::seq::SliceRandom::shuffle(fresh.as_mut_slice(), &mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let frozen: &ParamStore<T> = store;
        let results = par::map(&idx, |&i| sample_step(frozen, cfg, &train[i]));
        store.zero_grad();
        let mut loss = 0.0;
        for r in results {
            let (l, g, grads) = r?;
            loss += l;
            store.accumulate(&g, &grads)?;
        }
        if batch > 1 {
            let inv = T::from_f64(1.0 / batch as f64);
            for (_, p) in store.iter_mut() {
                if let Some(gr) = p.grad.as_mut() {
                    gr.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        opt.step(store)?;
        let loss = loss / batch as f64;
        log.losses.push(loss);
        log_step(step, loss);
        let last = step + 1 == schedule.steps;
        if !val.is_empty() && (last || (schedule.eval_every > 0 && (step + 1) % schedule.eval_every == 0)) {
            let (r, _) = evaluate(store, cfg, val)?;
            log.evals.push((step + 1, r.mean));
        }
    }
    Ok(log)
}

/// Copies every `prefix` parameter present in `src` into `dst`. Returns the
/// names loaded, those `dst` expected but `src` lacked, and those only in `src`.
pub fn load_prefix<T: Float>(dst: &mut ParamStore<T>, src: &ParamStore<T>, prefix: &str) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let want: Vec<String> = dst.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    let have: Vec<String> = src.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    let mut loaded = Vec::new();
    let mut missing = Vec::new();
    for n in &want {
        match src.value(n) {
            Ok(v) => {
                let cur = dst.value(n)?;
                if cur.shape() != v.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load_prefix",
                        lhs: cur.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                dst.insert(n.clone(), v.clone());
                loaded.push(n.clone());
            }
            Err(_) => missing.push(n.clone()),
        }
    }
    let extra = have.into_iter().filter(|n| !want.contains(n)).collect();
    Ok((loaded, missing, extra))
}
