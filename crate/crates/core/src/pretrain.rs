//! Grid-stream pre-training: masked grid language modelling (MGLM) and
//! segment language modelling (SLM) on the finest pyramid level.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{self, BackboneConfig, FeaturePyramid, Streams};
use crate::doc::{DocPage, Vocab};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::geom::BBox;
use crate::graph::{Graph, Var};
use crate::grid::{self, MaskConfig, MaskPlan};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// RoI output size used by both objectives.
pub const ROI_SIZE: usize = 3;
/// Stride of the finest pyramid level.
pub const P2_STRIDE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Negatives {
    /// Every other segment of the batch.
    InBatch,
    /// Only other segments of the same page.
    SamePage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub mask: MaskConfig,
    pub tau: f64,
    /// Segments sampled per page.
    pub num_segments: usize,
    pub target_dim: usize,
    pub mlp_hidden: usize,
    pub negatives: Negatives,
    pub pseudo_seed: u64,
    /// Weights of the two objectives in the total; both 1 by default.
    pub mglm_weight: f64,
    pub slm_weight: f64,
}

impl PretrainConfig {
    pub fn desk(vocab_size: usize) -> Self {
        let mut backbone = BackboneConfig::desk(vocab_size);
        backbone.streams = Streams::GridOnly;
        Self {
            backbone,
            mask: MaskConfig::default(),
            tau: 0.01,
            num_segments: 64,
            target_dim: 64,
            mlp_hidden: 64,
            negatives: Negatives::InBatch,
            pseudo_seed: 0x5eed,
            mglm_weight: 1.0,
            slm_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.streams != Streams::GridOnly {
            return Err(Error::invalid("pretrain config", "pre-training uses the grid stream only"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("pretrain config", format!("tau {} must be positive", self.tau)));
        }
        if !(self.mglm_weight >= 0.0 && self.slm_weight >= 0.0) {
            return Err(Error::invalid("pretrain config", "loss weights must be non-negative"));
        }
        if self.num_segments == 0 || self.target_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("pretrain config", "num_segments, target_dim and mlp_hidden must be positive"));
        }
        Ok(())
    }
}

/// Frozen bag-of-tokens embedder standing in for a language model: every
/// token id owns a fixed Gaussian row; a segment's target is the
/// normalised sum of its tokens' rows.
#[derive(Clone, Debug)]
pub struct PseudoTargetProvider {
    pub dim: usize,
    pub seed: u64,
}

impl PseudoTargetProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn row(&self, id: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Unit target for `ids`, `None` when empty.
    pub fn target(&self, ids: &[u32]) -> Option<Vec<f64>> {
        if ids.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; self.dim];
        for &id in ids {
            for (a, r) in acc.iter_mut().zip(self.row(id)) {
                *a += r;
            }
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return None;
        }
        Some(acc.into_iter().map(|v| v / n).collect())
    }
}

pub fn init_heads<T: Float, R: Rng>(store: &mut ParamStore<T>, cfg: &PretrainConfig, rng: &mut R) {
    let d = cfg.backbone.fpn_dim;
    let (h, v) = (cfg.mlp_hidden, cfg.backbone.vocab_size);
    let lecun = |shape: &[usize], fan: usize, rng: &mut R| Tensor::randn(shape, (1.0 / fan as f64).sqrt(), rng);
    store.insert("mglm.l1.w", lecun(&[d, h], d, rng));
    store.insert("mglm.l1.b", Tensor::zeros(&[h]));
    store.insert("mglm.l2.w", lecun(&[h, v], h, rng));
    store.insert("mglm.l2.b", Tensor::zeros(&[v]));
    store.insert("slm.proj.w", lecun(&[d, cfg.target_dim], d, rng));
    store.insert("slm.proj.b", Tensor::zeros(&[cfg.target_dim]));
}

/// Grid stream, FPN and both heads.
pub fn init_pretrain_model<T: Float, R: Rng>(store: &mut ParamStore<T>, cfg: &PretrainConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    backbone::init_backbone(store, &cfg.backbone, rng)?;
    init_heads(store, cfg, rng);
    Ok(())
}

/// Masked tokens of a batch: boxes in model pixels and their original ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MGLMBatch {
    /// Page of each box within the batch.
    pub page: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub targets: Vec<u32>,
}

impl MGLMBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Segments of a batch with unit pseudo-targets and negative sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SLMBatch {
    pub page: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub targets: Vec<Vec<f64>>,
    /// Negative candidates of every segment (indices into this batch).
    pub negatives: Vec<Vec<usize>>,
    pub tau: f64,
}

impl SLMBatch {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Fills negative sets from page membership.
    pub fn set_negatives(&mut self, mode: Negatives) {
        let n = self.boxes.len();
        self.negatives = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&k| k != i && (mode == Negatives::InBatch || self.page[k] == self.page[i]))
                    .collect()
            })
            .collect();
    }
}

/// `(-1/N) Σ log softmax(logits)[target]` for `logits: [N, V]`.
pub fn cross_entropy<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[u32]) -> Result<Var> {
    let lp = g.log_softmax(logits);
    let cols: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = g.pick(lp, &cols)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -T::one()))
}

/// Mean-pooled RoI features `[n, C]` of pixel boxes on a stride-4 map.
pub fn roi_features<T: Float>(g: &mut Graph<T>, p2: Var, boxes: &[BBox]) -> Result<Var> {
    let r = g.roi_align(p2, boxes, P2_STRIDE, ROI_SIZE)?;
    g.mean_last_axis(r)
}

pub fn mglm_logits<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, feats: Var) -> Result<Var> {
    let h = backbone::linear(g, store, "mglm.l1", feats)?;
    let h = g.gelu(h);
    backbone::linear(g, store, "mglm.l2", h)
}

/// MGLM loss over pooled features `[N_M, C]`; `None` for an empty batch.
pub fn mglm_loss<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, feats: Var, targets: &[u32]) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let logits = mglm_logits(g, store, feats)?;
    cross_entropy(g, logits, targets).map(Some)
}

/// Unit segment embeddings from pooled features `[N_S, C]`.
pub fn slm_embed<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, feats: Var) -> Result<Var> {
    let e = backbone::linear(g, store, "slm.proj", feats)?;
    g.l2_normalize_rows(e)
}

/// Contrastive loss of unit embeddings `e: [N, d]` against unit targets.
/// `None` when no segment has a negative.
pub fn slm_loss_from_embeddings<T: Float>(g: &mut Graph<T>, e: Var, batch: &SLMBatch) -> Result<Option<Var>> {
    let n = batch.len();
    if n < 2 || batch.negatives.iter().all(|s| s.is_empty()) {
        return Ok(None);
    }
    if batch.negatives.len() != n || batch.targets.len() != n {
        return Err(Error::invalid("slm_loss", "negatives and targets must cover every segment"));
    }
    let dim = batch.targets[0].len();
    let mut tt = vec![T::zero(); dim * n];
    for (k, t) in batch.targets.iter().enumerate() {
        for (j, &v) in t.iter().enumerate() {
            tt[j * n + k] = T::from_f64(v);
        }
    }
    let tt = g.constant(Tensor::new(vec![dim, n], tt)?);
    let sims = g.matmul(e, tt)?;
    let sims = g.scale(sims, T::from_f64(1.0 / batch.tau));
    // candidates outside {i} ∪ N_i are pushed far below any cosine / tau
    let mut mask = vec![T::from_f64(-1e6 - 2.0 / batch.tau); n * n];
    for i in 0..n {
        mask[i * n + i] = T::zero();
        for &k in &batch.negatives[i] {
            mask[i * n + k] = T::zero();
        }
    }
    let mask = g.constant(Tensor::new(vec![n, n], mask)?);
    let sims = g.add(sims, mask)?;
    let lp = g.log_softmax(sims);
    let diag: Vec<usize> = (0..n).collect();
    let picked = g.pick(lp, &diag)?;
    let m = g.mean(picked);
    Ok(Some(g.scale(m, -T::one())))
}

pub fn slm_loss<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, feats: Var, batch: &SLMBatch) -> Result<Option<Var>> {
    if batch.len() < 2 {
        return Ok(None);
    }
    let e = slm_embed(g, store, feats)?;
    slm_loss_from_embeddings(g, e, batch)
}

/// Sub-token ids of a whitespace-separated text.
pub fn segment_token_ids(text: &str, vocab: &Vocab) -> Vec<u32> {
    text.split_whitespace().flat_map(|w| vocab.tokenize(w)).collect()
}

/// One page at model resolution with its segments' pseudo-targets.
#[derive(Clone, Debug)]
pub struct PreparedPage {
    pub page: DocPage,
    /// `(box, unit target)` for every segment with at least one token.
    pub segments: Vec<(BBox, Vec<f64>)>,
}

pub fn prepare_page(page: &DocPage, cfg: &PretrainConfig, vocab: &Vocab) -> PreparedPage {
    let (h, w) = (cfg.backbone.grid.height as u32, cfg.backbone.grid.width as u32);
    let page = if (page.height, page.width) == (h, w) {
        page.clone()
    } else {
        page.resized(h, w, vocab)
    };
    let provider = PseudoTargetProvider::new(cfg.target_dim, cfg.pseudo_seed);
    let segments = page
        .segments
        .iter()
        .filter(|s| s.bbox.is_valid())
        .filter_map(|s| {
            let ids = segment_token_ids(&s.text, vocab);
            provider.target(&ids).map(|t| (s.bbox.to_bbox(), t))
        })
        .collect();
    PreparedPage { page, segments }
}

/// Masking seed of `page` at `step`.
pub fn mask_seed(base: u64, step: u64, page: usize) -> u64 {
    crate::doc::page_seed(base ^ step.wrapping_mul(0xA24B_AED4_963E_E407), page)
}

/// Masked grids plus both batches for a set of pages.
pub fn build_batches(pages: &[&PreparedPage], cfg: &PretrainConfig, seed: u64) -> Result<(Vec<grid::TokenIdGrid>, MGLMBatch, SLMBatch, Vec<MaskPlan>)> {
    let (h, w) = (cfg.backbone.grid.height, cfg.backbone.grid.width);
    let mut grids = Vec::new();
    let mut mg = MGLMBatch::default();
    let mut sl = SLMBatch {
        tau: cfg.tau,
        ..Default::default()
    };
    let mut plans = Vec::new();
    for (pi, p) in pages.iter().enumerate() {
        let (masked, plan) = grid::apply_mglm_mask(&p.page.tokens, cfg.backbone.vocab_size, &cfg.mask, crate::doc::page_seed(seed, pi))?;
        grids.push(grid::grid_from_tokens(&masked, p.page.height, p.page.width, h, w));
        for e in &plan.entries {
            mg.page.push(pi);
            mg.boxes.push(p.page.tokens[e.token_index].bbox.to_bbox());
            mg.targets.push(e.original);
        }
        plans.push(plan);
        let n = p.segments.len();
        let chosen: Vec<usize> = if n > cfg.num_segments {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::doc::page_seed(seed ^ 0x51a, pi));
            let mut v = sample(&mut rng, n, cfg.num_segments).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        for i in chosen {
            sl.page.push(pi);
            sl.boxes.push(p.segments[i].0);
            sl.targets.push(p.segments[i].1.clone());
        }
    }
    sl.set_negatives(cfg.negatives);
    Ok((grids, mg, sl, plans))
}

/// Losses of one step; a term is `None` when it had nothing to score.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub mglm: Option<f64>,
    pub slm: Option<f64>,
    pub total: f64,
}

/// Records `L_MGLM + L_SLM` for the batch on `g`; returns the total node
/// (if any term contributes) and the individual values.
pub fn pretrain_loss<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &PretrainConfig,
    grids: &[grid::TokenIdGrid],
    mg: &MGLMBatch,
    sl: &SLMBatch,
) -> Result<(Option<Var>, StepLosses)> {
    let mut p2s = Vec::with_capacity(grids.len());
    for ids in grids {
        let s = backbone::grid_pyramid(g, store, &cfg.backbone.grid, ids)?;
        let p: FeaturePyramid = backbone::fpn(g, store, "fpn", &s)?;
        p2s.push(p.level(2));
    }
    let gather = |g: &mut Graph<T>, page: &[usize], boxes: &[BBox]| -> Result<Option<Var>> {
        let mut parts = Vec::new();
        for (pi, &p2) in p2s.iter().enumerate() {
            let bs: Vec<BBox> = boxes.iter().zip(page).filter(|(_, &p)| p == pi).map(|(b, _)| *b).collect();
            if !bs.is_empty() {
                parts.push(roi_features(g, p2, &bs)?);
            }
        }
        match parts.len() {
            0 => Ok(None),
            1 => Ok(Some(parts[0])),
            _ => g.concat_rows(&parts).map(Some),
        }
    };
    let mut terms = Vec::new();
    let mut out = StepLosses::default();
    let weighted = |g: &mut Graph<T>, l: Var, w: f64| if w == 1.0 { l } else { g.scale(l, T::from_f64(w)) };
    if cfg.mglm_weight > 0.0 {
        if let Some(f) = gather(g, &mg.page, &mg.boxes)? {
            if let Some(l) = mglm_loss(g, store, f, &mg.targets)? {
                out.mglm = Some(Float::to_f64(g.scalar_value(l)));
                terms.push(weighted(g, l, cfg.mglm_weight));
            }
        }
    }
    if cfg.slm_weight > 0.0 {
        if let Some(f) = gather(g, &sl.page, &sl.boxes)? {
            if let Some(l) = slm_loss(g, store, f, sl)? {
                out.slm = Some(Float::to_f64(g.scalar_value(l)));
                terms.push(weighted(g, l, cfg.slm_weight));
            }
        }
    }
    out.total = cfg.mglm_weight * out.mglm.unwrap_or(0.0) + cfg.slm_weight * out.slm.unwrap_or(0.0);
    let total = match terms.as_slice() {
        [] => None,
        [a] => Some(*a),
        [a, b] => Some(g.add(*a, *b)?),
        _ => unreachable!(),
    };
    Ok((total, out))
}

/// Forward, backward and one optimizer step on the batch. Parameters are
/// left untouched when neither objective has anything to score.
pub fn pretrain_step<T: Float>(
    pages: &[&PreparedPage],
    store: &mut ParamStore<T>,
    opt: &AdamW,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<StepLosses> {
    let (grids, mg, sl, _) = build_batches(pages, cfg, seed)?;
    let mut g = Graph::new();
    let (total, losses) = pretrain_loss(&mut g, store, cfg, &grids, &mg, &sl)?;
    if let Some(t) = total {
        let grads = g.backward(t)?;
        store.zero_grad();
        store.accumulate(&g, &grads)?;
        opt.step(store)?;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSchedule {
    pub steps: usize,
    pub pages_per_step: usize,
    pub seed: u64,
}

/// Runs `schedule.steps` steps, visiting pages in a fresh seeded order each
/// epoch. `log` sees every step's losses.
pub fn pretrain<T: Float>(
    pages: &[PreparedPage],
    store: &mut ParamStore<T>,
    opt: &AdamW,
    cfg: &PretrainConfig,
    schedule: &PretrainSchedule,
    mut log: impl FnMut(usize, &StepLosses),
) -> Result<Vec<StepLosses>> {
    if pages.is_empty() {
        return Err(Error::invalid("pretrain", "empty corpus"));
    }
    let per = schedule.pages_per_step.clamp(1, pages.len());
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        if order.len() < per {
            let mut fresh: Vec<usize> = (0..pages.len()).collect();
            rand::seq::SliceRandom::shuffle(fresh.as_mut_slice(), &mut rng);
            order.extend(fresh);
        }
        let batch: Vec<&PreparedPage> = order.drain(..per).map(|i| &pages[i]).collect();
        let l = pretrain_step(&batch, store, opt, cfg, mask_seed(schedule.seed, step as u64, 0))?;
        log(step, &l);
        history.push(l);
    }
    Ok(history)
}

/// Top-1 accuracy on masked positions of every page, with masks drawn from `seed`.
pub fn mglm_accuracy<T: Float>(pages: &[PreparedPage], store: &ParamStore<T>, cfg: &PretrainConfig, seed: u64) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, p) in pages.iter().enumerate() {
        let (grids, mg, _, _) = build_batches(&[p], cfg, mask_seed(seed, 0, i))?;
        if mg.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let s = backbone::grid_pyramid(&mut g, store, &cfg.backbone.grid, &grids[0])?;
        let pyr = backbone::fpn(&mut g, store, "fpn", &s)?;
        let f = roi_features(&mut g, pyr.level(2), &mg.boxes)?;
        let logits = mglm_logits(&mut g, store, f)?;
        let v = g.value(logits);
        let width = v.shape()[1];
        for (row, &t) in v.data().chunks(width).zip(&mg.targets) {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &x)| if x > row[best] { j } else { best });
            hit += (arg == t as usize) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Fraction of segments whose own pseudo-target has strictly the highest
/// cosine among the targets of the segments on its page (unmasked grids).
pub fn slm_alignment<T: Float>(pages: &[PreparedPage], store: &ParamStore<T>, cfg: &PretrainConfig) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in pages {
        if p.segments.is_empty() {
            continue;
        }
        let ids = grid::build_token_id_grid(&p.page, cfg.backbone.grid.height, cfg.backbone.grid.width);
        let mut g = Graph::new();
        let s = backbone::grid_pyramid(&mut g, store, &cfg.backbone.grid, &ids)?;
        let pyr = backbone::fpn(&mut g, store, "fpn", &s)?;
        let boxes: Vec<BBox> = p.segments.iter().map(|s| s.0).collect();
        let f = roi_features(&mut g, pyr.level(2), &boxes)?;
        let e = slm_embed(&mut g, store, f)?;
        let ev = g.value(e).to_f64_vec();
        let d = cfg.target_dim;
        for (i, row) in ev.chunks(d).enumerate() {
            let cos = |t: &[f64]| row.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
            let own = cos(&p.segments[i].1);
            let best_other = p
                .segments
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, s)| cos(&s.1))
                .fold(f64::NEG_INFINITY, f64::max);
            hit += (own > best_other) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Writes `step,mglm,slm,total` rows; absent terms are left blank.
pub fn write_loss_csv(path: &Path, history: &[StepLosses]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::from("step,mglm,slm,total\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{:.6}\n", opt(l.mglm), opt(l.slm), l.total));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
