//! The 2-D token grid: every pixel inside a sub-token box carries that
//! token's id (and, after embedding, its vector); every other pixel is
//! `[PAD]`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::doc::{DocPage, SubToken, FIRST_REGULAR, MASK, PAD};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Parameter name of the grid embedding table `[vocab, channels]`.
pub const EMBED_PARAM: &str = "git.embed";

/// `height × width` token ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIdGrid {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

impl TokenIdGrid {
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.width + col]
    }

    pub fn count(&self, id: u32) -> usize {
        self.ids.iter().filter(|&&v| v == id).count()
    }
}

/// Paints `tokens` (boxes in a `page_h × page_w` frame) onto an `h × w`
/// grid in order, so later tokens win where boxes overlap.
pub fn grid_from_tokens(tokens: &[SubToken], page_h: u32, page_w: u32, h: usize, w: usize) -> TokenIdGrid {
    let mut ids = vec![PAD; h * w];
    let (sx, sy) = (w as f64 / page_w as f64, h as f64 / page_h as f64);
    let same = page_h as usize == h && page_w as usize == w;
    for t in tokens {
        let b = if same { t.bbox } else { t.bbox.rescale(sx, sy) };
        let b = b.clamp_to(w as i32, h as i32);
        for row in b.y0..b.y1 {
            let base = row as usize * w;
            ids[base + b.x0 as usize..base + b.x1 as usize].fill(t.token_id);
        }
    }
    TokenIdGrid { height: h, width: w, ids }
}

pub fn build_token_id_grid(page: &DocPage, h: usize, w: usize) -> TokenIdGrid {
    grid_from_tokens(&page.tokens, page.height, page.width, h, w)
}

/// Registers a `[vocab, channels]` table drawn from N(0, 0.02²).
pub fn init_embed_table<T: Float, R: Rng>(store: &mut ParamStore<T>, vocab: usize, channels: usize, rng: &mut R) {
    store.insert(EMBED_PARAM, Tensor::randn(&[vocab, channels], 0.02, rng));
}

/// Looks up every grid cell in `table` (`[vocab, C]`), giving `[H, W, C]`.
pub fn embed_grid<T: Float>(g: &mut Graph<T>, table: Var, grid: &TokenIdGrid) -> Result<Var> {
    let shape = g.shape(table).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("embed_grid", format!("table must be 2-D, got {shape:?}")));
    }
    let (vocab, ch) = (shape[0], shape[1]);
    let mut index = Vec::with_capacity(grid.ids.len() * ch);
    for &id in &grid.ids {
        if id as usize >= vocab {
            return Err(Error::invalid("embed_grid", format!("token id {id} >= vocab size {vocab}")));
        }
        let base = id as usize * ch;
        index.extend(base..base + ch);
    }
    g.gather(table, index, &[grid.height, grid.width, ch])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskEntry {
    pub token_index: usize,
    pub action: MaskAction,
    pub original: u32,
    /// Id placed on the grid.
    pub replacement: u32,
}

/// Masked positions in ascending token order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub entries: Vec<MaskEntry>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    /// Fraction of units selected, in (0, 1).
    pub ratio: f64,
    /// Select whole words (all their sub-tokens) instead of single sub-tokens.
    pub whole_word: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.15,
            whole_word: false,
        }
    }
}

/// Selects `round(ratio · n)` units; each selected sub-token becomes
/// `[MASK]` with probability 0.8, a random regular id with 0.1, or stays.
pub fn apply_mglm_mask(tokens: &[SubToken], vocab_size: usize, cfg: &MaskConfig, seed: u64) -> Result<(Vec<SubToken>, MaskPlan)> {
    if !(cfg.ratio > 0.0 && cfg.ratio < 1.0) {
        return Err(Error::invalid("apply_mglm_mask", format!("ratio {} outside (0, 1)", cfg.ratio)));
    }
    if vocab_size as u32 <= FIRST_REGULAR {
        return Err(Error::invalid("apply_mglm_mask", "vocabulary has no regular tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tokens.to_vec();
    if tokens.is_empty() {
        return Ok((out, MaskPlan::default()));
    }
    let mut selected: Vec<usize> = if cfg.whole_word {
        let mut words: Vec<usize> = tokens.iter().map(|t| t.parent_word).collect();
        words.dedup();
        let k = (cfg.ratio * words.len() as f64 + 0.5).floor() as usize;
        let chosen: Vec<usize> = sample(&mut rng, words.len(), k).into_iter().map(|i| words[i]).collect();
        (0..tokens.len()).filter(|&i| chosen.contains(&tokens[i].parent_word)).collect()
    } else {
        let k = (cfg.ratio * tokens.len() as f64 + 0.5).floor() as usize;
        sample(&mut rng, tokens.len(), k).into_vec()
    };
    selected.sort_unstable();
    let mut plan = MaskPlan::default();
    for i in selected {
        let u: f64 = rng.gen();
        let original = tokens[i].token_id;
        let (action, replacement) = if u < 0.8 {
            (MaskAction::Mask, MASK)
        } else if u < 0.9 {
            (MaskAction::Random, rng.gen_range(FIRST_REGULAR..vocab_size as u32))
        } else {
            (MaskAction::Keep, original)
        };
        out[i].token_id = replacement;
        plan.entries.push(MaskEntry {
            token_index: i,
            action,
            original,
            replacement,
        });
    }
    Ok((out, plan))
}
