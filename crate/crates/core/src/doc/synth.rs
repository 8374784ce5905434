//! Synthetic layout pages for desk-scale experiments.
//!
//! Classes 0 and 1 render as the same plain gray block and differ only in
//! their words, which come from disjoint halves of the word vocabulary.
//! The other classes are visually distinct. Every text line on a page
//! repeats one keyword and no keyword appears on two lines of the same page.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DocPage, Raster, Segment, Vocab, Word};
use crate::error::{Error, Result};
use crate::geom::PixelBox;

/// Category names used for synthetic classes, in class order.
pub const SYNTH_CLASS_NAMES: [&str; 6] = ["ParaText", "RegionKV", "Figure", "Table", "PageHeader", "Equation"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub page_size: u32,
    pub num_classes: usize,
    /// Inclusive range of regions per page.
    pub regions: (usize, usize),
    pub lines_per_region: (usize, usize),
    pub line_height: u32,
    pub region_width: (u32, u32),
    pub word_width: (u32, u32),
    pub word_gap: u32,
    /// Minimum free pixels between two regions.
    pub region_gap: u32,
    /// Only ids below this bound are used for words.
    pub vocab_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            page_size: 64,
            num_classes: 4,
            regions: (2, 4),
            lines_per_region: (1, 3),
            line_height: 8,
            region_width: (16, 40),
            word_width: (4, 10),
            word_gap: 2,
            region_gap: 4,
            vocab_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPage {
    pub page: DocPage,
    /// `(class, region box)` ground truth.
    pub gt: Vec<(usize, PixelBox)>,
}

/// Seed of page `index` in a corpus generated from `base`.
pub fn page_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Word ids each class may draw from.
pub fn class_pools(cfg: &SynthConfig, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    let ids: Vec<u32> = vocab.word_ids().into_iter().filter(|&i| (i as usize) < cfg.vocab_size).collect();
    if ids.len() < 4 || cfg.num_classes < 2 {
        return Err(Error::Infeasible(format!(
            "synthetic pages need at least 2 classes and 4 word tokens (have {} classes, {} tokens)",
            cfg.num_classes,
            ids.len()
        )));
    }
    let half = ids.len() / 2;
    Ok((0..cfg.num_classes)
        .map(|c| match c {
            0 => ids[..half].to_vec(),
            1 => ids[half..].to_vec(),
            _ => ids.clone(),
        })
        .collect())
}

fn step4(rng: &mut ChaCha8Rng, lo: u32, hi: u32) -> u32 {
    let (a, b) = (lo.div_ceil(4), hi / 4);
    4 * rng.gen_range(a..=b.max(a))
}

fn place_regions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, PixelBox, usize)> {
    let n = rng.gen_range(cfg.regions.0..=cfg.regions.1);
    let size = cfg.page_size as i32;
    let mut placed: Vec<(usize, PixelBox, usize)> = Vec::new();
    for _ in 0..n {
        let class = rng.gen_range(0..cfg.num_classes);
        let lines = rng.gen_range(cfg.lines_per_region.0..=cfg.lines_per_region.1);
        let h = (lines as u32 * cfg.line_height) as i32;
        for _attempt in 0..100 {
            let w = step4(rng, cfg.region_width.0, cfg.region_width.1.min(cfg.page_size)) as i32;
            if w > size || h > size {
                break;
            }
            let x0 = step4(rng, 0, (size - w) as u32) as i32;
            let y0 = step4(rng, 0, (size - h) as u32) as i32;
            let b = PixelBox::new(x0, y0, x0 + w, y0 + h);
            if b.x1 > size || b.y1 > size {
                continue;
            }
            let gap = cfg.region_gap as i32;
            if placed.iter().all(|(_, o, _)| !b.inflate(gap).intersects(o)) {
                placed.push((class, b, lines));
                break;
            }
        }
    }
    placed
}

fn render(cfg: &SynthConfig, gt: &[(usize, PixelBox)], words_by_region: &[Vec<PixelBox>]) -> Raster {
    let s = cfg.page_size as usize;
    let mut img = Raster::filled(s, s, 1.0);
    for ((class, b), words) in gt.iter().zip(words_by_region) {
        match class {
            0 | 1 => img.fill_box(b, 0.55),
            2 => img.fill_box(b, 0.25),
            3 => {
                img.fill_box(b, 0.9);
                words.iter().for_each(|w| img.fill_box(w, 0.1));
            }
            k => {
                img.fill_box(b, 0.7 - 0.05 * (*k as f32 - 4.0).min(6.0));
                words.iter().for_each(|w| img.fill_box(w, 0.35));
            }
        }
    }
    img
}

fn try_generate(cfg: &SynthConfig, vocab: &Vocab, pools: &[Vec<u32>], rng: &mut ChaCha8Rng) -> Option<SynthPage> {
    let regions = place_regions(cfg, rng);
    if regions.len() < cfg.regions.0.max(1) {
        return None;
    }
    let mut used = std::collections::HashSet::new();
    let mut words = Vec::new();
    let mut segments = Vec::new();
    let mut gt = Vec::new();
    let mut words_by_region = Vec::new();
    let lh = cfg.line_height as i32;
    for (class, b, lines) in regions {
        let mut region_words = Vec::new();
        for line in 0..lines as i32 {
            let free: Vec<u32> = pools[class].iter().copied().filter(|id| !used.contains(id)).collect();
            let keyword = *free.choose(rng)?;
            used.insert(keyword);
            let text = vocab.token(keyword)?.to_string();
            let top = b.y0 + line * lh;
            let mut x = b.x0;
            let mut line_words = Vec::new();
            loop {
                let mut w = rng.gen_range(cfg.word_width.0..=cfg.word_width.1) as i32;
                if x + w > b.x1 {
                    w = b.x1 - x;
                }
                if w < cfg.word_width.0.min(3) as i32 {
                    break;
                }
                line_words.push(PixelBox::new(x, top + 1, x + w, top + lh - 1));
                x += w + cfg.word_gap as i32;
                if x >= b.x1 {
                    break;
                }
            }
            let seg_box = line_words.iter().skip(1).fold(line_words[0], |u, w| u.union(w));
            segments.push(Segment {
                text: vec![text.as_str(); line_words.len()].join(" "),
                bbox: seg_box,
            });
            for wb in &line_words {
                words.push(Word {
                    text: text.clone(),
                    bbox: *wb,
                });
            }
            region_words.extend(line_words);
        }
        gt.push((class, b));
        words_by_region.push(region_words);
    }
    let image = render(cfg, &gt, &words_by_region);
    let page = DocPage::from_words(cfg.page_size, cfg.page_size, words, segments, image, vocab);
    Some(SynthPage { page, gt })
}

/// Generates one page; identical for identical `(cfg, vocab, seed)`.
pub fn synth_generate(cfg: &SynthConfig, vocab: &Vocab, seed: u64) -> Result<SynthPage> {
    let pools = class_pools(cfg, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        if let Some(p) = try_generate(cfg, vocab, &pools, &mut rng) {
            return Ok(p);
        }
    }
    Err(Error::Infeasible(format!("could not pack a synthetic page with seed {seed}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::FIRST_REGULAR;

    #[test]
    fn same_seed_same_page() {
        let v = Vocab::toy();
        let cfg = SynthConfig::default();
        assert_eq!(synth_generate(&cfg, &v, 7).unwrap(), synth_generate(&cfg, &v, 7).unwrap());
        assert_ne!(synth_generate(&cfg, &v, 7).unwrap(), synth_generate(&cfg, &v, 8).unwrap());
    }

    #[test]
    fn pair_classes_render_identically_with_disjoint_tokens() {
        let v = Vocab::toy();
        let cfg = SynthConfig::default();
        let pools = class_pools(&cfg, &v).unwrap();
        assert!(pools[0].iter().all(|id| !pools[1].contains(id)));
        assert!(pools[0].iter().chain(&pools[1]).all(|&id| id >= FIRST_REGULAR && (id as usize) < 64));
        let mut seen = [false; 2];
        for seed in 0..60 {
            let sp = synth_generate(&cfg, &v, seed).unwrap();
            let img = &sp.page.image;
            for (class, b) in &sp.gt {
                if *class > 1 {
                    continue;
                }
                seen[*class] = true;
                for y in b.y0..b.y1 {
                    for x in b.x0..b.x1 {
                        let o = (y as usize * img.width + x as usize) * 3;
                        assert_eq!(img.data[o], 0.55);
                    }
                }
                for t in sp.page.tokens.iter().filter(|t| b.contains(t.bbox.y0, t.bbox.x0)) {
                    assert!(pools[*class].contains(&t.token_id));
                }
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn keywords_are_unique_per_page() {
        let v = Vocab::toy();
        for seed in 0..30 {
            let sp = synth_generate(&SynthConfig::default(), &v, seed).unwrap();
            let mut texts: Vec<&str> = sp.page.segments.iter().map(|s| s.text.split(' ').next().unwrap()).collect();
            let n = texts.len();
            texts.sort();
            texts.dedup();
            assert_eq!(texts.len(), n);
        }
    }

    #[test]
    fn tiny_vocab_is_infeasible() {
        let v = Vocab::from_tokens(["a", "b"]).unwrap();
        assert!(matches!(synth_generate(&SynthConfig::default(), &v, 0), Err(Error::Infeasible(_))));
    }
}
