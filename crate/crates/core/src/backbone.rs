//! Patch encoders for both streams, resolution adaptation to a 4-level
//! pyramid, element-wise fusion and FPN refinement.
//!
//! Spatial maps are `[C, H, W]`; token sequences are `[N, D]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::grid::{self, TokenIdGrid};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Pyramid levels in order; level `i` has stride `2^i`.
pub const LEVELS: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// 1-based blocks feeding levels 2..5; `None` spreads them evenly.
    pub taps: Option<[usize; 4]>,
}

impl EncoderConfig {
    /// Small model used for desk-scale experiments.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 32,
            mlp: 64,
            patch: 16,
            in_channels,
            height: 64,
            width: 64,
            taps: None,
        }
    }

    /// ViT-base geometry at 768×768.
    pub fn base(in_channels: usize) -> Self {
        Self {
            layers: 12,
            heads: 12,
            hidden: 768,
            mlp: 3072,
            patch: 16,
            in_channels,
            height: 768,
            width: 768,
            taps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("encoder config", msg));
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.mlp == 0 || self.patch == 0 {
            return bad("layers, heads, hidden, mlp and patch must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("{}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        // stride-32 level needs an even token grid
        if (self.height / self.patch) % 2 != 0 || (self.width / self.patch) % 2 != 0 {
            return bad(format!("token grid {}x{} must be even", self.height / self.patch, self.width / self.patch));
        }
        if self.patch != 16 {
            return bad(format!("patch {} unsupported: pyramid levels assume stride-16 tokens", self.patch));
        }
        if let Some(t) = self.taps {
            if t.iter().any(|&b| b == 0 || b > self.layers) {
                return bad(format!("taps {t:?} outside 1..={}", self.layers));
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    pub fn tap_blocks(&self) -> [usize; 4] {
        self.taps.unwrap_or_else(|| {
            let l = self.layers;
            [l.div_ceil(4), l.div_ceil(2), (3 * l).div_ceil(4), l]
        })
    }
}

/// Flat source index of every patch element: row `k` of the result is
/// patch `k` (row-major over patches) flattened as `(py, px, c)`.
pub fn patchify_index(h: usize, w: usize, ch: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid("patchify", format!("{h}x{w} not divisible by patch {p}")));
    }
    let mut idx = Vec::with_capacity(h * w * ch);
    for pi in 0..h / p {
        for pj in 0..w / p {
            for py in 0..p {
                for px in 0..p {
                    let base = ((pi * p + py) * w + pj * p + px) * ch;
                    idx.extend(base..base + ch);
                }
            }
        }
    }
    Ok(idx)
}

/// `[H, W, C]` → `[HW/P², P²·C]`.
pub fn patchify<T: Float>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::invalid("patchify", format!("need [H,W,C], got {s:?}")));
    }
    let idx = patchify_index(s[0], s[1], s[2], p)?;
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(vec![s[0] * s[1] / (p * p), p * p * s[2]], data)
}

pub fn unpatchify<T: Float>(x: &Tensor<T>, h: usize, w: usize, ch: usize, p: usize) -> Result<Tensor<T>> {
    let idx = patchify_index(h, w, ch, p)?;
    if x.numel() != idx.len() {
        return Err(Error::invalid("unpatchify", format!("{} values for {h}x{w}x{ch}", x.numel())));
    }
    let mut out = vec![T::zero(); idx.len()];
    for (k, &i) in idx.iter().enumerate() {
        out[i] = x.data()[k];
    }
    Tensor::new(vec![h, w, ch], out)
}

/// Differentiable patchify of a recorded `[H, W, C]` node.
pub fn patchify_var<T: Float>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("patchify", format!("need [H,W,C], got {s:?}")));
    }
    let idx = patchify_index(s[0], s[1], s[2], p)?;
    g.gather(x, idx, &[s[0] * s[1] / (p * p), p * p * s[2]])
}

fn lecun<T: Float, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

/// Registers encoder parameters under `prefix`.
pub fn init_encoder<T: Float, R: Rng>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let (d, m, pd) = (cfg.hidden, cfg.mlp, cfg.patch_dim());
    store.insert(format!("{prefix}.patch.w"), lecun(&[pd, d], pd, rng));
    store.insert(format!("{prefix}.patch.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.cls"), Tensor::randn(&[1, d], 0.02, rng));
    store.insert(format!("{prefix}.pos"), Tensor::randn(&[cfg.num_patches() + 1, d], 0.02, rng));
    for l in 0..cfg.layers {
        let b = format!("{prefix}.blk{l}");
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{b}.{ln}.g"), Tensor::full(&[d], T::one()));
            store.insert(format!("{b}.{ln}.b"), Tensor::zeros(&[d]));
        }
        store.insert(format!("{b}.qkv.w"), lecun(&[d, 3 * d], d, rng));
        store.insert(format!("{b}.qkv.b"), Tensor::zeros(&[3 * d]));
        store.insert(format!("{b}.proj.w"), lecun(&[d, d], d, rng));
        store.insert(format!("{b}.proj.b"), Tensor::zeros(&[d]));
        store.insert(format!("{b}.fc1.w"), lecun(&[d, m], d, rng));
        store.insert(format!("{b}.fc1.b"), Tensor::zeros(&[m]));
        store.insert(format!("{b}.fc2.w"), lecun(&[m, d], m, rng));
        store.insert(format!("{b}.fc2.b"), Tensor::zeros(&[d]));
    }
    Ok(())
}

/// `x · w + b` for `x: [N, in]`.
pub fn linear<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn attention<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, b: &str, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let d = cfg.hidden;
    let dh = d / cfg.heads;
    let qkv = linear(g, store, &format!("{b}.qkv"), x)?;
    let scale: T = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        heads.push(g.matmul(a, v)?);
    }
    let cat = g.concat_cols(&heads)?;
    linear(g, store, &format!("{b}.proj"), cat)
}

/// One pre-norm transformer block.
fn block<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, b: &str, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let g1 = g.param(store, &format!("{b}.ln1.g"))?;
    let b1 = g.param(store, &format!("{b}.ln1.b"))?;
    let h = g.layer_norm(x, g1, b1, 1e-6)?;
    let a = attention(g, store, b, cfg, h)?;
    let x = g.add(x, a)?;
    let g2 = g.param(store, &format!("{b}.ln2.g"))?;
    let b2 = g.param(store, &format!("{b}.ln2.b"))?;
    let h = g.layer_norm(x, g2, b2, 1e-6)?;
    let h = linear(g, store, &format!("{b}.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, store, &format!("{b}.fc2"), h)?;
    g.add(x, h)
}

/// Embeds `patches: [N, P²C]`, prepends `[CLS]`, adds positions and runs
/// every block. Returns the `[N+1, D]` sequence after each block.
pub fn encode_stream<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, cfg: &EncoderConfig, patches: Var) -> Result<Vec<Var>> {
    let s = g.shape(patches).to_vec();
    if s != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(Error::ShapeMismatch {
            op: "encode_stream",
            lhs: s,
            rhs: vec![cfg.num_patches(), cfg.patch_dim()],
        });
    }
    let x = linear(g, store, &format!("{prefix}.patch"), patches)?;
    let cls = g.param(store, &format!("{prefix}.cls"))?;
    let x = g.concat_rows(&[cls, x])?;
    let pos = g.param(store, &format!("{prefix}.pos"))?;
    let mut x = g.add(x, pos)?;
    let mut outs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        x = block(g, store, &format!("{prefix}.blk{l}"), cfg, x)?;
        outs.push(x);
    }
    Ok(outs)
}

/// Four maps at strides 4, 8, 16, 32, each `[C, H/s, W/s]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    /// Map of pyramid level `i ∈ 2..=5`.
    pub fn level(&self, i: usize) -> Var {
        self.levels[i - 2]
    }

    pub fn stride(i: usize) -> usize {
        1 << i
    }
}

/// Identity-initialised 2× transposed resamplers under `{prefix}.adapt`.
pub fn init_adapter<T: Float>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    for name in ["l2a", "l2b", "l3"] {
        let mut w = Tensor::zeros(&[d, d, 2, 2]);
        for i in 0..d {
            w.data_mut()[i * d * 4 + i * 4..i * d * 4 + i * 4 + 4].fill(T::one());
        }
        store.insert(format!("{prefix}.adapt.{name}.w"), w);
        store.insert(format!("{prefix}.adapt.{name}.b"), Tensor::zeros(&[d]));
    }
}

/// Drops `[CLS]` and folds `[N+1, D]` tokens into a `[D, gh, gw]` map.
pub fn tokens_to_map<T: Float>(g: &mut Graph<T>, x: Var, gh: usize, gw: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != gh * gw + 1 {
        return Err(Error::invalid("tokens_to_map", format!("{s:?} is not [{}x{}+1, D]", gh, gw)));
    }
    let t = g.slice_rows(x, 1, gh * gw)?;
    let t = g.transpose(t)?;
    g.reshape(t, &[s[1], gh, gw])
}

fn conv_t<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv_transpose2d(x, w, Some(b), 2)
}

/// Turns tapped block outputs into stride 4/8/16/32 maps.
pub fn multiscale_adapt<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, cfg: &EncoderConfig, blocks: &[Var]) -> Result<FeaturePyramid> {
    if blocks.len() != cfg.layers {
        return Err(Error::invalid("multiscale_adapt", format!("{} block outputs for {} layers", blocks.len(), cfg.layers)));
    }
    let (gh, gw) = (cfg.height / cfg.patch, cfg.width / cfg.patch);
    let taps = cfg.tap_blocks();
    let mut maps = [None; 4];
    for (slot, &b) in taps.iter().enumerate() {
        maps[slot] = Some(tokens_to_map(g, blocks[b - 1], gh, gw)?);
    }
    let a = format!("{prefix}.adapt");
    let x2 = conv_t(g, store, &format!("{a}.l2a"), maps[0].unwrap())?;
    let x2 = g.gelu(x2);
    let x2 = conv_t(g, store, &format!("{a}.l2b"), x2)?;
    let x3 = conv_t(g, store, &format!("{a}.l3"), maps[1].unwrap())?;
    let x4 = maps[2].unwrap();
    let x5 = g.max_pool2d(maps[3].unwrap())?;
    Ok(FeaturePyramid {
        levels: [x2, x3, x4, x5],
    })
}

/// Level-wise element-wise sum.
pub fn fuse<T: Float>(g: &mut Graph<T>, v: &FeaturePyramid, s: &FeaturePyramid) -> Result<FeaturePyramid> {
    let mut levels = v.levels;
    for (i, l) in levels.iter_mut().enumerate() {
        *l = g.add(v.levels[i], s.levels[i])?;
    }
    Ok(FeaturePyramid { levels })
}

pub fn init_fpn<T: Float, R: Rng>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) {
    for i in LEVELS {
        store.insert(format!("{prefix}.lat{i}.w"), lecun(&[d_out, d_in, 1, 1], d_in, rng));
        store.insert(format!("{prefix}.lat{i}.b"), Tensor::zeros(&[d_out]));
        store.insert(format!("{prefix}.out{i}.w"), lecun(&[d_out, d_out, 3, 3], 9 * d_out, rng));
        store.insert(format!("{prefix}.out{i}.b"), Tensor::zeros(&[d_out]));
    }
}

pub fn conv<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv2d(x, w, Some(b), 1, pad)
}

/// Lateral projections plus the nearest-neighbour top-down pathway,
/// before smoothing.
pub fn fpn_merge<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, z: &FeaturePyramid) -> Result<FeaturePyramid> {
    let mut levels = z.levels;
    let mut above: Option<Var> = None;
    for slot in (0..4).rev() {
        let i = LEVELS[slot];
        let lat = conv(g, store, &format!("{prefix}.lat{i}"), z.levels[slot], 0)?;
        let merged = match above {
            Some(p) => {
                let up = g.upsample2x(p)?;
                g.add(lat, up)?
            }
            None => lat,
        };
        levels[slot] = merged;
        above = Some(merged);
    }
    Ok(FeaturePyramid { levels })
}

pub fn fpn<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, z: &FeaturePyramid) -> Result<FeaturePyramid> {
    let merged = fpn_merge(g, store, prefix, z)?;
    let mut levels = merged.levels;
    for (slot, l) in levels.iter_mut().enumerate() {
        *l = conv(g, store, &format!("{prefix}.out{}", LEVELS[slot]), *l, 1)?;
    }
    Ok(FeaturePyramid { levels })
}

/// Which encoder streams feed the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Streams {
    Both,
    VisionOnly,
    GridOnly,
}

impl Streams {
    pub fn uses_vision(self) -> bool {
        self != Streams::GridOnly
    }

    pub fn uses_grid(self) -> bool {
        self != Streams::VisionOnly
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub vision: EncoderConfig,
    pub grid: EncoderConfig,
    pub vocab_size: usize,
    pub fpn_dim: usize,
    pub streams: Streams,
}

impl BackboneConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vision: EncoderConfig::desk(3),
            grid: EncoderConfig::desk(64),
            vocab_size,
            fpn_dim: 32,
            streams: Streams::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.grid.validate()?;
        if self.vision.in_channels != 3 {
            return Err(Error::invalid("backbone config", "vision stream takes 3 channels"));
        }
        if (self.vision.height, self.vision.width, self.vision.patch) != (self.grid.height, self.grid.width, self.grid.patch) {
            return Err(Error::invalid("backbone config", "streams must share image size and patch"));
        }
        if self.streams == Streams::Both && self.vision.hidden != self.grid.hidden {
            return Err(Error::invalid("backbone config", "fused streams need equal hidden sizes"));
        }
        if self.fpn_dim == 0 {
            return Err(Error::invalid("backbone config", "fpn_dim must be positive"));
        }
        Ok(())
    }
}

pub fn init_backbone<T: Float, R: Rng>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    if cfg.streams.uses_vision() {
        init_encoder(store, "vit", &cfg.vision, rng)?;
        init_adapter(store, "vit", cfg.vision.hidden);
    }
    if cfg.streams.uses_grid() {
        grid::init_embed_table(store, cfg.vocab_size, cfg.grid.in_channels, rng);
        init_encoder(store, "git", &cfg.grid, rng)?;
        init_adapter(store, "git", cfg.grid.hidden);
    }
    let d = if cfg.streams.uses_vision() { cfg.vision.hidden } else { cfg.grid.hidden };
    init_fpn(store, "fpn", d, cfg.fpn_dim, rng);
    Ok(())
}

/// Page pixels as a centred `[H, W, 3]` tensor.
pub fn image_tensor<T: Float>(img: &crate::doc::Raster) -> Tensor<T> {
    let data = img.data.iter().map(|&v| T::from_f64(v as f64 - 0.5)).collect();
    Tensor::new(vec![img.height, img.width, 3], data).expect("raster shape")
}

/// Image stream pyramid.
pub fn vision_pyramid<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &EncoderConfig, image: &Tensor<T>) -> Result<FeaturePyramid> {
    let x = g.constant(image.clone());
    let p = patchify_var(g, x, cfg.patch)?;
    let blocks = encode_stream(g, store, "vit", cfg, p)?;
    multiscale_adapt(g, store, "vit", cfg, &blocks)
}

/// Grid stream pyramid from token ids.
pub fn grid_pyramid<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &EncoderConfig, ids: &TokenIdGrid) -> Result<FeaturePyramid> {
    if (ids.height, ids.width) != (cfg.height, cfg.width) {
        return Err(Error::invalid("grid_pyramid", format!("grid {}x{} for a {}x{} model", ids.height, ids.width, cfg.height, cfg.width)));
    }
    let table = g.param(store, grid::EMBED_PARAM)?;
    let e = grid::embed_grid(g, table, ids)?;
    let p = patchify_var(g, e, cfg.patch)?;
    let blocks = encode_stream(g, store, "git", cfg, p)?;
    multiscale_adapt(g, store, "git", cfg, &blocks)
}

/// Full backbone: stream pyramids, fusion, FPN.
pub fn backbone_forward<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &BackboneConfig, image: &Tensor<T>, ids: &TokenIdGrid) -> Result<FeaturePyramid> {
    let z = match cfg.streams {
        Streams::Both => {
            let v = vision_pyramid(g, store, &cfg.vision, image)?;
            let s = grid_pyramid(g, store, &cfg.grid, ids)?;
            fuse(g, &v, &s)?
        }
        Streams::VisionOnly => vision_pyramid(g, store, &cfg.vision, image)?,
        Streams::GridOnly => grid_pyramid(g, store, &cfg.grid, ids)?,
    };
    fpn(g, store, "fpn", &z)
}
