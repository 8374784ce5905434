use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vgt_core::backbone::*;
use vgt_core::gradcheck::{finite_difference_check, FdOptions};
use vgt_core::grid::{grid_from_tokens, TokenIdGrid};
use vgt_core::doc::SubToken;
use vgt_core::{Graph, ParamStore, PixelBox, Tensor};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    let cols = t.shape()[t.shape().len() - 1];
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn p(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.value(name).unwrap().clone()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn affine(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    let mut y = mm(x, &mat(w));
    for row in y.iter_mut() {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    y
}

fn layer_norm(x: &Mat, g: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-6).sqrt() * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn softmax_row(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Straight-line encoder forward written from the block definition.
fn encoder_oracle(store: &ParamStore<f64>, cfg: &EncoderConfig, image: &Tensor<f64>) -> Vec<Mat> {
    let (h, w, c, ps) = (cfg.height, cfg.width, cfg.in_channels, cfg.patch);
    // row-major patches, each flattened row-major over (dy, dx, channel)
    let mut patches = Vec::new();
    for py in 0..h / ps {
        for px in 0..w / ps {
            let mut row = Vec::new();
            for dy in 0..ps {
                for dx in 0..ps {
                    for ch in 0..c {
                        row.push(image.data()[((py * ps + dy) * w + px * ps + dx) * c + ch]);
                    }
                }
            }
            patches.push(row);
        }
    }
    let emb = affine(&patches, &p(store, "enc.patch.w"), &p(store, "enc.patch.b"));
    let mut x = vec![p(store, "enc.cls").data().to_vec()];
    x.extend(emb);
    let pos = mat(&p(store, "enc.pos"));
    for (row, pr) in x.iter_mut().zip(&pos) {
        for (v, q) in row.iter_mut().zip(pr) {
            *v += q;
        }
    }
    let (d, nh) = (cfg.hidden, cfg.heads);
    let dh = d / nh;
    let mut outs = Vec::new();
    for l in 0..cfg.layers {
        let b = |s: &str| p(store, &format!("enc.blk{l}.{s}"));
        let hn = layer_norm(&x, &b("ln1.g"), &b("ln1.b"));
        let qkv = affine(&hn, &b("qkv.w"), &b("qkv.b"));
        let n = x.len();
        let mut cat = vec![vec![0.0; d]; n];
        for head in 0..nh {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh).map(|t| qkv[i][head * dh + t] * qkv[j][d + head * dh + t]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let a = softmax_row(&scores);
                for t in 0..dh {
                    cat[i][head * dh + t] = (0..n).map(|j| a[j] * qkv[j][2 * d + head * dh + t]).sum();
                }
            }
        }
        let attn = affine(&cat, &b("proj.w"), &b("proj.b"));
        for (row, a) in x.iter_mut().zip(&attn) {
            for (v, q) in row.iter_mut().zip(a) {
                *v += q;
            }
        }
        let hn = layer_norm(&x, &b("ln2.g"), &b("ln2.b"));
        let mut hid = affine(&hn, &b("fc1.w"), &b("fc1.b"));
        hid.iter_mut().flatten().for_each(|v| *v = gelu(*v));
        let mlp = affine(&hid, &b("fc2.w"), &b("fc2.b"));
        for (row, a) in x.iter_mut().zip(&mlp) {
            for (v, q) in row.iter_mut().zip(a) {
                *v += q;
            }
        }
        outs.push(x.clone());
    }
    outs
}

fn tiny() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        mlp: 16,
        patch: 16,
        in_channels: 3,
        height: 32,
        width: 64,
        taps: None,
    }
}

/// Non-trivial layer-norm affines so the oracle exercises them.
fn perturb_norms(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| n.contains(".ln")).map(String::from).collect();
    for n in names {
        for v in store.value_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

#[test]
fn encoder_matches_straight_line_oracle() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    init_encoder(&mut store, "enc", &cfg, &mut rng).unwrap();
    perturb_norms(&mut store, &mut rng);
    let image = Tensor::randn(&[cfg.height, cfg.width, 3], 1.0, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let patches = patchify_var(&mut g, x, cfg.patch).unwrap();
    let outs = encode_stream(&mut g, &store, "enc", &cfg, patches).unwrap();
    let want = encoder_oracle(&store, &cfg, &image);
    assert_eq!(outs.len(), want.len());
    for (o, w) in outs.iter().zip(&want) {
        for (a, b) in g.value(*o).data().iter().zip(w.iter().flatten()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn swapping_patches_with_their_positions_swaps_outputs() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    init_encoder(&mut store, "enc", &cfg, &mut rng).unwrap();
    let image = Tensor::randn(&[cfg.height, cfg.width, 3], 1.0, &mut rng);
    let patches = patchify(&image, 16).unwrap();
    let (i, j) = (1usize, 4usize);
    let pd = cfg.patch_dim();
    let mut swapped = patches.clone();
    for k in 0..pd {
        swapped.data_mut().swap(i * pd + k, j * pd + k);
    }
    let mut store2 = store.clone();
    let d = cfg.hidden;
    let pos = store2.value_mut("enc.pos").unwrap();
    for k in 0..d {
        // row 0 is [CLS]
        pos.data_mut().swap((i + 1) * d + k, (j + 1) * d + k);
    }
    let run = |s: &ParamStore<f64>, x: Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(x);
        let outs = encode_stream(&mut g, s, "enc", &cfg, v).unwrap();
        g.value(*outs.last().unwrap()).data().to_vec()
    };
    let a = run(&store, patches);
    let b = run(&store2, swapped);
    for row in 0..cfg.num_patches() + 1 {
        let src = if row == i + 1 {
            j + 1
        } else if row == j + 1 {
            i + 1
        } else {
            row
        };
        for k in 0..d {
            assert!((a[src * d + k] - b[row * d + k]).abs() < 1e-10);
        }
    }
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let mut cfg = BackboneConfig::desk(64);
    cfg.fpn_dim = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    init_backbone(&mut store, &cfg, &mut rng).unwrap();
    let image = Tensor::randn(&[64, 64, 3], 0.5, &mut rng);
    let toks: Vec<SubToken> = (0..12)
        .map(|i| {
            let (x, y) = (rng.gen_range(0..56), rng.gen_range(0..60));
            SubToken {
                token_id: 4 + i,
                bbox: PixelBox::new(x, y, x + rng.gen_range(2..8), y + 4),
                parent_word: i as usize,
            }
        })
        .collect();
    let ids = grid_from_tokens(&toks, 64, 64, 64, 64);
    let report = finite_difference_check(
        &store,
        |g, s| {
            let pyr = backbone_forward(g, s, &cfg, &image, &ids)?;
            let sums: Vec<_> = pyr.levels.iter().map(|&l| g.sum(l)).collect();
            let mut total = sums[0];
            for &x in &sums[1..] {
                total = g.add(total, x)?;
            }
            Ok(total)
        },
        &FdOptions {
            max_coords_per_param: Some(3),
            ..FdOptions::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{:?}", report.worst);
    // key biases shift every attention score of a row equally and get
    // exactly zero gradient; those are the only coordinates below the floor
    for (name, i, a) in &report.below_floor {
        assert!(a.abs() < 1e-12, "{name}[{i}] = {a}");
    }
}

fn shifted_tokens(dx: i32) -> Vec<SubToken> {
    [(0, 18, 10, 24, 7), (12, 20, 30, 26, 9), (3, 30, 28, 40, 11)]
        .iter()
        .enumerate()
        .map(|(i, &(x0, y0, x1, y1, id))| SubToken {
            token_id: id,
            bbox: PixelBox::new(x0 + dx, y0, x1 + dx, y1),
            parent_word: i,
        })
        .collect()
}

fn shifted_image(dx: usize, rng_seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut img = Tensor::zeros(&[64, 64, 3]);
    for y in 16..48 {
        for x in 0..32 {
            for c in 0..3 {
                img.data_mut()[(y * 64 + x + dx) * 3 + c] = rng.gen_range(-0.5..0.5);
            }
        }
    }
    img
}

/// Level-4 maps are `[D, 4, 4]`; checks `b` equals `a` moved one cell right.
fn assert_shifted_one_cell(a: &[f64], b: &[f64], d: usize) {
    for ch in 0..d {
        for r in 0..4 {
            for c in 0..3 {
                let x = a[(ch * 4 + r) * 4 + c];
                let y = b[(ch * 4 + r) * 4 + c + 1];
                assert!((x - y).abs() < 1e-9, "ch {ch} ({r},{c}): {x} vs {y}");
            }
        }
    }
}

#[test]
fn one_patch_translation_moves_both_streams_alike() {
    // without position embeddings attention is permutation-equivariant, so a
    // one-patch move over a blank margin is a token permutation
    let cfg = BackboneConfig::desk(64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    init_backbone(&mut store, &cfg, &mut rng).unwrap();
    for name in ["vit.pos", "git.pos"] {
        store.value_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let d = cfg.vision.hidden;
    let level4 = |img: &Tensor<f64>, ids: &TokenIdGrid| {
        let mut g = Graph::new();
        let v = vision_pyramid(&mut g, &store, &cfg.vision, img).unwrap();
        let s = grid_pyramid(&mut g, &store, &cfg.grid, ids).unwrap();
        (g.value(v.level(4)).data().to_vec(), g.value(s.level(4)).data().to_vec())
    };
    let (v0, s0) = level4(&shifted_image(0, 1), &grid_from_tokens(&shifted_tokens(0), 64, 64, 64, 64));
    let (v1, s1) = level4(&shifted_image(16, 1), &grid_from_tokens(&shifted_tokens(16), 64, 64, 64, 64));
    assert_shifted_one_cell(&v0, &v1, d);
    assert_shifted_one_cell(&s0, &s1, d);
}

#[test]
fn encoder_is_deterministic() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    init_encoder(&mut store, "enc", &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let image = Tensor::randn(&[cfg.height, cfg.width, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let pt = patchify_var(&mut g, x, 16).unwrap();
        let outs = encode_stream(&mut g, &store, "enc", &cfg, pt).unwrap();
        g.value(outs[1]).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn fuse_matches_elementwise_loop_and_commutes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::<f64>::new();
    let mk = |g: &mut Graph<f64>, rng: &mut ChaCha8Rng| FeaturePyramid {
        levels: [16, 8, 4, 2].map(|s| g.constant(Tensor::randn(&[3, s, s], 1.0, rng))),
    };
    let v = mk(&mut g, &mut rng);
    let s = mk(&mut g, &mut rng);
    let a = fuse(&mut g, &v, &s).unwrap();
    let b = fuse(&mut g, &s, &v).unwrap();
    for slot in 0..4 {
        let (va, sa) = (g.value(v.levels[slot]).data(), g.value(s.levels[slot]).data());
        for k in 0..va.len() {
            assert_eq!(g.value(a.levels[slot]).data()[k], va[k] + sa[k]);
        }
        assert_eq!(g.value(a.levels[slot]).data(), g.value(b.levels[slot]).data());
    }
}
