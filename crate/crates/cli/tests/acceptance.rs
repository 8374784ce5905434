//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass `c1` .. `c8` to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use vgt_core::backbone::BackboneConfig;
use vgt_core::backbone::Streams;
use vgt_core::detect::{evaluate_map, iou, nms, Detection};
use vgt_core::detect::{self, DetSample, DetectConfig, DetectSchedule};
use vgt_core::doc::{page_seed, synth_generate, SubToken, SynthConfig, Vocab};
use vgt_core::gradcheck::{finite_difference_check, FdOptions, FdReport};
use vgt_core::grid::{apply_mglm_mask, build_token_id_grid, grid_from_tokens, MaskAction, MaskConfig};
use vgt_core::optim::AdamW;
use vgt_core::pretrain::{self, PretrainConfig, PretrainSchedule, PreparedPage};
use vgt_core::roi::{roi_align_plane, RoiBox};
use vgt_core::{BBox, Graph, ParamStore, PixelBox, Result, Tensor, Var};

const VOCAB: usize = 64;
const PAIR: [usize; 2] = [0, 1];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn vocab() -> Vocab {
    Vocab::toy().truncated(VOCAB).expect("toy vocabulary has 64 tokens")
}

// ---------------------------------------------------------------- C1

fn disjoint_tokens(rng: &mut ChaCha8Rng, h: i32, w: i32, n: usize) -> Vec<SubToken> {
    let mut out: Vec<SubToken> = Vec::new();
    for _ in 0..n * 4 {
        if out.len() == n {
            break;
        }
        let x0 = rng.gen_range(0..w);
        let y0 = rng.gen_range(0..h);
        let b = PixelBox::new(x0, y0, rng.gen_range(x0 + 1..=w), rng.gen_range(y0 + 1..=h));
        if out.iter().any(|t| t.bbox.intersects(&b)) {
            continue;
        }
        out.push(SubToken {
            token_id: 4 + out.len() as u32,
            bbox: b,
            parent_word: out.len(),
        });
    }
    out
}

fn c1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();

    // every cell holds its covering token or [PAD]
    for case in 0..500 {
        let (h, w) = (rng.gen_range(1..32), rng.gen_range(1..32));
        let n = rng.gen_range(0..16);
        let toks = disjoint_tokens(&mut rng, h, w, n);
        let g = grid_from_tokens(&toks, h as u32, w as u32, h as usize, w as usize);
        let areas_ok = toks.iter().all(|t| g.count(t.token_id) as i64 == t.bbox.area());
        let cells_ok = (0..h).all(|r| {
            (0..w).all(|c| {
                let want = toks.iter().find(|t| t.bbox.contains(r, c)).map_or(0, |t| t.token_id);
                g.get(r as usize, c as usize) == want
            })
        });
        if !(areas_ok && cells_ok) {
            failures.push(format!("grid case {case}"));
        }
    }

    // sub-word boxes tile their word on synthetic pages
    let v = vocab();
    let sc = SynthConfig::default();
    let mut words = 0;
    for i in 0..200 {
        let page = synth_generate(&sc, &v, page_seed(11, i)).expect("synthetic page").page;
        for (wi, w) in page.words.iter().enumerate() {
            let pieces: Vec<&SubToken> = page.tokens.iter().filter(|t| t.parent_word == wi).collect();
            let base = w.bbox.width() / pieces.len() as i32;
            let area: i64 = pieces.iter().map(|t| t.bbox.area()).sum();
            let disjoint = pieces
                .iter()
                .enumerate()
                .all(|(a, p)| pieces[a + 1..].iter().all(|q| !p.bbox.intersects(&q.bbox)));
            let equal = pieces[..pieces.len() - 1].iter().all(|p| p.bbox.width() == base);
            if area != w.bbox.area() || !disjoint || !equal {
                failures.push(format!("word {wi} of page {i}"));
            }
            words += 1;
        }
    }

    // 80/10/10 over 1000 seeds, on a 20x20 lattice of tokens
    let mut trng = ChaCha8Rng::seed_from_u64(2);
    let toks: Vec<SubToken> = (0..400)
        .map(|i| {
            let (r, c) = ((i / 20) as i32 * 3, (i % 20) as i32 * 3);
            SubToken {
                token_id: trng.gen_range(4..VOCAB as u32),
                bbox: PixelBox::new(c, r, c + 3, r + 3),
                parent_word: i,
            }
        })
        .collect();
    let mut counts = [0usize; 3];
    for seed in 0..1000 {
        let (_, plan) = apply_mglm_mask(&toks, VOCAB, &MaskConfig::default(), seed).expect("mask");
        for e in &plan.entries {
            counts[match e.action {
                MaskAction::Mask => 0,
                MaskAction::Random => 1,
                MaskAction::Keep => 2,
            }] += 1;
        }
    }
    let n = counts.iter().sum::<usize>() as f64;
    let fr: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let stats_ok = (fr[0] - 0.8).abs() <= 0.01 && (fr[1] - 0.1).abs() <= 0.01 && (fr[2] - 0.1).abs() <= 0.01;
    if !stats_ok {
        failures.push(format!("mask fractions {fr:?}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 30.0;
    outcome(
        pass,
        format!(
            "500 grids exhaustive, {words} words tiled, mask/random/keep {:.4}/{:.4}/{:.4}, {secs:.1}s{}",
            fr[0],
            fr[1],
            fr[2],
            if failures.is_empty() { String::new() } else { format!(", failures: {failures:?}") }
        ),
    )
}

// ---------------------------------------------------------------- C2

const GRAD_TOL: f64 = 1e-4;

fn check_op<F>(seed: u64, inputs: &[(&str, Tensor<f64>)], op: F) -> FdReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync + Send,
{
    let mut store = ParamStore::new();
    for (name, t) in inputs {
        store.insert(*name, t.clone());
    }
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = names.iter().map(|n| g.param(&store, n).unwrap()).collect();
        let o = op(&mut g, &vars).unwrap();
        g.shape(o).to_vec()
    };
    let w = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 77));
    finite_difference_check(
        &store,
        |g, s| {
            let vars: Vec<Var> = names.iter().map(|n| g.param(s, n)).collect::<Result<_>>()?;
            let o = op(g, &vars)?;
            let wv = g.constant(w.clone());
            let m = g.mul(o, wv)?;
            Ok(g.sum(m))
        },
        &FdOptions::default(),
    )
    .unwrap()
}

fn op_reports() -> Vec<(&'static str, FdReport)> {
    let mut out = Vec::new();
    for seed in 0..3u64 {
        let r = &mut ChaCha8Rng::seed_from_u64(seed);
        let rn = |s: &[usize], r: &mut ChaCha8Rng| Tensor::<f64>::randn(s, 1.0, r);
        let away = |s: &[usize], r: &mut ChaCha8Rng| {
            let n: usize = s.iter().product();
            let v = (0..n).map(|_| r.gen_range(0.2..1.5) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            Tensor::new(s.to_vec(), v).unwrap()
        };
        let (a, b) = (rn(&[3, 4], r), rn(&[3, 4], r));
        let m = rn(&[4, 2], r);
        out.push(("matmul", check_op(seed, &[("a", a.clone()), ("m", m)], |g, v| g.matmul(v[0], v[1]))));
        out.push(("add", check_op(seed, &[("a", a.clone()), ("b", b.clone())], |g, v| g.add(v[0], v[1]))));
        out.push(("sub", check_op(seed, &[("a", a.clone()), ("b", b.clone())], |g, v| g.sub(v[0], v[1]))));
        out.push(("mul", check_op(seed, &[("a", a.clone()), ("b", b.clone())], |g, v| g.mul(v[0], v[1]))));
        out.push(("add_row", check_op(seed, &[("a", a.clone()), ("r", rn(&[4], r))], |g, v| g.add_row(v[0], v[1]))));
        out.push(("scale", check_op(seed, &[("a", a.clone())], |g, v| Ok(g.scale(v[0], 0.7)))));
        out.push(("sum", check_op(seed, &[("a", a.clone())], |g, v| Ok(g.sum(v[0])))));
        out.push(("mean", check_op(seed, &[("a", a.clone())], |g, v| Ok(g.mean(v[0])))));
        out.push(("mean_last_axis", check_op(seed, &[("a", a.clone())], |g, v| g.mean_last_axis(v[0]))));
        out.push(("gelu", check_op(seed, &[("a", a.clone())], |g, v| Ok(g.gelu(v[0])))));
        out.push(("relu", check_op(seed, &[("a", away(&[3, 4], r))], |g, v| Ok(g.relu(v[0])))));
        out.push(("exp", check_op(seed, &[("a", a.clone())], |g, v| Ok(g.exp(v[0])))));
        out.push(("softmax", check_op(seed, &[("a", a.clone())], |g, v| Ok(g.softmax(v[0])))));
        out.push(("log_softmax", check_op(seed, &[("a", a.clone())], |g, v| Ok(g.log_softmax(v[0])))));
        out.push((
            "layer_norm",
            check_op(seed, &[("a", a.clone()), ("g", rn(&[4], r)), ("b", rn(&[4], r))], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-6)
            }),
        ));
        out.push(("l2_normalize_rows", check_op(seed, &[("a", a.clone())], |g, v| g.l2_normalize_rows(v[0]))));
        out.push(("transpose", check_op(seed, &[("a", a.clone())], |g, v| g.transpose(v[0]))));
        out.push(("reshape", check_op(seed, &[("a", a.clone())], |g, v| g.reshape(v[0], &[2, 6]))));
        out.push(("gather", check_op(seed, &[("a", a.clone())], |g, v| g.gather(v[0], vec![3, 0, 11, 3, 7], &[5]))));
        out.push(("select_rows", check_op(seed, &[("a", a.clone())], |g, v| g.select_rows(v[0], &[2, 0, 2]))));
        out.push(("pick", check_op(seed, &[("a", a.clone())], |g, v| g.pick(v[0], &[3, 1, 0]))));
        out.push(("slice_rows", check_op(seed, &[("a", a.clone())], |g, v| g.slice_rows(v[0], 1, 2))));
        out.push(("slice_cols", check_op(seed, &[("a", a.clone())], |g, v| g.slice_cols(v[0], 1, 2))));
        out.push((
            "concat_rows",
            check_op(seed, &[("a", a.clone()), ("b", rn(&[2, 4], r))], |g, v| g.concat_rows(&[v[0], v[1]])),
        ));
        out.push((
            "concat_cols",
            check_op(seed, &[("a", a.clone()), ("b", rn(&[3, 2], r))], |g, v| g.concat_cols(&[v[1], v[0]])),
        ));
        out.push((
            "conv2d",
            check_op(seed, &[("x", rn(&[2, 5, 5], r)), ("w", rn(&[3, 2, 3, 3], r)), ("b", rn(&[3], r))], |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
            }),
        ));
        out.push((
            "conv_transpose2d",
            check_op(seed, &[("x", rn(&[2, 2, 3], r)), ("w", rn(&[2, 3, 2, 2], r)), ("b", rn(&[3], r))], |g, v| {
                g.conv_transpose2d(v[0], v[1], Some(v[2]), 2)
            }),
        ));
        let mut vals: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.1).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, r.gen_range(0..=i));
        }
        out.push((
            "max_pool2d",
            check_op(seed, &[("x", Tensor::new(vec![2, 4, 4], vals).unwrap())], |g, v| g.max_pool2d(v[0])),
        ));
        out.push(("upsample2x", check_op(seed, &[("x", rn(&[2, 2, 3], r))], |g, v| g.upsample2x(v[0]))));
        let t: Vec<f64> = (0..6).map(|i| (i % 3 == 0) as u8 as f64).collect();
        out.push((
            "focal_loss",
            check_op(seed, &[("x", rn(&[6], r))], move |g, v| g.focal_loss(v[0], t.clone(), 0.25, 2.0)),
        ));
        let pred = Tensor::new(vec![2, 4], (0..8).map(|_| r.gen_range(0.3..3.0)).collect()).unwrap();
        let tgt: Vec<f64> = (0..8).map(|_| r.gen_range(0.3..3.0)).collect();
        out.push(("iou_loss", check_op(seed, &[("p", pred)], move |g, v| g.iou_loss(v[0], tgt.clone()))));
    }
    out
}

fn roi_report() -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let boxes = vec![
        RoiBox::new(1.3, 2.2, 17.9, 13.4),
        RoiBox::new(-3.0, 5.0, 9.0, 30.0),
        RoiBox::new(20.5, 20.5, 23.0, 22.0),
    ];
    check_op(21, &[("x", Tensor::randn(&[3, 7, 7], 1.0, &mut rng))], move |g, v| g.roi_align(v[0], &boxes, 4.0, 3))
}

fn pretrain_report() -> FdReport {
    let v = vocab();
    let cfg = PretrainConfig::desk(VOCAB);
    let sc = SynthConfig::default();
    let pages: Vec<PreparedPage> = (0..2)
        .map(|i| pretrain::prepare_page(&synth_generate(&sc, &v, page_seed(31, i)).unwrap().page, &cfg, &v))
        .collect();
    let refs: Vec<&PreparedPage> = pages.iter().collect();
    let (grids, mg, sl, _) = pretrain::build_batches(&refs, &cfg, 5).unwrap();
    assert!(!mg.is_empty() && sl.len() > 1, "batch must exercise both losses");
    let mut store = ParamStore::<f64>::new();
    pretrain::init_pretrain_model(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
    finite_difference_check(
        &store,
        |g, s| {
            let (total, _) = pretrain::pretrain_loss(g, s, &cfg, &grids, &mg, &sl)?;
            Ok(total.expect("both terms present"))
        },
        &FdOptions {
            max_coords_per_param: Some(3),
            ..FdOptions::default()
        },
    )
    .unwrap()
}

fn synth_samples(seed: u64, range: std::ops::Range<usize>, size: usize) -> Vec<DetSample> {
    let v = vocab();
    let sc = SynthConfig::default();
    range
        .map(|i| {
            let p = synth_generate(&sc, &v, page_seed(seed, i)).expect("synthetic page");
            DetSample {
                image: p.page.image.clone(),
                grid: build_token_id_grid(&p.page, size, size),
                gt: p.gt.iter().map(|(c, b)| (*c, b.to_bbox())).collect(),
            }
        })
        .collect()
}

fn detection_report() -> FdReport {
    let mut cfg = DetectConfig::desk(VOCAB, 4);
    cfg.backbone.fpn_dim = 8;
    let sample = synth_samples(41, 0..1, 64).remove(0);
    let mut store = ParamStore::<f64>::new();
    detect::init_detector(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(41)).unwrap();
    let targets = detect::assign_targets(&sample.gt, 64, 64);
    assert!(targets.num_positive() > 0);
    finite_difference_check(
        &store,
        |g, s| {
            let preds = detect::forward_sample(g, s, &cfg, &sample)?;
            detect::detection_loss(g, &preds, &targets)
        },
        &FdOptions {
            max_coords_per_param: Some(3),
            ..FdOptions::default()
        },
    )
    .unwrap()
}

/// Worst relative error, and whether every coordinate under the zero floor
/// is either structurally zero or agrees to the tolerance scaled by the floor.
fn summarize(r: &FdReport) -> (f64, bool) {
    let floor = FdOptions::default().zero_floor;
    let small_ok = r
        .coords
        .iter()
        .filter(|c| c.2.abs().max(c.3.abs()) < floor)
        .all(|c| c.2.abs() < 1e-12 || (c.2 - c.3).abs() <= GRAD_TOL * floor);
    (r.max_rel_err, small_ok)
}

fn c2() -> Outcome {
    let start = Instant::now();
    let ops = op_reports();
    let (mut worst_op, mut worst_name, mut floors_ok) = (0.0f64, "", true);
    for (name, r) in &ops {
        let (e, ok) = summarize(r);
        floors_ok &= ok;
        if e > worst_op {
            worst_op = e;
            worst_name = name;
        }
    }
    let parts = [("roi_align", roi_report()), ("pretrain", pretrain_report()), ("detection", detection_report())];
    let mut detail = format!("ops worst {worst_op:.2e} ({worst_name})");
    let mut worst = worst_op;
    for (name, r) in &parts {
        let (e, ok) = summarize(r);
        floors_ok &= ok;
        worst = worst.max(e);
        detail += &format!(", {name} {e:.2e} over {} coords", r.coords_checked);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < GRAD_TOL && floors_ok && secs < 300.0, format!("{detail}, {secs:.1}s"))
}

// ---------------------------------------------------------------- C3

fn tent_value(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            acc += plane[i * w + j] * tent(y - i as f64) * tent(x - j as f64);
        }
    }
    acc
}

/// Bilinear interpolant tabulated at 100 nodes per cell, read by nearest node.
fn dense_roi(plane: &[f64], h: usize, w: usize, b: &RoiBox, out: usize) -> Vec<f64> {
    const D: f64 = 100.0;
    let rows = ((h + 2) as f64 * D) as usize + 1;
    let cols = ((w + 2) as f64 * D) as usize + 1;
    let mut table = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            table[r * cols + c] = tent_value(plane, h, w, r as f64 / D - 1.0, c as f64 / D - 1.0);
        }
    }
    let read = |y: f64, x: f64| {
        if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
            return 0.0;
        }
        table[((y + 1.0) * D).round() as usize * cols + ((x + 1.0) * D).round() as usize]
    };
    let (bw, bh) = (b.width() / out as f64, b.height() / out as f64);
    let mut res = Vec::new();
    for ph in 0..out {
        for pw in 0..out {
            let mut acc = 0.0;
            for iy in 0..2 {
                for ix in 0..2 {
                    let y = b.y0 - 0.5 + (ph as f64 + (iy as f64 + 0.5) / 2.0) * bh;
                    let x = b.x0 - 0.5 + (pw as f64 + (ix as f64 + 0.5) / 2.0) * bw;
                    acc += read(y, x);
                }
            }
            res.push(acc / 4.0);
        }
    }
    res
}

fn graph_roi(map: &Tensor<f64>, b: RoiBox, stride: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(map.clone());
    let y = g.roi_align(x, &[b], stride, 3).unwrap();
    g.value(y).data().to_vec()
}

fn c3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let out = [1, 3, 7][rng.gen_range(0..3)];
        let plane: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // sample points land on the dense lattice
        let unit = 4 * out as i64;
        let mut span = |n: usize| {
            let start = rng.gen_range(-50..(n as i64 * 100 - 10));
            let len = unit * rng.gen_range(1..=((n as i64 + 1) * 100 / unit).max(1));
            (start as f64 / 100.0 + 0.5, (start + len) as f64 / 100.0 + 0.5)
        };
        let (x0, x1) = span(w);
        let (y0, y1) = span(h);
        let b = RoiBox::new(x0, y0, x1, y1);
        let got = roi_align_plane(&plane, h, w, &b, out).unwrap();
        for (a, e) in got.iter().zip(dense_roi(&plane, h, w, &b, out)) {
            worst = worst.max((a - e).abs());
        }
    }

    let mut lin: f64 = 0.0;
    let mut shift: f64 = 0.0;
    for case in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(300 + case);
        let f = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut r);
        let gm = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut r);
        let a = r.gen_range(-3.0..3.0);
        let (x, y) = (r.gen_range(0.0..20.0), r.gen_range(0.0..20.0));
        let b = RoiBox::new(x, y, x + r.gen_range(0.5..12.0), y + r.gen_range(0.5..12.0));
        let rf = graph_roi(&f, b, 4.0);
        let rg = graph_roi(&gm, b, 4.0);
        let scaled = Tensor::new(vec![2, 8, 8], f.data().iter().map(|v| a * v).collect()).unwrap();
        let summed = Tensor::new(vec![2, 8, 8], f.data().iter().zip(gm.data()).map(|(p, q)| p + q).collect()).unwrap();
        for (p, q) in graph_roi(&scaled, b, 4.0).iter().zip(&rf) {
            lin = lin.max((p - a * q).abs());
        }
        for ((s, p), q) in graph_roi(&summed, b, 4.0).iter().zip(&rf).zip(&rg) {
            lin = lin.max((s - (p + q)).abs());
        }

        // content inside a zero frame, moved by whole cells together with the box
        let patch: Vec<f64> = (0..36).map(|_| r.gen_range(-1.0..1.0)).collect();
        let place = |oy: usize, ox: usize| {
            let mut m = vec![0.0; 16 * 16];
            for i in 0..6 {
                for j in 0..6 {
                    m[(i + 2 + oy) * 16 + j + 2 + ox] = patch[i * 6 + j];
                }
            }
            Tensor::new(vec![1, 16, 16], m).unwrap()
        };
        let (dy, dx) = (r.gen_range(0..4), r.gen_range(0..4));
        let b0 = RoiBox::new(x * 0.5 + 4.0, y * 0.5 + 4.0, x * 0.5 + 12.0, y * 0.5 + 10.0);
        let moved = b0.shifted(dx as f64 * 4.0, dy as f64 * 4.0);
        for (p, q) in graph_roi(&place(0, 0), b0, 4.0).iter().zip(graph_roi(&place(dy, dx), moved, 4.0)) {
            shift = shift.max((p - q).abs());
        }
    }
    outcome(
        worst < 1e-3 && lin < 1e-12 && shift < 1e-12,
        format!("dense oracle max err {worst:.2e} on 50 pairs, linearity {lin:.1e}, translation {shift:.1e}"),
    )
}

// ---------------------------------------------------------------- C4 / C5

struct Pretrained {
    store: ParamStore<f32>,
    accuracy: f64,
    alignment: f64,
    secs: f64,
    identity_err: f64,
    identity_k: String,
}

fn corpus(cfg: &PretrainConfig) -> Vec<PreparedPage> {
    let v = vocab();
    let sc = SynthConfig::default();
    (0..20)
        .map(|i| pretrain::prepare_page(&synth_generate(&sc, &v, page_seed(0, i)).unwrap().page, cfg, &v))
        .collect()
}

/// Real untrained forward with every pseudo-target replaced by one shared
/// vector: each segment's candidates tie, so the loss is the mean of
/// `ln(K_i + 1)`.
fn symmetric_identity(pages: &[PreparedPage], cfg: &PretrainConfig) -> (f64, String) {
    let mut store = ParamStore::<f64>::new();
    pretrain::init_pretrain_model(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let refs: Vec<&PreparedPage> = pages.iter().take(4).collect();
    let (grids, _, mut sl, _) = pretrain::build_batches(&refs, cfg, 0).unwrap();
    let mut shared = vec![0.0; cfg.target_dim];
    shared[0] = 1.0;
    sl.targets.iter_mut().for_each(|t| *t = shared.clone());
    let mut g = Graph::new();
    let mut c = cfg.clone();
    c.mglm_weight = 0.0;
    let (_, losses) = pretrain::pretrain_loss(&mut g, &store, &c, &grids, &Default::default(), &sl).unwrap();
    let want = sl.negatives.iter().map(|n| ((n.len() + 1) as f64).ln()).sum::<f64>() / sl.len() as f64;
    let ks: std::collections::BTreeSet<usize> = sl.negatives.iter().map(Vec::len).collect();
    ((losses.slm.unwrap() - want).abs(), format!("{ks:?}"))
}

fn run_pretraining() -> Pretrained {
    let cfg = PretrainConfig::desk(VOCAB);
    let pages = corpus(&cfg);
    let (identity_err, identity_k) = symmetric_identity(&pages, &cfg);
    let start = Instant::now();
    let mut store = ParamStore::<f32>::new();
    pretrain::init_pretrain_model(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let opt = AdamW {
        lr: 1e-3,
        warmup_steps: 40,
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let schedule = PretrainSchedule {
        steps: 2000,
        pages_per_step: 4,
        seed: 0,
    };
    pretrain::pretrain(&pages, &mut store, &opt, &cfg, &schedule, |_, _| {}).unwrap();
    let accuracy = pretrain::mglm_accuracy(&pages, &store, &cfg, 99).unwrap();
    let alignment = pretrain::slm_alignment(&pages, &store, &cfg).unwrap();
    Pretrained {
        store,
        accuracy,
        alignment,
        secs: start.elapsed().as_secs_f64(),
        identity_err,
        identity_k,
    }
}

fn c4(p: &Pretrained) -> Outcome {
    outcome(
        p.accuracy >= 0.9 && p.secs < 300.0,
        format!("masked-token accuracy {:.3} after 2000 steps on 20 pages, {:.1}s", p.accuracy, p.secs),
    )
}

fn c5(p: &Pretrained) -> Outcome {
    outcome(
        p.alignment >= 0.95 && p.identity_err < 1e-12,
        format!(
            "alignment {:.3}; symmetric loss minus ln(K+1) = {:.1e} (K in {})",
            p.alignment, p.identity_err, p.identity_k
        ),
    )
}

// ---------------------------------------------------------------- C6

/// Matching by exhaustive search over the IoU table, precision envelope by
/// direct maximisation at every recall level.
fn oracle_map(dets: &[Vec<Detection>], gts: &[Vec<(usize, BBox)>], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let n_gt = gts.iter().flatten().filter(|g| g.0 == c).count();
            if n_gt == 0 {
                return None;
            }
            let mut ds: Vec<(usize, usize, f64, BBox)> = Vec::new();
            for (img, v) in dets.iter().enumerate() {
                for (k, d) in v.iter().enumerate() {
                    if d.class == c {
                        ds.push((img, k, d.score, d.bbox));
                    }
                }
            }
            ds.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
            let mut total = 0.0;
            for t in 0..10 {
                let thr = (50 + 5 * t) as f64 / 100.0;
                let mut used = vec![false; gts.iter().map(Vec::len).sum::<usize>() + gts.len()];
                let mut points = Vec::new();
                let mut tp = 0usize;
                for (rank, (img, _, _, b)) in ds.iter().enumerate() {
                    let offset: usize = gts[..*img].iter().map(Vec::len).sum();
                    let table: Vec<(usize, f64)> = gts[*img]
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| g.0 == c)
                        .map(|(k, g)| (k, iou(b, &g.1)))
                        .collect();
                    let mut best: Option<(usize, f64)> = None;
                    for &(k, o) in &table {
                        if !used[offset + k] && o >= thr && best.map_or(true, |(_, bo)| o > bo) {
                            best = Some((k, o));
                        }
                    }
                    if let Some((k, _)) = best {
                        used[offset + k] = true;
                        tp += 1;
                    }
                    points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
                }
                let mut ap = 0.0;
                for r in 0..=100 {
                    let level = r as f64 / 100.0;
                    ap += points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(0.0, f64::max);
                }
                total += ap / 101.0;
            }
            Some(total / 10.0)
        })
        .collect()
}

fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox::new(x0, y0, x1, y1)
}

fn det(class: usize, score: f64, b: BBox) -> Detection {
    Detection { class, score, bbox: b }
}

type Fixture = (&'static str, Vec<Vec<Detection>>, Vec<Vec<(usize, BBox)>>, usize);

fn fixtures() -> Vec<Fixture> {
    let a = bx(0.0, 0.0, 10.0, 10.0);
    let b = bx(20.0, 20.0, 40.0, 30.0);
    let c = bx(5.0, 30.0, 25.0, 60.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut random_dets = Vec::new();
    let gts_many = vec![(0, a), (0, b), (1, c), (1, bx(40.0, 0.0, 60.0, 15.0))];
    for (k, &(cls, g)) in gts_many.iter().enumerate() {
        for j in 0..4 {
            let jit = |v: f64, r: &mut ChaCha8Rng| v + r.gen_range(-3.0..3.0);
            let bb = bx(jit(g.x0, &mut rng), jit(g.y0, &mut rng), jit(g.x1, &mut rng), jit(g.y1, &mut rng));
            random_dets.push(det(cls, 0.9 - 0.05 * (k * 4 + j) as f64 + rng.gen_range(0.0..0.01), bb));
        }
    }
    vec![
        ("perfect", vec![vec![det(0, 0.9, a)]], vec![vec![(0, a)]], 1),
        ("iou 0.45", vec![vec![det(0, 0.9, bx(0.0, 0.0, 10.0, 4.5))]], vec![vec![(0, a)]], 1),
        (
            "duplicates",
            vec![vec![det(0, 0.95, bx(0.0, 0.0, 10.0, 8.0)), det(0, 0.9, a), det(0, 0.85, a)]],
            vec![vec![(0, a)]],
            1,
        ),
        (
            "multi-class two images",
            vec![
                vec![det(0, 0.8, a), det(1, 0.7, bx(21.0, 20.0, 40.0, 31.0)), det(1, 0.6, c)],
                vec![det(0, 0.9, bx(1.0, 0.0, 10.0, 10.0)), det(2, 0.5, c)],
            ],
            vec![vec![(0, a), (1, b)], vec![(0, a), (2, c), (2, b)]],
            3,
        ),
        (
            "zero-gt class",
            vec![vec![det(0, 0.9, a), det(1, 0.95, b), det(2, 0.4, c)]],
            vec![vec![(0, a), (2, c)]],
            3,
        ),
        ("half recall", vec![vec![det(0, 0.9, a)]], vec![vec![(0, a), (0, b)]], 1),
        (
            "false positive first",
            vec![vec![det(0, 0.99, c), det(0, 0.9, a), det(0, 0.5, b)]],
            vec![vec![(0, a), (0, b)]],
            1,
        ),
        (
            "neighbours",
            vec![vec![
                det(0, 0.9, bx(0.0, 0.0, 14.0, 10.0)),
                det(0, 0.8, bx(10.0, 0.0, 20.0, 10.0)),
                det(0, 0.7, bx(6.0, 0.0, 16.0, 10.0)),
            ]],
            vec![vec![(0, a), (0, bx(10.0, 0.0, 20.0, 10.0))]],
            1,
        ),
        (
            "iou exactly 0.75",
            vec![vec![det(0, 0.9, bx(0.0, 0.0, 4.0, 3.0)), det(0, 0.8, bx(10.0, 0.0, 14.0, 4.0))]],
            vec![vec![(0, bx(0.0, 0.0, 4.0, 4.0)), (0, bx(10.0, 0.0, 14.0, 4.0))]],
            1,
        ),
        ("jittered", vec![random_dets, vec![det(1, 0.3, c)]], vec![gts_many, vec![]], 2),
    ]
}

fn c6() -> Outcome {
    let mut worst: f64 = 0.0;
    for (name, dets, gts, k) in fixtures() {
        let got = evaluate_map(&dets, &gts, k, 100);
        let want = oracle_map(&dets, &gts, k);
        for (g, w) in got.per_class.iter().zip(&want) {
            match (g, w) {
                (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
                (None, None) => {}
                _ => return outcome(false, format!("fixture `{name}`: class presence differs")),
            }
        }
    }
    let a = bx(0.0, 0.0, 10.0, 10.0);
    let perfect = evaluate_map(&[vec![det(0, 0.9, a)]], &[vec![(0, a)]], 1, 100).mean;
    let miss = evaluate_map(&[vec![det(0, 0.9, bx(0.0, 0.0, 10.0, 4.5))]], &[vec![(0, a)]], 1, 100).mean;
    outcome(
        worst < 1e-6 && perfect == 1.0 && miss == 0.0,
        format!("max |AP - oracle| {worst:.1e} over 10 fixtures; perfect {perfect}, IoU 0.45 {miss}"),
    )
}

// ---------------------------------------------------------------- C7

/// Pair mAP of a detector that finds the pair's regions exactly as well as
/// `dets` but cannot tell the two apart: pair detections are merged
/// class-agnostically and every survivor is emitted under both labels.
fn chance_pair_map(dets: &[Vec<Detection>], gts: &[Vec<(usize, BBox)>], classes: usize, nms_iou: f64) -> f64 {
    let confused: Vec<Vec<Detection>> = dets
        .iter()
        .map(|v| {
            let pooled: Vec<Detection> = v
                .iter()
                .filter(|d| PAIR.contains(&d.class))
                .map(|d| Detection { class: 0, ..*d })
                .collect();
            let mut out: Vec<Detection> = v.iter().filter(|d| !PAIR.contains(&d.class)).copied().collect();
            for d in nms(&pooled, nms_iou) {
                for c in PAIR {
                    out.push(Detection { class: c, ..d });
                }
            }
            out
        })
        .collect();
    evaluate_map(&confused, gts, classes, 100).mean_over(&PAIR)
}

struct DetRun {
    mean: f64,
    pair: f64,
    chance: f64,
}

fn train_and_eval(streams: Streams, init: Option<&ParamStore<f32>>, train: &[DetSample], val: &[DetSample]) -> DetRun {
    let mut cfg = DetectConfig::desk(VOCAB, 4);
    cfg.backbone = BackboneConfig { streams, ..cfg.backbone };
    let mut store = ParamStore::<f32>::new();
    detect::init_detector(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    if let Some(src) = init {
        let (loaded, missing, _) = detect::load_prefix(&mut store, src, "git.").unwrap();
        assert!(missing.is_empty() && !loaded.is_empty(), "grid stream must load completely");
    }
    let opt = AdamW {
        lr: 1e-3,
        warmup_steps: 100,
        ..AdamW::default()
    };
    let schedule = DetectSchedule {
        steps: 2000,
        batch: 4,
        eval_every: 0,
        seed: 0,
    };
    detect::train_detector(train, val, &mut store, &cfg, &opt, &schedule, |_, _| {}).unwrap();
    let (report, dets) = detect::evaluate(&store, &cfg, val).unwrap();
    let gts: Vec<Vec<(usize, BBox)>> = val.iter().map(|s| s.gt.clone()).collect();
    DetRun {
        mean: report.mean,
        pair: report.mean_over(&PAIR),
        chance: chance_pair_map(&dets, &gts, 4, cfg.nms_iou),
    }
}

fn c7(pretrained: &ParamStore<f32>) -> Outcome {
    let start = Instant::now();
    let all = synth_samples(7, 0..250, 64);
    let (train, val) = all.split_at(200);
    let vision = train_and_eval(Streams::VisionOnly, None, train, val);
    let random = train_and_eval(Streams::Both, None, train, val);
    let warm = train_and_eval(Streams::Both, Some(pretrained), train, val);
    let secs = start.elapsed().as_secs_f64();
    let near_chance = (vision.pair - vision.chance).abs() <= 0.10;
    let gap = random.pair - vision.pair;
    let init_ok = warm.mean >= random.mean - 0.01;
    outcome(
        near_chance && gap >= 0.20 && init_ok && secs < 1200.0,
        format!(
            "pair mAP vision {:.3} (chance {:.3}, band 0.10), two-stream {:.3} (+{:.3}, need 0.20); val mAP random GiT {:.3}, pretrained GiT {:.3} (tolerance 0.01); {secs:.0}s",
            vision.pair, vision.chance, random.pair, gap, random.mean, warm.mean
        ),
    )
}

// ---------------------------------------------------------------- C8

/// SHA-256 and contents of every file under `dir`, keyed by relative path.
fn hash_tree(dir: &Path) -> BTreeMap<String, (String, Vec<u8>)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                let digest = Sha256::digest(&bytes);
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, (format!("{digest:x}"), bytes));
            }
        }
    }
    out
}

fn vgt(root: &Path, args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vgt"))
        .current_dir(root)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("vgt {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn run_pipeline(root: &Path) -> std::result::Result<(), String> {
    vgt(root, &["synth", "--pages", "6", "--val-pages", "3", "--out", "synth"])?;
    vgt(root, &["grid-dump", "--page", "synth/pages/page_0000.json", "--out", "grid"])?;
    vgt(root, &["pretrain", "--corpus", "synth/pages", "--set", "pretrain_steps=4", "--out", "pre"])?;
    vgt(
        root,
        &[
            "train", "--train", "synth/train.json", "--val", "synth/val.json", "--init", "pre/pretrain.ckpt",
            "--set", "train_steps=4", "--set", "eval_every=2", "--out", "train",
        ],
    )?;
    vgt(root, &["eval", "--data", "synth/val.json", "--checkpoint", "train/model.ckpt", "--out", "eval"])?;
    vgt(root, &["eval", "--data", "synth/val.json", "--predictions", "eval/predictions.json", "--out", "eval2"])?;
    Ok(())
}

fn c8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let mut hashes = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        if let Err(e) = run_pipeline(&root) {
            return outcome(false, e);
        }
        hashes.push(hash_tree(&root));
    }
    let differing: Vec<String> = hashes[0]
        .iter()
        .filter(|(k, v)| hashes[1].get(*k).map(|w| &w.0) != Some(&v.0))
        .map(|(k, (_, a))| {
            let b = hashes[1].get(k).map(|w| w.1.as_slice()).unwrap_or_default();
            let (a, b) = (String::from_utf8_lossy(a), String::from_utf8_lossy(b));
            match a.lines().zip(b.lines()).find(|(x, y)| x != y) {
                Some((x, y)) => format!("{k}: `{x}` vs `{y}`"),
                None => k.clone(),
            }
        })
        .collect();
    let same_set = hashes[0].keys().eq(hashes[1].keys());
    outcome(
        differing.is_empty() && same_set,
        format!(
            "synth, grid-dump, pretrain, train, eval x2: {} files identical across two runs{}",
            hashes[0].len(),
            if differing.is_empty() { String::new() } else { format!(", differing: {differing:?}") }
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.len() == 2 && a.starts_with('c'))
        .collect();
    let on = |c: &str| wanted.is_empty() || wanted.iter().any(|w| w == c);
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut timed = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let d = t.elapsed();
        println!("{} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o, d));
    };
    if on("c1") {
        timed("C1", &mut c1);
    }
    if on("c2") {
        timed("C2", &mut c2);
    }
    if on("c3") {
        timed("C3", &mut c3);
    }
    if on("c6") {
        timed("C6", &mut c6);
    }
    let pre = if on("c4") || on("c5") || on("c7") { Some(run_pretraining()) } else { None };
    if let Some(p) = &pre {
        if on("c4") {
            timed("C4", &mut || c4(p));
        }
        if on("c5") {
            timed("C5", &mut || c5(p));
        }
        if on("c7") {
            timed("C7", &mut || c7(&p.store));
        }
    }
    if on("c8") {
        timed("C8", &mut c8);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
