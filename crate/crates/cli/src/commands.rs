//! The five pipeline commands. Each writes its artifacts under the run's
//! output directory and a `run.log` of what it did.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vgt_core::checkpoint;
use vgt_core::detect::{self, DetSample};
use vgt_core::doc::{self, CocoAnnotation, CocoDataset, CocoImage, DocPage, SynthConfig, Vocab};
use vgt_core::grid::{self, TokenIdGrid};
use vgt_core::pretrain::{self, PretrainSchedule, PreparedPage};
use vgt_core::{BBox, Float, ParamStore};

use crate::config::RunConfig;

/// Collects messages for the console and `run.log`.
#[derive(Default)]
pub struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    pub fn note(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::info!("{msg}");
        self.lines.push(msg);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut s = self.lines.join("\n");
        s.push('\n');
        write_file(&dir.join("run.log"), s.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    let full = match &cfg.vocab {
        Some(p) => Vocab::load(p)?,
        None => Vocab::toy(),
    };
    Ok(full.truncated(cfg.vocab_size)?)
}

fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig {
        page_size: cfg.image_size as u32,
        vocab_size: cfg.vocab_size,
        ..SynthConfig::default()
    }
}

/// Writes `pages/page_NNNN.{json,png}` plus `train.json` (and `val.json`
/// when validation pages are requested).
pub fn synth(cfg: &RunConfig, log: &mut RunLog) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let sc = synth_config(cfg);
    let names: Vec<String> = doc::SYNTH_CLASS_NAMES[..sc.num_classes].iter().map(|s| s.to_string()).collect();
    let total = cfg.synth_pages + cfg.synth_val_pages;
    let mut splits = [CocoDataset::default(), CocoDataset::default()];
    for ds in splits.iter_mut() {
        ds.categories = names.iter().enumerate().map(|(i, n)| (i as u64 + 1, n.clone())).collect();
    }
    for i in 0..total {
        let p = doc::synth_generate(&sc, &vocab, doc::page_seed(cfg.seed, i))?;
        let stem = format!("page_{i:04}");
        let dir = cfg.out.join("pages");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        doc::save_ocr_page(&p.page, &dir.join(format!("{stem}.json")))?;
        let ds = &mut splits[(i >= cfg.synth_pages) as usize];
        let index = ds.images.len();
        ds.images.push(CocoImage {
            id: i as u64 + 1,
            file_name: format!("pages/{stem}.png"),
            width: p.page.width,
            height: p.page.height,
        });
        for (class, b) in &p.gt {
            ds.annotations.push(CocoAnnotation {
                image_index: index,
                class: *class,
                bbox: b.to_bbox(),
            });
        }
    }
    doc::save_coco(&splits[0], &cfg.out.join("train.json"))?;
    if cfg.synth_val_pages > 0 {
        doc::save_coco(&splits[1], &cfg.out.join("val.json"))?;
    }
    log.note(format!("synth: {} train and {} val pages with seed {}", cfg.synth_pages, cfg.synth_val_pages, cfg.seed));
    Ok(())
}

/// Colour of a token id; `[PAD]` is white.
fn id_color(id: u32) -> [u8; 3] {
    if id == doc::PAD {
        return [255, 255, 255];
    }
    let h = (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    [(h >> 16) as u8, (h >> 32) as u8, (h >> 48) as u8]
}

pub fn grid_dump(cfg: &RunConfig, page: &Path, log: &mut RunLog) -> Result<()> {
    let vocab = load_vocab(cfg)?;
    let p = doc::load_ocr_page(page, &vocab)?;
    let ids = grid::build_token_id_grid(&p, cfg.image_size, cfg.image_size);
    let img = image::RgbImage::from_fn(ids.width as u32, ids.height as u32, |x, y| image::Rgb(id_color(ids.get(y as usize, x as usize))));
    let png = cfg.out.join("grid.png");
    fs::create_dir_all(&cfg.out)?;
    img.save(&png).with_context(|| format!("writing {}", png.display()))?;
    let mut csv = String::new();
    for r in 0..ids.height {
        let row: Vec<String> = (0..ids.width).map(|c| ids.get(r, c).to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_file(&cfg.out.join("grid.csv"), csv.as_bytes())?;
    log.note(format!("grid-dump: {}x{} grid, {} non-pad cells", ids.height, ids.width, ids.height * ids.width - ids.count(doc::PAD)));
    Ok(())
}

/// Every `*.json` page of `dir` in file-name order.
pub fn load_corpus(dir: &Path, vocab: &Vocab) -> Result<Vec<DocPage>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no OCR pages in {}", dir.display());
    }
    files.iter().map(|f| Ok(doc::load_ocr_page(f, vocab)?)).collect()
}

pub fn pretrain<T: Float>(cfg: &RunConfig, log: &mut RunLog) -> Result<()> {
    let corpus = cfg.corpus.as_ref().context("pretrain needs `corpus`")?;
    let vocab = load_vocab(cfg)?;
    let pc = cfg.pretrain();
    let pages: Vec<PreparedPage> = load_corpus(corpus, &vocab)?.iter().map(|p| pretrain::prepare_page(p, &pc, &vocab)).collect();
    let mut store = ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pretrain::init_pretrain_model(&mut store, &pc, &mut rng)?;
    log.note(format!("pretrain: {} pages, {} parameters, {} steps", pages.len(), store.num_scalars(), cfg.pretrain_steps));
    let schedule = PretrainSchedule {
        steps: cfg.pretrain_steps,
        pages_per_step: cfg.pretrain_pages_per_step,
        seed: cfg.seed,
    };
    let history = pretrain::pretrain(&pages, &mut store, &cfg.pretrain_opt(), &pc, &schedule, |s, l| {
        if (s + 1) % 100 == 0 {
            log::info!("step {} mglm {:?} slm {:?}", s + 1, l.mglm, l.slm);
        }
    })?;
    fs::create_dir_all(&cfg.out)?;
    pretrain::write_loss_csv(&cfg.out.join("pretrain_loss.csv"), &history)?;
    checkpoint::save(&store, &cfg.out.join("pretrain.ckpt"))?;
    let acc = pretrain::mglm_accuracy(&pages, &store, &pc, cfg.seed ^ 0xACC)?;
    let align = pretrain::slm_alignment(&pages, &store, &pc)?;
    log.note(format!("pretrain: masked-token accuracy {acc:.4}, segment alignment {align:.4}"));
    Ok(())
}

/// Pages and ground truth of a COCO file; OCR pages sit next to the images
/// with a `.json` extension.
pub fn load_split(coco: &Path, cfg: &RunConfig, vocab: &Vocab) -> Result<(CocoDataset, Vec<DetSample>)> {
    let ds = doc::load_coco(coco)?;
    let root = coco.parent().unwrap_or(Path::new("."));
    let size = cfg.image_size;
    let mut samples = Vec::with_capacity(ds.images.len());
    for (i, im) in ds.images.iter().enumerate() {
        let page = doc::load_ocr_page(&root.join(&im.file_name).with_extension("json"), vocab)?;
        let page = page.resized(size as u32, size as u32, vocab);
        let (sx, sy) = (size as f64 / im.width as f64, size as f64 / im.height as f64);
        let gt = ds
            .boxes_of(i)
            .into_iter()
            .map(|(c, b)| (c, BBox::new(b.x0 * sx, b.y0 * sy, b.x1 * sx, b.y1 * sy)))
            .collect();
        let grid: TokenIdGrid = grid::build_token_id_grid(&page, size, size);
        samples.push(DetSample {
            image: page.image.clone(),
            grid,
            gt,
        });
    }
    Ok((ds, samples))
}

fn category_names(ds: &CocoDataset) -> Vec<String> {
    ds.categories.iter().map(|c| c.1.clone()).collect()
}

/// Detections scaled from model pixels back to each image's own size.
fn to_image_space(dets: &mut [Vec<detect::Detection>], ds: &CocoDataset, size: usize) {
    for (d, im) in dets.iter_mut().zip(&ds.images) {
        let (sx, sy) = (im.width as f64 / size as f64, im.height as f64 / size as f64);
        for x in d.iter_mut() {
            let b = x.bbox;
            x.bbox = BBox::new(b.x0 * sx, b.y0 * sy, b.x1 * sx, b.y1 * sy);
        }
    }
}

pub fn train<T: Float>(cfg: &RunConfig, log: &mut RunLog) -> Result<()> {
    let train_path = cfg.train_data.as_ref().context("train needs `train_data`")?;
    let vocab = load_vocab(cfg)?;
    let (ds, train) = load_split(train_path, cfg, &vocab)?;
    let val = match &cfg.val_data {
        Some(p) => load_split(p, cfg, &vocab)?.1,
        None => Vec::new(),
    };
    let dc = cfg.detect(ds.num_classes());
    let mut store = ParamStore::<T>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    detect::init_detector(&mut store, &dc, &mut rng)?;
    if let Some(init) = &cfg.init {
        let src = checkpoint::load::<T>(init)?;
        let (loaded, missing, extra) = detect::load_prefix(&mut store, &src, "git.")?;
        log.note(format!("train: loaded {} GiT tensors from {}", loaded.len(), init.display()));
        if !missing.is_empty() {
            log.note(format!("train: missing from checkpoint: {}", missing.join(" ")));
        }
        if !extra.is_empty() {
            log.note(format!("train: unused checkpoint keys: {}", extra.join(" ")));
        }
    }
    log.note(format!("train: {} train / {} val pages, {} classes, {} steps", train.len(), val.len(), dc.num_classes, cfg.train_steps));
    let schedule = detect::DetectSchedule {
        steps: cfg.train_steps,
        batch: cfg.train_batch,
        eval_every: cfg.eval_every,
        seed: cfg.seed,
    };
    let tlog = detect::train_detector(&train, &val, &mut store, &dc, &cfg.train_opt(), &schedule, |s, l| {
        if (s + 1) % 100 == 0 {
            log::info!("step {} loss {l:.4}", s + 1);
        }
    })?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in tlog.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l:.6}");
    }
    write_file(&cfg.out.join("train_loss.csv"), csv.as_bytes())?;
    let mut ev = String::from("step,map\n");
    for (s, m) in &tlog.evals {
        let _ = writeln!(ev, "{s},{m:.6}");
        log.note(format!("train: step {s} val mAP {m:.4}"));
    }
    write_file(&cfg.out.join("val_map.csv"), ev.as_bytes())?;
    checkpoint::save(&store, &cfg.out.join("model.ckpt"))?;
    Ok(())
}

/// Scores a checkpoint on `val_data`, or a COCO results file when
/// `predictions` is given.
pub fn eval<T: Float>(cfg: &RunConfig, checkpoint_path: Option<&Path>, predictions: Option<&Path>, log: &mut RunLog) -> Result<f64> {
    let data = cfg.val_data.as_ref().context("eval needs `val_data`")?;
    let vocab = load_vocab(cfg)?;
    let (ds, samples) = load_split(data, cfg, &vocab)?;
    let image_ids: Vec<u64> = ds.images.iter().map(|i| i.id).collect();
    let cat_ids: Vec<u64> = ds.categories.iter().map(|c| c.0).collect();
    let gts: Vec<Vec<(usize, BBox)>> = (0..ds.images.len()).map(|i| ds.boxes_of(i)).collect();
    let dc = cfg.detect(ds.num_classes());
    let dets = match (predictions, checkpoint_path) {
        (Some(p), _) => detect::load_results(p, &image_ids, &cat_ids)?,
        (None, Some(c)) => {
            let store = checkpoint::load::<T>(c)?;
            let mut d = detect::predict_all(&store, &dc, &samples)?;
            to_image_space(&mut d, &ds, cfg.image_size);
            write_file(&cfg.out.join("predictions.json"), detect::results_json(&d, &image_ids, &cat_ids)?.as_bytes())?;
            d
        }
        (None, None) => bail!("eval needs --checkpoint or --predictions"),
    };
    let report = detect::evaluate_map(&dets, &gts, ds.num_classes(), dc.max_dets);
    write_file(&cfg.out.join("metrics.csv"), report.to_csv(&category_names(&ds)).as_bytes())?;
    log.note(format!("eval: {} images, mAP@[0.50:0.95] {:.4}", samples.len(), report.mean));
    Ok(report.mean)
}
