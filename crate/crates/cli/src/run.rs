//! Datasets, the training loop and evaluation.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use sha2::{Digest, Sha256};
use unode_core::autodiff::Tape;
use unode_core::checkpoint;
use unode_core::data::{self, augment, sample_rng, tta_predict, AugmentConfig, Manifest, Sample};
use unode_core::model::{dual_head_loss, head_softmax, total_nfe, ArchConfig, BlockTrace, Model};
use unode_core::params::AdamConfig;
use unode_core::seg::{object_scores, postprocess_instances, LabeledMask, ObjectScores, PostprocessConfig};
use unode_core::{Error, Result, Tensor};

use crate::config::RunConfig;

pub const VERSION: &str = concat!("unode ", env!("CARGO_PKG_VERSION"));

/// Mix `parts` into `seed` (splitmix64 finalizer per part).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub samples: Vec<Sample>,
}

pub const SPLITS: [&str; 3] = ["train", "tune", "test"];

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn synthetic(seed: u64, n: usize, size: usize, touching: f64, prefix: &str) -> Result<Self> {
        let samples = data::generate_synthetic(seed, n, size, touching)?;
        let names = (0..n).map(|i| format!("{prefix}_{i:03}")).collect();
        Ok(Self { names, samples })
    }

    /// The three synthetic splits of a run configuration, each from its own seed.
    pub fn synthetic_splits(cfg: &RunConfig) -> Result<[Dataset; 3]> {
        let n = [cfg.n_train, cfg.n_tune, cfg.n_test];
        let mk = |k: usize| {
            Self::synthetic(derive_seed(cfg.seed, &[k as u64]), n[k], cfg.size, cfg.touching_fraction, SPLITS[k])
        };
        Ok([mk(0)?, mk(1)?, mk(2)?])
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let (names, samples) = Manifest::read(manifest)?.load()?.into_iter().unzip();
        Ok(Self { names, samples })
    }

    /// Write `images/<name>.ppm`, `masks/<name>.pgm` and `<split>.tsv` under `dir`.
    pub fn write(&self, dir: &Path, split: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut pairs = Vec::new();
        for (name, s) in self.names.iter().zip(&self.samples) {
            let img = format!("images/{name}.ppm");
            let mask = format!("masks/{name}.pgm");
            data::write_ppm(&dir.join(&img), &s.image)?;
            data::write_pgm(&dir.join(&mask), &s.mask)?;
            pairs.push((img, mask));
        }
        let path = dir.join(format!("{split}.tsv"));
        Manifest::write(&path, &pairs)?;
        Ok(path)
    }
}

/// Stack images into `[B, 3, H, W]`.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(&shape, data)
}

/// Full and eroded class maps of a batch.
pub fn batch_targets(samples: &[&Sample], radius: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let mut full = Vec::new();
    let mut eroded = Vec::new();
    for s in samples {
        full.extend(s.full_target().into_iter().map(usize::from));
        eroded.extend(s.eroded_target(radius).into_iter().map(usize::from));
    }
    (Arc::new(full), Arc::new(eroded))
}

/// Per-image inference result.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Tensor<f32>,
    pub logits: Tensor<f32>,
    pub trace: Vec<BlockTrace>,
}

impl Prediction {
    pub fn nfe_per_block(&self) -> Vec<usize> {
        self.trace.iter().map(|b| b.per_sample.iter().map(|s| s.nfe).sum()).collect()
    }

    pub fn total_nfe(&self) -> usize {
        total_nfe(&self.trace).iter().sum()
    }

    pub fn instances(&self, pp: &PostprocessConfig) -> Result<LabeledMask> {
        let (_, _, h, w) = self.probs.dims4()?;
        let plane = h * w;
        let p: Vec<f64> = self.probs.data().iter().map(|&v| v as f64).collect();
        postprocess_instances(&p[plane..2 * plane], &p[3 * plane..4 * plane], w, h, pp)
    }
}

/// Forward one `[3, H, W]` image; with `tta` the probabilities average the
/// identity and both flips. Logits and trace are from the identity pass.
pub fn predict(model: &Model<f32>, image: &Tensor<f32>, tta: bool) -> Result<Prediction> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = image.clone().reshape(&shape)?;
    let first: RefCell<Option<(Tensor<f32>, Vec<BlockTrace>)>> = RefCell::new(None);
    let pass = |x: &Tensor<f32>| -> Result<Tensor<f32>> {
        let (logits, trace) = model.forward(x)?;
        let probs = head_softmax(&logits)?;
        first.borrow_mut().get_or_insert((logits, trace));
        Ok(probs)
    };
    let probs = if tta { tta_predict(&pass, &x)? } else { pass(&x)? };
    let (logits, trace) = first.into_inner().expect("identity pass ran");
    Ok(Prediction { probs, logits, trace })
}

pub fn loss_of_logits(logits: &Tensor<f32>, sample: &Sample, radius: usize) -> Result<f64> {
    let (full, eroded) = batch_targets(&[sample], radius);
    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone(), false);
    let l = dual_head_loss(&mut tape, v, full, eroded)?;
    Ok(tape.value(l).item() as f64)
}

/// Per-image evaluation row.
#[derive(Clone, Debug)]
pub struct ImageResult {
    pub name: String,
    pub scores: ObjectScores,
    pub loss: f64,
    pub nfe_per_block: Vec<usize>,
}

pub fn evaluate(model: &Model<f32>, ds: &Dataset, tta: bool, radius: usize) -> Result<Vec<ImageResult>> {
    let pp = PostprocessConfig::default();
    ds.names
        .iter()
        .zip(&ds.samples)
        .map(|(name, s)| {
            let p = predict(model, &s.image, tta)?;
            let pred = p.instances(&pp)?;
            Ok(ImageResult {
                name: name.clone(),
                scores: object_scores(&pred, &s.mask)?,
                loss: loss_of_logits(&p.logits, s, radius)?,
                nfe_per_block: p.nfe_per_block(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub tune_loss: f64,
    pub tune_dice: f64,
    /// Mean joint-batch NFE summed over blocks (0 without ODE blocks).
    pub mean_nfe: f64,
    pub seconds: f64,
}

pub fn curve_text(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\ttrain_loss\ttune_loss\ttune_dice\n");
    for r in curve {
        s += &format!("{}\t{:e}\t{:e}\t{:e}\n", r.epoch, r.train_loss, r.tune_loss, r.tune_dice);
    }
    s
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub curve: Vec<EpochRecord>,
    pub seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Write a checkpoint and `<path>.sha256`.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<String> {
    let bytes = checkpoint::encode_store(&model.params)?;
    fs::write(path, &bytes)?;
    let hash = sha256_hex(&bytes);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    fs::write(path.with_extension("ckpt.sha256"), format!("{hash}  {name}\n"))?;
    Ok(hash)
}

/// Rebuild a model from a checkpoint; the architecture comes from the
/// `arch.txt` beside it when present, else from `fallback`.
pub fn load_model(path: &Path, fallback: &ArchConfig) -> Result<Model<f32>> {
    let sidecar = path.parent().unwrap_or(Path::new(".")).join("arch.txt");
    let arch = if sidecar.exists() {
        ArchConfig::from_text(&fs::read_to_string(sidecar)?)?
    } else {
        fallback.clone()
    };
    let mut model = Model::build(arch, 0)?;
    checkpoint::load_into_store(&mut model.params, path)?;
    Ok(model)
}

/// Epoch loop of augment, forward, dual-head loss, backward and Adam. The
/// tune split is scored after every epoch and the best-Dice model is kept.
/// With `out`, the run directory receives the resolved config, architecture,
/// version, curve and checkpoints.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    tune_set: &Dataset,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if tune_set.is_empty() {
        return Err(Error::InvalidArgument("tune split is empty".into()));
    }
    let arch = cfg.arch_config()?;
    let mut model = Model::<f32>::build(arch.clone(), cfg.seed)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        fs::write(dir.join("arch.txt"), arch.to_text())?;
        fs::write(dir.join("version.txt"), format!("{VERSION}\n"))?;
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let aug = AugmentConfig::default();
    let start = Instant::now();
    let mut curve = Vec::new();
    let mut best = (model.params.clone(), 0usize, f64::NEG_INFINITY);
    let n = train_set.len();
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = sample_rng(derive_seed(cfg.seed, &[0x5eed]), epoch as u64);
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let (mut loss_sum, mut nfe_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set.samples[i];
                    if cfg.augment {
                        augment(s, derive_seed(cfg.seed, &[epoch as u64, i as u64]), &aug)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = samples.iter().collect();
            let x = batch_images(&refs)?;
            let (full, eroded) = batch_targets(&refs, cfg.erosion_radius);
            model.params.zero_grad();
            let (loss, trace) = model.loss_and_grad(&x, full, eroded)?;
            model.params.adam_step(&adam)?;
            loss_sum += loss;
            nfe_sum += total_nfe(&trace).first().copied().unwrap_or(0) as f64;
            batches += 1;
        }
        let results = evaluate(&model, tune_set, cfg.tta, cfg.erosion_radius)?;
        let m = results.len() as f64;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            tune_loss: results.iter().map(|r| r.loss).sum::<f64>() / m,
            tune_dice: results.iter().map(|r| r.scores.object_dice).sum::<f64>() / m,
            mean_nfe: nfe_sum / batches as f64,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if rec.tune_dice > best.2 {
            best = (model.params.clone(), epoch, rec.tune_dice);
            if let Some(dir) = out {
                save_checkpoint(&model, &dir.join("best.ckpt"))?;
            }
        }
        progress(&rec);
        curve.push(rec);
        if let Some(dir) = out {
            fs::write(dir.join("curve.tsv"), curve_text(&curve))?;
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&model, &dir.join("model.ckpt"))?;
    }
    let mut best_model = Model::build(arch, cfg.seed)?;
    best_model.params = best.0;
    Ok(TrainOutcome {
        model,
        best: best_model,
        best_epoch: best.1,
        curve,
        seconds: start.elapsed().as_secs_f64(),
    })
}
