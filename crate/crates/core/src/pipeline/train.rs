use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Tape;
use crate::contrastive::contrastive_on_tape;
use crate::dataset::VideoSequence;
use crate::detection::{detection_loss_on_tape, render_targets, Detection, Grid};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, Adam};
use crate::temporal::{align, ground_truth_mask, BinaryMask};

use super::augment::{augment, prepare, FramePair};
use super::config::Config;
use super::model::{batch_tensor, image_to_tensor, BaseDetector, Model};

pub const LOSS_HEADER: &str = "epoch,step,detection,contrastive,total";

const DATA_STREAM: u64 = 1;
const CONTRAST_STREAM: u64 = 2;

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub detection: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Every consecutive frame pair `(t, t-1)`, `t ≥ 1`, of every sequence.
pub fn build_pairs(sequences: &[VideoSequence]) -> Vec<FramePair> {
    let mut pairs = Vec::new();
    for seq in sequences {
        let images: Vec<_> = seq.frames.iter().map(image_to_tensor).collect();
        for t in 1..seq.len() {
            pairs.push(FramePair {
                anchor: images[t].clone(),
                reference: images[t - 1].clone(),
                anchor_boxes: seq.detections(t),
                reference_boxes: seq.detections(t - 1),
            });
        }
    }
    pairs
}

/// Shuffles, augments and batches one epoch of pairs.
pub fn plan_epoch<R: Rng + ?Sized>(pairs: &[FramePair], cfg: &Config, rng: &mut R) -> Vec<Vec<FramePair>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let (h, w) = (cfg.input.height, cfg.input.width);
    let prepared: Vec<FramePair> = order
        .into_iter()
        .map(|i| {
            if cfg.augment.enabled {
                augment(&pairs[i], &cfg.augment, h, w, rng)
            } else {
                prepare(&pairs[i], h, w)
            }
        })
        .collect();
    prepared
        .chunks(cfg.optimizer.batch_size.max(1))
        .map(<[FramePair]>::to_vec)
        .collect()
}

fn gt_masks<'a>(boxes: impl Iterator<Item = &'a Vec<Detection>>, grid: Grid) -> Vec<BinaryMask> {
    boxes.map(|b| ground_truth_mask(b, grid)).collect()
}

/// Forward pass, combined loss and one optimizer update. The returned record
/// has `epoch` and `step` set to zero.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[FramePair],
    cfg: &Config,
    lr: f64,
    rng: &mut R,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let sw = cfg.modules;
    let (h, w) = (batch[0].anchor.shape()[1], batch[0].anchor.shape()[2]);
    let grid = Grid::for_image(h, w);
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape);
    let xa = tape.leaf(batch_tensor(batch.iter().map(|p| &p.anchor))?);
    let fa = model.features(&mut tape, &params, xa)?;

    let mut feature = fa;
    let mut contrast = None;
    if sw.uses_reference() {
        let xr = tape.leaf(batch_tensor(batch.iter().map(|p| &p.reference))?);
        let fr = model.features(&mut tape, &params, xr)?;
        if sw.fta {
            let mut masks = gt_masks(batch.iter().map(|p| &p.reference_boxes), grid);
            if cfg.fta.train_skip_prob > 0.0 {
                for m in &mut masks {
                    if rng.gen_bool(cfg.fta.train_skip_prob) {
                        *m = BinaryMask::absent(grid.height, grid.width);
                    }
                }
            }
            feature = align(&mut tape, fa, fr, &masks, sw.adaptive_weight)?.enhanced;
        }
        if sw.bda {
            feature = model.bda.forward(&mut tape, &params, feature, fr)?;
        }
        if sw.cbcl && cfg.contrastive.weight != 0.0 {
            let masks = gt_masks(
                batch
                    .iter()
                    .map(|p| &p.anchor_boxes)
                    .chain(batch.iter().map(|p| &p.reference_boxes)),
                grid,
            );
            let stacked = tape.concat_batch(fa, fr);
            contrast = contrastive_on_tape(&mut tape, stacked, &masks, cfg.contrastive.temperature, rng);
        }
    }

    let heads = model.detector.predict(&mut tape, &params, feature);
    let boxes: Vec<Vec<Detection>> = batch.iter().map(|p| p.anchor_boxes.clone()).collect();
    let targets = render_targets(&boxes, grid)?;
    let (det, record) = detection_loss_on_tape(&mut tape, heads, &targets, cfg.detection.weights())?;

    let lambda = cfg.contrastive.weight;
    let (root, contrastive) = match contrast {
        Some((c, value)) => (tape.weighted_sum(&[(det, 1.0), (c, lambda)]), value),
        None => (det, 0.0),
    };
    let mut grads = tape.backward(root);
    let grads = params.collect(&mut grads);
    adam.step(&mut model.store, &grads, lr);
    Ok(StepLoss {
        epoch: 0,
        step: 0,
        detection: record.total,
        contrastive,
        total: record.total + lambda * contrastive,
    })
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    rng
}

/// Epoch loop around [`train_step`].
#[derive(Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: Config,
    adam: Adam,
    data_rng: ChaCha8Rng,
    contrast_rng: ChaCha8Rng,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        Ok(Self::with_model(Model::new(&config.model, config.seed), config))
    }

    pub fn with_model(model: Model, config: &Config) -> Self {
        let mut contrast_rng = ChaCha8Rng::seed_from_u64(config.seed);
        contrast_rng.set_stream(CONTRAST_STREAM);
        Self {
            adam: Adam::new(model.store.len(), config.optimizer.weight_decay),
            model,
            config: config.clone(),
            data_rng: data_rng(config.seed),
            contrast_rng,
            epoch: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        let o = &self.config.optimizer;
        cosine_lr(o.learning_rate, o.final_learning_rate, self.epoch, o.epochs)
    }

    pub fn train_epoch(&mut self, pairs: &[FramePair]) -> Result<Vec<StepLoss>> {
        let lr = self.learning_rate();
        let batches = plan_epoch(pairs, &self.config, &mut self.data_rng);
        let mut out = Vec::with_capacity(batches.len());
        for (step, batch) in batches.iter().enumerate() {
            let mut loss = train_step(
                &mut self.model,
                &mut self.adam,
                batch,
                &self.config,
                lr,
                &mut self.contrast_rng,
            )?;
            loss.epoch = self.epoch;
            loss.step = step;
            log::debug!("epoch {} step {step}: {:.5}", self.epoch, loss.total);
            out.push(loss);
        }
        self.epoch += 1;
        Ok(out)
    }
}

/// Training of the bare detector on anchor frames, fed the same epoch plans
/// as [`Trainer`].
#[derive(Debug)]
pub struct BaseTrainer {
    pub model: BaseDetector,
    pub config: Config,
    adam: Adam,
    data_rng: ChaCha8Rng,
    pub epoch: usize,
}

impl BaseTrainer {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let model = BaseDetector::new(&config.model, config.seed);
        Ok(Self {
            adam: Adam::new(model.store.len(), config.optimizer.weight_decay),
            model,
            config: config.clone(),
            data_rng: data_rng(config.seed),
            epoch: 0,
        })
    }

    pub fn train_epoch(&mut self, pairs: &[FramePair]) -> Result<Vec<StepLoss>> {
        let o = &self.config.optimizer;
        let lr = cosine_lr(o.learning_rate, o.final_learning_rate, self.epoch, o.epochs);
        let batches = plan_epoch(pairs, &self.config, &mut self.data_rng);
        let mut out = Vec::with_capacity(batches.len());
        for (step, batch) in batches.iter().enumerate() {
            let (h, w) = (batch[0].anchor.shape()[1], batch[0].anchor.shape()[2]);
            let mut tape = Tape::new();
            let params = self.model.store.bind(&mut tape);
            let x = tape.leaf(batch_tensor(batch.iter().map(|p| &p.anchor))?);
            let f = self.model.detector.features(&mut tape, &params, x)?;
            let heads = self.model.detector.predict(&mut tape, &params, f);
            let boxes: Vec<Vec<Detection>> = batch.iter().map(|p| p.anchor_boxes.clone()).collect();
            let targets = render_targets(&boxes, Grid::for_image(h, w))?;
            let (det, record) =
                detection_loss_on_tape(&mut tape, heads, &targets, self.config.detection.weights())?;
            let mut grads = tape.backward(det);
            let grads = params.collect(&mut grads);
            self.adam.step(&mut self.model.store, &grads, lr);
            out.push(StepLoss {
                epoch: self.epoch,
                step,
                detection: record.total,
                contrastive: 0.0,
                total: record.total,
            });
        }
        self.epoch += 1;
        Ok(out)
    }
}

/// Append-only loss trace.
pub struct LossWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl LossWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{LOSS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, rows: &[StepLoss]) -> Result<()> {
        for r in rows {
            writeln!(
                self.out,
                "{},{},{:?},{:?},{:?}",
                r.epoch, r.step, r.detection, r.contrastive, r.total
            )?;
        }
        self.out.flush()?;
        Ok(())
    }
}
