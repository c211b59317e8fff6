//! Training loop, evaluation, ablation and prediction behind the CLI.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use crate::autograd::{Mode, Tape};
use crate::checkpoint::{self, TrainState};
use crate::config::RunConfig;
use crate::data::{decode_mask, encode_mask, make_batches, overlay, preprocess, Dataset, GrayImage, LabelMap, RgbImage, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{combined_loss_value, total_loss, DiceAccumulator, DiceSummary};
use crate::network::Model;
use crate::optim::{Adam, AdamConfig, PlateauSchedule};
use crate::seed;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "epoch,train_loss,val_loss,dice_kidney,dice_tumor,lr";

/// One row of the metrics log. Dice columns are per-image means over the validation split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub dice_kidney: f64,
    pub dice_tumor: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.train_loss, self.val_loss, self.dice_kidney, self.dice_tumor, self.lr)
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::invalid("metrics", format!("malformed row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let r = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: r(1)?,
            val_loss: r(2)?,
            dice_kidney: r(3)?,
            dice_tumor: r(4)?,
            lr: r(5)?,
        })
    }
}

/// Reads a metrics CSV written by [`train`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::invalid("metrics", format!("{}: missing header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(EpochMetrics::parse_row).collect()
}

/// Stacks samples into `([B,1,H,W] images, [B,3,H,W] one-hot masks)`.
pub fn batch_tensors(samples: &[Sample], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .get(*idx.first().ok_or_else(|| Error::invalid("batch", "empty batch"))?)
        .ok_or_else(|| Error::invalid("batch", "index out of range"))?;
    let (h, w) = (first.mask.height, first.mask.width);
    let mut x = Vec::with_capacity(idx.len() * h * w);
    let mut y = Vec::with_capacity(idx.len() * 3 * h * w);
    for &i in idx {
        let s = samples.get(i).ok_or_else(|| Error::invalid("batch", "index out of range"))?;
        if s.image.shape() != [1, h, w] || (s.mask.height, s.mask.width) != (h, w) {
            return Err(Error::shape("batch", format!("sample {} has extents {:?}, batch uses {h}x{w}", s.id, s.image.shape())));
        }
        x.extend_from_slice(s.image.data());
        y.extend_from_slice(encode_mask(&s.mask)?.data());
    }
    Ok((Tensor::new(&[idx.len(), 1, h, w], x)?, Tensor::new(&[idx.len(), 3, h, w], y)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Sample-weighted mean total loss over the three heads.
    pub loss: f64,
    /// Dice of the final head.
    pub dice: DiceSummary,
}

/// Eval-mode loss and Dice over `samples`, in order.
pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize, dice_eps: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "no samples"));
    }
    let mut acc = DiceAccumulator::new();
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = batch_tensors(samples, chunk)?;
        let heads = model.infer_heads(&x)?;
        for h in &heads {
            loss += combined_loss_value(&y, h, dice_eps)? * chunk.len() as f64;
        }
        acc.add_batch(&heads[2], &y)?;
    }
    Ok(Evaluation { loss: loss / samples.len() as f64, dice: acc.summary() })
}

/// Dropout seed of one training batch; depends only on (master seed, epoch, batch).
pub fn batch_seed(master: u64, epoch: u64, batch: u64) -> u64 {
    seed::derive(seed::derive(master, epoch), batch)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub out_dir: PathBuf,
}

impl TrainOutcome {
    pub fn best_path(&self) -> PathBuf {
        self.out_dir.join("best.hvnc")
    }

    pub fn last_path(&self) -> PathBuf {
        self.out_dir.join("last.hvnc")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }
}

fn fresh_state(model: &Model, cfg: &RunConfig) -> TrainState {
    let adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..Default::default() },
        model.parameters().iter().map(|p| (p.name.as_str(), p.value.shape())),
    );
    TrainState { adam, schedule: PlateauSchedule::new(cfg.lr, cfg.patience, cfg.lr_factor, cfg.min_lr), epoch: 0 }
}

/// One epoch of shuffled mini-batch Adam; returns the sample-weighted mean loss.
pub fn train_epoch(model: &mut Model, state: &mut TrainState, samples: &[Sample], cfg: &RunConfig) -> Result<f64> {
    let epoch = state.epoch;
    let batches = make_batches(samples.len(), cfg.batch_size, cfg.seed, epoch)?;
    let mut tape = Tape::new();
    let mut total = 0.0;
    for (b, idx) in batches.iter().enumerate() {
        let (x, y) = batch_tensors(samples, idx)?;
        tape.reset();
        let (heads, vars) = model.forward(&mut tape, &x, Mode::Train, batch_seed(cfg.seed, epoch, b as u64))?;
        let loss = total_loss(&mut tape, &heads.all(), &y, cfg.dice_eps)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch as usize + 1, batch: b });
        }
        total += value * idx.len() as f64;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .0
            .iter()
            .zip(model.parameters())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params: Vec<&mut Tensor> = model.parameters_mut().iter_mut().map(|p| &mut p.value).collect();
        state.adam.step(&mut params, &grad_refs)?;
    }
    Ok(total / samples.len() as f64)
}

fn open_metrics(path: &Path, append: bool) -> Result<File> {
    if append && path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.lines().next() != Some(CSV_HEADER) {
            return Err(Error::invalid("train", format!("{} exists but is not a metrics log", path.display())));
        }
        return OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e));
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    Ok(f)
}

/// Full training run into `cfg.out_dir`: `metrics.csv`, `best.hvnc` (lowest
/// validation loss), `last.hvnc` (with optimizer state), `config.txt`.
/// `progress` sees every epoch as it completes and may stop the run early.
pub fn train(cfg: &RunConfig, data: &Dataset, progress: &mut dyn FnMut(&EpochMetrics) -> ControlFlow<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid(
            "train",
            format!("need both splits, found {} train / {} val samples", data.train.len(), data.val.len()),
        ));
    }
    let side = cfg.image_size;
    if let Some(s) = data.train.iter().chain(&data.val).find(|s| s.image.shape() != [1, side, side]) {
        return Err(Error::shape("train", format!("sample {} is {:?}, config expects [1, {side}, {side}]", s.id, s.image.shape())));
    }
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let config_path = out.join("config.txt");
    std::fs::write(&config_path, cfg.to_text()).map_err(|e| Error::io(&config_path, e))?;

    let (mut model, mut state, resumed) = match &cfg.resume {
        Some(path) => {
            let (model, state) = checkpoint::load(path)?;
            let state = state.ok_or_else(|| Error::invalid("resume", format!("{} carries no optimizer state", path.display())))?;
            let (mut a, mut b) = (model.config().clone(), cfg.model.clone());
            a.init_seed = 0;
            b.init_seed = 0;
            if a != b {
                return Err(Error::Config(format!("resume checkpoint was trained with {a:?}, config asks for {b:?}")));
            }
            (model, state, true)
        }
        None => {
            let model = Model::new(cfg.model.clone())?;
            let state = fresh_state(&model, cfg);
            (model, state, false)
        }
    };

    let metrics_path = out.join("metrics.csv");
    let mut log = open_metrics(&metrics_path, resumed)?;
    let mut outcome = TrainOutcome { metrics: Vec::new(), best_epoch: None, out_dir: out.clone() };
    while (state.epoch as usize) < cfg.epochs {
        let lr = state.schedule.lr;
        state.adam.config.lr = lr;
        let train_loss = train_epoch(&mut model, &mut state, &data.train, cfg)?;
        let eval = evaluate(&model, &data.val, cfg.batch_size, cfg.dice_eps)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: state.epoch as usize + 1, batch: 0 });
        }
        state.epoch += 1;
        let improved = eval.loss < state.schedule.best;
        state.schedule.update(eval.loss);
        let row = EpochMetrics {
            epoch: state.epoch as usize,
            train_loss,
            val_loss: eval.loss,
            dice_kidney: eval.dice.mean_kidney,
            dice_tumor: eval.dice.mean_tumor,
            lr,
        };
        if improved {
            checkpoint::save(outcome.best_path(), &model, Some(&state))?;
            outcome.best_epoch = Some(row.epoch);
        }
        checkpoint::save(outcome.last_path(), &model, Some(&state))?;
        writeln!(log, "{}", row.csv_row()).and_then(|_| log.flush()).map_err(|e| Error::io(&metrics_path, e))?;
        outcome.metrics.push(row);
        if progress(&row).is_break() {
            break;
        }
    }
    Ok(outcome)
}

/// Report row: (label, split, image count, Dice).
pub type TableRow = (String, Split, usize, DiceSummary);

/// Dice report with one row per (model, split), tumor before kidney.
pub fn format_table(rows: &[TableRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:<6} {:>6} {:>12} {:>12} {:>12} {:>12}",
        "model", "split", "images", "tumor(mean)", "kidney(mean)", "tumor(pool)", "kidney(pool)"
    );
    for (label, split, n, d) in rows {
        let _ = writeln!(
            s,
            "{:<28} {:<6} {:>6} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
            label,
            split.to_string(),
            n,
            d.mean_tumor,
            d.mean_kidney,
            d.pooled_tumor,
            d.pooled_kidney
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub runs: Vec<(bool, TrainOutcome)>,
    pub rows: Vec<TableRow>,
    pub report: String,
}

/// Trains without and with attention (sub-directories of `cfg.out_dir`) and
/// evaluates best and last weights on both splits. Writes `ablation.txt`.
pub fn ablation(cfg: &RunConfig, data: &Dataset, progress: &mut dyn FnMut(bool, &EpochMetrics) -> ControlFlow<()>) -> Result<AblationOutcome> {
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for attention in [false, true] {
        let mut sub = cfg.clone();
        sub.model.use_attention = attention;
        sub.eval_both_configs = false;
        sub.resume = None;
        let tag = if attention { "with_attention" } else { "without_attention" };
        sub.out_dir = cfg.out_dir.join(tag);
        let outcome = train(&sub, data, &mut |m| progress(attention, m))?;
        for (which, path) in [("best", outcome.best_path()), ("last", outcome.last_path())] {
            let (model, _) = checkpoint::load(&path)?;
            for split in [Split::Train, Split::Val] {
                let samples = data.split(split);
                let eval = evaluate(&model, samples, cfg.batch_size, cfg.dice_eps)?;
                rows.push((format!("{tag}/{which}"), split, samples.len(), eval.dice));
            }
        }
        runs.push((attention, outcome));
    }
    let report = format_table(&rows);
    let path = cfg.out_dir.join("ablation.txt");
    std::fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    Ok(AblationOutcome { runs, rows, report })
}

/// Side length of the first image listed in a dataset; images must be square.
pub fn native_size(dir: impl AsRef<Path>) -> Result<usize> {
    let dir = dir.as_ref();
    let (id, _) = crate::data::read_manifest(dir)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::invalid("dataset", format!("{} lists no samples", dir.display())))?;
    let img = crate::data::netpbm::read_pgm(dir.join("images").join(format!("{id}.pgm")))?;
    if img.width != img.height {
        return Err(Error::shape("dataset", format!("{id} is {}x{}; pass an explicit size", img.width, img.height)));
    }
    Ok(img.width)
}

/// Segmentation of one raw image at `size × size`: returns the label map and
/// the overlay on the resized grayscale image.
pub fn predict(model: &Model, image: &GrayImage, size: usize) -> Result<(LabelMap, RgbImage)> {
    let div = model.config().divisor();
    if size == 0 || !size.is_multiple_of(div) {
        return Err(Error::shape("predict", format!("size {size} must be a positive multiple of {div}")));
    }
    let x = preprocess(image, size)?;
    let probs = model.infer(&x.clone().reshape(&[1, 1, size, size])?)?;
    let mask = decode_mask(&probs)?;
    let gray = GrayImage::new(size, size, x.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect())?;
    let rgb = overlay(&gray, &mask)?;
    Ok((mask, rgb))
}
