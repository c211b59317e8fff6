//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use hypervision::autograd::{Mode, Tape};
use hypervision::checkpoint::{self, Dtype, TrainState};
use hypervision::config::RunConfig;
use hypervision::conformance;
use hypervision::data::{self, netpbm, Dataset, GrayImage, PhantomSpec, RgbImage};
use hypervision::losses::{cross_entropy_value, dice_loss_value};
use hypervision::network::{Model, ModelConfig};
use hypervision::optim::{Adam, AdamConfig, PlateauSchedule};
use hypervision::trainer::{self, read_metrics};
use hypervision::{Error, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

fn gradient_conformance() -> Outcome {
    let t = Instant::now();
    let rows = conformance::run(None).map_err(e2s)?;
    let elapsed = t.elapsed();
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed()).map(|r| format!("{} {:.3e}", r.op, r.max_rel_error)).collect();
    check(failed.is_empty(), format!("failed ops: {}", failed.join(", ")))?;
    check(rows.len() == conformance::OPS.len(), "suite skipped ops")?;
    let model = rows.iter().find(|r| r.op == "model").ok_or("no model row")?;
    check(model.tolerance == 1e-3, "model tolerance")?;
    check(rows.iter().filter(|r| r.op != "model").all(|r| r.cases == 5), "expected 5 seeds per primitive")?;
    check(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    let worst = rows.iter().filter(|r| r.op != "model").map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} ops, worst primitive {worst:.2e}, model {:.2e}, {:.1}s", rows.len(), model.max_rel_error, elapsed.as_secs_f64()))
}

fn loss_identities() -> Outcome {
    let y = Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let self_loss = dice_loss_value(&y, &y, 1e-5).map_err(e2s)?;
    check(self_loss < 1e-6, format!("dice(y,y) = {self_loss}"))?;
    let disjoint = Tensor::new(&[1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let d = dice_loss_value(&y, &disjoint, 1e-5).map_err(e2s)?;
    check((1.0 - 1e-3..1.0).contains(&d), format!("disjoint dice = {d}"))?;
    let p = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let hand = dice_loss_value(&y, &p, 1e-5).map_err(e2s)?;
    check((hand - 1.0 / 3.0).abs() < 1e-4, format!("hand case = {hand}"))?;
    let (h, w) = (3, 5);
    let mut labels = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        labels[(i % 3) * h * w + i] = 1.0;
    }
    let onehot = Tensor::new(&[1, 3, h, w], labels).unwrap();
    let uniform = Tensor::full(&[1, 3, h, w], 1.0 / 3.0);
    let ce = cross_entropy_value(&onehot, &uniform).map_err(e2s)?;
    check((ce - 3f64.ln()).abs() < 1e-9, format!("uniform CE = {ce}"))?;
    Ok(format!("dice(y,y) {self_loss:.1e}, disjoint {d:.6}, hand {hand:.6}, CE {ce:.12}"))
}

fn adam_and_plateau() -> Outcome {
    let mut adam = Adam::new(AdamConfig::default(), [("w", &[1usize][..])]);
    let mut theta = Tensor::zeros(&[1]);
    let g = Tensor::full(&[1], 0.1);
    adam.step(&mut [&mut theta], &[&g]).map_err(e2s)?;
    let t1 = theta.data()[0];
    let expect = -1e-3 * 0.1 / (0.1 + 1e-8);
    check((t1 - expect).abs() < 1e-9, format!("theta1 = {t1}"))?;
    let mut s = PlateauSchedule::new(1e-3, 10, 0.1, 1e-7);
    s.update(1.0);
    let mut lrs = Vec::new();
    for _ in 0..10 {
        lrs.push(s.update(1.0));
    }
    check(lrs[..9].iter().all(|&l| l == 1e-3), format!("reduced early: {lrs:?}"))?;
    check((lrs[9] - 1e-4).abs() < 1e-18, format!("after 10 stale epochs lr = {}", lrs[9]))?;
    Ok(format!("theta1 {t1:.12}, lr after 10 stale epochs {:.0e}", lrs[9]))
}

fn shape_suite() -> Outcome {
    let model = Model::new(ModelConfig::default()).map_err(e2s)?;
    let mut train_model = model.clone();
    for k in [1usize, 2, 4] {
        let s = 16 * k;
        let x = Tensor::new(&[2, 1, s, s], (0..2 * s * s).map(|i| ((i * 37) % 255) as f64 / 255.0).collect()).unwrap();
        let eval = model.infer_heads(&x).map_err(e2s)?;
        let mut tape = Tape::new();
        let (heads, _) = train_model.forward(&mut tape, &x, Mode::Train, k as u64).map_err(e2s)?;
        let train: Vec<Tensor> = heads.all().iter().map(|&v| tape.value(v).clone()).collect();
        // Fresh running statistics leave eval-mode logits unnormalised, so f64
        // rounding can saturate an entry to exactly 0 or 1 there.
        for (which, head) in eval.iter().chain(&train).enumerate() {
            let open = which >= 3;
            check(head.shape() == [2, 3, s, s], format!("k={k} head {which} shape {:?}", head.shape()))?;
            let d = head.data();
            let plane = s * s;
            for b in 0..2 {
                for i in 0..plane {
                    let v = [d[(b * 3) * plane + i], d[(b * 3 + 1) * plane + i], d[(b * 3 + 2) * plane + i]];
                    let sum: f64 = v.iter().sum();
                    check((sum - 1.0).abs() < 1e-6, format!("k={k} pixel sum {sum}"))?;
                    let inside = |p: f64| if open { p > 0.0 && p < 1.0 } else { (0.0..=1.0).contains(&p) };
                    check(v.iter().all(|&p| inside(p)), format!("k={k} head {which} entry out of range: {v:?}"))?;
                }
            }
        }
    }
    Ok("k=1,2,4 x train/eval: three [2,3,16k,16k] heads, sums within 1e-6".into())
}

const DESK_MAX_EPOCHS: usize = 60;
const KIDNEY_TARGET: f64 = 0.85;
const TUMOR_TARGET: f64 = 0.75;
/// Also confirms training loss falls over the first ten epochs.
const MIN_EPOCHS: usize = 10;

fn desk_training() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data_dir = dir.path().join("data");
    data::write_dataset(&data_dir, &PhantomSpec { size: 64, seed: 0, ..Default::default() }, 250).map_err(e2s)?;
    let text = format!("profile = desk\ndata_dir = {}\nout_dir = {}\n", data_dir.display(), dir.path().join("run").display());
    let cfg = RunConfig::parse(&text).map_err(e2s)?;
    check(cfg.model.base_channels == 8 && cfg.image_size == 64 && cfg.batch_size == 4 && cfg.model.use_attention, "desk profile")?;
    check(cfg.epochs == DESK_MAX_EPOCHS, "desk epoch budget")?;
    let ds = data::load_dataset(&data_dir, cfg.image_size).map_err(e2s)?;
    check(ds.train.len() == 200 && ds.val.len() == 50, format!("split {}/{}", ds.train.len(), ds.val.len()))?;
    let outcome = trainer::train(&cfg, &ds, &mut |m| {
        if m.epoch >= MIN_EPOCHS && m.dice_kidney >= KIDNEY_TARGET && m.dice_tumor >= TUMOR_TARGET {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .map_err(e2s)?;
    let elapsed = t.elapsed();
    let last = outcome.metrics.last().ok_or("no epochs")?;
    check(
        last.dice_kidney >= KIDNEY_TARGET && last.dice_tumor >= TUMOR_TARGET,
        format!("after {} epochs: kidney {:.4}, tumor {:.4}", last.epoch, last.dice_kidney, last.dice_tumor),
    )?;
    check(elapsed < Duration::from_secs(30 * 60), format!("took {elapsed:?}"))?;
    let first = &outcome.metrics[0];
    let tenth = outcome.metrics.get(MIN_EPOCHS - 1).ok_or("fewer than ten epochs")?;
    check(tenth.train_loss < first.train_loss, format!("train loss {} at epoch 10 vs {} at epoch 1", tenth.train_loss, first.train_loss))?;
    let reached = outcome
        .metrics
        .iter()
        .find(|m| m.dice_kidney >= KIDNEY_TARGET && m.dice_tumor >= TUMOR_TARGET)
        .map_or(0, |m| m.epoch);
    Ok(format!(
        "targets first met at epoch {reached}; epoch {} of {}: mean val Dice kidney {:.4}, tumor {:.4}, {:.0}s",
        last.epoch,
        DESK_MAX_EPOCHS,
        last.dice_kidney,
        last.dice_tumor,
        elapsed.as_secs_f64()
    ))
}

fn small_config(dir: &std::path::Path, out: &str, epochs: usize) -> RunConfig {
    RunConfig::parse(&format!(
        "base_channels = 4\nimage_size = 32\nepochs = {epochs}\nseed = 11\ndata_dir = {}\nout_dir = {}\n",
        dir.join("data").display(),
        dir.join(out).display()
    ))
    .unwrap()
}

fn small_data() -> Dataset {
    Dataset::synthetic(&PhantomSpec { size: 32, seed: 2, ..Default::default() }, 10).unwrap()
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = small_config(dir.path(), "abl", 1);
    cfg.eval_both_configs = true;
    let out = trainer::ablation(&cfg, &small_data(), &mut |_, _| ControlFlow::Continue(())).map_err(e2s)?;
    check(out.runs.iter().map(|(a, _)| *a).collect::<Vec<_>>() == [false, true], "both settings trained")?;
    check(out.rows.len() == 8, format!("{} rows", out.rows.len()))?;
    let written = std::fs::read_to_string(dir.path().join("abl").join("ablation.txt")).map_err(|e| e.to_string())?;
    check(written == out.report, "report file differs")?;
    let header = written.lines().next().unwrap_or_default();
    check(header.contains("tumor") && header.contains("kidney") && header.contains("split"), "header")?;
    for tag in ["without_attention", "with_attention"] {
        for split in ["train", "val"] {
            check(
                written.lines().any(|l| l.starts_with(tag) && l.split_whitespace().nth(1) == Some(split)),
                format!("missing {tag}/{split}"),
            )?;
        }
        check(dir.path().join("abl").join(tag).join("metrics.csv").exists(), format!("{tag} metrics"))?;
    }
    Ok("both attention settings trained; train/val x tumor/kidney report written".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = small_data();
    let mut logs = Vec::new();
    for out in ["a", "b"] {
        let cfg = small_config(dir.path(), out, 2);
        let outcome = trainer::train(&cfg, &ds, &mut |_| ControlFlow::Continue(())).map_err(e2s)?;
        logs.push(read_metrics(outcome.metrics_path()).map_err(e2s)?);
    }
    check(logs[0].len() == 2 && logs[0].len() == logs[1].len(), "row count")?;
    let mut worst: f64 = 0.0;
    for (a, b) in logs[0].iter().zip(&logs[1]) {
        check(a.epoch == b.epoch, "epoch column")?;
        for (x, y) in [(a.train_loss, b.train_loss), (a.val_loss, b.val_loss), (a.dice_kidney, b.dice_kidney), (a.dice_tumor, b.dice_tumor), (a.lr, b.lr)] {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst <= 1e-12, format!("max cell difference {worst:e}"))?;

    let cfg = small_config(dir.path(), "c", 1);
    let mut model = Model::new(cfg.model.clone()).map_err(e2s)?;
    let mut state = TrainState {
        adam: Adam::new(AdamConfig::default(), model.parameters().iter().map(|p| (p.name.as_str(), p.value.shape()))),
        schedule: PlateauSchedule::new(cfg.lr, cfg.patience, cfg.lr_factor, cfg.min_lr),
        epoch: 0,
    };
    trainer::train_epoch(&mut model, &mut state, &ds.train, &cfg).map_err(e2s)?;
    let path = dir.path().join("rt.hvnc");
    checkpoint::save(&path, &model, Some(&state)).map_err(e2s)?;
    let (loaded, _) = checkpoint::load(&path).map_err(e2s)?;
    let (x, _) = trainer::batch_tensors(&ds.val, &[0, 1]).map_err(e2s)?;
    let before = model.infer_heads(&x).map_err(e2s)?;
    let after = loaded.infer_heads(&x).map_err(e2s)?;
    check(before.iter().zip(&after).all(|(a, b)| a.bit_eq(b)), "round-trip outputs differ")?;
    Ok(format!("CSV max cell difference {worst:e}; checkpoint round-trip bitwise"))
}

/// Byte ranges of tensor payloads in an f64 checkpoint.
fn payload_ranges(bytes: &[u8]) -> Vec<std::ops::Range<usize>> {
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let count = u32_at(8);
    let mut at = 12;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes([bytes[at], bytes[at + 1]]) as usize;
        at += 2 + name_len;
        assert_eq!(bytes[at], 1, "expected f64 payloads");
        let rank = bytes[at + 1] as usize;
        at += 2;
        let n: usize = (0..rank).map(|r| u32_at(at + 4 * r)).product();
        at += 4 * rank;
        out.push(at..at + 8 * n);
        at += 8 * n;
    }
    out
}

fn io_conformance() -> Outcome {
    let raw = data::generate_phantom_raw(&PhantomSpec { size: 40, seed: 3, ..Default::default() }, 1).map_err(e2s)?;
    let pgm = netpbm::encode_pgm(&raw.image);
    check(netpbm::encode_pgm(&netpbm::decode_pgm(&pgm).map_err(e2s)?) == pgm, "PGM bytes")?;
    let gray = GrayImage::new(7, 3, (0..21).map(|i| (i * 12) as u8).collect()).map_err(e2s)?;
    let pgm = netpbm::encode_pgm(&gray);
    check(netpbm::decode_pgm(&pgm).map_err(e2s)? == gray, "PGM pixels")?;
    let rgb = netpbm::overlay(&raw.image, &raw.mask).map_err(e2s)?;
    let ppm = netpbm::encode_ppm(&rgb);
    check(netpbm::encode_ppm(&netpbm::decode_ppm(&ppm).map_err(e2s)?) == ppm, "PPM bytes")?;
    let odd = RgbImage { width: 2, height: 1, pixels: vec![0, 128, 255, 1, 2, 3] };
    check(netpbm::decode_ppm(&netpbm::encode_ppm(&odd)).map_err(e2s)? == odd, "PPM pixels")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    netpbm::write_pgm(dir.path().join("a.pgm"), &raw.image).map_err(e2s)?;
    check(netpbm::read_pgm(dir.path().join("a.pgm")).map_err(e2s)? == raw.image, "PGM file")?;

    let model = Model::new(ModelConfig { base_channels: 4, ..Default::default() }).map_err(e2s)?;
    let bytes = checkpoint::encode(&checkpoint::model_checkpoint(&model, None), Dtype::F64).map_err(e2s)?;
    let ranges = payload_ranges(&bytes);
    let payload: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
    check(!payload.is_empty(), "no payload")?;
    let mut flips = 0;
    for k in 0..500usize {
        let pos = payload[(k * 7919 + 13) % payload.len()];
        for bit in [0x01u8, 0x80] {
            let mut b = bytes.clone();
            b[pos] ^= bit;
            match checkpoint::decode(&b) {
                Err(Error::Checksum { .. }) => flips += 1,
                other => return Err(format!("flip at byte {pos} gave {:?}", other.map(|_| ()))),
            }
        }
    }
    Ok(format!("PGM/PPM byte-exact; {flips} payload bit flips rejected by CRC"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient conformance", gradient_conformance),
        ("2 loss identities", loss_identities),
        ("3 adam step and plateau", adam_and_plateau),
        ("4 shape and normalization", shape_suite),
        ("5 desk-scale training", desk_training),
        ("6 ablation harness", ablation_harness),
        ("7 determinism", determinism),
        ("8 io conformance", io_conformance),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
