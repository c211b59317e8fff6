use std::ops::ControlFlow;
use std::path::Path;

use hypervision::config::RunConfig;
use hypervision::data::{Dataset, PhantomSpec};
use hypervision::network::{Model, ModelConfig};
use hypervision::trainer::{self, read_metrics};

fn config(dir: &Path, out: &str, epochs: usize, extra: &str) -> RunConfig {
    RunConfig::parse(&format!(
        "base_channels = 4\nimage_size = 32\nepochs = {epochs}\nseed = 5\nout_dir = {}\n{extra}",
        dir.join(out).display()
    ))
    .unwrap()
}

fn data() -> Dataset {
    Dataset::synthetic(&PhantomSpec { size: 32, seed: 8, ..Default::default() }, 10).unwrap()
}

fn run(cfg: &RunConfig, ds: &Dataset) -> trainer::TrainOutcome {
    trainer::train(cfg, ds, &mut |_| ControlFlow::Continue(())).unwrap()
}

fn hand_count(b: usize, attention: bool) -> usize {
    let conv = |cin: usize, cout: usize| 9 * cin * cout;
    let bn = |c: usize| 2 * c;
    let res = |c: usize| 2 * conv(c, c) + 2 * bn(c);
    let width = |s: usize| b << s;
    let mut n = 0;
    let mut cin = 3;
    for s in 0..4 {
        n += conv(cin, width(s)) + bn(width(s)) + 2 * res(width(s));
        cin = width(s);
    }
    let mid = 16 * b;
    n += conv(cin, mid) + bn(mid) + res(mid);
    let mut up = mid;
    for d in 0..4 {
        let c = width(3 - d);
        n += conv(up + c, c) + bn(c) + 2 * res(c);
        up = c;
    }
    n += 3 * 4 * b + 3 + 3 * 2 * b + 3;
    let fused = b + 6;
    if attention {
        let hidden = fused.div_ceil(8);
        n += hidden * fused + hidden + fused * hidden + fused + 2 * 49 + 1;
    }
    n + 3 * fused + 3
}

#[test]
fn parameter_count_matches_hand_formula() {
    for b in [4, 8] {
        for attention in [false, true] {
            let m = Model::new(ModelConfig { base_channels: b, use_attention: attention, ..Default::default() }).unwrap();
            assert_eq!(m.parameter_count(), hand_count(b, attention), "base {b} attention {attention}");
        }
    }
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data();
    let straight = run(&config(dir.path(), "straight", 3, ""), &ds);
    let first = run(&config(dir.path(), "split", 1, ""), &ds);
    let resumed = run(&config(dir.path(), "split", 3, &format!("resume = {}\n", first.last_path().display())), &ds);
    let a = read_metrics(straight.metrics_path()).unwrap();
    let b = read_metrics(resumed.metrics_path()).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(resumed.metrics.len(), 2);
    let (ma, _) = hypervision::checkpoint::load(straight.last_path()).unwrap();
    let (mb, _) = hypervision::checkpoint::load(resumed.last_path()).unwrap();
    for (p, q) in ma.parameters().iter().zip(mb.parameters()) {
        assert!(p.value.bit_eq(&q.value), "{}", p.name);
    }
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data();
    let first = run(&config(dir.path(), "a", 1, ""), &ds);
    let cfg = config(dir.path(), "b", 2, &format!("use_attention = false\nresume = {}\n", first.last_path().display()));
    let err = trainer::train(&cfg, &ds, &mut |_| ControlFlow::Continue(())).unwrap_err();
    assert!(matches!(err, hypervision::Error::Config(_)), "{err}");
}

#[test]
fn best_checkpoint_tracks_lowest_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&config(dir.path(), "r", 3, ""), &data());
    let best = out.metrics.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
    assert_eq!(out.best_epoch, Some(best.epoch));
    let (model, state) = hypervision::checkpoint::load(out.best_path()).unwrap();
    assert_eq!(state.unwrap().epoch as usize, best.epoch);
    let ds = data();
    let eval = trainer::evaluate(&model, &ds.val, 4, 1e-5).unwrap();
    assert!((eval.loss - best.val_loss).abs() < 1e-12);
    assert!(std::fs::read_to_string(dir.path().join("r").join("config.txt")).unwrap().contains("base_channels = 4"));
}

#[test]
fn early_stop_and_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let out = trainer::train(&config(dir.path(), "s", 5, ""), &data(), &mut |_| ControlFlow::Break(())).unwrap();
    assert_eq!(out.metrics.len(), 1);
    let mut cfg = config(dir.path(), "t", 1, "");
    cfg.image_size = 48;
    let err = trainer::train(&cfg, &data(), &mut |_| ControlFlow::Continue(())).unwrap_err();
    assert!(err.to_string().contains("expects [1, 48, 48]"), "{err}");
}
