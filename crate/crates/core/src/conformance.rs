//! Finite-difference conformance suite over every differentiable primitive,
//! the composite blocks, the losses, and the full model.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormConfig, Mode, Padding, PoolKind, RunningStats, Tape, Var};
use crate::data::{encode_mask, LabelMap};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::losses::{self, DEFAULT_DICE_EPS};
use crate::network::{coordconv_augment, Model, ModelConfig, ParamVars};
use crate::seed;
use crate::tensor::Tensor;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-3;
/// Random instances per primitive.
pub const SEEDS: u64 = 5;

/// Every scope accepted by [`run`], in report order.
pub const OPS: &[&str] = &[
    "conv2d",
    "maxpool2d",
    "upsample_nearest2d",
    "elu",
    "sigmoid",
    "softmax_channels",
    "batchnorm2d",
    "dropout",
    "concat_channels",
    "add",
    "mul",
    "global_pool",
    "channel_pool",
    "coordconv_augment",
    "dice_loss",
    "cross_entropy",
    "combined_loss",
    "residual_block",
    "cbam",
    "model",
];

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub op: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Fixed-width report, one line per row.
pub fn format_rows(rows: &[SuiteRow]) -> String {
    let mut s = format!("{:<20} {:>5} {:>13} {:>9}  result\n", "op", "cases", "max_rel_err", "tol");
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:>5} {:>13.3e} {:>9.0e}  {}\n",
            r.op,
            r.cases,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    s
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn new(op: &str, case: u64) -> Self {
        Gen(ChaCha8Rng::seed_from_u64(seed::derive(seed::derive_named(0x5eed, op), case)))
    }

    fn dims(&mut self) -> [usize; 4] {
        let b = self.0.random_range(1..=2);
        let c = self.0.random_range(1..=4);
        let h = 2 * self.0.random_range(1..=4);
        let w = 2 * self.0.random_range(1..=4);
        [b, c, h, w]
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::rand_uniform(shape, lo, hi, &mut self.0)
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::rand_normal(shape, 1.0, &mut self.0)
    }

    fn one_hot(&mut self, b: usize, h: usize, w: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..b {
            let labels: Vec<u8> = (0..h * w).map(|_| self.0.random_range(0..3)).collect();
            data.extend_from_slice(encode_mask(&LabelMap::new(w, h, labels).unwrap()).unwrap().data());
        }
        Tensor::from_parts(vec![b, 3, h, w], data)
    }
}

fn named(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// `sum(y ⊙ w)` for a fixed random `w`, turning any output into a scalar.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check<F>(f: F, inputs: &[(String, Tensor)], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check(f, inputs, tol, &GradCheckOptions::default())
}

/// Binds `model` with the listed parameters replaced by the given tape handles.
fn bind_with(model: &Model, tape: &mut Tape, overrides: &[(&str, Var)]) -> ParamVars {
    ParamVars(
        model
            .parameters()
            .iter()
            .map(|p| match overrides.iter().find(|(n, _)| *n == p.name) {
                Some(&(_, v)) => v,
                None => tape.constant(p.value.clone()),
            })
            .collect(),
    )
}

fn block_model() -> Model {
    Model::new(ModelConfig { base_channels: 4, use_attention: true, init_seed: 11, ..Default::default() }).unwrap()
}

fn case(op: &str, k: u64) -> Result<GradCheckReport> {
    let mut g = Gen::new(op, k);
    let tol = PRIMITIVE_TOL;
    match op {
        "conv2d" => {
            let ([b, cin, h, w], cout, ks) = if k == 0 {
                ([2, 3, 6, 6], 2, 3)
            } else {
                (g.dims(), g.0.random_range(1..=4), if g.0.random_bool(0.5) { 3 } else { 1 })
            };
            let padding = if k.is_multiple_of(2) { Padding::Same } else { Padding::Valid };
            let (h, w) = if padding == Padding::Valid { (h.max(ks), w.max(ks)) } else { (h, w) };
            let inputs = named(vec![
                ("input", g.normal(&[b, cin, h, w])),
                ("kernel", g.normal(&[cout, cin, ks, ks])),
                ("bias", g.normal(&[cout])),
            ]);
            check(|t, v| { let y = t.conv2d(v[0], v[1], v[2], padding)?; project(t, y, k) }, &inputs, tol)
        }
        "maxpool2d" => {
            let d = g.dims();
            let inputs = named(vec![("input", g.uniform(&d, -1.0, 1.0))]);
            check(|t, v| { let y = t.maxpool2d(v[0], 2)?; project(t, y, k) }, &inputs, tol)
        }
        "upsample_nearest2d" => {
            let factor = 1 + (k as usize % 3);
            let d = g.dims();
            let inputs = named(vec![("input", g.normal(&d))]);
            check(|t, v| { let y = t.upsample_nearest2d(v[0], factor)?; project(t, y, k) }, &inputs, tol)
        }
        "elu" => {
            let d = g.dims();
            let inputs = named(vec![("input", g.uniform(&d, -3.0, 3.0))]);
            check(|t, v| { let y = t.elu(v[0], 1.0)?; project(t, y, k) }, &inputs, tol)
        }
        "sigmoid" => {
            let d = g.dims();
            let inputs = named(vec![("input", g.uniform(&d, -4.0, 4.0))]);
            check(|t, v| { let y = t.sigmoid(v[0])?; project(t, y, k) }, &inputs, tol)
        }
        "softmax_channels" => {
            let d = g.dims();
            let inputs = named(vec![("input", g.uniform(&d, -3.0, 3.0))]);
            check(|t, v| { let y = t.softmax_channels(v[0])?; project(t, y, k) }, &inputs, tol)
        }
        "batchnorm2d" => {
            let [b, c, h, w] = g.dims();
            let inputs = named(vec![
                ("input", g.normal(&[b, c, h, w])),
                ("gamma", g.uniform(&[c], 0.5, 1.5)),
                ("beta", g.normal(&[c])),
            ]);
            let mode = if k == SEEDS - 1 { Mode::Eval } else { Mode::Train };
            let stats = RunningStats { mean: g.normal(&[c]).into_data(), var: g.uniform(&[c], 0.5, 2.0).into_data() };
            check(
                |t, v| {
                    let mut s = stats.clone();
                    let y = t.batch_norm(v[0], v[1], v[2], &mut s, BatchNormConfig::default(), mode)?;
                    project(t, y, k)
                },
                &inputs,
                tol,
            )
        }
        "dropout" => {
            let d = g.dims();
            let inputs = named(vec![("input", g.normal(&d))]);
            check(|t, v| { let y = t.dropout(v[0], 0.3, Mode::Train, 77 + k)?; project(t, y, k) }, &inputs, tol)
        }
        "concat_channels" => {
            let [b, c, h, w] = g.dims();
            let c2 = g.0.random_range(1..=4);
            let inputs = named(vec![("a", g.normal(&[b, c, h, w])), ("b", g.normal(&[b, c2, h, w]))]);
            check(|t, v| { let y = t.concat_channels(&[v[0], v[1]])?; project(t, y, k) }, &inputs, tol)
        }
        "add" | "mul" => {
            let [b, c, h, w] = g.dims();
            let other = match k % 3 {
                0 => vec![b, c, h, w],
                1 => vec![b, c, 1, 1],
                _ => vec![b, 1, h, w],
            };
            let inputs = named(vec![("a", g.normal(&[b, c, h, w])), ("b", g.normal(&other))]);
            let is_add = op == "add";
            check(
                |t, v| {
                    let y = if is_add { t.add(v[0], v[1])? } else { t.mul(v[0], v[1])? };
                    project(t, y, k)
                },
                &inputs,
                tol,
            )
        }
        "global_pool" | "channel_pool" => {
            let kind = if k.is_multiple_of(2) { PoolKind::Avg } else { PoolKind::Max };
            let d = g.dims();
            let inputs = named(vec![("input", g.uniform(&d, -1.0, 1.0))]);
            let global = op == "global_pool";
            check(
                |t, v| {
                    let y = if global { t.global_pool(v[0], kind)? } else { t.channel_pool(v[0], kind)? };
                    project(t, y, k)
                },
                &inputs,
                tol,
            )
        }
        "coordconv_augment" => {
            let d = g.dims();
            let inputs = named(vec![("input", g.normal(&d))]);
            check(|t, v| { let y = coordconv_augment(t, v[0])?; project(t, y, k) }, &inputs, tol)
        }
        "dice_loss" | "cross_entropy" | "combined_loss" => {
            let y = g.one_hot(2, 4, 4);
            let inputs = named(vec![("p", g.uniform(&[2, 3, 4, 4], 0.2, 0.8))]);
            let which = op.to_string();
            check(
                |t, v| match which.as_str() {
                    "dice_loss" => {
                        let p1 = t.select_channel(v[0], 1)?;
                        losses::dice_loss(t, &losses::channel_of(&y, 1)?, p1, DEFAULT_DICE_EPS)
                    }
                    "cross_entropy" => losses::cross_entropy(t, &y, v[0]),
                    _ => losses::combined_loss(t, &y, v[0], DEFAULT_DICE_EPS),
                },
                &inputs,
                LOSS_TOL,
            )
        }
        "residual_block" => {
            let model = block_model();
            let b = g.0.random_range(1..=2);
            let side = 2 * g.0.random_range(1..=4);
            let prefix = "enc0.res0";
            let names = ["conv1.weight", "bn1.gamma", "bn1.beta", "conv2.weight", "bn2.gamma", "bn2.beta"].map(|n| format!("{prefix}.{n}"));
            let mut inputs = named(vec![("input", g.normal(&[b, 4, side, side]))]);
            for n in &names {
                inputs.push((n.clone(), model.param(n).unwrap().clone()));
            }
            let mode = if k == SEEDS - 1 { Mode::Eval } else { Mode::Train };
            check(
                |t, v| {
                    let overrides: Vec<(&str, Var)> = names.iter().map(String::as_str).zip(v[1..].iter().copied()).collect();
                    let vars = bind_with(&model, t, &overrides);
                    let mut stats = model.running_stats().to_vec();
                    let y = model.blocks(t, &vars, &mut stats, mode, 0).residual_block(prefix, v[0])?;
                    project(t, y, k)
                },
                &inputs,
                tol,
            )
        }
        "cbam" => {
            let model = block_model();
            let c = model.config().fused_channels();
            let b = g.0.random_range(1..=2);
            let side = 2 * g.0.random_range(2..=4);
            let names = [
                "attn.channel.fc1.weight",
                "attn.channel.fc1.bias",
                "attn.channel.fc2.weight",
                "attn.channel.fc2.bias",
                "attn.spatial.weight",
                "attn.spatial.bias",
            ];
            let mut inputs = named(vec![("input", g.normal(&[b, c, side, side]))]);
            for n in names {
                inputs.push((n.to_string(), model.param(n).unwrap().clone()));
            }
            check(
                |t, v| {
                    let overrides: Vec<(&str, Var)> = names.iter().copied().zip(v[1..].iter().copied()).collect();
                    let vars = bind_with(&model, t, &overrides);
                    let mut stats = model.running_stats().to_vec();
                    let y = model.blocks(t, &vars, &mut stats, Mode::Eval, 0).cbam(v[0])?;
                    project(t, y, k)
                },
                &inputs,
                tol,
            )
        }
        "model" => model_check(k),
        other => Err(Error::invalid("gradcheck", format!("unknown op {other:?}"))),
    }
}

/// Total loss of a base-4 model on one 16×16 image against a sampled 1% of
/// every parameter tensor.
pub fn model_check(case: u64) -> Result<GradCheckReport> {
    let mut g = Gen::new("model", case);
    let model = RefCell::new(Model::new(ModelConfig { base_channels: 4, init_seed: case, ..Default::default() })?);
    let x = g.uniform(&[1, 1, 16, 16], 0.0, 1.0);
    let y = g.one_hot(1, 16, 16);
    let inputs: Vec<(String, Tensor)> = model.borrow().parameters().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    let options = GradCheckOptions { fraction: Some(0.01), sample_seed: case, ..Default::default() };
    grad_check(
        |t, v| {
            let mut m = model.borrow_mut();
            let xv = t.constant(x.clone());
            let heads = m.forward_with(t, &ParamVars(v.to_vec()), xv, Mode::Train, 1234)?;
            losses::total_loss(t, &heads.all(), &y, DEFAULT_DICE_EPS)
        },
        &inputs,
        MODEL_TOL,
        &options,
    )
}

/// Runs one scope (or all when `None`). The model scope runs a single case.
pub fn run(scope: Option<&str>) -> Result<Vec<SuiteRow>> {
    let ops: Vec<&str> = match scope {
        Some(op) if OPS.contains(&op) => vec![op],
        Some(op) => return Err(Error::invalid("gradcheck", format!("unknown op {op:?}; expected one of {}", OPS.join(", ")))),
        None => OPS.to_vec(),
    };
    let mut rows = Vec::new();
    for op in ops {
        let cases = if op == "model" { 1 } else { SEEDS };
        let mut row = SuiteRow { op: op.to_string(), cases: 0, max_rel_error: 0.0, tolerance: 0.0 };
        for k in 0..cases {
            let report = case(op, k)?;
            row.cases += 1;
            row.tolerance = report.tolerance;
            row.max_rel_error = row.max_rel_error.max(report.max_rel_error());
        }
        rows.push(row);
    }
    Ok(rows)
}
