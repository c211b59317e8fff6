use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackwardOp, Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    /// Weight of the newest batch in the running averages.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel running mean/variance used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

struct BatchNorm {
    /// Normalised input `x̂`.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch statistics depend on the input (train mode).
    batch_stats: bool,
}

impl BackwardOp for BatchNorm {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let gamma = inputs[1].data();
        let (b, c, h, w) = x.dims4("batchnorm2d")?;
        let hw = h * w;
        let count = (b * hw) as f64;
        let g = grad.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * hw;
                for i in off..off + hw {
                    dgamma[ch] += g[i] * self.xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; x.len()];
            for n in 0..b {
                for ch in 0..c {
                    let off = (n * c + ch) * hw;
                    let scale = gamma[ch] * self.inv_std[ch];
                    for i in off..off + hw {
                        dx[i] = if self.batch_stats {
                            scale / count * (count * g[i] - dbeta[ch] - self.xhat[i] * dgamma[ch])
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        Ok(vec![
            dx,
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

struct Dropout {
    mask: Vec<f64>,
}

impl BackwardOp for Dropout {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let d = grad.data().iter().zip(&self.mask).map(|(g, m)| g * m).collect();
        Ok(vec![Some(Tensor::from_parts(output.shape().to_vec(), d))])
    }
}

/// Inverted-dropout keep mask: `1/(1-rate)` with probability `1-rate`, else 0.
pub(crate) fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 })
        .collect()
}

impl Tape {
    /// Per-channel batch normalisation.
    ///
    /// Train mode normalises with the biased batch variance over `(B,H,W)`
    /// and folds the batch mean and unbiased variance into `stats`; eval mode
    /// normalises with `stats`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        config: BatchNormConfig,
        mode: Mode,
    ) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("batchnorm2d")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{name} shape {:?} does not match channels (dim 1) {c}", self.value(v).shape()),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batchnorm2d", format!("running stats hold {} channels, input has {c}", stats.mean.len())));
        }
        let hw = h * w;
        let count = b * hw;
        let d = x.data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for n in 0..b {
                    for ch in 0..c {
                        let off = (n * c + ch) * hw;
                        mean[ch] += d[off..off + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for n in 0..b {
                    for ch in 0..c {
                        let off = (n * c + ch) * hw;
                        var[ch] += d[off..off + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let m = config.momentum;
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean[ch];
                    stats.var[ch] = (1.0 - m) * stats.var[ch] + m * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + config.eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let op = BatchNorm {
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        self.record(out, vec![input, gamma, beta], Box::new(op))
    }

    /// Inverted dropout. Eval mode and `rate == 0` are the identity; the
    /// train-mode mask is a pure function of `seed`.
    pub fn dropout(&mut self, input: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate must lie in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let mask = dropout_mask(x.len(), rate, seed);
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        );
        self.record(out, vec![input], Box::new(Dropout { mask }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(x: Tensor, gamma: f64, beta: f64, mode: Mode) -> (Tensor, RunningStats) {
        let c = x.shape()[1];
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::full(&[c], gamma));
        let b = tape.constant(Tensor::full(&[c], beta));
        let mut stats = RunningStats::new(c);
        let y = tape
            .batch_norm(v, g, b, &mut stats, BatchNormConfig::default(), mode)
            .unwrap();
        (tape.value(y).clone(), stats)
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let (y, _) = bn(Tensor::full(&[2, 3, 2, 2], 4.2), 1.0, 0.0, Mode::Train);
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn two_values_map_to_plus_minus_one() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (y, stats) = bn(x, 1.0, 0.0, Mode::Train);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        // running: 0.9·0 + 0.1·2 and 0.9·1 + 0.1·(1·2/1)
        assert!((stats.mean[0] - 0.2).abs() < 1e-15);
        assert!((stats.var[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn affine_sets_mean_and_std() {
        // per channel: values {-1, +1} repeated, already zero mean and unit variance
        let x = Tensor::new(&[2, 2, 1, 2], vec![-1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0]).unwrap();
        let (y, _) = bn(x, 2.0, 5.0, Mode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|n| (0..2).map(move |i| (n, i))).map(|(n, i)| y.data()[(n * 2 + ch) * 2 + i]).collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
            assert!((mean - 5.0).abs() < 1e-12);
            assert!((std - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_before_training_uses_unit_stats() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (y, stats) = bn(x, 1.0, 0.0, Mode::Eval);
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - s).abs() < 1e-15 && (y.data()[1] - 3.0 * s).abs() < 1e-15);
        assert_eq!(stats, RunningStats::new(1));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 2.0));
        assert_eq!(tape.dropout(x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, Mode::Eval, 1).unwrap(), x);
        assert!(tape.dropout(x, 1.0, Mode::Train, 1).is_err());
        assert!(tape.dropout(x, -0.1, Mode::Train, 1).is_err());
    }

    #[test]
    fn dropout_survivors_scaled_and_mean_preserved() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 3.0));
        let y = tape.dropout(x, 0.5, Mode::Train, 42).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 6.0));

        // Monte-Carlo mean over 10^4 masks
        let masks = 10_000u64;
        let mut total = 0.0;
        for seed in 0..masks {
            total += dropout_mask(16, 0.5, seed).iter().map(|m| 3.0 * m).sum::<f64>();
        }
        let mean = total / (masks as f64 * 16.0);
        assert!((mean - 3.0).abs() / 3.0 < 0.01, "mean {mean}");
    }
}
