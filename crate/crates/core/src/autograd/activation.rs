use super::{BackwardOp, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

struct Elu {
    alpha: f64,
}

impl BackwardOp for Elu {
    fn name(&self) -> &'static str {
        "elu"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let d = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            // for x <= 0: alpha·eˣ = y + alpha
            .map(|((&x, &y), &g)| if x > 0.0 { g } else { g * (y + self.alpha) })
            .collect();
        Ok(vec![Some(Tensor::from_parts(output.shape().to_vec(), d))])
    }
}

struct Sigmoid;

impl BackwardOp for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let d = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&y, &g)| g * y * (1.0 - y))
            .collect();
        Ok(vec![Some(Tensor::from_parts(output.shape().to_vec(), d))])
    }
}

struct Softmax;

impl BackwardOp for Softmax {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (b, c, h, w) = output.dims4("softmax_channels")?;
        let hw = h * w;
        let (y, g) = (output.data(), grad.data());
        let mut dx = vec![0.0; y.len()];
        for n in 0..b {
            let base = n * c * hw;
            for p in 0..hw {
                let dot: f64 = (0..c).map(|ch| y[base + ch * hw + p] * g[base + ch * hw + p]).sum();
                for ch in 0..c {
                    let i = base + ch * hw + p;
                    dx[i] = y[i] * (g[i] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(output.shape().to_vec(), dx))])
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Channel-axis softmax of a `[B,C,H,W]` tensor, stabilised by max subtraction.
pub(crate) fn softmax_channels_forward(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("softmax_channels")?;
    let hw = h * w;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for n in 0..b {
        let base = n * c * hw;
        for p in 0..hw {
            let max = (0..c).map(|ch| d[base + ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (d[base + ch * hw + p] - max).exp();
                out[base + ch * hw + p] = e;
                total += e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

impl Tape {
    /// `x` for `x > 0`, `alpha·(eˣ − 1)` otherwise.
    pub fn elu(&mut self, input: Var, alpha: f64) -> Result<Var> {
        let out = self
            .value(input)
            .map(|x| if x > 0.0 { x } else { alpha * x.exp_m1() });
        self.record(out, vec![input], Box::new(Elu { alpha }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(sigmoid_scalar);
        self.record(out, vec![input], Box::new(Sigmoid))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let out = softmax_channels_forward(self.value(input))?;
        self.record(out, vec![input], Box::new(Softmax))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_unary(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::new(&[x.len()], x.to_vec()).unwrap());
        let y = f(&mut tape, v).unwrap();
        let out = tape.value(y).data().to_vec();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        (out, g.get(v).unwrap().data().to_vec())
    }

    #[test]
    fn elu_values_and_slope() {
        let (y, g) = eval_unary(|t, v| t.elu(v, 1.0), &[1.0, 0.0, -1.0]);
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], 0.0);
        // e^{-1} - 1
        assert!((y[2] - (-0.632_120_558_828_557_7)).abs() < 1e-12);
        assert!((g[2] - 0.367_879_441_171_442_3).abs() < 1e-12);
        let h = 1e-6;
        let fd = ((-1.0f64 + h).exp_m1() - (-1.0f64 - h).exp_m1()) / (2.0 * h);
        assert!((g[2] - fd).abs() < 1e-8);
    }

    #[test]
    fn sigmoid_half_at_zero_and_stable() {
        let (y, _) = eval_unary(|t, v| t.sigmoid(v), &[0.0, 800.0, -800.0]);
        assert_eq!(y[0], 0.5);
        assert_eq!(y[1], 1.0);
        assert!(y[2] >= 0.0 && y[2].is_finite());
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new(&[1, 3, 1, 1], vec![0.7, 0.7, 0.7]).unwrap();
        let y = softmax_channels_forward(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::new(&[1, 3, 1, 1], vec![0.0, 2f64.ln(), 0.0]).unwrap();
        let y = softmax_channels_forward(&x).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.5).abs() < 1e-15);
        assert!((y.data()[2] - 0.25).abs() < 1e-15);
        let big = Tensor::new(&[1, 2, 1, 1], vec![1000.0, 999.0]).unwrap();
        assert!(softmax_channels_forward(&big).unwrap().is_finite());
    }
}
