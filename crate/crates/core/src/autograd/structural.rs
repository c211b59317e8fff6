use super::{BackwardOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the second operand of `add`/`mul` maps onto the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Exact,
    /// `[B,C,1,1]` against `[B,C,H,W]`.
    PerChannel,
    /// `[B,1,H,W]` against `[B,C,H,W]`.
    PerPixel,
}

fn broadcast_kind(op: &'static str, full: &[usize], other: &[usize]) -> Result<Broadcast> {
    if full == other {
        return Ok(Broadcast::Exact);
    }
    if let ([b, c, _, _], [ob, oc, oh, ow]) = (full, other) {
        if b == ob && c == oc && *oh == 1 && *ow == 1 {
            return Ok(Broadcast::PerChannel);
        }
        if b == ob && *oc == 1 && full[2] == *oh && full[3] == *ow {
            return Ok(Broadcast::PerPixel);
        }
    }
    Err(Error::shape(op, format!("cannot combine {full:?} with {other:?}")))
}

/// Index into the broadcast operand for flat position `i` of the full operand.
#[inline]
fn source_index(kind: Broadcast, shape: &[usize], i: usize) -> usize {
    match kind {
        Broadcast::Exact => i,
        Broadcast::PerChannel => i / (shape[2] * shape[3]),
        Broadcast::PerPixel => {
            let hw = shape[2] * shape[3];
            (i / (shape[1] * hw)) * hw + i % hw
        }
    }
}

fn reduce_to(kind: Broadcast, full_shape: &[usize], small_shape: &[usize], values: impl Iterator<Item = f64>) -> Tensor {
    let mut out = Tensor::zeros(small_shape);
    let d = out.data_mut();
    for (i, v) in values.enumerate() {
        d[source_index(kind, full_shape, i)] += v;
    }
    out
}

struct Add {
    kind: Broadcast,
}

impl BackwardOp for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let da = needs[0].then(|| grad.clone());
        let db = needs[1].then(|| match self.kind {
            Broadcast::Exact => grad.clone(),
            kind => reduce_to(kind, grad.shape(), inputs[1].shape(), grad.data().iter().copied()),
        });
        Ok(vec![da, db])
    }
}

struct Mul {
    kind: Broadcast,
}

impl BackwardOp for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let shape = a.shape();
        let da = needs[0].then(|| {
            let d = grad
                .data()
                .iter()
                .enumerate()
                .map(|(i, g)| g * b.data()[source_index(self.kind, shape, i)])
                .collect();
            Tensor::from_parts(shape.to_vec(), d)
        });
        let db = needs[1].then(|| {
            let prod = grad.data().iter().zip(a.data()).map(|(g, x)| g * x);
            reduce_to(self.kind, shape, b.shape(), prod)
        });
        Ok(vec![da, db])
    }
}

struct Concat {
    channels: Vec<usize>,
}

impl BackwardOp for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (b, c_total, h, w) = output.dims4("concat_channels")?;
        let hw = h * w;
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (part, (&c, &need)) in inputs.iter().zip(self.channels.iter().zip(needs)) {
            if need {
                let mut d = Vec::with_capacity(part.len());
                for n in 0..b {
                    let start = (n * c_total + offset) * hw;
                    d.extend_from_slice(&grad.data()[start..start + c * hw]);
                }
                grads.push(Some(Tensor::from_parts(part.shape().to_vec(), d)));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        Ok(grads)
    }
}

struct SelectChannel {
    channel: usize,
}

impl BackwardOp for SelectChannel {
    fn name(&self) -> &'static str {
        "select_channel"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (b, c, h, w) = inputs[0].dims4("select_channel")?;
        let hw = h * w;
        let mut dx = Tensor::zeros(inputs[0].shape());
        for n in 0..b {
            let dst = (n * c + self.channel) * hw;
            dx.data_mut()[dst..dst + hw].copy_from_slice(&grad.data()[n * hw..(n + 1) * hw]);
        }
        Ok(vec![Some(dx)])
    }
}

struct Sum;

impl BackwardOp for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))])
    }
}

struct Scale {
    factor: f64,
}

impl BackwardOp for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.map(|g| g * self.factor))])
    }
}

impl Tape {
    /// Channel-axis concatenation of rank-4 tensors with equal batch and
    /// spatial extents.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "needs at least one part"))?;
        let (b, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4("concat_channels")?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("part {:?} does not match batch/height/width ({b}, {h}, {w})", self.value(p).shape()),
                ));
            }
            channels.push(pc);
        }
        let c_total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * c_total * hw);
        for n in 0..b {
            for (&p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&self.value(p).data()[n * c * hw..(n + 1) * c * hw]);
            }
        }
        let out = Tensor::from_parts(vec![b, c_total, h, w], out);
        self.record(out, parts.to_vec(), Box::new(Concat { channels }))
    }

    /// Elementwise sum. Either operand may be a `[B,C,1,1]` or `[B,1,H,W]`
    /// map broadcast against a `[B,C,H,W]` partner.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_for_broadcast(a, b);
        let (x, y) = (self.value(a), self.value(b));
        let kind = broadcast_kind("add", x.shape(), y.shape())?;
        let shape = x.shape();
        let d = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + y.data()[source_index(kind, shape, i)])
            .collect();
        let out = Tensor::from_parts(shape.to_vec(), d);
        self.record(out, vec![a, b], Box::new(Add { kind }))
    }

    /// Elementwise product with the same broadcast rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_for_broadcast(a, b);
        let (x, y) = (self.value(a), self.value(b));
        let kind = broadcast_kind("mul", x.shape(), y.shape())?;
        let shape = x.shape();
        let d = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * y.data()[source_index(kind, shape, i)])
            .collect();
        let out = Tensor::from_parts(shape.to_vec(), d);
        self.record(out, vec![a, b], Box::new(Mul { kind }))
    }

    fn order_for_broadcast(&self, a: Var, b: Var) -> (Var, Var) {
        if self.value(a).len() < self.value(b).len() {
            (b, a)
        } else {
            (a, b)
        }
    }

    /// One channel of a rank-4 tensor as `[B,1,H,W]`.
    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("select_channel")?;
        if channel >= c {
            return Err(Error::shape("select_channel", format!("channel {channel} out of range for {c} channels")));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * hw);
        for n in 0..b {
            let s = (n * c + channel) * hw;
            out.extend_from_slice(&x.data()[s..s + hw]);
        }
        let out = Tensor::from_parts(vec![b, 1, h, w], out);
        self.record(out, vec![input], Box::new(SelectChannel { channel }))
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.record(out, vec![input], Box::new(Sum))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        self.record(out, vec![input], Box::new(Scale { factor }))
    }
}
