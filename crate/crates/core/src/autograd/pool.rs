use super::{BackwardOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Routes each output gradient to one saved input position.
struct Scatter {
    name: &'static str,
    argmax: Vec<usize>,
}

impl BackwardOp for Scatter {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] += g;
        }
        Ok(vec![Some(dx)])
    }
}

struct Upsample {
    factor: usize,
}

impl BackwardOp for Upsample {
    fn name(&self) -> &'static str {
        "upsample_nearest2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (b, c, h, w) = inputs[0].dims4("upsample_nearest2d")?;
        let f = self.factor;
        let wo = w * f;
        let mut dx = vec![0.0; b * c * h * w];
        let g = grad.data();
        for plane in 0..b * c {
            let gp = &g[plane * h * w * f * f..(plane + 1) * h * w * f * f];
            let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
            for oy in 0..h * f {
                let row = &gp[oy * wo..(oy + 1) * wo];
                let drow = &mut dp[(oy / f) * w..(oy / f + 1) * w];
                for (ox, v) in row.iter().enumerate() {
                    drow[ox / f] += v;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))])
    }
}

struct Mean {
    /// Number of input elements averaged into each output.
    count: usize,
    kind: MeanAxes,
}

#[derive(Clone, Copy)]
enum MeanAxes {
    Spatial,
    Channel,
}

impl BackwardOp for Mean {
    fn name(&self) -> &'static str {
        match self.kind {
            MeanAxes::Spatial => "global_pool(avg)",
            MeanAxes::Channel => "channel_pool(avg)",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (b, c, h, w) = inputs[0].dims4(self.name())?;
        let scale = 1.0 / self.count as f64;
        let g = grad.data();
        let mut dx = vec![0.0; b * c * h * w];
        let hw = h * w;
        for n in 0..b {
            for ch in 0..c {
                let plane = &mut dx[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                match self.kind {
                    MeanAxes::Spatial => plane.fill(g[n * c + ch] * scale),
                    MeanAxes::Channel => {
                        for (d, v) in plane.iter_mut().zip(&g[n * hw..(n + 1) * hw]) {
                            *d = v * scale;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))])
    }
}

impl Tape {
    /// Non-overlapping `window × window` max pooling. Ties resolve to the
    /// first position in row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("maxpool2d")?;
        if window == 0 {
            return Err(Error::invalid("maxpool2d", "window must be >= 1"));
        }
        if h % window != 0 {
            return Err(Error::shape("maxpool2d", format!("height (dim 2) {h} not divisible by window {window}")));
        }
        if w % window != 0 {
            return Err(Error::shape("maxpool2d", format!("width (dim 3) {w} not divisible by window {window}")));
        }
        let (ho, wo) = (h / window, w / window);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        let d = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c, ho, wo], out);
        self.record(out, vec![input], Box::new(Scatter { name: "maxpool2d", argmax }))
    }

    /// Nearest-neighbour upsampling: every pixel becomes a `factor × factor` block.
    pub fn upsample_nearest2d(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample_nearest2d", "factor must be >= 1"));
        }
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("upsample_nearest2d")?;
        if factor == 1 {
            return Ok(input);
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; b * c * ho * wo];
        for plane in 0..b * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for (ox, v) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                    *v = srow[ox / factor];
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c, ho, wo], out);
        self.record(out, vec![input], Box::new(Upsample { factor }))
    }

    /// Per-channel spatial mean or max, `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_pool(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("global_pool")?;
        let hw = h * w;
        let d = x.data();
        match kind {
            PoolKind::Avg => {
                let out: Vec<f64> = (0..b * c)
                    .map(|p| d[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
                    .collect();
                let out = Tensor::from_parts(vec![b, c, 1, 1], out);
                self.record(out, vec![input], Box::new(Mean { count: hw, kind: MeanAxes::Spatial }))
            }
            PoolKind::Max => {
                let mut out = Vec::with_capacity(b * c);
                let mut argmax = Vec::with_capacity(b * c);
                for p in 0..b * c {
                    let mut best = p * hw;
                    for idx in p * hw..(p + 1) * hw {
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
                let out = Tensor::from_parts(vec![b, c, 1, 1], out);
                self.record(out, vec![input], Box::new(Scatter { name: "global_pool(max)", argmax }))
            }
        }
    }

    /// Per-pixel mean or max across channels, `[B,C,H,W] -> [B,1,H,W]`.
    /// Max ties resolve to the lowest channel.
    pub fn channel_pool(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let x = self.value(input);
        let (b, c, h, w) = x.dims4("channel_pool")?;
        let hw = h * w;
        let d = x.data();
        let mut out = vec![0.0; b * hw];
        match kind {
            PoolKind::Avg => {
                for n in 0..b {
                    let dst = &mut out[n * hw..(n + 1) * hw];
                    for ch in 0..c {
                        let src = &d[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    dst.iter_mut().for_each(|o| *o /= c as f64);
                }
                let out = Tensor::from_parts(vec![b, 1, h, w], out);
                self.record(out, vec![input], Box::new(Mean { count: c, kind: MeanAxes::Channel }))
            }
            PoolKind::Max => {
                let mut argmax = vec![0usize; b * hw];
                for n in 0..b {
                    for p in 0..hw {
                        let mut best = n * c * hw + p;
                        for ch in 1..c {
                            let idx = (n * c + ch) * hw + p;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                        out[n * hw + p] = d[best];
                        argmax[n * hw + p] = best;
                    }
                }
                let out = Tensor::from_parts(vec![b, 1, h, w], out);
                self.record(out, vec![input], Box::new(Scatter { name: "channel_pool(max)", argmax }))
            }
        }
    }
}
