//! Stride-1 2-D cross-correlation lowered to GEMM through im2col.

use super::{BackwardOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; output keeps the input extent.
    Same,
    /// No padding; output extent is `input - kernel + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1 unpadded kernel reads the input plane directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

fn geometry(x: &Tensor, k: &Tensor, b: &Tensor, padding: Padding) -> Result<Geometry> {
    let (batch, c_in, h, w) = x.dims4("conv2d")?;
    let (c_out, k_in, kh, kw) = match k.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be rank-4 (out, in, kh, kw), got {:?}", k.shape()),
            ))
        }
    };
    if k_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input channels (dim 1) = {c_in} but kernel expects {k_in}"),
        ));
    }
    if b.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match output channels {c_out}", b.shape()),
        ));
    }
    let (pad_h, pad_w, ho, wo) = match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::shape(
                    "conv2d",
                    format!("same padding needs odd kernel extents, got {kh}x{kw}"),
                ));
            }
            (kh / 2, kw / 2, h, w)
        }
        Padding::Valid => {
            if kh > h {
                return Err(Error::shape("conv2d", format!("kernel height {kh} exceeds input height (dim 2) {h}")));
            }
            if kw > w {
                return Err(Error::shape("conv2d", format!("kernel width {kw} exceeds input width (dim 3) {w}")));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    Ok(Geometry {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        pad_h,
        pad_w,
        ho,
        wo,
    })
}

/// Row-major `c = op(a) · op(b) + beta · c` with `c` of shape `m × n`.
///
/// `a` is stored `m × k` (or `k × m` when `ta`), `b` is `k × n` (or `n × k`
/// when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths were asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                // valid ox satisfy 0 <= ox + kx - pad_w < w
                let ox_lo = g.pad_w.saturating_sub(kx).min(g.wo);
                let ox_hi = (g.w + g.pad_w).saturating_sub(kx).min(g.wo).max(ox_lo);
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    out_row[..ox_lo].fill(0.0);
                    out_row[ox_hi..].fill(0.0);
                    if ox_hi > ox_lo {
                        let ix0 = ox_lo + kx - g.pad_w;
                        let base = iy as usize * g.w;
                        out_row[ox_lo..ox_hi]
                            .copy_from_slice(&src[base + ix0..base + ix0 + (ox_hi - ox_lo)]);
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let ox_lo = g.pad_w.saturating_sub(kx).min(g.wo);
                let ox_hi = (g.w + g.pad_w).saturating_sub(kx).min(g.wo).max(ox_lo);
                if ox_hi <= ox_lo {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let ix0 = ox_lo + kx - g.pad_w;
                    let base = iy as usize * g.w + ix0;
                    let s = &src[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                    for (d, v) in dst[base..base + s.len()].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

struct Conv2d {
    geom: Geometry,
}

impl BackwardOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geom;
        let (x, k) = (inputs[0], inputs[1]);
        let rows = g.cols_rows();
        let plane = g.out_plane();
        let in_size = g.c_in * g.h * g.w;
        let out_size = g.c_out * plane;

        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dk = needs[1].then(|| vec![0.0; k.len()]);
        let mut db = needs[2].then(|| vec![0.0; g.c_out]);
        let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * plane }];
        let mut dcols = vec![0.0; if g.is_pointwise() { 0 } else { rows * plane }];

        for n in 0..g.batch {
            let gy = &grad.data()[n * out_size..(n + 1) * out_size];
            let xs = &x.data()[n * in_size..(n + 1) * in_size];
            if let Some(dk) = dk.as_mut() {
                let cols_ref: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, &mut cols);
                    &cols
                };
                // dK[out × rows] += dY[out × plane] · colsᵀ
                gemm(g.c_out, plane, rows, gy, false, cols_ref, true, 1.0, dk);
            }
            if let Some(db) = db.as_mut() {
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc += gy[co * plane..(co + 1) * plane].iter().sum::<f64>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[n * in_size..(n + 1) * in_size];
                if g.is_pointwise() {
                    gemm(rows, g.c_out, plane, k.data(), true, gy, false, 0.0, dxs);
                } else {
                    gemm(rows, g.c_out, plane, k.data(), true, gy, false, 0.0, &mut dcols);
                    col2im(&dcols, g, dxs);
                }
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
            db.map(|d| Tensor::from_parts(vec![g.c_out], d)),
        ])
    }
}

/// Forward cross-correlation on raw tensors.
#[cfg(test)]
pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor, b: &Tensor, padding: Padding) -> Result<Tensor> {
    let g = geometry(x, k, b, padding)?;
    Ok(conv_with_geometry(x, k, b, &g))
}

fn conv_with_geometry(x: &Tensor, k: &Tensor, b: &Tensor, g: &Geometry) -> Tensor {
    let rows = g.cols_rows();
    let plane = g.out_plane();
    let in_size = g.c_in * g.h * g.w;
    let out_size = g.c_out * plane;
    let mut out = vec![0.0; g.batch * out_size];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * plane }];
    for n in 0..g.batch {
        let xs = &x.data()[n * in_size..(n + 1) * in_size];
        let ys = &mut out[n * out_size..(n + 1) * out_size];
        for (co, &bias) in b.data().iter().enumerate() {
            ys[co * plane..(co + 1) * plane].fill(bias);
        }
        let cols_ref: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(g.c_out, rows, plane, k.data(), false, cols_ref, false, 1.0, ys);
    }
    Tensor::from_parts(vec![g.batch, g.c_out, g.ho, g.wo], out)
}

impl Tape {
    /// Cross-correlation of `input [B,Cin,H,W]` with `kernel [Cout,Cin,kh,kw]`
    /// plus `bias [Cout]`, stride 1, zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let geom = geometry(x, k, b, padding)?;
        let out = conv_with_geometry(x, k, b, &geom);
        self.record(out, vec![input, kernel, bias], Box::new(Conv2d { geom }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window reference, independent of im2col/GEMM.
    fn conv_reference(x: &Tensor, k: &Tensor, b: &Tensor, pad: usize) -> Tensor {
        let (bn, ci, h, w) = x.dims4("ref").unwrap();
        let (co, _, kh, kw) = k.dims4("ref").unwrap();
        let (ho, wo) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        let mut out = vec![0.0; bn * co * ho * wo];
        for n in 0..bn {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((n * ci + c) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * ci + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[bn, co, ho, wo], out).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[2, 3, 5, 4], -1.0, 1.0, &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[3]), Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), Padding::Same).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::rand_uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), Padding::Same).unwrap();
        for r in 0..4i32 {
            for c in 0..4i32 {
                let mut s = 0.0;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if (0..4).contains(&rr) && (0..4).contains(&cc) {
                            s += x.data()[(rr * 4 + cc) as usize];
                        }
                    }
                }
                assert!((y.data()[(r * 4 + c) as usize] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (pad, padding, kh, kw) in [(1, Padding::Same, 3, 3), (0, Padding::Valid, 3, 3), (2, Padding::Same, 5, 5), (0, Padding::Same, 1, 1)] {
            let x = Tensor::rand_uniform(&[2, 3, 6, 7], -1.0, 1.0, &mut rng);
            let k = Tensor::rand_uniform(&[4, 3, kh, kw], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng);
            let fast = conv2d_forward(&x, &k, &b, padding).unwrap();
            let slow = conv_reference(&x, &k, &b, pad);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch_naming_dim() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), Padding::Same).unwrap_err();
        assert!(err.to_string().contains("dim 1"), "{err}");
        let k = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d_forward(&x, &k, &Tensor::zeros(&[1]), Padding::Same).is_err());
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &k, &Tensor::zeros(&[2]), Padding::Same).is_err());
    }
}
