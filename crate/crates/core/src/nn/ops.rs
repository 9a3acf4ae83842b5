// Convolution and pooling kernels (forward and backward).

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

use super::{add_row_bias, Layer, LayerKind};

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn new(kind: &LayerKind, x: &Tensor) -> Result<Self> {
        let LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } = *kind
        else {
            unreachable!("conv geometry for non-conv layer")
        };
        let [n, c, h, w] = x.shape()[..] else {
            return Err(Error::InvalidShape(format!(
                "conv2d expects [N, C, H, W], got {:?}",
                x.shape()
            )));
        };
        if c != in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: vec![out_channels, in_channels, kernel_h, kernel_w],
            });
        }
        if stride == 0 || h + 2 * padding < kernel_h || w + 2 * padding < kernel_w {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel {kernel_h}x{kernel_w} (stride {stride}, padding {padding}) does not fit {h}x{w}"
            )));
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            o: out_channels,
            kh: kernel_h,
            kw: kernel_w,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kernel_h) / stride + 1,
            ow: (w + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds `[N, C, H, W]` into `[N·OH·OW, C·kh·kw]`; column index is
/// `c·kh·kw + ki·kw + kj`, matching the canonical weight flattening.
fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let q = g.patch_len();
    let mut cols = vec![0.0f32; g.rows() * q];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * q;
                for c in 0..g.c {
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[row + (c * g.kh + ki) * g.kw + kj] =
                                x[((b * g.c + c) * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let q = g.patch_len();
    let mut x = vec![0.0f32; g.n * g.c * g.h * g.w];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * q;
                for c in 0..g.c {
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            x[((b * g.c + c) * g.h + iy as usize) * g.w + ix as usize] +=
                                cols[row + (c * g.kh + ki) * g.kw + kj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Conv weights `[O, C, kh, kw]` as the `(C·kh·kw) × O` matrix used by both
/// im2col and the crossbar mapping.
pub(crate) fn conv_weight_matrix(w: &Tensor) -> Result<Tensor> {
    let o = w.shape()[0];
    w.reshape(&[o, w.len() / o])?.transpose()
}

/// Inverse of [`conv_weight_matrix`].
pub(crate) fn conv_weight_from_matrix(m: &Tensor, shape: &[usize]) -> Result<Tensor> {
    m.transpose()?.reshape(shape)
}

/// Returns the output and the im2col buffer (kept for the backward pass).
pub(crate) fn conv2d_forward(layer: &Layer, x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let g = ConvGeometry::new(&layer.kind, x)?;
    let w = layer.weights.as_ref().expect("conv layer has weights");
    let b = layer.bias.as_ref().expect("conv layer has bias");
    let wmat = conv_weight_matrix(w)?;
    let cols = im2col(x.data(), &g);
    let mut y = numerics::gemm_nn(&cols, wmat.data(), g.rows(), g.patch_len(), g.o);
    add_row_bias(&mut y, b.data());
    // [N·OH·OW, O] -> [N, O, OH, OW]
    let plane = g.oh * g.ow;
    let mut out = vec![0.0f32; y.len()];
    for bi in 0..g.n {
        for p in 0..plane {
            for o in 0..g.o {
                out[(bi * g.o + o) * plane + p] = y[(bi * plane + p) * g.o + o];
            }
        }
    }
    Ok((Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)?, cols))
}

/// Gradients `(d_input, d_weights, d_bias)` of a conv layer.
pub(crate) fn conv2d_backward(
    layer: &Layer,
    x: &Tensor,
    cols: &[f32],
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeometry::new(&layer.kind, x)?;
    let w = layer.weights.as_ref().expect("conv layer has weights");
    let plane = g.oh * g.ow;
    let go = grad_out.data();
    let mut gmat = vec![0.0f32; g.rows() * g.o];
    for bi in 0..g.n {
        for p in 0..plane {
            for o in 0..g.o {
                gmat[(bi * plane + p) * g.o + o] = go[(bi * g.o + o) * plane + p];
            }
        }
    }
    let q = g.patch_len();
    let dw_mat = numerics::gemm_tn(cols, &gmat, g.rows(), q, g.o);
    let dw = conv_weight_from_matrix(&Tensor::new(vec![q, g.o], dw_mat)?, w.shape())?;
    let mut db = vec![0.0f64; g.o];
    for row in gmat.chunks(g.o) {
        for (s, &v) in db.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let db = Tensor::new(vec![g.o], db.into_iter().map(|v| v as f32).collect())?;
    let dx = if need_input_grad {
        let wmat = conv_weight_matrix(w)?;
        let dcols = numerics::gemm_nt(&gmat, wmat.data(), g.rows(), g.o, q);
        Some(Tensor::new(x.shape().to_vec(), col2im(&dcols, &g))?)
    } else {
        None
    };
    Ok((dx, dw, db))
}

fn pool_dims(x: &Tensor, size: usize) -> Result<[usize; 6]> {
    let [n, c, h, w] = x.shape()[..] else {
        return Err(Error::InvalidShape(format!(
            "maxpool2d expects [N, C, H, W], got {:?}",
            x.shape()
        )));
    };
    if size == 0 || h < size || w < size {
        return Err(Error::InvalidShape(format!(
            "pool size {size} does not fit {h}x{w}"
        )));
    }
    Ok([n, c, h, w, h / size, w / size])
}

/// Flat input index of each pooled maximum (first maximum in window order).
fn pool_argmax(x: &Tensor, size: usize) -> Result<(Vec<usize>, [usize; 6])> {
    let dims = pool_dims(x, size)?;
    let [n, c, h, w, oh, ow] = dims;
    let d = x.data();
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = base + (oy * size + ky) * w + ox * size + kx;
                        if d[i] > d[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, dims))
}

pub(crate) fn maxpool_forward(x: &Tensor, size: usize) -> Result<Tensor> {
    let (idx, [n, c, _, _, oh, ow]) = pool_argmax(x, size)?;
    let d = x.data();
    Tensor::new(vec![n, c, oh, ow], idx.into_iter().map(|i| d[i]).collect())
}

pub(crate) fn maxpool_backward(x: &Tensor, size: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (idx, _) = pool_argmax(x, size)?;
    let mut dx = vec![0.0f32; x.len()];
    for (&i, &g) in idx.iter().zip(grad_out.data()) {
        dx[i] += g;
    }
    Tensor::new(x.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        // 1 image, 2 channels, 4x4, 3 output channels, 3x3 kernel, padding 1
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 7) % 11) as f32 - 5.0).unwrap();
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5) % 7) as f32 * 0.1 - 0.3).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, -0.5, 0.0]).unwrap();
        let kind = LayerKind::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
        };
        let layer = Layer::with_parameters(kind, w.clone(), b.clone()).unwrap();
        let (y, _) = conv2d_forward(&layer, &x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        let xd = x.data();
        let wd = w.data();
        for o in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut s = b.data()[o] as f64;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = oy as isize + ki as isize - 1;
                                let ix = ox as isize + kj as isize - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    s += xd[(c * 4 + iy as usize) * 4 + ix as usize] as f64
                                        * wd[((o * 2 + c) * 3 + ki) * 3 + kj] as f64;
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * 4 + oy) * 4 + ox] as f64;
                    assert!((got - s).abs() < 1e-5, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn pool_picks_first_max() {
        let x = Tensor::new(
            vec![1, 1, 2, 4],
            vec![1.0, 3.0, 2.0, 2.0, 3.0, 0.0, 2.0, 2.0],
        )
        .unwrap();
        let y = maxpool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        let g = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let dx = maxpool_backward(&x, 2, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weight_matrix_round_trip() {
        let w = Tensor::from_fn(&[4, 2, 3, 3], |i| i as f32).unwrap();
        let m = conv_weight_matrix(&w).unwrap();
        assert_eq!(m.shape(), &[18, 4]);
        assert_eq!(m.data()[4], 1.0); // row 1 (c=0, ki=0, kj=1), out channel 0
        assert_eq!(conv_weight_from_matrix(&m, w.shape()).unwrap(), w);
    }
}
