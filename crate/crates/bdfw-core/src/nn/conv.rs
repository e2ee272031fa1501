//! Convolution, transposed convolution, and max-pooling layers.

use super::{Param, Tensor4};
use crate::rng::RngStream;
use ndarray::{s, Array2, Array3, Array4};

/// im2col: (N,C,H,W) -> (C*kh*kw, N*OH*OW) for a given stride/padding.
fn im2col(
    x: &Tensor4,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut col = Array2::zeros((c * kh * kw, n * oh * ow));
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ci * kh * kw + ki * kw + kj;
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            col[[row, ni * oh * ow + oi * ow + oj]] =
                                x[[ni, ci, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

/// col2im: the adjoint of im2col (scatter-add back into image layout).
fn col2im(
    col: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor4 {
    let mut x = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ci * kh * kw + ki * kw + kj;
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            x[[ni, ci, ii as usize, jj as usize]] +=
                                col[[row, ni * oh * ow + oi * ow + oj]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2D convolution with square kernel, configurable stride and padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param, // (O, I, k, k)
    pub b: Param, // (O,)
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Array2<f64>, (usize, usize, usize, usize))>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut RngStream,
    ) -> Self {
        Conv2d {
            w: Param::he(&[out_ch, in_ch, k, k], in_ch * k * k, rng),
            b: Param::zeros(&[out_ch]),
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.w.value.shape()[0]
    }

    fn kernel(&self) -> usize {
        self.w.value.shape()[2]
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let (n, c, h, w) = x.dim();
        let k = self.kernel();
        let oh = (h + 2 * self.pad - k) / self.stride + 1;
        let ow = (w + 2 * self.pad - k) / self.stride + 1;
        let col = im2col(x, k, k, self.stride, self.pad, oh, ow);
        let o = self.out_ch();
        let w2 = self
            .w
            .value
            .view()
            .into_shape((o, c * k * k))
            .expect("contiguous weights");
        let mut y2 = w2.dot(&col); // (O, N*OH*OW)
        for (oi, mut row) in y2.outer_iter_mut().enumerate() {
            let bias = self.b.value[[oi]];
            row.mapv_inplace(|v| v + bias);
        }
        if train {
            self.cache = Some((col, (n, c, h, w)));
        } else {
            self.cache = None;
        }
        // (O, N, OH, OW) -> (N, O, OH, OW)
        let y = y2
            .into_shape((o, n, oh, ow))
            .unwrap()
            .permuted_axes([1, 0, 2, 3]);
        y.as_standard_layout().to_owned()
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let (n, o, oh, ow) = dy.dim();
        let (col, (xn, c, h, w)) = self.cache.take().expect("forward(train) before backward");
        debug_assert_eq!(n, xn);
        let k = self.kernel();
        // (N,O,OH,OW) -> (O, N*OH*OW)
        let dy2 = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape((o, n * oh * ow))
            .unwrap()
            .to_owned();
        let dw2 = dy2.dot(&col.t()); // (O, C*k*k)
        let mut wg = self
            .w
            .grad
            .view_mut()
            .into_shape((o, c * k * k))
            .expect("contiguous grads");
        wg += &dw2;
        for (oi, row) in dy2.outer_iter().enumerate() {
            self.b.grad[[oi]] += row.sum();
        }
        let w2 = self.w.value.view().into_shape((o, c * k * k)).unwrap();
        let dcol = w2.t().dot(&dy2);
        col2im(&dcol, n, c, h, w, k, k, self.stride, self.pad, oh, ow)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Transposed convolution with kernel 2, stride 2 (exact 2x upsampling,
/// non-overlapping output blocks).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Param, // (I, O, 2, 2)
    pub b: Param, // (O,)
    cache: Option<Array2<f64>>, // x as (I, N*H*W)
    cache_dim: (usize, usize, usize, usize),
}

impl ConvTranspose2d {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut RngStream) -> Self {
        ConvTranspose2d {
            w: Param::he(&[in_ch, out_ch, 2, 2], in_ch, rng),
            b: Param::zeros(&[out_ch]),
            cache: None,
            cache_dim: (0, 0, 0, 0),
        }
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let (n, i, h, w) = x.dim();
        let o = self.w.value.shape()[1];
        // (N,I,H,W) -> (I, N*H*W)
        let x2 = x
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape((i, n * h * w))
            .unwrap()
            .to_owned();
        let mut y = Array4::zeros((n, o, 2 * h, 2 * w));
        for a in 0..2 {
            for b in 0..2 {
                let wab: Array2<f64> = self
                    .w
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .slice(s![.., .., a, b])
                    .to_owned(); // (I, O)
                let yab = wab.t().dot(&x2); // (O, N*H*W)
                for ni in 0..n {
                    for oi in 0..o {
                        for hi in 0..h {
                            for wi in 0..w {
                                y[[ni, oi, 2 * hi + a, 2 * wi + b]] =
                                    yab[[oi, ni * h * w + hi * w + wi]] + self.b.value[[oi]];
                            }
                        }
                    }
                }
            }
        }
        if train {
            self.cache = Some(x2);
        } else {
            self.cache = None;
        }
        self.cache_dim = (n, i, h, w);
        y
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let (n, i, h, w) = self.cache_dim;
        let o = self.w.value.shape()[1];
        let x2 = self.cache.take().expect("forward(train) before backward");
        let mut dx2 = Array2::zeros((i, n * h * w));
        for a in 0..2 {
            for b in 0..2 {
                let mut dyab = Array2::zeros((o, n * h * w));
                for ni in 0..n {
                    for oi in 0..o {
                        for hi in 0..h {
                            for wi in 0..w {
                                dyab[[oi, ni * h * w + hi * w + wi]] =
                                    dy[[ni, oi, 2 * hi + a, 2 * wi + b]];
                            }
                        }
                    }
                }
                // dW[:,:,a,b] += x2 . dyab^T  -> (I, O)
                let dwab = x2.dot(&dyab.t());
                let mut wgrad = self
                    .w
                    .grad
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let mut slot = wgrad.slice_mut(s![.., .., a, b]);
                slot += &dwab;
                for oi in 0..o {
                    self.b.grad[[oi]] += dyab.row(oi).sum();
                }
                let wab: Array2<f64> = self
                    .w
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .slice(s![.., .., a, b])
                    .to_owned();
                dx2 += &wab.dot(&dyab);
            }
        }
        // (I, N*H*W) -> (N, I, H, W)
        let dx = dx2
            .into_shape((i, n, h, w))
            .unwrap()
            .permuted_axes([1, 0, 2, 3]);
        dx.as_standard_layout().to_owned()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    argmax: Option<Array4<u8>>, // offset 0..3 = 2*di + dj
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new() -> Self {
        MaxPool2d::default()
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut arg = Array4::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut which = 0u8;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let v = x[[ni, ci, 2 * oi + di, 2 * oj + dj]];
                                if v > best {
                                    best = v;
                                    which = (2 * di + dj) as u8;
                                }
                            }
                        }
                        y[[ni, ci, oi, oj]] = best;
                        arg[[ni, ci, oi, oj]] = which;
                    }
                }
            }
        }
        if train {
            self.argmax = Some(arg);
            self.in_dim = (n, c, h, w);
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let (n, c, h, w) = self.in_dim;
        let arg = self.argmax.take().expect("forward(train) before backward");
        let mut dx = Array4::zeros((n, c, h, w));
        let (oh, ow) = (h / 2, w / 2);
        for ni in 0..n {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let which = arg[[ni, ci, oi, oj]] as usize;
                        let (di, dj) = (which / 2, which % 2);
                        dx[[ni, ci, 2 * oi + di, 2 * oj + dj]] += dy[[ni, ci, oi, oj]];
                    }
                }
            }
        }
        dx
    }
}

/// Nearest-neighbor helper used by tests; upsamples by 2.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[[ni, ci, hi, wi]];
                    for a in 0..2 {
                        for b in 0..2 {
                            y[[ni, ci, 2 * hi + a, 2 * wi + b]] = v;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Stack per-sample C×H×W images into a batch tensor.
pub fn stack_images(imgs: &[Array3<f64>]) -> Tensor4 {
    let (c, h, w) = imgs[0].dim();
    let mut out = Array4::zeros((imgs.len(), c, h, w));
    for (i, img) in imgs.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(img);
    }
    out
}

/// Per-channel bias addition helper (used for time conditioning).
pub fn add_channel_bias(x: &mut Tensor4, bias: &Array2<f64>) {
    let (n, c, _, _) = x.dim();
    for ni in 0..n {
        for ci in 0..c {
            let b = bias[[ni, ci]];
            x.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|v| v + b);
        }
    }
}

/// Adjoint of `add_channel_bias`: sum dy over spatial dims.
pub fn channel_bias_grad(dy: &Tensor4) -> Array2<f64> {
    let (n, c, _, _) = dy.dim();
    let mut g = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            g[[ni, ci]] = dy.slice(s![ni, ci, .., ..]).sum();
        }
    }
    g
}

/// Concatenate two feature maps along the channel axis.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()])
        .expect("matching spatial dims")
}

/// Split a channel-axis gradient back into the two concatenated parts.
pub fn split_channels(d: &Tensor4, ca: usize) -> (Tensor4, Tensor4) {
    let da = d.slice(s![.., ..ca, .., ..]).to_owned();
    let db = d.slice(s![.., ca.., .., ..]).to_owned();
    (da, db)
}
