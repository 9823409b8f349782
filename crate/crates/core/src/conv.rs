//! Convolution and transposed convolution kernels (im2col + GEMM).
//!
//! Both operators share one window geometry: grid position `(gi, gj)` touches
//! image pixel `(gi * stride + ki - pad, gj * stride + kj - pad)` through
//! kernel tap `(ki, kj)`. For `conv2d` the grid is the output and the image is
//! the input; for `conv_transpose2d` the roles swap.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Tensor};

#[derive(Clone, Debug)]
pub(crate) struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Active taps as flat `ki * kw + kj` indices, ascending.
    pub taps: Vec<usize>,
}

impl Window {
    fn grid_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Grid range `[lo, hi)` whose image coordinate `g * stride + k - pad` lies in `[0, extent)`.
    fn valid_range(&self, k: usize, grid: usize, extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest g with g*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest g with g*s + off <= extent-1
        let top = extent as isize - 1 - off;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = (lo as usize).min(grid);
        let hi = (hi as usize).min(grid);
        (lo, hi.max(lo))
    }

    /// `cols[(c, tap), g]` gathered from `img[c, :, :]`.
    pub fn im2col<T: Real>(&self, img: &[T], channels: usize, cols: &mut [T]) {
        let g_len = self.grid_len();
        let plane = self.img_h * self.img_w;
        let nt = self.taps.len();
        debug_assert_eq!(cols.len(), channels * nt * g_len);
        for c in 0..channels {
            let src = &img[c * plane..(c + 1) * plane];
            for (t, &tap) in self.taps.iter().enumerate() {
                let (ki, kj) = (tap / self.kw, tap % self.kw);
                let row = &mut cols[(c * nt + t) * g_len..(c * nt + t + 1) * g_len];
                row.fill(T::zero());
                let (ilo, ihi) = self.valid_range(ki, self.grid_h, self.img_h);
                let (jlo, jhi) = self.valid_range(kj, self.grid_w, self.img_w);
                for gi in ilo..ihi {
                    let y = gi * self.stride + ki - self.pad;
                    let dst = &mut row[gi * self.grid_w..(gi + 1) * self.grid_w];
                    let src_row = &src[y * self.img_w..(y + 1) * self.img_w];
                    if self.stride == 1 {
                        let x0 = jlo + kj - self.pad;
                        dst[jlo..jhi].copy_from_slice(&src_row[x0..x0 + (jhi - jlo)]);
                    } else {
                        for gj in jlo..jhi {
                            dst[gj] = src_row[gj * self.stride + kj - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of `cols` back into `img` (adjoint of [`Window::im2col`]).
    pub fn col2im<T: Real>(&self, cols: &[T], channels: usize, img: &mut [T]) {
        let g_len = self.grid_len();
        let plane = self.img_h * self.img_w;
        let nt = self.taps.len();
        for c in 0..channels {
            let dst = &mut img[c * plane..(c + 1) * plane];
            for (t, &tap) in self.taps.iter().enumerate() {
                let (ki, kj) = (tap / self.kw, tap % self.kw);
                let row = &cols[(c * nt + t) * g_len..(c * nt + t + 1) * g_len];
                let (ilo, ihi) = self.valid_range(ki, self.grid_h, self.img_h);
                let (jlo, jhi) = self.valid_range(kj, self.grid_w, self.img_w);
                for gi in ilo..ihi {
                    let y = gi * self.stride + ki - self.pad;
                    let src = &row[gi * self.grid_w..(gi + 1) * self.grid_w];
                    let dst_row = &mut dst[y * self.img_w..(y + 1) * self.img_w];
                    for gj in jlo..jhi {
                        dst_row[gj * self.stride + kj - self.pad] += src[gj];
                    }
                }
            }
        }
    }
}

/// Geometry of a transposed convolution: output extent is
/// `(in - 1) * stride - 2 * padding + kernel + output_padding`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeParams {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTransposeParams {
    pub fn stride(stride: usize) -> Self {
        ConvTransposeParams {
            stride,
            padding: 0,
            output_padding: 0,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        ((input - 1) * self.stride + kernel + self.output_padding).checked_sub(2 * self.padding)
    }
}

/// Gathers `weight[o, c, tap]` for the active taps into an `[O, C * taps]` matrix.
fn gather_taps<T: Real>(weight: &[T], outer: usize, inner: usize, kk: usize, taps: &[usize]) -> Vec<T> {
    if taps.len() == kk {
        return weight.to_vec();
    }
    let nt = taps.len();
    let mut out = vec![T::zero(); outer * inner * nt];
    for oc in 0..outer * inner {
        for (t, &tap) in taps.iter().enumerate() {
            out[oc * nt + t] = weight[oc * kk + tap];
        }
    }
    out
}

fn scatter_taps<T: Real>(dense: &[T], outer: usize, inner: usize, kk: usize, taps: &[usize], weight_grad: &mut [T]) {
    let nt = taps.len();
    for oc in 0..outer * inner {
        for (t, &tap) in taps.iter().enumerate() {
            weight_grad[oc * kk + tap] += dense[oc * nt + t];
        }
    }
}

pub(crate) struct Conv2dGeom {
    pub n: usize,
    pub c: usize,
    pub o: usize,
    pub window: Window,
}

pub(crate) fn conv2d_geometry<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
    tap_mask: Option<&[bool]>,
) -> Result<Conv2dGeom> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let [o, wc, kh, kw] = weight.dims4("conv2d")?;
    if wc != c {
        return Err(Error::shape("conv2d", "input channels (dim 1)", wc, c));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} must have odd extents"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape("conv2d", "bias length", o, format!("{:?}", b.shape())));
        }
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
        ));
    }
    let taps = match tap_mask {
        Some(mask) => {
            if mask.len() != kh * kw {
                return Err(Error::shape("conv2d", "tap mask length", kh * kw, mask.len()));
            }
            mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
        }
        None => (0..kh * kw).collect(),
    };
    Ok(Conv2dGeom {
        n,
        c,
        o,
        window: Window {
            kh,
            kw,
            stride: 1,
            pad: padding,
            img_h: h,
            img_w: w,
            grid_h: h + 2 * padding - kh + 1,
            grid_w: w + 2 * padding - kw + 1,
            taps,
        },
    })
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &Conv2dGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let win = &g.window;
    let (gl, nt, kk) = (win.grid_len(), win.taps.len(), win.kh * win.kw);
    let plane_in = g.c * win.img_h * win.img_w;
    let w_act = gather_taps(weight.data(), g.o, g.c, kk, &win.taps);
    let mut out = vec![T::zero(); g.n * g.o * gl];
    let mut cols = vec![T::zero(); g.c * nt * gl];
    for s in 0..g.n {
        let y = &mut out[s * g.o * gl..(s + 1) * g.o * gl];
        if let Some(b) = bias {
            for (oc, row) in y.chunks_mut(gl).enumerate() {
                row.fill(b.data()[oc]);
            }
        }
        if nt == 0 {
            continue;
        }
        win.im2col(&input.data()[s * plane_in..(s + 1) * plane_in], g.c, &mut cols);
        gemm(
            T::one(),
            MatRef::new(&w_act, g.o, g.c * nt),
            MatRef::new(&cols, g.c * nt, gl),
            T::one(),
            y,
        );
    }
    Tensor::new(vec![g.n, g.o, win.grid_h, win.grid_w], out).expect("conv2d output shape")
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &Conv2dGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let win = &g.window;
    let (gl, nt, kk) = (win.grid_len(), win.taps.len(), win.kh * win.kw);
    let plane_in = g.c * win.img_h * win.img_w;
    let w_act = gather_taps(weight.data(), g.o, g.c, kk, &win.taps);
    let mut dw_act = vec![T::zero(); g.o * g.c * nt];
    let mut dx = need_input.then(|| vec![T::zero(); g.n * plane_in]);
    let mut db = has_bias.then(|| vec![T::zero(); g.o]);
    let mut cols = vec![T::zero(); g.c * nt * gl];
    for s in 0..g.n {
        let dy = &grad_out.data()[s * g.o * gl..(s + 1) * g.o * gl];
        if let Some(db) = db.as_mut() {
            for (oc, row) in dy.chunks(gl).enumerate() {
                db[oc] += row.iter().copied().sum::<T>();
            }
        }
        if nt == 0 {
            continue;
        }
        win.im2col(&input.data()[s * plane_in..(s + 1) * plane_in], g.c, &mut cols);
        gemm(
            T::one(),
            MatRef::new(dy, g.o, gl),
            MatRef::new(&cols, g.c * nt, gl).t(),
            T::one(),
            &mut dw_act,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                MatRef::new(&w_act, g.o, g.c * nt).t(),
                MatRef::new(dy, g.o, gl),
                T::zero(),
                &mut cols,
            );
            win.col2im(&cols, g.c, &mut dx[s * plane_in..(s + 1) * plane_in]);
        }
    }
    let mut dw = vec![T::zero(); g.o * g.c * kk];
    scatter_taps(&dw_act, g.o, g.c, kk, &win.taps, &mut dw);
    ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d).expect("dx shape")),
        weight: Tensor::new(weight.shape().to_vec(), dw).expect("dw shape"),
        bias: db.map(|d| Tensor::new(vec![g.o], d).expect("db shape")),
    }
}

pub(crate) struct ConvTGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub window: Window,
}

pub(crate) fn conv_transpose2d_geometry<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvTransposeParams,
) -> Result<ConvTGeom> {
    let [n, cin, h, w] = input.dims4("conv_transpose2d")?;
    let [wcin, cout, kh, kw] = weight.dims4("conv_transpose2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv_transpose2d",
            "input channels (weight dim 0)",
            wcin,
            cin,
        ));
    }
    if params.stride == 0 {
        return Err(Error::invalid("conv_transpose2d", "stride must be >= 1"));
    }
    if params.output_padding >= params.stride {
        return Err(Error::invalid(
            "conv_transpose2d",
            "output_padding must be smaller than stride",
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv_transpose2d",
                "bias length",
                cout,
                format!("{:?}", b.shape()),
            ));
        }
    }
    let (Some(oh), Some(ow)) = (params.output_extent(h, kh), params.output_extent(w, kw)) else {
        return Err(Error::invalid(
            "conv_transpose2d",
            "padding removes the whole output",
        ));
    };
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("conv_transpose2d", "empty output"));
    }
    Ok(ConvTGeom {
        n,
        cin,
        cout,
        window: Window {
            kh,
            kw,
            stride: params.stride,
            pad: params.padding,
            img_h: oh,
            img_w: ow,
            grid_h: h,
            grid_w: w,
            taps: (0..kh * kw).collect(),
        },
    })
}

pub(crate) fn conv_transpose2d_forward<T: Real>(
    g: &ConvTGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let win = &g.window;
    let (gl, kk) = (win.grid_len(), win.kh * win.kw);
    let plane_out = g.cout * win.img_h * win.img_w;
    let mut out = vec![T::zero(); g.n * plane_out];
    let mut cols = vec![T::zero(); g.cout * kk * gl];
    for s in 0..g.n {
        let x = &input.data()[s * g.cin * gl..(s + 1) * g.cin * gl];
        gemm(
            T::one(),
            MatRef::new(weight.data(), g.cin, g.cout * kk).t(),
            MatRef::new(x, g.cin, gl),
            T::zero(),
            &mut cols,
        );
        let y = &mut out[s * plane_out..(s + 1) * plane_out];
        win.col2im(&cols, g.cout, y);
        if let Some(b) = bias {
            for (oc, plane) in y.chunks_mut(win.img_h * win.img_w).enumerate() {
                let bv = b.data()[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, win.img_h, win.img_w], out).expect("conv_transpose2d shape")
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    g: &ConvTGeom,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let win = &g.window;
    let (gl, kk) = (win.grid_len(), win.kh * win.kw);
    let plane_out = g.cout * win.img_h * win.img_w;
    let mut dw = vec![T::zero(); g.cin * g.cout * kk];
    let mut dx = need_input.then(|| vec![T::zero(); g.n * g.cin * gl]);
    let mut db = has_bias.then(|| vec![T::zero(); g.cout]);
    let mut cols = vec![T::zero(); g.cout * kk * gl];
    for s in 0..g.n {
        let dy = &grad_out.data()[s * plane_out..(s + 1) * plane_out];
        if let Some(db) = db.as_mut() {
            for (oc, plane) in dy.chunks(win.img_h * win.img_w).enumerate() {
                db[oc] += plane.iter().copied().sum::<T>();
            }
        }
        win.im2col(dy, g.cout, &mut cols);
        let x = &input.data()[s * g.cin * gl..(s + 1) * g.cin * gl];
        gemm(
            T::one(),
            MatRef::new(x, g.cin, gl),
            MatRef::new(&cols, g.cout * kk, gl).t(),
            T::one(),
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                MatRef::new(weight.data(), g.cin, g.cout * kk),
                MatRef::new(&cols, g.cout * kk, gl),
                T::zero(),
                &mut dx[s * g.cin * gl..(s + 1) * g.cin * gl],
            );
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d).expect("dx shape")),
        weight: Tensor::new(weight.shape().to_vec(), dw).expect("dw shape"),
        bias: db.map(|d| Tensor::new(vec![g.cout], d).expect("db shape")),
    }
}

/// Zero-padded cross-correlation with unit stride.
///
/// `input` is `[N, C, H, W]`, `weight` is `[O, C, kh, kw]` with odd extents;
/// the output is `[N, O, H + 2p - kh + 1, W + 2p - kw + 1]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geometry(input, weight, bias, padding, None)?;
    Ok(conv2d_forward(&g, input, weight, bias))
}

/// Transposed convolution (the input-gradient of a strided convolution).
///
/// `weight` is `[C_in, C_out, kh, kw]`; with zero padding the output extent
/// is `(H - 1) * stride + kh`.
pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvTransposeParams,
) -> Result<Tensor<T>> {
    let g = conv_transpose2d_geometry(input, weight, bias, params)?;
    Ok(conv_transpose2d_forward(&g, input, weight, bias))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation.
    fn conv2d_loops(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, p: usize) -> Tensor<f64> {
        let [n, c, h, wd] = x.dims4("t").unwrap();
        let [o, _, kh, kw] = w.dims4("t").unwrap();
        let (oh, ow) = (h + 2 * p - kh + 1, wd + 2 * p - kw + 1);
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for s in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.data()[oc];
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let y = i as isize + ki as isize - p as isize;
                                    let xx = j as isize + kj as isize - p as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * c + ic) * h + y as usize) * wd + xx as usize]
                                        * w.data()[((oc * c + ic) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out.data_mut()[((s * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    /// Each input value stamped into the output through the kernel.
    fn conv_transpose_loops(x: &Tensor<f64>, w: &Tensor<f64>, p: ConvTransposeParams) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4("t").unwrap();
        let [_, cout, kh, kw] = w.dims4("t").unwrap();
        let oh = p.output_extent(h, kh).unwrap();
        let ow = p.output_extent(wd, kw).unwrap();
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for s in 0..n {
            for ic in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        let v = x.data()[((s * cin + ic) * h + i) * wd + j];
                        for oc in 0..cout {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let y = (i * p.stride + ki) as isize - p.padding as isize;
                                    let xx = (j * p.stride + kj) as isize - p.padding as isize;
                                    if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                        continue;
                                    }
                                    out.data_mut()[((s * cout + oc) * oh + y as usize) * ow + xx as usize] +=
                                        v * w.data()[((ic * cout + oc) * kh + ki) * kw + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 4, 5], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, Some(&b), 0).unwrap(), x);
        let y = conv_transpose2d(&x, &w, Some(&b), ConvTransposeParams::stride(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_center_counts_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        for p in [0, 1, 2] {
            let fast = conv2d(&x, &w, Some(&b), p).unwrap();
            let slow = conv2d_loops(&x, &w, &b, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-6, "padding {p}");
        }
    }

    #[test]
    fn masked_taps_equal_zeroed_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 2, 6, 6], &mut rng);
        let w = random(&[3, 2, 5, 5], &mut rng);
        let mask: Vec<bool> = (0..25).map(|i| i < 12).collect();
        let masked_w = Tensor::from_fn(w.shape(), |i| if mask[i % 25] { w.data()[i] } else { 0.0 });
        let g = conv2d_geometry(&x, &w, None, 2, Some(&mask)).unwrap();
        let fast = conv2d_forward(&g, &x, &w, None);
        let want = conv2d(&x, &masked_w, None, 2).unwrap();
        assert!(fast.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn conv_transpose_stamps_ones() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0f64);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv_transpose2d(&x, &w, None, ConvTransposeParams::stride(2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_transpose_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4, 3], &mut rng);
        let w = random(&[3, 2, 5, 5], &mut rng);
        for params in [
            ConvTransposeParams::stride(2),
            ConvTransposeParams { stride: 2, padding: 2, output_padding: 1 },
            ConvTransposeParams { stride: 1, padding: 1, output_padding: 0 },
            ConvTransposeParams { stride: 3, padding: 1, output_padding: 2 },
        ] {
            let fast = conv_transpose2d(&x, &w, None, params).unwrap();
            let slow = conv_transpose_loops(&x, &w, params);
            assert_eq!(fast.shape(), slow.shape(), "{params:?}");
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{params:?}");
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv2d(x; w), y> == <x, conv_transpose2d(y; w)> with the weight read as [O, C] -> [C_in=O, C_out=C].
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 3, 6, 5], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let cx = conv2d(&x, &w, None, 1).unwrap();
        let y = random(cx.shape(), &mut rng);
        let ty = conv_transpose2d(
            &y,
            &w,
            None,
            ConvTransposeParams { stride: 1, padding: 1, output_padding: 0 },
        )
        .unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs = cx.dot(&y);
        let rhs = x.dot(&ty);
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");

        // f32 tolerance
        let (x32, w32, y32) = (x.cast::<f32>(), w.cast::<f32>(), y.cast::<f32>());
        let lhs = conv2d(&x32, &w32, None, 1).unwrap().dot(&y32);
        let rhs = x32.dot(
            &conv_transpose2d(&y32, &w32, None, ConvTransposeParams { stride: 1, padding: 1, output_padding: 0 })
                .unwrap(),
        );
        assert!(((lhs - rhs) / lhs.abs().max(1.0)).abs() < 1e-5);
    }

    #[test]
    fn shape_errors_name_dimension() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let w_even = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &w_even, None, 1).is_err());
    }
}
