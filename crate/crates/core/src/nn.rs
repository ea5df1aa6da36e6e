//! Structured differentiable layers: 2D convolution, ceil-mode 2x2 max
//! pooling, transposed convolution, 1x1x1 3D convolution across the leading
//! (feature-map) axis, and spatial dropout.
//!
//! Spatial tensors are channels-last, `[..., H, W, C]`; any leading axes are
//! treated as a batch of independent frames.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Splits `[..., H, W, C]` into (batch, H, W, C).
fn frames_of(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    let r = shape.len();
    if r < 3 {
        return Err(shape_err!("{what} expects [..., H, W, C], got {:?}", shape));
    }
    let batch = shape[..r - 3].iter().product();
    Ok((batch, shape[r - 3], shape[r - 2], shape[r - 1]))
}

fn with_spatial(shape: &[usize], h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut out = shape[..shape.len() - 3].to_vec();
    out.extend_from_slice(&[h, w, c]);
    out
}

#[inline]
fn axpy<E: Element>(acc: &mut [E], a: E, x: &[E]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * *v;
    }
}

#[inline]
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut s = E::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    oh: usize,
    ow: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    /// Input pixel read by output (oy, ox) at kernel tap (ky, kx), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

fn out_extent(n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let o = n.div_ceil(stride);
            let total = ((o - 1) * stride + k).saturating_sub(n);
            Ok((o, total / 2))
        }
        Padding::Valid => {
            if n < k {
                return Err(shape_err!("valid conv: extent {n} smaller than kernel {k}"));
            }
            Ok(((n - k) / stride + 1, 0))
        }
    }
}

/// Cross-correlation of `x: [..., H, W, Cin]` with `weight: [kh, kw, Cin, Cout]`
/// plus an optional `bias: [Cout]`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<E>> {
    let (batch, h, w, cin) = frames_of(x.shape(), "conv2d")?;
    let &[kh, kw, wc, cout] = weight.shape() else {
        return Err(shape_err!("conv2d weight must be [kh, kw, cin, cout], got {:?}", weight.shape()));
    };
    if wc != cin {
        return Err(shape_err!("conv2d: input has {cin} channels, weight expects {wc}"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("conv2d bias shape {:?}, expected [{cout}]", b.shape()));
        }
    }
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(Error::Config("conv2d stride and kernel must be positive".into()));
    }
    if h == 0 || w == 0 {
        return Err(shape_err!("conv2d on empty spatial extent {:?}", x.shape()));
    }
    let (oh, pad_top) = out_extent(h, kh, stride, padding)?;
    let (ow, pad_left) = out_extent(w, kw, stride, padding)?;
    let g = ConvGeom { batch, h, w, cin, oh, ow, cout, kh, kw, stride, pad_top, pad_left };

    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![E::zero(); batch * oh * ow * cout];
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let o0 = ((b * oh + oy) * ow + ox) * cout;
                let acc = &mut out[o0..o0 + cout];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias.data());
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let Some((iy, ix)) = g.source(oy, ox, ky, kx) else { continue };
                        let x0 = ((b * h + iy) * w + ix) * cin;
                        let w0 = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[x0 + ci];
                            if xv != E::zero() {
                                axpy(acc, xv, &wd[w0 + ci * cout..w0 + (ci + 1) * cout]);
                            }
                        }
                    }
                }
            }
        }
    }

    let shape = with_spatial(x.shape(), oh, ow, cout);
    let (xs, ws) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    Ok(Tensor::from_op(out, shape, "conv2d", &inputs, move |gy| {
        let xd = xs.data();
        let wd = ws.data();
        let want_x = xs.requires_grad();
        let want_w = ws.requires_grad();
        let mut gx = want_x.then(|| vec![E::zero(); xd.len()]);
        let mut gw = want_w.then(|| vec![E::zero(); wd.len()]);
        for b in 0..g.batch {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let o0 = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                    let go = &gy[o0..o0 + g.cout];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let Some((iy, ix)) = g.source(oy, ox, ky, kx) else { continue };
                            let x0 = ((b * g.h + iy) * g.w + ix) * g.cin;
                            let w0 = (ky * g.kw + kx) * g.cin * g.cout;
                            for ci in 0..g.cin {
                                let wr = w0 + ci * g.cout..w0 + (ci + 1) * g.cout;
                                if let Some(gx) = gx.as_mut() {
                                    gx[x0 + ci] += dot(&wd[wr.clone()], go);
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let xv = xd[x0 + ci];
                                    if xv != E::zero() {
                                        axpy(&mut gw[wr], xv, go);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut grads = vec![gx, gw];
        if has_bias {
            let mut gb = vec![E::zero(); g.cout];
            for px in gy.chunks_exact(g.cout) {
                gb.iter_mut().zip(px).for_each(|(a, v)| *a += *v);
            }
            grads.push(Some(gb));
        }
        grads
    }))
}

/// 2x2 max pooling with stride 2 in ceil mode: odd trailing rows/columns
/// form partial windows. Ties route the gradient to the first maximum in
/// row-major window order.
pub fn maxpool2<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (batch, h, w, c) = frames_of(x.shape(), "maxpool2")?;
    if h == 0 || w == 0 {
        return Err(shape_err!("maxpool2 on empty spatial extent {:?}", x.shape()));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xd = x.data();
    let n_out = batch * oh * ow * c;
    let mut out = Vec::with_capacity(n_out);
    let mut arg = Vec::with_capacity(n_out);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_i = usize::MAX;
                    let mut best = E::neg_infinity();
                    for dy in 0..2 {
                        let iy = oy * 2 + dy;
                        if iy >= h {
                            continue;
                        }
                        for dx in 0..2 {
                            let ix = ox * 2 + dx;
                            if ix >= w {
                                continue;
                            }
                            let i = ((b * h + iy) * w + ix) * c + ch;
                            if best_i == usize::MAX || xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    let in_len = xd.len();
    Ok(Tensor::from_op(
        out,
        with_spatial(x.shape(), oh, ow, c),
        "maxpool2",
        &[x],
        move |gy| {
            let mut gx = vec![E::zero(); in_len];
            for (g, &i) in gy.iter().zip(&arg) {
                gx[i] += *g;
            }
            vec![Some(gx)]
        },
    ))
}

/// Transposed convolution (the adjoint of a strided convolution) of
/// `x: [..., H, W, Cin]` with `weight: [kh, kw, Cin, Cout]`. The full output
/// is `((H-1)*s + kh, (W-1)*s + kw)`; `crop` keeps its top-left corner.
pub fn conv2d_transpose<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    crop: Option<(usize, usize)>,
) -> Result<Tensor<E>> {
    let (batch, h, w, cin) = frames_of(x.shape(), "conv2d_transpose")?;
    let &[kh, kw, wc, cout] = weight.shape() else {
        return Err(shape_err!("transposed conv weight must be [kh, kw, cin, cout], got {:?}", weight.shape()));
    };
    if wc != cin {
        return Err(shape_err!("conv2d_transpose: input has {cin} channels, weight expects {wc}"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("conv2d_transpose bias shape {:?}, expected [{cout}]", b.shape()));
        }
    }
    if stride == 0 || h == 0 || w == 0 {
        return Err(shape_err!("conv2d_transpose needs positive stride and extent"));
    }
    let full = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    let (th, tw) = crop.unwrap_or(full);
    if th > full.0 || tw > full.1 {
        return Err(shape_err!(
            "requested crop {:?} exceeds transposed-conv output {:?}",
            (th, tw),
            full
        ));
    }
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![E::zero(); batch * th * tw * cout];
    if let Some(bias) = bias {
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(bias.data());
        }
    }
    for b in 0..batch {
        for iy in 0..h {
            for ix in 0..w {
                let x0 = ((b * h + iy) * w + ix) * cin;
                for ky in 0..kh {
                    let oy = iy * stride + ky;
                    if oy >= th {
                        continue;
                    }
                    for kx in 0..kw {
                        let ox = ix * stride + kx;
                        if ox >= tw {
                            continue;
                        }
                        let o0 = ((b * th + oy) * tw + ox) * cout;
                        let w0 = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[x0 + ci];
                            if xv != E::zero() {
                                axpy(
                                    &mut out[o0..o0 + cout],
                                    xv,
                                    &wd[w0 + ci * cout..w0 + (ci + 1) * cout],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    let (xs, ws) = (x.clone(), weight.clone());
    let has_bias = bias.is_some();
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    Ok(Tensor::from_op(
        out,
        with_spatial(x.shape(), th, tw, cout),
        "conv2d_transpose",
        &inputs,
        move |gy| {
            let xd = xs.data();
            let wd = ws.data();
            let mut gx = xs.requires_grad().then(|| vec![E::zero(); xd.len()]);
            let mut gw = ws.requires_grad().then(|| vec![E::zero(); wd.len()]);
            for b in 0..batch {
                for iy in 0..h {
                    for ix in 0..w {
                        let x0 = ((b * h + iy) * w + ix) * cin;
                        for ky in 0..kh {
                            let oy = iy * stride + ky;
                            if oy >= th {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox = ix * stride + kx;
                                if ox >= tw {
                                    continue;
                                }
                                let o0 = ((b * th + oy) * tw + ox) * cout;
                                let go = &gy[o0..o0 + cout];
                                let w0 = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let wr = w0 + ci * cout..w0 + (ci + 1) * cout;
                                    if let Some(gx) = gx.as_mut() {
                                        gx[x0 + ci] += dot(&wd[wr.clone()], go);
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        let xv = xd[x0 + ci];
                                        if xv != E::zero() {
                                            axpy(&mut gw[wr], xv, go);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![E::zero(); cout];
                for px in gy.chunks_exact(cout) {
                    gb.iter_mut().zip(px).for_each(|(a, v)| *a += *v);
                }
                grads.push(Some(gb));
            }
            grads
        },
    ))
}

/// 1x1x1 3D convolution acting across the leading axis of `x: [T, ...]`:
/// every position gets the same linear map from T input maps to M output
/// maps, `y[m, p] = bias[m] + sum_t weight[m, t] * x[t, p]`.
pub fn conv3d_1x1<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let t = *x
        .shape()
        .first()
        .ok_or_else(|| shape_err!("conv3d_1x1 needs a leading map axis"))?;
    let &[m, wt] = weight.shape() else {
        return Err(shape_err!("conv3d_1x1 weight must be [out_maps, in_maps], got {:?}", weight.shape()));
    };
    if m == 0 {
        return Err(Error::Config("conv3d_1x1 needs at least one output map".into()));
    }
    if wt != t {
        return Err(shape_err!("conv3d_1x1: {t} input maps, weight expects {wt}"));
    }
    if bias.shape() != [m] {
        return Err(shape_err!("conv3d_1x1 bias shape {:?}, expected [{m}]", bias.shape()));
    }
    let p = x.numel() / t.max(1);
    let xd = x.data();
    let wd = weight.data();
    let mut out = Vec::with_capacity(m * p);
    for mi in 0..m {
        let mut row = vec![bias.data()[mi]; p];
        for ti in 0..t {
            axpy(&mut row, wd[mi * t + ti], &xd[ti * p..(ti + 1) * p]);
        }
        out.extend(row);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = m;
    let (xs, ws) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(out, shape, "conv3d_1x1", &[x, weight, bias], move |gy| {
        let xd = xs.data();
        let wd = ws.data();
        let gx = xs.requires_grad().then(|| {
            let mut gx = vec![E::zero(); t * p];
            for ti in 0..t {
                for mi in 0..m {
                    axpy(&mut gx[ti * p..(ti + 1) * p], wd[mi * t + ti], &gy[mi * p..(mi + 1) * p]);
                }
            }
            gx
        });
        let mut gw = vec![E::zero(); m * t];
        for mi in 0..m {
            for ti in 0..t {
                gw[mi * t + ti] = dot(&gy[mi * p..(mi + 1) * p], &xd[ti * p..(ti + 1) * p]);
            }
        }
        let gb = (0..m).map(|mi| gy[mi * p..(mi + 1) * p].iter().copied().sum()).collect();
        vec![gx, Some(gw), Some(gb)]
    }))
}

/// Drops whole slices along axis 0 with probability `rate` and rescales the
/// survivors by `1 / (1 - rate)`. Identity in eval mode or when `rate == 0`.
pub fn spatial_dropout<E: Element>(
    x: &Tensor<E>,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let t = *x
        .shape()
        .first()
        .ok_or_else(|| shape_err!("spatial_dropout needs a leading map axis"))?;
    let keep = E::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<E> = (0..t)
        .map(|_| if rng.gen::<f64>() < rate { E::zero() } else { keep })
        .collect();
    let mut mshape = vec![1; x.rank()];
    mshape[0] = t;
    x.mul(&Tensor::from_vec(mask, &mshape)?)
}

/// Convolution layer whose weight and bias live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: Padding,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        group: Group,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!("{name}: kernel and channels must be positive")));
        }
        let area = kernel.0 * kernel.1;
        let weight = store.glorot(
            format!("{name}.weight"),
            group,
            &[kernel.0, kernel.1, in_channels, out_channels],
            area * in_channels,
            area * out_channels,
            rng,
        );
        let bias = store.constant(format!("{name}.bias"), group, &[out_channels], 0.0);
        Ok(Conv2d { kernel, in_channels, out_channels, stride: 1, padding, weight, bias })
    }

    pub fn forward<E: Element>(&self, store: &ParamStore<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(x, store.get(self.weight), Some(store.get(self.bias)), self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels + self.out_channels
    }
}

/// Stride-2 upsampling layer cropped to a requested spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        group: Group,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!("{name}: channels must be positive")));
        }
        let kernel = (2, 2);
        let weight = store.glorot(
            format!("{name}.weight"),
            group,
            &[kernel.0, kernel.1, in_channels, out_channels],
            4 * in_channels,
            4 * out_channels,
            rng,
        );
        let bias = store.constant(format!("{name}.bias"), group, &[out_channels], 0.0);
        Ok(ConvTranspose2d { kernel, in_channels, out_channels, stride: 2, weight, bias })
    }

    pub fn forward<E: Element>(
        &self,
        store: &ParamStore<E>,
        x: &Tensor<E>,
        target_hw: (usize, usize),
    ) -> Result<Tensor<E>> {
        conv2d_transpose(x, store.get(self.weight), Some(store.get(self.bias)), self.stride, Some(target_hw))
    }

    pub fn param_count(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels + self.out_channels
    }
}

/// The 1x1x1 3D convolution that maps feature maps to predicted frames.
#[derive(Debug, Clone)]
pub struct Conv3d1x1 {
    pub in_maps: usize,
    pub out_maps: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3d1x1 {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        group: Group,
        in_maps: usize,
        out_maps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if out_maps < 1 || in_maps < 1 {
            return Err(Error::Config(format!("{name}: map counts must be at least 1")));
        }
        let weight = store.glorot(format!("{name}.weight"), group, &[out_maps, in_maps], in_maps, out_maps, rng);
        let bias = store.constant(format!("{name}.bias"), group, &[out_maps], 0.0);
        Ok(Conv3d1x1 { in_maps, out_maps, weight, bias })
    }

    pub fn forward<E: Element>(&self, store: &ParamStore<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv3d_1x1(x, store.get(self.weight), store.get(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.out_maps * self.in_maps + self.out_maps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialDropout {
    pub rate: f64,
}

impl SpatialDropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(SpatialDropout { rate })
    }

    pub fn forward<E: Element>(&self, x: &Tensor<E>, mode: Mode, rng: &mut impl Rng) -> Result<Tensor<E>> {
        spatial_dropout(x, self.rate, mode, rng)
    }
}
