//! Tensor operations that candle either lacks or implements too slowly on
//! CPU: batched matrix products, im2col convolution and max-pooling, all as
//! custom ops with hand-written backward passes, plus resize operators
//! expressed as interpolation-matrix products so autograd covers them.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result as CandleResult, Shape, Tensor, WithDType};

use super::blas::Gemm;
use crate::error::{Error, Result};

pub(crate) trait Scalar: Gemm + WithDType {
    const ZERO: Self;
    fn exp_(self) -> Self;
}
impl Scalar for f32 {
    const ZERO: Self = 0.0;
    fn exp_(self) -> Self {
        self.exp()
    }
}
impl Scalar for f64 {
    const ZERO: Self = 0.0;
    fn exp_(self) -> Self {
        self.exp()
    }
}

fn contiguous_slice<'a, T: Scalar>(s: &'a CpuStorage, l: &Layout) -> CandleResult<&'a [T]> {
    if !l.is_contiguous() {
        candle_core::bail!("custom op requires contiguous input");
    }
    let data = T::cpu_storage_as_slice(s)?;
    Ok(&data[l.start_offset()..l.start_offset() + l.shape().elem_count()])
}

// ---------------------------------------------------------------------------
// Batched matrix product
// ---------------------------------------------------------------------------

/// `C = op(A) @ op(B)` over a batch dimension.
///
/// Inputs are rank-3 and contiguous. Batch sizes must match, or either side
/// may have batch 1 and is broadcast. `ta`/`tb` transpose the per-batch
/// matrices without materializing the transpose (BLAS handles the strides).
struct BatchedGemm {
    ta: bool,
    tb: bool,
    alpha: f64,
}

struct GemmDims {
    ba: usize,
    bb: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl BatchedGemm {
    fn dims(&self, l1: &Layout, l2: &Layout) -> CandleResult<GemmDims> {
        let (ba, p, q) = l1.shape().dims3()?;
        let (bb, r, s) = l2.shape().dims3()?;
        let (m, k1) = if self.ta { (q, p) } else { (p, q) };
        let (k2, n) = if self.tb { (s, r) } else { (r, s) };
        if k1 != k2 {
            candle_core::bail!(
                "bmm inner dim mismatch: {:?} x {:?} (ta={} tb={})",
                l1.shape(),
                l2.shape(),
                self.ta,
                self.tb
            );
        }
        if ba != bb && ba != 1 && bb != 1 {
            candle_core::bail!("bmm batch mismatch: {ba} vs {bb}");
        }
        Ok(GemmDims { ba, bb, m, k: k1, n })
    }

    fn fwd<T: Scalar>(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        let d = self.dims(l1, l2)?;
        let a = contiguous_slice::<T>(s1, l1)?;
        let b = contiguous_slice::<T>(s2, l2)?;
        let batch = d.ba.max(d.bb);
        let (sa, sb) = (d.m * d.k, d.k * d.n);
        // beta = 0 gemm overwrites every output element, so the buffer can
        // skip zero-initialization
        let mut out: Vec<T> = Vec::with_capacity(batch * d.m * d.n);
        #[allow(clippy::uninit_vec)]
        unsafe {
            out.set_len(batch * d.m * d.n)
        };
        let lda = if self.ta { d.m } else { d.k };
        let ldb = if self.tb { d.k } else { d.n };
        for i in 0..batch {
            let ai = if d.ba == 1 { 0 } else { i * sa };
            let bi = if d.bb == 1 { 0 } else { i * sb };
            T::gemm(
                self.ta,
                self.tb,
                d.m,
                d.n,
                d.k,
                T::from_f64(self.alpha),
                &a[ai..ai + sa],
                lda,
                &b[bi..bi + sb],
                ldb,
                T::from_f64(0.0),
                &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
                d.n,
            );
        }
        Ok((T::to_cpu_storage_owned(out), Shape::from((batch, d.m, d.n))))
    }
}

impl CustomOp2 for BatchedGemm {
    fn name(&self) -> &'static str {
        "blas-bmm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => self.fwd::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("blas-bmm: unsupported dtype (want f32 or f64)"),
        }
    }

    fn bwd(
        &self,
        a: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        // d op(A) = alpha * G @ op(B)^T and d op(B) = alpha * op(A)^T @ G,
        // mapped back through the transpose flags without materializing any
        // transpose.
        let mut da = if self.ta {
            bmm_scaled(b, &g, self.tb, true, self.alpha)?
        } else {
            bmm_scaled(&g, b, false, !self.tb, self.alpha)?
        };
        let mut db = if self.tb {
            bmm_scaled(&g, a, true, self.ta, self.alpha)?
        } else {
            bmm_scaled(a, &g, !self.ta, false, self.alpha)?
        };
        let batch = g.dim(0)?;
        if a.dim(0)? == 1 && batch > 1 {
            da = da.sum_keepdim(0)?;
        }
        if b.dim(0)? == 1 && batch > 1 {
            db = db.sum_keepdim(0)?;
        }
        Ok((Some(da), Some(db)))
    }
}

fn bmm_scaled(a: &Tensor, b: &Tensor, ta: bool, tb: bool, alpha: f64) -> CandleResult<Tensor> {
    a.contiguous()?
        .apply_op2(&b.contiguous()?, BatchedGemm { ta, tb, alpha })
}

/// Batched matrix product `(B,m,k) @ (B,k,n) -> (B,m,n)`; either batch may be
/// 1 and is broadcast.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(bmm_scaled(a, b, false, false, 1.0)?)
}

/// Batched product with transpose flags applied to the per-batch matrices.
pub fn bmm_t(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    Ok(bmm_scaled(a, b, ta, tb, 1.0)?)
}

/// Batched product with transpose flags and a scalar multiplier folded into
/// the gemm.
pub fn bmm_t_scaled(a: &Tensor, b: &Tensor, ta: bool, tb: bool, alpha: f64) -> Result<Tensor> {
    Ok(bmm_scaled(a, b, ta, tb, alpha)?)
}

/// `x @ w + bias` where `x` is `(..., in)` and `w` is `(in, out)`.
///
/// All leading dimensions collapse into a single gemm.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (k, n) = w.dims2()?;
    let dims = x.dims().to_vec();
    let k_in = *dims.last().ok_or_else(|| Error::shape("linear: scalar input"))?;
    if k_in != k {
        return Err(Error::shape(format!(
            "linear: input width {k_in} does not match weight {k}x{n}"
        )));
    }
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let x2 = x.reshape((1, rows, k))?;
    let w3 = w.reshape((1, k, n))?;
    let mut out = bmm(&x2, &w3)?;
    if let Some(b) = bias {
        out = add_row_bias(&out, b)?;
    }
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = n;
    Ok(out.reshape(out_dims)?)
}

// ---------------------------------------------------------------------------
// Convolution (im2col + gemm)
// ---------------------------------------------------------------------------

/// 2D convolution: `x (B,C,H,W) * w (OC,C,K,K) -> (B,OC,OH,OW)`.
///
/// Forward lowers each batch item to a `(C*K*K, OH*OW)` column matrix and
/// multiplies; backward reuses the same lowering for the weight gradient and
/// scatters `w^T @ grad` back through col2im for the input gradient.
struct Conv2dIm2col {
    stride: usize,
    padding: usize,
}

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dIm2col {
    fn dims(&self, lx: &Layout, lw: &Layout) -> CandleResult<ConvDims> {
        let (b, c, h, w) = lx.shape().dims4()?;
        let (oc, cw, kh, kw) = lw.shape().dims4()?;
        if cw != c {
            candle_core::bail!("conv2d: input has {c} channels, weight expects {cw}");
        }
        if kh != kw {
            candle_core::bail!("conv2d: only square kernels are supported");
        }
        let k = kh;
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            candle_core::bail!("conv2d: kernel larger than padded input");
        }
        let oh = (h + 2 * self.padding - k) / self.stride + 1;
        let ow = (w + 2 * self.padding - k) / self.stride + 1;
        Ok(ConvDims { b, c, h, w, oc, k, oh, ow })
    }

    fn fwd<T: Scalar>(
        &self,
        sx: &CpuStorage,
        lx: &Layout,
        sw: &CpuStorage,
        lw: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        let d = self.dims(lx, lw)?;
        let x = contiguous_slice::<T>(sx, lx)?;
        let w = contiguous_slice::<T>(sw, lw)?;
        let ckk = d.c * d.k * d.k;
        let ohw = d.oh * d.ow;
        let mut col = vec![T::from_f64(0.0); ckk * ohw];
        let mut out = vec![T::from_f64(0.0); d.b * d.oc * ohw];
        for bi in 0..d.b {
            im2col(
                &x[bi * d.c * d.h * d.w..(bi + 1) * d.c * d.h * d.w],
                &d,
                self.stride,
                self.padding,
                &mut col,
            );
            T::gemm(
                false,
                false,
                d.oc,
                ohw,
                ckk,
                T::from_f64(1.0),
                w,
                ckk,
                &col,
                ohw,
                T::from_f64(0.0),
                &mut out[bi * d.oc * ohw..(bi + 1) * d.oc * ohw],
                ohw,
            );
        }
        Ok((
            T::to_cpu_storage_owned(out),
            Shape::from((d.b, d.oc, d.oh, d.ow)),
        ))
    }

    fn bwd_t<T: Scalar>(&self, x: &Tensor, w: &Tensor, g: &Tensor) -> CandleResult<(Tensor, Tensor)> {
        let xc = x.contiguous()?;
        let wc = w.contiguous()?;
        let gc = g.contiguous()?;
        let d = self.dims(xc.layout(), wc.layout())?;
        let xs = xc.flatten_all()?.to_vec1::<T>()?;
        let ws = wc.flatten_all()?.to_vec1::<T>()?;
        let gs = gc.flatten_all()?.to_vec1::<T>()?;
        let ckk = d.c * d.k * d.k;
        let ohw = d.oh * d.ow;
        let chw = d.c * d.h * d.w;
        let mut col = vec![T::from_f64(0.0); ckk * ohw];
        let mut gcol = vec![T::from_f64(0.0); ckk * ohw];
        let mut gx = vec![T::from_f64(0.0); d.b * chw];
        let mut gw = vec![T::from_f64(0.0); d.oc * ckk];
        for bi in 0..d.b {
            let gb = &gs[bi * d.oc * ohw..(bi + 1) * d.oc * ohw];
            // weight gradient: sum_b g_b @ col_b^T
            im2col(&xs[bi * chw..(bi + 1) * chw], &d, self.stride, self.padding, &mut col);
            T::gemm(
                false,
                true,
                d.oc,
                ckk,
                ohw,
                T::from_f64(1.0),
                gb,
                ohw,
                &col,
                ohw,
                T::from_f64(if bi == 0 { 0.0 } else { 1.0 }),
                &mut gw,
                ckk,
            );
            // input gradient: col2im(w^T @ g_b)
            T::gemm(
                true,
                false,
                ckk,
                ohw,
                d.oc,
                T::from_f64(1.0),
                &ws,
                ckk,
                gb,
                ohw,
                T::from_f64(0.0),
                &mut gcol,
                ohw,
            );
            col2im(&gcol, &d, self.stride, self.padding, &mut gx[bi * chw..(bi + 1) * chw]);
        }
        let dev = x.device();
        let gx = Tensor::from_vec(gx, (d.b, d.c, d.h, d.w), dev)?;
        let gw = Tensor::from_vec(gw, (d.oc, d.c, d.k, d.k), dev)?;
        Ok((gx, gw))
    }
}

/// Lowers one image `(C,H,W)` into columns `(C*K*K, OH*OW)`.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, stride: usize, pad: usize, col: &mut [T]) {
    let zero = T::from_f64(0.0);
    let ohw = d.oh * d.ow;
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let dst_row = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut dst_row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(zero);
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if stride == 1 && kx >= pad && d.w + pad >= kx + d.ow {
                        // contiguous fast path: ix = ox + kx - pad stays in range
                        dst.copy_from_slice(&src_row[kx - pad..kx - pad + d.ow]);
                    } else {
                        for (ox, slot) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *slot = if ix < 0 || ix >= d.w as isize {
                                zero
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, stride: usize, pad: usize, x: &mut [T]) {
    let ohw = d.oh * d.ow;
    for c in 0..d.c {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let src_row = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &src_row[oy * d.ow..(oy + 1) * d.ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            plane[iy as usize * d.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl CustomOp2 for Conv2dIm2col {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => self.fwd::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("conv2d: unsupported dtype (want f32 or f64)"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>)> {
        let (gx, gw) = match x.dtype() {
            candle_core::DType::F32 => self.bwd_t::<f32>(x, w, g)?,
            candle_core::DType::F64 => self.bwd_t::<f64>(x, w, g)?,
            dt => candle_core::bail!("conv2d: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// 2D convolution with optional bias; `bias` has shape `(OC,)`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let out = x
        .contiguous()?
        .apply_op2(&w.contiguous()?, Conv2dIm2col { stride, padding })?;
    match bias {
        Some(b) => {
            let oc = b.dim(0)?;
            Ok(out.broadcast_add(&b.reshape((1, oc, 1, 1))?)?)
        }
        None => Ok(out),
    }
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

struct MaxPool2d {
    k: usize,
    stride: usize,
    padding: usize,
}

impl MaxPool2d {
    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.k) / self.stride + 1,
            (w + 2 * self.padding - self.k) / self.stride + 1,
        )
    }

    /// Index of the first maximum in each pooling window, or the max value.
    fn scan<T: Scalar>(
        &self,
        x: &[T],
        (b, c, h, w): (usize, usize, usize, usize),
        mut visit: impl FnMut(usize, usize, T),
    ) {
        let (oh, ow) = self.out_dims(h, w);
        for bc in 0..b * c {
            let plane = &x[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(usize, T)> = None;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            let v = plane[idx];
                            if best.map_or(true, |(_, bv)| v > bv) {
                                best = Some((idx, v));
                            }
                        }
                    }
                    let (idx, v) = best.expect("pool window fully outside input");
                    visit(bc, idx, v);
                    let _ = (oy, ox);
                }
            }
        }
    }
}

impl CustomOp1 for MaxPool2d {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CandleResult<(CpuStorage, Shape)> {
        fn run<T: Scalar>(
            op: &MaxPool2d,
            s: &CpuStorage,
            l: &Layout,
        ) -> CandleResult<(CpuStorage, Shape)> {
            let (b, c, h, w) = l.shape().dims4()?;
            let x = contiguous_slice::<T>(s, l)?;
            let (oh, ow) = op.out_dims(h, w);
            let mut out = Vec::with_capacity(b * c * oh * ow);
            op.scan(x, (b, c, h, w), |_, _, v| out.push(v));
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, oh, ow))))
        }
        match s {
            CpuStorage::F32(_) => run::<f32>(self, s, l),
            CpuStorage::F64(_) => run::<f64>(self, s, l),
            _ => candle_core::bail!("maxpool2d: unsupported dtype (want f32 or f64)"),
        }
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, g: &Tensor) -> CandleResult<Option<Tensor>> {
        fn run<T: Scalar>(op: &MaxPool2d, x: &Tensor, g: &Tensor) -> CandleResult<Tensor> {
            let dims = x.dims4()?;
            let xs = x.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let gs = g.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let (b, c, h, w) = dims;
            let mut gx = vec![T::from_f64(0.0); b * c * h * w];
            let mut i = 0usize;
            op.scan(&xs, dims, |bc, idx, _| {
                gx[bc * h * w + idx] += gs[i];
                i += 1;
            });
            Tensor::from_vec(gx, (b, c, h, w), x.device())
        }
        let gx = match x.dtype() {
            candle_core::DType::F32 => run::<f32>(self, x, g)?,
            candle_core::DType::F64 => run::<f64>(self, x, g)?,
            dt => candle_core::bail!("maxpool2d: unsupported dtype {dt:?}"),
        };
        Ok(Some(gx))
    }
}

/// Max pooling over square windows. Gradient flows to the first maximum of
/// each window, matching the forward scan order.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(MaxPool2d { k, stride, padding })?)
}

// ---------------------------------------------------------------------------
// Resizing via interpolation matrices
// ---------------------------------------------------------------------------

/// Interpolation flavor for [`resize2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Half-pixel bilinear, clamped at the borders.
    Bilinear,
    /// Box-filter averaging (exact mean over the covered source span).
    Area,
}

/// Builds a `(dst, src)` matrix `L` such that `y = L @ x` resamples a length
/// `src` signal to length `dst`.
pub fn interp_matrix(mode: ResizeMode, src: usize, dst: usize) -> Vec<f64> {
    let mut mat = vec![0f64; dst * src];
    match mode {
        ResizeMode::Bilinear => {
            let scale = src as f64 / dst as f64;
            for i in 0..dst {
                let pos = (i as f64 + 0.5) * scale - 0.5;
                let i0 = pos.floor() as isize;
                let frac = pos - i0 as f64;
                let lo = i0.clamp(0, src as isize - 1) as usize;
                let hi = (i0 + 1).clamp(0, src as isize - 1) as usize;
                mat[i * src + lo] += 1.0 - frac;
                mat[i * src + hi] += frac;
            }
        }
        ResizeMode::Area => {
            let scale = src as f64 / dst as f64;
            for i in 0..dst {
                let lo = i as f64 * scale;
                let hi = (i as f64 + 1.0) * scale;
                let span = hi - lo;
                let mut j = lo.floor() as usize;
                while (j as f64) < hi && j < src {
                    let overlap = hi.min(j as f64 + 1.0) - lo.max(j as f64);
                    if overlap > 0.0 {
                        mat[i * src + j] += overlap / span;
                    }
                    j += 1;
                }
            }
        }
    }
    mat
}

fn interp_tensor(
    mode: ResizeMode,
    src: usize,
    dst: usize,
    dtype: candle_core::DType,
    dev: &candle_core::Device,
) -> Result<Tensor> {
    let m = interp_matrix(mode, src, dst);
    let t = Tensor::from_vec(m, (dst, src), dev)?;
    Ok(t.to_dtype(dtype)?.detach())
}

/// Resamples `(B,C,H,W)` to `(B,C,h2,w2)`. Differentiable: both axes are
/// matrix products, so the backward pass is the transposed interpolation.
pub fn resize2d(x: &Tensor, h2: usize, w2: usize, mode: ResizeMode) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == h2 && w == w2 {
        return Ok(x.clone());
    }
    let mut y = x.reshape((b * c, h, w))?;
    if h != h2 {
        let lr = interp_tensor(mode, h, h2, x.dtype(), x.device())?.unsqueeze(0)?;
        y = bmm(&lr, &y)?;
    }
    if w != w2 {
        let lc = interp_tensor(mode, w, w2, x.dtype(), x.device())?.unsqueeze(0)?;
        y = bmm_t(&y, &lc, false, true)?;
    }
    Ok(y.reshape((b, c, h2, w2))?)
}

// ---------------------------------------------------------------------------
// Composed activations
// ---------------------------------------------------------------------------

/// Numerically stable softmax over the last dimension (fused custom op, see
/// `FusedSoftmax` below).
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(FusedSoftmax)?)
}

/// Logistic sigmoid.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let one = Tensor::ones_like(x)?;
    Ok(one.broadcast_div(&x.neg()?.exp()?.affine(1.0, 1.0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn dev() -> Device {
        Device::Cpu
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn bmm_matches_candle_matmul() {
        let a = Tensor::randn(0f32, 1f32, (3, 5, 7), &dev()).unwrap();
        let b = Tensor::randn(0f32, 1f32, (3, 7, 4), &dev()).unwrap();
        let got = bmm(&a, &b).unwrap();
        let want = a.matmul(&b).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-5);
    }

    #[test]
    fn bmm_transpose_flags() {
        let a = Tensor::randn(0f32, 1f32, (2, 7, 5), &dev()).unwrap();
        let b = Tensor::randn(0f32, 1f32, (2, 4, 7), &dev()).unwrap();
        let got = bmm_t(&a, &b, true, true).unwrap();
        let want = a
            .transpose(1, 2)
            .unwrap()
            .matmul(&b.transpose(1, 2).unwrap().contiguous().unwrap())
            .unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-5);
    }

    #[test]
    fn bmm_broadcast_lhs_backward_sums_over_batch() {
        let a = Var::from_tensor(&Tensor::randn(0f32, 1f32, (1, 3, 4), &dev()).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f32, 1f32, (5, 4, 2), &dev()).unwrap()).unwrap();
        let y = bmm(a.as_tensor(), b.as_tensor()).unwrap();
        assert_eq!(y.dims(), [5, 3, 2]);
        let grads = y.sum_all().unwrap().backward().unwrap();
        let ga = grads.get(&a).unwrap();
        assert_eq!(ga.dims(), [1, 3, 4]);
        // oracle: broadcast a explicitly
        let a_full = a.as_tensor().broadcast_as((5, 3, 4)).unwrap().contiguous().unwrap();
        let av = Var::from_tensor(&a_full).unwrap();
        let y2 = bmm(av.as_tensor(), b.as_tensor()).unwrap();
        let g2 = y2.sum_all().unwrap().backward().unwrap();
        let ga2 = g2.get(&av).unwrap().sum_keepdim(0).unwrap();
        assert!(max_abs_diff(ga, &ga2) < 1e-4);
    }

    #[test]
    fn linear_matches_matmul() {
        let x = Tensor::randn(0f32, 1f32, (2, 6, 5), &dev()).unwrap();
        let w = Tensor::randn(0f32, 1f32, (5, 3), &dev()).unwrap();
        let bias = Tensor::randn(0f32, 1f32, (3,), &dev()).unwrap();
        let got = linear(&x, &w, Some(&bias)).unwrap();
        let want = x
            .reshape((12, 5))
            .unwrap()
            .matmul(&w)
            .unwrap()
            .broadcast_add(&bias)
            .unwrap()
            .reshape((2, 6, 3))
            .unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-5);
    }

    #[test]
    fn conv2d_matches_candle() {
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 3)] {
            let x = Tensor::randn(0f32, 1f32, (2, 3, 11, 9), &dev()).unwrap();
            let w = Tensor::randn(0f32, 0.3f32, (4, 3, 3, 3), &dev()).unwrap();
            let got = conv2d(&x, &w, None, stride, padding).unwrap();
            let want = x.conv2d(&w, padding, stride, 1, 1).unwrap();
            assert_eq!(got.dims(), want.dims());
            assert!(max_abs_diff(&got, &want) < 1e-4, "stride={stride} pad={padding}");
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let dev = dev();
        let x0 = Tensor::randn(0f64, 1f64, (1, 2, 5, 5), &dev).unwrap();
        let w0 = Tensor::randn(0f64, 0.5f64, (3, 2, 3, 3), &dev).unwrap();
        let x = Var::from_tensor(&x0).unwrap();
        let w = Var::from_tensor(&w0).unwrap();
        let loss = conv2d(x.as_tensor(), w.as_tensor(), None, 2, 1)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let f = |xv: &Tensor, wv: &Tensor| -> f64 {
            conv2d(xv, wv, None, 2, 1)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let eps = 1e-6;
        for (var, base, other, is_x) in [(&x, &x0, &w0, true), (&w, &w0, &x0, false)] {
            let g = grads
                .get(var)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let flat = base.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in (0..flat.len()).step_by(7) {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[i] += eps;
                minus[i] -= eps;
                let shape = base.dims().to_vec();
                let tp = Tensor::from_vec(plus, shape.clone(), &dev).unwrap();
                let tm = Tensor::from_vec(minus, shape, &dev).unwrap();
                let (fp, fm) = if is_x {
                    (f(&tp, other), f(&tm, other))
                } else {
                    (f(other, &tp), f(other, &tm))
                };
                let fd = (fp - fm) / (2.0 * eps);
                assert!(
                    (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "coord {i}: fd={fd} analytic={}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn maxpool_matches_candle_and_routes_gradient() {
        let x0 = Tensor::randn(0f32, 1f32, (2, 3, 8, 8), &dev()).unwrap();
        let got = max_pool2d(&x0, 2, 2, 0).unwrap();
        let want = x0.max_pool2d(2).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-6);

        // padded pooling gradient: finite differences on a few coords
        let x = Var::from_tensor(&x0.to_dtype(DType::F64).unwrap()).unwrap();
        let loss = max_pool2d(x.as_tensor(), 3, 2, 1)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let g = loss
            .backward()
            .unwrap()
            .get(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let flat = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let f = |v: Vec<f64>| -> f64 {
            let t = Tensor::from_vec(v, (2, 3, 8, 8), &dev()).unwrap();
            max_pool2d(&t, 3, 2, 1)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let eps = 1e-6;
        for i in (0..flat.len()).step_by(37) {
            let mut p = flat.clone();
            let mut m = flat.clone();
            p[i] += eps;
            m[i] -= eps;
            let fd = (f(p) - f(m)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-5, "coord {i}: fd={fd} analytic={}", g[i]);
        }
    }

    #[test]
    fn area_resize_exact_for_integer_factor() {
        let x = Tensor::from_vec(
            (0..16).map(|v| v as f32).collect::<Vec<_>>(),
            (1, 1, 4, 4),
            &dev(),
        )
        .unwrap();
        let y = resize2d(&x, 2, 2, ResizeMode::Area).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn bilinear_resize_preserves_constant_and_is_differentiable() {
        let x = Var::from_tensor(&Tensor::full(3.5f32, (1, 2, 4, 4), &dev()).unwrap()).unwrap();
        let y = resize2d(x.as_tensor(), 8, 8, ResizeMode::Bilinear).unwrap();
        let mn = y.min_all().unwrap().to_scalar::<f32>().unwrap();
        let mx = y.max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!((mn - 3.5).abs() < 1e-6 && (mx - 3.5).abs() < 1e-6);
        let grads = y.sum_all().unwrap().backward().unwrap();
        // every output pixel contributes weight 1 in total: grad sums to 64 per plane
        let g = grads.get(&x).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!((g - 128.0).abs() < 1e-3);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::randn(0f32, 4f32, (3, 7), &dev()).unwrap();
        let s = softmax_last(&x).unwrap();
        let sums = s.sum_keepdim(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for v in sums {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn sigmoid_known_values() {
        let x = Tensor::from_vec(vec![0f64, 100.0, -100.0], (3,), &dev()).unwrap();
        let s = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!(s[2].abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Fused normalization / activation ops
//
// candle composes these from many strided broadcast passes; on a single core
// the fused forms below (one or two passes, hand-written backward) cut the
// per-iteration cost several-fold.
// ---------------------------------------------------------------------------

use candle_core::CustomOp3;

/// Layer normalization over the last dimension with affine parameters.
struct FusedLayerNorm {
    eps: f64,
}

impl FusedLayerNorm {
    fn fwd<T: Scalar>(
        &self,
        sx: &CpuStorage,
        lx: &Layout,
        sg: &CpuStorage,
        lg: &Layout,
        sb: &CpuStorage,
        lb: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        let x = contiguous_slice::<T>(sx, lx)?;
        let g = contiguous_slice::<T>(sg, lg)?;
        let b = contiguous_slice::<T>(sb, lb)?;
        let n = *lx.shape().dims().last().unwrap();
        let rows = x.len() / n;
        let mut out = vec![T::from_f64(0.0); x.len()];
        for r in 0..rows {
            let xr = &x[r * n..(r + 1) * n];
            let (mu, inv_std) = row_stats(xr, self.eps);
            let (mu, inv_std) = (T::from_f64(mu), T::from_f64(inv_std));
            let dst = &mut out[r * n..(r + 1) * n];
            for j in 0..n {
                dst[j] = (xr[j] - mu) * inv_std * g[j] + b[j];
            }
        }
        Ok((T::to_cpu_storage_owned(out), lx.shape().clone()))
    }

    fn bwd_t<T: Scalar>(
        &self,
        x: &Tensor,
        g: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Tensor, Tensor, Tensor)> {
        let n = *x.dims().last().unwrap();
        let xs = x.contiguous()?.flatten_all()?.to_vec1::<T>()?;
        let gs = g.contiguous()?.flatten_all()?.to_vec1::<T>()?;
        let gr = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
        let rows = xs.len() / n;
        let mut dx = vec![T::from_f64(0.0); xs.len()];
        let mut dgamma = vec![0f64; n];
        let mut dbeta = vec![0f64; n];
        for r in 0..rows {
            let xr = &xs[r * n..(r + 1) * n];
            let grr = &gr[r * n..(r + 1) * n];
            let (mu, inv_std) = row_stats(xr, self.eps);
            let mut m1 = 0f64;
            let mut m2 = 0f64;
            for j in 0..n {
                let xh = (xr[j].to_f64() - mu) * inv_std;
                let h = gs[j].to_f64() * grr[j].to_f64();
                m1 += h;
                m2 += h * xh;
                dgamma[j] += grr[j].to_f64() * xh;
                dbeta[j] += grr[j].to_f64();
            }
            m1 /= n as f64;
            m2 /= n as f64;
            for j in 0..n {
                let xh = (xr[j].to_f64() - mu) * inv_std;
                let h = gs[j].to_f64() * grr[j].to_f64();
                dx[r * n + j] = T::from_f64((h - m1 - xh * m2) * inv_std);
            }
        }
        let dev = x.device();
        Ok((
            Tensor::from_vec(dx, x.dims().to_vec(), dev)?,
            Tensor::from_vec(dgamma.into_iter().map(T::from_f64).collect::<Vec<T>>(), n, dev)?,
            Tensor::from_vec(dbeta.into_iter().map(T::from_f64).collect::<Vec<T>>(), n, dev)?,
        ))
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mut sum = 0f64;
    let mut sq = 0f64;
    for v in row {
        let v = v.to_f64();
        sum += v;
        sq += v * v;
    }
    let mu = sum / n;
    let var = (sq / n - mu * mu).max(0.0);
    (mu, 1.0 / (var + eps).sqrt())
}

impl CustomOp3 for FusedLayerNorm {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => self.fwd::<f64>(s1, l1, s2, l2, s3, l3),
            _ => candle_core::bail!("layer-norm: unsupported dtype (want f32 or f64)"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        g: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dgamma, dbeta) = match x.dtype() {
            candle_core::DType::F32 => self.bwd_t::<f32>(x, g, grad)?,
            candle_core::DType::F64 => self.bwd_t::<f64>(x, g, grad)?,
            dt => candle_core::bail!("layer-norm: unsupported dtype {dt:?}"),
        };
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// Fused layer norm over the last dimension.
pub fn layer_norm_fused(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        FusedLayerNorm { eps },
    )?)
}

/// Batch normalization over `(B, C, H, W)` using batch statistics, fused.
struct FusedBatchNorm {
    eps: f64,
}

fn channel_stats_slices<T: Scalar>(x: &[T], c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let batch_c = x.len() / plane / c;
    let m = (batch_c * plane) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for bc in 0..x.len() / plane {
        let ch = bc % c;
        let sl = &x[bc * plane..(bc + 1) * plane];
        let mut sum = 0f64;
        let mut sq = 0f64;
        for v in sl {
            let v = v.to_f64();
            sum += v;
            sq += v * v;
        }
        mean[ch] += sum;
        var[ch] += sq;
    }
    for ch in 0..c {
        mean[ch] /= m;
        var[ch] = (var[ch] / m - mean[ch] * mean[ch]).max(0.0);
    }
    (mean, var)
}

impl FusedBatchNorm {
    fn fwd<T: Scalar>(
        &self,
        sx: &CpuStorage,
        lx: &Layout,
        sg: &CpuStorage,
        lg: &Layout,
        sb: &CpuStorage,
        lb: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        let x = contiguous_slice::<T>(sx, lx)?;
        let g = contiguous_slice::<T>(sg, lg)?;
        let b = contiguous_slice::<T>(sb, lb)?;
        let (_, c, h, w) = lx.shape().dims4()?;
        let plane = h * w;
        let (mean, var) = channel_stats_slices(x, c, plane);
        let mut out = vec![T::from_f64(0.0); x.len()];
        for bc in 0..x.len() / plane {
            let ch = bc % c;
            let inv_std = 1.0 / (var[ch] + self.eps).sqrt();
            let scale = g[ch].to_f64() * inv_std;
            let shift = b[ch].to_f64() - mean[ch] * scale;
            let src = &x[bc * plane..(bc + 1) * plane];
            let dst = &mut out[bc * plane..(bc + 1) * plane];
            for (o, v) in dst.iter_mut().zip(src.iter()) {
                *o = T::from_f64(v.to_f64() * scale + shift);
            }
        }
        Ok((T::to_cpu_storage_owned(out), lx.shape().clone()))
    }

    fn bwd_t<T: Scalar>(
        &self,
        x: &Tensor,
        g: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Tensor, Tensor, Tensor)> {
        let (bsz, c, h, w) = x.dims4()?;
        let plane = h * w;
        let m = (bsz * plane) as f64;
        let xs = x.contiguous()?.flatten_all()?.to_vec1::<T>()?;
        let gs = g.contiguous()?.flatten_all()?.to_vec1::<T>()?;
        let gr = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
        let (mean, var) = channel_stats_slices(&xs, c, plane);
        let mut sum_g = vec![0f64; c];
        let mut sum_gxh = vec![0f64; c];
        for bc in 0..xs.len() / plane {
            let ch = bc % c;
            let inv_std = 1.0 / (var[ch] + self.eps).sqrt();
            let xsl = &xs[bc * plane..(bc + 1) * plane];
            let gsl = &gr[bc * plane..(bc + 1) * plane];
            for (xv, gv) in xsl.iter().zip(gsl.iter()) {
                let xh = (xv.to_f64() - mean[ch]) * inv_std;
                sum_g[ch] += gv.to_f64();
                sum_gxh[ch] += gv.to_f64() * xh;
            }
        }
        let mut dx = vec![T::from_f64(0.0); xs.len()];
        for bc in 0..xs.len() / plane {
            let ch = bc % c;
            let inv_std = 1.0 / (var[ch] + self.eps).sqrt();
            let gamma_s = gs[ch].to_f64() * inv_std;
            let xsl = &xs[bc * plane..(bc + 1) * plane];
            let gsl = &gr[bc * plane..(bc + 1) * plane];
            let dsl = &mut dx[bc * plane..(bc + 1) * plane];
            for j in 0..plane {
                let xh = (xsl[j].to_f64() - mean[ch]) * inv_std;
                dsl[j] = T::from_f64(
                    gamma_s * (gsl[j].to_f64() - sum_g[ch] / m - xh * sum_gxh[ch] / m),
                );
            }
        }
        let dev = x.device();
        Ok((
            Tensor::from_vec(dx, x.dims().to_vec(), dev)?,
            Tensor::from_vec(sum_gxh.into_iter().map(T::from_f64).collect::<Vec<T>>(), c, dev)?,
            Tensor::from_vec(sum_g.into_iter().map(T::from_f64).collect::<Vec<T>>(), c, dev)?,
        ))
    }
}

impl CustomOp3 for FusedBatchNorm {
    fn name(&self) -> &'static str {
        "fused-batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => self.fwd::<f64>(s1, l1, s2, l2, s3, l3),
            _ => candle_core::bail!("batch-norm: unsupported dtype (want f32 or f64)"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        g: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dgamma, dbeta) = match x.dtype() {
            candle_core::DType::F32 => self.bwd_t::<f32>(x, g, grad)?,
            candle_core::DType::F64 => self.bwd_t::<f64>(x, g, grad)?,
            dt => candle_core::bail!("batch-norm: unsupported dtype {dt:?}"),
        };
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

/// Batch-norm forward with batch statistics (training mode), fused.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        FusedBatchNorm { eps },
    )?)
}

/// Per-channel mean and biased variance of `(B, C, H, W)` over (B, H, W).
pub fn batch_channel_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, c, h, w) = x.dims4()?;
    let xs = x.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
    Ok(channel_stats_slices(&xs, c, h * w))
}

/// Batch-norm with fixed statistics (eval or frozen mode); gradients still
/// flow to x, gamma and beta.
struct FixedStatNorm {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl FixedStatNorm {
    fn fwd<T: Scalar>(
        &self,
        sx: &CpuStorage,
        lx: &Layout,
        sg: &CpuStorage,
        lg: &Layout,
        sb: &CpuStorage,
        lb: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        let x = contiguous_slice::<T>(sx, lx)?;
        let g = contiguous_slice::<T>(sg, lg)?;
        let b = contiguous_slice::<T>(sb, lb)?;
        let (_, c, h, w) = lx.shape().dims4()?;
        let plane = h * w;
        let mut out = vec![T::from_f64(0.0); x.len()];
        for bc in 0..x.len() / plane {
            let ch = bc % c;
            let scale = g[ch].to_f64() * self.inv_std[ch];
            let shift = b[ch].to_f64() - self.mean[ch] * scale;
            let src = &x[bc * plane..(bc + 1) * plane];
            let dst = &mut out[bc * plane..(bc + 1) * plane];
            for (o, v) in dst.iter_mut().zip(src.iter()) {
                *o = T::from_f64(v.to_f64() * scale + shift);
            }
        }
        Ok((T::to_cpu_storage_owned(out), lx.shape().clone()))
    }
}

impl CustomOp3 for FixedStatNorm {
    fn name(&self) -> &'static str {
        "fixed-stat-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        match s1 {
            CpuStorage::F32(_) => self.fwd::<f32>(s1, l1, s2, l2, s3, l3),
            CpuStorage::F64(_) => self.fwd::<f64>(s1, l1, s2, l2, s3, l3),
            _ => candle_core::bail!("fixed-stat-norm: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        g: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (bsz, c, h, w) = x.dims4()?;
        let plane = h * w;
        let xs = x.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
        let gs = g.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
        let gr = grad.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
        let mut dx = vec![0f32; xs.len()];
        let mut dgamma = vec![0f32; c];
        let mut dbeta = vec![0f32; c];
        for bc in 0..bsz * c {
            let ch = bc % c;
            let scale = (gs[ch] as f64 * self.inv_std[ch]) as f32;
            for j in bc * plane..(bc + 1) * plane {
                let xh = ((xs[j] as f64 - self.mean[ch]) * self.inv_std[ch]) as f32;
                dx[j] = gr[j] * scale;
                dgamma[ch] += gr[j] * xh;
                dbeta[ch] += gr[j];
            }
        }
        let dev = x.device();
        Ok((
            Some(Tensor::from_vec(dx, x.dims().to_vec(), dev)?),
            Some(Tensor::from_vec(dgamma, c, dev)?),
            Some(Tensor::from_vec(dbeta, c, dev)?),
        ))
    }
}

/// Batch-norm forward with the given fixed statistics.
pub fn batch_norm_fixed(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: Vec<f64>,
    var: Vec<f64>,
    eps: f64,
) -> Result<Tensor> {
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    Ok(x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        FixedStatNorm { mean, inv_std },
    )?)
}

/// Softmax over the last dimension, fused forward and backward.
struct FusedSoftmax;

impl CustomOp1 for FusedSoftmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CandleResult<(CpuStorage, Shape)> {
        fn run<T: Scalar>(s: &CpuStorage, l: &Layout) -> CandleResult<(CpuStorage, Shape)> {
            let x = contiguous_slice::<T>(s, l)?;
            let n = *l.shape().dims().last().unwrap();
            let mut out = vec![T::ZERO; x.len()];
            for r in 0..x.len() / n {
                let xr = &x[r * n..(r + 1) * n];
                let dst = &mut out[r * n..(r + 1) * n];
                let mut mx = xr[0];
                for v in &xr[1..] {
                    if *v > mx {
                        mx = *v;
                    }
                }
                let mut sum = T::ZERO;
                for (o, v) in dst.iter_mut().zip(xr.iter()) {
                    let e = (*v - mx).exp_();
                    sum += e;
                    *o = e;
                }
                let inv = T::from_f64(1.0) / sum;
                for o in dst.iter_mut() {
                    *o *= inv;
                }
            }
            Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
        }
        match s {
            CpuStorage::F32(_) => run::<f32>(s, l),
            CpuStorage::F64(_) => run::<f64>(s, l),
            _ => candle_core::bail!("softmax: unsupported dtype"),
        }
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> CandleResult<Option<Tensor>> {
        fn run<T: Scalar>(res: &Tensor, grad: &Tensor) -> CandleResult<Tensor> {
            let y = res.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let g = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let n = *res.dims().last().unwrap();
            let mut dx = vec![T::from_f64(0.0); y.len()];
            for r in 0..y.len() / n {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let mut dot = T::ZERO;
                for (a, b) in yr.iter().zip(gr.iter()) {
                    dot += *a * *b;
                }
                for j in 0..n {
                    dx[r * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            Tensor::from_vec(dx, res.dims().to_vec(), res.device())
        }
        let dx = match res.dtype() {
            candle_core::DType::F32 => run::<f32>(res, grad)?,
            candle_core::DType::F64 => run::<f64>(res, grad)?,
            dt => candle_core::bail!("softmax: unsupported dtype {dt:?}"),
        };
        Ok(Some(dx))
    }
}

/// ReLU with a single-pass backward (`g * [y > 0]`).
struct FusedRelu;

impl CustomOp1 for FusedRelu {
    fn name(&self) -> &'static str {
        "fused-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CandleResult<(CpuStorage, Shape)> {
        fn run<T: Scalar>(s: &CpuStorage, l: &Layout) -> CandleResult<(CpuStorage, Shape)> {
            let x = contiguous_slice::<T>(s, l)?;
            let out: Vec<T> = x.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
            Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
        }
        match s {
            CpuStorage::F32(_) => run::<f32>(s, l),
            CpuStorage::F64(_) => run::<f64>(s, l),
            _ => candle_core::bail!("relu: unsupported dtype"),
        }
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> CandleResult<Option<Tensor>> {
        fn run<T: Scalar>(res: &Tensor, grad: &Tensor) -> CandleResult<Tensor> {
            let y = res.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let g = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let dx: Vec<T> = y
                .iter()
                .zip(g.iter())
                .map(|(&yv, &gv)| if yv > T::ZERO { gv } else { T::ZERO })
                .collect();
            Tensor::from_vec(dx, res.dims().to_vec(), res.device())
        }
        let dx = match res.dtype() {
            candle_core::DType::F32 => run::<f32>(res, grad)?,
            candle_core::DType::F64 => run::<f64>(res, grad)?,
            dt => candle_core::bail!("relu: unsupported dtype {dt:?}"),
        };
        Ok(Some(dx))
    }
}

/// Fused ReLU.
pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(FusedRelu)?)
}

/// Adds a bias vector along the last dimension (`x (..., N) + b (N)`).
struct AddRowBias;

impl CustomOp2 for AddRowBias {
    fn name(&self) -> &'static str {
        "add-row-bias"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        fn run<T: Scalar>(
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> CandleResult<(CpuStorage, Shape)> {
            let x = contiguous_slice::<T>(s1, l1)?;
            let b = contiguous_slice::<T>(s2, l2)?;
            let n = b.len();
            let mut out = x.to_vec();
            for row in out.chunks_exact_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.iter()) {
                    *o += *bv;
                }
            }
            Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
        }
        match s1 {
            CpuStorage::F32(_) => run::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => run::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("add-row-bias: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        _x: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: Scalar>(b: &Tensor, grad: &Tensor) -> CandleResult<Tensor> {
            let g = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let n = b.dims()[0];
            let mut db = vec![0f64; n];
            for row in g.chunks_exact(n) {
                for (acc, gv) in db.iter_mut().zip(row.iter()) {
                    *acc += gv.to_f64();
                }
            }
            Tensor::from_vec(db.into_iter().map(T::from_f64).collect::<Vec<T>>(), n, b.device())
        }
        let db = match b.dtype() {
            candle_core::DType::F32 => run::<f32>(b, grad)?,
            candle_core::DType::F64 => run::<f64>(b, grad)?,
            dt => candle_core::bail!("add-row-bias: unsupported dtype {dt:?}"),
        };
        Ok((Some(grad.clone()), Some(db)))
    }
}

/// `x (..., N) + bias (N)`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, AddRowBias)?)
}

/// Adds a per-channel bias to `(B, C, H, W)`.
struct AddChanBias;

impl CustomOp2 for AddChanBias {
    fn name(&self) -> &'static str {
        "add-chan-bias"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        fn run<T: Scalar>(
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> CandleResult<(CpuStorage, Shape)> {
            let x = contiguous_slice::<T>(s1, l1)?;
            let b = contiguous_slice::<T>(s2, l2)?;
            let (_, c, h, w) = l1.shape().dims4()?;
            let plane = h * w;
            let mut out = x.to_vec();
            for (bc, chunk) in out.chunks_exact_mut(plane).enumerate() {
                let bv = b[bc % c];
                for o in chunk.iter_mut() {
                    *o += bv;
                }
            }
            Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
        }
        match s1 {
            CpuStorage::F32(_) => run::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => run::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("add-chan-bias: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: Scalar>(x: &Tensor, b: &Tensor, grad: &Tensor) -> CandleResult<Tensor> {
            let g = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let (_, c, h, w) = x.dims4()?;
            let plane = h * w;
            let mut db = vec![0f64; c];
            for (bc, chunk) in g.chunks_exact(plane).enumerate() {
                let acc = &mut db[bc % c];
                for gv in chunk {
                    *acc += gv.to_f64();
                }
            }
            Tensor::from_vec(db.into_iter().map(T::from_f64).collect::<Vec<T>>(), c, b.device())
        }
        let db = match b.dtype() {
            candle_core::DType::F32 => run::<f32>(x, b, grad)?,
            candle_core::DType::F64 => run::<f64>(x, b, grad)?,
            dt => candle_core::bail!("add-chan-bias: unsupported dtype {dt:?}"),
        };
        Ok((Some(grad.clone()), Some(db)))
    }
}

/// `x (B,C,H,W) + bias (C)`.
pub fn add_chan_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, AddChanBias)?)
}

#[cfg(test)]
mod fused_tests {
    use super::*;
    use candle_core::{DType, Device, Tensor, Var};

    fn dev() -> Device {
        Device::Cpu
    }

    fn fd_check(
        f: &dyn Fn(&Tensor) -> Tensor,
        x0: &Tensor,
        analytic: &Tensor,
        eps: f64,
        tol: f64,
        stride: usize,
    ) {
        let flat = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let g = analytic.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in (0..flat.len()).step_by(stride) {
            let mut p = flat.clone();
            let mut m = flat.clone();
            p[i] += eps;
            m[i] -= eps;
            let tp = Tensor::from_vec(p, x0.dims().to_vec(), x0.device()).unwrap();
            let tm = Tensor::from_vec(m, x0.dims().to_vec(), x0.device()).unwrap();
            let fd = (f(&tp).to_scalar::<f64>().unwrap() - f(&tm).to_scalar::<f64>().unwrap())
                / (2.0 * eps);
            assert!(
                (fd - g[i]).abs() < tol * (1.0 + fd.abs()),
                "coord {i}: fd {fd} vs analytic {}",
                g[i]
            );
        }
    }

    #[test]
    fn fused_layer_norm_matches_composed_and_fd() {
        let dev = dev();
        let x = Tensor::randn(0f64, 2f64, (3, 4, 8), &dev).unwrap();
        let gamma = Tensor::randn(1f64, 0.2f64, (8,), &dev).unwrap();
        let beta = Tensor::randn(0f64, 0.2f64, (8,), &dev).unwrap();
        let got = layer_norm_fused(&x, &gamma, &beta, 1e-5).unwrap();
        let want = crate::nn::layers::layer_norm_composed(&x, &gamma, &beta, 1e-5).unwrap();
        let d = (&got - &want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-10, "{d}");

        let xv = Var::from_tensor(&x).unwrap();
        let gv = Var::from_tensor(&gamma).unwrap();
        let bv = Var::from_tensor(&beta).unwrap();
        let loss = layer_norm_fused(xv.as_tensor(), gv.as_tensor(), bv.as_tensor(), 1e-5)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let f_x = |t: &Tensor| {
            layer_norm_fused(t, &gamma, &beta, 1e-5).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        fd_check(&f_x, &x, grads.get(&xv).unwrap(), 1e-6, 1e-6, 5);
        let f_g = |t: &Tensor| {
            layer_norm_fused(&x, t, &beta, 1e-5).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        fd_check(&f_g, &gamma, grads.get(&gv).unwrap(), 1e-6, 1e-6, 1);
        let f_b = |t: &Tensor| {
            layer_norm_fused(&x, &gamma, t, 1e-5).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        fd_check(&f_b, &beta, grads.get(&bv).unwrap(), 1e-6, 1e-6, 1);
    }

    #[test]
    fn fused_batch_norm_matches_fd() {
        let dev = dev();
        let x = Tensor::randn(0f64, 1.5f64, (2, 3, 4, 4), &dev).unwrap();
        let gamma = Tensor::randn(1f64, 0.1f64, (3,), &dev).unwrap();
        let beta = Tensor::randn(0f64, 0.1f64, (3,), &dev).unwrap();
        let xv = Var::from_tensor(&x).unwrap();
        let gv = Var::from_tensor(&gamma).unwrap();
        let bv = Var::from_tensor(&beta).unwrap();
        let loss = batch_norm_train(xv.as_tensor(), gv.as_tensor(), bv.as_tensor(), 1e-5)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let f_x = |t: &Tensor| {
            batch_norm_train(t, &gamma, &beta, 1e-5).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        fd_check(&f_x, &x, grads.get(&xv).unwrap(), 1e-6, 1e-5, 7);
        let f_g = |t: &Tensor| {
            batch_norm_train(&x, t, &beta, 1e-5).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        fd_check(&f_g, &gamma, grads.get(&gv).unwrap(), 1e-6, 1e-5, 1);
    }

    #[test]
    fn fixed_stat_norm_matches_manual() {
        let dev = dev();
        let x = Tensor::randn(0f32, 1f32, (2, 2, 3, 3), &dev).unwrap();
        let gamma = Tensor::from_vec(vec![2f32, 0.5], (2,), &dev).unwrap();
        let beta = Tensor::from_vec(vec![0.1f32, -0.2], (2,), &dev).unwrap();
        let mean = vec![0.3f64, -0.1];
        let var = vec![1.5f64, 0.7];
        let got = batch_norm_fixed(&x, &gamma, &beta, mean.clone(), var.clone(), 1e-5).unwrap();
        let xs = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let got_v = got.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let gv = [2f32, 0.5];
        let bv = [0.1f32, -0.2];
        for (i, (xv, yv)) in xs.iter().zip(got_v.iter()).enumerate() {
            let ch = (i / 9) % 2;
            let want =
                (*xv as f64 - mean[ch]) / (var[ch] + 1e-5).sqrt() * gv[ch] as f64 + bv[ch] as f64;
            assert!((want - *yv as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn fused_softmax_matches_composed_with_gradient() {
        let dev = dev();
        let x = Tensor::randn(0f64, 3f64, (4, 7), &dev).unwrap();
        let got = softmax_last(&x).unwrap();
        let m = x.max_keepdim(1).unwrap();
        let e = x.broadcast_sub(&m).unwrap().exp().unwrap();
        let want = e.broadcast_div(&e.sum_keepdim(1).unwrap()).unwrap();
        let d = (&got - &want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);

        let xv = Var::from_tensor(&x).unwrap();
        let w = Tensor::randn(0f64, 1f64, (4, 7), &dev).unwrap();
        let loss = softmax_last(xv.as_tensor()).unwrap().mul(&w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let f = |t: &Tensor| softmax_last(t).unwrap().mul(&w).unwrap().sum_all().unwrap();
        fd_check(&f, &x, grads.get(&xv).unwrap(), 1e-6, 1e-6, 1);
    }

    #[test]
    fn fused_relu_and_bias_ops() {
        let dev = dev();
        let x = Tensor::randn(0f64, 1f64, (3, 5), &dev).unwrap();
        let xv = Var::from_tensor(&x).unwrap();
        let y = relu(xv.as_tensor()).unwrap();
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let f = |t: &Tensor| relu(t).unwrap().sqr().unwrap().sum_all().unwrap();
        fd_check(&f, &x, grads.get(&xv).unwrap(), 1e-7, 1e-6, 1);

        let b = Tensor::randn(0f64, 1f64, (5,), &dev).unwrap();
        let bv = Var::from_tensor(&b).unwrap();
        let xv2 = Var::from_tensor(&x).unwrap();
        let y = add_row_bias(xv2.as_tensor(), bv.as_tensor()).unwrap();
        let want = x.broadcast_add(&b).unwrap();
        let d = (&y - &want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let f_b = |t: &Tensor| add_row_bias(&x, t).unwrap().sqr().unwrap().sum_all().unwrap();
        fd_check(&f_b, &b, grads.get(&bv).unwrap(), 1e-6, 1e-6, 1);

        let xc = Tensor::randn(0f64, 1f64, (2, 3, 2, 2), &dev).unwrap();
        let bc = Tensor::randn(0f64, 1f64, (3,), &dev).unwrap();
        let bcv = Var::from_tensor(&bc).unwrap();
        let y = add_chan_bias(&xc, bcv.as_tensor()).unwrap();
        let want = xc.broadcast_add(&bc.reshape((1, 3, 1, 1)).unwrap()).unwrap();
        let d = (&y - &want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let f_bc = |t: &Tensor| add_chan_bias(&xc, t).unwrap().sqr().unwrap().sum_all().unwrap();
        fd_check(&f_bc, &bc, grads.get(&bcv).unwrap(), 1e-6, 1e-6, 1);
    }
}

// ---------------------------------------------------------------------------
// Fused multi-head attention
// ---------------------------------------------------------------------------

/// Scaled dot-product attention over `heads` submatrices of the feature
/// dimension, fused into one op.
///
/// Inputs are `(B, Nq, D)` / `(B, Nk, D)` / `(B, Nk, D)` with `D = heads *
/// dh`; every per-head matrix product runs directly on the strided submatrix
/// (BLAS leading dimension = D), so no head split/merge copies exist at all.
/// The backward recomputes the attention weights.
struct FusedMha {
    heads: usize,
    scale: f64,
}

impl FusedMha {
    #[allow(clippy::too_many_arguments)]
    fn attn_rows<T: Scalar>(
        &self,
        q: &[T],
        k: &[T],
        s_buf: &mut [T],
        nq: usize,
        nk: usize,
        dh: usize,
        d: usize,
    ) {
        // s = softmax(scale * q k^T) computed row-block for one head
        T::gemm(
            false,
            true,
            nq,
            nk,
            dh,
            T::from_f64(self.scale),
            q,
            d,
            k,
            d,
            T::ZERO,
            s_buf,
            nk,
        );
        for row in s_buf.chunks_exact_mut(nk) {
            let mut mx = row[0];
            for v in &row[1..] {
                if *v > mx {
                    mx = *v;
                }
            }
            let mut sum = T::ZERO;
            for v in row.iter_mut() {
                let e = (*v - mx).exp_();
                sum += e;
                *v = e;
            }
            let inv = T::from_f64(1.0) / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }

    fn fwd_t<T: Scalar>(
        &self,
        q: &[T],
        k: &[T],
        v: &[T],
        (b, nq, nk, d): (usize, usize, usize, usize),
    ) -> Vec<T> {
        let dh = d / self.heads;
        let mut out = vec![T::ZERO; b * nq * d];
        let mut s_buf = vec![T::ZERO; nq * nk];
        for bi in 0..b {
            for h in 0..self.heads {
                let qo = bi * nq * d + h * dh;
                let ko = bi * nk * d + h * dh;
                self.attn_rows(&q[qo..], &k[ko..], &mut s_buf, nq, nk, dh, d);
                T::gemm(
                    false,
                    false,
                    nq,
                    dh,
                    nk,
                    T::from_f64(1.0),
                    &s_buf,
                    nk,
                    &v[ko..],
                    d,
                    T::ZERO,
                    &mut out[qo..],
                    d,
                );
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn bwd_t<T: Scalar>(
        &self,
        q: &[T],
        k: &[T],
        v: &[T],
        g: &[T],
        (b, nq, nk, d): (usize, usize, usize, usize),
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let dh = d / self.heads;
        let mut dq = vec![T::ZERO; q.len()];
        let mut dk = vec![T::ZERO; k.len()];
        let mut dv = vec![T::ZERO; v.len()];
        let mut a_buf = vec![T::ZERO; nq * nk];
        let mut da_buf = vec![T::ZERO; nq * nk];
        for bi in 0..b {
            for h in 0..self.heads {
                let qo = bi * nq * d + h * dh;
                let ko = bi * nk * d + h * dh;
                self.attn_rows(&q[qo..], &k[ko..], &mut a_buf, nq, nk, dh, d);
                // dV = A^T G
                T::gemm(
                    true,
                    false,
                    nk,
                    dh,
                    nq,
                    T::from_f64(1.0),
                    &a_buf,
                    nk,
                    &g[qo..],
                    d,
                    T::from_f64(1.0),
                    &mut dv[ko..],
                    d,
                );
                // dA = G V^T
                T::gemm(
                    false,
                    true,
                    nq,
                    nk,
                    dh,
                    T::from_f64(1.0),
                    &g[qo..],
                    d,
                    &v[ko..],
                    d,
                    T::ZERO,
                    &mut da_buf,
                    nk,
                );
                // dS = A .* (dA - rowsum(dA .* A)), scaled
                for (arow, darow) in a_buf.chunks_exact(nk).zip(da_buf.chunks_exact_mut(nk)) {
                    let mut dot = T::ZERO;
                    for (a, da) in arow.iter().zip(darow.iter()) {
                        dot += *a * *da;
                    }
                    for (a, da) in arow.iter().zip(darow.iter_mut()) {
                        *da = *a * (*da - dot) * T::from_f64(self.scale);
                    }
                }
                // dQ = dS K ; dK = dS^T Q
                T::gemm(
                    false,
                    false,
                    nq,
                    dh,
                    nk,
                    T::from_f64(1.0),
                    &da_buf,
                    nk,
                    &k[ko..],
                    d,
                    T::from_f64(1.0),
                    &mut dq[qo..],
                    d,
                );
                T::gemm(
                    true,
                    false,
                    nk,
                    dh,
                    nq,
                    T::from_f64(1.0),
                    &da_buf,
                    nk,
                    &q[qo..],
                    d,
                    T::from_f64(1.0),
                    &mut dk[ko..],
                    d,
                );
            }
        }
        (dq, dk, dv)
    }

    fn dims(&self, lq: &Layout, lk: &Layout, lv: &Layout) -> CandleResult<(usize, usize, usize, usize)> {
        let (b, nq, d) = lq.shape().dims3()?;
        let (bk, nk, dk) = lk.shape().dims3()?;
        let (bv, nv, dvv) = lv.shape().dims3()?;
        if b != bk || b != bv || nk != nv || d != dk || d != dvv {
            candle_core::bail!(
                "attention shape mismatch: q {:?} k {:?} v {:?}",
                lq.shape(),
                lk.shape(),
                lv.shape()
            );
        }
        if d % self.heads != 0 {
            candle_core::bail!("attention dim {d} not divisible by {} heads", self.heads);
        }
        Ok((b, nq, nk, d))
    }
}

impl CustomOp3 for FusedMha {
    fn name(&self) -> &'static str {
        "fused-mha"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        let dims = self.dims(l1, l2, l3)?;
        match s1 {
            CpuStorage::F32(_) => {
                let q = contiguous_slice::<f32>(s1, l1)?;
                let k = contiguous_slice::<f32>(s2, l2)?;
                let v = contiguous_slice::<f32>(s3, l3)?;
                Ok((
                    f32::to_cpu_storage_owned(self.fwd_t(q, k, v, dims)),
                    l1.shape().clone(),
                ))
            }
            CpuStorage::F64(_) => {
                let q = contiguous_slice::<f64>(s1, l1)?;
                let k = contiguous_slice::<f64>(s2, l2)?;
                let v = contiguous_slice::<f64>(s3, l3)?;
                Ok((
                    f64::to_cpu_storage_owned(self.fwd_t(q, k, v, dims)),
                    l1.shape().clone(),
                ))
            }
            _ => candle_core::bail!("attention: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = self.dims(q.layout(), k.layout(), v.layout())?;
        fn run<T: Scalar>(
            op: &FusedMha,
            q: &Tensor,
            k: &Tensor,
            v: &Tensor,
            grad: &Tensor,
            dims: (usize, usize, usize, usize),
        ) -> CandleResult<(Tensor, Tensor, Tensor)> {
            let qs = q.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let ks = k.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let vs = v.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let gs = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let (dq, dk, dv) = op.bwd_t(&qs, &ks, &vs, &gs, dims);
            Ok((
                Tensor::from_vec(dq, q.dims().to_vec(), q.device())?,
                Tensor::from_vec(dk, k.dims().to_vec(), k.device())?,
                Tensor::from_vec(dv, v.dims().to_vec(), v.device())?,
            ))
        }
        let (dq, dk, dv) = match q.dtype() {
            candle_core::DType::F32 => run::<f32>(self, q, k, v, grad, dims)?,
            candle_core::DType::F64 => run::<f64>(self, q, k, v, grad, dims)?,
            dt => candle_core::bail!("attention: unsupported dtype {dt:?}"),
        };
        Ok((Some(dq), Some(dk), Some(dv)))
    }
}

/// Multi-head scaled dot-product attention on projected inputs; see
/// [`FusedMha`].
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f64,
) -> Result<Tensor> {
    Ok(q.contiguous()?.apply_op3(
        &k.contiguous()?,
        &v.contiguous()?,
        FusedMha { heads, scale },
    )?)
}

#[cfg(test)]
mod mha_tests {
    use super::*;
    use candle_core::{Device, Tensor, Var};

    /// reference attention from composed ops
    fn reference_mha(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scale: f64) -> Tensor {
        let (b, nq, d) = q.dims3().unwrap();
        let (_, nk, _) = k.dims3().unwrap();
        let dh = d / heads;
        let split = |x: &Tensor, n: usize| {
            x.reshape((b, n, heads, dh))
                .unwrap()
                .transpose(1, 2)
                .unwrap()
                .contiguous()
                .unwrap()
                .reshape((b * heads, n, dh))
                .unwrap()
        };
        let qs = split(q, nq);
        let ks = split(k, nk);
        let vs = split(v, nk);
        let scores = qs
            .matmul(&ks.transpose(1, 2).unwrap().contiguous().unwrap())
            .unwrap()
            .affine(scale, 0.0)
            .unwrap();
        let m = scores.max_keepdim(2).unwrap();
        let e = scores.broadcast_sub(&m).unwrap().exp().unwrap();
        let attn = e.broadcast_div(&e.sum_keepdim(2).unwrap()).unwrap();
        attn.matmul(&vs)
            .unwrap()
            .reshape((b, heads, nq, dh))
            .unwrap()
            .transpose(1, 2)
            .unwrap()
            .contiguous()
            .unwrap()
            .reshape((b, nq, d))
            .unwrap()
    }

    #[test]
    fn fused_mha_matches_reference() {
        let dev = Device::Cpu;
        let (b, nq, nk, d, h) = (3, 5, 7, 16, 4);
        let q = Tensor::randn(0f32, 1f32, (b, nq, d), &dev).unwrap();
        let k = Tensor::randn(0f32, 1f32, (b, nk, d), &dev).unwrap();
        let v = Tensor::randn(0f32, 1f32, (b, nk, d), &dev).unwrap();
        let scale = 0.5;
        let got = multi_head_attention(&q, &k, &v, h, scale).unwrap();
        let want = reference_mha(&q, &k, &v, h, scale);
        let diff = (&got - &want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn fused_mha_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let (b, nq, nk, d, h) = (2, 3, 4, 8, 2);
        let scale = 1.0 / ((d / h) as f64).sqrt();
        let q0 = Tensor::randn(0f64, 1f64, (b, nq, d), &dev).unwrap();
        let k0 = Tensor::randn(0f64, 1f64, (b, nk, d), &dev).unwrap();
        let v0 = Tensor::randn(0f64, 1f64, (b, nk, d), &dev).unwrap();
        let w = Tensor::randn(0f64, 1f64, (b, nq, d), &dev).unwrap();
        let (qv, kv, vv) = (
            Var::from_tensor(&q0).unwrap(),
            Var::from_tensor(&k0).unwrap(),
            Var::from_tensor(&v0).unwrap(),
        );
        let loss = multi_head_attention(qv.as_tensor(), kv.as_tensor(), vv.as_tensor(), h, scale)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let f = |q: &Tensor, k: &Tensor, v: &Tensor| -> f64 {
            multi_head_attention(q, k, v, h, scale)
                .unwrap()
                .mul(&w)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let eps = 1e-6;
        for (which, var, base) in [(0, &qv, &q0), (1, &kv, &k0), (2, &vv, &v0)] {
            let g = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let flat = base.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in (0..flat.len()).step_by(5) {
                let mut p = flat.clone();
                let mut m = flat.clone();
                p[i] += eps;
                m[i] -= eps;
                let tp = Tensor::from_vec(p, base.dims().to_vec(), &dev).unwrap();
                let tm = Tensor::from_vec(m, base.dims().to_vec(), &dev).unwrap();
                let (fp, fm) = match which {
                    0 => (f(&tp, &k0, &v0), f(&tm, &k0, &v0)),
                    1 => (f(&q0, &tp, &v0), f(&q0, &tm, &v0)),
                    _ => (f(&q0, &k0, &tp), f(&q0, &k0, &tm)),
                };
                let fd = (fp - fm) / (2.0 * eps);
                assert!(
                    (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "input {which} coord {i}: fd {fd} vs {}",
                    g[i]
                );
            }
        }
    }
}

/// Bias add along the last dimension fused with ReLU (FFN hot path: one
/// graph node instead of two on the widest activation).
struct AddRowBiasRelu;

impl CustomOp2 for AddRowBiasRelu {
    fn name(&self) -> &'static str {
        "add-row-bias-relu"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        fn run<T: Scalar>(
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> CandleResult<(CpuStorage, Shape)> {
            let x = contiguous_slice::<T>(s1, l1)?;
            let b = contiguous_slice::<T>(s2, l2)?;
            let n = b.len();
            let mut out = x.to_vec();
            for row in out.chunks_exact_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.iter()) {
                    let v = *o + *bv;
                    *o = if v > T::ZERO { v } else { T::ZERO };
                }
            }
            Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
        }
        match s1 {
            CpuStorage::F32(_) => run::<f32>(s1, l1, s2, l2),
            CpuStorage::F64(_) => run::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("add-row-bias-relu: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        _x: &Tensor,
        b: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: Scalar>(b: &Tensor, res: &Tensor, grad: &Tensor) -> CandleResult<(Tensor, Tensor)> {
            let y = res.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let g = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let n = b.dims()[0];
            let mut db = vec![0f64; n];
            let mut dx = vec![T::ZERO; y.len()];
            for r in 0..y.len() / n {
                for j in 0..n {
                    let idx = r * n + j;
                    if y[idx] > T::ZERO {
                        dx[idx] = g[idx];
                        db[j] += g[idx].to_f64();
                    }
                }
            }
            Ok((
                Tensor::from_vec(dx, res.dims().to_vec(), res.device())?,
                Tensor::from_vec(db.into_iter().map(T::from_f64).collect::<Vec<T>>(), n, b.device())?,
            ))
        }
        let (dx, db) = match b.dtype() {
            candle_core::DType::F32 => run::<f32>(b, res, grad)?,
            candle_core::DType::F64 => run::<f64>(b, res, grad)?,
            dt => candle_core::bail!("add-row-bias-relu: unsupported dtype {dt:?}"),
        };
        Ok((Some(dx), Some(db)))
    }
}

/// `relu(x + bias)` over the last dimension.
pub fn add_row_bias_relu(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, AddRowBiasRelu)?)
}

/// Self-attention over a packed `(B, N, 3D)` QKV tensor: Q occupies columns
/// `0..D`, K `D..2D`, V `2D..3D`. The per-head products run on strided
/// submatrices of the packed buffer, so the op adds zero copies.
struct FusedMhaSelfPacked {
    heads: usize,
    scale: f64,
}

impl FusedMhaSelfPacked {
    fn dims(&self, l: &Layout) -> CandleResult<(usize, usize, usize)> {
        let (b, n, d3) = l.shape().dims3()?;
        if d3 % 3 != 0 || (d3 / 3) % self.heads != 0 {
            candle_core::bail!("packed qkv width {d3} incompatible with {} heads", self.heads);
        }
        Ok((b, n, d3 / 3))
    }
}

impl CustomOp1 for FusedMhaSelfPacked {
    fn name(&self) -> &'static str {
        "fused-mha-self-packed"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CandleResult<(CpuStorage, Shape)> {
        fn run<T: Scalar>(
            op: &FusedMhaSelfPacked,
            s: &CpuStorage,
            l: &Layout,
        ) -> CandleResult<(CpuStorage, Shape)> {
            let (b, n, d) = op.dims(l)?;
            let ld = 3 * d;
            let dh = d / op.heads;
            let qkv = contiguous_slice::<T>(s, l)?;
            let mut out: Vec<T> = Vec::with_capacity(b * n * d);
            #[allow(clippy::uninit_vec)]
            unsafe {
                out.set_len(b * n * d)
            };
            let mut s_buf = vec![T::ZERO; n * n];
            for bi in 0..b {
                let base = bi * n * ld;
                for h in 0..op.heads {
                    let q = &qkv[base + h * dh..];
                    let k = &qkv[base + d + h * dh..];
                    let v = &qkv[base + 2 * d + h * dh..];
                    attn_softmax_rows(q, k, &mut s_buf, n, n, dh, ld, op.scale);
                    T::gemm(
                        false,
                        false,
                        n,
                        dh,
                        n,
                        T::from_f64(1.0),
                        &s_buf,
                        n,
                        v,
                        ld,
                        T::ZERO,
                        &mut out[bi * n * d + h * dh..],
                        d,
                    );
                }
            }
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, n, d))))
        }
        match s {
            CpuStorage::F32(_) => run::<f32>(self, s, l),
            CpuStorage::F64(_) => run::<f64>(self, s, l),
            _ => candle_core::bail!("fused-mha-self: unsupported dtype"),
        }
    }

    fn bwd(&self, qkv: &Tensor, _res: &Tensor, grad: &Tensor) -> CandleResult<Option<Tensor>> {
        fn run<T: Scalar>(
            op: &FusedMhaSelfPacked,
            qkv: &Tensor,
            grad: &Tensor,
        ) -> CandleResult<Tensor> {
            let (b, n, d) = op.dims(qkv.layout())?;
            let ld = 3 * d;
            let dh = d / op.heads;
            let x = qkv.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let g = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let mut dx = vec![T::ZERO; x.len()];
            let mut a_buf = vec![T::ZERO; n * n];
            let mut da_buf = vec![T::ZERO; n * n];
            for bi in 0..b {
                let base = bi * n * ld;
                for h in 0..op.heads {
                    let q = &x[base + h * dh..];
                    let k = &x[base + d + h * dh..];
                    let v = &x[base + 2 * d + h * dh..];
                    let go = &g[bi * n * d + h * dh..];
                    attn_softmax_rows(q, k, &mut a_buf, n, n, dh, ld, op.scale);
                    let strides = AttnStrides { g: d, q_in: ld, kv_in: ld, dq: ld, dkv: ld };
                    let total = dx.len();
                    let ptr = dx.as_mut_ptr();
                    unsafe {
                        attn_backward_core::<T>(
                            q, k, v, go, &mut a_buf, &mut da_buf, n, n, dh, strides, op.scale,
                            (ptr.add(base + h * dh), total - base - h * dh),
                            (ptr.add(base + d + h * dh), total - base - d - h * dh),
                            (ptr.add(base + 2 * d + h * dh), total - base - 2 * d - h * dh),
                        );
                    }
                }
            }
            Tensor::from_vec(dx, qkv.dims().to_vec(), qkv.device())
        }
        let dx = match qkv.dtype() {
            candle_core::DType::F32 => run::<f32>(self, qkv, grad)?,
            candle_core::DType::F64 => run::<f64>(self, qkv, grad)?,
            dt => candle_core::bail!("fused-mha-self: unsupported dtype {dt:?}"),
        };
        Ok(Some(dx))
    }
}

/// Cross-attention over separate queries `(B, Nq, D)` and packed key/value
/// `(B, Nk, 2D)` (K in columns `0..D`, V in `D..2D`).
struct FusedMhaCrossPacked {
    heads: usize,
    scale: f64,
}

impl CustomOp2 for FusedMhaCrossPacked {
    fn name(&self) -> &'static str {
        "fused-mha-cross-packed"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CandleResult<(CpuStorage, Shape)> {
        fn run<T: Scalar>(
            op: &FusedMhaCrossPacked,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
        ) -> CandleResult<(CpuStorage, Shape)> {
            let (b, nq, d) = l1.shape().dims3()?;
            let (bk, nk, d2) = l2.shape().dims3()?;
            if bk != b || d2 != 2 * d || d % op.heads != 0 {
                candle_core::bail!("cross-attention shape mismatch");
            }
            let dh = d / op.heads;
            let q = contiguous_slice::<T>(s1, l1)?;
            let kv = contiguous_slice::<T>(s2, l2)?;
            let mut out: Vec<T> = Vec::with_capacity(b * nq * d);
            #[allow(clippy::uninit_vec)]
            unsafe {
                out.set_len(b * nq * d)
            };
            let mut s_buf = vec![T::ZERO; nq * nk];
            for bi in 0..b {
                for h in 0..op.heads {
                    let qs = &q[bi * nq * d + h * dh..];
                    let ks = &kv[bi * nk * 2 * d + h * dh..];
                    let vs = &kv[bi * nk * 2 * d + d + h * dh..];
                    attn_softmax_rows_ld(qs, ks, &mut s_buf, nq, nk, dh, d, 2 * d, op.scale);
                    T::gemm(
                        false,
                        false,
                        nq,
                        dh,
                        nk,
                        T::from_f64(1.0),
                        &s_buf,
                        nk,
                        vs,
                        2 * d,
                        T::ZERO,
                        &mut out[bi * nq * d + h * dh..],
                        d,
                    );
                }
            }
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, nq, d))))
        }
        match s1 {
            CpuStorage::F32(_) => run::<f32>(self, s1, l1, s2, l2),
            CpuStorage::F64(_) => run::<f64>(self, s1, l1, s2, l2),
            _ => candle_core::bail!("fused-mha-cross: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        q: &Tensor,
        kv: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CandleResult<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: Scalar>(
            op: &FusedMhaCrossPacked,
            q: &Tensor,
            kv: &Tensor,
            grad: &Tensor,
        ) -> CandleResult<(Tensor, Tensor)> {
            let (b, nq, d) = q.dims3()?;
            let (_, nk, _) = kv.dims3()?;
            let dh = d / op.heads;
            let qs = q.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let kvs = kv.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let gs = grad.contiguous()?.flatten_all()?.to_vec1::<T>()?;
            let mut dq = vec![T::ZERO; qs.len()];
            let mut dkv = vec![T::ZERO; kvs.len()];
            let mut a_buf = vec![T::ZERO; nq * nk];
            let mut da_buf = vec![T::ZERO; nq * nk];
            for bi in 0..b {
                for h in 0..op.heads {
                    let qb = &qs[bi * nq * d + h * dh..];
                    let kb = &kvs[bi * nk * 2 * d + h * dh..];
                    let vb = &kvs[bi * nk * 2 * d + d + h * dh..];
                    let gb = &gs[bi * nq * d + h * dh..];
                    attn_softmax_rows_ld(qb, kb, &mut a_buf, nq, nk, dh, d, 2 * d, op.scale);
                    let strides = AttnStrides { g: d, q_in: d, kv_in: 2 * d, dq: d, dkv: 2 * d };
                    let (dq_len, dkv_len) = (dq.len(), dkv.len());
                    let (dq_ptr, dkv_ptr) = (dq.as_mut_ptr(), dkv.as_mut_ptr());
                    unsafe {
                        attn_backward_core::<T>(
                            qb, kb, vb, gb, &mut a_buf, &mut da_buf, nq, nk, dh, strides, op.scale,
                            (dq_ptr.add(bi * nq * d + h * dh), dq_len - bi * nq * d - h * dh),
                            (dkv_ptr.add(bi * nk * 2 * d + h * dh), dkv_len - bi * nk * 2 * d - h * dh),
                            (dkv_ptr.add(bi * nk * 2 * d + d + h * dh), dkv_len - bi * nk * 2 * d - d - h * dh),
                        );
                    }
                }
            }
            Ok((
                Tensor::from_vec(dq, q.dims().to_vec(), q.device())?,
                Tensor::from_vec(dkv, kv.dims().to_vec(), kv.device())?,
            ))
        }
        let (dq, dkv) = match q.dtype() {
            candle_core::DType::F32 => run::<f32>(self, q, kv, grad)?,
            candle_core::DType::F64 => run::<f64>(self, q, kv, grad)?,
            dt => candle_core::bail!("fused-mha-cross: unsupported dtype {dt:?}"),
        };
        Ok((Some(dq), Some(dkv)))
    }
}

/// Shared attention row-softmax: `s = softmax(scale * q @ k^T)` with
/// arbitrary leading strides for q and k.
#[allow(clippy::too_many_arguments)]
fn attn_softmax_rows<T: Scalar>(
    q: &[T],
    k: &[T],
    s_buf: &mut [T],
    nq: usize,
    nk: usize,
    dh: usize,
    ld: usize,
    scale: f64,
) {
    attn_softmax_rows_ld(q, k, s_buf, nq, nk, dh, ld, ld, scale)
}

#[allow(clippy::too_many_arguments)]
fn attn_softmax_rows_ld<T: Scalar>(
    q: &[T],
    k: &[T],
    s_buf: &mut [T],
    nq: usize,
    nk: usize,
    dh: usize,
    ld_q: usize,
    ld_k: usize,
    scale: f64,
) {
    T::gemm(
        false,
        true,
        nq,
        nk,
        dh,
        T::from_f64(scale),
        q,
        ld_q,
        k,
        ld_k,
        T::ZERO,
        s_buf,
        nk,
    );
    for row in s_buf.chunks_exact_mut(nk) {
        let mut mx = row[0];
        for v in &row[1..] {
            if *v > mx {
                mx = *v;
            }
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            let e = (*v - mx).exp_();
            sum += e;
            *v = e;
        }
        let inv = T::from_f64(1.0) / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Shared attention backward: consumes the recomputed weights in `a_buf` and
/// writes dQ/dK/dV through raw pointers into (possibly shared) gradient
/// buffers. The three destinations cover disjoint strided column ranges; the
/// mutable views are created one gemm at a time.
///
/// Safety: `dq/dk/dv` must stay valid for `len` elements counted from each
/// pointer, and the strided destinations must not overlap.
#[allow(clippy::too_many_arguments)]
unsafe fn attn_backward_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    a_buf: &mut [T],
    da_buf: &mut [T],
    nq: usize,
    nk: usize,
    dh: usize,
    strides: AttnStrides,
    scale: f64,
    dq: (*mut T, usize),
    dk: (*mut T, usize),
    dv: (*mut T, usize),
) {
    // dV = A^T G
    {
        let dv_s = std::slice::from_raw_parts_mut(dv.0, dv.1);
        T::gemm(
            true, false, nk, dh, nq,
            T::from_f64(1.0), a_buf, nk, g, strides.g,
            T::ZERO, dv_s, strides.dkv,
        );
    }
    // dA = G V^T
    T::gemm(
        false, true, nq, nk, dh,
        T::from_f64(1.0), g, strides.g, v, strides.kv_in,
        T::ZERO, da_buf, nk,
    );
    // dS = scale * A .* (dA - rowsum(dA .* A))
    for (arow, darow) in a_buf.chunks_exact(nk).zip(da_buf.chunks_exact_mut(nk)) {
        let mut dot = T::ZERO;
        for (a, da) in arow.iter().zip(darow.iter()) {
            dot += *a * *da;
        }
        let sc = T::from_f64(scale);
        for (a, da) in arow.iter().zip(darow.iter_mut()) {
            *da = *a * (*da - dot) * sc;
        }
    }
    // dQ = dS K ; dK = dS^T Q
    {
        let dq_s = std::slice::from_raw_parts_mut(dq.0, dq.1);
        T::gemm(
            false, false, nq, dh, nk,
            T::from_f64(1.0), da_buf, nk, k, strides.kv_in,
            T::ZERO, dq_s, strides.dq,
        );
    }
    {
        let dk_s = std::slice::from_raw_parts_mut(dk.0, dk.1);
        T::gemm(
            true, false, nk, dh, nq,
            T::from_f64(1.0), da_buf, nk, q, strides.q_in,
            T::ZERO, dk_s, strides.dkv,
        );
    }
}

/// Row strides (leading dimensions) for the attention backward operands.
#[derive(Clone, Copy)]
struct AttnStrides {
    /// output gradient rows
    g: usize,
    /// q input rows
    q_in: usize,
    /// k/v input rows
    kv_in: usize,
    /// dq output rows
    dq: usize,
    /// dk/dv output rows
    dkv: usize,
}

/// Self-attention on packed QKV.
pub fn self_attention_packed(qkv: &Tensor, heads: usize, scale: f64) -> Result<Tensor> {
    Ok(qkv.contiguous()?.apply_op1(FusedMhaSelfPacked { heads, scale })?)
}

/// Cross-attention with packed KV.
pub fn cross_attention_packed(q: &Tensor, kv: &Tensor, heads: usize, scale: f64) -> Result<Tensor> {
    Ok(q.contiguous()?
        .apply_op2(&kv.contiguous()?, FusedMhaCrossPacked { heads, scale })?)
}

#[cfg(test)]
mod packed_mha_tests {
    use super::*;
    use candle_core::{Device, Tensor, Var};

    #[test]
    fn packed_self_matches_unpacked() {
        let dev = Device::Cpu;
        let (b, n, d, h) = (2, 6, 12, 3);
        let scale = 0.7;
        let qkv = Tensor::randn(0f32, 1f32, (b, n, 3 * d), &dev).unwrap();
        let got = self_attention_packed(&qkv, h, scale).unwrap();
        let q = qkv.narrow(2, 0, d).unwrap().contiguous().unwrap();
        let k = qkv.narrow(2, d, d).unwrap().contiguous().unwrap();
        let v = qkv.narrow(2, 2 * d, d).unwrap().contiguous().unwrap();
        let want = multi_head_attention(&q, &k, &v, h, scale).unwrap();
        let diff = (&got - &want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn packed_cross_matches_unpacked() {
        let dev = Device::Cpu;
        let (b, nq, nk, d, h) = (2, 5, 7, 8, 2);
        let scale = 0.35;
        let q = Tensor::randn(0f32, 1f32, (b, nq, d), &dev).unwrap();
        let kv = Tensor::randn(0f32, 1f32, (b, nk, 2 * d), &dev).unwrap();
        let got = cross_attention_packed(&q, &kv, h, scale).unwrap();
        let k = kv.narrow(2, 0, d).unwrap().contiguous().unwrap();
        let v = kv.narrow(2, d, d).unwrap().contiguous().unwrap();
        let want = multi_head_attention(&q, &k, &v, h, scale).unwrap();
        let diff = (&got - &want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn packed_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let (b, n, d, h) = (1, 3, 8, 2);
        let scale = 1.0 / ((d / h) as f64).sqrt();
        let x0 = Tensor::randn(0f64, 1f64, (b, n, 3 * d), &dev).unwrap();
        let w = Tensor::randn(0f64, 1f64, (b, n, d), &dev).unwrap();
        let xv = Var::from_tensor(&x0).unwrap();
        let loss = self_attention_packed(xv.as_tensor(), h, scale)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&xv).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let flat = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let f = |t: &Tensor| -> f64 {
            self_attention_packed(t, h, scale)
                .unwrap()
                .mul(&w)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let eps = 1e-6;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            let mut m = flat.clone();
            p[i] += eps;
            m[i] -= eps;
            let fd = (f(&Tensor::from_vec(p, (b, n, 3 * d), &dev).unwrap())
                - f(&Tensor::from_vec(m, (b, n, 3 * d), &dev).unwrap()))
                / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", g[i]);
        }

        // cross variant
        let q0 = Tensor::randn(0f64, 1f64, (1, 3, 8), &dev).unwrap();
        let kv0 = Tensor::randn(0f64, 1f64, (1, 4, 16), &dev).unwrap();
        let wq = Tensor::randn(0f64, 1f64, (1, 3, 8), &dev).unwrap();
        let qv = Var::from_tensor(&q0).unwrap();
        let kvv = Var::from_tensor(&kv0).unwrap();
        let loss = cross_attention_packed(qv.as_tensor(), kvv.as_tensor(), 2, scale)
            .unwrap()
            .mul(&wq)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        for (var, base, is_q) in [(&qv, &q0, true), (&kvv, &kv0, false)] {
            let g = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let flat = base.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let f = |t: &Tensor| -> f64 {
                let (qq, kk) = if is_q { (t, &kv0) } else { (&q0, t) };
                cross_attention_packed(qq, kk, 2, scale)
                    .unwrap()
                    .mul(&wq)
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap()
            };
            for i in 0..flat.len() {
                let mut p = flat.clone();
                let mut m = flat.clone();
                p[i] += eps;
                m[i] -= eps;
                let fd = (f(&Tensor::from_vec(p, base.dims().to_vec(), &dev).unwrap())
                    - f(&Tensor::from_vec(m, base.dims().to_vec(), &dev).unwrap()))
                    / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "is_q={is_q} coord {i}");
            }
        }
    }
}
