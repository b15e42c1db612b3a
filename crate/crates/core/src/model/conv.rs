//! 2-D convolution as a candle custom op: im2col + GEMM on the CPU, with
//! explicit backward kernels for the input and the weight.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom { stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        ConvGeom { stride, padding: (kernel - 1) / 2, dilation: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn new(b: usize, c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize, g: ConvGeom) -> Result<Self> {
        let span = |n: usize, k: usize| (n + 2 * g.padding).checked_sub(g.dilation * (k - 1) + 1);
        match (span(h, kh), span(w, kw)) {
            (Some(sh), Some(sw)) if g.stride > 0 => {
                Ok(Dims { b, c, h, w, o, kh, kw, ho: sh / g.stride + 1, wo: sw / g.stride + 1 })
            }
            _ => candle_core::bail!("conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with {g:?}"),
        }
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self, g: ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.padding == 0
    }
}

trait Elem: Copy + Default + std::ops::AddAssign + 'static {
    /// `c = a·b + beta·c` for row-major operands with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);
    fn zero() -> Self;
    fn one() -> Self;
}

macro_rules! elem {
    ($t:ty, $f:path) => {
        impl Elem for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], a_t: bool, b: &[$t], b_t: bool, beta: $t, c: &mut [$t]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the asserts above bound every access made with these strides.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
                }
            }
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
        }
    };
}
elem!(f32, matrixmultiply::sgemm);
elem!(f64, matrixmultiply::dgemm);

fn im2col<T: Elem>(x: &[T], d: &Dims, g: ConvGeom, cols: &mut [T]) {
    let n = d.n();
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[((c * d.kh + ky) * d.kw + kx) * n..][..n];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let out = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *o = if ix < 0 || ix >= d.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Elem>(cols: &[T], d: &Dims, g: ConvGeom, dx: &mut [T]) {
    let n = d.n();
    for c in 0..d.c {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[((c * d.kh + ky) * d.kw + kx) * n..][..n];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, &v) in row[oy * d.wo..(oy + 1) * d.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Elem>(x: &[T], w: &[T], d: &Dims, g: ConvGeom) -> Vec<T> {
    let (k, n) = (d.k(), d.n());
    let mut out = vec![T::zero(); d.b * d.o * n];
    let mut cols = if d.pointwise(g) { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..d.b {
        let xb = &x[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
        let cols = if d.pointwise(g) {
            xb
        } else {
            im2col(xb, d, g, &mut cols);
            &cols[..]
        };
        T::gemm(d.o, k, n, w, false, cols, false, T::zero(), &mut out[b * d.o * n..(b + 1) * d.o * n]);
    }
    out
}

fn backward_input<T: Elem>(dy: &[T], w: &[T], d: &Dims, g: ConvGeom) -> Vec<T> {
    let (k, n) = (d.k(), d.n());
    let plane = d.c * d.h * d.w;
    let mut dx = vec![T::zero(); d.b * plane];
    let mut dcols = vec![T::zero(); k * n];
    for b in 0..d.b {
        let dyb = &dy[b * d.o * n..(b + 1) * d.o * n];
        let dxb = &mut dx[b * plane..(b + 1) * plane];
        if d.pointwise(g) {
            T::gemm(k, d.o, n, w, true, dyb, false, T::zero(), dxb);
        } else {
            T::gemm(k, d.o, n, w, true, dyb, false, T::zero(), &mut dcols);
            col2im(&dcols, d, g, dxb);
        }
    }
    dx
}

fn backward_weight<T: Elem>(x: &[T], dy: &[T], d: &Dims, g: ConvGeom) -> Vec<T> {
    let (k, n) = (d.k(), d.n());
    let mut dw = vec![T::zero(); d.o * k];
    let mut cols = if d.pointwise(g) { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..d.b {
        let xb = &x[b * d.c * d.h * d.w..(b + 1) * d.c * d.h * d.w];
        let cols = if d.pointwise(g) {
            xb
        } else {
            im2col(xb, d, g, &mut cols);
            &cols[..]
        };
        let beta = if b == 0 { T::zero() } else { T::one() };
        T::gemm(d.o, n, k, &dy[b * d.o * n..(b + 1) * d.o * n], false, cols, true, beta, &mut dw);
    }
    dw
}

fn slice<'a, T>(v: &'a [T], l: &Layout, what: &str) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("conv2d: {what} must be contiguous"),
    }
}

fn dims4(l: &Layout) -> Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (slice(a, $l1, "lhs")?, slice(b, $l2, "rhs")?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (slice(a, $l1, "lhs")?, slice(b, $l2, "rhs")?);
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("conv2d: operands must both be f32 or both f64"),
        }
    };
}

struct Conv2d(ConvGeom);

impl CustomOp2 for Conv2d {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        let (o, ci, kh, kw) = dims4(l2)?;
        if c != ci {
            candle_core::bail!("conv2d: input has {c} channels but the kernel expects {ci}");
        }
        let d = Dims::new(b, c, h, w, o, kh, kw, self.0)?;
        let out = dispatch!(s1, l1, s2, l2, |x, k| forward(x, k, &d, self.0));
        Ok((out, Shape::from((b, o, d.ho, d.wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let (_, _, kh, kw) = w.dims4()?;
        let dx = grad.apply_op2_no_bwd(w, &Conv2dInputGrad { g: self.0, h, w: wd })?;
        let dw = x.apply_op2_no_bwd(&grad, &Conv2dWeightGrad { g: self.0, kh, kw })?;
        Ok((Some(dx), Some(dw)))
    }
}

struct Conv2dInputGrad {
    g: ConvGeom,
    h: usize,
    w: usize,
}

impl CustomOp2 for Conv2dInputGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, o, _, _) = dims4(l1)?;
        let (_, c, kh, kw) = dims4(l2)?;
        let d = Dims::new(b, c, self.h, self.w, o, kh, kw, self.g)?;
        let out = dispatch!(s1, l1, s2, l2, |dy, k| backward_input(dy, k, &d, self.g));
        Ok((out, Shape::from((b, c, self.h, self.w))))
    }
}

struct Conv2dWeightGrad {
    g: ConvGeom,
    kh: usize,
    kw: usize,
}

impl CustomOp2 for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        let (_, o, _, _) = dims4(l2)?;
        let d = Dims::new(b, c, h, w, o, self.kh, self.kw, self.g)?;
        let out = dispatch!(s1, l1, s2, l2, |x, dy| backward_weight(x, dy, &d, self.g));
        Ok((out, Shape::from((o, c, self.kh, self.kw))))
    }
}

/// `x: (B, C, H, W)`, `weight: (O, C, kh, kw)` → `(B, O, Ho, Wo)`, differentiable in both.
pub fn conv2d(x: &Tensor, weight: &Tensor, g: ConvGeom) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, Conv2d(g))
}
