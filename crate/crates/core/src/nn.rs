//! Minimal volumetric layers with hand-written backward passes.
//!
//! Tensors are single samples laid out channel-major (`[C, D0, D1, D2]`).
//! Parameters of a network live in one flat vector; every layer owns a set of
//! [`ParamRange`]s into it, and gradients use the same layout so optimizers
//! and checkpoints only ever see flat slices.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::volume::{voxel_count, Shape3};

/// Floating-point element type of the networks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + 'static
{
    /// `C = alpha * A * B + beta * C` with arbitrary positive strides.
    ///
    /// # Safety
    /// All pointers must be valid for the extents implied by the strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f32,
        a: *const f32, rsa: isize, csa: isize,
        b: *const f32, rsb: isize, csb: isize,
        beta: f32,
        c: *mut f32, rsc: isize, csc: isize,
    ) {
        unsafe { matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f64,
        a: *const f64, rsa: isize, csa: isize,
        b: *const f64, rsb: isize, csb: isize,
        beta: f64,
        c: *mut f64, rsc: isize, csc: isize,
    ) {
        unsafe { matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

/// A strided matrix view into a slice: `(slice, offset, row stride, col stride)`.
type View<'a, T> = (&'a [T], usize, usize, usize);

fn span(rows: usize, cols: usize, offset: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        return offset;
    }
    offset + (rows - 1) * rs + (cols - 1) * cs
}

/// Bounds-checked `C = A·B + beta·C` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize, k: usize, n: usize,
    a: View<'_, T>, b: View<'_, T>,
    beta: T,
    c: &mut [T], c_off: usize, rsc: usize, csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || span(m, k, a.1, a.2, a.3) < a.0.len(), "gemm: A out of bounds");
    assert!(k == 0 || span(k, n, b.1, b.2, b.3) < b.0.len(), "gemm: B out of bounds");
    assert!(span(m, n, c_off, rsc, csc) < c.len(), "gemm: C out of bounds");
    unsafe {
        T::gemm_raw(
            m, k, n, T::one(),
            a.0.as_ptr().add(a.1), a.2 as isize, a.3 as isize,
            b.0.as_ptr().add(b.1), b.2 as isize, b.3 as isize,
            beta,
            c.as_mut_ptr().add(c_off), rsc as isize, csc as isize,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub shape: Shape3,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self { channels, shape, data: vec![T::zero(); channels * voxel_count(shape)] }
    }

    pub fn from_vec(channels: usize, shape: Shape3, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * voxel_count(shape), "tensor data length");
        Self { channels, shape, data }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape, "concat shapes");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self { channels: self.channels + other.channels, shape: self.shape, data }
    }

    /// Splits off the first `channels` channels.
    pub fn split(mut self, channels: usize) -> (Self, Self) {
        let n = self.voxels();
        let rest = self.data.split_off(channels * n);
        let tail = Self { channels: self.channels - channels, shape: self.shape, data: rest };
        self.channels = channels;
        (self, tail)
    }
}

/// Location of one parameter tensor in a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn of<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a, T>(&self, p: &'a mut [T]) -> &'a mut [T] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub range: ParamRange,
    pub init: Init,
}

/// Collects parameter tensors while a network is assembled.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct ParamLayout {
    pub tensors: Vec<ParamSpec>,
    pub len: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: String, len: usize, init: Init) -> ParamRange {
        let range = ParamRange { offset: self.len, len };
        self.len += len;
        self.tensors.push(ParamSpec { name, range, init });
        range
    }

    /// Draws initial values in layout order.
    pub fn initialize<T: Real, R: Rng>(&self, rng: &mut R) -> Vec<T> {
        let mut params = vec![T::zero(); self.len];
        for t in &self.tensors {
            let slot = t.range.of_mut(&mut params);
            match t.init {
                Init::HeNormal { fan_in } => {
                    let std = libm::sqrt(2.0 / fan_in as f64);
                    for v in slot {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = T::of(z * std);
                    }
                }
                Init::Constant(c) => slot.fill(T::of(c)),
            }
        }
        params
    }
}

fn padded_shape(shape: Shape3) -> Shape3 {
    [shape[0] + 2, shape[1] + 2, shape[2] + 2]
}

fn pad<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let s = x.shape;
    let ps = padded_shape(s);
    let pn = voxel_count(ps);
    let mut out = vec![T::zero(); x.channels * pn];
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out[c * pn..(c + 1) * pn];
        for i in 0..s[0] {
            for j in 0..s[1] {
                let so = (i * s[1] + j) * s[2];
                let d = ((i + 1) * ps[1] + j + 1) * ps[2] + 1;
                dst[d..d + s[2]].copy_from_slice(&src[so..so + s[2]]);
            }
        }
    }
    out
}

fn unpad<T: Real>(xp: &[T], channels: usize, shape: Shape3) -> Tensor<T> {
    let ps = padded_shape(shape);
    let pn = voxel_count(ps);
    let mut out = Tensor::zeros(channels, shape);
    let n = voxel_count(shape);
    for c in 0..channels {
        let src = &xp[c * pn..(c + 1) * pn];
        let dst = &mut out.data[c * n..(c + 1) * n];
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                let d = (i * shape[1] + j) * shape[2];
                let so = ((i + 1) * ps[1] + j + 1) * ps[2] + 1;
                dst[d..d + shape[2]].copy_from_slice(&src[so..so + shape[2]]);
            }
        }
    }
    out
}

/// Flat-index window shared by every tap of a padded 3×3×3 convolution:
/// the first interior position and the number of positions up to the last.
fn interior_window(shape: Shape3) -> (usize, usize, [usize; 2]) {
    let ps = padded_shape(shape);
    let s0 = ps[1] * ps[2];
    let s1 = ps[2];
    let first = s0 + s1 + 1;
    let last = shape[0] * s0 + shape[1] * s1 + shape[2];
    (first, last - first + 1, [s0, s1])
}

fn tap_offsets(strides: [usize; 2]) -> [isize; 27] {
    let mut out = [0isize; 27];
    let mut t = 0;
    for a in -1isize..=1 {
        for b in -1isize..=1 {
            for c in -1isize..=1 {
                out[t] = a * strides[0] as isize + b * strides[1] as isize + c;
                t += 1;
            }
        }
    }
    out
}

/// 3×3×3 convolution, stride 1, zero padding 1.
///
/// Weights are stored `[out][in][tap]`; each tap is one GEMM over a shifted
/// window of the padded input, so no im2col buffer is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3 {
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

/// Padded copy of a convolution's input.
#[derive(Debug, Clone)]
pub struct Conv3Cache<T> {
    padded: Vec<T>,
    shape: Shape3,
}

impl Conv3 {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let weight = layout.add(alloc::format!("{name}.weight"), cout * cin * 27, Init::HeNormal { fan_in: cin * 27 });
        let bias = layout.add(alloc::format!("{name}.bias"), cout, Init::Constant(0.0));
        Self { cin, cout, weight, bias }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, Conv3Cache<T>) {
        assert_eq!(x.channels, self.cin, "conv input channels");
        let shape = x.shape;
        let xp = pad(x);
        let pn = voxel_count(padded_shape(shape));
        let (first, len, strides) = interior_window(shape);
        let w = self.weight.of(p);
        let mut yp = vec![T::zero(); self.cout * pn];
        for (t, off) in tap_offsets(strides).into_iter().enumerate() {
            let src = (first as isize + off) as usize;
            gemm(
                self.cout, self.cin, len,
                (w, t, self.cin * 27, 27),
                (&xp, src, pn, 1),
                T::one(),
                &mut yp, first, pn, 1,
            );
        }
        let mut y = unpad(&yp, self.cout, shape);
        let n = y.voxels();
        for (c, b) in self.bias.of(p).iter().enumerate() {
            for v in &mut y.data[c * n..(c + 1) * n] {
                *v += *b;
            }
        }
        (y, Conv3Cache { padded: xp, shape })
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient
    /// when `need_input` is set.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &Conv3Cache<T>,
        dy: &Tensor<T>,
        g: &mut [T],
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let shape = cache.shape;
        let pn = voxel_count(padded_shape(shape));
        let (first, len, strides) = interior_window(shape);
        let dyp = pad(dy);
        let n = dy.voxels();
        {
            let gb = self.bias.of_mut(g);
            for (c, b) in gb.iter_mut().enumerate() {
                *b += dy.data[c * n..(c + 1) * n].iter().copied().sum::<T>();
            }
        }
        let offsets = tap_offsets(strides);
        {
            let gw = self.weight.of_mut(g);
            for (t, off) in offsets.iter().enumerate() {
                let src = (first as isize + off) as usize;
                gemm(
                    self.cout, len, self.cin,
                    (&dyp, first, pn, 1),
                    (&cache.padded, src, 1, pn),
                    T::one(),
                    gw, t, self.cin * 27, 27,
                );
            }
        }
        if !need_input {
            return None;
        }
        let w = self.weight.of(p);
        let mut dxp = vec![T::zero(); self.cin * pn];
        for (t, off) in offsets.iter().enumerate() {
            let dst = (first as isize + off) as usize;
            gemm(
                self.cin, self.cout, len,
                (w, t, 27, self.cin * 27),
                (&dyp, first, pn, 1),
                T::one(),
                &mut dxp, dst, pn, 1,
            );
        }
        Some(unpad(&dxp, self.cin, shape))
    }
}

fn half_shape(shape: Shape3) -> Shape3 {
    [shape[0] / 2, shape[1] / 2, shape[2] / 2]
}

/// `[C, D]` → `[C*8, D/2]`, sub-voxel index `(a, b, c)` ordered as `a*4+b*2+c`.
fn space_to_depth<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape;
    let h = half_shape(s);
    let hn = voxel_count(h);
    let mut out = Tensor::zeros(x.channels * 8, h);
    for c in 0..x.channels {
        let src = x.channel(c);
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let sub = (i % 2) * 4 + (j % 2) * 2 + k % 2;
                    let dst = ((i / 2) * h[1] + j / 2) * h[2] + k / 2;
                    out.data[(c * 8 + sub) * hn + dst] = src[(i * s[1] + j) * s[2] + k];
                }
            }
        }
    }
    out
}

fn depth_to_space<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let h = x.shape;
    let s = [h[0] * 2, h[1] * 2, h[2] * 2];
    let hn = voxel_count(h);
    let channels = x.channels / 8;
    let mut out = Tensor::zeros(channels, s);
    let n = voxel_count(s);
    for c in 0..channels {
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let sub = (i % 2) * 4 + (j % 2) * 2 + k % 2;
                    let src = ((i / 2) * h[1] + j / 2) * h[2] + k / 2;
                    out.data[c * n + (i * s[1] + j) * s[2] + k] = x.data[(c * 8 + sub) * hn + src];
                }
            }
        }
    }
    out
}

fn add_bias<T: Real>(y: &mut Tensor<T>, bias: &[T]) {
    let n = y.voxels();
    for (c, b) in bias.iter().enumerate() {
        for v in &mut y.data[c * n..(c + 1) * n] {
            *v += *b;
        }
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>, gb: &mut [T]) {
    let n = dy.voxels();
    for (c, b) in gb.iter_mut().enumerate() {
        *b += dy.data[c * n..(c + 1) * n].iter().copied().sum::<T>();
    }
}

/// 2×2×2 convolution with stride 2; halves every spatial extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Down2 {
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Down2 {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let weight = layout.add(alloc::format!("{name}.weight"), cout * cin * 8, Init::HeNormal { fan_in: cin * 8 });
        let bias = layout.add(alloc::format!("{name}.bias"), cout, Init::Constant(0.0));
        Self { cin, cout, weight, bias }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        assert_eq!(x.channels, self.cin, "down input channels");
        assert!(x.shape.iter().all(|n| n % 2 == 0), "down-sampling needs even extents");
        let xs = space_to_depth(x);
        let m = xs.voxels();
        let mut y = Tensor::zeros(self.cout, xs.shape);
        gemm(
            self.cout, self.cin * 8, m,
            (self.weight.of(p), 0, self.cin * 8, 1),
            (&xs.data, 0, m, 1),
            T::zero(),
            &mut y.data, 0, m, 1,
        );
        add_bias(&mut y, self.bias.of(p));
        (y, xs)
    }

    pub fn backward<T: Real>(&self, p: &[T], xs: &Tensor<T>, dy: &Tensor<T>, g: &mut [T]) -> Tensor<T> {
        let m = xs.voxels();
        bias_grad(dy, self.bias.of_mut(g));
        gemm(
            self.cout, m, self.cin * 8,
            (&dy.data, 0, m, 1),
            (&xs.data, 0, 1, m),
            T::one(),
            self.weight.of_mut(g), 0, self.cin * 8, 1,
        );
        let mut dxs = Tensor::zeros(self.cin * 8, xs.shape);
        gemm(
            self.cin * 8, self.cout, m,
            (self.weight.of(p), 0, 1, self.cin * 8),
            (&dy.data, 0, m, 1),
            T::zero(),
            &mut dxs.data, 0, m, 1,
        );
        depth_to_space(&dxs)
    }
}

/// 2×2×2 transposed convolution with stride 2; doubles every spatial extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Up2 {
    pub cin: usize,
    pub cout: usize,
    /// Stored `[in][out*8]`.
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Up2 {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let weight = layout.add(alloc::format!("{name}.weight"), cin * cout * 8, Init::HeNormal { fan_in: cin });
        let bias = layout.add(alloc::format!("{name}.bias"), cout, Init::Constant(0.0));
        Self { cin, cout, weight, bias }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.cin, "up input channels");
        let m = x.voxels();
        let mut ys = Tensor::zeros(self.cout * 8, x.shape);
        gemm(
            self.cout * 8, self.cin, m,
            (self.weight.of(p), 0, 1, self.cout * 8),
            (&x.data, 0, m, 1),
            T::zero(),
            &mut ys.data, 0, m, 1,
        );
        let mut y = depth_to_space(&ys);
        add_bias(&mut y, self.bias.of(p));
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], x: &Tensor<T>, dy: &Tensor<T>, g: &mut [T]) -> Tensor<T> {
        let m = x.voxels();
        bias_grad(dy, self.bias.of_mut(g));
        let dys = space_to_depth(dy);
        gemm(
            self.cin, m, self.cout * 8,
            (&x.data, 0, m, 1),
            (&dys.data, 0, 1, m),
            T::one(),
            self.weight.of_mut(g), 0, self.cout * 8, 1,
        );
        let mut dx = Tensor::zeros(self.cin, x.shape);
        gemm(
            self.cin, self.cout * 8, m,
            (self.weight.of(p), 0, self.cout * 8, 1),
            (&dys.data, 0, m, 1),
            T::zero(),
            &mut dx.data, 0, m, 1,
        );
        dx
    }
}

/// 1×1×1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise {
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Pointwise {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        let weight = layout.add(alloc::format!("{name}.weight"), cout * cin, Init::HeNormal { fan_in: cin });
        let bias = layout.add(alloc::format!("{name}.bias"), cout, Init::Constant(0.0));
        Self { cin, cout, weight, bias }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.cin, "pointwise input channels");
        let m = x.voxels();
        let mut y = Tensor::zeros(self.cout, x.shape);
        gemm(
            self.cout, self.cin, m,
            (self.weight.of(p), 0, self.cin, 1),
            (&x.data, 0, m, 1),
            T::zero(),
            &mut y.data, 0, m, 1,
        );
        add_bias(&mut y, self.bias.of(p));
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], x: &Tensor<T>, dy: &Tensor<T>, g: &mut [T]) -> Tensor<T> {
        let m = x.voxels();
        bias_grad(dy, self.bias.of_mut(g));
        gemm(
            self.cout, m, self.cin,
            (&dy.data, 0, m, 1),
            (&x.data, 0, 1, m),
            T::one(),
            self.weight.of_mut(g), 0, self.cin, 1,
        );
        let mut dx = Tensor::zeros(self.cin, x.shape);
        gemm(
            self.cin, self.cout, m,
            (self.weight.of(p), 0, 1, self.cin),
            (&dy.data, 0, m, 1),
            T::zero(),
            &mut dx.data, 0, m, 1,
        );
        dx
    }
}

/// Parametric ReLU with one learned slope per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PRelu {
    pub channels: usize,
    pub slope: ParamRange,
}

impl PRelu {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        let slope = layout.add(alloc::format!("{name}.slope"), channels, Init::Constant(0.25));
        Self { channels, slope }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> Tensor<T> {
        let n = x.voxels();
        let mut y = x.clone();
        for (c, &a) in self.slope.of(p).iter().enumerate() {
            for v in &mut y.data[c * n..(c + 1) * n] {
                if *v <= T::zero() {
                    *v *= a;
                }
            }
        }
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], x: &Tensor<T>, dy: &Tensor<T>, g: &mut [T]) -> Tensor<T> {
        let n = x.voxels();
        let mut dx = dy.clone();
        let slopes = self.slope.of(p);
        let gs = self.slope.of_mut(g);
        for c in 0..self.channels {
            let mut acc = T::zero();
            for i in c * n..(c + 1) * n {
                if x.data[i] <= T::zero() {
                    acc += x.data[i] * dy.data[i];
                    dx.data[i] *= slopes[c];
                }
            }
            gs[c] += acc;
        }
        dx
    }
}

/// Per-voxel softmax over channels.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.voxels();
    let k = x.channels;
    let mut y = x.clone();
    for v in 0..n {
        let mut max = T::neg_infinity();
        for c in 0..k {
            max = max.max(x.data[c * n + v]);
        }
        let mut sum = T::zero();
        for c in 0..k {
            let e = (x.data[c * n + v] - max).exp();
            y.data[c * n + v] = e;
            sum += e;
        }
        for c in 0..k {
            y.data[c * n + v] = y.data[c * n + v] / sum;
        }
    }
    y
}

/// Gradient through softmax given its output `p`.
pub fn softmax_backward<T: Real>(p: &Tensor<T>, dp: &Tensor<T>) -> Tensor<T> {
    let n = p.voxels();
    let k = p.channels;
    let mut dx = dp.clone();
    for v in 0..n {
        let mut dot = T::zero();
        for c in 0..k {
            dot += p.data[c * n + v] * dp.data[c * n + v];
        }
        for c in 0..k {
            dx.data[c * n + v] = p.data[c * n + v] * (dp.data[c * n + v] - dot);
        }
    }
    dx
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = T::one() / (T::one() + (-*v).exp());
    }
    y
}

/// Gradient through the sigmoid given its output `s`.
pub fn sigmoid_backward<T: Real>(s: &Tensor<T>, ds: &Tensor<T>) -> Tensor<T> {
    let mut dx = ds.clone();
    for (d, &y) in dx.data.iter_mut().zip(&s.data) {
        *d *= y * (T::one() - y);
    }
    dx
}

/// Linear interpolation weights for one axis: output `o` reads
/// `(1 - w) * in[lo] + w * in[hi]`. Half-pixel centers, edges clamped.
fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn resample_axis<T: Real>(x: &Tensor<T>, axis: usize, taps: &[(usize, usize, f64)], adjoint: bool, n_out: usize) -> Tensor<T> {
    let s = x.shape;
    let mut os = s;
    os[axis] = n_out;
    let mut out = Tensor::zeros(x.channels, os);
    let in_strides = [s[1] * s[2], s[2], 1];
    let out_strides = [os[1] * os[2], os[2], 1];
    let n_in_vox = voxel_count(s);
    let n_out_vox = voxel_count(os);
    let (ax1, ax2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for c in 0..x.channels {
        let src = &x.data[c * n_in_vox..(c + 1) * n_in_vox];
        let dst = &mut out.data[c * n_out_vox..(c + 1) * n_out_vox];
        for u in 0..s[ax1] {
            for v in 0..s[ax2] {
                let ib = u * in_strides[ax1] + v * in_strides[ax2];
                let ob = u * out_strides[ax1] + v * out_strides[ax2];
                for (o, &(lo, hi, w)) in taps.iter().enumerate() {
                    let w = T::of(w);
                    if adjoint {
                        let g = src[ib + o * in_strides[axis]];
                        dst[ob + lo * out_strides[axis]] += (T::one() - w) * g;
                        dst[ob + hi * out_strides[axis]] += w * g;
                    } else {
                        dst[ob + o * out_strides[axis]] =
                            (T::one() - w) * src[ib + lo * in_strides[axis]] + w * src[ib + hi * in_strides[axis]];
                    }
                }
            }
        }
    }
    out
}

/// Trilinear up-sampling by an integer factor on every axis.
pub fn upsample_trilinear<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let mut y = x.clone();
    for axis in 0..3 {
        let n = y.shape[axis];
        let taps = linear_taps(n, factor);
        y = resample_axis(&y, axis, &taps, false, n * factor);
    }
    y
}

/// Adjoint of [`upsample_trilinear`] applied to an output gradient.
pub fn upsample_trilinear_backward<T: Real>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    let mut g = dy.clone();
    for axis in (0..3).rev() {
        let n_in = g.shape[axis] / factor;
        let taps = linear_taps(n_in, factor);
        g = resample_axis(&g, axis, &taps, true, n_in);
    }
    g
}
