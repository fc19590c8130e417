//! Complex FFTs over 3D grids.
//!
//! Power-of-two lengths use an iterative radix-2 transform; every other length
//! goes through Bluestein's chirp-z algorithm on top of it. Forward transforms
//! are unnormalized and inverse transforms carry the `1/N` factor.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

use crate::volume::{voxel_count, Shape3};

struct Radix2 {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Self { n, twiddles, bitrev }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * step];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

enum Plan {
    Radix2(Radix2),
    Bluestein { chirp: Vec<Complex64>, kernel: Vec<Complex64>, inner: Radix2 },
}

/// A reusable forward transform for one length.
pub struct Fft {
    n: usize,
    plan: Plan,
}

impl Fft {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "zero-length transform");
        if n.is_power_of_two() {
            return Self { n, plan: Plan::Radix2(Radix2::new(n)) };
        }
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        // j² mod 2n keeps the chirp phase exact for large j.
        let chirp: Vec<Complex64> = (0..n)
            .map(|j| {
                let jj = (j as u128 * j as u128 % (2 * n as u128)) as f64;
                Complex64::from_polar(1.0, -PI * jj / n as f64)
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for j in 1..n {
            kernel[j] = chirp[j].conj();
            kernel[m - j] = chirp[j].conj();
        }
        inner.forward(&mut kernel);
        Self { n, plan: Plan::Bluestein { chirp, kernel, inner } }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        debug_assert_eq!(buf.len(), self.n);
        match &self.plan {
            Plan::Radix2(r) => r.forward(buf),
            Plan::Bluestein { chirp, kernel, inner } => {
                let m = inner.n;
                scratch.clear();
                scratch.resize(m, Complex64::new(0.0, 0.0));
                for j in 0..self.n {
                    scratch[j] = buf[j] * chirp[j];
                }
                inner.forward(scratch);
                for (s, k) in scratch.iter_mut().zip(kernel) {
                    *s = (*s * k).conj();
                }
                // Inverse via conjugation: ifft(z) = conj(fft(conj(z))) / m.
                inner.forward(scratch);
                let scale = 1.0 / m as f64;
                for j in 0..self.n {
                    buf[j] = scratch[j].conj() * scale * chirp[j];
                }
            }
        }
    }

    pub fn inverse(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        for z in buf.iter_mut() {
            *z = z.conj();
        }
        self.forward(buf, scratch);
        let scale = 1.0 / self.n as f64;
        for z in buf.iter_mut() {
            *z = z.conj() * scale;
        }
    }
}

fn transform_axes(data: &mut [Complex64], shape: Shape3, inverse: bool) {
    assert_eq!(data.len(), voxel_count(shape));
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut line = Vec::new();
    let mut scratch = Vec::new();
    for axis in 0..3 {
        let n = shape[axis];
        if n == 1 {
            continue;
        }
        let plan = Fft::new(n);
        let stride = strides[axis];
        line.resize(n, Complex64::new(0.0, 0.0));
        for base in 0..data.len() {
            // Visit each line once, from its first element.
            if (base / stride) % n != 0 {
                continue;
            }
            for t in 0..n {
                line[t] = data[base + t * stride];
            }
            if inverse {
                plan.inverse(&mut line, &mut scratch);
            } else {
                plan.forward(&mut line, &mut scratch);
            }
            for t in 0..n {
                data[base + t * stride] = line[t];
            }
        }
    }
}

/// Unnormalized forward 3D DFT, in place.
pub fn fft3(data: &mut [Complex64], shape: Shape3) {
    transform_axes(data, shape, false);
}

/// Inverse 3D DFT with `1/N` normalization, in place.
pub fn ifft3(data: &mut [Complex64], shape: Shape3) {
    transform_axes(data, shape, true);
}

/// Moves the zero-frequency bin to the center (index `n / 2` on each axis).
pub fn fftshift<T: Copy>(data: &[T], shape: Shape3) -> Vec<T> {
    roll(data, shape, [shape[0] / 2, shape[1] / 2, shape[2] / 2])
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Copy>(data: &[T], shape: Shape3) -> Vec<T> {
    roll(data, shape, [shape[0] - shape[0] / 2, shape[1] - shape[1] / 2, shape[2] - shape[2] / 2])
}

fn roll<T: Copy>(data: &[T], shape: Shape3, by: [usize; 3]) -> Vec<T> {
    let mut out = data.to_vec();
    for i in 0..shape[0] {
        let oi = (i + by[0]) % shape[0];
        for j in 0..shape[1] {
            let oj = (j + by[1]) % shape[1];
            for k in 0..shape[2] {
                let ok = (k + by[2]) % shape[2];
                out[(oi * shape[1] + oj) * shape[2] + ok] = data[(i * shape[1] + j) * shape[2] + k];
            }
        }
    }
    out
}
