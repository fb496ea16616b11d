//! Trainable cost aggregation: a single 4D convolution followed by ReLU,
//! applied to the cost volume viewed as an `h_s × w_s × h_t × w_t` tensor.
//!
//! Convolution uses zero padding of `(k − 1) / 2` on every axis so the
//! aggregated volume has the same layout as its input.

use std::io::{Read, Write};

use rand::Rng;

use crate::cost_volume::{CostVolume, VolumeKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"C4D1";

/// Dense `k × k × k × k` kernel with a scalar bias and gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv4dKernel {
    size: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub weights_grad: Vec<f64>,
    pub bias_grad: f64,
}

impl Conv4dKernel {
    pub fn new(size: usize, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        let n = size.pow(4);
        if weights.len() != n {
            return Err(Error::shape("kernel weights", n, weights.len()));
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("kernel parameters"));
        }
        Ok(Self {
            size,
            weights,
            bias,
            weights_grad: vec![0.0; n],
            bias_grad: 0.0,
        })
    }

    /// Center tap 1, every other tap 0.
    pub fn delta(size: usize) -> Result<Self> {
        let mut k = Self::new(size, vec![0.0; size.pow(4)], 0.0)?;
        let c = k.center_index();
        k.weights[c] = 1.0;
        Ok(k)
    }

    /// Delta kernel plus uniform noise in `[-noise, noise]` on every tap.
    pub fn near_identity<R: Rng + ?Sized>(size: usize, noise: f64, rng: &mut R) -> Result<Self> {
        let mut k = Self::delta(size)?;
        if noise > 0.0 {
            k.weights
                .iter_mut()
                .for_each(|w| *w += rng.random_range(-noise..=noise));
        }
        Ok(k)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn center_index(&self) -> usize {
        let h = self.size / 2;
        let k = self.size;
        ((h * k + h) * k + h) * k + h
    }

    pub fn zero_grad(&mut self) {
        self.weights_grad.fill(0.0);
        self.bias_grad = 0.0;
    }

    /// Binary checkpoint: `C4D1`, `k` as u32 LE, then `k⁴` weights and the
    /// bias as f64 LE.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(self.size as u32).to_le_bytes())?;
        for w in self.weights.iter().chain(std::iter::once(&self.bias)) {
            out.write_all(&w.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("kernel checkpoint", "bad magic"));
        }
        let mut buf4 = [0u8; 4];
        input.read_exact(&mut buf4)?;
        let size = u32::from_le_bytes(buf4) as usize;
        if size == 0 || size.is_multiple_of(2) || size > 15 {
            return Err(Error::format(
                "kernel checkpoint",
                format!("bad kernel size {size}"),
            ));
        }
        let mut vals = Vec::with_capacity(size.pow(4) + 1);
        let mut buf8 = [0u8; 8];
        for _ in 0..size.pow(4) + 1 {
            input.read_exact(&mut buf8)?;
            vals.push(f64::from_le_bytes(buf8));
        }
        let bias = vals.pop().unwrap();
        Conv4dKernel::new(size, vals, bias)
    }
}

/// Extents of the 4D view.
#[derive(Clone, Copy)]
struct Dims4 {
    n: [usize; 4],
}

impl Dims4 {
    fn of(c: &CostVolume) -> Self {
        let (s, t) = (c.shape_s(), c.shape_t());
        Dims4 {
            n: [s.h(), s.w(), t.h(), t.w()],
        }
    }

    #[inline]
    fn index(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.n[1] + b) * self.n[2] + c) * self.n[3] + d
    }
}

/// Output range `[lo, hi)` along one axis for which `out + off` is in
/// `0..n`, with `off = tap − half`.
#[inline]
fn valid_range(n: usize, tap: usize, half: usize) -> (usize, usize, isize) {
    let off = tap as isize - half as isize;
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi, off)
}

/// Visits every (output row slice, input row slice, tap index) triple of the
/// convolution; the last axis is handled as contiguous slices.
fn for_each_tap<F: FnMut(usize, usize, usize, usize)>(dims: Dims4, k: usize, mut f: F) {
    let half = k / 2;
    let n = dims.n;
    for p in 0..k {
        let (a0, a1, oa) = valid_range(n[0], p, half);
        for q in 0..k {
            let (b0, b1, ob) = valid_range(n[1], q, half);
            for r in 0..k {
                let (c0, c1, oc) = valid_range(n[2], r, half);
                for s in 0..k {
                    let (d0, d1, od) = valid_range(n[3], s, half);
                    if d0 >= d1 {
                        continue;
                    }
                    let tap = ((p * k + q) * k + r) * k + s;
                    let len = d1 - d0;
                    for a in a0..a1 {
                        let ia = (a as isize + oa) as usize;
                        for b in b0..b1 {
                            let ib = (b as isize + ob) as usize;
                            for c in c0..c1 {
                                let ic = (c as isize + oc) as usize;
                                let out = dims.index(a, b, c, d0);
                                let inp = dims.index(ia, ib, ic, (d0 as isize + od) as usize);
                                f(tap, out, inp, len);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn convolve(c: &CostVolume, kernel: &Conv4dKernel) -> Vec<f64> {
    let dims = Dims4::of(c);
    let x = c.values();
    let mut z = vec![kernel.bias; x.len()];
    for_each_tap(dims, kernel.size, |tap, out, inp, len| {
        let w = kernel.weights[tap];
        if w == 0.0 {
            return;
        }
        for (o, i) in z[out..out + len].iter_mut().zip(&x[inp..inp + len]) {
            *o += w * i;
        }
    });
    z
}

/// `A = ReLU(conv4d(C; kernel) + bias)`, same layout as `c`.
pub fn aggregate(c: &CostVolume, kernel: &Conv4dKernel) -> CostVolume {
    let mut z = convolve(c, kernel);
    z.iter_mut().for_each(|v| *v = v.max(0.0));
    CostVolume::new(c.shape_s(), c.shape_t(), z, VolumeKind::Aggregated)
        .expect("aggregation preserves layout")
}

/// Reverse mode of [`aggregate`]. Returns `grad_C` and accumulates kernel and
/// bias gradients. Recomputes the forward pass for the ReLU gate.
pub fn aggregate_backward(
    c: &CostVolume,
    kernel: &mut Conv4dKernel,
    grad_a: &[f64],
) -> Result<Vec<f64>> {
    let a = aggregate(c, kernel);
    aggregate_backward_with_output(c, kernel, &a, grad_a)
}

/// Same as [`aggregate_backward`] but reuses the forward output `a`; the ReLU
/// is active exactly where `a > 0`.
pub fn aggregate_backward_with_output(
    c: &CostVolume,
    kernel: &mut Conv4dKernel,
    a: &CostVolume,
    grad_a: &[f64],
) -> Result<Vec<f64>> {
    let size = c.values().len();
    if grad_a.len() != size {
        return Err(Error::shape("aggregate_backward grad", size, grad_a.len()));
    }
    if !a.same_layout(c) {
        return Err(Error::shape(
            "aggregate_backward output",
            format!("{} x {}", c.shape_s(), c.shape_t()),
            format!("{} x {}", a.shape_s(), a.shape_t()),
        ));
    }
    let gated: Vec<f64> = grad_a
        .iter()
        .zip(a.values())
        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
        .collect();
    kernel.bias_grad += gated.iter().sum::<f64>();

    let x = c.values();
    let mut grad_c = vec![0.0; size];
    let weights = &kernel.weights;
    let wgrad = &mut kernel.weights_grad;
    for_each_tap(Dims4::of(c), kernel.size, |tap, out, inp, len| {
        let g = &gated[out..out + len];
        let xi = &x[inp..inp + len];
        wgrad[tap] += g.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
        let w = weights[tap];
        if w != 0.0 {
            for (gc, gv) in grad_c[inp..inp + len].iter_mut().zip(g) {
                *gc += w * gv;
            }
        }
    });
    Ok(grad_c)
}
