//! Real n-dimensional circular convolution built on complex FFTs.
//!
//! Convolution kernels are prepared once as a frequency-domain table
//! ([`KernelSpectrum`]); sources are then convolved with one forward and one
//! inverse transform. Two real sources can share a single complex transform
//! by packing them into the real and imaginary parts.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::Arc;

/// Smallest n' >= n whose prime factors are all in {2, 3, 5}.
pub fn next_good_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut q = m;
        while q % 2 == 0 {
            q /= 2;
        }
        while q % 3 == 0 {
            q /= 3;
        }
        while q % 5 == 0 {
            q /= 5;
        }
        if q == 1 {
            return m;
        }
        m += 1;
    }
}

/// Per-thread cache of FFT plans keyed by (length, direction).
pub struct FftEngine {
    planner: FftPlanner<f64>,
    plans: HashMap<(usize, bool), Arc<dyn Fft<f64>>>,
}

impl FftEngine {
    pub fn new() -> Self {
        FftEngine { planner: FftPlanner::new(), plans: HashMap::new() }
    }

    fn plan(&mut self, len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
        self.plans
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    self.planner.plan_fft_inverse(len)
                } else {
                    self.planner.plan_fft_forward(len)
                }
            })
            .clone()
    }

    /// In-place FFT along every axis of a row-major array.
    fn transform(&mut self, data: &mut [Complex<f64>], dims: &[usize], inverse: bool) {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        let total = data.len();
        for (axis, &len) in dims.iter().enumerate() {
            if len == 1 {
                continue;
            }
            let fft = self.plan(len, inverse);
            let inner: usize = dims[axis + 1..].iter().product();
            let outer = total / (len * inner);
            let mut line = vec![Complex::new(0.0, 0.0); len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    if inner == 1 {
                        fft.process(&mut data[base..base + len]);
                    } else {
                        for (j, slot) in line.iter_mut().enumerate() {
                            *slot = data[base + j * inner];
                        }
                        fft.process(&mut line);
                        for (j, &v) in line.iter().enumerate() {
                            data[base + j * inner] = v;
                        }
                    }
                }
            }
        }
    }
}

impl Default for FftEngine {
    fn default() -> Self {
        Self::new()
    }
}

/// Frequency-domain kernel table. The 1/N inverse-transform normalization is
/// folded in at construction so convolution needs no extra scaling pass.
pub struct KernelSpectrum {
    dims: Vec<usize>,
    spec: Vec<Complex<f64>>,
}

impl KernelSpectrum {
    /// `table` holds the kernel at wrapped signed offsets: index 0 is offset
    /// zero and negative offsets wrap to the top of each axis.
    pub fn from_real(engine: &mut FftEngine, table: &[f64], dims: &[usize]) -> Self {
        let total: usize = dims.iter().product();
        assert_eq!(table.len(), total);
        let mut spec: Vec<Complex<f64>> =
            table.iter().map(|&v| Complex::new(v, 0.0)).collect();
        engine.transform(&mut spec, dims, false);
        let norm = 1.0 / total as f64;
        for v in spec.iter_mut() {
            *v *= norm;
        }
        KernelSpectrum { dims: dims.to_vec(), spec }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Pointwise sum of two spectra: convolving with the summed kernel.
    pub fn add(&self, other: &KernelSpectrum) -> KernelSpectrum {
        assert_eq!(self.dims, other.dims);
        KernelSpectrum {
            dims: self.dims.clone(),
            spec: self.spec.iter().zip(&other.spec).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Circular convolution of one real source with a prepared kernel.
pub fn convolve_one(
    engine: &mut FftEngine,
    source: &[f64],
    kernel: &KernelSpectrum,
) -> Vec<f64> {
    let total: usize = kernel.dims.iter().product();
    assert_eq!(source.len(), total);
    let mut buf: Vec<Complex<f64>> =
        source.iter().map(|&v| Complex::new(v, 0.0)).collect();
    engine.transform(&mut buf, &kernel.dims, false);
    for (v, k) in buf.iter_mut().zip(&kernel.spec) {
        *v *= k;
    }
    engine.transform(&mut buf, &kernel.dims, true);
    buf.into_iter().map(|c| c.re).collect()
}

/// Convolve two real sources with the same kernel using a single complex
/// transform pair: pack a + i b, multiply by the (real-kernel) spectrum, and
/// split the result back into real and imaginary parts.
pub fn convolve_pair(
    engine: &mut FftEngine,
    a: &[f64],
    b: &[f64],
    kernel: &KernelSpectrum,
) -> (Vec<f64>, Vec<f64>) {
    let total: usize = kernel.dims.iter().product();
    assert_eq!(a.len(), total);
    assert_eq!(b.len(), total);
    let mut buf: Vec<Complex<f64>> =
        a.iter().zip(b).map(|(&x, &y)| Complex::new(x, y)).collect();
    engine.transform(&mut buf, &kernel.dims, false);
    for (v, k) in buf.iter_mut().zip(&kernel.spec) {
        *v *= k;
    }
    engine.transform(&mut buf, &kernel.dims, true);
    let out_a = buf.iter().map(|c| c.re).collect();
    let out_b = buf.iter().map(|c| c.im).collect();
    (out_a, out_b)
}

/// Circular autocorrelation of a real array: lag t maps to
/// sum_u table[u] * table[u + t] (indices wrapped).
pub fn autocorrelation(engine: &mut FftEngine, table: &[f64], dims: &[usize]) -> Vec<f64> {
    let total: usize = dims.iter().product();
    assert_eq!(table.len(), total);
    let mut buf: Vec<Complex<f64>> =
        table.iter().map(|&v| Complex::new(v, 0.0)).collect();
    engine.transform(&mut buf, dims, false);
    for v in buf.iter_mut() {
        *v = Complex::new(v.norm_sqr(), 0.0);
    }
    engine.transform(&mut buf, dims, true);
    let norm = 1.0 / total as f64;
    buf.into_iter().map(|c| c.re * norm).collect()
}
