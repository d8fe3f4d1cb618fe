//! Packed `f32` descriptor rows for fast multi-scale cosine evaluation.
//!
//! Every scale is normalized and scaled by `1/sqrt(S)`, then all scales are
//! laid out back to back, so the dot product of two rows is the mean of the
//! per-scale cosines. The dot kernel fixes its summation order in source
//! (16 independent lanes, pairwise reduction) and never fuses multiply-add,
//! so the AVX2 build and the portable build return identical bits.

use crate::refmodel::Descriptor;

pub(crate) struct PackedDescriptors {
    /// Offsets of every scale inside a row, plus the row length at the end.
    pub offsets: Vec<usize>,
    pub stride: usize,
    pub data: Vec<f32>,
}

impl PackedDescriptors {
    pub fn new<'a>(dims: &[usize], descriptors: impl Iterator<Item = &'a Descriptor>) -> Self {
        let mut offsets = vec![0];
        for d in dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        let stride = *offsets.last().unwrap();
        let weight = 1.0 / (dims.len() as f64).sqrt();
        let mut data = Vec::new();
        for descriptor in descriptors {
            for scale in descriptor.scales() {
                let norm = scale.iter().map(|x| x * x).sum::<f64>().sqrt();
                data.extend(scale.iter().map(|x| (x / norm * weight) as f32));
            }
        }
        Self { offsets, stride, data }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub fn n_scales(&self) -> usize {
        self.offsets.len() - 1
    }
}

#[inline(always)]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 16;
    let mut acc = [0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (x, y) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for k in chunks * LANES..a.len() {
        tail += a[k] * b[k];
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

/// Four dot products sharing `a`; each result has the bits of `dot_lanes(a, b[i])`.
#[inline(always)]
fn dot4_lanes(a: &[f32], b: [&[f32]; 4]) -> [f32; 4] {
    const LANES: usize = 16;
    let n = a.len();
    let b = b.map(|x| &x[..n]);
    let mut acc = [[0f32; LANES]; 4];
    let chunks = n / LANES;
    for c in 0..chunks {
        let x = &a[c * LANES..(c + 1) * LANES];
        for (acc, y) in acc.iter_mut().zip(&b) {
            let y = &y[c * LANES..(c + 1) * LANES];
            for l in 0..LANES {
                acc[l] += x[l] * y[l];
            }
        }
    }
    let mut out = [0f32; 4];
    for ((out, acc), y) in out.iter_mut().zip(acc.iter_mut()).zip(&b) {
        let mut tail = 0f32;
        for k in chunks * LANES..n {
            tail += a[k] * y[k];
        }
        let mut width = LANES;
        while width > 1 {
            width /= 2;
            for l in 0..width {
                acc[l] += acc[l + width];
            }
        }
        *out = acc[0] + tail;
    }
    out
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    /// Lane `l` of the 16-lane accumulator lives in `lo` for `l < 8`, else in `hi`.
    #[inline(always)]
    unsafe fn reduce(lo: __m256, hi: __m256) -> f32 {
        let v8 = _mm256_add_ps(lo, hi);
        let v4 = _mm_add_ps(_mm256_castps256_ps128(v8), _mm256_extractf128_ps(v8, 1));
        let v2 = _mm_add_ps(v4, _mm_movehl_ps(v4, v4));
        let v1 = _mm_add_ss(v2, _mm_shuffle_ps(v2, v2, 1));
        _mm_cvtss_f32(v1)
    }

    #[inline(always)]
    unsafe fn tail(a: &[f32], b: &[f32], from: usize) -> f32 {
        let mut t = 0f32;
        for k in from..a.len() {
            t += a[k] * b[k];
        }
        t
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len().min(b.len());
        let chunks = n / 16;
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let (mut lo, mut hi) = (_mm256_setzero_ps(), _mm256_setzero_ps());
        for c in 0..chunks {
            let o = 16 * c;
            lo = _mm256_add_ps(lo, _mm256_mul_ps(_mm256_loadu_ps(pa.add(o)), _mm256_loadu_ps(pb.add(o))));
            hi = _mm256_add_ps(hi, _mm256_mul_ps(_mm256_loadu_ps(pa.add(o + 8)), _mm256_loadu_ps(pb.add(o + 8))));
        }
        reduce(lo, hi) + tail(&a[..n], &b[..n], 16 * chunks)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot4(a: &[f32], b: [&[f32]; 4]) -> [f32; 4] {
        let n = a.len();
        assert!(b.iter().all(|x| x.len() >= n));
        let chunks = n / 16;
        let pa = a.as_ptr();
        let pb = b.map(|x| x.as_ptr());
        let mut lo = [_mm256_setzero_ps(); 4];
        let mut hi = [_mm256_setzero_ps(); 4];
        for c in 0..chunks {
            let o = 16 * c;
            let (x0, x1) = (_mm256_loadu_ps(pa.add(o)), _mm256_loadu_ps(pa.add(o + 8)));
            for i in 0..4 {
                lo[i] = _mm256_add_ps(lo[i], _mm256_mul_ps(x0, _mm256_loadu_ps(pb[i].add(o))));
                hi[i] = _mm256_add_ps(hi[i], _mm256_mul_ps(x1, _mm256_loadu_ps(pb[i].add(o + 8))));
            }
        }
        let mut out = [0f32; 4];
        for i in 0..4 {
            out[i] = reduce(lo[i], hi[i]) + tail(a, &b[i][..n], 16 * chunks);
        }
        out
    }
}

#[derive(Clone, Copy)]
pub(crate) struct DotKernel {
    #[cfg(target_arch = "x86_64")]
    avx2: bool,
}

impl DotKernel {
    pub fn detect() -> Self {
        Self {
            #[cfg(target_arch = "x86_64")]
            avx2: std::is_x86_feature_detected!("avx2"),
        }
    }

    #[cfg(test)]
    pub fn portable() -> Self {
        Self {
            #[cfg(target_arch = "x86_64")]
            avx2: false,
        }
    }

    #[inline]
    pub fn dot(&self, a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        #[cfg(target_arch = "x86_64")]
        if self.avx2 {
            // SAFETY: the CPU supports AVX2, checked in `detect`.
            return unsafe { avx2::dot(a, b) };
        }
        dot_lanes(a, b)
    }

    #[inline]
    pub fn dot4(&self, a: &[f32], b: [&[f32]; 4]) -> [f32; 4] {
        debug_assert!(b.iter().all(|x| x.len() == a.len()));
        #[cfg(target_arch = "x86_64")]
        if self.avx2 {
            // SAFETY: the CPU supports AVX2, checked in `detect`.
            return unsafe { avx2::dot4(a, b) };
        }
        dot4_lanes(a, b)
    }
}
