//! Dense vector kernels.
//!
//! Squared Euclidean distance is evaluated in f32 lanes and flushed into an
//! f64 total every [`FLUSH`] elements, which keeps the inner loop
//! vectorizable while bounding accumulated rounding error on 32k-dim inputs.

const LANES: usize = 16;
const FLUSH: usize = 128;

/// Squared Euclidean distance. Panics in debug builds on length mismatch.
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut total = 0.0f64;
    let mut ca = a.chunks_exact(FLUSH);
    let mut cb = b.chunks_exact(FLUSH);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        let mut acc = [0.0f32; LANES];
        for (pa, pb) in xa.chunks_exact(LANES).zip(xb.chunks_exact(LANES)) {
            for l in 0..LANES {
                let d = pa[l] - pb[l];
                acc[l] += d * d;
            }
        }
        total += acc.iter().map(|&v| v as f64).sum::<f64>();
    }
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = (x - y) as f64;
        total += d * d;
    }
    total as f32
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut total = 0.0f64;
    let mut ca = a.chunks_exact(FLUSH);
    let mut cb = b.chunks_exact(FLUSH);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        let mut acc = [0.0f32; LANES];
        for (pa, pb) in xa.chunks_exact(LANES).zip(xb.chunks_exact(LANES)) {
            for l in 0..LANES {
                acc[l] += pa[l] * pb[l];
            }
        }
        total += acc.iter().map(|&v| v as f64).sum::<f64>();
    }
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        total += x as f64 * y as f64;
    }
    total
}

pub fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

/// Scales `v` to unit L2 norm in place. Zero vectors are left untouched;
/// returns whether the vector was non-zero.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / n) as f32;
        }
        true
    } else {
        false
    }
}
