use candle_core::{DType, Tensor};

use crate::error::Result;
use crate::nn::constant;

/// Fixed sinusoidal encoding of `(x, y, t)` for a `(T, h*w, dim)` token map.
///
/// Spatial coordinates are normalized to `[0, 2π]` so that levels of
/// different resolution agree at the same image location; time uses the
/// raw frame index within the clip.
pub fn sinusoidal_3d(t: usize, h: usize, w: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let spatial = 2 * (dim / 6);
    let temporal = dim - 2 * spatial;
    let mut out = vec![0.0; t * h * w * dim];
    let encode = |dst: &mut [f64], value: f64, width: usize| {
        for i in 0..width / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / width as f64);
            dst[2 * i] = (value / freq).sin();
            dst[2 * i + 1] = (value / freq).cos();
        }
    };
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let base = ((ti * h + y) * w + x) * dim;
                let row = &mut out[base..base + dim];
                let xn = (x as f64 + 0.5) / w as f64 * std::f64::consts::TAU;
                let yn = (y as f64 + 0.5) / h as f64 * std::f64::consts::TAU;
                encode(&mut row[..spatial], xn, spatial);
                encode(&mut row[spatial..2 * spatial], yn, spatial);
                encode(&mut row[2 * spatial..], ti as f64, temporal);
            }
        }
    }
    constant(out, &[t, h * w, dim], dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;

    #[test]
    fn frames_differ_only_in_temporal_block() {
        let pe = to_vec_f64(&sinusoidal_3d(2, 2, 2, 64, DType::F64).unwrap()).unwrap();
        let spatial = 2 * (64 / 6);
        for p in 0..4 {
            let a = &pe[p * 64..(p + 1) * 64];
            let b = &pe[(4 + p) * 64..(5 + p) * 64];
            assert_eq!(&a[..2 * spatial], &b[..2 * spatial]);
            assert_ne!(&a[2 * spatial..], &b[2 * spatial..]);
        }
    }
}
