//! Fixed sinusoidal codes.

/// 1-D sinusoidal code of `position` with `dim` entries: `[sin(p·ω_i)…, cos(p·ω_i)…]`.
pub fn sincos_1d(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (position * omega).sin();
        out[half + i] = (position * omega).cos();
    }
    out
}

/// 2-D code for a `grid × grid` patch layout, one row of `dim` per patch in row-major order.
/// The first half of each row encodes the column, the second half the row.
pub fn sincos_2d(grid: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::with_capacity(grid * grid);
    for y in 0..grid {
        for x in 0..grid {
            let mut v = sincos_1d(x as f64, dim / 2);
            v.extend(sincos_1d(y as f64, dim / 2));
            rows.push(v);
        }
    }
    rows
}
