//! Exact Euclidean distance transform (Felzenszwalb & Huttenlocher lower envelope
//! of parabolas, one separable pass per axis).

/// Distance reported for every pixel of a mask with no set pixel.
pub const NO_FEATURE_DISTANCE: f32 = 1.0e6;

const FAR: f64 = 1.0e20;

fn envelope_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let p = v[k];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // z[0] is -inf, so this never underflows.
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Squared distance from every pixel to the nearest set pixel of a row-major
/// `width x height` mask. `None` when the mask is empty.
pub fn squared_edt(mask: &[bool], width: usize, height: usize) -> Option<Vec<f64>> {
    assert_eq!(mask.len(), width * height, "mask size");
    if !mask.iter().any(|&b| b) {
        return None;
    }
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut grid: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        envelope_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = d[r];
        }
    }
    for r in 0..height {
        let row = &mut grid[r * width..(r + 1) * width];
        f[..width].copy_from_slice(row);
        envelope_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        row.copy_from_slice(&d[..width]);
    }
    Some(grid)
}

/// Euclidean distance to the nearest set pixel; [`NO_FEATURE_DISTANCE`] everywhere
/// when nothing is set.
pub fn euclidean_dt(mask: &[bool], width: usize, height: usize) -> Vec<f32> {
    match squared_edt(mask, width, height) {
        Some(sq) => sq.into_iter().map(|v| v.sqrt() as f32).collect(),
        None => vec![NO_FEATURE_DISTANCE; width * height],
    }
}
