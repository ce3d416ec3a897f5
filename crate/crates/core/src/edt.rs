//! Exact squared Euclidean distance transform (separable lower-envelope
//! method), used for tracer radii and nearest-surface distances.

const BIG: f64 = 1e20;

/// 1D squared distance transform of sampled function `f` into `out`.
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -BIG;
    z[1] = BIG;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = -BIG;
                    z[1] = BIG;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = BIG;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        out[q] = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Squared distance from every voxel to the nearest `true` voxel of `mask`
/// over a `(d, h, w)` grid in z-major order. Voxels of an all-false mask
/// come back ≥ `1e20`.
pub fn squared_edt_3d(shape: (usize, usize, usize), mask: &[bool]) -> Vec<f64> {
    let (d, h, w) = shape;
    assert_eq!(mask.len(), d * h * w);
    let mut dist: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { BIG }).collect();

    // Along x.
    let mut line = vec![0.0f64; w.max(h).max(d)];
    let mut out_line = vec![0.0f64; w.max(h).max(d)];
    for z in 0..d {
        for y in 0..h {
            let base = (z * h + y) * w;
            line[..w].copy_from_slice(&dist[base..base + w]);
            dt_1d(&line[..w], &mut out_line[..w]);
            dist[base..base + w].copy_from_slice(&out_line[..w]);
        }
    }
    // Along y.
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = dist[(z * h + y) * w + x];
            }
            dt_1d(&line[..h], &mut out_line[..h]);
            for y in 0..h {
                dist[(z * h + y) * w + x] = out_line[y];
            }
        }
    }
    // Along z.
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = dist[(z * h + y) * w + x];
            }
            dt_1d(&line[..d], &mut out_line[..d]);
            for z in 0..d {
                dist[(z * h + y) * w + x] = out_line[z];
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_brute_force_on_random_mask() {
        let (d, h, w) = (5, 6, 7);
        let mut seed = 42u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 33) & 1 == 1
        };
        let mask: Vec<bool> = (0..d * h * w).map(|_| next()).collect();
        if !mask.iter().any(|&m| m) {
            return;
        }
        let got = squared_edt_3d((d, h, w), &mask);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut best = f64::INFINITY;
                    for zz in 0..d {
                        for yy in 0..h {
                            for xx in 0..w {
                                if mask[(zz * h + yy) * w + xx] {
                                    let dd = (z as f64 - zz as f64).powi(2)
                                        + (y as f64 - yy as f64).powi(2)
                                        + (x as f64 - xx as f64).powi(2);
                                    best = best.min(dd);
                                }
                            }
                        }
                    }
                    assert_eq!(got[(z * h + y) * w + x], best);
                }
            }
        }
    }

    #[test]
    fn zero_on_mask_voxels() {
        let mask = vec![false, true, false, false];
        let got = squared_edt_3d((1, 1, 4), &mask);
        assert_eq!(got, vec![1.0, 0.0, 1.0, 4.0]);
    }
}
