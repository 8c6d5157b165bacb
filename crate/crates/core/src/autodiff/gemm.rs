//! Small dense GEMM used by the convolution kernels.

const MR: usize = 2;
const NR: usize = 16;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Every output element is accumulated over `k` in ascending order from zero
/// and then added to `c`, whichever code path handles it, so results do not
/// depend on the blocking.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, b, c, true)
}

/// `c[m×n] = a[m×k] · b[k×n]`, overwriting `c`.
pub(crate) fn gemm_set(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, b, c, false)
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], add: bool) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("NR-wide");
                for (i, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + i) * k + p];
                    for j in 0..NR {
                        row[j] += av * brow[j];
                    }
                }
            }
            for (i, row) in acc.iter().enumerate() {
                let dst = &mut c[(i0 + i) * n + j0..(i0 + i) * n + j0 + NR];
                if add {
                    for j in 0..NR {
                        dst[j] += row[j];
                    }
                } else {
                    dst.copy_from_slice(row);
                }
            }
        }
        if n_full < n {
            edge(i0, i0 + MR, n_full, n, k, n, a, b, c, add);
        }
    }
    if m_full < m {
        edge(m_full, m, 0, n, k, n, a, b, c, add);
    }
}

#[allow(clippy::too_many_arguments)]
fn edge(
    i_lo: usize,
    i_hi: usize,
    j_lo: usize,
    j_hi: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    add: bool,
) {
    let width = j_hi - j_lo;
    let mut acc = vec![0.0; width];
    for i in i_lo..i_hi {
        acc.fill(0.0);
        for p in 0..k {
            let av = a[i * k + p];
            for (d, &bv) in acc.iter_mut().zip(&b[p * n + j_lo..p * n + j_hi]) {
                *d += av * bv;
            }
        }
        let dst = &mut c[i * n + j_lo..i * n + j_hi];
        if add {
            dst.iter_mut().zip(&acc).for_each(|(d, &s)| *d += s);
        } else {
            dst.copy_from_slice(&acc);
        }
    }
}

const NT_MR: usize = 2;
const NT_NR: usize = 4;
const LANES: usize = 2;

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`: every output is a dot product of two
/// contiguous rows.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let k_full = k - k % LANES;
    let mut i0 = 0;
    while i0 < m {
        let mr = NT_MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let nr = NT_NR.min(n - j0);
            if mr == NT_MR && nr == NT_NR {
                let mut acc = [[[0.0f64; LANES]; NT_NR]; NT_MR];
                for p in (0..k_full).step_by(LANES) {
                    let ar: [&[f64; LANES]; NT_MR] = std::array::from_fn(|i| {
                        a[(i0 + i) * k + p..(i0 + i) * k + p + LANES].try_into().expect("lanes")
                    });
                    let br: [&[f64; LANES]; NT_NR] = std::array::from_fn(|j| {
                        b[(j0 + j) * k + p..(j0 + j) * k + p + LANES].try_into().expect("lanes")
                    });
                    for i in 0..NT_MR {
                        for j in 0..NT_NR {
                            for l in 0..LANES {
                                acc[i][j][l] += ar[i][l] * br[j][l];
                            }
                        }
                    }
                }
                for i in 0..NT_MR {
                    for j in 0..NT_NR {
                        let tail: f64 = (k_full..k).map(|p| a[(i0 + i) * k + p] * b[(j0 + j) * k + p]).sum();
                        c[(i0 + i) * n + j0 + j] += acc[i][j].iter().sum::<f64>() + tail;
                    }
                }
            } else {
                for i in i0..i0 + mr {
                    for j in j0..j0 + nr {
                        c[i * n + j] += dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
                    }
                }
            }
            j0 += nr;
        }
        i0 += mr;
    }
}

/// Dot product with the same lane split as the blocked path of
/// [`gemm_nt_acc`].
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let k_full = x.len() - x.len() % LANES;
    let mut acc = [0.0f64; LANES];
    for p in (0..k_full).step_by(LANES) {
        for l in 0..LANES {
            acc[l] += x[p + l] * y[p + l];
        }
    }
    let tail: f64 = (k_full..x.len()).map(|p| x[p] * y[p]).sum();
    acc.iter().sum::<f64>() + tail
}

/// Row-major transpose of an `rows×cols` matrix.
pub(crate) fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn matches_naive_on_ragged_sizes() {
        for &(m, k, n) in &[(1, 1, 1), (4, 3, 8), (5, 7, 9), (16, 144, 37), (3, 2, 20)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 13) as f64) * 0.5).collect();
            let mut c = vec![0.0; m * n];
            gemm_acc(m, k, n, &a, &b, &mut c);
            assert_eq!(c, naive(m, k, n, &a, &b), "{m}×{k}×{n}");
            let mut c2 = vec![1.0; m * n];
            gemm_set(m, k, n, &a, &b, &mut c2);
            assert_eq!(c2, c);
            let bt = transpose(k, n, &b);
            let mut c3 = vec![0.0; m * n];
            gemm_nt_acc(m, k, n, &a, &bt, &mut c3);
            assert_eq!(c3, c, "nt {m}×{k}×{n}");
        }
    }
}
