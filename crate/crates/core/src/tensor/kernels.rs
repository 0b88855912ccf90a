//! Value-level kernels shared by the tape ops.

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` where `a` is `m×n` and `b` is `k×n`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// Row-wise softmax over the columns allowed by `mask` (all columns if
/// `None`), with max subtraction. Masked columns receive weight 0. A row
/// whose every column is masked comes back all-zero and is reported in the
/// returned flags.
pub fn masked_softmax_rows(x: &[f64], cols: usize, mask: Option<&[bool]>) -> (Vec<f64>, Vec<bool>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut degenerate = vec![false; rows];
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let max = (0..cols)
            .filter(|&j| allowed(j))
            .map(|j| xr[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            degenerate[r] = true;
            continue;
        }
        let mut z = 0.0;
        for j in 0..cols {
            if allowed(j) {
                let e = (xr[j] - max).exp();
                orow[j] = e;
                z += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    (out, degenerate)
}

/// Row-wise softmax normalised independently inside each column group.
/// `groups[j]` is the group of column `j`; groups need not be contiguous.
pub fn group_softmax_rows(x: &[f64], cols: usize, groups: &[usize], n_groups: usize) -> Vec<f64> {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut max = vec![f64::NEG_INFINITY; n_groups];
    let mut z = vec![0.0; n_groups];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        max.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
        z.iter_mut().for_each(|s| *s = 0.0);
        for (j, &g) in groups.iter().enumerate() {
            max[g] = max[g].max(xr[j]);
        }
        for (j, &g) in groups.iter().enumerate() {
            let e = (xr[j] - max[g]).exp();
            orow[j] = e;
            z[g] += e;
        }
        for (j, &g) in groups.iter().enumerate() {
            orow[j] /= z[g];
        }
    }
    out
}

/// Normalises each row to zero mean / unit variance (biased variance,
/// `LAYER_NORM_EPS` floor). Returns `(x_hat, inv_std)`.
pub fn normalize_rows(x: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

/// Causal 1-D convolution over rows (time) with left zero padding of `k-1`.
/// `x` is `t × c_in`, `kernel` is `k × c_in × c_out`, `bias` is `c_out`.
/// Kernel tap `k-1` multiplies the current step; tap 0 the oldest.
pub fn causal_conv(x: &[f64], kernel: &[f64], bias: &[f64], t: usize, c_in: usize, c_out: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * c_out];
    for s in 0..t {
        let orow = &mut out[s * c_out..(s + 1) * c_out];
        orow.copy_from_slice(bias);
        for tap in 0..k {
            // input index s - (k-1) + tap
            let Some(src) = (s + tap).checked_sub(k - 1) else {
                continue;
            };
            let xrow = &x[src * c_in..(src + 1) * c_in];
            let w = &kernel[tap * c_in * c_out..(tap + 1) * c_in * c_out];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in orow.iter_mut().zip(&w[ci * c_out..(ci + 1) * c_out]) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
