//! f64 matrix kernels with hand-written backward passes.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            data: data.iter().map(|v| *v as f64).collect(),
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| *v as f32).collect()
    }
}

/// `a (m x k) * b (k x n)`.
pub(crate) fn matmul(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T (k x m)^T * b (k x n)` without materializing the transpose.
pub(crate) fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.rows, b.rows);
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(m, n);
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a.data[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out.data[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub(crate) fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.cols);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out.data[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

pub(crate) fn add_bias(x: &mut Mat, b: &[f64]) {
    for r in 0..x.rows {
        for (v, bv) in x.row_mut(r).iter_mut().zip(b) {
            *v += bv;
        }
    }
}

pub(crate) fn col_sum(x: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; x.cols];
    for r in 0..x.rows {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn relu(x: &Mat) -> Mat {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Gradient through ReLU given its pre-activation.
pub(crate) fn relu_bwd(pre: &Mat, dy: &Mat) -> Mat {
    Mat {
        rows: dy.rows,
        cols: dy.cols,
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(p, d)| if *p > 0.0 { *d } else { 0.0 })
            .collect(),
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, LnCache) {
    let n = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..x.cols {
            let h = (row[c] - mean) * is;
            xhat.data[r * x.cols + c] = h;
            y.data[r * x.cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_bwd(cache: &LnCache, gain: &[f64], dy: &Mat) -> (Mat, Vec<f64>, Vec<f64>) {
    let (rows, cols) = (dy.rows, dy.cols);
    let n = cols as f64;
    let mut dx = Mat::zeros(rows, cols);
    let mut dg = vec![0.0; cols];
    let mut db = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..cols {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let is = cache.inv_std[r];
        for c in 0..cols {
            dx.data[r * cols + c] = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    (dx, dg, db)
}

/// Row-wise softmax; `causal` masks keys after the query position.
pub(crate) fn softmax_rows(s: &Mat, causal: bool) -> Mat {
    let mut p = Mat::zeros(s.rows, s.cols);
    for r in 0..s.rows {
        let limit = if causal { (r + 1).min(s.cols) } else { s.cols };
        let row = &s.row(r)[..limit];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (c, v) in row.iter().enumerate() {
            let e = (v - max).exp();
            p.data[r * s.cols + c] = e;
            z += e;
        }
        for c in 0..limit {
            p.data[r * s.cols + c] /= z;
        }
    }
    p
}

/// Gradient of row-wise softmax: `dS = P * (dP - rowsum(dP * P))`.
pub(crate) fn softmax_rows_bwd(p: &Mat, dp: &Mat) -> Mat {
    let mut ds = Mat::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        let pr = p.row(r);
        let dpr = dp.row(r);
        let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
        for c in 0..p.cols {
            ds.data[r * p.cols + c] = pr[c] * (dpr[c] - dot);
        }
    }
    ds
}

/// Fixed sinusoidal position code.
pub(crate) fn positional_encoding(len: usize, d: usize) -> Mat {
    let mut pe = Mat::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            pe.data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    #[test]
    fn transposed_products_agree() {
        let a = m(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
        let b = m(3, 4, &[1.0, 0.0, 2.0, -1.0, 0.5, 1.5, -0.5, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let at = m(2, 3, &[1.0, -1.0, 3.0, 2.0, 0.5, -2.0]);
        assert_eq!(matmul_tn(&a, &b), matmul(&at, &b));
        let bt_src = m(4, 3, &[1.0, 0.5, 1.0, 0.0, 1.5, 1.0, 2.0, -0.5, 1.0, -1.0, 2.0, 1.0]);
        let bt = m(3, 4, &[1.0, 0.0, 2.0, -1.0, 0.5, 1.5, -0.5, 2.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(matmul_nt(&at, &bt_src), matmul(&at, &bt));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = m(2, 2, &[1.0, 5.0, 1.0, 1.0]);
        let p = softmax_rows(&s, true);
        assert_eq!(p.data, vec![1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_output_is_normalized() {
        let x = m(1, 4, &[1.0, 2.0, 3.0, 6.0]);
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        let var: f64 = y.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
