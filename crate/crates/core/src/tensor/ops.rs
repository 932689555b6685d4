use crate::error::{dim_err, Error, Result};

use super::Tensor;

/// C = alpha * op(A) * op(B) + beta * C, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // op(A) is m×k; stored either as m×k (rs=k, cs=1) or k×m (rs=1, cs=m).
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths are checked above; strides address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data(),
            false,
            &other.data(),
            false,
            &mut out,
            0.0,
        );
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                let da = a.requires_grad().then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &b.data(), true, &mut da, 0.0);
                    da
                });
                let db = b.requires_grad().then(|| {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &a.data(), true, g, false, &mut db, 0.0);
                    db
                });
                vec![da, db]
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let d = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same("add", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same("sub", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same("mul", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                let da = a
                    .requires_grad()
                    .then(|| g.iter().zip(b.data().iter()).map(|(g, b)| g * b).collect());
                let db = b
                    .requires_grad()
                    .then(|| g.iter().zip(a.data().iter()).map(|(g, a)| g * a).collect());
                vec![da, db]
            },
        ))
    }

    /// Adds a length-`n` vector to every row of an `m×n` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if bias.numel() != n {
            return Err(dim_err("add_row", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b.iter()).for_each(|(x, b)| *x += b);
        }
        drop(b);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), bias.clone()],
            move |g| {
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                vec![Some(g.to_vec()), Some(db)]
            },
        ))
    }

    /// Scales row `i` of an `m×n` tensor by `col[i]` (`col` has `m` elements).
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if col.numel() != m {
            return Err(dim_err("mul_col", self.shape(), col.shape()));
        }
        let mut out = self.to_vec();
        {
            let c = col.data();
            for (row, s) in out.chunks_mut(n.max(1)).zip(c.iter()) {
                row.iter_mut().for_each(|x| *x *= s);
            }
        }
        let (x, c) = (self.clone(), col.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), col.clone()],
            move |g| {
                let dx = x.requires_grad().then(|| {
                    let cd = c.data();
                    let mut dx = g.to_vec();
                    for (row, s) in dx.chunks_mut(n.max(1)).zip(cd.iter()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    dx
                });
                let dc = c.requires_grad().then(|| {
                    let xd = x.data();
                    (0..m)
                        .map(|i| (0..n).map(|j| g[i * n + j] * xd[i * n + j]).sum())
                        .collect()
                });
                vec![dx, dc]
            },
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n.max(1) as f64;
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] / n.max(1) as f64; n])]
        })
    }

    /// Row sums of an `m×n` tensor, shaped `m×1`.
    pub fn sum_cols(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let out = self
            .data()
            .chunks(n.max(1))
            .take(m)
            .map(|r| r.iter().sum())
            .collect();
        Ok(Tensor::from_op(
            vec![m, 1],
            out,
            vec![self.clone()],
            move |g| {
                let mut dx = Vec::with_capacity(m * n);
                for gi in g {
                    dx.extend(std::iter::repeat_n(*gi, n));
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Column means of an `m×n` tensor, shaped `1×n`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if m == 0 {
            return Err(Error::Usage("mean_rows of an empty tensor".into()));
        }
        let mut out = vec![0.0; n];
        for row in self.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(Tensor::from_op(
            vec![1, n],
            out,
            vec![self.clone()],
            move |g| {
                let row: Vec<f64> = g.iter().map(|v| v / m as f64).collect();
                vec![Some(row.repeat(m))]
            },
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mx = (0..len)
                    .map(|i| x[idx(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..len {
                    let e = (x[idx(i)] - mx).exp();
                    y[idx(i)] = e;
                    s += e;
                }
                for i in 0..len {
                    y[idx(i)] /= s;
                }
            }
        }
        drop(x);
        let yc = y.clone();
        Ok(Tensor::from_op(shape, y, vec![self.clone()], move |g| {
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * len + i) * inner + j;
                    let dot: f64 = (0..len).map(|i| g[idx(i)] * yc[idx(i)]).sum();
                    for i in 0..len {
                        dx[idx(i)] = yc[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Mean token cross-entropy of `L×V` logits against `L` target ids.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (l, v) = self.dims2()?;
        if targets.len() != l {
            return Err(dim_err("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Parameter(format!(
                "target id {bad} outside vocabulary of {v}"
            )));
        }
        let x = self.data();
        let mut probs = vec![0.0; l * v];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &x[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|r| (r - mx).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        drop(x);
        let denom = l.max(1) as f64;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![],
            vec![loss / denom],
            vec![self.clone()],
            move |g| {
                let mut dx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * v + t] -= 1.0;
                }
                dx.iter_mut().for_each(|d| *d *= g[0] / denom);
                vec![Some(dx)]
            },
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(dim_err("layer_norm", self.shape(), gamma.shape()));
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                y[i * n + j] = h * gm[j] + bt[j];
            }
        }
        drop((x, gm, bt));
        let g_t = gamma.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let gm = g_t.data();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let k = i * n + j;
                        let dh = g[k] * gm[j];
                        s1 += dh;
                        s2 += dh * xhat[k];
                        dgamma[j] += g[k] * xhat[k];
                        dbeta[j] += g[k];
                    }
                    for j in 0..n {
                        let k = i * n + j;
                        let dh = g[k] * gm[j];
                        dx[k] = rstd[i] / n as f64 * (n as f64 * dh - s1 - xhat[k] * s2);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let x = self.to_vec();
        let out = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let dx = x
                .iter()
                .zip(g)
                .map(|(&v, &g)| {
                    let th = (C * (v + A * v * v * v)).tanh();
                    let d =
                        0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * C * (1.0 + 3.0 * A * v * v);
                    g * d
                })
                .collect();
            vec![Some(dx)]
        })
    }

    pub fn tanh(&self) -> Tensor {
        let y: Vec<f64> = self.data().iter().map(|v| v.tanh()).collect();
        let yc = y.clone();
        Tensor::from_op(self.shape().to_vec(), y, vec![self.clone()], move |g| {
            vec![Some(
                g.iter().zip(&yc).map(|(g, y)| g * (1.0 - y * y)).collect(),
            )]
        })
    }

    /// Depthwise convolution over rows of a `T×C` tensor with a `K×C`
    /// kernel, zero padding of `(K-1)/2` per side, so output is `T×C`.
    pub fn conv1d_depthwise(&self, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (t, c) = self.dims2()?;
        let (k, kc) = kernel.dims2()?;
        if kc != c || bias.numel() != c {
            return Err(dim_err("conv1d_depthwise", self.shape(), kernel.shape()));
        }
        if k % 2 == 0 {
            return Err(Error::Parameter(format!(
                "conv kernel size must be odd, got {k}"
            )));
        }
        let pad = (k - 1) / 2;
        let x = self.to_vec();
        let w = kernel.to_vec();
        let mut y = vec![0.0; t * c];
        {
            let b = bias.data();
            for ti in 0..t {
                let row = &mut y[ti * c..(ti + 1) * c];
                row.copy_from_slice(&b);
                for ki in 0..k {
                    let src = ti as isize + ki as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ci in 0..c {
                        row[ci] += w[ki * c + ci] * x[src * c + ci];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![t, c],
            y,
            vec![self.clone(), kernel.clone(), bias.clone()],
            move |g| {
                let mut dx = vec![0.0; t * c];
                let mut dw = vec![0.0; k * c];
                let mut db = vec![0.0; c];
                for ti in 0..t {
                    let grow = &g[ti * c..(ti + 1) * c];
                    db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    for ki in 0..k {
                        let src = ti as isize + ki as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ci in 0..c {
                            dx[src * c + ci] += grow[ci] * w[ki * c + ci];
                            dw[ki * c + ci] += grow[ci] * x[src * c + ci];
                        }
                    }
                }
                vec![Some(dx), Some(dw), Some(db)]
            },
        ))
    }

    /// Looks up rows of a `V×d` embedding table.
    pub fn embed(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = table.dims2()?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Parameter(format!(
                "token id {bad} outside table of {v} rows"
            )));
        }
        let tb = table.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tb[i * d..(i + 1) * d]);
        }
        drop(tb);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            out,
            vec![table.clone()],
            move |g| {
                let mut dt = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                vec![Some(dt)]
            },
        ))
    }

    /// Selects rows `idx` (in the given order).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Usage(format!("row {bad} out of range for {m} rows")));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        drop(x);
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), n],
            out,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += g[r * n + j];
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Inverse of [`Tensor::gather_rows`]: places row `r` at `idx[r]` in a
    /// zero tensor with `rows` rows.
    pub fn scatter_rows(&self, idx: &[usize], rows: usize) -> Result<Tensor> {
        let (k, n) = self.dims2()?;
        if idx.len() != k {
            return Err(dim_err("scatter_rows", self.shape(), &[idx.len()]));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Usage(format!(
                "row {bad} out of range for {rows} rows"
            )));
        }
        let x = self.data();
        let mut out = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&x[r * n..(r + 1) * n]);
        }
        drop(x);
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![rows, n],
            out,
            vec![self.clone()],
            move |g| {
                let mut dx = Vec::with_capacity(k * n);
                for &i in &idx {
                    dx.extend_from_slice(&g[i * n..(i + 1) * n]);
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Columns `start..start+len` of an `m×n` tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        if start + len > n {
            return Err(dim_err("narrow_cols", self.shape(), &[start, len]));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![m, len],
            out,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (m, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pm != m {
                return Err(dim_err("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let d = p.data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(Tensor::from_op(
            vec![m, total],
            out,
            parts.to_vec(),
            move |g| {
                let mut off = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        off += w;
                        Some(d)
                    })
                    .collect()
            },
        ))
    }

    /// Concatenates 2-D tensors with equal column counts along rows.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (_, n) = first.dims2()?;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pn != n {
                return Err(dim_err("concat_rows", first.shape(), p.shape()));
            }
            out.extend_from_slice(&p.data());
            sizes.push(pm * n);
        }
        let rows = out.len() / n.max(1);
        Ok(Tensor::from_op(
            vec![rows, n],
            out,
            parts.to_vec(),
            move |g| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let d = g[off..off + s].to_vec();
                        off += s;
                        Some(d)
                    })
                    .collect()
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(dim_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(dim_err("mul_scalar_tensor", self.shape(), s.shape()));
        }
        let sv = s.item();
        let out = self.data().iter().map(|v| v * sv).collect();
        let (x, sc) = (self.clone(), s.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), s.clone()],
            move |g| {
                let dx = x
                    .requires_grad()
                    .then(|| g.iter().map(|v| v * sv).collect());
                let ds = sc
                    .requires_grad()
                    .then(|| vec![g.iter().zip(x.data().iter()).map(|(g, x)| g * x).sum()]);
                vec![dx, ds]
            },
        ))
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub(crate) fn straight_through(hard: Vec<f64>, soft: &Tensor) -> Tensor {
        debug_assert_eq!(hard.len(), soft.numel());
        Tensor::from_op(soft.shape().to_vec(), hard, vec![soft.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        check_same("max_abs_diff", self, other)?;
        Ok(self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}
