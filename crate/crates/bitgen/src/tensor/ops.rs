//! Operation set for the autograd engine: exactly what the backbone and
//! diffusion head need, each with an analytic backward checked against
//! finite differences in the test suite.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Finite stand-in for the mask's -inf entries; added pre-softmax.
pub const MASK_NEG: f64 = -1e9;

fn mm<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            let orow = &mut out[i * r..(i + 1) * r];
            for j in 0..r {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
    out
}

// out[p×r] = a[p×q] · b[r×q]^T
fn mm_a_bt<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            let mut acc = T::zero();
            for k in 0..q {
                acc = acc + arow[k] * brow[k];
            }
            out[i * r + j] = acc;
        }
    }
    out
}

// out[q×r] = a[p×q]^T · b[p×r]
fn mm_at_b<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); q * r];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[i * r..(i + 1) * r];
            let orow = &mut out[k * r..(k + 1) * r];
            for j in 0..r {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    fn check_2d(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op}: expected 2-D tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (p, q) = self.check_2d("matmul")?;
        let (q2, r) = other.check_2d("matmul")?;
        if q != q2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree ({p}x{q}) . ({q2}x{r})"
            )));
        }
        let out = {
            let a = self.0.data.borrow();
            let b = other.0.data.borrow();
            mm(&a, &b, p, q, r)
        };
        if self.requires_grad() || other.requires_grad() {
            let a = self.clone();
            let b = other.clone();
            Ok(Tensor::from_op(
                vec![p, r],
                out,
                vec![self.clone(), other.clone()],
                Box::new(move |g| {
                    if a.requires_grad() {
                        let bd = b.0.data.borrow();
                        let da = mm_a_bt(g, &bd, p, r, q);
                        a.accumulate_grad(&da);
                    }
                    if b.requires_grad() {
                        let ad = a.0.data.borrow();
                        let db = mm_at_b(&ad, g, p, q, r);
                        b.accumulate_grad(&db);
                    }
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![p, r], out))
        }
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.check_2d("transpose")?;
        let data = self.0.data.borrow();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = data[i * c + j];
            }
        }
        drop(data);
        if self.requires_grad() {
            let a = self.clone();
            Ok(Tensor::from_op(
                vec![c, r],
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let mut da = vec![T::zero(); r * c];
                    for j in 0..c {
                        for i in 0..r {
                            da[i * c + j] = g[j * r + i];
                        }
                    }
                    a.accumulate_grad(&da);
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![c, r], out))
        }
    }

    fn binary_elementwise(
        &self,
        other: &Tensor<T>,
        op: &str,
        f: impl Fn(T, T) -> T,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &[T]) + 'static,
    ) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out: Vec<T> = {
            let a = self.0.data.borrow();
            let b = other.0.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = self.shape().to_vec();
        if self.requires_grad() || other.requires_grad() {
            let a = self.clone();
            let b = other.clone();
            Ok(Tensor::from_op(
                shape,
                out,
                vec![self.clone(), other.clone()],
                Box::new(move |g| backward(&a, &b, g)),
            ))
        } else {
            Ok(Tensor::constant(shape, out))
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "add", |x, y| x + y, |a, b, g| {
            a.accumulate_grad(g);
            b.accumulate_grad(g);
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "sub", |x, y| x - y, |a, b, g| {
            a.accumulate_grad(g);
            if b.requires_grad() {
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                b.accumulate_grad(&neg);
            }
        })
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "mul", |x, y| x * y, |a, b, g| {
            if a.requires_grad() {
                let bd = b.0.data.borrow();
                let da: Vec<T> = g.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect();
                drop(bd);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.0.data.borrow();
                let db: Vec<T> = g.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect();
                drop(ad);
                b.accumulate_grad(&db);
            }
        })
    }

    /// Add a length-`c` bias vector to every row of a `[r x c]` tensor.
    pub fn add_row_broadcast(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, c) = self.check_2d("add_row_broadcast")?;
        if bias.numel() != c {
            return Err(Error::Shape(format!(
                "add_row_broadcast: bias has {} elements, rows have {c}",
                bias.numel()
            )));
        }
        let out: Vec<T> = {
            let a = self.0.data.borrow();
            let b = bias.0.data.borrow();
            a.iter()
                .enumerate()
                .map(|(i, &x)| x + b[i % c])
                .collect()
        };
        if self.requires_grad() || bias.requires_grad() {
            let a = self.clone();
            let b = bias.clone();
            Ok(Tensor::from_op(
                vec![r, c],
                out,
                vec![self.clone(), bias.clone()],
                Box::new(move |g| {
                    a.accumulate_grad(g);
                    if b.requires_grad() {
                        let mut db = vec![T::zero(); c];
                        for (i, &x) in g.iter().enumerate() {
                            db[i % c] = db[i % c] + x;
                        }
                        b.accumulate_grad(&db);
                    }
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![r, c], out))
        }
    }

    /// Tile a length-`c` vector into `[n x c]`.
    pub fn repeat_rows(&self, n: usize) -> Result<Tensor<T>> {
        let c = self.numel();
        let out: Vec<T> = {
            let a = self.0.data.borrow();
            let mut v = Vec::with_capacity(n * c);
            for _ in 0..n {
                v.extend_from_slice(&a);
            }
            v
        };
        if self.requires_grad() {
            let a = self.clone();
            Ok(Tensor::from_op(
                vec![n, c],
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let mut da = vec![T::zero(); c];
                    for (i, &x) in g.iter().enumerate() {
                        da[i % c] = da[i % c] + x;
                    }
                    a.accumulate_grad(&da);
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![n, c], out))
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let f = T::from_f64(factor);
        let out: Vec<T> = self.0.data.borrow().iter().map(|&x| x * f).collect();
        let shape = self.shape().to_vec();
        if self.requires_grad() {
            let a = self.clone();
            Tensor::from_op(
                shape,
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let da: Vec<T> = g.iter().map(|&x| x * f).collect();
                    a.accumulate_grad(&da);
                }),
            )
        } else {
            Tensor::constant(shape, out)
        }
    }

    pub fn silu(&self) -> Tensor<T> {
        let out: Vec<T> = self
            .0
            .data
            .borrow()
            .iter()
            .map(|&x| {
                let s = T::one() / (T::one() + (-x).exp());
                x * s
            })
            .collect();
        let shape = self.shape().to_vec();
        if self.requires_grad() {
            let a = self.clone();
            Tensor::from_op(
                shape,
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let ad = a.0.data.borrow();
                    let da: Vec<T> = g
                        .iter()
                        .zip(ad.iter())
                        .map(|(&g, &x)| {
                            let s = T::one() / (T::one() + (-x).exp());
                            g * (s * (T::one() + x * (T::one() - s)))
                        })
                        .collect();
                    drop(ad);
                    a.accumulate_grad(&da);
                }),
            )
        } else {
            Tensor::constant(shape, out)
        }
    }

    pub fn tanh_act(&self) -> Tensor<T> {
        let out: Vec<T> = self.0.data.borrow().iter().map(|&x| x.tanh()).collect();
        let shape = self.shape().to_vec();
        if self.requires_grad() {
            let a = self.clone();
            let saved = out.clone();
            Tensor::from_op(
                shape,
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let da: Vec<T> = g
                        .iter()
                        .zip(saved.iter())
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect();
                    a.accumulate_grad(&da);
                }),
            )
        } else {
            Tensor::constant(shape, out)
        }
    }

    /// Per-last-axis normalization to zero mean, unit variance. No learned
    /// affine; modulation supplies scale and shift where needed.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor<T>> {
        let (rows, c) = match self.shape() {
            [c] => (1usize, *c),
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("layer_norm: rank {} unsupported", s.len()))),
        };
        if c < 1 {
            return Err(Error::Shape("layer_norm: empty last axis".into()));
        }
        let eps_t = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let data = self.0.data.borrow();
        let mut out = vec![T::zero(); rows * c];
        let mut inv_std = vec![T::zero(); rows];
        for i in 0..rows {
            let row = &data[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for &x in row {
                mean = mean + x;
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for &x in row {
                let d = x - mean;
                var = var + d * d;
            }
            var = var * inv_c;
            let s = (var + eps_t).sqrt();
            inv_std[i] = T::one() / s;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv_std[i];
            }
        }
        drop(data);
        let shape = self.shape().to_vec();
        if self.requires_grad() {
            let a = self.clone();
            let normed = out.clone();
            Ok(Tensor::from_op(
                shape,
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let mut da = vec![T::zero(); rows * c];
                    for i in 0..rows {
                        let y = &normed[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mut mean_g = T::zero();
                        let mut mean_gy = T::zero();
                        for j in 0..c {
                            mean_g = mean_g + gr[j];
                            mean_gy = mean_gy + gr[j] * y[j];
                        }
                        mean_g = mean_g * inv_c;
                        mean_gy = mean_gy * inv_c;
                        for j in 0..c {
                            da[i * c + j] = (gr[j] - mean_g - y[j] * mean_gy) * inv_std[i];
                        }
                    }
                    a.accumulate_grad(&da);
                }),
            ))
        } else {
            Ok(Tensor::constant(shape, out))
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (rows, c) = self.check_2d("softmax_rows")?;
        let data = self.0.data.borrow();
        let mut out = vec![T::zero(); rows * c];
        for i in 0..rows {
            let row = &data[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut sum = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for j in 0..c {
                out[i * c + j] = out[i * c + j] * inv;
            }
        }
        drop(data);
        if self.requires_grad() {
            let a = self.clone();
            let y = out.clone();
            Ok(Tensor::from_op(
                vec![rows, c],
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let mut da = vec![T::zero(); rows * c];
                    for i in 0..rows {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mut dot = T::zero();
                        for j in 0..c {
                            dot = dot + yr[j] * gr[j];
                        }
                        for j in 0..c {
                            da[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    a.accumulate_grad(&da);
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![rows, c], out))
        }
    }

    /// Multiply each row by a fixed (non-differentiated) factor.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Tensor<T>> {
        let (rows, c) = self.check_2d("scale_rows")?;
        if factors.len() != rows {
            return Err(Error::Shape(format!(
                "scale_rows: {} factors for {rows} rows",
                factors.len()
            )));
        }
        let fs: Vec<T> = factors.iter().map(|&f| T::from_f64(f)).collect();
        let out: Vec<T> = {
            let a = self.0.data.borrow();
            a.iter()
                .enumerate()
                .map(|(i, &x)| x * fs[i / c])
                .collect()
        };
        if self.requires_grad() {
            let a = self.clone();
            Ok(Tensor::from_op(
                vec![rows, c],
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let da: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * fs[i / c])
                        .collect();
                    a.accumulate_grad(&da);
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![rows, c], out))
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (rows, c) = self.check_2d("slice_rows")?;
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows: [{start}, {start}+{len}) out of {rows} rows"
            )));
        }
        let out = self.0.data.borrow()[start * c..(start + len) * c].to_vec();
        if self.requires_grad() {
            let a = self.clone();
            Ok(Tensor::from_op(
                vec![len, c],
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let mut da = vec![T::zero(); rows * c];
                    da[start * c..(start + len) * c].copy_from_slice(g);
                    a.accumulate_grad(&da);
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![len, c], out))
        }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (rows, c) = self.check_2d("slice_cols")?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {start}+{len}) out of {c} cols"
            )));
        }
        let data = self.0.data.borrow();
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&data[i * c + start..i * c + start + len]);
        }
        drop(data);
        if self.requires_grad() {
            let a = self.clone();
            Ok(Tensor::from_op(
                vec![rows, len],
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let mut da = vec![T::zero(); rows * c];
                    for i in 0..rows {
                        da[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    a.accumulate_grad(&da);
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![rows, len], out))
        }
    }

    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no inputs".into()));
        }
        let c = parts[0].check_2d("concat_rows")?.1;
        let mut total = 0usize;
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, pc) = p.check_2d("concat_rows")?;
            if pc != c {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {pc} vs {c}"
                )));
            }
            row_counts.push(r);
            total += r;
        }
        let mut out = Vec::with_capacity(total * c);
        for p in parts {
            out.extend_from_slice(&p.0.data.borrow());
        }
        if parts.iter().any(|p| p.requires_grad()) {
            let owned: Vec<Tensor<T>> = parts.to_vec();
            let owned2 = owned.clone();
            Ok(Tensor::from_op(
                vec![total, c],
                out,
                owned,
                Box::new(move |g| {
                    let mut offset = 0usize;
                    for (p, &r) in owned2.iter().zip(row_counts.iter()) {
                        p.accumulate_grad(&g[offset * c..(offset + r) * c]);
                        offset += r;
                    }
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![total, c], out))
        }
    }

    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        }
        let rows = parts[0].check_2d("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (r, pc) = p.check_2d("concat_cols")?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row mismatch {r} vs {rows}"
                )));
            }
            widths.push(pc);
            total += pc;
        }
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0usize;
        for (p, &w) in parts.iter().zip(widths.iter()) {
            let data = p.0.data.borrow();
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        if parts.iter().any(|p| p.requires_grad()) {
            let owned: Vec<Tensor<T>> = parts.to_vec();
            let owned2 = owned.clone();
            let widths2 = widths.clone();
            Ok(Tensor::from_op(
                vec![rows, total],
                out,
                owned,
                Box::new(move |g| {
                    let mut offset = 0usize;
                    for (p, &w) in owned2.iter().zip(widths2.iter()) {
                        if p.requires_grad() {
                            let mut dp = vec![T::zero(); rows * w];
                            for i in 0..rows {
                                dp[i * w..(i + 1) * w].copy_from_slice(
                                    &g[i * total + offset..i * total + offset + w],
                                );
                            }
                            p.accumulate_grad(&dp);
                        }
                        offset += w;
                    }
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![rows, total], out))
        }
    }

    /// Rotary position encoding over pairs of channels. Row `i` uses absolute
    /// position `offset + i`; the backward pass is the inverse rotation.
    pub fn rope(&self, offset: usize, base: f64) -> Result<Tensor<T>> {
        let (rows, c) = self.check_2d("rope")?;
        if c % 2 != 0 {
            return Err(Error::Shape(format!("rope: channel count {c} must be even")));
        }
        let half = c / 2;
        // Precompute cos/sin per (row, pair) in f64 so both dtypes share angles.
        let mut cosv = vec![T::zero(); rows * half];
        let mut sinv = vec![T::zero(); rows * half];
        for i in 0..rows {
            let pos = (offset + i) as f64;
            for j in 0..half {
                let inv_freq = base.powf(-2.0 * j as f64 / c as f64);
                let theta = pos * inv_freq;
                cosv[i * half + j] = T::from_f64(theta.cos());
                sinv[i * half + j] = T::from_f64(theta.sin());
            }
        }
        let data = self.0.data.borrow();
        let mut out = vec![T::zero(); rows * c];
        for i in 0..rows {
            for j in 0..half {
                let x0 = data[i * c + 2 * j];
                let x1 = data[i * c + 2 * j + 1];
                let cs = cosv[i * half + j];
                let sn = sinv[i * half + j];
                out[i * c + 2 * j] = x0 * cs - x1 * sn;
                out[i * c + 2 * j + 1] = x0 * sn + x1 * cs;
            }
        }
        drop(data);
        if self.requires_grad() {
            let a = self.clone();
            Ok(Tensor::from_op(
                vec![rows, c],
                out,
                vec![self.clone()],
                Box::new(move |g| {
                    let mut da = vec![T::zero(); rows * c];
                    for i in 0..rows {
                        for j in 0..half {
                            let g0 = g[i * c + 2 * j];
                            let g1 = g[i * c + 2 * j + 1];
                            let cs = cosv[i * half + j];
                            let sn = sinv[i * half + j];
                            da[i * c + 2 * j] = g0 * cs + g1 * sn;
                            da[i * c + 2 * j + 1] = -g0 * sn + g1 * cs;
                        }
                    }
                    a.accumulate_grad(&da);
                }),
            ))
        } else {
            Ok(Tensor::constant(vec![rows, c], out))
        }
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &x in self.0.data.borrow().iter() {
            acc = acc + x;
        }
        let n = self.numel();
        if self.requires_grad() {
            let a = self.clone();
            Tensor::from_op(
                vec![1],
                vec![acc],
                vec![self.clone()],
                Box::new(move |g| {
                    let da = vec![g[0]; n];
                    a.accumulate_grad(&da);
                }),
            )
        } else {
            Tensor::constant(vec![1], vec![acc])
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let out = self.0.data.borrow().clone();
        if self.requires_grad() {
            let a = self.clone();
            Ok(Tensor::from_op(
                shape,
                out,
                vec![self.clone()],
                Box::new(move |g| a.accumulate_grad(g)),
            ))
        } else {
            Ok(Tensor::constant(shape, out))
        }
    }
}

/// Scaled dot-product attention with an additive mask:
/// `softmax(q k^T / sqrt(d_k) + mask) v`.
///
/// Rows whose mask row is entirely at the -inf sentinel output zero instead
/// of propagating NaN; this cannot occur under a well-formed block-causal
/// mask but keeps the kernel total.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (lq, dk) = match q.shape() {
        [l, d] => (*l, *d),
        s => return Err(Error::Shape(format!("masked_attention: q shape {s:?}"))),
    };
    match mask.shape() {
        [a, b] if a == b => {}
        s => {
            return Err(Error::Shape(format!(
                "masked_attention: mask must be square, got {s:?}"
            )))
        }
    }
    if mask.shape() != [lq, lq] {
        return Err(Error::Shape(format!(
            "masked_attention: mask shape {:?} vs L={lq}",
            mask.shape()
        )));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let scores = q.matmul(&k.transpose()?)?.scale(scale).add(mask)?;
    let attn = scores.softmax_rows()?;
    // Zero out rows with no live entry.
    let live: Vec<f64> = {
        let md = mask.0.data.borrow();
        (0..lq)
            .map(|i| {
                let row = &md[i * lq..(i + 1) * lq];
                if row.iter().any(|&x| x.to_f64() > MASK_NEG / 2.0) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let attn = if live.iter().any(|&x| x == 0.0) {
        attn.scale_rows(&live)?
    } else {
        attn
    };
    attn.matmul(v)
}
