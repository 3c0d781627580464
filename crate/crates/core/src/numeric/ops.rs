//! Differentiable elementwise, reduction and linear-algebra operations.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(format!("{op}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Numerically stable softmax of `logits / temperature` over contiguous rows
/// of length `width`, written into `out`.
pub(crate) fn softmax_rows(logits: &[f64], width: usize, temperature: f64, out: &mut [f64]) {
    for (row, o) in logits.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (v, x) in o.iter_mut().zip(row) {
            *v = ((x - max) / temperature).exp();
            sum += *v;
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
}

/// Softmax of a vector with a temperature, computed after subtracting the max.
pub fn softmax(v: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = vec![0.0; v.len()];
    softmax_rows(v.data(), v.len(), temperature, &mut out);
    Ok(Tensor::from_parts(v.shape().to_vec(), out))
}

impl<'t> Var<'t> {
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_keep = y.clone();
        self.tape().record(
            (*y).clone(),
            &[*self],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(y_keep.data())
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self, &other, "add")?;
        let (a, b) = (self.value(), other.value());
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.tape().record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[*self, other],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self, &other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.tape().record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[*self, other],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self, &other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.tape().record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[*self, other],
            Box::new(move |g, need| {
                let ga = need[0].then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect());
                let gb = need[1].then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        same_shape(self, &other, "div")?;
        let (a, b) = (self.value(), other.value());
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        Ok(self.tape().record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[*self, other],
            Box::new(move |g, need| {
                let ga = need[0].then(|| g.iter().zip(b.data()).map(|(g, y)| g / y).collect());
                let gb = need[1].then(|| {
                    g.iter()
                        .zip(a.data())
                        .zip(b.data())
                        .map(|((g, x), y)| -g * x / (y * y))
                        .collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Multiplies by a one-element tensor.
    pub fn mul_scalar_var(&self, s: Var<'t>) -> Result<Var<'t>> {
        if s.len() != 1 {
            return Err(Error::shape("mul_scalar_var needs a one-element factor"));
        }
        let (a, sv) = (self.value(), s.value());
        let k = sv.item();
        let out = a.map(|x| x * k);
        Ok(self.tape().record(
            out,
            &[*self, s],
            Box::new(move |g, need| {
                let ga = need[0].then(|| g.iter().map(|g| g * k).collect());
                let gs = need[1].then(|| vec![g.iter().zip(a.data()).map(|(g, x)| g * x).sum()]);
                vec![ga, gs]
            }),
        ))
    }

    /// Adds `row` (shape `[C]`) to every row of a tensor whose last extent is `C`.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let c = *a.shape().last().unwrap_or(&0);
        if r.shape() != [c] {
            return Err(Error::shape(format!("add_row: row {:?} vs last extent {c}", r.shape())));
        }
        let mut out = a.data().to_vec();
        for chunk in out.chunks_exact_mut(c) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        Ok(self.tape().record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[*self, row],
            Box::new(move |g, need| {
                let gr = need[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for chunk in g.chunks_exact(c) {
                        for (a, v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    acc
                });
                vec![Some(g.to_vec()), gr]
            }),
        ))
    }

    /// Multiplies every row of an `[N × C]` tensor by the matching entry of `col` (`[N]`).
    pub fn mul_col(&self, col: Var<'t>) -> Result<Var<'t>> {
        let (a, w) = (self.value(), col.value());
        let shape = a.shape().to_vec();
        if shape.len() != 2 || w.shape() != [shape[0]] {
            return Err(Error::shape(format!("mul_col: {shape:?} vs {:?}", w.shape())));
        }
        let c = shape[1];
        let mut out = a.data().to_vec();
        for (chunk, &k) in out.chunks_exact_mut(c).zip(w.data()) {
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.tape().record(
            Tensor::from_parts(shape, out),
            &[*self, col],
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    g.chunks_exact(c)
                        .zip(w.data())
                        .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
                        .collect()
                });
                let gw = need[1].then(|| {
                    g.chunks_exact(c)
                        .zip(a.data().chunks_exact(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect()
                });
                vec![ga, gw]
            }),
        ))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let a = self.value();
        self.tape().record(
            a.map(|x| x * k),
            &[*self],
            Box::new(move |g, _| vec![Some(g.iter().map(|g| g * k).collect())]),
        )
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        let a = self.value();
        self.tape()
            .record(a.map(|x| x + k), &[*self], Box::new(|g, _| vec![Some(g.to_vec())]))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// `x^p` for non-negative `x`; the derivative at `x = 0` is taken as 0 for `p > 1`.
    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(
            move |x| x.powf(p),
            move |x, _| {
                if x == 0.0 && p > 1.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// `x · sigmoid(x)`; smooth everywhere, so finite-difference checks hold.
    pub fn silu(&self) -> Var<'t> {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let a = self.value();
        let n = a.len();
        self.tape().record(
            Tensor::scalar(a.data().iter().sum()),
            &[*self],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        Ok(self.sum().scale(1.0 / n as f64))
    }

    /// Sums the last axis of a 2-D tensor: `[N × C] -> [N]`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape("sum_rows needs a 2-D tensor"));
        }
        let (n, c) = (a.shape()[0], a.shape()[1]);
        let out = a.data().chunks_exact(c.max(1)).map(|r| r.iter().sum()).collect();
        Ok(self.tape().record(
            Tensor::from_parts(vec![n], if c == 0 { vec![0.0; n] } else { out }),
            &[*self],
            Box::new(move |g, _| vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect())]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let t = a.reshape(shape)?;
        Ok(self.tape().record(t, &[*self], Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    /// `[N × K] · [K × M]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(format!("matmul: {:?} · {:?}", a.shape(), b.shape())));
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = matmul_raw(a.data(), b.data(), n, k, m);
        Ok(self.tape().record(
            Tensor::from_parts(vec![n, m], out),
            &[*self, other],
            Box::new(move |g, need| {
                // dA = G · Bᵀ, dB = Aᵀ · G
                let ga = need[0].then(|| {
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &b.data()[p * m..(p + 1) * m];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    ga
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = a.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape("transpose needs a 2-D tensor"));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        Ok(self.tape().record(
            a.transpose(),
            &[*self],
            Box::new(move |g, _| {
                let gt = Tensor::from_parts(vec![c, r], g.to_vec()).transpose();
                vec![Some(gt.into_data())]
            }),
        ))
    }

    /// Picks flat elements: output has shape `[indices.len()]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather index {bad} out of {n}")));
        }
        let idx = indices.to_vec();
        let out = idx.iter().map(|&i| a.data()[i]).collect();
        Ok(self.tape().record(
            Tensor::from_parts(vec![idx.len()], out),
            &[*self],
            Box::new(move |g, _| {
                let mut ga = vec![0.0; n];
                for (&i, v) in idx.iter().zip(g) {
                    ga[i] += v;
                }
                vec![Some(ga)]
            }),
        ))
    }

    /// Picks rows of a tensor viewed as `[N × C]` with `C` the last extent.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let c = *a
            .shape()
            .last()
            .ok_or_else(|| Error::shape("gather_rows on a scalar"))?;
        let n = a.len() / c.max(1);
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather_rows index {bad} out of {n}")));
        }
        let rows = rows.to_vec();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            out.extend_from_slice(&a.data()[r * c..(r + 1) * c]);
        }
        let total = a.len();
        Ok(self.tape().record(
            Tensor::from_parts(vec![rows.len(), c], out),
            &[*self],
            Box::new(move |g, _| {
                let mut ga = vec![0.0; total];
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in ga[r * c..(r + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *o += v;
                    }
                }
                vec![Some(ga)]
            }),
        ))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let lead = {
            let s = first.shape();
            s[..s.len() - 1].to_vec()
        };
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        for v in &values {
            if v.shape()[..v.rank() - 1] != lead[..] {
                return Err(Error::shape("concat_last: leading extents differ"));
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        Ok(first.tape().record(
            Tensor::from_parts(shape, out),
            parts,
            Box::new(move |g, need| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (pi, &w) in widths.iter().enumerate() {
                    grads.push(need[pi].then(|| {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        gp
                    }));
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat_first(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let tail = first.shape()[1..].to_vec();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut lead = 0;
        let mut out = Vec::new();
        let mut sizes = Vec::with_capacity(values.len());
        for v in &values {
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_first: trailing extents differ"));
            }
            lead += v.shape()[0];
            sizes.push(v.len());
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        Ok(first.tape().record(
            Tensor::from_parts(shape, out),
            parts,
            Box::new(move |g, need| {
                let mut offset = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let gp = need[i].then(|| g[offset..offset + s].to_vec());
                        offset += s;
                        gp
                    })
                    .collect()
            }),
        ))
    }

    /// Softmax over the last axis of `self / temperature`.
    pub fn softmax_last(&self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let a = self.value();
        let w = *a.shape().last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let mut out = vec![0.0; a.len()];
        softmax_rows(a.data(), w, temperature, &mut out);
        let y = Rc::new(Tensor::from_parts(a.shape().to_vec(), out));
        let yk = y.clone();
        Ok(self.tape().record(
            (*y).clone(),
            &[*self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), o) in g
                    .chunks_exact(w)
                    .zip(yk.data().chunks_exact(w))
                    .zip(gx.chunks_exact_mut(w))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot) / temperature;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Log-softmax over the last axis (temperature 1).
    pub fn log_softmax_last(&self) -> Result<Var<'t>> {
        let a = self.value();
        let w = *a
            .shape()
            .last()
            .ok_or_else(|| Error::shape("log_softmax of a scalar"))?;
        let mut out = vec![0.0; a.len()];
        let mut probs = vec![0.0; a.len()];
        for ((row, o), p) in a
            .data()
            .chunks_exact(w)
            .zip(out.chunks_exact_mut(w))
            .zip(probs.chunks_exact_mut(w))
        {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for ((o, p), x) in o.iter_mut().zip(p.iter_mut()).zip(row) {
                *o = x - lse;
                *p = o.exp();
            }
        }
        Ok(self.tape().record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[*self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, pr), o) in g.chunks_exact(w).zip(probs.chunks_exact(w)).zip(gx.chunks_exact_mut(w)) {
                    let s: f64 = gr.iter().sum();
                    for ((o, gv), pv) in o.iter_mut().zip(gr).zip(pr) {
                        *o = gv - pv * s;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let c = *a.shape().last().ok_or_else(|| Error::shape("normalize a scalar"))?;
        let norms: Vec<f64> = a
            .data()
            .chunks_exact(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let mut out = a.data().to_vec();
        for (r, n) in out.chunks_exact_mut(c).zip(&norms) {
            r.iter_mut().for_each(|v| *v /= n);
        }
        let y = Rc::new(Tensor::from_parts(a.shape().to_vec(), out));
        let yk = y.clone();
        Ok(self.tape().record(
            (*y).clone(),
            &[*self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for (((gr, yr), o), n) in g
                    .chunks_exact(c)
                    .zip(yk.data().chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                    .zip(&norms)
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in o.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `‖row‖_p` over the last axis, `p ≥ 1`. The gradient at a zero row is zero.
    pub fn pnorm_rows(&self, p: f64) -> Result<Var<'t>> {
        if !(p >= 1.0) {
            return Err(Error::invalid(format!("norm order must be ≥ 1, got {p}")));
        }
        let a = self.value();
        let c = *a.shape().last().ok_or_else(|| Error::shape("norm of a scalar"))?;
        let norms: Vec<f64> = a
            .data()
            .chunks_exact(c)
            .map(|r| {
                if p == 2.0 {
                    r.iter().map(|v| v * v).sum::<f64>().sqrt()
                } else {
                    r.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
                }
            })
            .collect();
        let n = norms.len();
        let nk = norms.clone();
        Ok(self.tape().record(
            Tensor::from_parts(vec![n], norms),
            &[*self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * c];
                for (((row, o), &nv), &gv) in a.data().chunks_exact(c).zip(gx.chunks_exact_mut(c)).zip(&nk).zip(g) {
                    if nv == 0.0 {
                        continue;
                    }
                    for (o, &x) in o.iter_mut().zip(row) {
                        // d‖x‖_p/dx_i = sign(x_i)|x_i|^{p-1} / ‖x‖_p^{p-1}
                        *o = gv * x.signum() * (x.abs() / nv).powf(p - 1.0);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}
