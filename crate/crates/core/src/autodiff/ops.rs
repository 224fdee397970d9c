use super::conv;
use super::{accumulate, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows/cols/strides of a row-major matrix, optionally viewed transposed.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Scalar> View<'a, T> {
    pub(crate) fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn maybe_t(self, yes: bool) -> Self {
        if yes {
            self.t()
        } else {
            self
        }
    }
}

/// `out ← a·b + beta·out` for row-major `out`.
pub(crate) fn gemm_into<T: Scalar>(a: View<T>, b: View<T>, beta: T, out: &mut [T]) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.len(), a.rows * b.cols);
    T::gemm(
        a.rows,
        a.cols,
        b.cols,
        T::one(),
        a.data,
        a.rs,
        a.cs,
        b.data,
        b.rs,
        b.cs,
        beta,
        out,
        b.cols as isize,
        1,
    );
}

pub(crate) fn mm<T: Scalar>(a: View<T>, b: View<T>) -> Vec<T> {
    let mut out = vec![T::zero(); a.rows * b.cols];
    gemm_into(a, b, T::zero(), &mut out);
    out
}

fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> Tape<T> {
    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `aᵀ·b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true, false)
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (ra, ca) = matrix_dims(&sa).ok_or_else(mismatch)?;
        let (rb, cb) = matrix_dims(&sb).ok_or_else(mismatch)?;
        let va = View::new(self.value(a).data(), ra, ca).maybe_t(trans_a);
        let vb = View::new(self.value(b).data(), rb, cb).maybe_t(trans_b);
        if va.cols != vb.rows {
            return Err(mismatch());
        }
        let shape = vec![va.rows, vb.cols];
        let out = mm(va, vb);
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transposed()?;
        self.push("transpose", value, Op::Transpose { x }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("sub", Tensor::from_parts(shape, out), Op::Sub { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::lit(factor);
        let out = self.value(x).data().iter().map(|v| *v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale { x, factor }, &[x])
    }

    /// `x[n, k] + bias[k]` for every row `n`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x)).ok_or_else(|| Error::Dimension {
            op: "add_row_bias",
            lhs: self.shape(x).to_vec(),
            rhs: self.shape(bias).to_vec(),
        })?;
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += *bv;
            }
        }
        self.push(
            "add_row_bias",
            Tensor::from_parts(vec![rows, cols], out),
            Op::AddRowBias { x, bias },
            &[x, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", Tensor::from_parts(shape, out), Op::Relu { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// `[N × …] → [N × prod(…)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = [v.rows(), v.row_len()];
        self.reshape(x, &shape)
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat_dim0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_dim0", "nothing to concatenate"))?;
        let trailing = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != trailing[..] {
                return Err(Error::Dimension {
                    op: "concat_dim0",
                    lhs: self.shape(first).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(trailing);
        self.push(
            "concat_dim0",
            Tensor::from_parts(shape, out),
            Op::Concat0 {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Cross-correlation, no kernel flip and no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = conv::ConvGeometry::resolve(self.shape(x), self.shape(w), stride, padding)?;
        let keep_cols = self.recording && (self.requires_grad(w) || self.requires_grad(x));
        let (out, cols) = conv::forward(&geom, self.value(x).data(), self.value(w).data(), keep_cols);
        let shape = vec![geom.batch, geom.filters, geom.out_h, geom.out_w];
        self.push(
            "conv2d",
            Tensor::from_parts(shape, out),
            Op::Conv2d { x, w, geom, cols },
            &[x, w],
        )
    }

    /// 2×2 max pooling with stride 2 over `[N × C × H × W]`.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (out, out_shape, argmax) = conv::maxpool2(&shape, self.value(x).data())?;
        self.push(
            "maxpool2d",
            Tensor::from_parts(out_shape, out),
            Op::MaxPool2 { x, argmax },
            &[x],
        )
    }

    /// Training-mode batch normalization over `[N × C × H × W]`.
    ///
    /// Normalizes with the biased batch variance. Returns the per-channel
    /// batch mean and unbiased variance for running-statistic updates.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, hw) = bn_dims(self.shape(x), self.shape(gamma), self.shape(beta))?;
        if n < 2 {
            return Err(Error::shape(
                "batchnorm2d",
                "training mode needs a batch of at least 2 (unbiased variance)",
            ));
        }
        let m = n * hw;
        let mf = T::lit(m as f64);
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * hw;
                s += xs[base..base + hw].iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut q = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for v in &xs[base..base + hw] {
                    let d = *v - mu;
                    q += d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = q / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + T::lit(eps)).sqrt()).collect();
        let unbiased: Vec<T> = var.iter().map(|v| *v * mf / T::lit((m - 1) as f64)).collect();
        let node = self.bn_apply(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((node, mean, unbiased))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = bn_dims(self.shape(x), self.shape(gamma), self.shape(beta))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm2d", "running statistics do not match channel count"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|v| T::one() / (*v + T::lit(eps)).sqrt())
            .collect();
        self.bn_apply(x, gamma, beta, running_mean, &inv_std, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for (i, chunk) in xs.chunks(hw).enumerate() {
            let ch = i % c;
            let base = i * hw;
            for (j, v) in chunk.iter().enumerate() {
                let h = (*v - mean[ch]) * inv_std[ch];
                xhat[base + j] = h;
                out[base + j] = g[ch] * h + bt[ch];
            }
        }
        let xhat = if self.recording { xhat } else { Vec::new() };
        self.push(
            "batchnorm2d",
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Divides each leading-axis row by its l2 norm.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (rows, d) = (v.rows(), v.row_len());
        let mut norms = Vec::with_capacity(rows);
        let mut out = v.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let norm = row.iter().map(|e| *e * *e).sum::<T>().sqrt();
            if norm.to_f64().unwrap_or(0.0) < 1e-12 {
                return Err(Error::DegenerateFilter {
                    row: r,
                    norm: norm.to_f64().unwrap_or(0.0),
                });
            }
            for e in row.iter_mut() {
                *e /= norm;
            }
            norms.push(norm);
        }
        let shape = v.shape().to_vec();
        self.push(
            "row_l2_normalize",
            Tensor::from_parts(shape, out),
            Op::RowNormalize { x, norms },
            &[x],
        )
    }

    /// Entrywise absolute sum.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.push("l1_norm", Tensor::scalar(s), Op::L1 { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Mean cross-entropy of `softmax(logits[N × K])` against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        if labels.is_empty() {
            return Err(Error::shape("softmax_cross_entropy", "empty batch"));
        }
        let (n, k) = matrix_dims(self.shape(logits))
            .ok_or_else(|| Error::shape("softmax_cross_entropy", "logits must be [N × K]"))?;
        if n != labels.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: vec![n, k],
                rhs: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (r, (row, p)) in z.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (pi, zi) in p.iter_mut().zip(row) {
                *pi = (*zi - max).exp();
                denom += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= denom;
            }
            loss += denom.ln() + max - row[labels[r]];
        }
        loss /= T::lit(n as f64);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }
}

fn bn_dims(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = x else {
        return Err(Error::shape("batchnorm2d", format!("expected [N × C × H × W], got {x:?}")));
    };
    if gamma != [*c] || beta != [*c] {
        return Err(Error::Dimension {
            op: "batchnorm2d",
            lhs: x.to_vec(),
            rhs: gamma.to_vec(),
        });
    }
    Ok((*n, *c, h * w))
}

pub(crate) fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let val = |v: Var| &nodes[v.index()].value;
    let wants = |v: Var| nodes[v.index()].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
        } => {
            let (ra, ca) = matrix_dims(val(*a).shape()).expect("matmul operand");
            let (rb, cb) = matrix_dims(val(*b).shape()).expect("matmul operand");
            let op_a = View::new(val(*a).data(), ra, ca).maybe_t(*trans_a);
            let op_b = View::new(val(*b).data(), rb, cb).maybe_t(*trans_b);
            let gv = View::new(g, op_a.rows, op_b.cols);
            if wants(*a) {
                let da = if *trans_a { mm(op_b, gv.t()) } else { mm(gv, op_b.t()) };
                accumulate(nodes, grads, *a, da);
            }
            if wants(*b) {
                let db = if *trans_b { mm(gv.t(), op_a) } else { mm(op_a.t(), gv) };
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Transpose { x } => {
            let (r, c) = matrix_dims(val(*x).shape()).expect("transpose operand");
            // g is [c × r]
            let mut dx = vec![T::zero(); r * c];
            for i in 0..c {
                for j in 0..r {
                    dx[j * c + i] = g[i * r + j];
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Conv2d { x, w, geom, cols } => {
            let (dx, dw) = conv::backward(
                geom,
                val(*w).data(),
                cols,
                g,
                wants(*x),
                wants(*w),
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, dw);
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|v| -*v).collect());
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, g.iter().map(|v| *v * *factor).collect());
        }
        Op::AddRowBias { x, bias } => {
            accumulate(nodes, grads, *x, g.to_vec());
            if wants(*bias) {
                let k = val(*bias).len();
                let mut db = vec![T::zero(); k];
                for row in g.chunks(k) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += *v;
                    }
                }
                accumulate(nodes, grads, *bias, db);
            }
        }
        Op::Relu { x } => {
            let dx = val(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(xv, gv)| if *xv > T::zero() { *gv } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Concat0 { parts } => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).len();
                accumulate(nodes, grads, *p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if wants(*x) {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (src, gv) in argmax.iter().zip(g) {
                    dx[*src] += *gv;
                }
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let shape = val(*x).shape();
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let gam = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (i, (gc, hc)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                let ch = i % c;
                for (gv, hv) in gc.iter().zip(hc) {
                    dgamma[ch] += *gv * *hv;
                    dbeta[ch] += *gv;
                }
            }
            if wants(*x) {
                let mut dx = vec![T::zero(); g.len()];
                let m = T::lit((n * hw) as f64);
                for (i, ((dc, gc), hc)) in dx.chunks_mut(hw).zip(g.chunks(hw)).zip(xhat.chunks(hw)).enumerate() {
                    let ch = i % c;
                    let k = gam[ch] * inv_std[ch];
                    if *batch_stats {
                        for ((d, gv), hv) in dc.iter_mut().zip(gc).zip(hc) {
                            *d = k / m * (m * *gv - dbeta[ch] - *hv * dgamma[ch]);
                        }
                    } else {
                        for (d, gv) in dc.iter_mut().zip(gc) {
                            *d = k * *gv;
                        }
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::RowNormalize { x, norms } => {
            let y = node.value.data();
            let d = node.value.row_len();
            let mut dx = vec![T::zero(); y.len()];
            for (r, norm) in norms.iter().enumerate() {
                let range = r * d..(r + 1) * d;
                let yr = &y[range.clone()];
                let gr = &g[range.clone()];
                let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                for ((o, yv), gv) in dx[range].iter_mut().zip(yr).zip(gr) {
                    *o = (*gv - *yv * dot) / *norm;
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::L1 { x } => {
            let dx = val(*x).data().iter().map(|v| sign(*v) * g[0]).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Sum { x } => accumulate(nodes, grads, *x, vec![g[0]; val(*x).len()]),
        Op::SoftmaxCrossEntropy { logits, probs, labels } => {
            let k = val(*logits).shape()[1];
            let scale = g[0] / T::lit(labels.len() as f64);
            let mut d = probs.clone();
            for (r, l) in labels.iter().enumerate() {
                d[r * k + l] -= T::one();
            }
            for v in d.iter_mut() {
                *v *= scale;
            }
            accumulate(nodes, grads, *logits, d);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::<f64>::eye(3)).unwrap();
        let b = tape
            .constant(Tensor::from_fn(&[3, 4], |k| k as f64 - 5.0))
            .unwrap();
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), tape.value(b));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn row_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 4.0])).unwrap();
        let y = tape.row_l2_normalize(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn row_normalize_rejects_zero_row() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(matches!(
            tape.row_l2_normalize(x),
            Err(Error::DegenerateFilter { row: 1, .. })
        ));
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::full(&[3, 10], 0.7)).unwrap();
        let l = tape.softmax_cross_entropy(z, &[0, 4, 9]).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_batch() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::<f64>::zeros(&[1, 10])).unwrap();
        assert!(tape.softmax_cross_entropy(z, &[]).is_err());
    }

    #[test]
    fn batchnorm_rejects_single_sample_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64)).unwrap();
        let g = tape.param(Tensor::ones(&[2])).unwrap();
        let b = tape.param(Tensor::zeros(&[2])).unwrap();
        assert!(tape.batchnorm2d_train(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes_channels() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::<f64>::from_fn(&[4, 3, 2, 2], |i| ((i * 7) % 11) as f64))
            .unwrap();
        let g = tape.param(Tensor::ones(&[3])).unwrap();
        let b = tape.param(Tensor::zeros(&[3])).unwrap();
        let (y, _, var) = tape.batchnorm2d_train(x, g, b, 0.0).unwrap();
        let y = tape.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..4).map(move |k| (n, k)))
                .map(|(n, k)| y.data()[(n * 3 + ch) * 4 + k])
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var_b = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12 && (var_b - 1.0).abs() < 1e-12);
        }
        assert!(var.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn concat_stacks_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let c = tape.concat_dim0(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = tape.constant(t(&[1, 3], &[0.0; 3])).unwrap();
        assert!(tape.concat_dim0(&[a, bad]).is_err());
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX])).unwrap();
        let err = tape.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }
}
