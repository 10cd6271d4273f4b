//! Forward and backward rules for every tape op.

use super::conv::ConvGeom;
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn rows_cols<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, k] => Ok((*n, *k)),
        other => Err(Error::InvalidShape {
            op,
            msg: format!("expected a [batch, classes] tensor, got {other:?}"),
        }),
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize, op: &'static str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![n, k],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    Ok(())
}

fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z = z + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / z;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: fn(usize, usize) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = self.val(ia).zip_map(self.val(ib), name, f)?;
        self.push(name, value, op(ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.index(a)?;
        let value = self.val(ia).map(|v| v * c);
        self.push("scale", value, Op::Scale(ia, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.index(a)?;
        let value = self.val(ia).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(ia))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = crate::tensor::matmul(self.val(ia), self.val(ib))?;
        self.push("matmul", value, Op::MatMul(ia, ib))
    }

    /// `x·w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (xs, ws, bs) = (self.val(ix).shape(), self.val(iw).shape(), self.val(ib).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let bias = self.val(ib).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(n, i, o, self.val(ix).data(), false, self.val(iw).data(), false, &mut out, true);
        self.push("dense", Tensor::from_parts(vec![n, o], out), Op::Dense { x: ix, w: iw, b: ib })
    }

    /// 2-d cross-correlation. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let geom = ConvGeom::new(self.val(ix).shape(), self.val(iw).shape(), stride, padding)?;
        if self.val(ib).shape() != [geom.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.val(iw).shape().to_vec(),
                rhs: self.val(ib).shape().to_vec(),
            });
        }
        let (xv, wv, bv) = (self.val(ix).data(), self.val(iw).data(), self.val(ib).data());
        let plane = geom.out_plane();
        let mut cols = vec![T::zero(); geom.patch_len() * plane];
        let mut out = vec![T::zero(); geom.batch * geom.out_image()];
        for (img, dst) in xv.chunks(geom.in_image()).zip(out.chunks_mut(geom.out_image())) {
            geom.im2col(img, &mut cols);
            for (o, chan) in dst.chunks_mut(plane).enumerate() {
                chan.fill(bv[o]);
            }
            T::gemm(geom.out_channels, geom.patch_len(), plane, wv, false, &cols, false, dst, true);
        }
        self.push(
            "conv2d",
            Tensor::from_parts(geom.out_shape(), out),
            Op::Conv2d { x: ix, w: iw, b: ib, geom },
        )
    }

    /// Non-overlapping `size×size` max pooling over `[N, C, H, W]`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let xs = self.val(ix).shape().to_vec();
        if xs.len() != 4 || size == 0 || xs[2] < size || xs[3] < size {
            return Err(Error::InvalidShape {
                op: "max_pool2d",
                msg: format!("cannot pool {xs:?} with window {size}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / size, w / size);
        let data = self.val(ix).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * size * w + oj * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let at = base + (oi * size + di) * w + oj * size + dj;
                            if data[at] > data[best] {
                                best = at;
                            }
                        }
                    }
                    argmax.push(best);
                    out.push(data[best]);
                }
            }
        }
        self.push(
            "max_pool2d",
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool2d { x: ix, argmax },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let value = self.val(ix).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(ix))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let value = self.val(ix).map(T::exp);
        self.push("exp", value, Op::Exp(ix))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let value = self.val(ix).map(T::ln);
        self.push("log", value, Op::Log(ix))
    }

    /// Row-wise softmax of a `[n, k]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let (_, k) = rows_cols(self.val(ix), "softmax")?;
        let value = Tensor::from_parts(self.val(ix).shape().to_vec(), softmax_rows(self.val(ix).data(), k));
        self.push("softmax", value, Op::Softmax(ix))
    }

    /// Row-wise log-softmax of a `[n, k]` tensor, stabilized by the row max.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let (_, k) = rows_cols(self.val(ix), "log_softmax")?;
        let mut out = Vec::with_capacity(self.val(ix).len());
        for row in self.val(ix).data().chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::from_parts(self.val(ix).shape().to_vec(), out);
        self.push("log_softmax", value, Op::LogSoftmax(ix))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let s = self.val(ix).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ix))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let n = T::from_usize(self.val(ix).len()).unwrap_or_else(T::one);
        let s: T = self.val(ix).data().iter().copied().sum();
        self.push("mean", Tensor::scalar(s / n), Op::Mean(ix))
    }

    /// Sum over the class axis: `[n, k] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let (n, k) = rows_cols(self.val(ix), "sum_rows")?;
        let out = self.val(ix).data().chunks(k).map(|r| r.iter().copied().sum()).collect();
        self.push("sum_rows", Tensor::from_parts(vec![n], out), Op::SumRows(ix))
    }

    /// `out[i] = x[i, index[i]]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let (n, k) = rows_cols(self.val(ix), "pick")?;
        check_labels(index, n, k, "pick")?;
        let data = self.val(ix).data();
        let out = index.iter().enumerate().map(|(i, &j)| data[i * k + j]).collect();
        let flat = index.iter().enumerate().map(|(i, &j)| i * k + j).collect();
        self.push("pick", Tensor::from_parts(vec![n], out), Op::Pick { x: ix, index: flat })
    }

    /// `out[i] = max_{j != index[i]} x[i, j]`; the first maximal entry wins ties.
    pub fn max_other(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let (n, k) = rows_cols(self.val(ix), "max_other")?;
        if k < 2 {
            return Err(Error::InvalidArgument("max_other needs at least 2 classes".into()));
        }
        check_labels(index, n, k, "max_other")?;
        let data = self.val(ix).data();
        let mut argmax = Vec::with_capacity(n);
        for (i, &y) in index.iter().enumerate() {
            let row = &data[i * k..(i + 1) * k];
            let mut best = if y == 0 { 1 } else { 0 };
            for (j, &v) in row.iter().enumerate() {
                if j != y && v > row[best] {
                    best = j;
                }
            }
            argmax.push(i * k + best);
        }
        let out = argmax.iter().map(|&a| data[a]).collect();
        self.push("max_other", Tensor::from_parts(vec![n], out), Op::MaxOther { x: ix, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let value = self.val(ix).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(ix))
    }

    /// Collapses all but the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let t = self.val(ix);
        let shape = [t.batch_len(), t.example_len()];
        self.reshape(x, &shape)
    }

    /// Identity forward; multiplies the upstream gradient by `-ratio` on the way back.
    pub fn grad_reverse(&mut self, x: Var, ratio: T) -> Result<Var> {
        if ratio < T::zero() {
            return Err(Error::InvalidArgument(format!("reversal ratio must be >= 0, got {ratio}")));
        }
        let ix = self.index(x)?;
        let value = self.val(ix).clone();
        self.push("grad_reverse", value, Op::GradReverse(ix, ratio))
    }
}

fn accumulate<T: Scalar>(
    tape: &Tape<T>,
    grads: &mut [Option<Tensor<T>>],
    target: usize,
    g: impl FnOnce() -> Tensor<T>,
) {
    if !tape.nodes[target].needs_grad {
        return;
    }
    let g = g();
    match &mut grads[target] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *v;
            }
        }
        slot => *slot = Some(g),
    }
}

fn scatter<T: Scalar>(shape: &[usize], at: &[usize], g: &[T]) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let buf = out.data_mut();
    for (&i, &v) in at.iter().zip(g) {
        buf[i] = buf[i] + v;
    }
    out
}

pub(super) fn backward_op<T: Scalar>(
    tape: &Tape<T>,
    op: &Op<T>,
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |i: usize| tape.val(i);
    let y = val(id);
    match *op {
        Op::Constant | Op::Input | Op::Param(_) => {}
        Op::Add(a, b) => {
            accumulate(tape, grads, a, || g.clone());
            accumulate(tape, grads, b, || g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(tape, grads, a, || g.clone());
            accumulate(tape, grads, b, || g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            accumulate(tape, grads, a, || g.zip_map(val(b), "mul", |g, b| g * b).unwrap());
            accumulate(tape, grads, b, || g.zip_map(val(a), "mul", |g, a| g * a).unwrap());
        }
        Op::Div(a, b) => {
            accumulate(tape, grads, a, || g.zip_map(val(b), "div", |g, b| g / b).unwrap());
            accumulate(tape, grads, b, || {
                // d(a/b)/db = -y/b
                let gy = g.zip_map(y, "div", |g, y| g * y).unwrap();
                gy.zip_map(val(b), "div", |gy, b| -gy / b).unwrap()
            });
        }
        Op::Scale(a, c) => accumulate(tape, grads, a, || g.map(|v| v * c)),
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(tape, grads, a, || g.reshape(val(a).shape()).unwrap())
        }
        Op::GradReverse(a, r) => accumulate(tape, grads, a, || g.map(|v| -r * v)),
        Op::MatMul(a, b) => {
            let (m, k, n) = (val(a).shape()[0], val(a).shape()[1], val(b).shape()[1]);
            accumulate(tape, grads, a, || {
                let mut out = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), false, val(b).data(), true, &mut out, false);
                Tensor::from_parts(vec![m, k], out)
            });
            accumulate(tape, grads, b, || {
                let mut out = vec![T::zero(); k * n];
                T::gemm(k, m, n, val(a).data(), true, g.data(), false, &mut out, false);
                Tensor::from_parts(vec![k, n], out)
            });
        }
        Op::Dense { x, w, b } => {
            let (n, i, o) = (val(x).shape()[0], val(x).shape()[1], val(w).shape()[1]);
            accumulate(tape, grads, x, || {
                let mut out = vec![T::zero(); n * i];
                T::gemm(n, o, i, g.data(), false, val(w).data(), true, &mut out, false);
                Tensor::from_parts(vec![n, i], out)
            });
            accumulate(tape, grads, w, || {
                let mut out = vec![T::zero(); i * o];
                T::gemm(i, n, o, val(x).data(), true, g.data(), false, &mut out, false);
                Tensor::from_parts(vec![i, o], out)
            });
            accumulate(tape, grads, b, || {
                let mut out = vec![T::zero(); o];
                for row in g.data().chunks(o) {
                    for (acc, v) in out.iter_mut().zip(row) {
                        *acc = *acc + *v;
                    }
                }
                Tensor::from_parts(vec![o], out)
            });
        }
        Op::Conv2d { x, w, b, geom } => conv_backward(tape, grads, g, x, w, b, &geom),
        Op::MaxPool2d { x, ref argmax } => {
            accumulate(tape, grads, x, || scatter(val(x).shape(), argmax, g.data()))
        }
        Op::Relu(x) => accumulate(tape, grads, x, || {
            g.zip_map(val(x), "relu", |g, x| if x > T::zero() { g } else { T::zero() })
                .unwrap()
        }),
        Op::Exp(x) => accumulate(tape, grads, x, || g.zip_map(y, "exp", |g, y| g * y).unwrap()),
        Op::Log(x) => accumulate(tape, grads, x, || g.zip_map(val(x), "log", |g, x| g / x).unwrap()),
        Op::Softmax(x) => accumulate(tape, grads, x, || {
            let k = y.shape()[1];
            let mut out = Vec::with_capacity(y.len());
            for (gr, yr) in g.data().chunks(k).zip(y.data().chunks(k)) {
                let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                out.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
            }
            Tensor::from_parts(y.shape().to_vec(), out)
        }),
        Op::LogSoftmax(x) => accumulate(tape, grads, x, || {
            let k = y.shape()[1];
            let mut out = Vec::with_capacity(y.len());
            for (gr, yr) in g.data().chunks(k).zip(y.data().chunks(k)) {
                let total: T = gr.iter().copied().sum();
                out.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * total));
            }
            Tensor::from_parts(y.shape().to_vec(), out)
        }),
        Op::Sum(x) => accumulate(tape, grads, x, || Tensor::full(val(x).shape(), g.item())),
        Op::Mean(x) => accumulate(tape, grads, x, || {
            let n = T::from_usize(val(x).len()).unwrap_or_else(T::one);
            Tensor::full(val(x).shape(), g.item() / n)
        }),
        Op::SumRows(x) => accumulate(tape, grads, x, || {
            let k = val(x).shape()[1];
            let out = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
            Tensor::from_parts(val(x).shape().to_vec(), out)
        }),
        Op::Pick { x, ref index } => accumulate(tape, grads, x, || scatter(val(x).shape(), index, g.data())),
        Op::MaxOther { x, ref argmax } => {
            accumulate(tape, grads, x, || scatter(val(x).shape(), argmax, g.data()))
        }
    }
    Ok(())
}

fn conv_backward<T: Scalar>(
    tape: &Tape<T>,
    grads: &mut [Option<Tensor<T>>],
    g: &Tensor<T>,
    x: usize,
    w: usize,
    b: usize,
    geom: &ConvGeom,
) {
    let (xv, wv) = (tape.val(x), tape.val(w));
    let plane = geom.out_plane();
    let need_x = tape.nodes[x].needs_grad;
    let need_w = tape.nodes[w].needs_grad;
    let mut gx = need_x.then(|| vec![T::zero(); xv.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); wv.len()]);
    let mut cols = vec![T::zero(); geom.patch_len() * plane];
    for n in 0..geom.batch {
        let gn = &g.data()[n * geom.out_image()..(n + 1) * geom.out_image()];
        if let Some(gw) = gw.as_mut() {
            geom.im2col(&xv.data()[n * geom.in_image()..(n + 1) * geom.in_image()], &mut cols);
            T::gemm(geom.out_channels, plane, geom.patch_len(), gn, false, &cols, true, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            T::gemm(geom.patch_len(), geom.out_channels, plane, wv.data(), true, gn, false, &mut cols, false);
            geom.col2im(&cols, &mut gx[n * geom.in_image()..(n + 1) * geom.in_image()]);
        }
    }
    if let Some(gx) = gx {
        accumulate(tape, grads, x, || Tensor::from_parts(xv.shape().to_vec(), gx));
    }
    if let Some(gw) = gw {
        accumulate(tape, grads, w, || Tensor::from_parts(wv.shape().to_vec(), gw));
    }
    accumulate(tape, grads, b, || {
        let mut out = vec![T::zero(); geom.out_channels];
        for img in g.data().chunks(geom.out_image()) {
            for (o, chan) in img.chunks(plane).enumerate() {
                out[o] = out[o] + chan.iter().copied().sum();
            }
        }
        Tensor::from_parts(vec![geom.out_channels], out)
    });
}
