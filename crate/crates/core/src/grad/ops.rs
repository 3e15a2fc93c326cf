//! Differentiable operations on [`Var`].
//!
//! Every op checks shapes eagerly and returns [`GradError::ShapeMismatch`]
//! naming itself and both offending shapes. Broadcasting only happens
//! through [`Var::broadcast_to`].

use std::ops::Range;
use std::rc::Rc;

use super::tape::GradSink;
use super::{GradError, Tensor, Var};

type Result<T> = std::result::Result<T, GradError>;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(GradError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `c[m,n] = a[m,k] * b[k,n]`, with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every (row, col) pair reachable through the given strides is
    // within the respective slice for the dimensions passed in.
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

fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn transposed(cols: usize) -> (isize, isize) {
    (1, cols as isize)
}

/// Geometry of a 2D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let k = self.kernel;
        let plane = self.out_h * self.out_w;
        let mut cols = vec![0.0; self.channels * k * k * plane];
        for c in 0..self.channels {
            let src = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[oy * self.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let k = self.kernel;
        let plane = self.out_h * self.out_w;
        let mut x = vec![0.0; self.channels * self.height * self.width];
        for c in 0..self.channels {
            let dst = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[iy as usize * self.width + ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each output flat index of a broadcast to its source flat index.
fn broadcast_index(src_shape: &[usize], dst_shape: &[usize]) -> Vec<usize> {
    let src_strides = strides(src_shape);
    let dst_strides = strides(dst_shape);
    let n: usize = dst_shape.iter().product();
    (0..n)
        .map(|flat| {
            let mut src = 0;
            for d in 0..dst_shape.len() {
                let coord = (flat / dst_strides[d]) % dst_shape[d];
                if src_shape[d] != 1 {
                    src += coord * src_strides[d];
                }
            }
            src
        })
        .collect()
}

impl<'t> Var<'t> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let id = self.id;
        let out = Rc::clone(&y);
        self.tape.record((*y).clone(), &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let gx = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data().iter().zip(out.data()))
                        .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                        .collect(),
                )
                .expect("unary pullback shape");
                sink.add(id, gx);
            })
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(a.zip_map(&b, |x, y| x + y), &[self, other], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.clone());
            })
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.record(a.zip_map(&b, |x, y| x - y), &[self, other], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.map(|v| -v));
            })
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let (ia, ib) = (self.id, other.id);
        let value = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.record(value, &[self, other], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                if sink.wants(ia) {
                    sink.add(ia, g.zip_map(&b, |gi, bi| gi * bi));
                }
                if sink.wants(ib) {
                    sink.add(ib, g.zip_map(&a, |gi, ai| gi * ai));
                }
            })
        }))
    }

    /// Transpose of a `[m, n]` matrix.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(GradError::shape("transpose", x.shape(), &[0, 0]));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let flip = |data: &[f64], rows: usize, cols: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = data[r * cols + c];
                }
            }
            out
        };
        let value = Tensor::new(&[n, m], flip(x.data(), m, n))?;
        let id = self.id;
        Ok(self.tape.record(value, &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let gx = Tensor::new(&[m, n], flip(g.data(), n, m)).expect("transpose pullback");
                sink.add(id, gx);
            })
        }))
    }

    /// Elementwise quotient; the caller keeps `other` away from zero.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("div", &a, &b)?;
        let (ia, ib) = (self.id, other.id);
        let value = a.zip_map(&b, |x, y| x / y);
        Ok(self.tape.record(value, &[self, other], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                if sink.wants(ia) {
                    sink.add(ia, g.zip_map(&b, |gi, bi| gi / bi));
                }
                if sink.wants(ib) {
                    let ratio = a.zip_map(&b, |ai, bi| ai / (bi * bi));
                    sink.add(ib, g.zip_map(&ratio, |gi, r| -gi * r));
                }
            })
        }))
    }

    /// Adds a constant to every element.
    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let value = self.value().map(|v| v + k);
        let id = self.id;
        self.tape.record(value, &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| sink.add(id, g.clone()))
        })
    }

    /// Multiplication by a constant.
    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(move |x| k * x, move |_, _| k)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.note_branches(self.value().data().iter().map(|&x| x > 0.0));
        // Subgradient at 0 is 0.
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// Absolute value; subgradient at 0 is 0.
    pub fn abs(self) -> Var<'t> {
        self.tape.note_branches(self.value().data().iter().map(|&x| x > 0.0));
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let id = self.id;
        self.tape.record(Tensor::scalar(x.sum()), &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                sink.add(id, Tensor::full(&shape, g.item()));
            })
        })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums away the last axis: `[.., n] -> [..]` (`[n] -> [1]`).
    pub fn sum_last(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape.last().unwrap_or(&1);
        let out_shape = if shape.len() <= 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let data = x.data().chunks(n).map(|c| c.iter().sum()).collect();
        let value = Tensor::new(&out_shape, data).expect("sum_last shape");
        let id = self.id;
        self.tape.record(value, &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat(gi).take(n))
                    .collect();
                sink.add(id, Tensor::new(&shape, data).expect("sum_last pullback"));
            })
        })
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(GradError::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), row_major(k), b.data(), row_major(n), &mut c, false);
        let (ia, ib) = (self.id, other.id);
        let value = Tensor::new(&[m, n], c)?;
        Ok(self.tape.record(value, &[self, other], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                if sink.wants(ia) {
                    // dA = G * B^T
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), row_major(n), b.data(), transposed(n), &mut ga, false);
                    sink.add(ia, Tensor::new(&[m, k], ga).expect("matmul dA"));
                }
                if sink.wants(ib) {
                    // dB = A^T * G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), transposed(k), g.data(), row_major(n), &mut gb, false);
                    sink.add(ib, Tensor::new(&[k, n], gb).expect("matmul dB"));
                }
            })
        }))
    }

    /// 2D cross-correlation of a `[C, H, W]` input with `[O, C, k, k]`
    /// weights and an optional `[O]` bias.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let ok = x.rank() == 3
            && w.rank() == 4
            && w.shape()[1] == x.shape()[0]
            && w.shape()[2] == w.shape()[3]
            && stride > 0;
        if !ok {
            return Err(GradError::shape("conv2d", x.shape(), w.shape()));
        }
        let (channels, height, width) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (out_c, kernel) = (w.shape()[0], w.shape()[2]);
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(GradError::shape("conv2d", x.shape(), w.shape()));
        }
        let b = match bias {
            Some(bv) => {
                let b = bv.value();
                if b.shape() != [out_c] {
                    return Err(GradError::shape("conv2d bias", w.shape(), b.shape()));
                }
                Some((bv.id, b))
            }
            None => None,
        };
        let geom = ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        };
        let plane = geom.out_h * geom.out_w;
        let ckk = channels * kernel * kernel;
        let cols = geom.im2col(x.data());
        let mut out = vec![0.0; out_c * plane];
        if let Some((_, b)) = &b {
            for (o, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        gemm(out_c, ckk, plane, w.data(), row_major(ckk), &cols, row_major(plane), &mut out, true);
        let value = Tensor::new(&[out_c, geom.out_h, geom.out_w], out)?;

        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let (ix, iw) = (self.id, weight.id);
        let ib = b.map(|(id, _)| id);
        Ok(self.tape.record(value, &inputs, move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let gd = g.data();
                if sink.wants(iw) {
                    // dW = G * cols^T
                    let mut gw = vec![0.0; out_c * ckk];
                    gemm(out_c, plane, ckk, gd, row_major(plane), &cols, transposed(plane), &mut gw, false);
                    sink.add(iw, Tensor::new(w.shape(), gw).expect("conv2d dW"));
                }
                if let Some(ib) = ib {
                    if sink.wants(ib) {
                        let gb = gd.chunks(plane).map(|c| c.iter().sum()).collect();
                        sink.add(ib, Tensor::from_vec(gb));
                    }
                }
                if sink.wants(ix) {
                    // dcols = W^T * G
                    let mut gcols = vec![0.0; ckk * plane];
                    gemm(ckk, out_c, plane, w.data(), transposed(ckk), gd, row_major(plane), &mut gcols, false);
                    let gx = geom.col2im(&gcols);
                    sink.add(ix, Tensor::new(x.shape(), gx).expect("conv2d dX"));
                }
            })
        }))
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(GradError::Empty("concat"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail = &values[0].shape()[1..];
        for v in &values[1..] {
            if v.rank() != values[0].rank() || &v.shape()[1..] != tail {
                return Err(GradError::shape("concat", values[0].shape(), v.shape()));
            }
        }
        let lead: usize = values.iter().map(|v| v.shape()[0]).sum();
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let data: Vec<f64> = values.iter().flat_map(|v| v.data().iter().copied()).collect();
        let value = Tensor::new(&shape, data)?;
        let segments: Vec<(usize, usize, Vec<usize>)> = parts
            .iter()
            .zip(&values)
            .scan(0, |offset, (p, v)| {
                let start = *offset;
                *offset += v.numel();
                Some((p.id, start, v.shape().to_vec()))
            })
            .collect();
        Ok(first.tape.record(value, parts, move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                for (id, start, shape) in &segments {
                    if sink.wants(*id) {
                        let n: usize = shape.iter().product();
                        let part = g.data()[*start..start + n].to_vec();
                        sink.add(*id, Tensor::new(shape, part).expect("concat pullback"));
                    }
                }
            })
        }))
    }

    /// Sub-range of the leading axis.
    pub fn slice(self, range: Range<usize>) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.is_empty() || range.start > range.end || range.end > shape[0] {
            return Err(GradError::InvalidArgument {
                op: "slice",
                msg: format!("range {range:?} out of bounds for shape {shape:?}"),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = range.len();
        let (lo, hi) = (range.start * inner, range.end * inner);
        let value = Tensor::new(&out_shape, x.data()[lo..hi].to_vec())?;
        let id = self.id;
        Ok(self.tape.record(value, &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut full = Tensor::zeros(&shape);
                full.data_mut()[lo..hi].copy_from_slice(g.data());
                sink.add(id, full);
            })
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = (*x).clone().reshaped(shape)?;
        let id = self.id;
        Ok(self.tape.record(value, &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                sink.add(id, g.clone().reshaped(&old).expect("reshape pullback"));
            })
        }))
    }

    /// Expands size-1 axes to `shape`. Ranks must match.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let src = x.shape().to_vec();
        let compatible = src.len() == shape.len()
            && src.iter().zip(shape).all(|(&s, &d)| s == d || s == 1);
        if !compatible {
            return Err(GradError::shape("broadcast", &src, shape));
        }
        let index = broadcast_index(&src, shape);
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        let id = self.id;
        Ok(self.tape.record(value, &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut acc = Tensor::zeros(&src);
                for (&i, &gi) in index.iter().zip(g.data()) {
                    acc.data_mut()[i] += gi;
                }
                sink.add(id, acc);
            })
        }))
    }

    /// Picks flat elements: `out[k] = x.flat[indices[k]]`, shape `[len]`.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(GradError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of bounds for shape {:?}", x.shape()),
            });
        }
        let value = Tensor::from_vec(indices.iter().map(|&i| x.data()[i]).collect());
        let indices = indices.to_vec();
        let shape = x.shape().to_vec();
        let id = self.id;
        Ok(self.tape.record(value, &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut acc = Tensor::zeros(&shape);
                for (&i, &gi) in indices.iter().zip(g.data()) {
                    acc.data_mut()[i] += gi;
                }
                sink.add(id, acc);
            })
        }))
    }

    /// Scales each row of a `[n, d]` tensor to unit length; rows with norm
    /// at or below `eps` become zero and pass no gradient.
    pub fn normalize_rows(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(GradError::shape("normalize_rows", x.shape(), &[0, 0]));
        }
        let d = x.shape()[1];
        let norms: Vec<f64> = x
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.tape.note_branches(norms.iter().map(|&n| n > eps));
        let mut out = x.data().to_vec();
        for (row, &n) in out.chunks_mut(d).zip(&norms) {
            if n > eps {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.fill(0.0);
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let y = value.clone();
        let id = self.id;
        Ok(self.tape.record(value, &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                // d(x/|x|) = (g - y (y . g)) / |x|
                let mut gx = vec![0.0; g.numel()];
                for (r, &n) in norms.iter().enumerate() {
                    if n <= eps {
                        continue;
                    }
                    let span = r * d..(r + 1) * d;
                    let (gr, yr) = (&g.data()[span.clone()], &y.data()[span.clone()]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *o = (gi - yi * dot) / n;
                    }
                }
                sink.add(id, Tensor::new(g.shape(), gx).expect("normalize pullback"));
            })
        }))
    }

    /// Mean binary cross-entropy against a constant target; predictions are
    /// clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` and clamped entries pass no
    /// gradient.
    pub fn bce(self, target: &Tensor) -> Result<Var<'t>> {
        let p = self.value();
        same_shape("bce", &p, target)?;
        let n = p.numel() as f64;
        self.tape.note_branches(p.data().iter().map(|v| (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(v)));
        let clamp = |v: f64| v.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pi, &yi)| {
                let pc = clamp(pi);
                -(yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let target = target.clone();
        let id = self.id;
        Ok(self.tape.record(Tensor::scalar(loss), &[self], move || {
            Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let scale = g.item() / n;
                let gx = p.zip_map(&target, |pi, yi| {
                    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pi) {
                        0.0
                    } else {
                        scale * (pi - yi) / (pi * (1.0 - pi))
                    }
                });
                sink.add(id, gx);
            })
        }))
    }
}

/// Probability clamp used by [`Var::bce`].
pub const BCE_CLAMP: f64 = 1e-7;
