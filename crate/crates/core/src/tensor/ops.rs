//! Elementwise, matrix, reduction and shape operations.
//!
//! Elementwise binary operations accept operands of equal shape, or one
//! operand with a single element (a scalar in the broadcasting sense),
//! which is applied against every element of the other. No general
//! broadcasting exists; reductions and repetitions are explicit via
//! [`Tensor::sum_axes`] and [`Tensor::broadcast_axes`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::matmul_raw;
use crate::tensor::tape::Op;
use crate::tensor::{numel_of, strides_of, Tensor};

enum BinaryKind {
    Equal,
    AScalar,
    BScalar,
}

fn binary_kind(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(BinaryKind, Vec<usize>)> {
    if a == b {
        Ok((BinaryKind::Equal, a.to_vec()))
    } else if numel_of(a) == 1 {
        Ok((BinaryKind::AScalar, b.to_vec()))
    } else if numel_of(b) == 1 {
        Ok((BinaryKind::BScalar, a.to_vec()))
    } else {
        Err(Error::shape(
            op,
            format!("shapes {:?} and {:?} are neither equal nor scalar-vs-tensor", a, b),
        ))
    }
}

fn map_binary<E: Scalar>(kind: &BinaryKind, a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    match kind {
        BinaryKind::Equal => a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
        BinaryKind::AScalar => {
            let s = a[0];
            b.iter().map(|&y| f(s, y)).collect()
        }
        BinaryKind::BScalar => {
            let s = b[0];
            a.iter().map(|&x| f(x, s)).collect()
        }
    }
}

impl<E: Scalar> Tensor<E> {
    fn binary(
        &self,
        other: &Tensor<E>,
        opname: &'static str,
        f: impl Fn(E, E) -> E,
        make: impl FnOnce(usize, usize) -> Op<E>,
    ) -> Result<Tensor<E>> {
        let (kind, shape) = binary_kind(opname, self.shape(), other.shape())?;
        let data = map_binary(&kind, self.data(), other.data(), f);
        let tape = Tensor::common_tape(&[self, other])?;
        Tensor::finish_op(
            opname,
            tape,
            &[self, other],
            |ids| make(ids[0], ids[1]),
            shape,
            data,
        )
    }

    fn unary(
        &self,
        opname: &'static str,
        f: impl Fn(E) -> E,
        make: impl FnOnce(usize) -> Op<E>,
    ) -> Result<Tensor<E>> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::finish_op(
            opname,
            self.tape(),
            &[self],
            |ids| make(ids[0]),
            self.shape().to_vec(),
            data,
        )
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    /// Elementwise division. An exactly-zero divisor element is an error;
    /// near-zero divisors that overflow to non-finite values are also
    /// rejected, so callers must stabilise denominators themselves.
    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if other.data().iter().any(|v| *v == E::zero()) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn neg(&self) -> Result<Tensor<E>> {
        self.unary("neg", |x| -x, Op::Neg)
    }

    /// Elementwise square root; negative inputs produce a non-finite error.
    pub fn sqrt(&self) -> Result<Tensor<E>> {
        self.unary("sqrt", |x| x.sqrt(), Op::Sqrt)
    }

    pub fn square(&self) -> Result<Tensor<E>> {
        self.unary("square", |x| x * x, Op::Square)
    }

    pub fn abs(&self) -> Result<Tensor<E>> {
        self.unary("abs", |x| x.abs(), Op::Abs)
    }

    pub fn tanh(&self) -> Result<Tensor<E>> {
        self.unary("tanh", |x| x.tanh(), Op::Tanh)
    }

    pub fn add_const(&self, c: E) -> Result<Tensor<E>> {
        self.unary("add_const", |x| x + c, |id| Op::AddConst(id, c))
    }

    pub fn mul_const(&self, c: E) -> Result<Tensor<E>> {
        self.unary("mul_const", |x| x * c, |id| Op::MulConst(id, c))
    }

    /// `max(x, slope * x)` for `0 <= slope < 1`; the standard leaky
    /// rectifier with configurable negative slope.
    pub fn leaky_relu(&self, slope: E) -> Result<Tensor<E>> {
        self.unary(
            "leaky_relu",
            |x| if x > E::zero() { x } else { x * slope },
            |id| Op::LeakyRelu(id, slope),
        )
    }

    /// Matrix product of two rank-2 tensors `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible shapes {:?} x {:?}", a, b),
            ));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![E::zero(); m * n];
        matmul_raw(self.data(), other.data(), m, k, n, &mut out);
        let tape = Tensor::common_tape(&[self, other])?;
        Tensor::finish_op(
            "matmul",
            tape,
            &[self, other],
            |ids| Op::Matmul(ids[0], ids[1]),
            vec![m, n],
            out,
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 2, got {:?}", s),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Tensor::finish_op(
            "transpose",
            self.tape(),
            &[self],
            |ids| Op::Transpose(ids[0]),
            vec![n, m],
            out,
        )
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                    self.shape(),
                    self.numel(),
                    shape,
                    numel_of(shape)
                ),
            ));
        }
        Tensor::finish_op(
            "reshape",
            self.tape(),
            &[self],
            |ids| Op::Reshape(ids[0]),
            shape.to_vec(),
            self.to_vec(),
        )
    }

    /// Sum over the given axes, removing them from the shape. Summing over
    /// every axis yields a rank-0 scalar.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = self.shape().len();
        let axes = normalize_axes("sum_axes", axes, rank)?;
        let mut reduced = vec![false; rank];
        for &ax in &axes {
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .filter(|(d, _)| !reduced[*d])
            .map(|(_, &e)| e)
            .collect();
        let data = reduce_sum(self.data(), self.shape(), &reduced, &out_shape);
        Tensor::finish_op(
            "sum_axes",
            self.tape(),
            &[self],
            |ids| Op::SumAxes {
                input: ids[0],
                axes: axes.clone(),
            },
            out_shape,
            data,
        )
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let all: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&all)
    }

    /// Arithmetic mean of all elements as a rank-0 scalar.
    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "mean of empty tensor".to_string()));
        }
        self.sum_all()?.mul_const(E::lit(1.0 / n as f64))
    }

    /// Insert new axes at positions `axes` (positions in the result shape)
    /// with the given extents, repeating the input along them. Exact
    /// adjoint of [`Tensor::sum_axes`] over the same axes.
    pub fn broadcast_axes(&self, axes: &[usize], extents: &[usize]) -> Result<Tensor<E>> {
        if axes.len() != extents.len() {
            return Err(Error::shape(
                "broadcast_axes",
                format!("{} axes but {} extents", axes.len(), extents.len()),
            ));
        }
        let out_rank = self.shape().len() + axes.len();
        let axes = normalize_axes("broadcast_axes", axes, out_rank)?;
        // Extents arrive keyed by the caller's axis order; re-key by the
        // sorted order used from here on.
        let mut extent_of = std::collections::BTreeMap::new();
        for (&ax, &ex) in axes.iter().zip(extents.iter()) {
            if ex == 0 {
                return Err(Error::shape("broadcast_axes", "zero extent".to_string()));
            }
            extent_of.insert(ax, ex);
        }
        let mut inserted = vec![false; out_rank];
        for &ax in &axes {
            inserted[ax] = true;
        }
        let mut out_shape = Vec::with_capacity(out_rank);
        let mut src_iter = self.shape().iter();
        for d in 0..out_rank {
            if inserted[d] {
                out_shape.push(extent_of[&d]);
            } else {
                out_shape.push(*src_iter.next().expect("rank arithmetic"));
            }
        }
        let data = repeat_axes(self.data(), &out_shape, &inserted);
        Tensor::finish_op(
            "broadcast_axes",
            self.tape(),
            &[self],
            |ids| Op::BroadcastAxes {
                input: ids[0],
                axes: axes.clone(),
            },
            out_shape,
            data,
        )
    }

    /// Concatenate two tensors along `axis`; all other extents must match.
    pub fn concat(&self, other: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != b.len() || axis >= a.len() {
            return Err(Error::shape(
                "concat",
                format!("shapes {:?} and {:?} along axis {}", a, b, axis),
            ));
        }
        for d in 0..a.len() {
            if d != axis && a[d] != b[d] {
                return Err(Error::shape(
                    "concat",
                    format!("shapes {:?} and {:?} differ off axis {}", a, b, axis),
                ));
            }
        }
        let mut out_shape = a.to_vec();
        out_shape[axis] += b[axis];
        let outer: usize = a[..axis].iter().product();
        let inner: usize = a[axis + 1..].iter().product();
        let a_span = a[axis] * inner;
        let b_span = b[axis] * inner;
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            data.extend_from_slice(&self.data()[o * a_span..(o + 1) * a_span]);
            data.extend_from_slice(&other.data()[o * b_span..(o + 1) * b_span]);
        }
        let tape = Tensor::common_tape(&[self, other])?;
        Tensor::finish_op(
            "concat",
            tape,
            &[self, other],
            |ids| Op::Concat {
                a: ids[0],
                b: ids[1],
                axis,
            },
            out_shape,
            data,
        )
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice_axis",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, s),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let span = s[axis] * inner;
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * span + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Tensor::finish_op(
            "slice_axis",
            self.tape(),
            &[self],
            |ids| Op::Slice {
                input: ids[0],
                axis,
                start,
                len,
            },
            out_shape,
            data,
        )
    }
}

/// Validate, sort and deduplicate an axis list against a rank.
fn normalize_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() {
        return Err(Error::shape(op, format!("duplicate axes in {:?}", axes)));
    }
    if let Some(&bad) = sorted.iter().find(|&&ax| ax >= rank) {
        return Err(Error::shape(
            op,
            format!("axis {} out of range for rank {}", bad, rank),
        ));
    }
    Ok(sorted)
}

/// Sum `src` (shape `in_shape`) over the axes flagged in `reduced`,
/// producing a buffer of shape `out_shape` (the unreduced extents).
fn reduce_sum<E: Scalar>(
    src: &[E],
    in_shape: &[usize],
    reduced: &[bool],
    out_shape: &[usize],
) -> Vec<E> {
    let rank = in_shape.len();
    let mut out = vec![E::zero(); numel_of(out_shape)];
    if rank == 0 {
        out[0] = src[0];
        return out;
    }
    // Stride each input axis contributes to the output index (zero for
    // reduced axes), then walk the input once with an odometer.
    let out_strides = strides_of(out_shape);
    let mut step = vec![0usize; rank];
    let mut kept = 0;
    for d in 0..rank {
        if !reduced[d] {
            step[d] = out_strides[kept];
            kept += 1;
        }
    }
    let mut coords = vec![0usize; rank];
    let mut out_idx = 0usize;
    for &v in src {
        out[out_idx] = out[out_idx] + v;
        for d in (0..rank).rev() {
            coords[d] += 1;
            out_idx += step[d];
            if coords[d] < in_shape[d] {
                break;
            }
            out_idx -= in_shape[d] * step[d];
            coords[d] = 0;
        }
    }
    out
}

/// Repeat `src` along the axes flagged `inserted` to fill `out_shape`.
fn repeat_axes<E: Scalar>(src: &[E], out_shape: &[usize], inserted: &[bool]) -> Vec<E> {
    let rank = out_shape.len();
    let src_shape: Vec<usize> = out_shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !inserted[*d])
        .map(|(_, &e)| e)
        .collect();
    let src_strides = strides_of(&src_shape);
    let mut step = vec![0usize; rank];
    let mut kept = 0;
    for d in 0..rank {
        if !inserted[d] {
            step[d] = src_strides[kept];
            kept += 1;
        }
    }
    let mut out = Vec::with_capacity(numel_of(out_shape));
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let mut coords = vec![0usize; rank];
    let mut src_idx = 0usize;
    for _ in 0..numel_of(out_shape) {
        out.push(src[src_idx]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            src_idx += step[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src_idx -= out_shape[d] * step[d];
            coords[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_and_scalar_broadcast() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[3], &[4.0, 5.0, 6.0]);
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.sub(&b).unwrap().to_vec(), vec![-3.0, -3.0, -3.0]);
        assert_eq!(a.mul(&b).unwrap().to_vec(), vec![4.0, 10.0, 18.0]);

        let s = Tensor::scalar(2.0);
        assert_eq!(s.mul(&a).unwrap().to_vec(), vec![2.0, 4.0, 6.0]);
        assert_eq!(a.mul(&s).unwrap().shape(), &[3]);
        assert_eq!(s.sub(&a).unwrap().to_vec(), vec![1.0, 0.0, -1.0]);

        let c = t(&[2, 2], &[1.0; 4]);
        match a.add(&c) {
            Err(Error::Shape { .. }) => {}
            other => panic!("expected shape error, got {:?}", other.map(|x| x.to_vec())),
        }
    }

    #[test]
    fn division_by_exact_zero_is_an_error() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[2.0, 0.0]);
        assert!(matches!(a.div(&b), Err(Error::DivisionByZero { .. })));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let a = t(&[1], &[1e200]);
        assert!(matches!(a.square(), Err(Error::NonFinite { .. })));
        let b = t(&[1], &[-1.0]);
        assert!(matches!(b.sqrt(), Err(Error::NonFinite { .. })));
        assert!(Tensor::<f64>::from_vec(&[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);

        let at = a.transpose().unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn sum_axes_drops_axes() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = a.sum_axes(&[1]).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.to_vec(), vec![6.0, 15.0]);

        let cols = a.sum_axes(&[0]).unwrap();
        assert_eq!(cols.shape(), &[3]);
        assert_eq!(cols.to_vec(), vec![5.0, 7.0, 9.0]);

        let all = a.sum_axes(&[0, 1]).unwrap();
        assert_eq!(all.shape(), &[] as &[usize]);
        assert_eq!(all.item(), 21.0);

        assert_eq!(a.mean_all().unwrap().item(), 3.5);
        assert!(a.sum_axes(&[2]).is_err());
        assert!(a.sum_axes(&[0, 0]).is_err());
    }

    #[test]
    fn broadcast_axes_repeats_and_inverts_sum() {
        let v = t(&[3], &[1.0, 2.0, 3.0]);
        let m = v.broadcast_axes(&[0], &[2]).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        assert_eq!(m.to_vec(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let m2 = v.broadcast_axes(&[1], &[2]).unwrap();
        assert_eq!(m2.shape(), &[3, 2]);
        assert_eq!(m2.to_vec(), vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);

        // Round trip: broadcasting then summing over the same axes scales
        // by the inserted extent.
        let back = m.sum_axes(&[0]).unwrap();
        assert_eq!(back.to_vec(), vec![2.0, 4.0, 6.0]);

        let s = Tensor::scalar(5.0);
        let filled = s.broadcast_axes(&[0, 1], &[2, 2]).unwrap();
        assert_eq!(filled.to_vec(), vec![5.0; 4]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = a.concat(&b, 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(
            c.to_vec(),
            vec![1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );

        let a_back = c.slice_axis(1, 0, 2).unwrap();
        assert_eq!(a_back.to_vec(), a.to_vec());
        let b_back = c.slice_axis(1, 2, 3).unwrap();
        assert_eq!(b_back.to_vec(), b.to_vec());

        assert!(c.slice_axis(1, 3, 3).is_err());
        assert!(a.concat(&t(&[3, 2], &[0.0; 6]), 1).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = a.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.to_vec(), a.to_vec());
        assert!(a.reshape(&[4]).is_err());

        let s = Tensor::scalar(7.0).reshape(&[1, 1]).unwrap();
        assert_eq!(s.shape(), &[1, 1]);
    }

    #[test]
    fn activations_compute_expected_values() {
        let x = t(&[4], &[-2.0, -0.5, 0.5, 2.0]);
        let l = x.leaky_relu(0.2).unwrap();
        assert_eq!(l.to_vec(), vec![-0.4, -0.1, 0.5, 2.0]);

        let a = x.abs().unwrap();
        assert_eq!(a.to_vec(), vec![2.0, 0.5, 0.5, 2.0]);

        let th = x.tanh().unwrap();
        for (y, &xi) in th.to_vec().iter().zip(x.data()) {
            assert!((y - xi.tanh()).abs() < 1e-15);
        }

        assert_eq!(x.add_const(1.0).unwrap().to_vec(), vec![-1.0, 0.5, 1.5, 3.0]);
        assert_eq!(x.mul_const(2.0).unwrap().to_vec(), vec![-4.0, -1.0, 1.0, 4.0]);
    }
}
