//! Dense kernels shared by the tape and the value-level layer functions.

use super::Scalar;

/// A strided read-only view of a matrix stored in a flat slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, S> {
    pub data: &'a [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S: Scalar> MatRef<'a, S> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Columns `start..start + width` of this view.
    pub fn cols(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        MatRef {
            offset: self.offset + start * self.cs,
            cols: width,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

pub(crate) struct MatMut<'a, S> {
    pub data: &'a mut [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S: Scalar> MatMut<'a, S> {
    pub fn new(data: &'a mut [S], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        MatMut {
            offset: self.offset + start * self.cs,
            cols: width,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<S: Scalar>(alpha: S, a: MatRef<S>, b: MatRef<S>, beta: S, c: MatMut<S>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    a.check();
    b.check();
    c.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == S::zero() {
                    S::zero()
                } else {
                    c.data[idx] * beta
                };
            }
        }
        return;
    }
    // SAFETY: the bounds of all three views were checked above.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Forward pass of multi-head scaled dot-product attention on already
/// projected inputs. Returns the output (`n_q x d_v`) and the attention
/// probabilities laid out as `heads x n_q x n_k`.
pub(crate) fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    n_q: usize,
    n_k: usize,
    d_k: usize,
    d_v: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>) {
    let hk = d_k / heads;
    let hv = d_v / heads;
    let scale = S::one() / S::from_usize(hk).unwrap().sqrt();
    let mut out = vec![S::zero(); n_q * d_v];
    let mut probs = vec![S::zero(); heads * n_q * n_k];
    for h in 0..heads {
        let p = &mut probs[h * n_q * n_k..(h + 1) * n_q * n_k];
        gemm(
            scale,
            MatRef::new(q, n_q, d_k).cols(h * hk, hk),
            MatRef::new(k, n_k, d_k).cols(h * hk, hk).t(),
            S::zero(),
            MatMut::new(p, n_q, n_k),
        );
        for row in p.chunks_mut(n_k) {
            softmax_in_place(row);
        }
        gemm(
            S::one(),
            MatRef::new(p, n_q, n_k),
            MatRef::new(v, n_k, d_v).cols(h * hv, hv),
            S::zero(),
            MatMut::new(&mut out, n_q, d_v).cols(h * hv, hv),
        );
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    d_out: &[S],
    n_q: usize,
    n_k: usize,
    d_k: usize,
    d_v: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let hk = d_k / heads;
    let hv = d_v / heads;
    let scale = S::one() / S::from_usize(hk).unwrap().sqrt();
    let mut dq = vec![S::zero(); n_q * d_k];
    let mut dk = vec![S::zero(); n_k * d_k];
    let mut dv = vec![S::zero(); n_k * d_v];
    let mut ds = vec![S::zero(); n_q * n_k];
    for h in 0..heads {
        let p = &probs[h * n_q * n_k..(h + 1) * n_q * n_k];
        let d_out_h = MatRef::new(d_out, n_q, d_v).cols(h * hv, hv);
        // dV_h = P^T dO_h
        gemm(
            S::one(),
            MatRef::new(p, n_q, n_k).t(),
            d_out_h,
            S::zero(),
            MatMut::new(&mut dv, n_k, d_v).cols(h * hv, hv),
        );
        // dP = dO_h V_h^T
        gemm(
            S::one(),
            d_out_h,
            MatRef::new(v, n_k, d_v).cols(h * hv, hv).t(),
            S::zero(),
            MatMut::new(&mut ds, n_q, n_k),
        );
        for (ds_row, p_row) in ds.chunks_mut(n_k).zip(p.chunks(n_k)) {
            let dot: S = ds_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in ds_row.iter_mut().zip(p_row) {
                *d = pv * (*d - dot) * scale;
            }
        }
        gemm(
            S::one(),
            MatRef::new(&ds, n_q, n_k),
            MatRef::new(k, n_k, d_k).cols(h * hk, hk),
            S::zero(),
            MatMut::new(&mut dq, n_q, d_k).cols(h * hk, hk),
        );
        gemm(
            S::one(),
            MatRef::new(&ds, n_q, n_k).t(),
            MatRef::new(q, n_q, d_k).cols(h * hk, hk),
            S::zero(),
            MatMut::new(&mut dk, n_k, d_k).cols(h * hk, hk),
        );
    }
    (dq, dk, dv)
}
