//! Small dense kernels used by the tape. Row-major throughout.

/// A row-major matrix view with an optional logical transpose.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize, trans: bool) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            trans,
        }
    }

    /// Logical (rows, cols) after transposition.
    pub fn dims(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out += op(a) · op(b), where `out` is (m × n) row-major.
pub(crate) fn gemm_acc(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64]) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    debug_assert_eq!(k, kb);
    debug_assert_eq!(out.len(), m * n);
    match (a.trans, b.trans) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a.data[i * k + p];
                    if aip != 0.0 {
                        axpy(aip, &b.data[p * n..(p + 1) * n], row);
                    }
                }
            }
        }
        (false, true) => {
            // b stored as (n × k)
            for i in 0..m {
                let ai = &a.data[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] += dot(ai, &b.data[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            // a stored as (k × m)
            for p in 0..k {
                let bp = &b.data[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a.data[p * m + i];
                    if api != 0.0 {
                        axpy(api, bp, &mut out[i * n..(i + 1) * n]);
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a.data[p * m + i] * b.data[j * k + p];
                    }
                    out[i * n + j] += s;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
