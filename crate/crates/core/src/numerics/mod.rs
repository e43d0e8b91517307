//! Dense tensors, a define-by-run reverse-mode autodiff graph, and Adam.
//!
//! Everything is generic over [`Real`], implemented for `f32` (training) and
//! `f64` (gradient verification). The graph is rebuilt on every forward pass:
//! each operation appends a node holding its output value and the inputs it
//! needs for the backward rule, so node order is already a topological order.

mod adam;
mod backward;
mod graph;
mod ops;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use ops::{sigmoid, BnBatchStats};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the graph can run on.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = a·b + beta·c` for row-major operands. `a` is logically `m×k`
    /// (stored `k×m` when `a_t`), `b` is logically `k×n` (stored `n×k` when `b_t`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], beta: Self);

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

fn gemm_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // strides of the logical rows×cols view
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in &mut c[..m * n] {
                        *v *= beta;
                    }
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_t);
                let (rsb, csb) = gemm_strides(k, n, b_t);
                // SAFETY: the slices hold at least m·k, k·n and m·n elements and
                // the strides address exactly those ranges.
                unsafe {
                    $kernel(
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
