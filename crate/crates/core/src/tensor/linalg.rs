use super::Tensor;
use crate::error::{BnnError, Result};
use crate::scalar::Scalar;

/// Operand orientation for [`Tensor::matmul_into`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

fn dims2<T: Scalar>(t: &Tensor<T>, tr: Trans, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(BnnError::dim(op, t.shape(), &[]));
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Ok(match tr {
        Trans::No => (r, c),
        Trans::Yes => (c, r),
    })
}

impl<T: Scalar> Tensor<T> {
    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_t(b, Trans::No, Trans::No)
    }

    /// `selfᵀ · b`.
    pub fn matmul_tn(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_t(b, Trans::Yes, Trans::No)
    }

    /// `self · bᵀ`.
    pub fn matmul_nt(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_t(b, Trans::No, Trans::Yes)
    }

    fn matmul_t(&self, b: &Tensor<T>, ta: Trans, tb: Trans) -> Result<Tensor<T>> {
        let (m, _) = dims2(self, ta, "matmul")?;
        let (_, n) = dims2(b, tb, "matmul")?;
        let mut out = Tensor::zeros(&[m, n]);
        Tensor::matmul_into(self, ta, b, tb, T::zero(), &mut out)?;
        Ok(out)
    }

    /// `out = op(a) · op(b) + beta · out`.
    pub fn matmul_into(
        a: &Tensor<T>,
        ta: Trans,
        b: &Tensor<T>,
        tb: Trans,
        beta: T,
        out: &mut Tensor<T>,
    ) -> Result<()> {
        let (m, k) = dims2(a, ta, "matmul")?;
        let (k2, n) = dims2(b, tb, "matmul")?;
        if k != k2 {
            return Err(BnnError::dim("matmul", a.shape(), b.shape()));
        }
        if out.shape() != [m, n] {
            return Err(BnnError::dim("matmul output", out.shape(), &[m, n]));
        }
        if m == 0 || n == 0 {
            return Ok(());
        }
        let a_cols = a.shape()[1] as isize;
        let b_cols = b.shape()[1] as isize;
        let (rsa, csa) = match ta {
            Trans::No => (a_cols, 1),
            Trans::Yes => (1, a_cols),
        };
        let (rsb, csb) = match tb {
            Trans::No => (b_cols, 1),
            Trans::Yes => (1, b_cols),
        };
        // SAFETY: shapes were checked above, so every strided view is in bounds.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                beta,
                out.data_mut().as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(())
    }
}
