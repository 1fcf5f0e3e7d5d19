//! Closed-form least-squares baseline: regress a target on ROI values at
//! time offsets `-L..=L` around each sample.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearOracle {
    n_roi: usize,
    max_offset: usize,
    coef: DVector<f64>,
}

impl LinearOracle {
    fn n_features(n_roi: usize, max_offset: usize) -> usize {
        1 + n_roi * (2 * max_offset + 1)
    }

    /// Design matrix for one scan; samples outside the scan read as zero.
    fn design(roi: &[f64], n_roi: usize, max_offset: usize) -> DMatrix<f64> {
        let len = roi.len() / n_roi;
        let p = Self::n_features(n_roi, max_offset);
        let l = max_offset as isize;
        DMatrix::from_fn(len, p, |t, j| {
            if j == 0 {
                return 1.0;
            }
            let (o, i) = ((j - 1) / n_roi, (j - 1) % n_roi);
            let src = t as isize + o as isize - l;
            if (0..len as isize).contains(&src) {
                roi[src as usize * n_roi + i]
            } else {
                0.0
            }
        })
    }

    /// Fits on `(roi [len, n_roi] row-major, target [len])` pairs. `ridge`
    /// is relative to the mean diagonal of the normal matrix.
    pub fn fit<'a>(
        data: impl IntoIterator<Item = (&'a [f64], &'a [f64])>,
        n_roi: usize,
        max_offset: usize,
        ridge: f64,
    ) -> Result<Self> {
        let p = Self::n_features(n_roi, max_offset);
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        let mut rows = 0;
        for (roi, target) in data {
            if n_roi == 0 || roi.len() != target.len() * n_roi {
                return Err(Error::invalid(format!(
                    "oracle input has {} ROI values for {} targets and {n_roi} ROIs",
                    roi.len(),
                    target.len()
                )));
            }
            let x = Self::design(roi, n_roi, max_offset);
            let y = DVector::from_column_slice(target);
            xtx.gemm_tr(1.0, &x, &x, 1.0);
            xty.gemv_tr(1.0, &x, &y, 1.0);
            rows += target.len();
        }
        if rows == 0 {
            return Err(Error::invalid("oracle needs at least one training sample"));
        }
        let lambda = ridge * xtx.trace() / p as f64;
        for j in 0..p {
            xtx[(j, j)] += lambda;
        }
        let chol = xtx.cholesky().ok_or_else(|| {
            Error::Degenerate("normal matrix is not positive definite; raise the ridge".into())
        })?;
        Ok(Self {
            n_roi,
            max_offset,
            coef: chol.solve(&xty),
        })
    }

    pub fn predict(&self, roi: &[f64]) -> Vec<f64> {
        let x = Self::design(roi, self.n_roi, self.max_offset);
        (x * &self.coef).iter().copied().collect()
    }
}
