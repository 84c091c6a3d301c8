//! Batch iteration for scoring and for the post-training mixture fit.
//!
//! A k-NN graph needs more than `k` rows. When the final batch is too
//! short it is padded with trailing rows of the previous batch; those rows
//! only provide graph context and are not reported.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    /// Rows fed to the network: padding first, then the batch's own rows.
    pub rows: Matrix,
    /// Position of the batch's own rows inside `rows`.
    pub own: Range<usize>,
    /// Position of the batch's own rows in the source matrix.
    pub source: Range<usize>,
}

/// Splits `x` into consecutive batches of `batch_size` rows, padding a
/// short final batch to `k + 1` rows with context from its predecessor.
pub fn context_batches(x: &Matrix, batch_size: usize, k: usize) -> Result<Vec<ContextBatch>> {
    let n = x.rows();
    if batch_size <= k {
        return Err(Error::Config(format!(
            "batch size {batch_size} must exceed k = {k}"
        )));
    }
    if n <= k {
        return Err(Error::InvalidK { k, n });
    }
    let mut out = Vec::with_capacity(n.div_ceil(batch_size));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let len = end - start;
        let pad = (k + 1).saturating_sub(len);
        let idx: Vec<usize> = (start - pad..end).collect();
        out.push(ContextBatch {
            rows: x.select_rows(&idx),
            own: pad..pad + len,
            source: start..end,
        });
        start = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Matrix {
        Matrix::new(n, 1, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn exact_multiple() {
        let b = context_batches(&rows(6), 3, 2).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].own, 0..3);
        assert_eq!(b[1].source, 3..6);
    }

    #[test]
    fn short_tail_is_padded_from_previous_batch() {
        let b = context_batches(&rows(9), 4, 2).unwrap();
        assert_eq!(b.len(), 3);
        let last = &b[2];
        assert_eq!(last.source, 8..9);
        assert_eq!(last.rows.data(), &[6.0, 7.0, 8.0]);
        assert_eq!(last.own, 2..3);
    }

    #[test]
    fn too_few_rows() {
        assert!(context_batches(&rows(2), 4, 2).is_err());
        assert!(context_batches(&rows(10), 2, 2).is_err());
    }
}
