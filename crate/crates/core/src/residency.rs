//! Accounting of feature rows resident in memory.
//!
//! Every batch, probe or validation load hands back a [`ResidentRows`]
//! that holds a lease on the counter until it is dropped, so the peak
//! number of simultaneously loaded rows can be audited after training.

use std::fmt;
use std::ops::Deref;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::data::Matrix;

#[derive(Debug, Default)]
struct Counters {
    current: AtomicUsize,
    peak: AtomicUsize,
}

/// Shared row counter; disabled trackers count nothing.
#[derive(Debug, Clone, Default)]
pub struct Residency {
    counters: Option<Arc<Counters>>,
}

impl Residency {
    pub fn disabled() -> Self {
        Residency { counters: None }
    }

    pub fn enabled() -> Self {
        Residency {
            counters: Some(Arc::new(Counters::default())),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.counters.is_some()
    }

    pub fn lease(&self, rows: usize) -> RowLease {
        if let Some(c) = &self.counters {
            let now = c.current.fetch_add(rows, Ordering::SeqCst) + rows;
            c.peak.fetch_max(now, Ordering::SeqCst);
        }
        RowLease {
            residency: self.clone(),
            rows,
        }
    }

    pub fn current(&self) -> Option<usize> {
        self.counters
            .as_ref()
            .map(|c| c.current.load(Ordering::SeqCst))
    }

    pub fn peak(&self) -> Peak {
        match &self.counters {
            Some(c) => Peak::Rows(c.peak.load(Ordering::SeqCst)),
            None => Peak::Unmeasured,
        }
    }

    pub fn hold(&self, matrix: Matrix) -> ResidentRows {
        let lease = self.lease(matrix.rows());
        ResidentRows {
            matrix,
            _lease: lease,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Peak {
    Unmeasured,
    Rows(usize),
}

impl Peak {
    pub fn rows(&self) -> Option<usize> {
        match self {
            Peak::Rows(n) => Some(*n),
            Peak::Unmeasured => None,
        }
    }
}

impl fmt::Display for Peak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Peak::Unmeasured => f.write_str("unmeasured"),
            Peak::Rows(n) => write!(f, "{n} rows"),
        }
    }
}

#[derive(Debug)]
pub struct RowLease {
    residency: Residency,
    rows: usize,
}

impl Drop for RowLease {
    fn drop(&mut self) {
        if let Some(c) = &self.residency.counters {
            c.current.fetch_sub(self.rows, Ordering::SeqCst);
        }
    }
}

/// Loaded feature rows, counted until dropped.
#[derive(Debug)]
pub struct ResidentRows {
    matrix: Matrix,
    _lease: RowLease,
}

impl Deref for ResidentRows {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.matrix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracks_peak_across_leases() {
        let r = Residency::enabled();
        {
            let _a = r.hold(Matrix::zeros(10, 2));
            let _b = r.hold(Matrix::zeros(5, 2));
            assert_eq!(r.current(), Some(15));
        }
        let _c = r.hold(Matrix::zeros(3, 2));
        assert_eq!(r.current(), Some(3));
        assert_eq!(r.peak(), Peak::Rows(15));
    }

    #[test]
    fn disabled_reports_unmeasured() {
        let r = Residency::disabled();
        let _a = r.hold(Matrix::zeros(10, 2));
        assert_eq!(r.peak(), Peak::Unmeasured);
        assert_eq!(r.peak().to_string(), "unmeasured");
    }
}
