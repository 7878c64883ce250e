//! Built-in parameter schedule keyed on the noise level.
//!
//! Each row covers a half-open noise interval `(prev_max, sigma_max]`; the
//! first row also covers everything below it and the last row everything
//! above. Rows carry the prior-learning geometry (`k`, `window`, `d`, `m`)
//! and the shrinkage constants (`c`, `rho`, `gamma`).

/// One schedule row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRow {
    /// Upper (inclusive) noise level this row applies to.
    pub sigma_max: f64,
    /// Mixture component count.
    pub k: usize,
    /// Search window side in pixels.
    pub window: usize,
    /// Patch side in pixels.
    pub d: usize,
    /// Patches per group.
    pub m: usize,
    /// Threshold scale constant.
    pub c: f64,
    /// Iterative-regularization step.
    pub rho: f64,
    /// Noise-decay factor.
    pub gamma: f64,
}

pub const SCHEDULE: [ParamRow; 7] = [
    ParamRow { sigma_max: 10.0,  k: 64, window: 50, d: 6, m: 80,  c: 0.14, rho: 0.19, gamma: 1.08 },
    ParamRow { sigma_max: 20.0,  k: 64, window: 50, d: 6, m: 80,  c: 0.13, rho: 0.20, gamma: 1.05 },
    ParamRow { sigma_max: 30.0,  k: 64, window: 50, d: 7, m: 90,  c: 0.12, rho: 0.21, gamma: 1.05 },
    ParamRow { sigma_max: 40.0,  k: 64, window: 50, d: 8, m: 100, c: 0.11, rho: 0.22, gamma: 1.05 },
    ParamRow { sigma_max: 50.0,  k: 64, window: 50, d: 8, m: 100, c: 0.10, rho: 0.23, gamma: 1.05 },
    ParamRow { sigma_max: 75.0,  k: 64, window: 50, d: 9, m: 120, c: 0.09, rho: 0.24, gamma: 1.00 },
    ParamRow { sigma_max: 100.0, k: 64, window: 50, d: 9, m: 120, c: 0.08, rho: 0.25, gamma: 1.00 },
];

/// Schedule row for a noise level; levels above the table clamp to the last
/// row.
pub fn row_for_sigma(sigma: f64) -> &'static ParamRow {
    SCHEDULE
        .iter()
        .find(|row| sigma <= row.sigma_max)
        .unwrap_or(&SCHEDULE[SCHEDULE.len() - 1])
}

/// Default outer iteration count by noise level.
pub fn default_iters(sigma: f64) -> usize {
    if sigma <= 30.0 {
        4
    } else if sigma <= 60.0 {
        6
    } else {
        8
    }
}

/// Default reference-patch stride by patch side.
pub fn default_stride(d: usize) -> usize {
    if d <= 8 {
        4
    } else {
        5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_are_upper_inclusive() {
        assert_eq!(row_for_sigma(10.0).c, 0.14);
        assert_eq!(row_for_sigma(10.5).c, 0.13);
        assert_eq!(row_for_sigma(20.0).c, 0.13);
        assert_eq!(row_for_sigma(30.0).d, 7);
        assert_eq!(row_for_sigma(30.0001).d, 8);
        assert_eq!(row_for_sigma(100.0).c, 0.08);
        assert_eq!(row_for_sigma(150.0).c, 0.08);
    }

    #[test]
    fn iteration_and_stride_defaults() {
        assert_eq!(default_iters(30.0), 4);
        assert_eq!(default_iters(30.1), 6);
        assert_eq!(default_iters(60.0), 6);
        assert_eq!(default_iters(75.0), 8);
        assert_eq!(default_stride(8), 4);
        assert_eq!(default_stride(9), 5);
    }
}
