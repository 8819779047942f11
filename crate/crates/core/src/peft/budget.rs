use serde::{Deserialize, Serialize};

use crate::error::{DeptError, Result};

/// A `(m, r)` split of a vanilla prompt budget `l·d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSolution {
    pub m: usize,
    pub r: usize,
    /// `m·d + (s + d)·r`.
    pub trainable_params: usize,
    /// `l·d`.
    pub budget: usize,
    /// `budget − trainable_params`, zero when the split is exact.
    pub slack: usize,
}

/// Largest rank `r` such that a prompt of `m` rows plus an `s×r`, `r×d`
/// pair fits in the parameter count of an `l`-row prompt:
/// `r = ⌊(l − m)·d / (s + d)⌋`.
pub fn solve_budget(l: usize, d: usize, s: usize, m: usize) -> Result<BudgetSolution> {
    if d == 0 || s == 0 {
        return Err(DeptError::Config("d and s must be >= 1".into()));
    }
    if m > l {
        return Err(DeptError::Budget { m, l });
    }
    let budget = l * d;
    let r = (l - m) * d / (s + d);
    let trainable_params = m * d + (s + d) * r;
    Ok(BudgetSolution {
        m,
        r,
        trainable_params,
        budget,
        slack: budget - trainable_params,
    })
}
