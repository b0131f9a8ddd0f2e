//! Violation records shared by the kernel validator and the certificate checker.

use std::fmt;

/// One failed inequality at a grid location.
///
/// `margin` is `rhs - lhs`; a violation always has a negative margin (or a
/// non-finite side).
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub check_id: &'static str,
    pub state: usize,
    pub coord: f64,
    /// `None` for state-level checks (e.g. `V0^2 <= M1 V1`).
    pub action: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
}

impl Violation {
    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            Some(a) => write!(
                f,
                "{} violated at state {} (x = {}), action {}: lhs {} > rhs {}",
                self.check_id, self.state, self.coord, a, self.lhs, self.rhs
            ),
            None => write!(
                f,
                "{} violated at state {} (x = {}): lhs {} > rhs {}",
                self.check_id, self.state, self.coord, self.lhs, self.rhs
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn of_kind<'a>(&'a self, check_id: &'a str) -> impl Iterator<Item = &'a Violation> + 'a {
        self.violations
            .iter()
            .filter(move |v| v.check_id == check_id)
    }

    /// Records a violation unless `lhs <= rhs + tol`. Non-finite sides always count.
    pub(crate) fn check_le(
        &mut self,
        check_id: &'static str,
        state: usize,
        coord: f64,
        action: Option<usize>,
        lhs: f64,
        rhs: f64,
        tol: f64,
    ) {
        let ok = lhs.is_finite() && rhs.is_finite() && lhs <= rhs + tol;
        if !ok {
            self.violations.push(Violation {
                check_id,
                state,
                coord,
                action,
                lhs,
                rhs,
            });
        }
    }
}
