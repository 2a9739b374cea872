use super::{PlanProblem, Solution};
use crate::error::{Error, Result};

/// Largest number of assignments [`brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// Enumerates all `(M + 1)^H` assignments and keeps the best under the same
/// ranking as [`super::solve`].
pub fn brute_force(problem: &PlanProblem) -> Result<Solution> {
    problem.validate()?;
    let h = problem.n_heads();
    let radix = problem.n_methods() + 1;
    let total = (radix as f64).powi(h as i32);
    if total > BRUTE_FORCE_LIMIT as f64 {
        return Err(Error::InstanceTooLarge { assignments: total, limit: BRUTE_FORCE_LIMIT });
    }

    // Odometer over digit vectors; digit `radix - 1` is Full.
    let mut digits = vec![0usize; h];
    let mut best: Option<Solution> = None;
    loop {
        let assignment: Vec<Option<usize>> = digits.iter().map(|&d| (d + 1 < radix).then_some(d)).collect();
        if let Some((objective, total_influence)) = problem.evaluate(&assignment) {
            let candidate = Solution { assignment, objective, total_influence };
            if best.as_ref().is_none_or(|b| candidate.rank(b, problem.n_methods()).is_lt()) {
                best = Some(candidate);
            }
        }
        let mut pos = 0;
        while pos < h {
            digits[pos] += 1;
            if digits[pos] < radix {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
        if pos == h {
            break;
        }
    }
    Ok(best.expect("all-Full is always feasible"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::HeadStrategy;
    use crate::solver::{CostModel, MethodCost};

    fn problem(influences: Vec<Vec<Option<f64>>>, delta: f64, coeff: f64) -> PlanProblem {
        let arrow = HeadStrategy::Arrow { window_blocks: 1 };
        PlanProblem {
            methods: vec![arrow],
            costs: CostModel { full_cost: 1.0, methods: vec![MethodCost { strategy: arrow, cost: 0.4 }] },
            influences,
            delta,
            coeff,
        }
    }

    #[test]
    fn single_method_taken_when_cheaper() {
        let s = brute_force(&problem(vec![vec![Some(0.1)]], 0.5, 1.0)).unwrap();
        assert_eq!(s.assignment, vec![Some(0)]);
        assert_eq!(s.objective, 0.4);

        let mut p = problem(vec![vec![Some(0.1)]], 0.5, 1.0);
        p.costs.methods[0].cost = 1.0;
        let s = brute_force(&p).unwrap();
        assert_eq!(s.assignment, vec![None], "equal cost gains nothing and adds influence");
    }

    #[test]
    fn everything_over_cap_is_all_full() {
        let s = brute_force(&problem(vec![vec![Some(0.5)]; 4], 1.0, 1.5)).unwrap();
        assert_eq!(s.assignment, vec![None; 4]);
        assert_eq!(s.objective, 4.0);
    }

    #[test]
    fn too_large_is_rejected() {
        let p = problem(vec![vec![Some(0.0)]; 24], 1.0, 1.0);
        assert!(matches!(brute_force(&p), Err(Error::InstanceTooLarge { .. })));
    }
}
