use super::{PlanProblem, Solution};
use crate::error::Result;

/// One segment of a head's concave (influence, saving) frontier.
#[derive(Debug, Clone, Copy)]
struct Segment {
    weight: f64,
    gain: f64,
}

impl Segment {
    fn slope(&self) -> f64 {
        self.gain / self.weight
    }
}

/// Upper bound on the savings any completion of heads `h..` can collect with
/// the remaining influence budget: the LP relaxation of the multiple-choice
/// knapsack, solved greedily over frontier segments.
struct SuffixBound {
    /// Savings obtainable at zero influence, per suffix start.
    free: Vec<f64>,
    /// Frontier segments of the suffix, steepest first.
    segments: Vec<Vec<Segment>>,
}

impl SuffixBound {
    fn new(options: &[Vec<Choice>], full_cost: f64) -> Self {
        let h = options.len();
        let mut free = vec![0.0; h + 1];
        let mut segments: Vec<Vec<Segment>> = vec![Vec::new(); h + 1];
        for head in (0..h).rev() {
            let (head_free, head_segments) = frontier(&options[head], full_cost);
            free[head] = free[head + 1] + head_free;
            let mut merged = segments[head + 1].clone();
            merged.extend(head_segments);
            merged.sort_by(|a, b| b.slope().total_cmp(&a.slope()));
            segments[head] = merged;
        }
        Self { free, segments }
    }

    fn max_savings(&self, head: usize, budget: f64) -> f64 {
        let mut savings = self.free[head];
        let mut remaining = budget;
        for s in &self.segments[head] {
            if s.weight <= remaining {
                savings += s.gain;
                remaining -= s.weight;
            } else {
                savings += s.gain * (remaining / s.weight);
                break;
            }
        }
        savings
    }
}

/// Concave hull of `{(0, 0)} ∪ {(I, full − cost)}` for one head: the saving
/// available at zero influence plus the hull's positive-width segments.
fn frontier(choices: &[Choice], full_cost: f64) -> (f64, Vec<Segment>) {
    let free = choices.iter().filter(|c| c.influence == 0.0).map(|c| full_cost - c.cost).fold(0.0f64, f64::max);
    let mut points: Vec<(f64, f64)> = choices
        .iter()
        .filter(|c| c.influence > 0.0)
        .map(|c| (c.influence, full_cost - c.cost))
        .filter(|&(_, gain)| gain > free)
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));

    let mut hull: Vec<(f64, f64)> = vec![(0.0, free)];
    for p in points {
        if p.1 <= hull.last().expect("hull starts non-empty").1 {
            continue;
        }
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // Drop b when it lies on or below the chord a→p.
            if (b.1 - a.1) * (p.0 - a.0) <= (p.1 - a.1) * (b.0 - a.0) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let segments = hull.windows(2).map(|w| Segment { weight: w[1].0 - w[0].0, gain: w[1].1 - w[0].1 }).collect();
    (free, segments)
}

#[derive(Debug, Clone, Copy)]
struct Choice {
    method: usize,
    influence: f64,
    cost: f64,
}

struct Search<'a> {
    problem: &'a PlanProblem,
    options: Vec<Vec<Choice>>,
    bound: SuffixBound,
    assignment: Vec<Option<usize>>,
    best: Solution,
}

impl Search<'_> {
    fn visit(&mut self, head: usize, objective: f64, influence: f64) {
        let p = self.problem;
        if head == p.n_heads() {
            let candidate = Solution { assignment: self.assignment.clone(), objective, total_influence: influence };
            if candidate.rank(&self.best, p.n_methods()).is_lt() {
                self.best = candidate;
            }
            return;
        }
        let full = p.costs.full_cost;
        let remaining_full = (p.n_heads() - head) as f64 * full;
        let lower = objective + remaining_full - self.bound.max_savings(head, p.delta - influence);
        let tolerance = 1e-9 * self.best.objective.abs().max(1.0);
        if lower > self.best.objective + tolerance {
            return;
        }
        for i in 0..self.options[head].len() {
            let c = self.options[head][i];
            let next = influence + c.influence;
            if next > p.delta {
                continue;
            }
            self.assignment[head] = Some(c.method);
            self.visit(head + 1, objective + c.cost, next);
        }
        self.assignment[head] = None;
        self.visit(head + 1, objective + full, influence);
    }
}

/// Exact minimum-latency plan for one layer.
pub fn solve(problem: &PlanProblem) -> Result<Solution> {
    problem.validate()?;
    let h = problem.n_heads();
    let mut options: Vec<Vec<Choice>> = (0..h)
        .map(|head| {
            (0..problem.n_methods())
                .filter_map(|m| {
                    problem.eligible(head, m).map(|influence| Choice {
                        method: m,
                        influence,
                        cost: problem.method_cost(m),
                    })
                })
                .collect()
        })
        .collect();
    // Cheap, low-influence choices first so good incumbents appear early.
    for row in &mut options {
        row.sort_by(|a, b| {
            a.cost.total_cmp(&b.cost).then(a.influence.total_cmp(&b.influence)).then(a.method.cmp(&b.method))
        });
    }
    let all_full = vec![None; h];
    let (objective, total_influence) = problem.evaluate(&all_full).expect("all-Full is always feasible");
    let bound = SuffixBound::new(&options, problem.costs.full_cost);
    let mut search = Search {
        problem,
        options,
        bound,
        assignment: all_full.clone(),
        best: Solution { assignment: all_full, objective, total_influence },
    };
    search.visit(0, 0.0, 0.0);
    Ok(search.best)
}
