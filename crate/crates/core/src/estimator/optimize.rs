//! Projected limited-memory BFGS for box-constrained minimization.
//!
//! A compact variant of L-BFGS-B: variables sitting on a bound with the
//! gradient pushing outward are frozen for the iteration, the two-loop
//! recursion runs on the free subspace, and an Armijo backtracking search is
//! performed along the projected path `P(x + a d)`. Infinite objective values
//! are treated as infeasible and simply shrink the step.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct BoxLbfgs {
    pub memory: usize,
    pub max_iter: usize,
    /// Tolerance on the infinity norm of the projected gradient.
    pub grad_tol: f64,
}

impl Default for BoxLbfgs {
    fn default() -> Self {
        BoxLbfgs {
            memory: 8,
            max_iter: 500,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub projected_grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<Vec<f64>>,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((xi, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.clamp(lo, hi);
    }
}

/// `|| P(x - g) - x ||_inf`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| ((xi - gi).clamp(lo, hi) - xi).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BoxLbfgs {
    /// Minimize `f` over `[lower, upper]` from `x0`. `f` returns the value and
    /// gradient; a non-finite value marks an infeasible point.
    ///
    /// Returns `None` when the starting point itself is infeasible.
    pub fn minimize<F>(&self, mut f: F, x0: &[f64], lower: &[f64], upper: &[f64]) -> Option<Minimum>
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let dim = x0.len();
        let mut x = x0.to_vec();
        project(&mut x, lower, upper);
        let (mut fx, mut g) = f(&x);
        if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        let mut trace = vec![x.clone()];
        let mut iterations = 0;
        let mut pg = projected_gradient_norm(&x, &g, lower, upper);

        while iterations < self.max_iter && pg > self.grad_tol {
            iterations += 1;
            let free: Vec<bool> = (0..dim)
                .map(|i| {
                    let at_lo = x[i] <= lower[i] && g[i] > 0.0;
                    let at_hi = x[i] >= upper[i] && g[i] < 0.0;
                    !(at_lo || at_hi)
                })
                .collect();
            let mask = |v: &[f64]| -> Vec<f64> {
                v.iter().zip(&free).map(|(&a, &m)| if m { a } else { 0.0 }).collect()
            };

            let mut d = self.two_loop(&mask(&g), &history, &mask);
            let gd = dot(&g, &d);
            if !(gd < 0.0) {
                history.clear();
                d = mask(&g).iter().map(|v| -v).collect();
            }

            let first = history.is_empty();
            let mut step = if first {
                let dn = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                (1.0 / dn.max(1e-12)).min(1.0)
            } else {
                1.0
            };

            let mut accepted = None;
            for _ in 0..60 {
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
                project(&mut xn, lower, upper);
                let delta: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                if delta.iter().all(|v| *v == 0.0) {
                    break;
                }
                let (fn_, gn) = f(&xn);
                if fn_.is_finite()
                    && gn.iter().all(|v| v.is_finite())
                    && fn_ <= fx + 1e-4 * dot(&g, &delta)
                {
                    accepted = Some((xn, fn_, gn, delta));
                    break;
                }
                step *= 0.5;
            }

            let Some((xn, fn_, gn, s)) = accepted else {
                if history.is_empty() {
                    break;
                }
                history.clear();
                continue;
            };
            let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if history.len() == self.memory {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
            let stalled = (fx - fn_).abs() <= 1e-15 * fx.abs().max(1.0);
            x = xn;
            fx = fn_;
            g = gn;
            trace.push(x.clone());
            pg = projected_gradient_norm(&x, &g, lower, upper);
            if stalled && pg > self.grad_tol && history.is_empty() {
                break;
            }
        }

        Some(Minimum {
            converged: pg <= self.grad_tol,
            projected_grad_norm: pg,
            x,
            f: fx,
            grad: g,
            iterations,
            trace,
        })
    }

    fn two_loop(
        &self,
        g: &[f64],
        history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>,
        mask: &dyn Fn(&[f64]) -> Vec<f64>,
    ) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, r) in history.iter().rev() {
            let (s, y) = (mask(s), mask(y));
            let a = r * dot(&s, &q);
            for (qi, yi) in q.iter_mut().zip(&y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let (s, y) = (mask(s), mask(y));
            let yy = dot(&y, &y);
            if yy > 0.0 {
                let gamma = dot(&s, &y) / yy;
                if gamma > 0.0 {
                    q.iter_mut().for_each(|v| *v *= gamma);
                }
            }
        }
        for ((s, y, r), a) in history.iter().zip(alphas.into_iter().rev()) {
            let (s, y) = (mask(s), mask(y));
            let b = r * dot(&y, &q);
            for (qi, si) in q.iter_mut().zip(&s) {
                *qi += (a - b) * si;
            }
        }
        mask(&q).into_iter().map(|v| -v).collect()
    }
}
