//! SQP outer loop and dense primal active-set QP for the controller.
//!
//! The controller's criteria are affine in the decision variable, so the
//! Gauss-Newton quadratic model is exact and the outer loop converges in one
//! or two iterations; the loop structure still enforces a non-increasing
//! cost across accepted steps.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};

use crate::real::Real;

const N: usize = 7;
const MAX_OUTER: usize = 20;
const MAX_QP_ITERS: usize = 100;
const STEP_TOL: f64 = 1e-8;

pub(crate) struct SqpResult<T: Real> {
    pub x: SVector<T, N>,
    pub iterations: usize,
}

/// Scale a candidate toward the origin until every homogeneous constraint
/// `a_iᵀx ≤ b_i` (with `b_i > 0`) holds strictly.
pub(crate) fn pull_feasible<T: Real>(
    x: SVector<T, N>,
    rows: &[SVector<T, N>],
    bounds: &[T],
) -> SVector<T, N> {
    let mut scale = T::one();
    for (row, b) in rows.iter().zip(bounds) {
        let v = row.dot(&x);
        if v > *b {
            scale = scale.min(*b / v * T::of(0.999_999));
        }
    }
    x * scale
}

/// Minimize `½ xᵀHx + gᵀx + c` subject to `a_iᵀx ≤ b_i`, starting from the
/// feasible `x0`. `H` must be positive-definite. The cost closure evaluates
/// the true objective for the line search.
pub(crate) fn sqp_minimize<T: Real>(
    h: &SMatrix<T, N, N>,
    g: &SVector<T, N>,
    cost: impl Fn(&SVector<T, N>) -> T,
    x0: SVector<T, N>,
    rows: &[SVector<T, N>],
    bounds: &[T],
) -> Option<SqpResult<T>> {
    let mut x = x0;
    let mut fx = cost(&x);
    let mut iterations = 0;

    for _ in 0..MAX_OUTER {
        iterations += 1;
        // gradient of the quadratic model at x
        let grad = h * x + g;
        let step = solve_qp_step(h, &grad, &x, rows, bounds)?;
        if step.norm() < T::of(STEP_TOL) {
            break;
        }
        // accepted steps never increase the cost
        let mut alpha = T::one();
        let mut accepted = false;
        for _ in 0..12 {
            let cand = x + step * alpha;
            let fc = cost(&cand);
            if fc <= fx {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            alpha *= T::of(0.5);
        }
        if !accepted {
            break;
        }
        if (step * alpha).norm() < T::of(STEP_TOL) {
            break;
        }
    }
    Some(SqpResult { x, iterations })
}

/// Primal active-set solve of `min ½ dᵀHd + gᵀd` s.t. `a_iᵀ(x+d) ≤ b_i`.
/// Returns the step `d`; `None` when the iteration cap is hit.
fn solve_qp_step<T: Real>(
    h: &SMatrix<T, N, N>,
    g: &SVector<T, N>,
    x: &SVector<T, N>,
    rows: &[SVector<T, N>],
    bounds: &[T],
) -> Option<SVector<T, N>> {
    let m = rows.len();
    let slack: Vec<T> = (0..m).map(|i| bounds[i] - rows[i].dot(x)).collect();
    let mut d = SVector::<T, N>::zeros();
    // start from the currently-tight constraints
    let mut working: Vec<usize> = (0..m)
        .filter(|&i| slack[i] < T::of(1e-10))
        .take(N - 1)
        .collect();

    for _ in 0..MAX_QP_ITERS {
        // equality-constrained step via the KKT system
        let nw = working.len();
        let dim = N + nw;
        let mut kkt = DMatrix::<T>::zeros(dim, dim);
        let mut rhs = DVector::<T>::zeros(dim);
        for r in 0..N {
            for c in 0..N {
                kkt[(r, c)] = h[(r, c)];
            }
            rhs[r] = -(g[r] + (h * d)[r]);
        }
        for (k, &ci) in working.iter().enumerate() {
            for r in 0..N {
                kkt[(r, N + k)] = rows[ci][r];
                kkt[(N + k, r)] = rows[ci][r];
            }
            rhs[N + k] = T::zero(); // keep working constraints tight
        }
        let lu = kkt.full_piv_lu();
        let sol = match lu.solve(&rhs) {
            Some(s) => s,
            None => {
                // linearly dependent working set: drop the newest constraint
                working.pop()?;
                continue;
            }
        };
        let p = SVector::<T, N>::from_fn(|i, _| sol[i]);

        if p.norm() < T::of(1e-12) {
            // KKT point of the working set; check the multipliers
            let mut min_lambda = T::zero();
            let mut drop_idx = None;
            for k in 0..nw {
                let lambda = sol[N + k];
                if lambda < min_lambda {
                    min_lambda = lambda;
                    drop_idx = Some(k);
                }
            }
            match drop_idx {
                None => return Some(d),
                Some(k) => {
                    working.remove(k);
                }
            }
        } else {
            // longest feasible step toward the equality-constrained optimum
            let mut alpha = T::one();
            let mut blocker = None;
            for i in 0..m {
                if working.contains(&i) {
                    continue;
                }
                let denom = rows[i].dot(&p);
                if denom > T::of(1e-14) {
                    let room = bounds[i] - rows[i].dot(&(*x + d));
                    let a = (room / denom).max(T::zero());
                    if a < alpha {
                        alpha = a;
                        blocker = Some(i);
                    }
                }
            }
            d += p * alpha;
            if let Some(b) = blocker {
                if working.len() == N {
                    working.pop();
                }
                working.push(b);
            }
        }
    }
    None
}
