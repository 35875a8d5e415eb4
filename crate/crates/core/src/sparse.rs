//! Normal equations of a chain of `D`-dimensional states coupled only to their neighbours,
//! plus a `B`-dimensional border variable coupled to every state.
//!
//! ```text
//! [ T   W ] [dx]   [g_x]
//! [ Wᵀ  S ] [db] = [g_b]      T block-tridiagonal
//! ```

use nalgebra::{Cholesky, SMatrix, SVector};

#[derive(Clone, Debug)]
pub(crate) struct ArrowSystem<const D: usize, const B: usize> {
    pub diag: Vec<SMatrix<f64, D, D>>,
    /// Block (i, i+1).
    pub off: Vec<SMatrix<f64, D, D>>,
    pub border: Vec<SMatrix<f64, D, B>>,
    pub corner: SMatrix<f64, B, B>,
    pub grad_x: Vec<SVector<f64, D>>,
    pub grad_b: SVector<f64, B>,
}

/// Joint covariance of the last state and the border, ordered `[last, border]`.
pub(crate) struct Marginal<const D: usize, const B: usize> {
    pub last: SMatrix<f64, D, D>,
    pub cross: SMatrix<f64, D, B>,
    pub border: SMatrix<f64, B, B>,
}

#[derive(Debug)]
pub(crate) struct NotPositiveDefinite;

impl<const D: usize, const B: usize> ArrowSystem<D, B> {
    pub fn new(states: usize) -> Self {
        Self {
            diag: vec![SMatrix::zeros(); states],
            off: vec![SMatrix::zeros(); states.saturating_sub(1)],
            border: vec![SMatrix::zeros(); states],
            corner: SMatrix::zeros(),
            grad_x: vec![SVector::zeros(); states],
            grad_b: SVector::zeros(),
        }
    }

    pub fn states(&self) -> usize {
        self.diag.len()
    }

    /// Accumulates `JᵀWJ` and `JᵀWe` for a factor with error `e`, information `W` and
    /// Jacobian blocks with respect to the listed states and optionally the border.
    pub fn add_factor<const M: usize>(
        &mut self,
        blocks: &[(usize, SMatrix<f64, M, D>)],
        border_jac: Option<&SMatrix<f64, M, B>>,
        error: &SVector<f64, M>,
        info: &SMatrix<f64, M, M>,
    ) {
        let w_e = info * error;
        for (a, &(i, ref ja)) in blocks.iter().enumerate() {
            let jt_w = ja.transpose() * info;
            self.diag[i] += jt_w * ja;
            self.grad_x[i] += ja.transpose() * w_e;
            for &(j, ref jb) in blocks.iter().skip(a + 1) {
                let h = jt_w * jb;
                match j as isize - i as isize {
                    1 => self.off[i] += h,
                    -1 => self.off[j] += h.transpose(),
                    0 => self.diag[i] += h + h.transpose(),
                    _ => panic!("factor couples non-adjacent states {i} and {j}"),
                }
            }
            if let Some(jb) = border_jac {
                self.border[i] += jt_w * jb;
            }
        }
        if let Some(jb) = border_jac {
            self.corner += jb.transpose() * info * jb;
            self.grad_b += jb.transpose() * w_e;
        }
    }

    /// Solves `(H + μ·diag(H)) δ = −g`. Returns state and border increments.
    pub fn solve(&self, damping: f64) -> Result<(Vec<SVector<f64, D>>, SVector<f64, B>), NotPositiveDefinite> {
        let n = self.states();
        let mut diag = self.diag.clone();
        let mut corner = self.corner;
        if damping > 0.0 {
            for d in diag.iter_mut() {
                for k in 0..D {
                    d[(k, k)] += damping * d[(k, k)].max(1e-12);
                }
            }
            for k in 0..B {
                corner[(k, k)] += damping * corner[(k, k)].max(1e-12);
            }
        }
        let fact = Factorization::new(&diag, &self.off)?;
        let neg_gx: Vec<SVector<f64, D>> = self.grad_x.iter().map(|g| -g).collect();
        let y0 = fact.solve(&neg_gx);
        if B == 0 {
            return Ok((y0, SVector::zeros()));
        }
        let y = fact.solve(&self.border);
        let mut schur = corner;
        let mut rhs = -self.grad_b;
        for i in 0..n {
            schur -= self.border[i].transpose() * y[i];
            rhs -= self.border[i].transpose() * y0[i];
        }
        let db = Cholesky::new(schur).ok_or(NotPositiveDefinite)?.solve(&rhs);
        let dx = (0..n).map(|i| y0[i] - y[i] * db).collect();
        Ok((dx, db))
    }

    /// Marginal covariance of the last state and the border under the undamped system.
    pub fn marginal(&self) -> Result<Marginal<D, B>, NotPositiveDefinite> {
        let fact = Factorization::new(&self.diag, &self.off)?;
        let last_inv = fact.last_inverse();
        if B == 0 {
            return Ok(Marginal { last: last_inv, cross: SMatrix::zeros(), border: SMatrix::zeros() });
        }
        let y = fact.solve(&self.border);
        let mut schur = self.corner;
        for i in 0..self.states() {
            schur -= self.border[i].transpose() * y[i];
        }
        let border = Cholesky::new(schur).ok_or(NotPositiveDefinite)?.inverse();
        let y_last = y[self.states() - 1];
        let cross = -y_last * border;
        let last = last_inv + y_last * border * y_last.transpose();
        Ok(Marginal { last: 0.5 * (last + last.transpose()), cross, border })
    }

    /// Newton decrement `gᵀH⁻¹g` of the undamped system.
    pub fn decrement(&self) -> Result<f64, NotPositiveDefinite> {
        let (dx, db) = self.solve(0.0)?;
        let mut total = -db.dot(&self.grad_b);
        for (d, g) in dx.iter().zip(&self.grad_x) {
            total -= d.dot(g);
        }
        Ok(total.max(0.0))
    }
}

pub(crate) const MAX_ITERATIONS: usize = 50;
const RELATIVE_COST_TOL: f64 = 1e-9;
const STEP_TOL: f64 = 1e-10;

/// Result of [`levenberg_marquardt`]: the final iterate and its undamped system.
pub(crate) struct LmOutcome<S, P, const D: usize, const B: usize> {
    pub states: Vec<S>,
    pub border: P,
    pub system: ArrowSystem<D, B>,
    pub cost: f64,
    /// Cost at the seed and after every accepted step.
    pub costs: Vec<f64>,
    pub iterations: usize,
}

/// Gauss-Newton with Levenberg-Marquardt damping whenever a step would raise the cost.
///
/// Stops when the relative cost decrease drops below 1e-9 or the step norm below 1e-10.
/// Returns the iteration count on failure.
pub(crate) fn levenberg_marquardt<S, P, const D: usize, const B: usize>(
    mut states: Vec<S>,
    mut border: P,
    assemble: impl Fn(&[S], &P) -> (ArrowSystem<D, B>, f64),
    cost_of: impl Fn(&[S], &P) -> f64,
    retract: impl Fn(&S, &SVector<f64, D>) -> S,
    retract_border: impl Fn(&P, &SVector<f64, B>) -> P,
) -> Result<LmOutcome<S, P, D, B>, usize> {
    let (mut system, mut cost) = assemble(&states, &border);
    let mut costs = vec![cost];
    let mut damping = 0.0;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let Ok((dx, db)) = system.solve(damping) else {
            damping = if damping == 0.0 { 1e-6 } else { damping * 10.0 };
            continue;
        };
        let step_norm = (dx.iter().map(|d| d.norm_squared()).sum::<f64>() + db.norm_squared()).sqrt();
        let candidate: Vec<S> = states.iter().zip(&dx).map(|(x, d)| retract(x, d)).collect();
        let candidate_border = retract_border(&border, &db);
        let new_cost = cost_of(&candidate, &candidate_border);
        if new_cost <= cost {
            let relative = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
            states = candidate;
            border = candidate_border;
            (system, cost) = assemble(&states, &border);
            costs.push(cost);
            damping = if damping < 1e-8 { 0.0 } else { damping * 0.1 };
            if relative < RELATIVE_COST_TOL || step_norm < STEP_TOL {
                return Ok(LmOutcome { states, border, system, cost, costs, iterations });
            }
        } else if step_norm < STEP_TOL {
            return Ok(LmOutcome { states, border, system, cost, costs, iterations });
        } else {
            damping = if damping == 0.0 { 1e-6 } else { damping * 10.0 };
        }
    }
    Err(iterations)
}

/// Block LDLᵀ of a symmetric block-tridiagonal matrix.
struct Factorization<const D: usize> {
    pivots: Vec<Cholesky<f64, nalgebra::Const<D>>>,
    /// G_i = D̃_i⁻¹·O_i
    gains: Vec<SMatrix<f64, D, D>>,
}

impl<const D: usize> Factorization<D> {
    fn new(diag: &[SMatrix<f64, D, D>], off: &[SMatrix<f64, D, D>]) -> Result<Self, NotPositiveDefinite> {
        let n = diag.len();
        let mut pivots = Vec::with_capacity(n);
        let mut gains = Vec::with_capacity(n.saturating_sub(1));
        let mut current = diag[0];
        for i in 0..n {
            let chol = Cholesky::new(0.5 * (current + current.transpose())).ok_or(NotPositiveDefinite)?;
            if i + 1 < n {
                let g = chol.solve(&off[i]);
                current = diag[i + 1] - off[i].transpose() * g;
                gains.push(g);
            }
            pivots.push(chol);
        }
        Ok(Self { pivots, gains })
    }

    fn solve<const C: usize>(&self, rhs: &[SMatrix<f64, D, C>]) -> Vec<SMatrix<f64, D, C>> {
        let n = rhs.len();
        let mut fwd = Vec::with_capacity(n);
        fwd.push(rhs[0]);
        for i in 1..n {
            let prev: SMatrix<f64, D, C> = fwd[i - 1];
            fwd.push(rhs[i] - self.gains[i - 1].transpose() * prev);
        }
        let mut x = vec![SMatrix::<f64, D, C>::zeros(); n];
        x[n - 1] = self.pivots[n - 1].solve(&fwd[n - 1]);
        for i in (0..n - 1).rev() {
            x[i] = self.pivots[i].solve(&fwd[i]) - self.gains[i] * x[i + 1];
        }
        x
    }

    fn last_inverse(&self) -> SMatrix<f64, D, D> {
        self.pivots.last().expect("nonempty").inverse()
    }
}
