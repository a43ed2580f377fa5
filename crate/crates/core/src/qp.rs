//! Convex quadratic programs over the probability simplex,
//! `min xᵀQx + cᵀx  s.t.  x ≥ 0, Σx = 1`.
//!
//! Solved by accelerated projected gradient with function-value restart.
//! The step is `1/L` with `L` twice the largest eigenvalue of `Q` on the
//! hyperplane `Σx = 0`, estimated by the power method and raised on the fly
//! whenever the quadratic upper bound fails for a step.
//!
//! On ill-conditioned problems a small projected-gradient residual does not
//! mean the iterate is near the minimizer, so the iterate's face of the
//! simplex is periodically polished: the equality-constrained problem on the
//! current support is solved directly, and the result is accepted only if it
//! is nonnegative and no excluded coordinate has a lower gradient than the
//! multiplier.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::kernel::Kernel;
use crate::scalar::Real;

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;
const POWER_ITERATIONS: usize = 50;
const POWER_TOLERANCE: f64 = 1e-6;
const POLISH_INTERVAL: usize = 50;
const POLISH_RETRY: usize = 10;

/// Euclidean projection onto the probability simplex.
pub fn project_simplex<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return invalid("cannot project an empty vector onto the simplex");
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = T::zero();
    let mut theta = T::zero();
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - T::one()) / T::from_count(j + 1);
        if u - candidate > T::zero() {
            theta = candidate;
        } else {
            break;
        }
    }
    Ok(v.iter()
        .map(|&x| if x > theta { x - theta } else { T::zero() })
        .collect())
}

/// `xᵀQx + cᵀx` with `Q` symmetric positive semidefinite.
#[derive(Clone, Debug)]
pub struct QpProblem<T: Real> {
    q: DMatrix<T>,
    c: DVector<T>,
}

impl<T: Real> QpProblem<T> {
    pub fn new(q: DMatrix<T>, c: DVector<T>) -> Result<Self> {
        let d = q.nrows();
        if d == 0 || q.ncols() != d {
            return invalid("Q must be a nonempty square matrix");
        }
        if c.len() != d {
            return Err(Error::SizeMismatch(format!(
                "linear term has length {} for a {d}-dimensional problem",
                c.len()
            )));
        }
        let scale = q.amax().max(T::one());
        let asym = (&q - q.transpose()).amax();
        if asym > T::lit(1e-10) * scale {
            return invalid(format!(
                "Q is not symmetric (max asymmetry {})",
                asym.to_f64_lossy()
            ));
        }
        if q.iter().chain(c.iter()).any(|v| !v.is_finite()) {
            return invalid("QP data contains non-finite values");
        }
        Ok(Self { q, c })
    }

    /// Pure quadratic (`c = 0`).
    pub fn quadratic(q: DMatrix<T>) -> Result<Self> {
        let d = q.nrows();
        Self::new(q, DVector::zeros(d))
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn c(&self) -> &DVector<T> {
        &self.c
    }

    pub fn objective(&self, x: &[T]) -> T {
        let x = DVector::from_column_slice(x);
        x.dot(&(&self.q * &x)) + self.c.dot(&x)
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        let x = DVector::from_column_slice(x);
        let g = (&self.q * x) * T::lit(2.0) + &self.c;
        g.as_slice().to_vec()
    }

    /// Projected-gradient fixed-point residual `‖x − P(x − ∇f(x)/L)‖_∞`.
    /// It vanishes exactly at the minimizers.
    pub fn kkt_residual(&self, x: &[T], lipschitz: T) -> T {
        let g = self.gradient(x);
        let trial: Vec<T> = x
            .iter()
            .zip(&g)
            .map(|(&xi, &gi)| xi - gi / lipschitz)
            .collect();
        let p = project_simplex(&trial).expect("nonempty");
        x.iter()
            .zip(&p)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).magnitude()))
    }

    /// Power-method estimate of the gradient Lipschitz constant along the
    /// simplex: `2·λ_max` of `Q` restricted to the hyperplane `Σ dᵢ = 0`, which
    /// contains every step between feasible points.
    pub fn lipschitz_estimate(&self) -> T {
        let d = self.dim();
        let floor = T::default_epsilon() * self.q.amax().max(T::one());
        if d < 2 {
            return T::lit(2.0) * floor;
        }
        let center = |v: &mut DVector<T>| {
            let mean = v.sum() / T::from_count(d);
            v.add_scalar_mut(-mean);
        };
        // Deterministic start with components along every direction.
        let mut v = DVector::from_fn(d, |i, _| T::lit((i as f64 * 0.7 + 0.3).sin()));
        center(&mut v);
        v /= v.norm();
        let mut lambda = T::zero();
        for _ in 0..POWER_ITERATIONS {
            let mut w = &self.q * &v;
            center(&mut w);
            let next = v.dot(&w);
            let norm = w.norm();
            if norm <= T::zero() {
                break;
            }
            v = w / norm;
            let done = (next - lambda).magnitude() <= T::lit(POWER_TOLERANCE) * next.magnitude();
            lambda = next;
            if done {
                break;
            }
        }
        T::lit(2.0) * lambda.max(floor)
    }
}

#[derive(Clone, Debug)]
pub struct QpOptions<T> {
    pub tolerance: T,
    pub max_iterations: usize,
    /// Starting point; the uniform point when absent. Projected onto the simplex.
    pub warm_start: Option<Vec<T>>,
    /// Refine iterates on their face of the simplex.
    pub polish: bool,
}

impl<T: Real> Default for QpOptions<T> {
    fn default() -> Self {
        Self {
            tolerance: T::lit(DEFAULT_TOLERANCE),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            warm_start: None,
            polish: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution<T> {
    pub point: Vec<T>,
    pub objective: T,
    pub iterations: usize,
    pub kkt_residual: T,
    pub converged: bool,
}

impl<T: Real> QpSolution<T> {
    /// Reshapes the solution into a kernel.
    pub fn to_kernel(&self, rows: usize, cols: usize) -> Result<Kernel<T>> {
        Kernel::from_vec(rows, cols, self.point.clone())
    }
}

/// Solves the QP from the uniform point.
pub fn solve_qp<T: Real>(p: &QpProblem<T>, tol: T, max_iter: usize) -> Result<QpSolution<T>> {
    solve_qp_with(
        p,
        &QpOptions {
            tolerance: tol,
            max_iterations: max_iter,
            warm_start: None,
            polish: true,
        },
    )
}

pub fn solve_qp_with<T: Real>(p: &QpProblem<T>, opts: &QpOptions<T>) -> Result<QpSolution<T>> {
    if !(opts.tolerance > T::zero()) {
        return invalid("QP tolerance must be positive");
    }
    let d = p.dim();
    let start = match &opts.warm_start {
        Some(w) if w.len() == d => project_simplex(w)?,
        Some(w) => {
            return Err(Error::SizeMismatch(format!(
                "warm start of length {} for a {d}-dimensional problem",
                w.len()
            )))
        }
        None => vec![T::one() / T::from_count(d); d],
    };
    let two = T::lit(2.0);
    let mut lipschitz = p.lipschitz_estimate();

    let mut x = DVector::from_vec(start);
    let mut qx = &p.q * &x;
    let mut fx = x.dot(&qx) + p.c.dot(&x);
    let mut x_prev = x.clone();
    let mut qx_prev = qx.clone();
    let mut t = T::one();

    let mut best = (x.clone(), fx);
    let mut iterations = 0;
    let mut next_retry = 0;
    let mut polish = opts.polish;
    let mut verified = None;

    loop {
        let small = p.kkt_residual(x.as_slice(), lipschitz) <= opts.tolerance;
        if !polish {
            if small {
                verified = Some((x.clone(), fx));
                break;
            }
        } else if iterations % POLISH_INTERVAL == 0 || (small && iterations >= next_retry) {
            next_retry = iterations + POLISH_RETRY;
            match polish_face(p, &x) {
                Polish::Optimal(xp) => {
                    let fp = p.objective(xp.as_slice());
                    let slack = T::lit(1e3) * T::default_epsilon() * (fx.magnitude() + T::one());
                    if fp <= fx + slack
                        && p.kkt_residual(xp.as_slice(), lipschitz) <= opts.tolerance
                    {
                        verified = Some((xp, fp));
                        break;
                    }
                    if small {
                        verified = Some((x.clone(), fx));
                        break;
                    }
                }
                Polish::Singular | Polish::Incomplete if small => {
                    verified = Some((x.clone(), fx));
                    break;
                }
                Polish::Incomplete => polish = false,
                Polish::Singular => {}
            }
        }
        if iterations >= opts.max_iterations {
            break;
        }
        iterations += 1;
        let t_next = (T::one() + (T::one() + T::lit(4.0) * t * t).sqrt()) / two;
        let beta = (t - T::one()) / t_next;
        let y = &x + (&x - &x_prev) * beta;
        let qy = &qx + (&qx - &qx_prev) * beta;
        let grad = &qy * two + &p.c;

        // Raise L until the quadratic model majorizes the objective along the step.
        let (x_new, qx_new) = loop {
            let trial: Vec<T> = y
                .iter()
                .zip(grad.iter())
                .map(|(&yi, &gi)| yi - gi / lipschitz)
                .collect();
            let x_new = DVector::from_vec(project_simplex(&trial)?);
            let qx_new = &p.q * &x_new;
            let step = &x_new - &y;
            let curvature = step.dot(&(&qx_new - &qy));
            if curvature <= lipschitz / two * step.norm_squared() * (T::one() + T::lit(1e-12)) {
                break (x_new, qx_new);
            }
            lipschitz *= T::lit(1.5);
        };
        let f_new = x_new.dot(&qx_new) + p.c.dot(&x_new);

        if f_new > fx && beta > T::zero() {
            // Restart: drop momentum and take a plain projected-gradient step next.
            t = T::one();
            x_prev = x.clone();
            qx_prev = qx.clone();
            continue;
        }
        x_prev = std::mem::replace(&mut x, x_new);
        qx_prev = std::mem::replace(&mut qx, qx_new);
        fx = f_new;
        t = t_next;
        if fx <= best.1 {
            best = (x.clone(), fx);
        }
    }

    let converged = verified.is_some();
    let (point, objective) = verified.unwrap_or(best);
    let point = point.as_slice().to_vec();
    let kkt_residual = p.kkt_residual(&point, lipschitz);
    if !converged {
        log::debug!(
            "QP stopped after {iterations} iterations with KKT residual {:.3e}",
            kkt_residual.to_f64_lossy()
        );
    }
    Ok(QpSolution {
        objective,
        point,
        iterations,
        kkt_residual,
        converged,
    })
}

enum Polish<T: Real> {
    /// Point satisfying every optimality condition.
    Optimal(DVector<T>),
    /// The refinement ran out of steps.
    Incomplete,
    /// A face system could not be solved.
    Singular,
}

/// Primal active-set refinement from a feasible point. Each step solves the
/// equality-constrained problem on the current support; a negative solution
/// is met with a ratio-test step back toward feasibility, and a
/// nonnegative one admits the coordinate whose gradient most undercuts the
/// multiplier. The objective never increases.
fn polish_face<T: Real>(p: &QpProblem<T>, start: &DVector<T>) -> Polish<T> {
    let d = p.dim();
    let mut x = start.clone();
    let mut support: Vec<usize> = (0..d).filter(|&i| x[i] > T::zero()).collect();
    // Coordinates dropped by a zero-length step may not re-enter until the
    // objective decreases, which rules out the enter/drop cycle at a
    // degenerate vertex.
    let mut tabu: Vec<usize> = Vec::new();
    for _ in 0..(4 * d + 10) {
        let Some((z, mu)) = solve_face(p, &support) else {
            return Polish::Singular;
        };
        let blocking: Vec<(usize, T)> = support
            .iter()
            .filter(|&&i| z[i] <= T::zero())
            .map(|&i| (i, x[i] / (x[i] - z[i])))
            .collect();
        if blocking.is_empty() {
            // The face solve meets Σx = 1 only up to its conditioning.
            let total = z.sum();
            let z = z / total;
            let (f_old, f_new) = (p.objective(x.as_slice()), p.objective(z.as_slice()));
            if f_new < f_old - T::lit(16.0) * T::default_epsilon() * (f_old.magnitude() + T::one())
            {
                tabu.clear();
            }
            x = z;
            let grad = &p.q * &x * T::lit(2.0) + &p.c;
            let scale = grad.amax().max(mu.magnitude()).max(T::default_epsilon());
            let floor = mu - T::simplex_tolerance() * scale;
            let entering = (0..d)
                .filter(|i| !support.contains(i) && !tabu.contains(i) && grad[*i] < floor)
                .min_by(|&a, &b| {
                    grad[a]
                        .partial_cmp(&grad[b])
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
            match entering {
                Some(j) => support.push(j),
                None => return Polish::Optimal(x),
            }
        } else {
            let step = blocking.iter().fold(T::one(), |m, &(_, t)| m.min(t));
            x = &x + (&z - &x) * step;
            for &(i, t) in &blocking {
                if t <= step {
                    x[i] = T::zero();
                    if step <= T::zero() {
                        tabu.push(i);
                    }
                }
            }
            support.retain(|&i| x[i] > T::zero());
            let total = x.sum();
            x /= total;
        }
    }
    Polish::Incomplete
}

/// Minimizer and multiplier of `xᵀQx + cᵀx` subject to `Σx = 1` and
/// `x_i = 0` off the support.
fn solve_face<T: Real>(p: &QpProblem<T>, support: &[usize]) -> Option<(DVector<T>, T)> {
    let k = support.len();
    if k == 0 {
        return None;
    }
    // [2Q_SS  -1; 1ᵀ 0] [x_S; μ] = [-c_S; 1]
    let mut a = DMatrix::zeros(k + 1, k + 1);
    let mut rhs = DVector::zeros(k + 1);
    for (ai, &i) in support.iter().enumerate() {
        for (bj, &j) in support.iter().enumerate() {
            a[(ai, bj)] = T::lit(2.0) * p.q[(i, j)];
        }
        a[(ai, k)] = -T::one();
        a[(k, ai)] = T::one();
        rhs[ai] = -p.c[i];
    }
    rhs[k] = T::one();
    let sol = a.clone().lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let residual = (&a * &sol - &rhs).amax();
    let scale = a.amax() * sol.amax() + rhs.amax();
    if residual > T::lit(1e-8) * scale {
        return None;
    }
    let mut z = DVector::zeros(p.dim());
    for (ai, &i) in support.iter().enumerate() {
        z[i] = sol[ai];
    }
    Some((z, sol[k]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn projection_examples() {
        assert_close(
            &project_simplex(&[0.2, 0.3, 0.5]).unwrap(),
            &[0.2, 0.3, 0.5],
            1e-15,
        );
        assert_close(&project_simplex(&[1.0, 1.0]).unwrap(), &[0.5, 0.5], 1e-15);
        assert_close(
            &project_simplex(&[0.9, -0.1, 0.3]).unwrap(),
            &[0.8, 0.0, 0.2],
            1e-15,
        );
        assert!(project_simplex::<f64>(&[]).is_err());
    }

    #[test]
    fn projection_matches_grid_search() {
        // Brute-force nearest simplex point on a 1e-3 grid.
        let v = [0.9, -0.1, 0.3];
        let mut best = (f64::INFINITY, [0.0; 3]);
        for i in 0..=1000 {
            for j in 0..=(1000 - i) {
                let p = [
                    i as f64 / 1000.0,
                    j as f64 / 1000.0,
                    (1000 - i - j) as f64 / 1000.0,
                ];
                let d: f64 = p.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, p);
                }
            }
        }
        assert_close(&project_simplex(&v).unwrap(), &best.1, 1e-3);
    }

    #[test]
    fn projection_is_feasible_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = project_simplex(&v).unwrap();
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_close(&project_simplex(&p).unwrap(), &p, 1e-14);
        }
    }

    #[test]
    fn identity_hessian_gives_uniform_point() {
        let p = QpProblem::quadratic(DMatrix::<f64>::identity(4, 4)).unwrap();
        let sol = solve_qp(&p, 1e-8, 10_000).unwrap();
        assert!(sol.converged);
        assert_close(&sol.point, &[0.25; 4], 1e-8);
    }

    #[test]
    fn diagonal_hessian_closed_form() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 10.0]));
        let p = QpProblem::quadratic(q).unwrap();
        let sol = solve_qp(&p, 1e-10, 10_000).unwrap();
        assert!(sol.converged);
        assert_close(&sol.point, &[10.0 / 11.0, 1.0 / 11.0], 1e-6);
    }

    #[test]
    fn linear_term_moves_the_minimizer_to_a_vertex() {
        let q = DMatrix::<f64>::identity(3, 3) * 1e-3;
        let c = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let sol = solve_qp(&QpProblem::new(q, c).unwrap(), 1e-10, 10_000).unwrap();
        assert!(sol.converged);
        assert_close(&sol.point, &[0.0, 1.0, 0.0], 1e-9);
    }

    #[test]
    fn rejects_bad_problems() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(QpProblem::quadratic(asym).is_err());
        let q = DMatrix::<f64>::identity(2, 2);
        assert!(QpProblem::new(q.clone(), DVector::zeros(3)).is_err());
        let p = QpProblem::quadratic(q).unwrap();
        assert!(solve_qp(&p, 0.0, 10).is_err());
    }

    #[test]
    fn iteration_cap_returns_flagged_feasible_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = DMatrix::<f64>::from_fn(30, 30, |_, _| rng.random_range(-1.0..1.0));
        let p = QpProblem::quadratic(m.transpose() * m).unwrap();
        let opts = QpOptions {
            tolerance: 1e-14,
            max_iterations: 3,
            warm_start: None,
            polish: false,
        };
        let sol = solve_qp_with(&p, &opts).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 3);
        assert!((sol.point.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(sol.point.iter().all(|&x| x >= 0.0));
        assert!(sol.objective <= p.objective(&[1.0 / 30.0; 30]));
    }

    #[test]
    fn solution_beats_uniform_and_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..10 {
            let d = rng.random_range(2..12);
            let m = DMatrix::<f64>::from_fn(d + 2, d, |_, _| rng.random_range(-1.0..1.0));
            let c = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let p = QpProblem::new(m.transpose() * m, c).unwrap();
            let sol = solve_qp(&p, 1e-9, 20_000).unwrap();
            assert!(
                sol.converged,
                "kkt {} iters {} d {}",
                sol.kkt_residual, sol.iterations, d
            );
            assert!(sol.objective <= p.objective(&vec![1.0 / d as f64; d]) + 1e-12);
            for i in 0..d {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                assert!(sol.objective <= p.objective(&e) + 1e-12);
            }
        }
    }

    #[test]
    fn warm_start_of_wrong_length_is_rejected() {
        let p = QpProblem::quadratic(DMatrix::<f64>::identity(3, 3)).unwrap();
        let opts = QpOptions {
            warm_start: Some(vec![1.0, 0.0]),
            ..QpOptions::default()
        };
        assert!(matches!(
            solve_qp_with(&p, &opts),
            Err(Error::SizeMismatch(_))
        ));
    }

    #[test]
    fn polished_and_plain_solutions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..10 {
            let d = rng.random_range(2..10);
            let m = DMatrix::<f64>::from_fn(d + 3, d, |_, _| rng.random_range(-1.0..1.0));
            let c = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let p = QpProblem::new(m.transpose() * m, c).unwrap();
            let plain = solve_qp_with(
                &p,
                &QpOptions {
                    tolerance: 1e-12,
                    max_iterations: 100_000,
                    warm_start: None,
                    polish: false,
                },
            )
            .unwrap();
            let polished = solve_qp(&p, 1e-12, 100_000).unwrap();
            assert!(polished.converged);
            assert!(polished.objective <= plain.objective + 1e-12);
            assert_close(&polished.point, &plain.point, 1e-5);
        }
    }

    #[test]
    fn ill_conditioned_problem_is_solved_exactly() {
        // Eigenvalues spread over eight decades.
        let d = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let basis = DMatrix::<f64>::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
            .qr()
            .q();
        let spectrum = DVector::from_fn(d, |i, _| 10f64.powf(8.0 * i as f64 / (d - 1) as f64));
        let q = &basis * DMatrix::from_diagonal(&spectrum) * basis.transpose();
        let q = (&q + q.transpose()) * 0.5;
        let c = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let p = QpProblem::new(q, c).unwrap();
        let sol = solve_qp(&p, 1e-10, 10_000).unwrap();
        assert!(sol.converged);
        // First-order conditions: equal gradients on the support, no lower gradient off it.
        let g = p.gradient(&sol.point);
        let mu = (0..d)
            .filter(|&i| sol.point[i] > 0.0)
            .map(|i| g[i])
            .fold(f64::INFINITY, f64::min);
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            assert!(g[i] >= mu - 1e-7 * scale);
            if sol.point[i] > 0.0 {
                assert!((g[i] - mu).abs() <= 1e-7 * scale);
            }
        }
    }
}
