//! Dense convex quadratic programming.
//!
//! Solves `min ½ zᵀHz + fᵀz` subject to `A_eq z = b_eq`, `lower ≤ z ≤ upper`
//! and any number of disjoint unit-simplex blocks. The main path is the dual
//! active-set method of Goldfarb and Idnani: it starts from the unconstrained
//! minimizer and adds violated constraints one at a time, so no feasible
//! starting point is needed and infeasibility is detected when no dual step
//! can restore the violated constraint. Problems without general equality
//! rows can fall back to accelerated projected gradient, with simplex blocks
//! handled by the sort-based Euclidean projection.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm_inf, norm_sq, Cholesky, HouseholderQr, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram<T> {
    pub h: Matrix<T>,
    pub f: Vec<T>,
    pub a_eq: Matrix<T>,
    pub b_eq: Vec<T>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    pub simplex_blocks: Vec<Range<usize>>,
}

impl<T: Scalar> QuadraticProgram<T> {
    /// Unconstrained program.
    pub fn new(h: Matrix<T>, f: Vec<T>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_eq: Matrix::zeros(0, n),
            b_eq: Vec::new(),
            lower: vec![T::neg_infinity(); n],
            upper: vec![T::infinity(); n],
            simplex_blocks: Vec::new(),
        }
    }

    pub fn with_equalities(mut self, a_eq: Matrix<T>, b_eq: Vec<T>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn with_bounds(mut self, lower: Vec<T>, upper: Vec<T>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_simplex_block(mut self, block: Range<usize>) -> Self {
        self.simplex_blocks.push(block);
        self
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, z: &[T]) -> T {
        T::lit(0.5) * self.h.quad_form(z) + dot(&self.f, z)
    }

    pub fn has_general_equalities(&self) -> bool {
        self.a_eq.rows() > 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let bad = |msg: String| Err(Error::InvalidProgram(msg));
        if self.h.shape() != (n, n) {
            return bad(format!("H is {:?}, expected {n}x{n}", self.h.shape()));
        }
        if self.a_eq.cols() != n || self.a_eq.rows() != self.b_eq.len() {
            return bad("equality block has inconsistent shape".into());
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bound vectors have wrong length".into());
        }
        let sym_tol = T::tol(1e-10, 16.0) * (T::one() + self.h.max_abs());
        if !self.h.is_symmetric(sym_tol) {
            return bad("H is not symmetric".into());
        }
        if !self.h.is_finite() || self.f.iter().any(|v| !v.is_finite()) {
            return bad("non-finite objective data".into());
        }
        let mut seen = vec![false; n];
        for b in &self.simplex_blocks {
            if b.start >= b.end || b.end > n {
                return bad(format!("simplex block {b:?} out of range"));
            }
            for i in b.clone() {
                if seen[i] {
                    return bad("simplex blocks overlap".into());
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// Plain-text dump for offline inspection.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let n = self.dim();
        let _ = writeln!(s, "# qp n={n} m_eq={}", self.a_eq.rows());
        let mut mat = |name: &str, m: &Matrix<T>| {
            let _ = writeln!(s, "{name} {} {}", m.rows(), m.cols());
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        };
        mat("H", &self.h);
        mat("Aeq", &self.a_eq);
        let mut vector = |name: &str, v: &[T]| {
            let row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{name} {}", row.join(" "));
        };
        vector("f", &self.f);
        vector("beq", &self.b_eq);
        vector("lower", &self.lower);
        vector("upper", &self.upper);
        for b in &self.simplex_blocks {
            let _ = writeln!(s, "simplex {} {}", b.start, b.end);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions<T> {
    pub tol_stationarity: T,
    pub tol_feasibility: T,
    pub tol_complementarity: T,
    pub max_iter: usize,
    /// Relative diagonal shift used when `H` is only semidefinite.
    pub ridge: T,
    /// When set, every instance is written here as `qp-<digest>.txt`.
    pub dump_dir: Option<PathBuf>,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            tol_stationarity: T::tol(1e-7, 1e3),
            tol_feasibility: T::tol(1e-8, 1e3),
            tol_complementarity: T::tol(1e-7, 1e3),
            max_iter: 1000,
            ridge: T::tol(1e-10, 16.0),
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// KKT residuals, each already divided by the problem's natural scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals<T> {
    pub stationarity: T,
    pub primal: T,
    pub complementarity: T,
}

impl<T: Scalar> KktResiduals<T> {
    pub fn within(&self, opts: &SolverOptions<T>) -> bool {
        self.stationarity <= opts.tol_stationarity
            && self.primal <= opts.tol_feasibility
            && self.complementarity <= opts.tol_complementarity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub z: Vec<T>,
    pub objective: T,
    pub status: QpStatus,
    pub iterations: usize,
    /// One multiplier per equality row.
    pub eq_multipliers: Vec<T>,
    /// Positive where a lower bound (or simplex nonnegativity) is active,
    /// negative where an upper bound is active.
    pub bound_multipliers: Vec<T>,
    /// One multiplier per simplex block's sum constraint.
    pub simplex_multipliers: Vec<T>,
    pub kkt: KktResiduals<T>,
}

impl<T: Scalar> QpSolution<T> {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Eq(usize),
    SimplexSum(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Debug, Clone)]
struct Constraint<T> {
    normal: Vec<T>,
    rhs: T,
    equality: bool,
    origin: Origin,
}

struct ActiveEntry<T> {
    index: usize,
    sign: T,
    multiplier: T,
    // L⁻¹ (sign · normal), cached across iterations.
    whitened: Vec<T>,
}

fn build_constraints<T: Scalar>(qp: &QuadraticProgram<T>) -> Vec<Constraint<T>> {
    let n = qp.dim();
    let unit = |i: usize, s: T| {
        let mut v = vec![T::zero(); n];
        v[i] = s;
        v
    };
    let mut out = Vec::new();
    for r in 0..qp.a_eq.rows() {
        out.push(Constraint {
            normal: qp.a_eq.row(r).to_vec(),
            rhs: qp.b_eq[r],
            equality: true,
            origin: Origin::Eq(r),
        });
    }
    let mut in_simplex = vec![false; n];
    for (bi, b) in qp.simplex_blocks.iter().enumerate() {
        let mut normal = vec![T::zero(); n];
        for i in b.clone() {
            normal[i] = T::one();
            in_simplex[i] = true;
        }
        out.push(Constraint {
            normal,
            rhs: T::one(),
            equality: true,
            origin: Origin::SimplexSum(bi),
        });
    }
    for i in 0..n {
        let lo = if in_simplex[i] {
            qp.lower[i].max(T::zero())
        } else {
            qp.lower[i]
        };
        if lo.is_finite() {
            out.push(Constraint {
                normal: unit(i, T::one()),
                rhs: lo,
                equality: false,
                origin: Origin::Lower(i),
            });
        }
        if qp.upper[i].is_finite() {
            out.push(Constraint {
                normal: unit(i, -T::one()),
                rhs: -qp.upper[i],
                equality: false,
                origin: Origin::Upper(i),
            });
        }
    }
    out
}

/// Cholesky of `H + δI` with the smallest `δ` from a geometric ladder that
/// succeeds. Fails when `H` is indefinite beyond the ladder's top.
fn factor_with_ridge<T: Scalar>(h: &Matrix<T>, ridge: T) -> Result<Cholesky<T>> {
    if let Some(c) = h.cholesky() {
        return Ok(c);
    }
    let n = h.rows();
    let scale = (0..n).fold(T::one(), |m, i| m.max(h[(i, i)].abs()));
    let mut delta = ridge * scale;
    let top = T::tol(1e-8, 1e3) * scale;
    loop {
        let mut shifted = h.clone();
        for i in 0..n {
            shifted[(i, i)] = shifted[(i, i)] + delta;
        }
        if let Some(c) = shifted.cholesky() {
            return Ok(c);
        }
        if delta > top {
            return Err(Error::InvalidProgram(
                "H is not positive semidefinite within tolerance".into(),
            ));
        }
        delta = delta * T::lit(10.0);
    }
}

/// Solves a convex QP. Only malformed input is an `Err`; infeasibility and
/// the iteration cap are reported through [`QpSolution::status`].
pub fn solve<T: Scalar>(qp: &QuadraticProgram<T>, opts: &SolverOptions<T>) -> Result<QpSolution<T>> {
    qp.validate()?;
    dump_if_requested(qp, opts)?;
    let primary = goldfarb_idnani(qp, opts)?;
    if primary.status == QpStatus::Optimal || primary.status == QpStatus::Infeasible {
        return Ok(primary);
    }
    if projection_applicable(qp) {
        let fallback = solve_projected_gradient(qp, opts)?;
        if fallback.status == QpStatus::Optimal || fallback.objective < primary.objective {
            return Ok(fallback);
        }
    }
    Ok(primary)
}

fn dump_if_requested<T: Scalar>(qp: &QuadraticProgram<T>, opts: &SolverOptions<T>) -> Result<()> {
    if let Some(dir) = &opts.dump_dir {
        std::fs::create_dir_all(dir)?;
        let text = qp.to_text();
        let digest = Sha256::digest(text.as_bytes());
        let name: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        std::fs::write(dir.join(format!("qp-{name}.txt")), text)?;
    }
    Ok(())
}

fn goldfarb_idnani<T: Scalar>(qp: &QuadraticProgram<T>, opts: &SolverOptions<T>) -> Result<QpSolution<T>> {
    let n = qp.dim();
    let chol = factor_with_ridge(&qp.h, opts.ridge)?;
    let constraints = build_constraints(qp);

    let mut x: Vec<T> = chol.solve(&qp.f).into_iter().map(|v| -v).collect();
    let mut active: Vec<ActiveEntry<T>> = Vec::new();
    let mut is_active = vec![false; constraints.len()];
    let mut redundant = vec![false; constraints.len()];
    let mut iterations = 0usize;
    let mut status = QpStatus::Optimal;

    let pick_tol = opts.tol_feasibility * T::lit(0.1);
    let dep_tol = T::epsilon().sqrt() * T::lit(1e-2);

    'outer: loop {
        // Equalities enter first (even if satisfied, so they stay enforced);
        // then the most violated inequality.
        let mut choice: Option<(usize, T)> = None;
        for (ci, c) in constraints.iter().enumerate() {
            if c.equality && !is_active[ci] && !redundant[ci] {
                let s = dot(&c.normal, &x) - c.rhs;
                choice = Some((ci, if s > T::zero() { -T::one() } else { T::one() }));
                break;
            }
        }
        if choice.is_none() {
            let mut worst = -pick_tol;
            for (ci, c) in constraints.iter().enumerate() {
                if c.equality || is_active[ci] {
                    continue;
                }
                let s = (dot(&c.normal, &x) - c.rhs) / (T::one() + c.rhs.abs());
                if s < worst {
                    worst = s;
                    choice = Some((ci, T::one()));
                }
            }
        }
        let Some((p, sign)) = choice else { break };

        let np: Vec<T> = constraints[p].normal.iter().map(|&v| v * sign).collect();
        let bp = constraints[p].rhs * sign;
        let d = chol.solve_lower(&np);
        let d_norm_sq = norm_sq(&d);
        let mut u_p = T::zero();

        loop {
            iterations += 1;
            if iterations > opts.max_iter {
                status = QpStatus::MaxIter;
                break 'outer;
            }
            let s = dot(&np, &x) - bp;
            let q = active.len();
            let (r, resid) = if q == 0 {
                (Vec::new(), d.clone())
            } else {
                let b = Matrix::from_fn(n, q, |i, j| active[j].whitened[i]);
                let qr = HouseholderQr::new(&b);
                let mut qd = qr.qt_mul(&d);
                let r = qr.solve_r(&qd);
                for v in qd.iter_mut().take(q) {
                    *v = T::zero();
                }
                (r, qr.q_mul(&qd))
            };
            let resid_sq = norm_sq(&resid);
            let dependent = resid_sq <= dep_tol * dep_tol * d_norm_sq.max(T::min_positive_value());

            // Largest dual step keeping active inequality multipliers >= 0.
            let mut t1 = T::infinity();
            let mut drop_at = None;
            for (j, e) in active.iter().enumerate() {
                if !constraints[e.index].equality && r[j] > T::zero() {
                    let ratio = e.multiplier / r[j];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(j);
                    }
                }
            }
            let t2 = if dependent { T::infinity() } else { -s / resid_sq };

            if dependent && constraints[p].equality && s.abs() <= opts.tol_feasibility {
                redundant[p] = true;
                continue 'outer;
            }
            let t = t1.min(t2);
            if !t.is_finite() {
                status = QpStatus::Infeasible;
                break 'outer;
            }
            for (j, e) in active.iter_mut().enumerate() {
                e.multiplier = e.multiplier - t * r[j];
            }
            u_p = u_p + t;
            if t2.is_finite() {
                let z = chol.solve_upper(&resid);
                axpy(t, &z, &mut x);
            }
            if t2 <= t1 {
                is_active[p] = true;
                active.push(ActiveEntry {
                    index: p,
                    sign,
                    multiplier: u_p,
                    whitened: d.clone(),
                });
                break;
            }
            let k = drop_at.expect("finite partial step has a blocking constraint");
            is_active[active[k].index] = false;
            active.remove(k);
        }
    }

    Ok(finish(qp, x, status, iterations, &constraints, &active))
}

fn finish<T: Scalar>(
    qp: &QuadraticProgram<T>,
    z: Vec<T>,
    status: QpStatus,
    iterations: usize,
    constraints: &[Constraint<T>],
    active: &[ActiveEntry<T>],
) -> QpSolution<T> {
    let n = qp.dim();
    let mut eq_mult = vec![T::zero(); qp.a_eq.rows()];
    let mut bound_mult = vec![T::zero(); n];
    let mut simplex_mult = vec![T::zero(); qp.simplex_blocks.len()];
    let mut grad = qp.h.mul_vec(&z);
    axpy(T::one(), &qp.f, &mut grad);
    let scale = T::one() + norm_inf(&grad).max(norm_inf(&qp.f));
    let mut compl = T::zero();
    for e in active {
        let c = &constraints[e.index];
        let u = e.multiplier * e.sign;
        axpy(-u, &c.normal, &mut grad);
        match c.origin {
            Origin::Eq(r) => eq_mult[r] = u,
            Origin::SimplexSum(b) => simplex_mult[b] = u,
            Origin::Lower(i) => bound_mult[i] = u,
            Origin::Upper(i) => bound_mult[i] = -u,
        }
        if !c.equality {
            let s = dot(&c.normal, &z) - c.rhs;
            compl = compl.max((u * s).abs()).max(-u);
        }
    }
    let kkt = KktResiduals {
        stationarity: norm_inf(&grad) / scale,
        primal: primal_residual(qp, &z),
        complementarity: compl / scale,
    };
    let status = match status {
        QpStatus::Optimal if kkt.stationarity.is_finite() => QpStatus::Optimal,
        QpStatus::Optimal => QpStatus::MaxIter,
        other => other,
    };
    QpSolution {
        objective: qp.objective(&z),
        z,
        status,
        iterations,
        eq_multipliers: eq_mult,
        bound_multipliers: bound_mult,
        simplex_multipliers: simplex_mult,
        kkt,
    }
}

/// Largest violation of any constraint, relative to `1 + |rhs|`.
pub fn primal_residual<T: Scalar>(qp: &QuadraticProgram<T>, z: &[T]) -> T {
    let mut worst = T::zero();
    for r in 0..qp.a_eq.rows() {
        let res = (dot(qp.a_eq.row(r), z) - qp.b_eq[r]).abs() / (T::one() + qp.b_eq[r].abs());
        worst = worst.max(res);
    }
    for i in 0..qp.dim() {
        if qp.lower[i].is_finite() {
            worst = worst.max((qp.lower[i] - z[i]) / (T::one() + qp.lower[i].abs()));
        }
        if qp.upper[i].is_finite() {
            worst = worst.max((z[i] - qp.upper[i]) / (T::one() + qp.upper[i].abs()));
        }
    }
    for b in &qp.simplex_blocks {
        let sum: T = z[b.clone()].iter().copied().sum();
        worst = worst.max((sum - T::one()).abs());
        for &v in &z[b.clone()] {
            worst = worst.max(-v);
        }
    }
    worst
}

fn projection_applicable<T: Scalar>(qp: &QuadraticProgram<T>) -> bool {
    !qp.has_general_equalities()
        && qp.simplex_blocks.iter().all(|b| {
            b.clone()
                .all(|i| qp.lower[i] <= T::zero() && qp.upper[i] >= T::one())
        })
}

fn project_feasible<T: Scalar>(qp: &QuadraticProgram<T>, z: &mut [T]) {
    let mut in_simplex = vec![false; z.len()];
    for b in &qp.simplex_blocks {
        let p = project_simplex(&z[b.clone()]);
        z[b.clone()].copy_from_slice(&p);
        in_simplex[b.clone()].iter_mut().for_each(|f| *f = true);
    }
    for i in 0..z.len() {
        if !in_simplex[i] {
            z[i] = z[i].max(qp.lower[i]).min(qp.upper[i]);
        }
    }
}

/// Accelerated projected gradient (FISTA with restart). Applicable when the
/// only constraints are bounds and simplex blocks whose bounds contain `[0, 1]`.
pub fn solve_projected_gradient<T: Scalar>(
    qp: &QuadraticProgram<T>,
    opts: &SolverOptions<T>,
) -> Result<QpSolution<T>> {
    qp.validate()?;
    if !projection_applicable(qp) {
        return Err(Error::InvalidProgram(
            "projected gradient needs bound and simplex constraints only".into(),
        ));
    }
    let n = qp.dim();
    let lipschitz = qp.h.norm_inf().max(T::min_positive_value());
    let step = T::one() / lipschitz;
    let mut z = vec![T::zero(); n];
    project_feasible(qp, &mut z);
    let mut y = z.clone();
    let mut t = T::one();
    let mut prev_obj = qp.objective(&z);
    let mut iterations = 0;
    let mut status = QpStatus::MaxIter;
    let max_iter = opts.max_iter.max(20_000);
    while iterations < max_iter {
        iterations += 1;
        let mut grad = qp.h.mul_vec(&y);
        axpy(T::one(), &qp.f, &mut grad);
        let mut next = y.clone();
        axpy(-step, &grad, &mut next);
        project_feasible(qp, &mut next);
        let obj = qp.objective(&next);
        let t_next = (T::one() + (T::one() + T::lit(4.0) * t * t).sqrt()) * T::lit(0.5);
        if obj > prev_obj {
            // Restart momentum.
            y = z.clone();
            t = T::one();
            continue;
        }
        let mom = (t - T::one()) / t_next;
        y = next
            .iter()
            .zip(&z)
            .map(|(&a, &b)| a + mom * (a - b))
            .collect();
        let moved = norm_inf(&crate::linalg::sub(&next, &z));
        z = next;
        t = t_next;
        prev_obj = obj;
        if gradient_mapping_residual(qp, &z) <= opts.tol_stationarity * T::lit(0.1)
            && moved <= opts.tol_feasibility
        {
            status = QpStatus::Optimal;
            break;
        }
    }
    let stationarity = gradient_mapping_residual(qp, &z);
    let status = if stationarity <= opts.tol_stationarity {
        QpStatus::Optimal
    } else {
        status
    };
    Ok(QpSolution {
        objective: qp.objective(&z),
        kkt: KktResiduals {
            stationarity,
            primal: primal_residual(qp, &z),
            complementarity: T::zero(),
        },
        z,
        status,
        iterations,
        eq_multipliers: Vec::new(),
        bound_multipliers: vec![T::zero(); n],
        simplex_multipliers: vec![T::zero(); qp.simplex_blocks.len()],
    })
}

// ‖z − Π(z − ∇f(z))‖∞ scaled like the KKT stationarity residual.
fn gradient_mapping_residual<T: Scalar>(qp: &QuadraticProgram<T>, z: &[T]) -> T {
    let mut grad = qp.h.mul_vec(z);
    axpy(T::one(), &qp.f, &mut grad);
    let scale = T::one() + norm_inf(&grad).max(norm_inf(&qp.f));
    let mut moved = z.to_vec();
    axpy(-T::one(), &grad, &mut moved);
    project_feasible(qp, &mut moved);
    norm_inf(&crate::linalg::sub(z, &moved)) / scale
}

/// Euclidean projection onto `{α : Σα = 1, α ≥ 0}` (sort-and-threshold).
pub fn project_simplex<T: Scalar>(v: &[T]) -> Vec<T> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = T::zero();
    let mut theta = T::zero();
    for (i, &u) in sorted.iter().enumerate() {
        cumsum = cumsum + u;
        let k = T::from_usize(i + 1).expect("index fits scalar");
        let candidate = (cumsum - T::one()) / k;
        if u - candidate > T::zero() {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(T::zero())).collect()
}
