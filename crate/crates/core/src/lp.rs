//! Dense linear programming with optimal-basis reporting.
//!
//! Solves `max objective·θ  s.t.  Aθ ≤ b,  lo ≤ θ ≤ hi` by revised simplex
//! and returns the optimizer together with the active set and a dual vector
//! that is verified against the KKT conditions before the report is handed
//! back.  Two orientations share one simplex core: the primal form keeps a
//! basis of size (rows), the dual form keeps a basis of size (variables) and
//! is selected automatically when the system is much taller than it is wide.
//!
//! Problem sizes here are desk scale (at most a few thousand rows, a few
//! hundred variables), so the basis is refactored from scratch every pivot;
//! no incremental LU updates, no sparsity.

use nalgebra::{DMatrix, DVector};

/// Tight-row test: `|A_i θ - b_i| ≤ TIGHT_TOL_REL · (1 + |b_i|)`.
pub const TIGHT_TOL_REL: f64 = 1e-7;

/// Tolerance for the KKT identities certified on every Optimal report.
pub const KKT_TOL: f64 = 1e-8;

const REDUCED_COST_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-10;
const DEGENERATE_STEP_TOL: f64 = 1e-12;
const BLAND_TRIGGER: usize = 30;
const PHASE1_FEAS_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub enum LpError {
    InvalidProgram(String),
    NumericalError(String),
}

impl std::fmt::Display for LpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LpError::InvalidProgram(m) => write!(f, "invalid linear program: {m}"),
            LpError::NumericalError(m) => write!(f, "numerical failure in simplex: {m}"),
        }
    }
}

impl std::error::Error for LpError {}

/// `max objective·θ  s.t.  Aθ ≤ b,  bounds.0 ≤ θ ≤ bounds.1`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub a: DMatrix<f64>,
    pub b: Vec<f64>,
    /// Per-variable `(lower, upper)`; entries may be infinite.
    pub bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>, a: DMatrix<f64>, b: Vec<f64>) -> Self {
        let n = objective.len();
        LinearProgram { objective, a, b, bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n] }
    }

    pub fn with_box_radius(objective: Vec<f64>, a: DMatrix<f64>, b: Vec<f64>, r: f64) -> Self {
        assert!(r > 0.0 && r.is_finite());
        let n = objective.len();
        LinearProgram { objective, a, b, bounds: vec![(-r, r); n] }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    fn validate(&self) -> Result<(), LpError> {
        let n = self.n_vars();
        let m = self.n_rows();
        if self.a.nrows() != m || self.a.ncols() != n {
            return Err(LpError::InvalidProgram(format!(
                "A is {}x{}, expected {}x{}",
                self.a.nrows(),
                self.a.ncols(),
                m,
                n
            )));
        }
        if self.bounds.len() != n {
            return Err(LpError::InvalidProgram("bounds length mismatch".into()));
        }
        if !self.objective.iter().all(|v| v.is_finite()) {
            return Err(LpError::InvalidProgram("objective has non-finite entries".into()));
        }
        if !self.a.iter().all(|v| v.is_finite()) {
            return Err(LpError::InvalidProgram("A has non-finite entries".into()));
        }
        if !self.b.iter().all(|v| v.is_finite()) {
            return Err(LpError::InvalidProgram("b has non-finite entries".into()));
        }
        for (lo, hi) in &self.bounds {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(LpError::InvalidProgram("empty or NaN variable bound".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SolveStatus {
    Optimal,
    Unbounded,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Optimizer when Optimal; empty otherwise.
    pub theta: Vec<f64>,
    /// `objective·theta` when Optimal, `+inf` when Unbounded, `-inf` when Infeasible.
    pub objective_value: f64,
    /// Indices of tight rows of `A` (box bounds are reported separately).
    pub active_set: Vec<usize>,
    /// Multipliers for the rows of `A`; nonnegative, complementary to slack.
    pub duals: Vec<f64>,
    /// Multipliers for active lower/upper variable bounds (length n each).
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    /// Improving direction when Unbounded: feasible ray with positive objective gain.
    pub ray: Option<Vec<f64>>,
    /// Infeasibility certificate when Infeasible: `f ≥ 0`, `Ā'f = 0`, `b̄·f < 0`
    /// over the box-extended row system.
    pub farkas: Option<Vec<f64>>,
}

/// Indices of rows satisfying the scale-aware tightness test at `theta`.
pub fn tight_rows(a: &DMatrix<f64>, b: &[f64], theta: &[f64]) -> Vec<usize> {
    let th = DVector::from_column_slice(theta);
    let ax = a * th;
    (0..b.len())
        .filter(|&i| (ax[i] - b[i]).abs() <= TIGHT_TOL_REL * (1.0 + b[i].abs()))
        .collect()
}

/// Plain-text dump of a program, one row per line, for debugging.
pub fn dump_lp(lp: &LinearProgram) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "maximize {:?}", lp.objective);
    for i in 0..lp.n_rows() {
        let row: Vec<f64> = (0..lp.n_vars()).map(|j| lp.a[(i, j)]).collect();
        let _ = writeln!(s, "row {i}: {row:?} <= {}", lp.b[i]);
    }
    for (j, (lo, hi)) in lp.bounds.iter().enumerate() {
        let _ = writeln!(s, "var {j}: {lo} <= theta <= {hi}");
    }
    s
}

// Box-extended row system: main rows first, then one row per finite upper
// bound (θ_j ≤ hi_j), then one per finite lower bound (-θ_j ≤ -lo_j).
struct Extended {
    c: Vec<f64>,
    a: DMatrix<f64>,
    b: Vec<f64>,
    n: usize,
    m_main: usize,
    // (variable, is_upper) for each appended row, in order
    box_rows: Vec<(usize, bool)>,
}

fn extend_with_box(lp: &LinearProgram) -> Extended {
    let n = lp.n_vars();
    let m = lp.n_rows();
    let mut box_rows = Vec::new();
    for (j, (_, hi)) in lp.bounds.iter().enumerate() {
        if hi.is_finite() {
            box_rows.push((j, true));
        }
    }
    for (j, (lo, _)) in lp.bounds.iter().enumerate() {
        if lo.is_finite() {
            box_rows.push((j, false));
        }
    }
    let mt = m + box_rows.len();
    let mut a = DMatrix::zeros(mt, n);
    let mut b = vec![0.0; mt];
    if m > 0 {
        a.view_mut((0, 0), (m, n)).copy_from(&lp.a);
        b[..m].copy_from_slice(&lp.b);
    }
    for (k, &(j, upper)) in box_rows.iter().enumerate() {
        if upper {
            a[(m + k, j)] = 1.0;
            b[m + k] = lp.bounds[j].1;
        } else {
            a[(m + k, j)] = -1.0;
            b[m + k] = -lp.bounds[j].0;
        }
    }
    Extended { c: lp.objective.clone(), a, b, n, m_main: m, box_rows }
}

enum RawOutcome {
    Optimal { theta: Vec<f64>, lambda: Vec<f64> },
    Unbounded { ray: Vec<f64> },
    Infeasible { farkas: Vec<f64> },
}

/// Solves the program and certifies the result.  Returns `NumericalError`
/// only when pivoting stalls or the certified identities fail by more than a
/// hundred times their tolerance.
pub fn solve_lp(lp: &LinearProgram) -> Result<SolveReport, LpError> {
    lp.validate()?;
    let ext = extend_with_box(lp);
    let tall = ext.b.len() > (4 * ext.n).max(160);
    let outcome = if tall {
        match solve_dual_oriented(&ext)? {
            Some(o) => o,
            None => solve_direct(&ext)?,
        }
    } else {
        solve_direct(&ext)?
    };
    build_report(lp, &ext, outcome)
}

fn build_report(lp: &LinearProgram, ext: &Extended, outcome: RawOutcome) -> Result<SolveReport, LpError> {
    let n = ext.n;
    let m = ext.m_main;
    match outcome {
        RawOutcome::Optimal { theta, lambda } => {
            let mut duals = lambda[..m].to_vec();
            let mut lower_duals = vec![0.0; n];
            let mut upper_duals = vec![0.0; n];
            for (k, &(j, upper)) in ext.box_rows.iter().enumerate() {
                if upper {
                    upper_duals[j] = lambda[m + k].max(0.0);
                } else {
                    lower_duals[j] = lambda[m + k].max(0.0);
                }
            }
            for d in duals.iter_mut() {
                if *d < 0.0 && *d > -1e-9 {
                    *d = 0.0;
                }
            }
            verify_kkt(lp, ext, &theta, &duals, &lower_duals, &upper_duals)?;
            let objective_value = dot(&lp.objective, &theta);
            let active_set = tight_rows(&lp.a, &lp.b, &theta);
            Ok(SolveReport {
                status: SolveStatus::Optimal,
                theta,
                objective_value,
                active_set,
                duals,
                lower_duals,
                upper_duals,
                ray: None,
                farkas: None,
            })
        }
        RawOutcome::Unbounded { ray } => Ok(SolveReport {
            status: SolveStatus::Unbounded,
            theta: Vec::new(),
            objective_value: f64::INFINITY,
            active_set: Vec::new(),
            duals: vec![0.0; m],
            lower_duals: vec![0.0; n],
            upper_duals: vec![0.0; n],
            ray: Some(ray),
            farkas: None,
        }),
        RawOutcome::Infeasible { farkas } => Ok(SolveReport {
            status: SolveStatus::Infeasible,
            theta: Vec::new(),
            objective_value: f64::NEG_INFINITY,
            active_set: Vec::new(),
            duals: vec![0.0; m],
            lower_duals: vec![0.0; n],
            upper_duals: vec![0.0; n],
            ray: None,
            farkas: Some(farkas),
        }),
    }
}

fn verify_kkt(
    lp: &LinearProgram,
    ext: &Extended,
    theta: &[f64],
    duals: &[f64],
    lower_duals: &[f64],
    upper_duals: &[f64],
) -> Result<(), LpError> {
    let hard = 100.0 * KKT_TOL;
    let th = DVector::from_column_slice(theta);
    let ax = &ext.a * &th;
    for i in 0..ext.b.len() {
        let viol = ax[i] - ext.b[i];
        if viol > hard * (1.0 + ext.b[i].abs()) {
            return Err(LpError::NumericalError(format!(
                "primal infeasibility {viol:.3e} at row {i} of the extended system"
            )));
        }
    }
    // stationarity: objective = A'λ + upper_duals - lower_duals
    let mut grad = lp.objective.to_vec();
    for j in 0..lp.n_vars() {
        for i in 0..lp.n_rows() {
            grad[j] -= lp.a[(i, j)] * duals[i];
        }
        grad[j] -= upper_duals[j];
        grad[j] += lower_duals[j];
    }
    let scale = 1.0 + lp.objective.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for (j, g) in grad.iter().enumerate() {
        if g.abs() > hard * scale {
            return Err(LpError::NumericalError(format!(
                "stationarity residual {g:.3e} at variable {j}"
            )));
        }
    }
    for (i, d) in duals.iter().enumerate() {
        if *d < -hard {
            return Err(LpError::NumericalError(format!("negative dual {d:.3e} at row {i}")));
        }
        let slack = lp.b[i] - ax[i];
        if (d * slack).abs() > hard * (1.0 + lp.b[i].abs()) * (1.0 + d.abs()) {
            return Err(LpError::NumericalError(format!(
                "complementary slackness violated at row {i}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simplex core on  min cost·x  s.t.  A x = rhs,  lo ≤ x ≤ hi
// ---------------------------------------------------------------------------

struct StandardForm {
    a: DMatrix<f64>,
    rhs: Vec<f64>,
    cost: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

enum SimplexResult {
    Optimal { x: Vec<f64>, y: Vec<f64> },
    Unbounded { ray: Vec<f64> },
    Infeasible { y: Vec<f64> },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum VarState {
    Basic,
    AtLower,
    AtUpper,
    FreeZero,
}

struct Simplex {
    a: DMatrix<f64>,
    rhs: Vec<f64>,
    cost: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    basis: Vec<usize>,
    state: Vec<VarState>,
    x: Vec<f64>,
    bland: bool,
    degenerate_streak: usize,
}

enum LoopEnd {
    Optimal { y: Vec<f64> },
    Unbounded { entering: usize, sigma: f64, w: DVector<f64> },
}

impl Simplex {
    fn nonbasic_value(&self, j: usize) -> f64 {
        match self.state[j] {
            VarState::AtLower => self.lo[j],
            VarState::AtUpper => self.hi[j],
            VarState::FreeZero => 0.0,
            VarState::Basic => unreachable!(),
        }
    }

    fn run(&mut self) -> Result<LoopEnd, LpError> {
        let m = self.basis.len();
        let ntot = self.cost.len();
        let max_iter = 200 + 50 * (ntot + m);
        for _ in 0..max_iter {
            // factor the basis and recompute all values from it
            let mut bmat = DMatrix::zeros(m, m);
            for (p, &j) in self.basis.iter().enumerate() {
                bmat.set_column(p, &self.a.column(j));
            }
            let lu = bmat.clone().lu();
            let mut r = DVector::from_column_slice(&self.rhs);
            for j in 0..ntot {
                if self.state[j] != VarState::Basic {
                    let v = self.nonbasic_value(j);
                    self.x[j] = v;
                    if v != 0.0 {
                        r -= self.a.column(j) * v;
                    }
                }
            }
            let xb = lu
                .solve(&r)
                .ok_or_else(|| LpError::NumericalError("singular basis matrix".into()))?;
            for (p, &j) in self.basis.iter().enumerate() {
                self.x[j] = xb[p];
            }
            // multipliers: B' y = cost_B
            let cb = DVector::from_iterator(m, self.basis.iter().map(|&j| self.cost[j]));
            let y = bmat
                .transpose()
                .lu()
                .solve(&cb)
                .ok_or_else(|| LpError::NumericalError("singular basis matrix".into()))?;

            // pricing
            let mut entering: Option<(usize, f64, f64)> = None; // (var, sigma, score)
            for j in 0..ntot {
                if self.state[j] == VarState::Basic || self.lo[j] == self.hi[j] {
                    continue;
                }
                let d = self.cost[j] - y.dot(&self.a.column(j));
                let (eligible, sigma) = match self.state[j] {
                    VarState::AtLower => (d < -REDUCED_COST_TOL, 1.0),
                    VarState::AtUpper => (d > REDUCED_COST_TOL, -1.0),
                    VarState::FreeZero => (d.abs() > REDUCED_COST_TOL, -d.signum()),
                    VarState::Basic => unreachable!(),
                };
                if !eligible {
                    continue;
                }
                if self.bland {
                    entering = Some((j, sigma, 0.0));
                    break;
                }
                let score = d.abs();
                if entering.is_none_or(|(_, _, s)| score > s) {
                    entering = Some((j, sigma, score));
                }
            }
            let Some((enter, sigma, _)) = entering else {
                return Ok(LoopEnd::Optimal { y: y.iter().copied().collect() });
            };

            let w = lu
                .solve(&DVector::from(self.a.column(enter).clone_owned()))
                .ok_or_else(|| LpError::NumericalError("singular basis matrix".into()))?;

            // ratio test: entering moves by sigma·t, basic p moves by -sigma·w[p]·t
            let own_span = self.hi[enter] - self.lo[enter];
            let mut t_best = if own_span.is_finite() { own_span } else { f64::INFINITY };
            let mut leave: Option<usize> = None;
            for p in 0..m {
                let delta = -sigma * w[p];
                if delta.abs() <= PIVOT_TOL {
                    continue;
                }
                let jb = self.basis[p];
                let v = self.x[jb];
                let t_p = if delta < 0.0 {
                    if self.lo[jb].is_finite() {
                        ((v - self.lo[jb]) / (-delta)).max(0.0)
                    } else {
                        continue;
                    }
                } else if self.hi[jb].is_finite() {
                    ((self.hi[jb] - v) / delta).max(0.0)
                } else {
                    continue;
                };
                match leave {
                    None if t_p <= t_best => {
                        t_best = t_p;
                        leave = Some(p);
                    }
                    Some(_) if t_p < t_best - 1e-12 => {
                        t_best = t_p;
                        leave = Some(p);
                    }
                    Some(q) if t_p <= t_best + 1e-12 => {
                        // tie: Bland keeps the smallest variable index,
                        // otherwise prefer the largest pivot magnitude
                        let swap = if self.bland {
                            self.basis[p] < self.basis[q]
                        } else {
                            w[p].abs() > w[q].abs()
                        };
                        if swap {
                            t_best = t_best.min(t_p);
                            leave = Some(p);
                        }
                    }
                    _ => {}
                }
            }

            if t_best.is_infinite() {
                return Ok(LoopEnd::Unbounded { entering: enter, sigma, w });
            }

            if t_best <= DEGENERATE_STEP_TOL {
                self.degenerate_streak += 1;
                if self.degenerate_streak > BLAND_TRIGGER {
                    self.bland = true;
                }
            } else {
                self.degenerate_streak = 0;
            }

            match leave {
                None => {
                    // bound flip: entering crosses its own span
                    self.state[enter] =
                        if sigma > 0.0 { VarState::AtUpper } else { VarState::AtLower };
                }
                Some(p) => {
                    let jb = self.basis[p];
                    let delta = -sigma * w[p];
                    self.state[jb] = if delta < 0.0 {
                        VarState::AtLower
                    } else {
                        VarState::AtUpper
                    };
                    self.basis[p] = enter;
                    self.state[enter] = VarState::Basic;
                }
            }
        }
        Err(LpError::NumericalError("pivot limit exceeded".into()))
    }
}

/// Runs phase 1 (artificial variables) then phase 2 on a standard-form
/// program.  `slack_cols`, when given, maps each row to the column of its
/// slack variable so rows with nonnegative initial residual can start with
/// the slack basic instead of an artificial.
fn bounded_simplex(sf: StandardForm, slack_cols: Option<&[usize]>) -> Result<SimplexResult, LpError> {
    let m = sf.rhs.len();
    let n_struct = sf.cost.len();
    debug_assert!(m > 0);

    // initial nonbasic placement for structural variables
    let mut state = Vec::with_capacity(n_struct);
    for j in 0..n_struct {
        state.push(if sf.lo[j].is_finite() {
            VarState::AtLower
        } else if sf.hi[j].is_finite() {
            VarState::AtUpper
        } else {
            VarState::FreeZero
        });
    }
    let init_val = |st: VarState, j: usize| match st {
        VarState::AtLower => sf.lo[j],
        VarState::AtUpper => sf.hi[j],
        _ => 0.0,
    };
    let mut resid = sf.rhs.clone();
    for j in 0..n_struct {
        let v = init_val(state[j], j);
        if v != 0.0 {
            for i in 0..m {
                resid[i] -= sf.a[(i, j)] * v;
            }
        }
    }

    // rows whose slack can start basic need no artificial
    let mut basis = vec![usize::MAX; m];
    let mut art_rows = Vec::new();
    for i in 0..m {
        let slack_ok = slack_cols
            .map(|sc| resid[i] >= 0.0 && sf.lo[sc[i]] == 0.0)
            .unwrap_or(false);
        if slack_ok {
            basis[i] = slack_cols.unwrap()[i];
        } else {
            art_rows.push(i);
        }
    }

    let n_art = art_rows.len();
    let ntot = n_struct + n_art;
    let mut a = DMatrix::zeros(m, ntot);
    a.view_mut((0, 0), (m, n_struct)).copy_from(&sf.a);
    let mut lo = sf.lo.clone();
    let mut hi = sf.hi.clone();
    let mut phase1_cost = vec![0.0; ntot];
    for (k, &i) in art_rows.iter().enumerate() {
        let col = n_struct + k;
        a[(i, col)] = if resid[i] >= 0.0 { 1.0 } else { -1.0 };
        lo.push(0.0);
        hi.push(f64::INFINITY);
        phase1_cost[col] = 1.0;
        basis[i] = col;
        state.push(VarState::Basic);
    }
    for &b in &basis {
        debug_assert!(b != usize::MAX);
        state[b] = VarState::Basic;
    }

    let mut sx = Simplex {
        a,
        rhs: sf.rhs.clone(),
        cost: phase1_cost,
        lo,
        hi,
        basis,
        state,
        x: vec![0.0; ntot],
        bland: false,
        degenerate_streak: 0,
    };

    if n_art > 0 {
        match sx.run()? {
            LoopEnd::Optimal { y } => {
                let infeas: f64 = (n_struct..ntot).map(|j| sx.x[j].max(0.0)).sum();
                let scale = 1.0 + sf.rhs.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                if infeas > PHASE1_FEAS_TOL * scale {
                    return Ok(SimplexResult::Infeasible { y });
                }
            }
            LoopEnd::Unbounded { .. } => {
                return Err(LpError::NumericalError("phase 1 reported unbounded".into()));
            }
        }
        // pin artificials at zero so they can never re-enter
        for j in n_struct..ntot {
            sx.lo[j] = 0.0;
            sx.hi[j] = 0.0;
        }
    }

    sx.cost = {
        let mut c = vec![0.0; ntot];
        c[..n_struct].copy_from_slice(&sf.cost);
        c
    };
    sx.bland = false;
    sx.degenerate_streak = 0;

    match sx.run()? {
        LoopEnd::Optimal { y } => Ok(SimplexResult::Optimal { x: sx.x[..n_struct].to_vec(), y }),
        LoopEnd::Unbounded { entering, sigma, w } => {
            let mut ray = vec![0.0; n_struct];
            if entering < n_struct {
                ray[entering] = sigma;
            }
            for (p, &j) in sx.basis.iter().enumerate() {
                if j < n_struct {
                    ray[j] = -sigma * w[p];
                }
            }
            Ok(SimplexResult::Unbounded { ray })
        }
    }
}

// direct orientation: variables (θ free, slack per row), basis of size m̄
fn solve_direct(ext: &Extended) -> Result<RawOutcome, LpError> {
    let n = ext.n;
    let mt = ext.b.len();
    if mt == 0 {
        // fully unconstrained program
        return if ext.c.iter().all(|&v| v == 0.0) {
            Ok(RawOutcome::Optimal { theta: vec![0.0; n], lambda: Vec::new() })
        } else {
            Ok(RawOutcome::Unbounded { ray: ext.c.clone() })
        };
    }
    let ntot = n + mt;
    let mut a = DMatrix::zeros(mt, ntot);
    a.view_mut((0, 0), (mt, n)).copy_from(&ext.a);
    for i in 0..mt {
        a[(i, n + i)] = 1.0;
    }
    let mut cost = vec![0.0; ntot];
    for j in 0..n {
        cost[j] = -ext.c[j];
    }
    let mut lo = vec![f64::NEG_INFINITY; ntot];
    let hi = vec![f64::INFINITY; ntot];
    for i in 0..mt {
        lo[n + i] = 0.0;
    }
    let slack_cols: Vec<usize> = (0..mt).map(|i| n + i).collect();
    let sf = StandardForm { a, rhs: ext.b.clone(), cost, lo, hi };
    match bounded_simplex(sf, Some(&slack_cols))? {
        SimplexResult::Optimal { x, y } => {
            let theta = x[..n].to_vec();
            let lambda: Vec<f64> = y.iter().map(|v| -v).collect();
            Ok(RawOutcome::Optimal { theta, lambda })
        }
        SimplexResult::Unbounded { ray } => Ok(RawOutcome::Unbounded { ray: ray[..n].to_vec() }),
        SimplexResult::Infeasible { y } => {
            let farkas: Vec<f64> = y.iter().map(|v| (-v).max(0.0)).collect();
            Ok(RawOutcome::Infeasible { farkas })
        }
    }
}

// dual orientation: min b̄·λ s.t. Ā'λ = objective, λ ≥ 0; basis of size n.
// Returns Ok(None) when the dual is infeasible (caller falls back to direct;
// that happens only for boxless programs, which in this codebase are small).
fn solve_dual_oriented(ext: &Extended) -> Result<Option<RawOutcome>, LpError> {
    let mt = ext.b.len();
    let a = ext.a.transpose();
    let rhs = ext.c.clone();
    let cost = ext.b.clone();
    let lo = vec![0.0; mt];
    let hi = vec![f64::INFINITY; mt];
    let sf = StandardForm { a, rhs, cost, lo, hi };
    match bounded_simplex(sf, None)? {
        // the dual's row multipliers are the primal optimizer
        SimplexResult::Optimal { x, y } => Ok(Some(RawOutcome::Optimal { theta: y, lambda: x })),
        // a ray of the dual certifies primal infeasibility
        SimplexResult::Unbounded { ray } => Ok(Some(RawOutcome::Infeasible { farkas: ray })),
        SimplexResult::Infeasible { .. } => Ok(None),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
