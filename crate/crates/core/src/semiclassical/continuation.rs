//! Pseudo-arclength continuation of equilibrium branches in the drive `f`,
//! bifurcation detection along them and pitchfork branch switching.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Matrix2, Vector4};
use serde::Serialize;

use super::orbit::{find_limit_cycle, LimitCycle, LimitCycleSettings};
use super::{
    jacobian, residual_norm, rhs_vec, sorted_eigenvalues, symmetric_equilibria, ScaledParams,
    SemiclassicalError, SemiclassicalState, Stability,
};
use crate::C64;

/// Which invariant set a branch is continued in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    /// Restricted to `A = B`; the reduced system keeps the symmetry exactly.
    Symmetric,
    /// Full four-dimensional system.
    Asymmetric,
}

/// Initial orientation of the continuation tangent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heading {
    IncreasingF,
    DecreasingF,
    /// Grow `| |A|^2 - |B|^2 |`; used when leaving a pitchfork.
    AwayFromSymmetry,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationSettings {
    pub ds_initial: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub max_points: usize,
    pub corrector_tol: f64,
    pub corrector_max_iter: usize,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        Self {
            ds_initial: 0.01,
            ds_min: 1e-4,
            ds_max: 0.05,
            f_min: 0.0,
            f_max: 22.0,
            max_points: 200_000,
            corrector_tol: 1e-11,
            corrector_max_iter: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum StopReason {
    LeftRange,
    /// An asymmetric branch returned to the symmetric subspace.
    SymmetryReached,
    MaxPoints,
    CorrectorFailure { f: f64, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchPoint {
    pub f: f64,
    pub state: SemiclassicalState,
    pub eigenvalues: [C64; 4],
    pub stability: Stability,
    pub symmetric: bool,
}

impl BranchPoint {
    fn new(f: f64, state: SemiclassicalState, q: &ScaledParams) -> Self {
        let eigenvalues = sorted_eigenvalues(&jacobian(&state, &q.with_drive(f)));
        Self { f, state, eigenvalues, stability: Stability::classify(&eigenvalues), symmetric: state.is_symmetric() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchRecord {
    pub kind: BranchKind,
    pub params: ScaledParams,
    pub points: Vec<BranchPoint>,
    pub stop: StopReason,
}

/// Equations `G(y) = 0` with `y = (f, coordinates...)`.
#[derive(Clone, Copy)]
struct BranchSystem {
    kind: BranchKind,
    q: ScaledParams,
}

impl BranchSystem {
    fn coords(&self) -> usize {
        match self.kind {
            BranchKind::Symmetric => 2,
            BranchKind::Asymmetric => 4,
        }
    }

    fn pack(&self, f: f64, s: &SemiclassicalState) -> DVector<f64> {
        match self.kind {
            BranchKind::Symmetric => DVector::from_vec(vec![f, s.a.re, s.a.im]),
            BranchKind::Asymmetric => DVector::from_vec(vec![f, s.a.re, s.a.im, s.b.re, s.b.im]),
        }
    }

    fn unpack(&self, y: &DVector<f64>) -> (f64, SemiclassicalState) {
        match self.kind {
            BranchKind::Symmetric => (y[0], SemiclassicalState::symmetric(C64::new(y[1], y[2]))),
            BranchKind::Asymmetric => {
                (y[0], SemiclassicalState::new(C64::new(y[1], y[2]), C64::new(y[3], y[4])))
            }
        }
    }

    fn residual(&self, y: &DVector<f64>) -> DVector<f64> {
        let (f, s) = self.unpack(y);
        let g = rhs_vec(&s.to_vector(), &self.q.with_drive(f));
        match self.kind {
            BranchKind::Symmetric => DVector::from_vec(vec![g[0], g[1]]),
            BranchKind::Asymmetric => DVector::from_column_slice(g.as_slice()),
        }
    }

    /// `[dG/df | dG/dx]`, shape `n x (n + 1)`.
    fn jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let (f, s) = self.unpack(y);
        let q = self.q.with_drive(f);
        let n = self.coords();
        let mut m = DMatrix::zeros(n, n + 1);
        match self.kind {
            BranchKind::Symmetric => {
                let (x, yy) = (s.a.re, s.a.im);
                let theta = q.delta + q.kappa + q.xi * (x * x + yy * yy);
                m[(0, 0)] = 1.0;
                m[(0, 1)] = -1.0 - 2.0 * q.xi * x * yy;
                m[(0, 2)] = -theta - 2.0 * q.xi * yy * yy;
                m[(1, 1)] = theta + 2.0 * q.xi * x * x;
                m[(1, 2)] = -1.0 + 2.0 * q.xi * x * yy;
            }
            BranchKind::Asymmetric => {
                let j = jacobian(&s, &q);
                m[(0, 0)] = 1.0;
                m[(2, 0)] = 1.0;
                for r in 0..4 {
                    for c in 0..4 {
                        m[(r, c + 1)] = j[(r, c)];
                    }
                }
            }
        }
        m
    }

    fn bordered(&self, y: &DVector<f64>, t: &DVector<f64>) -> DMatrix<f64> {
        let n = self.coords();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        m.view_mut((0, 0), (n, n + 1)).copy_from(&self.jacobian(y));
        m.row_mut(n).copy_from(&t.transpose());
        m
    }

    /// Newton on `G(y) = 0`, `t . (y - pred) = 0`. Returns the corrected point
    /// and the iteration count.
    fn correct(
        &self,
        pred: &DVector<f64>,
        t: &DVector<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Option<(DVector<f64>, usize)> {
        let n = self.coords();
        let mut y = pred.clone();
        for it in 1..=max_iter {
            let g = self.residual(&y);
            let mut rhs = DVector::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&(-&g));
            rhs[n] = -t.dot(&(&y - pred));
            let step = self.bordered(&y, t).lu().solve(&rhs)?;
            if !step.iter().all(|v| v.is_finite()) {
                return None;
            }
            y += &step;
            if step.norm() < 1e-10 && self.residual(&y).norm() < tol {
                return Some((y, it));
            }
            if step.norm() > 10.0 {
                return None;
            }
        }
        let g = self.residual(&y);
        (g.norm() < tol).then_some((y, max_iter))
    }

    /// Unit tangent of the solution curve at `y`.
    fn tangent(&self, y: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.coords();
        for k in 0..=n {
            let mut e = DVector::zeros(n + 1);
            e[k] = 1.0;
            let m = self.bordered(y, &e);
            let mut rhs = DVector::zeros(n + 1);
            rhs[n] = 1.0;
            if let Some(t) = m.lu().solve(&rhs) {
                let norm = t.norm();
                if norm.is_finite() && norm > 0.0 {
                    return Some(t / norm);
                }
            }
        }
        None
    }
}

fn asymmetry(s: &SemiclassicalState) -> f64 {
    s.intensity_a() - s.intensity_b()
}

/// Trace a branch of equilibria by secant-predictor pseudo-arclength continuation
/// with a bordered Newton corrector. `start` must be an equilibrium at `start_f`.
pub fn continue_branch(
    kind: BranchKind,
    q: &ScaledParams,
    start_f: f64,
    start: &SemiclassicalState,
    heading: Heading,
    settings: &ContinuationSettings,
) -> Result<BranchRecord, SemiclassicalError> {
    let sys = BranchSystem { kind, q: *q };
    if kind == BranchKind::Symmetric && !start.is_symmetric() {
        return Err(SemiclassicalError::Continuation("symmetric branch needs A = B at the start".into()));
    }
    let res = residual_norm(start, &q.with_drive(start_f));
    if !(res < 1e-9) {
        return Err(SemiclassicalError::Continuation(format!(
            "start point is not an equilibrium (residual {res:.3e})"
        )));
    }
    let mut y = sys.pack(start_f, start);
    let mut t = sys
        .tangent(&y)
        .ok_or_else(|| SemiclassicalError::Continuation("no tangent at start point".into()))?;
    let orient = match heading {
        Heading::IncreasingF => t[0],
        Heading::DecreasingF => -t[0],
        Heading::AwayFromSymmetry => {
            // d/ds (|A|^2 - |B|^2) along t, signed by the current asymmetry
            let grad = DVector::from_vec(vec![0.0, 2.0 * y[1], 2.0 * y[2], -2.0 * y[3], -2.0 * y[4]]);
            if kind == BranchKind::Symmetric {
                t[0]
            } else {
                grad.dot(&t) * asymmetry(start).signum()
            }
        }
    };
    if orient < 0.0 {
        t = -t;
    }

    let start_sign = asymmetry(start).signum();
    let mut points = vec![BranchPoint::new(start_f, sys.unpack(&y).1, q)];
    let mut ds = settings.ds_initial.clamp(settings.ds_min, settings.ds_max);
    let stop = loop {
        if points.len() >= settings.max_points {
            break StopReason::MaxPoints;
        }
        let pred = &y + &t * ds;
        let accepted = sys
            .correct(&pred, &t, settings.corrector_tol, settings.corrector_max_iter)
            .and_then(|(y_new, iters)| {
                let chord = &y_new - &y;
                let dist = chord.norm();
                let secant = &chord / dist;
                (dist > 0.0 && dist < 2.0 * ds && secant.dot(&t) > 0.9).then_some((y_new, secant, iters))
            });
        match accepted {
            Some((y_new, secant, iters)) => {
                let (f, s) = sys.unpack(&y_new);
                if f > settings.f_max || f < settings.f_min {
                    break StopReason::LeftRange;
                }
                if kind == BranchKind::Asymmetric
                    && (s.is_symmetric() || (asymmetry(&s).signum() != start_sign && start_sign != 0.0))
                {
                    break StopReason::SymmetryReached;
                }
                points.push(BranchPoint::new(f, s, q));
                y = y_new;
                t = secant;
                if iters <= 3 {
                    ds = (ds * 1.5).min(settings.ds_max);
                }
            }
            None => {
                ds *= 0.5;
                if ds < settings.ds_min {
                    break StopReason::CorrectorFailure {
                        f: y[0],
                        detail: format!("corrector failed below minimum step {:.1e}", settings.ds_min),
                    };
                }
            }
        }
    };
    Ok(BranchRecord { kind, params: *q, points, stop })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BifurcationKind {
    Pitchfork,
    Hopf,
    SaddleNode,
}

impl BifurcationKind {
    pub fn label(self) -> &'static str {
        match self {
            BifurcationKind::Pitchfork => "pitchfork",
            BifurcationKind::Hopf => "hopf",
            BifurcationKind::SaddleNode => "saddle-node",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BifurcationPoint {
    pub kind: BifurcationKind,
    pub f: f64,
    pub state: SemiclassicalState,
    /// Test-function value at the located point.
    pub residual: f64,
    /// Set when another test function vanishes within tolerance at the same place.
    pub needs_review: bool,
}

/// Determinant of the antisymmetric linearisation block at a symmetric state:
/// `1 + (delta + 2 xi x - kappa)^2 - x^2` with `x = |A|^2`.
pub fn pitchfork_test(x: f64, q: &ScaledParams) -> f64 {
    let theta = q.delta + 2.0 * q.xi * x - q.kappa;
    1.0 + theta * theta - x * x
}

fn hopf_test(eigenvalues: &[C64; 4]) -> Option<f64> {
    eigenvalues.iter().filter(|l| l.im.abs() > 1e-6).map(|l| l.re).reduce(f64::max)
}

fn fold_test(state: &SemiclassicalState, q: &ScaledParams) -> f64 {
    jacobian(state, q).determinant()
}

const LOCATE_TOL_F: f64 = 1e-8;

/// Test function evaluated on a branch point.
fn test_value(kind: BifurcationKind, f: f64, s: &SemiclassicalState, q: &ScaledParams) -> Option<f64> {
    let qf = q.with_drive(f);
    match kind {
        BifurcationKind::Pitchfork => Some(pitchfork_test(s.intensity_a(), &qf)),
        BifurcationKind::SaddleNode => Some(fold_test(s, &qf)),
        BifurcationKind::Hopf => hopf_test(&sorted_eigenvalues(&jacobian(s, &qf))),
    }
}

/// Bisection on the chord between two consecutive branch points; each trial
/// point is pulled back onto the branch by the bordered corrector.
fn locate(
    sys: &BranchSystem,
    kind: BifurcationKind,
    lo: &BranchPoint,
    hi: &BranchPoint,
) -> Option<(f64, SemiclassicalState, f64)> {
    let ya = sys.pack(lo.f, &lo.state);
    let yb = sys.pack(hi.f, &hi.state);
    let chord = &yb - &ya;
    let len = chord.norm();
    let t = &chord / len;
    let eval = |theta: f64| -> Option<(f64, SemiclassicalState, f64)> {
        let pred = &ya + &chord * theta;
        let (y, _) = sys.correct(&pred, &t, 1e-12, 20)?;
        let (f, s) = sys.unpack(&y);
        test_value(kind, f, &s, &sys.q).map(|v| (f, s, v))
    };
    let (mut a, mut b) = (0.0, 1.0);
    let mut fa = (lo.f, lo.state, test_value(kind, lo.f, &lo.state, &sys.q)?);
    let mut fb = (hi.f, hi.state, test_value(kind, hi.f, &hi.state, &sys.q)?);
    if fa.2.signum() == fb.2.signum() {
        return None;
    }
    for _ in 0..200 {
        if (fa.0 - fb.0).abs() < LOCATE_TOL_F && (b - a) * len < 1e-7 {
            break;
        }
        let m = 0.5 * (a + b);
        let fm = eval(m)?;
        if fm.2 == 0.0 {
            return Some(fm);
        }
        if fm.2.signum() == fa.2.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
            fb = fm;
        }
    }
    // report the endpoint with the smaller test-function magnitude
    Some(if fa.2.abs() <= fb.2.abs() { fa } else { fb })
}

/// Scan a branch for sign changes of the test functions and locate each zero.
///
/// Symmetric branches are scanned for pitchforks, asymmetric branches for Hopf
/// points (maximal real part of a complex pair) and saddle-nodes (determinant).
pub fn detect_bifurcations(branch: &BranchRecord) -> Vec<BifurcationPoint> {
    let sys = BranchSystem { kind: branch.kind, q: branch.params };
    let kinds: &[BifurcationKind] = match branch.kind {
        BranchKind::Symmetric => &[BifurcationKind::Pitchfork],
        BranchKind::Asymmetric => &[BifurcationKind::Hopf, BifurcationKind::SaddleNode],
    };
    let mut found: Vec<BifurcationPoint> = Vec::new();
    for &kind in kinds {
        let values: Vec<Option<f64>> =
            branch.points.iter().map(|p| test_value(kind, p.f, &p.state, &branch.params)).collect();
        for k in 0..branch.points.len().saturating_sub(1) {
            let (Some(va), Some(vb)) = (values[k], values[k + 1]) else { continue };
            if va.signum() == vb.signum() || va == 0.0 && vb == 0.0 {
                continue;
            }
            let Some((f, state, residual)) = locate(&sys, kind, &branch.points[k], &branch.points[k + 1]) else {
                continue;
            };
            if kind == BifurcationKind::Hopf {
                // a pair turning real is not a Hopf point
                let ev = sorted_eigenvalues(&jacobian(&state, &branch.params.with_drive(f)));
                let crossing = ev.iter().any(|l| l.re.abs() < 1e-6 && l.im.abs() > 1e-6);
                if !crossing {
                    continue;
                }
            }
            found.push(BifurcationPoint { kind, f, state, residual, needs_review: false });
        }
    }
    // coincident zeros of different test functions
    for i in 0..found.len() {
        for j in 0..found.len() {
            if i != j && found[i].kind != found[j].kind && (found[i].f - found[j].f).abs() < 1e-6 {
                found[i].needs_review = true;
            }
        }
    }
    found.sort_by(|a, b| a.f.total_cmp(&b.f));
    found
}

/// Two asymmetric seeds leaving a pitchfork along the antisymmetric null
/// direction, `(f, state)` each, returned as `[+eps, -eps]`. They are swap
/// images of each other.
pub fn branch_switch_pitchfork(
    bp: &BifurcationPoint,
    q: &ScaledParams,
    eps: f64,
) -> Result<[(f64, SemiclassicalState); 2], SemiclassicalError> {
    let fail = |reason: String| SemiclassicalError::BranchSwitch { f: bp.f, reason };
    if bp.kind != BifurcationKind::Pitchfork {
        return Err(fail(format!("not a pitchfork ({})", bp.kind.label())));
    }
    let qf = q.with_drive(bp.f);
    let j = jacobian(&bp.state, &qf);
    // antisymmetric block acting on (a, -a): J_AA - J_AB
    let block = Matrix2::new(
        j[(0, 0)] - j[(0, 2)],
        j[(0, 1)] - j[(0, 3)],
        j[(1, 0)] - j[(1, 2)],
        j[(1, 1)] - j[(1, 3)],
    );
    let svd = block.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| fail("SVD failed".into()))?;
    let (imin, _) = svd.singular_values.argmin();
    let w = v_t.row(imin);
    let null = Vector4::new(w[0], w[1], -w[0], -w[1]) / 2f64.sqrt();

    let sys = BranchSystem { kind: BranchKind::Asymmetric, q: *q };
    let x_p = bp.state.to_vector();
    let seed = |sign: f64| -> Result<(f64, SemiclassicalState), SemiclassicalError> {
        let x0 = x_p + null * (sign * eps);
        let mut y = DVector::from_vec(vec![bp.f + 1e-3, x0[0], x0[1], x0[2], x0[3]]);
        let mut border = DVector::zeros(5);
        border.rows_mut(1, 4).copy_from(&null);
        for _ in 0..50 {
            let g = sys.residual(&y);
            let x = Vector4::new(y[1], y[2], y[3], y[4]);
            let mut rhs = DVector::zeros(5);
            rhs.rows_mut(0, 4).copy_from(&(-&g));
            rhs[4] = -(null.dot(&(x - x_p)) - sign * eps);
            let step = sys
                .bordered(&y, &border)
                .lu()
                .solve(&rhs)
                .ok_or_else(|| fail("singular bordered system".into()))?;
            y += &step;
            if step.norm() < 1e-13 {
                break;
            }
        }
        let (f, s) = sys.unpack(&y);
        let res = residual_norm(&s, &q.with_drive(f));
        if !(res < 1e-11) {
            return Err(fail(format!("corrector did not converge (residual {res:.3e})")));
        }
        if s.is_symmetric() {
            return Err(fail("corrector returned to the symmetric branch".into()));
        }
        Ok((f, s))
    };
    let plus = seed(1.0)?;
    let minus = seed(-1.0)?;
    let mismatch = (plus.0 - minus.0).abs() + (plus.1.swap().to_vector() - minus.1.to_vector()).norm();
    if mismatch > 1e-8 {
        return Err(fail(format!("seeds are not swap images (mismatch {mismatch:.3e})")));
    }
    Ok([plus, minus])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSettings {
    pub continuation: ContinuationSettings,
    pub switch_eps: f64,
    /// Number of drive values sampled strictly between consecutive Hopf points.
    pub limit_cycle_samples: usize,
    pub limit_cycle: LimitCycleSettings,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            continuation: ContinuationSettings::default(),
            switch_eps: 1e-3,
            limit_cycle_samples: 12,
            limit_cycle: LimitCycleSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub params: ScaledParams,
    pub symmetric: BranchRecord,
    /// One representative per swap-related pair; mirror images follow by swapping `A` and `B`.
    pub asymmetric: Vec<BranchRecord>,
    pub bifurcations: Vec<BifurcationPoint>,
    pub limit_cycles: Vec<LimitCycle>,
}

impl SweepResult {
    /// All equilibria at drive `f` with their stability, obtained by
    /// Newton-correcting the bracketing branch points; asymmetric ones are
    /// listed with their swap images.
    pub fn equilibria_at(&self, f: f64) -> Vec<(SemiclassicalState, Stability)> {
        let q = self.params.with_drive(f);
        let mut out: Vec<(SemiclassicalState, Stability)> = Vec::new();
        let mut push = |s: SemiclassicalState| {
            if !out.iter().any(|(o, _)| (o.to_vector() - s.to_vector()).norm() < 1e-6) {
                out.push((s, Stability::classify(&sorted_eigenvalues(&jacobian(&s, &q)))));
            }
        };
        for s in symmetric_equilibria(&q) {
            push(s);
        }
        for branch in &self.asymmetric {
            for w in branch.points.windows(2) {
                let (lo, hi) = if w[0].f <= w[1].f { (&w[0], &w[1]) } else { (&w[1], &w[0]) };
                if f < lo.f || f > hi.f || hi.f == lo.f {
                    continue;
                }
                let theta = (f - lo.f) / (hi.f - lo.f);
                let guess = SemiclassicalState::from_vector(
                    &(lo.state.to_vector() * (1.0 - theta) + hi.state.to_vector() * theta),
                );
                let out_n = super::newton_equilibrium(&guess, &q);
                if !out_n.converged || out_n.state.is_symmetric() {
                    continue;
                }
                push(out_n.state);
                push(out_n.state.swap());
            }
        }
        out
    }

    /// Stable members of [`Self::equilibria_at`]. Empty near bifurcations
    /// where no stable point is resolved.
    pub fn stable_equilibria_at(&self, f: f64) -> Vec<SemiclassicalState> {
        self.equilibria_at(f).into_iter().filter(|(_, st)| *st == Stability::Stable).map(|(s, _)| s).collect()
    }

    /// Limit cycle sampled closest to `f`, if any.
    pub fn nearest_limit_cycle(&self, f: f64) -> Option<&LimitCycle> {
        self.limit_cycles.iter().min_by(|a, b| (a.f - f).abs().total_cmp(&(b.f - f).abs()))
    }
}

pub const BRANCH_HEADER: &str =
    "f,reA,imA,reB,imB,int_A,int_B,ev1re,ev1im,ev2re,ev2im,ev3re,ev3im,ev4re,ev4im,stability,symmetric";
pub const BIFURCATION_HEADER: &str = "kind,f,int_A,int_B";
pub const LIMIT_CYCLE_HEADER: &str = "f,period,frequency,max_int_A,max_int_B,floquet_max";

/// Branch points in continuation order, one row per point. Asymmetric
/// branches appear once; their mirror images swap `A` and `B`.
pub fn write_branch_csv<'a, W, I>(branches: I, mut w: W) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a BranchRecord>,
{
    writeln!(w, "{BRANCH_HEADER}")?;
    for branch in branches {
        for p in &branch.points {
            let s = &p.state;
            write!(w, "{},{},{},{},{},{},{}", p.f, s.a.re, s.a.im, s.b.re, s.b.im, s.intensity_a(), s.intensity_b())?;
            for ev in &p.eigenvalues {
                write!(w, ",{},{}", ev.re, ev.im)?;
            }
            writeln!(w, ",{},{}", p.stability.label(), p.symmetric)?;
        }
    }
    Ok(())
}

pub fn write_bifurcations_csv<W: Write>(points: &[BifurcationPoint], mut w: W) -> io::Result<()> {
    writeln!(w, "{BIFURCATION_HEADER}")?;
    for b in points {
        writeln!(w, "{},{},{},{}", b.kind.label(), b.f, b.state.intensity_a(), b.state.intensity_b())?;
    }
    Ok(())
}

pub fn write_limit_cycles_csv<W: Write>(cycles: &[LimitCycle], mut w: W) -> io::Result<()> {
    writeln!(w, "{LIMIT_CYCLE_HEADER}")?;
    for c in cycles {
        let floquet = c.floquet_moduli.iter().copied().fold(0.0, f64::max);
        writeln!(w, "{},{},{},{},{},{}", c.f, c.period, c.frequency, c.max_intensity_a, c.max_intensity_b, floquet)?;
    }
    Ok(())
}

/// Full one-parameter diagram over `[f_min, f_max]`: symmetric branch,
/// pitchfork switching, asymmetric branches through their folds, and limit
/// cycles sampled between Hopf points.
pub fn bifurcation_sweep(base: &ScaledParams, settings: &SweepSettings) -> Result<SweepResult, SemiclassicalError> {
    let cs = &settings.continuation;
    let q = base.with_drive(cs.f_min);
    let start = *symmetric_equilibria(&q)
        .first()
        .ok_or_else(|| SemiclassicalError::Continuation("no symmetric equilibrium at f_min".into()))?;
    let symmetric = continue_branch(BranchKind::Symmetric, base, cs.f_min, &start, Heading::IncreasingF, cs)?;
    let pitchforks = detect_bifurcations(&symmetric);
    let mut bifurcations = pitchforks.clone();
    let mut asymmetric = Vec::new();
    let mut covered = vec![false; pitchforks.len()];

    for i in 0..pitchforks.len() {
        if covered[i] {
            continue;
        }
        covered[i] = true;
        let seeds = branch_switch_pitchfork(&pitchforks[i], base, settings.switch_eps)?;
        let (f0, s0) = if seeds[0].1.intensity_a() > seeds[0].1.intensity_b() { seeds[0] } else { seeds[1] };
        if f0 < cs.f_min || f0 > cs.f_max {
            continue;
        }
        let branch = continue_branch(BranchKind::Asymmetric, base, f0, &s0, Heading::AwayFromSymmetry, cs)?;
        if branch.stop == StopReason::SymmetryReached {
            let end_f = branch.points.last().map(|p| p.f).unwrap_or(f0);
            for (j, p) in pitchforks.iter().enumerate() {
                if (p.f - end_f).abs() < 0.05 {
                    covered[j] = true;
                }
            }
        }
        bifurcations.extend(detect_bifurcations(&branch));
        asymmetric.push(branch);
    }
    bifurcations.sort_by(|a, b| a.f.total_cmp(&b.f));

    let mut limit_cycles = Vec::new();
    if settings.limit_cycle_samples > 0 {
        for branch in &asymmetric {
            let hopfs: Vec<f64> = detect_bifurcations(branch)
                .into_iter()
                .filter(|b| b.kind == BifurcationKind::Hopf)
                .map(|b| b.f)
                .collect();
            for pair in hopfs.windows(2) {
                let (h1, h2) = (pair[0], pair[1]);
                let n = settings.limit_cycle_samples;
                for k in 1..=n {
                    let f = h1 + (h2 - h1) * k as f64 / (n + 1) as f64;
                    if let Some(seed) = unstable_point_near(branch, f) {
                        if let Ok(lc) = find_limit_cycle(&base.with_drive(f), &seed, &settings.limit_cycle) {
                            limit_cycles.push(lc);
                        }
                    }
                }
            }
        }
    }
    Ok(SweepResult { params: *base, symmetric, asymmetric, bifurcations, limit_cycles })
}

/// Equilibrium of `branch` at drive `f` with two unstable eigenvalues, slightly
/// perturbed to serve as a limit-cycle seed.
fn unstable_point_near(branch: &BranchRecord, f: f64) -> Option<SemiclassicalState> {
    let q = branch.params.with_drive(f);
    let p = branch
        .points
        .iter()
        .filter(|p| p.stability == Stability::Saddle2Plus)
        .min_by(|a, b| (a.f - f).abs().total_cmp(&(b.f - f).abs()))?;
    let out = super::newton_equilibrium(&p.state, &q);
    out.converged.then(|| {
        let mut s = out.state;
        s.a += C64::new(1e-3, 0.0);
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn study_symmetric(f_max: f64) -> BranchRecord {
        let q = ScaledParams::study_point(0.0);
        let settings = ContinuationSettings { f_max, ..Default::default() };
        continue_branch(BranchKind::Symmetric, &q, 0.0, &SemiclassicalState::ORIGIN, Heading::IncreasingF, &settings)
            .unwrap()
    }

    #[test]
    fn symmetric_branch_stays_symmetric() {
        let b = study_symmetric(22.0);
        assert_eq!(b.stop, StopReason::LeftRange);
        assert!(b.points.iter().all(|p| p.symmetric));
        assert!(b.points.last().unwrap().f > 21.9);
        for p in &b.points {
            assert!(residual_norm(&p.state, &b.params.with_drive(p.f)) < 1e-10);
        }
        // intensity monotone in f (no folds on this branch)
        for w in b.points.windows(2) {
            assert!(w[1].state.intensity_a() > w[0].state.intensity_a());
            assert!(w[1].f > w[0].f);
            assert!(w[1].f - w[0].f <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn pitchforks_on_symmetric_branch() {
        let b = study_symmetric(22.0);
        let bps = detect_bifurcations(&b);
        assert_eq!(bps.len(), 2);
        assert!(bps.iter().all(|p| p.kind == BifurcationKind::Pitchfork));
        assert!(bps[0].f > 2.0 && bps[0].f < 4.0);
        assert!(bps[1].f > 17.0);
        assert!((bps[0].f - 3.30).abs() < 0.01);
        assert!((bps[1].f - 19.7).abs() < 0.1);
        // repeated detection is reproducible
        let again = detect_bifurcations(&b);
        for (x, y) in bps.iter().zip(&again) {
            assert!((x.f - y.f).abs() < 1e-8);
        }
    }

    #[test]
    fn no_bifurcations_below_first_pitchfork() {
        let b = study_symmetric(2.0);
        assert!(detect_bifurcations(&b).is_empty());
    }

    #[test]
    fn branch_switch_seeds_are_swap_images() {
        let q = ScaledParams::study_point(0.0);
        let b = study_symmetric(22.0);
        let bps = detect_bifurcations(&b);
        for bp in &bps {
            let [plus, minus] = branch_switch_pitchfork(bp, &q, 1e-3).unwrap();
            assert!((plus.1.intensity_a() - plus.1.intensity_b()).abs() > 1e-6);
            assert!((plus.1.swap().to_vector() - minus.1.to_vector()).norm() < 1e-8);
            assert!((plus.0 - minus.0).abs() < 1e-8);
            assert!((plus.0 - bp.f).abs() < 1e-2);
        }
        // the seed beyond P1 lies above it, the one at P2 below it
        assert!(branch_switch_pitchfork(&bps[0], &q, 1e-3).unwrap()[0].0 > bps[0].f);
        assert!(branch_switch_pitchfork(&bps[1], &q, 1e-3).unwrap()[0].0 < bps[1].f);
        // eps sign flip exchanges the seeds
        let a = branch_switch_pitchfork(&bps[0], &q, 1e-3).unwrap();
        let b2 = branch_switch_pitchfork(&bps[0], &q, -1e-3).unwrap();
        assert!((a[0].1.to_vector() - b2[1].1.to_vector()).norm() < 1e-12);
        let not_pf = BifurcationPoint { kind: BifurcationKind::Hopf, ..bps[0].clone() };
        assert!(branch_switch_pitchfork(&not_pf, &q, 1e-3).is_err());
    }

    #[test]
    fn asymmetric_branch_passes_both_folds() {
        let q = ScaledParams::study_point(0.0);
        let b = study_symmetric(22.0);
        let bps = detect_bifurcations(&b);
        let [seed, _] = branch_switch_pitchfork(&bps[0], &q, 1e-3).unwrap();
        let settings = ContinuationSettings::default();
        let asym = continue_branch(BranchKind::Asymmetric, &q, seed.0, &seed.1, Heading::AwayFromSymmetry, &settings)
            .unwrap();
        assert_eq!(asym.stop, StopReason::SymmetryReached);
        let last = asym.points.last().unwrap();
        assert!((last.f - bps[1].f).abs() < 0.05, "ends at {}", last.f);
        let found = detect_bifurcations(&asym);
        let folds: Vec<f64> = found.iter().filter(|b| b.kind == BifurcationKind::SaddleNode).map(|b| b.f).collect();
        let hopfs: Vec<f64> = found.iter().filter(|b| b.kind == BifurcationKind::Hopf).map(|b| b.f).collect();
        assert_eq!(folds.len(), 2, "{found:?}");
        assert_eq!(hopfs.len(), 2, "{found:?}");
        assert!(10.0 < folds[0] && folds[0] < 13.0 && 13.0 < folds[1] && folds[1] < 17.0);
        assert!(4.0 < hopfs[0] && hopfs[0] < 6.0 && 6.0 < hopfs[1] && hopfs[1] < 10.0);
        for p in &asym.points {
            assert!(residual_norm(&p.state, &q.with_drive(p.f)) < 1e-10);
        }
        assert!(!found.iter().any(|b| b.needs_review));

        // reversing from the end retraces the same folds
        let back = continue_branch(
            BranchKind::Asymmetric,
            &q,
            last.f,
            &last.state,
            Heading::DecreasingF,
            &ContinuationSettings { f_min: seed.0 + 0.01, ..settings },
        )
        .unwrap();
        let back_folds: Vec<f64> = detect_bifurcations(&back)
            .into_iter()
            .filter(|b| b.kind == BifurcationKind::SaddleNode)
            .map(|b| b.f)
            .collect();
        assert_eq!(back_folds.len(), 2);
        for (a, b) in folds.iter().zip(&back_folds) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn continue_branch_rejects_non_equilibrium() {
        let q = ScaledParams::study_point(0.0);
        let bad = SemiclassicalState::symmetric(C64::new(1.0, 0.0));
        let err = continue_branch(BranchKind::Symmetric, &q, 0.0, &bad, Heading::IncreasingF, &Default::default());
        assert!(err.is_err());
    }

    #[test]
    fn stable_equilibria_at_interval_values() {
        let sweep = bifurcation_sweep(
            &ScaledParams::study_point(0.0),
            &SweepSettings { limit_cycle_samples: 0, ..Default::default() },
        )
        .unwrap();
        assert_eq!(sweep.stable_equilibria_at(2.0).len(), 1);
        assert_eq!(sweep.stable_equilibria_at(4.0).len(), 2);
        assert_eq!(sweep.stable_equilibria_at(6.0).len(), 0);
        assert_eq!(sweep.stable_equilibria_at(10.0).len(), 2);
        assert_eq!(sweep.stable_equilibria_at(13.0).len(), 4);
        assert_eq!(sweep.stable_equilibria_at(17.0).len(), 2);
        assert_eq!(sweep.stable_equilibria_at(21.0).len(), 1);
    }

    #[test]
    fn csv_writers_emit_one_row_per_point() {
        let branch = study_symmetric(5.0);
        let mut buf = Vec::new();
        write_branch_csv([&branch], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], BRANCH_HEADER);
        assert_eq!(lines.len(), branch.points.len() + 1);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 17));
        assert!(lines[1].ends_with(",stable,true"));

        let bifs = detect_bifurcations(&branch);
        let mut buf = Vec::new();
        write_bifurcations_csv(&bifs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), bifs.len() + 1);
        assert!(text.lines().nth(1).unwrap().starts_with("pitchfork,3.30"));
    }
}
