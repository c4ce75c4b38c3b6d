//! Mild-solution stepping of the stochastic beam equation, the shifted
//! nonhomogeneous problem, Monte Carlo ensembles and the weak-form residual.
//!
//! One step is `X_{k+1} = U_{k+1,k}(X_k + dt F_k) + A ΔW_k`: left-point
//! quadrature of the deterministic convolution, right-point of the stochastic
//! one. States are carried as unconstrained degrees of freedom (the clamped
//! node is eliminated); [`Trajectory::state`] lifts them back to grid
//! functions with the boundary conditions applied.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::config::{Component, ForceSpec, InitSpec, ModeSpec, SimulationConfig};
use crate::error::{Error, Result};
use crate::noise::{sample_increments, NoiseModel, WienerIncrements};
use crate::propagator::{build_propagator, GeneratorFamily, PropagatorFactorization};
use crate::space::{
    enforce_bc, BcKind, BeamGrid, BeamState, BoundaryConditionSet, Dofs, GramSet, GridFunction,
};

/// Paths per work unit of [`ensemble_run`]. Fixed so that the merge tree,
/// and with it every rounding, is independent of the thread count.
pub const ENSEMBLE_CHUNK: usize = 64;

/// Relative distance from discrete D accepted for initial data.
const INIT_TOL: f64 = 1e-8;

/// Relative distance from discrete D accepted for weak-form test functions.
const TEST_FN_TOL: f64 = 1e-8;

type Expr = evalexpr::Node<evalexpr::DefaultNumericTypes>;

/// Compile an `f^det` channel expression in `s`, `t`, `l`, `g`, `pi`.
pub(crate) fn compile_expr(src: &str) -> Result<Expr> {
    evalexpr::build_operator_tree(src)
        .map_err(|e| Error::invalid(format!("expression `{src}`: {e}")))
}

pub(crate) fn eval_expr(e: &Expr, s: f64, t: f64, l: f64, g: f64) -> Result<f64> {
    use evalexpr::{ContextWithMutableVariables, HashMapContext, Value};
    let mut ctx = HashMapContext::new();
    for (k, v) in [
        ("s", s),
        ("t", t),
        ("l", l),
        ("g", g),
        ("pi", std::f64::consts::PI),
    ] {
        ctx.set_value(k.into(), Value::Float(v))
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    let x = e
        .eval_number_with_context(&ctx)
        .map_err(|err| Error::invalid(format!("expression `{e}`: {err}")))?;
    if !x.is_finite() {
        return Err(Error::invalid(format!(
            "expression `{e}` is not finite at s={s}, t={t}"
        )));
    }
    Ok(x)
}

/// `(s - l) e3` with zero velocity.
pub fn shift_state(grid: BeamGrid) -> BeamState {
    let l = grid.length();
    BeamState {
        u: GridFunction::from_fn(grid, |s| [0.0, 0.0, s - l]),
        v: GridFunction::zeros(grid),
    }
}

/// Sine mode `e_j` lifted to a state in one channel of `u` or `v`.
pub fn observable_dofs(grid: &BeamGrid, spec: &ModeSpec) -> Dofs {
    let n = grid.dof_count();
    let l = grid.length();
    let norm = (2.0 / l).sqrt();
    let off = match spec.component {
        Component::U => 0,
        Component::V => n,
    };
    let mut h = DMatrix::zeros(2 * n, 3);
    for i in 0..n {
        h[(off + i, spec.channel - 1)] =
            norm * (spec.mode as f64 * std::f64::consts::PI * grid.node(i) / l).sin();
    }
    h
}

/// Scale-free `l⁴|∂ssss u(l)| + l⁵|∂sssss u(l)|` from backward differences,
/// relative to `max |u|`. Reported for initial data, never enforced.
pub fn clamped_end_h6_residue(u: &GridFunction) -> f64 {
    let g = u.grid();
    let (h, l) = (g.spacing(), g.length());
    let x = u.values();
    let m = x.len() - 1;
    if m < 6 {
        return 0.0;
    }
    const D4: [f64; 6] = [3.0, -14.0, 26.0, -24.0, 11.0, -2.0];
    const D5: [f64; 7] = [3.5, -20.0, 47.5, -60.0, 42.5, -16.0, 2.5];
    let mut worst: f64 = 0.0;
    let mut size: f64 = 0.0;
    for c in 0..3 {
        let d4: f64 = D4
            .iter()
            .enumerate()
            .map(|(k, w)| w * x[m - k][c])
            .sum::<f64>()
            / h.powi(4);
        let d5: f64 = D5
            .iter()
            .enumerate()
            .map(|(k, w)| w * x[m - k][c])
            .sum::<f64>()
            / h.powi(5);
        worst = worst.max(l.powi(4) * d4.abs() + l.powi(5) * d5.abs());
        size = x.iter().fold(size, |a, v| a.max(v[c].abs()));
    }
    if size == 0.0 {
        0.0
    } else {
        worst / size
    }
}

/// One mild step on degrees of freedom: `step (x + dt f) + A dw`, where `dw`
/// is the grid increment (`N x 3`) of the Wiener process. The clamped node is
/// not part of the state, so the boundary values are restored when the state
/// is lifted (see [`Trajectory::state`]).
pub fn mild_step(
    step: &DMatrix<f64>,
    x: &Dofs,
    f: &Dofs,
    dw: &DMatrix<f64>,
    model: &NoiseModel,
    dt: f64,
) -> Result<Dofs> {
    if x.shape() != f.shape() || step.ncols() != x.nrows() || dw.nrows() * 2 != x.nrows() {
        return Err(Error::Shape(format!(
            "step {:?}, state {:?}, force {:?}, increment {:?}",
            step.shape(),
            x.shape(),
            f.shape(),
            dw.shape()
        )));
    }
    let n = dw.nrows();
    let mut out = step * (x + f * dt);
    if model.sigma != 0.0 {
        let mut vel = out.rows_mut(n, n);
        vel += dw * model.sigma;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { step: 0 });
    }
    Ok(out)
}

/// Time-indexed states of one path.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub path_index: u64,
    pub bc: BcKind,
    pub increments: Option<Arc<WienerIncrements>>,
    grid: BeamGrid,
    /// States of the homogeneous problem; for the nonhomogeneous kind this is
    /// `u = x - (s - l) e3`.
    dofs: Vec<Dofs>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn grid(&self) -> &BeamGrid {
        &self.grid
    }

    /// Homogeneous-problem degrees of freedom at step `k`.
    pub fn dofs(&self, k: usize) -> &Dofs {
        &self.dofs[k]
    }

    /// The emitted state `X_k` on every node, boundary conditions applied.
    pub fn state(&self, k: usize) -> Result<BeamState> {
        let x = BeamState::from_dofs(self.grid, &self.dofs[k])?;
        let bcs = BoundaryConditionSet::for_kind(self.bc);
        let x = match self.bc {
            BcKind::Homogeneous => x,
            BcKind::Nonhomogeneous => x.add(&shift_state(self.grid))?,
        };
        Ok(enforce_bc(&x, &bcs))
    }

    /// Unconstrained values of the emitted state (shift included).
    pub fn state_dofs(&self, k: usize) -> Dofs {
        match self.bc {
            BcKind::Homogeneous => self.dofs[k].clone(),
            BcKind::Nonhomogeneous => &self.dofs[k] + shift_state(self.grid).to_dofs(),
        }
    }
}

/// Everything a path needs that does not depend on the path.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimulationConfig,
    gram: Arc<GramSet>,
    family: GeneratorFamily,
    propagator: PropagatorFactorization,
    noise: NoiseModel,
    forcing: Vec<Dofs>,
    initial: Dofs,
}

impl Simulator {
    pub fn new(cfg: &SimulationConfig) -> Result<Self> {
        let grid = cfg.grid()?;
        let gram = Arc::new(GramSet::new(grid, cfg.b)?);
        let force = cfg.tractive_force()?;
        let family = GeneratorFamily::new(force, gram.clone())?;
        let propagator = build_propagator(&family, cfg.t0, cfg.t_end, cfg.dt, cfg.scheme)?;
        let noise = NoiseModel::new(grid, cfg.k, cfg.spectrum.clone(), cfg.sigma, cfg.seed)?;
        let forcing = build_forcing(cfg, &family, &propagator.times())?;
        let initial = initial_dofs(cfg, &gram)?;
        Ok(Self {
            cfg: cfg.clone(),
            gram,
            family,
            propagator,
            noise,
            forcing,
            initial,
        })
    }

    /// Same setup with an explicit force sequence `F(t_k)`, one `2N x 3`
    /// matrix per grid time.
    pub fn with_forcing(cfg: &SimulationConfig, forcing: Vec<Dofs>) -> Result<Self> {
        let mut sim = Self::new(cfg)?;
        if forcing.len() != sim.forcing.len()
            || forcing.iter().any(|f| f.shape() != sim.forcing[0].shape())
        {
            return Err(Error::Shape(format!(
                "expected {} force samples of shape {:?}",
                sim.forcing.len(),
                sim.forcing[0].shape()
            )));
        }
        sim.forcing = forcing;
        Ok(sim)
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn gram(&self) -> &Arc<GramSet> {
        &self.gram
    }

    pub fn family(&self) -> &GeneratorFamily {
        &self.family
    }

    pub fn propagator(&self) -> &PropagatorFactorization {
        &self.propagator
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    /// `F(t_k)` of the homogeneous problem, gravity and the shift correction
    /// included.
    pub fn forcing(&self) -> &[Dofs] {
        &self.forcing
    }

    pub fn initial(&self) -> &Dofs {
        &self.initial
    }

    pub fn times(&self) -> Vec<f64> {
        self.propagator.times()
    }

    pub fn increments(&self, path: u64) -> Result<WienerIncrements> {
        sample_increments(&self.noise, self.cfg.dt, self.propagator.step_count(), path)
    }

    pub fn run_path(&self, path: u64) -> Result<Trajectory> {
        if self.cfg.sigma == 0.0 {
            return self.run(None, path);
        }
        let inc = Arc::new(self.increments(path)?);
        self.run(Some(inc), path)
    }

    /// Drive the path with given increments, e.g. a coarsened finer path.
    pub fn run_with(&self, inc: Arc<WienerIncrements>) -> Result<Trajectory> {
        if inc.step_count() != self.propagator.step_count()
            || (inc.dt - self.cfg.dt).abs() > 1e-12 * self.cfg.dt
        {
            return Err(Error::Shape(format!(
                "increments have {} steps of {}, expected {} of {}",
                inc.step_count(),
                inc.dt,
                self.propagator.step_count(),
                self.cfg.dt
            )));
        }
        let path = inc.path_index;
        self.run(Some(inc), path)
    }

    fn run(&self, inc: Option<Arc<WienerIncrements>>, path: u64) -> Result<Trajectory> {
        let steps = self.propagator.step_count();
        let n = self.gram.dof_count();
        let zero = DMatrix::zeros(n, 3);
        let mut dofs = Vec::with_capacity(steps + 1);
        dofs.push(self.initial.clone());
        for k in 0..steps {
            let dw = match &inc {
                Some(w) if self.noise.sigma != 0.0 => w.grid_increment(&self.noise, k),
                _ => zero.clone(),
            };
            let next = mild_step(
                self.propagator.step(k),
                &dofs[k],
                &self.forcing[k],
                &dw,
                &self.noise,
                self.cfg.dt,
            )
            .map_err(|e| match e {
                Error::BlowUp { .. } => Error::BlowUp { step: k + 1 },
                e => e,
            })?;
            dofs.push(next);
        }
        Ok(Trajectory {
            times: self.times(),
            path_index: path,
            bc: self.cfg.bc,
            increments: inc,
            grid: self.gram.grid,
            dofs,
        })
    }

    /// `⟨X(t_k), h⟩_H` along a trajectory.
    pub fn observe(&self, traj: &Trajectory, h: &Dofs) -> Vec<f64> {
        (0..traj.len())
            .map(|k| self.gram.h_inner_dofs(&traj.state_dofs(k), h))
            .collect()
    }
}

fn build_forcing(
    cfg: &SimulationConfig,
    fam: &GeneratorFamily,
    times: &[f64],
) -> Result<Vec<Dofs>> {
    let grid = cfg.grid()?;
    let n = grid.dof_count();
    let g = cfg.g_const;
    let l = cfg.l;
    let force = &fam.force;
    let exprs = match &cfg.f_det {
        ForceSpec::Expr(src) => Some([
            compile_expr(&src[0])?,
            compile_expr(&src[1])?,
            compile_expr(&src[2])?,
        ]),
        _ => None,
    };
    let table = |v: &[f64], s: f64| {
        let dx = l / (v.len() - 1) as f64;
        let x = (s / dx).clamp(0.0, (v.len() - 1) as f64);
        let k = (x.floor() as usize).min(v.len() - 2);
        let a = x - k as f64;
        v[k] + a * (v[k + 1] - v[k])
    };
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let mut f = DMatrix::zeros(2 * n, 3);
        for i in 0..n {
            let s = grid.node(i);
            let mut fd = match &cfg.f_det {
                ForceSpec::Zero => [0.0; 3],
                ForceSpec::Gravity => [0.0, 0.0, g],
                ForceSpec::Shift => [0.0, 0.0, g - force.dlambda_ds(s, t)],
                ForceSpec::Tabulated(v) => [0.0, 0.0, table(v, s)],
                ForceSpec::Expr(_) => {
                    let e = exprs.as_ref().expect("compiled above");
                    [
                        eval_expr(&e[0], s, t, l, g)?,
                        eval_expr(&e[1], s, t, l, g)?,
                        eval_expr(&e[2], s, t, l, g)?,
                    ]
                }
            };
            if cfg.bc == BcKind::Nonhomogeneous {
                fd[2] += force.dlambda_ds(s, t);
            }
            fd[2] -= g;
            for c in 0..3 {
                f[(n + i, c)] = fd[c];
            }
        }
        out.push(f);
    }
    Ok(out)
}

/// Initial degrees of freedom of the homogeneous problem, after the stencil
/// checks on `ξ`.
fn initial_dofs(cfg: &SimulationConfig, g: &GramSet) -> Result<Dofs> {
    let n = g.dof_count();
    match (&cfg.init, cfg.bc) {
        (InitSpec::Zero, BcKind::Homogeneous) | (InitSpec::Shift, BcKind::Nonhomogeneous) => {
            Ok(DMatrix::zeros(2 * n, 3))
        }
        (
            InitSpec::Mode {
                mode,
                channel,
                component,
                amplitude,
            },
            BcKind::Homogeneous,
        ) => {
            let (_, phi) = g.modes();
            if *mode == 0 || *mode > phi.ncols() {
                return Err(Error::invalid(format!("mode {mode} out of range")));
            }
            // the weak-form mode meets the free-end conditions only in the
            // limit; its projection onto discrete D meets them exactly
            let mut shape = DMatrix::zeros(2 * n, 3);
            for i in 0..n {
                shape[(i, channel - 1)] = phi[(i, mode - 1)];
            }
            let shape = g.project_discrete_d(&shape);
            let scale = amplitude
                / g.l2_dofs(
                    &shape.rows(0, n).into_owned(),
                    &shape.rows(0, n).into_owned(),
                )
                .sqrt();
            let mut x = DMatrix::zeros(2 * n, 3);
            let off = if *component == Component::U { 0 } else { n };
            for i in 0..n {
                x[(off + i, channel - 1)] = scale * shape[(i, channel - 1)];
            }
            let state = BeamState::from_dofs(g.grid, &x)?;
            check_initial(&state, g)?;
            Ok(x)
        }
        (init, bc) => Err(Error::invalid(format!(
            "initial datum {init:?} is not supported for {bc:?} boundary conditions"
        ))),
    }
}

/// `ξ1, ξ2` must vanish at the clamped node and lie in discrete D (the
/// free-end conditions at stencil level).
pub fn check_initial(xi: &BeamState, g: &GramSet) -> Result<()> {
    let x = xi.dofs_checked(g)?;
    let n = g.dof_count();
    for (name, off) in [("ξ1", 0), ("ξ2", n)] {
        let mut part = DMatrix::zeros(2 * n, 3);
        part.rows_mut(0, n).copy_from(&x.rows(off, n));
        let d = g.d_defect_dofs(&part);
        if d > INIT_TOL {
            return Err(Error::Precondition(format!(
                "{name} violates the free-end conditions: relative defect {d:e} exceeds {INIT_TOL:e}"
            )));
        }
    }
    Ok(())
}

pub fn solve_homogeneous(cfg: &SimulationConfig) -> Result<Trajectory> {
    if cfg.bc != BcKind::Homogeneous {
        return Err(Error::invalid(
            "solve_homogeneous needs beam.bc=homogeneous",
        ));
    }
    Simulator::new(cfg)?.run_path(0)
}

/// Solves for `u = x - (s - l) e3` with force `f^det + ∂sλ e3 - g e3` from
/// zero data; the emitted states are `x = u + (s - l) e3`.
pub fn solve_nonhomogeneous(cfg: &SimulationConfig) -> Result<Trajectory> {
    if cfg.bc != BcKind::Nonhomogeneous {
        return Err(Error::invalid(
            "solve_nonhomogeneous needs beam.bc=nonhomogeneous",
        ));
    }
    if cfg.init != InitSpec::Shift {
        return Err(Error::invalid(
            "nonhomogeneous problems start from x = (s - l) e3 with zero velocity",
        ));
    }
    Simulator::new(cfg)?.run_path(0)
}

/// `r(t_k) = ⟨X_k,h⟩ - ⟨X_0,h⟩ - ∫(⟨X, L*h⟩ + ⟨F,h⟩) - ⟨A*h, W(t_k) - W(t_0)⟩`
/// with the trapezoidal rule in time, for the homogeneous-problem states.
pub fn weak_residual(
    traj: &Trajectory,
    h: &BeamState,
    sim: &Simulator,
    increments: Option<&WienerIncrements>,
) -> Result<Vec<f64>> {
    let g = sim.gram();
    let hd = h.dofs_checked(g)?;
    let defect = g.d_defect_dofs(&hd);
    if defect > TEST_FN_TOL {
        return Err(Error::Precondition(format!(
            "test function is not in discrete D (relative defect {defect:e})"
        )));
    }
    if traj.len() != sim.forcing().len() {
        return Err(Error::Shape(
            "trajectory and simulator disagree on the time grid".into(),
        ));
    }
    let n = g.dof_count();
    let dt = sim.config().dt;
    let sigma = sim.noise().sigma;
    let inc = match increments {
        Some(w) => Some(w),
        None => traj.increments.as_deref(),
    };
    if sigma != 0.0 && inc.is_none() {
        return Err(Error::invalid("noisy trajectory needs its increments"));
    }
    // ⟨X, L*(r) h⟩_H is evaluated as ⟨L(r) X, h⟩_H, which is the same number
    // without a Gram solve per step
    let mh = g.gram_h() * &hd;
    let dot = |a: &Dofs| a.dot(&mh);
    let integrand = |k: usize| -> Result<f64> {
        let lx = sim.family().at(traj.times[k])? * traj.dofs(k);
        Ok(dot(&lx) + dot(&sim.forcing()[k]))
    };
    let x0h = dot(traj.dofs(0));
    let mut w = DMatrix::zeros(n, 3);
    let mut acc = 0.0;
    let mut prev = integrand(0)?;
    let mut out = vec![0.0];
    for k in 1..traj.len() {
        let cur = integrand(k)?;
        acc += 0.5 * dt * (prev + cur);
        prev = cur;
        if let (Some(inc), true) = (inc, sigma != 0.0) {
            w += inc.grid_increment(sim.noise(), k - 1);
        }
        // ⟨A*h, W⟩ = σ ⟨h_v, W⟩_{L²}
        let mut noise = 0.0;
        for c in 0..3 {
            for i in 0..n {
                noise += g.m[i] * hd[(n + i, c)] * w[(i, c)];
            }
        }
        let xh = dot(traj.dofs(k));
        out.push(xh - x0h - acc - sigma * noise);
    }
    Ok(out)
}

/// Streaming count, mean and central moments, merged pairwise.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.merge(&Moments {
            n: 1,
            mean: x,
            ..Default::default()
        });
    }

    pub fn merge(&mut self, b: &Moments) {
        if b.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *b;
            return;
        }
        let (na, nb) = (self.n as f64, b.n as f64);
        let n = na + nb;
        let d = b.mean - self.mean;
        let d2 = d * d;
        let mean = self.mean + d * nb / n;
        let m2 = self.m2 + b.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + b.m3
            + d2 * d * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * b.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + b.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * b.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * b.m3 - nb * self.m3) / n;
        *self = Moments {
            n: self.n + b.n,
            mean,
            m2,
            m3,
            m4,
        };
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn mean_std_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    /// Standard error of [`variance`](Self::variance) from the fourth moment.
    pub fn variance_std_error(&self) -> f64 {
        if self.n < 4 {
            return 0.0;
        }
        let n = self.n as f64;
        let s2 = self.variance();
        let m4 = self.m4 / n;
        ((m4 - (n - 3.0) / (n - 1.0) * s2 * s2) / n).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ObservableStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub mean_std_error: Vec<f64>,
    pub variance_std_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub n_paths: usize,
    /// False for a single path: the variance columns are then placeholders.
    pub variance_defined: bool,
    pub observables: Vec<ObservableStats>,
}

/// Moments of `⟨X(t_k), h_j⟩_H` over paths `0..n_paths`. Paths run in
/// parallel in fixed chunks whose partial moments are merged in chunk order.
pub fn ensemble_run(
    sim: &Simulator,
    observables: &[Dofs],
    n_paths: usize,
) -> Result<EnsembleStats> {
    if n_paths == 0 {
        return Err(Error::invalid("an ensemble needs at least one path"));
    }
    let times = sim.times();
    let nt = times.len();
    let no = observables.len();
    let chunks = n_paths.div_ceil(ENSEMBLE_CHUNK);
    let partial: Vec<Vec<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<Vec<Moments>> {
            let mut acc = vec![Moments::default(); no * nt];
            let lo = c * ENSEMBLE_CHUNK;
            let hi = (lo + ENSEMBLE_CHUNK).min(n_paths);
            for p in lo..hi {
                let traj = sim.run_path(p as u64)?;
                for (j, h) in observables.iter().enumerate() {
                    for (k, v) in sim.observe(&traj, h).into_iter().enumerate() {
                        acc[j * nt + k].push(v);
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![Moments::default(); no * nt];
    for part in &partial {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    let observables = (0..no)
        .map(|j| {
            let m = &total[j * nt..(j + 1) * nt];
            ObservableStats {
                mean: m.iter().map(|x| x.mean).collect(),
                variance: m.iter().map(|x| x.variance()).collect(),
                mean_std_error: m.iter().map(|x| x.mean_std_error()).collect(),
                variance_std_error: m.iter().map(|x| x.variance_std_error()).collect(),
            }
        })
        .collect();
    Ok(EnsembleStats {
        times,
        n_paths,
        variance_defined: n_paths > 1,
        observables,
    })
}
