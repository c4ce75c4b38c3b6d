//! The evolution system `U(t, τ)` on grid times, stored as a product of
//! one-step maps, together with its H-adjoint and the axiom checks.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::operators::{build_l0, build_l1, gram_transpose, h_operator_norm, TractiveForce};
use crate::space::{Dofs, GramSet};

/// Relative slack when deciding whether a time lies on the grid.
const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    CayleyMidpoint,
    Picard,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cayley-midpoint" | "cayley" => Ok(Scheme::CayleyMidpoint),
            "picard" => Ok(Scheme::Picard),
            _ => Err(Error::invalid(format!("unknown scheme `{s}`"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::CayleyMidpoint => "cayley-midpoint",
            Scheme::Picard => "picard",
        })
    }
}

/// `t ↦ L(t) = L0 + L1(t)` on one channel.
#[derive(Debug, Clone)]
pub struct GeneratorFamily {
    pub force: TractiveForce,
    pub gram: Arc<GramSet>,
    l0: DMatrix<f64>,
}

impl GeneratorFamily {
    pub fn new(force: TractiveForce, gram: Arc<GramSet>) -> Result<Self> {
        let l0 = build_l0(&gram)?.mat;
        Ok(Self { force, gram, l0 })
    }

    pub fn l0(&self) -> &DMatrix<f64> {
        &self.l0
    }

    pub fn l1(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(build_l1(&self.force, t, &self.gram)?.mat)
    }

    pub fn at(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(&self.l0 + self.l1(t)?)
    }

    /// `L*(t) = -L0 + L1*(t)`.
    pub fn adjoint_at(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(gram_transpose(&self.at(t)?, &self.gram))
    }

    pub fn dim(&self) -> usize {
        self.l0.nrows()
    }
}

/// `(I - dt/2 L)⁻¹ (I + dt/2 L)`.
pub fn cayley_step(l: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let n = l.nrows();
    let a = l * (0.5 * dt);
    let id = DMatrix::<f64>::identity(n, n);
    let lhs = &id - &a;
    let rhs = &id + &a;
    let lu = lhs.lu();
    let out = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Assembly("Cayley resolvent is singular".into()))?;
    if !out.iter().all(|x| x.is_finite()) {
        return Err(Error::Assembly(
            "Cayley resolvent is ill-conditioned".into(),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// `U(t, τ) = G_{t-1} ⋯ G_τ`.
    Forward,
    /// `U*(t, τ) = G*_τ ⋯ G*_{t-1}`.
    Adjoint,
}

#[derive(Debug, Clone)]
pub struct PropagatorFactorization {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub orientation: Orientation,
    steps: Vec<Arc<DMatrix<f64>>>,
    gram: Arc<GramSet>,
}

fn step_count(t0: f64, t1: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!(
            "time step must be positive, got {dt}"
        )));
    }
    if !(t1 >= t0) {
        return Err(Error::invalid(format!("empty time window [{t0}, {t1}]")));
    }
    let span = t1 - t0;
    let k = (span / dt).round();
    if (k * dt - span).abs() > ALIGN_TOL * dt.max(span) {
        return Err(Error::invalid(format!(
            "dt = {dt} does not divide the window length {span}"
        )));
    }
    Ok(k as usize)
}

pub fn build_propagator(
    fam: &GeneratorFamily,
    t0: f64,
    t1: f64,
    dt: f64,
    scheme: Scheme,
) -> Result<PropagatorFactorization> {
    let count = step_count(t0, t1, dt)?;
    let mut steps = Vec::with_capacity(count);
    // λ = c(t) profile(s), so the step maps depend on time only through c.
    let mut cache: HashMap<(u64, u64), Arc<DMatrix<f64>>> = HashMap::new();
    let time = |k: usize| if k == count { t1 } else { t0 + k as f64 * dt };
    match scheme {
        Scheme::CayleyMidpoint => {
            for k in 0..count {
                let mid = t0 + (k as f64 + 0.5) * dt;
                let key = (fam.force.c(mid).to_bits(), 0);
                let g = match cache.get(&key) {
                    Some(g) => g.clone(),
                    None => {
                        let g = Arc::new(cayley_step(&fam.at(mid)?, dt)?);
                        cache.insert(key, g.clone());
                        g
                    }
                };
                steps.push(g);
            }
        }
        Scheme::Picard => {
            let s = (fam.l0() * dt).exp();
            let n = fam.dim();
            let id = DMatrix::<f64>::identity(n, n);
            for k in 0..count {
                let (ta, tb) = (time(k), time(k + 1));
                let key = (fam.force.c(ta).to_bits(), fam.force.c(tb).to_bits());
                let g = match cache.get(&key) {
                    Some(g) => g.clone(),
                    None => {
                        let g = Arc::new(picard_step(&s, &fam.l1(ta)?, &fam.l1(tb)?, dt, &id)?);
                        cache.insert(key, g.clone());
                        g
                    }
                };
                steps.push(g);
            }
        }
    }
    Ok(PropagatorFactorization {
        t0,
        t1,
        dt,
        scheme,
        orientation: Orientation::Forward,
        steps,
        gram: fam.gram.clone(),
    })
}

/// Fixed point of `U = S + dt/2 (S L1(t_k) + L1(t_{k+1}) U)`, the
/// trapezoidal Duhamel step around the exact skew flow `S = exp(dt L0)`.
fn picard_step(
    s: &DMatrix<f64>,
    l1a: &DMatrix<f64>,
    l1b: &DMatrix<f64>,
    dt: f64,
    id: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let rhs = s + s * l1a * (0.5 * dt);
    let lhs = id - l1b * (0.5 * dt);
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Assembly("Picard step resolvent is singular".into()))
}

impl PropagatorFactorization {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, k: usize) -> &DMatrix<f64> {
        &self.steps[k]
    }

    pub fn gram(&self) -> &Arc<GramSet> {
        &self.gram
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps.len() {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps.len()).map(|k| self.time(k)).collect()
    }

    /// Grid index of `t`; misaligned times are an error.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let x = (t - self.t0) / self.dt;
        let k = x.round();
        if !(k >= 0.0 && k as usize <= self.steps.len()) || (x - k).abs() > ALIGN_TOL {
            return Err(Error::invalid(format!(
                "time {t} is not on the grid {} + k*{} within [{}, {}]",
                self.t0, self.dt, self.t0, self.t1
            )));
        }
        Ok(k as usize)
    }

    fn check_order(&self, ka: usize, kb: usize) -> Result<()> {
        if ka > kb || kb > self.steps.len() {
            return Err(Error::invalid(format!(
                "need τ ≤ t on the grid, got indices {ka} > {kb}"
            )));
        }
        Ok(())
    }

    /// Matrix of `U(t_kb, t_ka)` (or its adjoint).
    pub fn compose(&self, ka: usize, kb: usize) -> Result<DMatrix<f64>> {
        self.check_order(ka, kb)?;
        let n = self.gram.dof_count() * 2;
        let mut u = DMatrix::<f64>::identity(n, n);
        match self.orientation {
            Orientation::Forward => {
                for k in ka..kb {
                    u = &*self.steps[k] * u;
                }
            }
            Orientation::Adjoint => {
                for k in ka..kb {
                    u *= &*self.steps[k];
                }
            }
        }
        Ok(u)
    }

    /// `U(t_kb, t_ka) x` applied step by step.
    pub fn apply(&self, x: &Dofs, ka: usize, kb: usize) -> Result<Dofs> {
        self.check_order(ka, kb)?;
        let mut y = x.clone();
        match self.orientation {
            Orientation::Forward => {
                for k in ka..kb {
                    y = &*self.steps[k] * y;
                }
            }
            Orientation::Adjoint => {
                for k in (ka..kb).rev() {
                    y = &*self.steps[k] * y;
                }
            }
        }
        Ok(y)
    }

    /// `U(t_k, t_ka) x` for every `k` in `ka..=kb` (forward orientation).
    pub fn orbit(&self, x: &Dofs, ka: usize, kb: usize) -> Result<Vec<Dofs>> {
        self.check_order(ka, kb)?;
        if self.orientation != Orientation::Forward {
            return Err(Error::invalid("orbit needs a forward factorization"));
        }
        let mut out = Vec::with_capacity(kb - ka + 1);
        out.push(x.clone());
        for k in ka..kb {
            let next = &*self.steps[k] * out.last().expect("nonempty");
            out.push(next);
        }
        Ok(out)
    }

    /// `‖U(t, τ)‖_{L(H)}`.
    pub fn norm(&self, ka: usize, kb: usize) -> Result<f64> {
        Ok(h_operator_norm(&self.compose(ka, kb)?, &self.gram))
    }
}

/// Per-step Gram transposes composed in reverse order: `U*(t, τ)`.
pub fn adjoint_propagator(p: &PropagatorFactorization, g: &GramSet) -> PropagatorFactorization {
    let mut cache: HashMap<*const DMatrix<f64>, Arc<DMatrix<f64>>> = HashMap::new();
    let steps = p
        .steps
        .iter()
        .map(|s| {
            cache
                .entry(Arc::as_ptr(s))
                .or_insert_with(|| Arc::new(gram_transpose(s, g)))
                .clone()
        })
        .collect();
    PropagatorFactorization {
        orientation: match p.orientation {
            Orientation::Forward => Orientation::Adjoint,
            Orientation::Adjoint => Orientation::Forward,
        },
        steps,
        ..p.clone()
    }
}

/// Integrates `∂τ φ = -L*(τ) φ` backwards from `φ(t_kb) = y` to `t_ka`
/// with the trapezoidal rule; returns `φ(t_ka) ≈ U*(t_kb, t_ka) y`.
pub fn backward_adjoint(
    fam: &GeneratorFamily,
    p: &PropagatorFactorization,
    y: &Dofs,
    ka: usize,
    kb: usize,
) -> Result<Dofs> {
    p.check_order(ka, kb)?;
    let dt = p.dt;
    let n = fam.dim();
    let id = DMatrix::<f64>::identity(n, n);
    let mut phi = y.clone();
    let mut l_next = fam.adjoint_at(p.time(kb))?;
    for k in (ka..kb).rev() {
        let l_here = fam.adjoint_at(p.time(k))?;
        let rhs = (&id + &l_next * (0.5 * dt)) * &phi;
        phi = (&id - &l_here * (0.5 * dt))
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Assembly("backward resolvent is singular".into()))?;
        l_next = l_here;
    }
    Ok(phi)
}

/// `‖U(t, τ) - U(t, r) U(r, τ)‖_{L(H)}`. Both products are formed from the
/// same step maps written in energy coordinates, where the H operator norm is
/// the spectral norm and no conditioning of the Gram factor enters.
pub fn cocycle_defect(p: &PropagatorFactorization, tau: f64, r: f64, t: f64) -> Result<f64> {
    let (ka, kr, kb) = (p.index_of(tau)?, p.index_of(r)?, p.index_of(t)?);
    if !(ka <= kr && kr <= kb) {
        return Err(Error::invalid("need τ ≤ r ≤ t"));
    }
    let rf = p.gram.energy_factor();
    let ri = p.gram.energy_factor_inv();
    let n = rf.nrows();
    let mut cache: HashMap<*const DMatrix<f64>, DMatrix<f64>> = HashMap::new();
    let hat: Vec<&DMatrix<f64>> = {
        for k in ka..kb {
            cache
                .entry(Arc::as_ptr(&p.steps[k]))
                .or_insert_with(|| &rf * &*p.steps[k] * &ri);
        }
        (ka..kb)
            .map(|k| &cache[&Arc::as_ptr(&p.steps[k])])
            .collect()
    };
    let product = |from: usize, to: usize| {
        let mut u = DMatrix::<f64>::identity(n, n);
        for m in &hat[from - ka..to - ka] {
            u = match p.orientation {
                Orientation::Forward => *m * u,
                Orientation::Adjoint => u * *m,
            };
        }
        u
    };
    let whole = product(ka, kb);
    let split = match p.orientation {
        Orientation::Forward => product(kr, kb) * product(ka, kr),
        Orientation::Adjoint => product(ka, kr) * product(kr, kb),
    };
    let d = whole - split;
    if d.amax() == 0.0 {
        return Ok(0.0);
    }
    Ok(crate::operators::power_norm(&d))
}

/// `‖U(t_k, τ) w - w - ∫_τ^{t_k} L(r) U(r, τ) w dr‖_H` for every grid time
/// from `τ` to the end of the window, the integral by the trapezoidal rule.
pub fn generator_residual(
    p: &PropagatorFactorization,
    fam: &GeneratorFamily,
    w: &Dofs,
    tau: f64,
) -> Result<Vec<f64>> {
    let g = &p.gram;
    let ka = p.index_of(tau)?;
    let kb = p.step_count();
    let orbit = p.orbit(w, ka, kb)?;
    let mut out = vec![0.0];
    let mut integral = DMatrix::zeros(w.nrows(), w.ncols());
    let mut f_prev = fam.at(p.time(ka))? * &orbit[0];
    for (j, x) in orbit.iter().enumerate().skip(1) {
        let f = fam.at(p.time(ka + j))? * x;
        integral += (&f_prev + &f) * (0.5 * p.dt);
        let r = x - w - &integral;
        out.push(g.h_norm_dofs(&r));
        f_prev = f;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub alpha: f64,
}

impl PicardConfig {
    pub fn new(tol: f64, max_iter: usize, alpha: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::invalid(format!(
                "Picard tolerance must be positive, got {tol}"
            )));
        }
        if max_iter == 0 {
            return Err(Error::invalid("Picard iteration cap must be at least 1"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "Picard weight must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            tol,
            max_iter,
            alpha,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PicardResult {
    pub times: Vec<f64>,
    pub states: Vec<Dofs>,
    pub iterations: usize,
    /// `‖u_{m+1} - u_m‖_α` per iteration.
    pub defects: Vec<f64>,
}

impl PicardResult {
    /// Ratios of successive defects, ignoring iterations already at roundoff.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        let floor = 1e-14 * self.defects.first().copied().unwrap_or(0.0);
        self.defects
            .windows(2)
            .filter(|w| w[0] > floor.max(f64::MIN_POSITIVE) && w[1] > floor)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

/// Fixed point of `u ↦ S(t - τ) w + ∫_τ^t S(t - r) L1(r) u(r) dr` on the grid
/// `τ + k dt`, the integral by the composite trapezoidal rule, iterated in
/// `‖f‖_α = sup_t ‖f(t)‖_D e^{-α (t - τ)}`.
pub fn picard_evolution(
    fam: &GeneratorFamily,
    w: &Dofs,
    tau: f64,
    t: f64,
    dt: f64,
    c5: f64,
    cfg: &PicardConfig,
) -> Result<PicardResult> {
    if !(cfg.alpha > c5) {
        return Err(Error::Precondition(format!(
            "Picard weight α = {} must exceed C5 = {c5}",
            cfg.alpha
        )));
    }
    let g = &fam.gram;
    let count = step_count(tau, t, dt)?;
    let times: Vec<f64> = (0..=count)
        .map(|k| if k == count { t } else { tau + k as f64 * dt })
        .collect();
    let s = (fam.l0() * dt).exp();
    let l1: Vec<DMatrix<f64>> = times.iter().map(|&r| fam.l1(r)).collect::<Result<_>>()?;

    let mut free = Vec::with_capacity(count + 1);
    free.push(w.clone());
    for k in 0..count {
        free.push(&s * &free[k]);
    }

    let weight: Vec<f64> = times
        .iter()
        .map(|&r| (-cfg.alpha * (r - tau)).exp())
        .collect();
    let mut u = free.clone();
    let mut defects = Vec::new();
    for it in 1..=cfg.max_iter {
        let mut next = Vec::with_capacity(count + 1);
        next.push(w.clone());
        // z_k = ∫_τ^{t_k} S(t_k - r) L1(r) u(r) dr, recursively
        let mut z = DMatrix::zeros(w.nrows(), w.ncols());
        for k in 0..count {
            z = &s * (z + &l1[k] * &u[k] * (0.5 * dt)) + &l1[k + 1] * &u[k + 1] * (0.5 * dt);
            next.push(&free[k + 1] + &z);
        }
        let d = next
            .iter()
            .zip(&u)
            .zip(&weight)
            .map(|((a, b), w)| g.graph_norm_sq_dofs(&(a - b)).sqrt() * w)
            .fold(0.0, f64::max);
        defects.push(d);
        u = next;
        if !d.is_finite() {
            return Err(Error::BlowUp { step: it });
        }
        if d <= cfg.tol {
            return Ok(PicardResult {
                times,
                states: u,
                iterations: it,
                defects,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iter,
        defect: *defects.last().expect("at least one iteration"),
    })
}
