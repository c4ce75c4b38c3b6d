//! Q-Wiener noise on `L²(0, l; R³)` with `Q = Q_scalar ⊗ Id₃`, its
//! Karhunen–Loève sampling, the injection `A g = (0, σ g)`, and the trace and
//! variance quadratures built on a propagator factorization.
//!
//! Draws are addressed by `(seed, path, step)`: the ChaCha stream is the path
//! index and each step starts at a fixed word offset, so any step of any path
//! can be regenerated without replaying the ones before it.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::propagator::{adjoint_propagator, PropagatorFactorization};
use crate::space::{BeamGrid, BeamState, Dofs, GramSet, GridFunction};

/// Word offset between consecutive steps of one path.
const STEP_STRIDE: u128 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub enum Spectrum {
    /// `q_k = k^{-p}`.
    PowerLaw(f64),
    /// Explicit `q_1, ..., q_K`.
    Table(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub spectrum: Spectrum,
    pub q: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
    grid: BeamGrid,
    /// `e_k` at the unconstrained nodes, one column per mode.
    basis: DMatrix<f64>,
}

impl NoiseModel {
    pub fn new(
        grid: BeamGrid,
        k: usize,
        spectrum: Spectrum,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("noise truncation K must be at least 1"));
        }
        if k > grid.interior() {
            return Err(Error::invalid(format!(
                "K = {k} exceeds the {} sine modes representable on the grid",
                grid.interior()
            )));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma must be non-negative, got {sigma}"
            )));
        }
        let q: Vec<f64> = match &spectrum {
            Spectrum::PowerLaw(p) => {
                if !(*p > 1.0) {
                    return Err(Error::invalid(format!(
                        "spectrum k^-{p} is not trace class; need p > 1"
                    )));
                }
                (1..=k).map(|j| (j as f64).powf(-p)).collect()
            }
            Spectrum::Table(v) => {
                if v.len() < k {
                    return Err(Error::invalid(format!(
                        "spectrum table has {} entries, K = {k}",
                        v.len()
                    )));
                }
                v[..k].to_vec()
            }
        };
        if q.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid(
                "eigenvalues q_k must be finite and non-negative",
            ));
        }
        if q.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("eigenvalues q_k must be non-increasing"));
        }
        let l = grid.length();
        let norm = (2.0 / l).sqrt();
        let basis = DMatrix::from_fn(grid.dof_count(), k, |i, j| {
            norm * ((j + 1) as f64 * std::f64::consts::PI * grid.node(i) / l).sin()
        });
        Ok(Self {
            spectrum,
            q,
            sigma,
            seed,
            grid,
            basis,
        })
    }

    pub fn k(&self) -> usize {
        self.q.len()
    }

    pub fn grid(&self) -> &BeamGrid {
        &self.grid
    }

    /// `e_k` sampled at the unconstrained nodes (`N x K`).
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// `e_k` at every node, `k` counted from 1.
    pub fn mode(&self, k: usize) -> GridFunction {
        let l = self.grid.length();
        let norm = (2.0 / l).sqrt();
        GridFunction::from_fn(self.grid, |s| {
            let v = norm * (k as f64 * std::f64::consts::PI * s / l).sin();
            [v, v, v]
        })
    }
}

/// Coefficient increments `√(q_k dt) ξ_{k,c,j}`, stored per step as `K x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrements {
    pub dt: f64,
    pub path_index: u64,
    steps: Vec<DMatrix<f64>>,
}

impl WienerIncrements {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn coefficients(&self, j: usize) -> &DMatrix<f64> {
        &self.steps[j]
    }

    /// `ΔW_j` at the unconstrained nodes, `N x 3`.
    pub fn grid_increment(&self, model: &NoiseModel, j: usize) -> DMatrix<f64> {
        &model.basis * &self.steps[j]
    }

    /// Coefficients of `W(t_j) - W(t_0)`.
    pub fn cumulative(&self, j: usize) -> DMatrix<f64> {
        let k = self.steps.first().map_or(0, |m| m.nrows());
        let mut acc = DMatrix::zeros(k, 3);
        for m in &self.steps[..j] {
            acc += m;
        }
        acc
    }

    /// Sum of each run of `factor` consecutive increments: the same path seen
    /// with step `factor * dt`.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.len().is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps.len()
            )));
        }
        let steps = self
            .steps
            .chunks(factor)
            .map(|c| c.iter().skip(1).fold(c[0].clone(), |a, b| a + b))
            .collect();
        Ok(Self {
            dt: self.dt * factor as f64,
            path_index: self.path_index,
            steps,
        })
    }
}

/// Standard normals `ξ_{k,c}` for one `(path, step)`, `K x 3`.
pub fn standard_normals(seed: u64, path_index: u64, step: usize, k: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng.set_word_pos(step as u128 * STEP_STRIDE);
    let mut out = DMatrix::zeros(k, 3);
    for c in 0..3 {
        for i in 0..k {
            out[(i, c)] = rng.sample(StandardNormal);
        }
    }
    out
}

pub fn sample_increments(
    model: &NoiseModel,
    dt: f64,
    n_steps: usize,
    path_index: u64,
) -> Result<WienerIncrements> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let k = model.k();
    let scale: Vec<f64> = model.q.iter().map(|q| (q * dt).sqrt()).collect();
    let steps = (0..n_steps)
        .map(|j| {
            let mut xi = standard_normals(model.seed, path_index, j, k);
            for c in 0..3 {
                for i in 0..k {
                    xi[(i, c)] *= scale[i];
                }
            }
            xi
        })
        .collect();
    Ok(WienerIncrements {
        dt,
        path_index,
        steps,
    })
}

/// `(0, σ g)`.
pub fn apply_a(model: &NoiseModel, g: &GridFunction) -> Result<BeamState> {
    if g.grid() != model.grid() {
        return Err(Error::Shape("noise grid and function grid differ".into()));
    }
    BeamState::new(GridFunction::zeros(*g.grid()), g.scaled(model.sigma))
}

/// `A` on unconstrained values: a `2N x 3` state with velocity rows `σ g`.
pub fn apply_a_dofs(model: &NoiseModel, g: &DMatrix<f64>) -> Dofs {
    let n = g.nrows();
    let mut x = DMatrix::zeros(2 * n, g.ncols());
    x.rows_mut(n, n).copy_from(&(g * model.sigma));
    x
}

/// `Tr(Q) = 3 Σ_{k≤K} q_k`.
pub fn trace_q(model: &NoiseModel) -> f64 {
    3.0 * model.q.iter().sum::<f64>()
}

/// `3 Σ_{k>K} q_k` for power-law spectra; tables carry no tail.
pub fn trace_tail(model: &NoiseModel) -> f64 {
    match model.spectrum {
        Spectrum::PowerLaw(p) => 3.0 * power_tail(p, model.k()),
        Spectrum::Table(_) => 0.0,
    }
}

/// `Σ_{k>K} k^{-p}`: a direct sum over the next 1000 terms plus an
/// Euler–Maclaurin remainder.
fn power_tail(p: f64, k: usize) -> f64 {
    let m = k + 1000;
    let direct: f64 = ((k + 1)..=m).map(|j| (j as f64).powf(-p)).sum();
    let x = m as f64;
    // Σ_{j>m} j^{-p} = ∫_m^∞ - f(m)/2 - f'(m)/12 + f'''(m)/720 - ...
    let f = x.powf(-p);
    let rest = x.powf(1.0 - p) / (p - 1.0) - 0.5 * f + p * x.powf(-p - 1.0) / 12.0
        - p * (p + 1.0) * (p + 2.0) * x.powf(-p - 3.0) / 720.0;
    direct + rest
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceCondition {
    pub value: f64,
    pub bound: f64,
}

fn check_aligned(p: &PropagatorFactorization, t0: f64, t: f64) -> Result<(usize, usize)> {
    let ka = p.index_of(t0)?;
    let kb = p.index_of(t)?;
    if ka > kb {
        return Err(Error::invalid(format!("need t0 ≤ t, got {t0} > {t}")));
    }
    Ok((ka, kb))
}

/// Trapezoidal quadrature in `r` of `Σ_{k,c} ‖U(t,r) A √q_k e_{k,c}‖²_H`,
/// with the bound `(t - t0) σ² e^{2 C4 (t - t0)} Tr(Q)`.
pub fn trace_condition(
    p: &PropagatorFactorization,
    model: &NoiseModel,
    t0: f64,
    t: f64,
    c4: f64,
) -> Result<TraceCondition> {
    let (ka, kb) = check_aligned(p, t0, t)?;
    let g = p.gram();
    let span = t - t0;
    let bound = span * model.sigma.powi(2) * (2.0 * c4 * span).exp() * trace_q(model);
    if model.sigma == 0.0 || ka == kb {
        return Ok(TraceCondition { value: 0.0, bound });
    }
    let n = g.dof_count();
    let k = model.k();
    // columns σ √q_k (0, e_k); one channel, the other two are identical
    let mut a = DMatrix::zeros(2 * n, k);
    for j in 0..k {
        let w = model.sigma * model.q[j].sqrt();
        for i in 0..n {
            a[(n + i, j)] = w * model.basis[(i, j)];
        }
    }
    let energy = |u: &DMatrix<f64>| -> f64 {
        let y = u * &a;
        3.0 * g.h_inner_dofs(&y, &y)
    };
    let dim = 2 * n;
    let mut prop = DMatrix::<f64>::identity(dim, dim);
    let mut vals = vec![0.0; kb - ka + 1];
    vals[kb - ka] = energy(&prop);
    for j in (ka..kb).rev() {
        prop = &prop * p.step(j);
        vals[j - ka] = energy(&prop);
    }
    let value = p.dt * (vals.iter().sum::<f64>() - 0.5 * (vals[0] + vals[kb - ka]));
    Ok(TraceCondition { value, bound })
}

/// Variance of `⟨Σ_j U(t, t_{j+1}) A ΔW_j, h⟩_H`, the stochastic convolution as
/// the solver discretizes it: `dt Σ_{j} Σ_{k,c} q_k ⟨A e_{k,c}, U*(t, t_{j+1}) h⟩²_H`.
/// This is the right-endpoint quadrature of the Itô-isometry integral.
pub fn ito_variance(
    p: &PropagatorFactorization,
    model: &NoiseModel,
    h: &Dofs,
    t0: f64,
    t: f64,
) -> Result<f64> {
    Ok(ito_variance_curve(p, model, h, t0, t)?
        .last()
        .copied()
        .unwrap_or(0.0))
}

/// Integrand samples `Σ_{k,c} q_k ⟨A e_{k,c}, U*(t, r_j) h⟩²_H` at `r_j = t_{ka..=kb}`.
pub fn ito_integrand(
    p: &PropagatorFactorization,
    model: &NoiseModel,
    h: &Dofs,
    t0: f64,
    t: f64,
) -> Result<Vec<f64>> {
    let (ka, kb) = check_aligned(p, t0, t)?;
    let g = p.gram();
    let n = g.dof_count();
    if h.nrows() != 2 * n || h.ncols() != 3 {
        return Err(Error::Shape(format!("test function must be {}x3", 2 * n)));
    }
    let adj = adjoint_propagator(p, g);
    let mut out = vec![0.0; kb - ka + 1];
    let mut phi = h.clone();
    let eval = |phi: &Dofs| -> f64 {
        // ⟨A e_{k,c}, φ⟩_H = σ Σ_i M_i e_k(s_i) φ_v(i, c)
        let mut s = 0.0;
        for c in 0..3 {
            for k in 0..model.k() {
                let mut ip = 0.0;
                for i in 0..n {
                    ip += g.m[i] * model.basis[(i, k)] * phi[(n + i, c)];
                }
                s += model.q[k] * (model.sigma * ip).powi(2);
            }
        }
        s
    };
    out[kb - ka] = eval(&phi);
    for j in (ka..kb).rev() {
        phi = adj.step(j) * &phi;
        out[j - ka] = eval(&phi);
    }
    Ok(out)
}

/// `Var ⟨X(t_m), h⟩` contributions for every end time `t_m`, `m = ka..=kb`.
/// Each entry needs its own adjoint orbit, so the cost is quadratic in steps.
pub fn ito_variance_curve(
    p: &PropagatorFactorization,
    model: &NoiseModel,
    h: &Dofs,
    t0: f64,
    t: f64,
) -> Result<Vec<f64>> {
    let (ka, kb) = check_aligned(p, t0, t)?;
    let mut out = Vec::with_capacity(kb - ka + 1);
    out.push(0.0);
    for m in (ka + 1)..=kb {
        let f = ito_integrand(p, model, h, t0, p.time(m))?;
        // right endpoints r = t_{ka+1}, ..., t_m
        out.push(p.dt * f[1..].iter().sum::<f64>());
    }
    Ok(out)
}

/// Same integral with the trapezoidal rule in `r`.
pub fn ito_variance_trapezoid(
    p: &PropagatorFactorization,
    model: &NoiseModel,
    h: &Dofs,
    t0: f64,
    t: f64,
) -> Result<f64> {
    let f = ito_integrand(p, model, h, t0, t)?;
    if f.len() < 2 {
        return Ok(0.0);
    }
    Ok(p.dt * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[f.len() - 1])))
}

/// `⟨·, e_k⟩_{L²}` of the velocity rows of a state, per channel (`K x 3`).
pub fn project_velocity(model: &NoiseModel, g: &GramSet, x: &Dofs) -> DMatrix<f64> {
    let n = g.dof_count();
    let mut out = DMatrix::zeros(model.k(), x.ncols());
    for c in 0..x.ncols() {
        for k in 0..model.k() {
            out[(k, c)] = (0..n)
                .map(|i| g.m[i] * model.basis[(i, k)] * x[(n + i, c)])
                .sum();
        }
    }
    out
}
