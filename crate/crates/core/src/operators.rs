//! Block operators on `H = H²_bc x L²`: the beam generator `L0`, the tractive
//! perturbation `L1(t)`, their sum and H-adjoints, and the constants bounding
//! `L1` in the H- and D-norms.
//!
//! Every operator acts on one channel's `2N` degrees of freedom; applying it
//! to a `2N x 3` state matrix treats the channels independently.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::space::{BeamGrid, Dofs, GramSet};

/// Spatial shape of the tractive force.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Zero,
    /// `s²(l - s)²/l⁴`.
    Bump,
    /// Values at equally spaced knots spanning `[0, l]`, linearly interpolated.
    Tabulated(Vec<f64>),
}

/// `c(t) = c0 (1 + amp sin(omega t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Modulation {
    pub c0: f64,
    pub amp: f64,
    pub omega: f64,
}

impl Modulation {
    pub fn constant(c0: f64) -> Self {
        Self {
            c0,
            amp: 0.0,
            omega: 0.0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.c0 * (1.0 + self.amp * (self.omega * t).sin())
    }

    pub fn sup(&self) -> f64 {
        self.c0.abs() * (1.0 + self.amp.abs())
    }
}

/// `λ(s, t) = c(t) profile(s)` on a time window `[t0, t1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TractiveForce {
    pub profile: Profile,
    pub modulation: Modulation,
    l: f64,
    window: (f64, f64),
}

impl TractiveForce {
    pub fn new(profile: Profile, modulation: Modulation, l: f64, t0: f64, t1: f64) -> Result<Self> {
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::invalid(format!("length must be positive, got {l}")));
        }
        if !(t0.is_finite() && t1.is_finite() && t1 >= t0) {
            return Err(Error::invalid(format!("bad time window [{t0}, {t1}]")));
        }
        if modulation.c0 < 0.0 || modulation.amp.abs() > 1.0 {
            return Err(Error::invalid(
                "modulation must keep c(t) >= 0: need c0 >= 0 and |amp| <= 1",
            ));
        }
        if let Profile::Tabulated(v) = &profile {
            if v.len() < 3 || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(
                    "tabulated profile needs at least 3 finite values",
                ));
            }
        }
        Ok(Self {
            profile,
            modulation,
            l,
            window: (t0, t1),
        })
    }

    pub fn zero(l: f64, t0: f64, t1: f64) -> Result<Self> {
        Self::new(Profile::Zero, Modulation::constant(0.0), l, t0, t1)
    }

    pub fn bump(l: f64, c0: f64, t0: f64, t1: f64) -> Result<Self> {
        Self::new(Profile::Bump, Modulation::constant(c0), l, t0, t1)
    }

    pub fn length(&self) -> f64 {
        self.l
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    pub fn is_zero(&self) -> bool {
        let flat = match &self.profile {
            Profile::Zero => true,
            Profile::Tabulated(v) => v.iter().all(|&x| x == 0.0),
            Profile::Bump => false,
        };
        flat || self.modulation.c0 == 0.0
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        let (a, b) = self.window;
        // Tolerate the rounding of grid times such as t0 + k dt.
        let slack = 1e-12 * (1.0 + a.abs().max(b.abs()));
        if !(t >= a - slack && t <= b + slack) {
            return Err(Error::invalid(format!("time {t} outside [{a}, {b}]")));
        }
        Ok(())
    }

    pub fn profile_at(&self, s: f64) -> f64 {
        let l = self.l;
        match &self.profile {
            Profile::Zero => 0.0,
            Profile::Bump => {
                let r = s * (l - s) / (l * l);
                r * r
            }
            Profile::Tabulated(v) => {
                let (k, frac) = self.segment(v.len(), s);
                v[k] + frac * (v[k + 1] - v[k])
            }
        }
    }

    pub fn profile_slope_at(&self, s: f64) -> f64 {
        let l = self.l;
        match &self.profile {
            Profile::Zero => 0.0,
            Profile::Bump => 2.0 * s * (l - s) * (l - 2.0 * s) / l.powi(4),
            Profile::Tabulated(v) => {
                let (k, _) = self.segment(v.len(), s);
                let dx = l / (v.len() - 1) as f64;
                (v[k + 1] - v[k]) / dx
            }
        }
    }

    fn segment(&self, len: usize, s: f64) -> (usize, f64) {
        let dx = self.l / (len - 1) as f64;
        let x = (s / dx).clamp(0.0, (len - 1) as f64);
        let k = (x.floor() as usize).min(len - 2);
        (k, x - k as f64)
    }

    pub fn c(&self, t: f64) -> f64 {
        self.modulation.eval(t)
    }

    pub fn lambda(&self, s: f64, t: f64) -> f64 {
        self.c(t) * self.profile_at(s)
    }

    pub fn dlambda_ds(&self, s: f64, t: f64) -> f64 {
        self.c(t) * self.profile_slope_at(s)
    }

    /// `∫₀ˡ (∂s profile)² ds`.
    pub fn profile_slope_energy(&self) -> f64 {
        match &self.profile {
            Profile::Zero => 0.0,
            Profile::Bump => 2.0 / (105.0 * self.l),
            Profile::Tabulated(v) => {
                let dx = self.l / (v.len() - 1) as f64;
                v.windows(2).map(|w| (w[1] - w[0]).powi(2) / dx).sum()
            }
        }
    }

    /// Pointwise check of the endpoint conditions and interior positivity at
    /// the grid nodes for every sampled time.
    pub fn check_invariants(&self, grid: &BeamGrid, t_samples: &[f64]) -> Result<()> {
        const TOL: f64 = 1e-12;
        let l = self.l;
        let scale = self.modulation.sup().max(1.0);
        for &t in t_samples {
            self.check_time(t)?;
            let c = self.c(t);
            if c < 0.0 {
                return Err(Error::Precondition(format!("c({t}) = {c} is negative")));
            }
            for (name, val) in [
                ("λ(0)", self.lambda(0.0, t)),
                ("λ(l)", self.lambda(l, t)),
                ("∂sλ(0)", self.dlambda_ds(0.0, t)),
                ("∂sλ(l)", self.dlambda_ds(l, t)),
            ] {
                if val.abs() > TOL * scale {
                    return Err(Error::Precondition(format!("{name} = {val:e} at t = {t}")));
                }
            }
            if c > 0.0 && !matches!(self.profile, Profile::Zero) {
                for i in 1..=grid.interior() {
                    let s = grid.node(i);
                    if self.lambda(s, t) <= 0.0 {
                        return Err(Error::Precondition(format!(
                            "λ({s}, {t}) = {} is not positive",
                            self.lambda(s, t)
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorRole {
    L0,
    L1 { t: f64 },
    L { t: f64 },
    Adjoint(Box<OperatorRole>),
}

/// A `2N x 2N` operator on one channel, `[[uu, uv], [vu, vv]]`.
#[derive(Debug, Clone)]
pub struct BlockOperator {
    pub role: OperatorRole,
    pub mat: DMatrix<f64>,
}

impl BlockOperator {
    pub fn half(&self) -> usize {
        self.mat.nrows() / 2
    }

    /// Block `(i, j)` with 0 = displacement, 1 = velocity.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.half();
        self.mat.view((i * n, j * n), (n, n)).into_owned()
    }

    pub fn apply(&self, x: &Dofs) -> Dofs {
        &self.mat * x
    }

    pub fn time(&self) -> Option<f64> {
        fn inner(r: &OperatorRole) -> Option<f64> {
            match r {
                OperatorRole::L0 => None,
                OperatorRole::L1 { t } | OperatorRole::L { t } => Some(*t),
                OperatorRole::Adjoint(r) => inner(r),
            }
        }
        inner(&self.role)
    }
}

pub fn build_l0(g: &GramSet) -> Result<BlockOperator> {
    if g.m.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Assembly("mass matrix is singular".into()));
    }
    let n = g.dof_count();
    let mut mat = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        mat[(i, n + i)] = 1.0;
        for j in 0..n {
            mat[(n + i, j)] = -g.bmat[(i, j)] / g.m[i];
        }
    }
    Ok(BlockOperator {
        role: OperatorRole::L0,
        mat,
    })
}

/// `T(t) = -D1ᵀ W_λ(t) D1` with `λ` sampled at the cell midpoints.
pub fn tension_matrix(force: &TractiveForce, t: f64, g: &GramSet) -> DMatrix<f64> {
    let n = g.dof_count();
    let h = g.grid.spacing();
    let wl = DVector::from_fn(n, |i, _| h * force.lambda((i as f64 + 0.5) * h, t));
    let wd1 = DMatrix::from_fn(n, n, |i, j| wl[i] * g.d1[(i, j)]);
    let mut tm = -(g.d1.transpose() * wd1);
    tm = (&tm + tm.transpose()) * 0.5;
    tm
}

pub fn build_l1(force: &TractiveForce, t: f64, g: &GramSet) -> Result<BlockOperator> {
    force.check_time(t)?;
    let n = g.dof_count();
    let mut mat = DMatrix::zeros(2 * n, 2 * n);
    if !force.is_zero() {
        let tm = tension_matrix(force, t, g);
        for i in 0..n {
            for j in 0..n {
                mat[(n + i, j)] = tm[(i, j)] / g.m[i];
            }
        }
    }
    Ok(BlockOperator {
        role: OperatorRole::L1 { t },
        mat,
    })
}

pub fn build_l(force: &TractiveForce, t: f64, g: &GramSet) -> Result<BlockOperator> {
    let l0 = build_l0(g)?;
    let l1 = build_l1(force, t, g)?;
    Ok(BlockOperator {
        role: OperatorRole::L { t },
        mat: l0.mat + l1.mat,
    })
}

/// H-adjoint `M_H⁻¹ opᵀ M_H`.
pub fn adjoint_h(op: &BlockOperator, g: &GramSet) -> BlockOperator {
    let role = match &op.role {
        OperatorRole::Adjoint(inner) => (**inner).clone(),
        r => OperatorRole::Adjoint(Box::new(r.clone())),
    };
    BlockOperator {
        role,
        mat: gram_transpose(&op.mat, g),
    }
}

pub(crate) fn gram_transpose(a: &DMatrix<f64>, g: &GramSet) -> DMatrix<f64> {
    let mh = g.gram_h();
    g.gram_h_solve(&(a.transpose() * mh))
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn power_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.ncols();
    if n == 0 || a.amax() == 0.0 {
        return 0.0;
    }
    // Deterministic start with components along every direction.
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.37 * ((i as f64) * 1.618).sin());
    x.normalize_mut();
    let ata = a.transpose() * a;
    let mut est = 0.0;
    for _ in 0..20_000 {
        let y = &ata * &x;
        let ny = y.norm();
        if ny == 0.0 {
            return 0.0;
        }
        let next = ny.sqrt();
        x = y / ny;
        if (next - est).abs() <= 1e-13 * next {
            est = next;
            break;
        }
        est = next;
    }
    est
}

/// Operator norm of `a` on `(R^{2N}, ‖·‖_H)`: the spectral norm of `R a R⁻¹`.
pub fn h_operator_norm(a: &DMatrix<f64>, g: &GramSet) -> f64 {
    let r = g.energy_factor();
    let rinv = g.energy_factor_inv();
    power_norm(&(r * a * rinv))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StabilityConstants {
    pub c4: f64,
    pub c5: f64,
    pub m: f64,
    pub c4_formula: f64,
    pub c4_numeric: f64,
    pub c5_numeric: f64,
}

/// `‖L1(t)‖` in the H- and D-norms at each sample, the D-norm being
/// `‖x‖_D = ‖L0 x‖_H`, so `‖L1‖_D = ‖L0 L1 L0⁻¹‖_H`.
pub fn estimate_constants(
    force: &TractiveForce,
    g: &GramSet,
    t_samples: &[f64],
) -> Result<StabilityConstants> {
    if t_samples.is_empty() {
        return Err(Error::invalid("need at least one time sample"));
    }
    let l0 = build_l0(g)?;
    let l0_inv = l0
        .mat
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Assembly("L0 is singular".into()))?;
    let slope = (4.0 * force.length() * force.profile_slope_energy() / g.b).sqrt();
    let mut c4_formula: f64 = 0.0;
    let mut c4_numeric: f64 = 0.0;
    let mut c5_numeric: f64 = 0.0;
    for &t in t_samples {
        let l1 = build_l1(force, t, g)?;
        c4_formula = c4_formula.max(force.c(t).abs() * slope);
        if force.is_zero() {
            continue;
        }
        c4_numeric = c4_numeric.max(h_operator_norm(&l1.mat, g));
        let conj = &l0.mat * &l1.mat * &l0_inv;
        c5_numeric = c5_numeric.max(h_operator_norm(&conj, g));
    }
    let c4 = c4_formula.max(c4_numeric);
    let c5 = c5_numeric;
    Ok(StabilityConstants {
        c4,
        c5,
        m: c4.max(c5),
        c4_formula,
        c4_numeric,
        c5_numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::BeamGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gram(n: usize) -> GramSet {
        GramSet::new(BeamGrid::new(1.0, n).unwrap(), 1.0).unwrap()
    }

    fn random_dofs(rng: &mut ChaCha8Rng, rows: usize) -> Dofs {
        DMatrix::from_fn(rows, 3, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn l0_is_gram_skew() {
        for n in [8, 16, 32, 64] {
            let g = gram(n);
            let l0 = build_l0(&g).unwrap();
            let mh = g.gram_h();
            let s = &mh * &l0.mat + l0.mat.transpose() * &mh;
            assert!(
                s.amax() <= 1e-14 * mh.amax(),
                "n={n}: {}",
                s.amax() / mh.amax()
            );
        }
    }

    #[test]
    fn l0_block_pattern() {
        let g = gram(8);
        let l0 = build_l0(&g).unwrap();
        let n = g.dof_count();
        assert_eq!(l0.block(0, 0).amax(), 0.0);
        assert_eq!(l0.block(1, 1).amax(), 0.0);
        assert_eq!(l0.block(0, 1), DMatrix::identity(n, n));
        let mut x = DMatrix::zeros(2 * n, 3);
        x[(2, 1)] = 1.0;
        let y = l0.apply(&x);
        assert_eq!(y.rows(0, n).amax(), 0.0);
        assert_eq!(l0.apply(&DMatrix::zeros(2 * n, 3)).amax(), 0.0);
    }

    #[test]
    fn bump_invariants_and_window() {
        let grid = BeamGrid::new(2.0, 16).unwrap();
        let f = TractiveForce::bump(2.0, 1.5, 0.0, 1.0).unwrap();
        f.check_invariants(&grid, &[0.0, 0.5, 1.0]).unwrap();
        assert!(f.check_invariants(&grid, &[1.5]).is_err());
        assert!(matches!(
            build_l1(&f, -0.1, &gram(8)),
            Err(Error::InvalidArgument(_))
        ));

        let bad = TractiveForce::new(
            Profile::Tabulated(vec![0.3, 0.3, 1.0, 0.0, 0.0]),
            Modulation::constant(1.0),
            2.0,
            0.0,
            1.0,
        )
        .unwrap();
        assert!(matches!(
            bad.check_invariants(&grid, &[0.0]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn zero_force_gives_zero_l1() {
        let g = gram(16);
        let f = TractiveForce::zero(1.0, 0.0, 1.0).unwrap();
        assert_eq!(build_l1(&f, 0.3, &g).unwrap().mat.amax(), 0.0);
        let c = estimate_constants(&f, &g, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!((c.c4, c.c5), (0.0, 0.0));
    }

    #[test]
    fn tension_is_symmetric_negative_semidefinite() {
        for n in [8, 16, 32, 64] {
            let g = gram(n);
            let f = TractiveForce::new(
                Profile::Bump,
                Modulation {
                    c0: 2.0,
                    amp: 0.5,
                    omega: 3.0,
                },
                1.0,
                0.0,
                1.0,
            )
            .unwrap();
            for t in [0.0, 0.3, 0.7, 1.0] {
                let tm = tension_matrix(&f, t, &g);
                assert_eq!(tm, tm.transpose());
                let top = tm.symmetric_eigenvalues().max();
                assert!(top <= 1e-12, "n={n}, t={t}: {top}");
            }
        }
    }

    #[test]
    fn tension_matches_strong_form() {
        // u = (s - 1)², λ = s²(1-s)²: ∂s(λ ∂s u) = ∂s(2 s²(s - 1)³)
        let exact = |s: f64| 4.0 * s * (s - 1.0).powi(3) + 6.0 * s * s * (s - 1.0).powi(2);
        let mut errs = vec![];
        for n in [16, 32, 64] {
            let g = gram(n);
            let f = TractiveForce::bump(1.0, 1.0, 0.0, 1.0).unwrap();
            let l1 = build_l1(&f, 0.5, &g).unwrap();
            let nd = g.dof_count();
            let mut x = DMatrix::zeros(2 * nd, 3);
            for i in 0..nd {
                x[(i, 2)] = (g.grid.node(i) - 1.0).powi(2);
            }
            let y = l1.apply(&x);
            assert_eq!(y.rows(0, nd).amax(), 0.0);
            let err = (1..nd)
                .map(|i| (y[(nd + i, 2)] - exact(g.grid.node(i))).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[2] < 1e-3, "{errs:?}");
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 3.0, "{errs:?}");
        }
    }

    #[test]
    fn tension_weak_form_vs_strong_stencil() {
        // ⟨T u, w⟩ against the quadrature of w ∂s(λ ∂s u) from a centered stencil
        let u = |s: f64| (1.0 - s).powi(2) * (1.0 + s);
        let w = |s: f64| (1.0 - s).powi(2) * s.cos();
        let mut errs = vec![];
        for n in [16, 32, 64] {
            let g = gram(n);
            let h = g.grid.spacing();
            let f = TractiveForce::bump(1.0, 1.0, 0.0, 1.0).unwrap();
            let tm = tension_matrix(&f, 0.0, &g);
            let nd = g.dof_count();
            let uv = DVector::from_fn(nd, |i, _| u(g.grid.node(i)));
            let wv = DVector::from_fn(nd, |i, _| w(g.grid.node(i)));
            let weak = wv.dot(&(&tm * &uv));
            let mut strong = 0.0;
            for i in 0..=g.grid.interior() + 1 {
                let s = g.grid.node(i);
                let lp = f.lambda(s + 0.5 * h, 0.0);
                let lm = f.lambda(s - 0.5 * h, 0.0);
                let val = (lp * (u(s + h) - u(s)) - lm * (u(s) - u(s - h))) / (h * h);
                strong += g.w[i] * w(s) * val;
            }
            errs.push((weak - strong).abs());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 1e-4, "{errs:?}");
    }

    #[test]
    fn l0_adjoint_is_minus_l0() {
        let g = gram(16);
        let l0 = build_l0(&g).unwrap();
        let a = adjoint_h(&l0, &g);
        let d = (&a.mat + &l0.mat).amax() / l0.mat.amax();
        assert!(d <= 1e-12, "{d}");
        assert_eq!(a.role, OperatorRole::Adjoint(Box::new(OperatorRole::L0)));
    }

    #[test]
    fn l1_adjoint_identity_and_involution() {
        let g = gram(16);
        let f = TractiveForce::bump(1.0, 1.0, 0.0, 1.0).unwrap();
        let l1 = build_l1(&f, 0.2, &g).unwrap();
        let adj = adjoint_h(&l1, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x = random_dofs(&mut rng, 2 * g.dof_count());
            let y = random_dofs(&mut rng, 2 * g.dof_count());
            let lhs = g.h_inner_dofs(&l1.apply(&x), &y);
            let rhs = g.h_inner_dofs(&x, &adj.apply(&y));
            let scale = g.h_norm_dofs(&l1.apply(&x)) * g.h_norm_dofs(&y)
                + g.h_norm_dofs(&x) * g.h_norm_dofs(&adj.apply(&y));
            assert!((lhs - rhs).abs() <= 1e-12 * scale, "{lhs} vs {rhs}");
        }
        let back = adjoint_h(&adj, &g);
        assert_eq!(back.role, l1.role);
        let d = (&back.mat - &l1.mat).amax() / l1.mat.amax();
        assert!(d < 1e-12, "{d}");
    }

    /// `(1/b) ∫_s^l ∫_{s1}^l ∫_0^{s2} λ ∂v` by nested trapezoids on a fine grid.
    fn triple_integral(
        f: &TractiveForce,
        dv: impl Fn(f64) -> f64,
        b: f64,
        s_out: &[f64],
    ) -> Vec<f64> {
        let m = 4096;
        let l = f.length();
        let dx = l / m as f64;
        let xs: Vec<f64> = (0..=m).map(|i| i as f64 * dx).collect();
        let inner: Vec<f64> = xs.iter().map(|&s| f.lambda(s, 0.0) * dv(s)).collect();
        let mut a = vec![0.0; m + 1];
        for i in 1..=m {
            a[i] = a[i - 1] + 0.5 * dx * (inner[i - 1] + inner[i]);
        }
        let mut b2 = vec![0.0; m + 1];
        for i in (0..m).rev() {
            b2[i] = b2[i + 1] + 0.5 * dx * (a[i] + a[i + 1]);
        }
        let mut c = vec![0.0; m + 1];
        for i in (0..m).rev() {
            c[i] = c[i + 1] + 0.5 * dx * (b2[i] + b2[i + 1]);
        }
        s_out
            .iter()
            .map(|&s| {
                let k = ((s / dx).round() as usize).min(m);
                c[k] / b
            })
            .collect()
    }

    #[test]
    fn l1_adjoint_matches_triple_integral() {
        let v = |s: f64| (1.0 - s) * (0.3 + s * s);
        let dv = |s: f64| -(0.3 + s * s) + (1.0 - s) * 2.0 * s;
        let mut errs = vec![];
        for n in [15, 31, 63] {
            let g = gram(n);
            let f = TractiveForce::bump(1.0, 1.0, 0.0, 1.0).unwrap();
            let adj = adjoint_h(&build_l1(&f, 0.0, &g).unwrap(), &g);
            let nd = g.dof_count();
            let mut x = DMatrix::zeros(2 * nd, 3);
            for i in 0..nd {
                x[(nd + i, 0)] = v(g.grid.node(i));
            }
            let y = adj.apply(&x);
            let nodes: Vec<f64> = (0..nd).map(|i| g.grid.node(i)).collect();
            let oracle = triple_integral(&f, dv, g.b, &nodes);
            let scale = oracle.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
            let err = (0..nd)
                .map(|i| (y[(i, 0)] - oracle[i]).abs())
                .fold(0.0, f64::max);
            assert!(y.rows(nd, nd).amax() == 0.0);
            errs.push(err / scale);
        }
        assert!(errs[2] < 1e-2, "{errs:?}");
        assert!(errs[0] / errs[2] > 8.0, "{errs:?}");
    }

    #[test]
    fn bump_c4_formula() {
        let g = gram(32);
        let f = TractiveForce::bump(1.0, 1.0, 0.0, 1.0).unwrap();
        let ts: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let c = estimate_constants(&f, &g, &ts).unwrap();
        assert!((c.c4_formula - (8.0_f64 / 105.0).sqrt()).abs() < 1e-14);
        assert!(c.c4_numeric <= c.c4_formula, "{c:?}");
        assert!(c.c4_numeric > 0.0 && c.c5_numeric > 0.0);
        assert_eq!(c.m, c.c4.max(c.c5));
    }

    #[test]
    fn power_norm_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(20, 20, |_, _| rng.random_range(-1.0..1.0));
        let svd = a.clone().svd(false, false);
        let top = svd.singular_values.max();
        assert!((power_norm(&a) - top).abs() < 1e-8 * top);
        assert_eq!(power_norm(&DMatrix::zeros(4, 4)), 0.0);
    }

    #[test]
    fn l1_bounded_on_random_states() {
        let g = gram(16);
        let f = TractiveForce::bump(1.0, 1.0, 0.0, 1.0).unwrap();
        let ts = [0.0, 0.5, 1.0];
        let c = estimate_constants(&f, &g, &ts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &t in &ts {
            let l1 = build_l1(&f, t, &g).unwrap();
            for _ in 0..1000 {
                let x = random_dofs(&mut rng, 2 * g.dof_count());
                assert!(g.h_norm_dofs(&l1.apply(&x)) <= c.c4 * g.h_norm_dofs(&x) * (1.0 + 1e-12));
            }
        }
    }
}
