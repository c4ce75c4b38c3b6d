//! Discrete function spaces on the arc-length interval `[0, l]`.
//!
//! The fiber is clamped at `s = l` and free at `s = 0`. Grid functions carry
//! values at all `n + 2` nodes; the operators act on the `n + 1` unconstrained
//! degrees of freedom (nodes `0..=n`), the clamped value at `s = l` being
//! eliminated. The clamped slope enters through a ghost node
//! `x[n+2] = x[n] + 2h * slope`, and the free-end conditions through the ghost
//! nodes `x[-1]`, `x[-2]` that make the centered second and third differences
//! at `s = 0` vanish.
//!
//! The three Cartesian channels are discretized identically, so every matrix
//! here is a scalar `(n+1) x (n+1)` (or rectangular) matrix shared by the
//! channels. A state in degree-of-freedom form is a `2(n+1) x 3` matrix: rows
//! `0..N` hold the displacement, rows `N..2N` the velocity, one column per
//! channel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative tolerance for boundary-condition preconditions, measured against
/// the H-norm of the state.
pub const BC_TOL: f64 = 1e-8;

/// Degree-of-freedom representation of a state: `2N x 3`.
pub type Dofs = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamGrid {
    l: f64,
    n: usize,
    h: f64,
}

impl BeamGrid {
    /// Uniform grid with `n` interior nodes, `h = l / (n + 1)`.
    pub fn new(l: f64, n: usize) -> Result<Self> {
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::invalid(format!(
                "beam length must be positive, got {l}"
            )));
        }
        if n < 3 {
            return Err(Error::invalid(format!(
                "need at least 3 interior nodes for the boundary stencils, got {n}"
            )));
        }
        Ok(Self {
            l,
            n,
            h: l / (n + 1) as f64,
        })
    }

    pub fn length(&self) -> f64 {
        self.l
    }

    /// Interior node count.
    pub fn interior(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Total node count including both endpoints.
    pub fn node_count(&self) -> usize {
        self.n + 2
    }

    /// Unconstrained nodes per channel and component (nodes `0..=n`).
    pub fn dof_count(&self) -> usize {
        self.n + 1
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n + 1 {
            self.l
        } else {
            i as f64 * self.h
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.node_count()).map(|i| self.node(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcKind {
    Homogeneous,
    Nonhomogeneous,
}

/// The four boundary conditions: `x(l)`, `∂s x(l)`, `∂ss x(0)`, `∂sss x(0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryConditionSet {
    pub kind: BcKind,
    pub value_l: [f64; 3],
    pub slope_l: [f64; 3],
    pub moment_0: [f64; 3],
    pub shear_0: [f64; 3],
}

impl BoundaryConditionSet {
    pub fn homogeneous() -> Self {
        Self {
            kind: BcKind::Homogeneous,
            value_l: [0.0; 3],
            slope_l: [0.0; 3],
            moment_0: [0.0; 3],
            shear_0: [0.0; 3],
        }
    }

    /// Clamped with unit tangent `e3` at `s = l`.
    pub fn nonhomogeneous() -> Self {
        Self {
            kind: BcKind::Nonhomogeneous,
            slope_l: [0.0, 0.0, 1.0],
            ..Self::homogeneous()
        }
    }

    pub fn for_kind(kind: BcKind) -> Self {
        match kind {
            BcKind::Homogeneous => Self::homogeneous(),
            BcKind::Nonhomogeneous => Self::nonhomogeneous(),
        }
    }
}

/// An `R^3`-valued function sampled at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: BeamGrid,
    values: Vec<[f64; 3]>,
}

impl GridFunction {
    pub fn zeros(grid: BeamGrid) -> Self {
        Self {
            grid,
            values: vec![[0.0; 3]; grid.node_count()],
        }
    }

    pub fn from_fn(grid: BeamGrid, f: impl Fn(f64) -> [f64; 3]) -> Self {
        Self {
            grid,
            values: grid.nodes().into_iter().map(f).collect(),
        }
    }

    pub fn from_values(grid: BeamGrid, values: Vec<[f64; 3]>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::Shape(format!(
                "expected {} node values, got {}",
                grid.node_count(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &BeamGrid {
        &self.grid
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|x| x.is_finite())
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().flatten().for_each(|x| *x *= a);
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_grid(&self.grid, &other.grid)?;
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        Ok(out)
    }

    /// Node values padded with the ghost nodes `[-2, -1]` and `n + 2`
    /// implied by `bc`. Index 0 of the result is node `-2`.
    pub fn extended(&self, bc: &BoundaryConditionSet) -> Vec<[f64; 3]> {
        let h = self.grid.h;
        let n = self.grid.n;
        let x = &self.values;
        let mut ext = Vec::with_capacity(x.len() + 3);
        let mut m1 = [0.0; 3];
        let mut m2 = [0.0; 3];
        for c in 0..3 {
            // (x[-1] - 2x[0] + x[1]) / h^2 = moment
            m1[c] = 2.0 * x[0][c] - x[1][c] + h * h * bc.moment_0[c];
            // (x[2] - 2x[1] + 2x[-1] - x[-2]) / (2h^3) = shear
            m2[c] = x[2][c] - 2.0 * x[1][c] + 2.0 * m1[c] - 2.0 * h * h * h * bc.shear_0[c];
        }
        ext.push(m2);
        ext.push(m1);
        ext.extend_from_slice(x);
        let mut g = [0.0; 3];
        for c in 0..3 {
            g[c] = x[n][c] + 2.0 * h * bc.slope_l[c];
        }
        ext.push(g);
        ext
    }

    /// Discrete boundary quantities read off the ghost-extended stencils.
    pub fn boundary_report(&self, bc: &BoundaryConditionSet) -> BoundaryReport {
        let h = self.grid.h;
        let n = self.grid.n;
        let e = self.extended(bc);
        // e[i + 2] is node i.
        let node = |i: isize| e[(i + 2) as usize];
        let mut r = BoundaryReport::default();
        for c in 0..3 {
            r.value_l[c] = node(n as isize + 1)[c];
            r.slope_l[c] = (node(n as isize + 2)[c] - node(n as isize)[c]) / (2.0 * h);
            r.moment_0[c] = (node(-1)[c] - 2.0 * node(0)[c] + node(1)[c]) / (h * h);
            r.shear_0[c] = (node(2)[c] - 2.0 * node(1)[c] + 2.0 * node(-1)[c] - node(-2)[c])
                / (2.0 * h * h * h);
        }
        r
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoundaryReport {
    pub value_l: [f64; 3],
    pub slope_l: [f64; 3],
    pub moment_0: [f64; 3],
    pub shear_0: [f64; 3],
}

impl BoundaryReport {
    /// Largest deviation from `bc`, each condition scaled by `h^k` so all
    /// terms carry units of length.
    pub fn max_violation(&self, bc: &BoundaryConditionSet, h: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for c in 0..3 {
            worst = worst
                .max((self.value_l[c] - bc.value_l[c]).abs())
                .max(h * (self.slope_l[c] - bc.slope_l[c]).abs())
                .max(h * h * (self.moment_0[c] - bc.moment_0[c]).abs())
                .max(h * h * h * (self.shear_0[c] - bc.shear_0[c]).abs());
        }
        worst
    }
}

/// Displacement/velocity pair, the discrete element of `H = H²_bc x L²`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamState {
    pub u: GridFunction,
    pub v: GridFunction,
}

impl BeamState {
    pub fn new(u: GridFunction, v: GridFunction) -> Result<Self> {
        check_grid(u.grid(), v.grid())?;
        Ok(Self { u, v })
    }

    pub fn zeros(grid: BeamGrid) -> Self {
        Self {
            u: GridFunction::zeros(grid),
            v: GridFunction::zeros(grid),
        }
    }

    pub fn grid(&self) -> &BeamGrid {
        self.u.grid()
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// Unconstrained node values; the values at `s = l` are dropped.
    pub fn to_dofs(&self) -> Dofs {
        let n = self.grid().dof_count();
        let mut x = DMatrix::zeros(2 * n, 3);
        for i in 0..n {
            for c in 0..3 {
                x[(i, c)] = self.u.values[i][c];
                x[(n + i, c)] = self.v.values[i][c];
            }
        }
        x
    }

    /// Inverse of [`to_dofs`](Self::to_dofs) with homogeneous clamped values.
    pub fn from_dofs(grid: BeamGrid, x: &Dofs) -> Result<Self> {
        let n = grid.dof_count();
        if x.nrows() != 2 * n || x.ncols() != 3 {
            return Err(Error::Shape(format!(
                "expected a {}x3 state, got {}x{}",
                2 * n,
                x.nrows(),
                x.ncols()
            )));
        }
        let mut u = GridFunction::zeros(grid);
        let mut v = GridFunction::zeros(grid);
        for i in 0..n {
            for c in 0..3 {
                u.values[i][c] = x[(i, c)];
                v.values[i][c] = x[(n + i, c)];
            }
        }
        Ok(Self { u, v })
    }

    /// Degrees of freedom after checking the homogeneous clamped values
    /// `u(l) = v(l) = 0` against `BC_TOL * ‖x‖_H`.
    pub fn dofs_checked(&self, g: &GramSet) -> Result<Dofs> {
        check_grid(self.grid(), &g.grid)?;
        let x = self.to_dofs();
        let scale = g.h_norm_dofs(&x);
        let last = self.grid().node_count() - 1;
        let worst = (0..3)
            .map(|c| {
                self.u.values[last][c]
                    .abs()
                    .max(self.v.values[last][c].abs())
            })
            .fold(0.0, f64::max);
        if worst > BC_TOL * scale {
            return Err(Error::Precondition(format!(
                "clamped value at s=l is {worst:e}, exceeds tolerance {:e}",
                BC_TOL * scale
            )));
        }
        Ok(x)
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            u: self.u.scaled(a),
            v: self.v.scaled(a),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            u: self.u.add(&other.u)?,
            v: self.v.add(&other.v)?,
        })
    }
}

/// Reset the clamped nodal values to those required by `bc`. The slope and
/// free-end conditions are carried by the ghost nodes of
/// [`GridFunction::extended`], so after this call all four conditions hold at
/// grid level. Idempotent.
pub fn enforce_bc(x: &BeamState, bc: &BoundaryConditionSet) -> BeamState {
    let mut out = x.clone();
    let last = x.grid().node_count() - 1;
    out.u.values[last] = bc.value_l;
    // The clamped value is time independent, so the velocity vanishes there.
    out.v.values[last] = [0.0; 3];
    out
}

fn check_grid(a: &BeamGrid, b: &BeamGrid) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "grid mismatch: (l={}, n={}) vs (l={}, n={})",
            a.l, a.n, b.l, b.n
        )));
    }
    Ok(())
}

/// Difference matrices, quadrature weights and Gram matrices of the
/// discrete spaces.
#[derive(Clone)]
pub struct GramSet {
    pub grid: BeamGrid,
    /// Bending stiffness.
    pub b: f64,
    /// Forward differences on the `n + 1` cells, `(n+1) x N`.
    pub d1: DMatrix<f64>,
    /// Second differences at all `n + 2` nodes, `(n+2) x N`.
    pub d2: DMatrix<f64>,
    /// Trapezoidal weights at all nodes.
    pub w: DVector<f64>,
    /// Lumped L² mass on the unconstrained nodes (diagonal).
    pub m: DVector<f64>,
    /// `H²_bc` Gram matrix `b D2ᵀ W D2`.
    pub bmat: DMatrix<f64>,
    /// Weak fourth derivative `M⁻¹ D2ᵀ W D2`.
    pub d4: DMatrix<f64>,
    /// Strong five-point fourth derivative with cubic-exact ghost values.
    pub d4s: DMatrix<f64>,
    /// Rows of `d4 - d4s` that are not identically zero; their kernel is the
    /// discrete `D(L0)` displacement space.
    pub d_constraints: DMatrix<f64>,
    /// Orthonormal rows spanning the row space of `d_constraints`.
    d_basis: DMatrix<f64>,
    chol_b: Cholesky<f64, Dyn>,
    /// Upper Cholesky factor of `B`.
    r_b: DMatrix<f64>,
}

impl std::fmt::Debug for GramSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GramSet")
            .field("grid", &self.grid)
            .field("b", &self.b)
            .finish_non_exhaustive()
    }
}

impl GramSet {
    pub fn new(grid: BeamGrid, b: f64) -> Result<Self> {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::invalid(format!(
                "bending stiffness must be positive, got {b}"
            )));
        }
        let n = grid.dof_count();
        let nn = grid.node_count();
        let h = grid.h;
        let h2 = h * h;

        let mut d1 = DMatrix::zeros(n, n);
        for i in 0..n {
            d1[(i, i)] = -1.0 / h;
            if i + 1 < n {
                d1[(i, i + 1)] = 1.0 / h;
            }
        }

        let mut d2 = DMatrix::zeros(nn, n);
        // one-sided second-order second difference at the free end
        d2[(0, 0)] = 2.0 / h2;
        d2[(0, 1)] = -5.0 / h2;
        d2[(0, 2)] = 4.0 / h2;
        if 3 < n {
            d2[(0, 3)] = -1.0 / h2;
        }
        for i in 1..n {
            d2[(i, i - 1)] = 1.0 / h2;
            d2[(i, i)] = -2.0 / h2;
            if i + 1 < n {
                d2[(i, i + 1)] = 1.0 / h2;
            }
        }
        // node l: x[n+2] = x[n] (zero slope ghost), x[n+1] = 0
        d2[(nn - 1, n - 1)] = 2.0 / h2;

        let mut w = DVector::from_element(nn, h);
        w[0] = 0.5 * h;
        w[nn - 1] = 0.5 * h;

        let mut m = DVector::from_element(n, h);
        m[0] = 0.5 * h;

        let wd2 = DMatrix::from_fn(nn, n, |i, j| w[i] * d2[(i, j)]);
        let raw = d2.transpose() * wd2;
        let raw = (&raw + raw.transpose()) * 0.5;
        let bmat = &raw * b;
        let d4 = DMatrix::from_fn(n, n, |i, j| raw[(i, j)] / m[i]);

        let d4s = strong_fourth_difference(&grid);
        let diff = &d4 - &d4s;
        let scale = d4s.amax();
        let rows: Vec<usize> = (0..n)
            .filter(|&i| diff.row(i).amax() > 1e-12 * scale)
            .collect();
        let d_constraints = DMatrix::from_fn(rows.len(), n, |r, j| diff[(rows[r], j)]);
        let svd = d_constraints.clone().svd(false, true);
        let vt = svd.v_t.expect("requested");
        let smax = svd.singular_values.max();
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&k| svd.singular_values[k] > 1e-10 * smax)
            .collect();
        let d_basis = DMatrix::from_fn(keep.len(), n, |r, j| vt[(keep[r], j)]);

        let chol_b = Cholesky::new(bmat.clone())
            .ok_or_else(|| Error::Assembly("H²_bc Gram matrix is not positive definite".into()))?;
        let r_b = chol_b.l().transpose();
        Ok(Self {
            grid,
            b,
            d1,
            d2,
            w,
            m,
            bmat,
            d4,
            d4s,
            d_constraints,
            d_basis,
            chol_b,
            r_b,
        })
    }

    pub fn dof_count(&self) -> usize {
        self.grid.dof_count()
    }

    /// Block Gram matrix of the H inner product on one channel.
    pub fn gram_h(&self) -> DMatrix<f64> {
        let n = self.dof_count();
        let mut g = DMatrix::zeros(2 * n, 2 * n);
        g.view_mut((0, 0), (n, n)).copy_from(&self.bmat);
        for i in 0..n {
            g[(n + i, n + i)] = self.m[i];
        }
        g
    }

    /// Upper-triangular `R` with `Rᵀ R = M_H`; `R x` are energy coordinates.
    pub fn energy_factor(&self) -> DMatrix<f64> {
        let n = self.dof_count();
        let mut r = DMatrix::zeros(2 * n, 2 * n);
        r.view_mut((0, 0), (n, n)).copy_from(&self.r_b);
        for i in 0..n {
            r[(n + i, n + i)] = self.m[i].sqrt();
        }
        r
    }

    /// Inverse of [`energy_factor`](Self::energy_factor).
    pub fn energy_factor_inv(&self) -> DMatrix<f64> {
        let n = self.dof_count();
        let mut r = DMatrix::zeros(2 * n, 2 * n);
        let rinv = self
            .r_b
            .clone()
            .try_inverse()
            .expect("Cholesky factor of a positive definite matrix is invertible");
        r.view_mut((0, 0), (n, n)).copy_from(&rinv);
        for i in 0..n {
            r[(n + i, n + i)] = 1.0 / self.m[i].sqrt();
        }
        r
    }

    /// `M_H⁻¹ y` for a `2N x k` block.
    pub fn gram_h_solve(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dof_count();
        let mut out = y.clone();
        let top = self.chol_b.solve(&y.rows(0, n).into_owned());
        out.rows_mut(0, n).copy_from(&top);
        for i in 0..n {
            for c in 0..y.ncols() {
                out[(n + i, c)] /= self.m[i];
            }
        }
        out
    }

    pub fn solve_b(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol_b.solve(y)
    }

    /// `Σ_c u1ᵀ B u2` on `N x k` blocks.
    pub fn h2bc_dofs(&self, u1: &DMatrix<f64>, u2: &DMatrix<f64>) -> f64 {
        (u1.transpose() * &self.bmat * u2).trace()
    }

    /// `Σ_c v1ᵀ M v2` on `N x k` blocks.
    pub fn l2_dofs(&self, v1: &DMatrix<f64>, v2: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for c in 0..v1.ncols() {
            for i in 0..v1.nrows() {
                acc += v1[(i, c)] * self.m[i] * v2[(i, c)];
            }
        }
        acc
    }

    pub fn h_inner_dofs(&self, x: &Dofs, y: &Dofs) -> f64 {
        let n = self.dof_count();
        self.h2bc_dofs(&x.rows(0, n).into_owned(), &y.rows(0, n).into_owned())
            + self.l2_dofs(&x.rows(n, n).into_owned(), &y.rows(n, n).into_owned())
    }

    pub fn h_norm_dofs(&self, x: &Dofs) -> f64 {
        self.h_inner_dofs(x, x).max(0.0).sqrt()
    }

    /// `‖x‖²_D = b²‖∂ssss u‖²_{L²} + b‖∂ss v‖²_{L²}` with the strong
    /// fourth difference.
    pub fn d_norm_sq_dofs(&self, x: &Dofs) -> f64 {
        self.fourth_norm_sq(&self.d4s, x)
    }

    /// `‖L0 x‖²_H`, i.e. the D-norm built from the weak fourth derivative.
    /// Agrees with [`d_norm_sq_dofs`](Self::d_norm_sq_dofs) on discrete D.
    pub fn graph_norm_sq_dofs(&self, x: &Dofs) -> f64 {
        self.fourth_norm_sq(&self.d4, x)
    }

    fn fourth_norm_sq(&self, d4: &DMatrix<f64>, x: &Dofs) -> f64 {
        let n = self.dof_count();
        let u = x.rows(0, n).into_owned();
        let v = x.rows(n, n).into_owned();
        let d4u = d4 * &u;
        let d2v = &self.d2 * &v;
        let mut acc = self.b * self.b * self.l2_dofs(&d4u, &d4u);
        for c in 0..v.ncols() {
            for i in 0..d2v.nrows() {
                acc += self.b * self.w[i] * d2v[(i, c)] * d2v[(i, c)];
            }
        }
        acc
    }

    /// Free-vibration modes of `L0`: angular frequencies (ascending) and the
    /// M-orthonormal displacement shapes as columns (`Bφ = ω² Mφ`).
    pub fn modes(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dof_count();
        let mi = DVector::from_fn(n, |i, _| 1.0 / self.m[i].sqrt());
        let a = DMatrix::from_fn(n, n, |i, j| mi[i] * self.bmat[(i, j)] * mi[j]);
        let eig = a.symmetric_eigen();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let freq = DVector::from_fn(n, |k, _| eig.eigenvalues[idx[k]].max(0.0).sqrt());
        let shapes = DMatrix::from_fn(n, n, |i, k| mi[i] * eig.eigenvectors[(i, idx[k])]);
        (freq, shapes)
    }

    /// Relative distance of the displacement part from discrete D:
    /// `‖(d4 - d4s) u‖ / ‖d4s u‖` (zero for `u = 0`).
    pub fn d_defect_dofs(&self, x: &Dofs) -> f64 {
        let n = self.dof_count();
        let u = x.rows(0, n);
        let num = (&self.d_constraints * u).norm();
        let den = (&self.d4s * u).norm();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    /// Orthogonal (Euclidean) projection of the displacement rows onto the
    /// kernel of the constraint rows; velocity rows are untouched.
    pub fn project_discrete_d(&self, x: &Dofs) -> Dofs {
        let n = self.dof_count();
        let q = &self.d_basis;
        let mut u = x.rows(0, n).into_owned();
        for _ in 0..2 {
            let y = q * &u;
            u -= q.transpose() * y;
        }
        let mut out = x.clone();
        out.rows_mut(0, n).copy_from(&u);
        out
    }
}

/// Five-point `∂ssss` at the unconstrained nodes. Ghost values come from the
/// homogeneous conditions: `x[-1] = 2x[0] - x[1]`, `x[-2] = x[2] - 4x[1] + 4x[0]`
/// at the free end and the cubic extrapolation `x[n+2] = 3x[n] - x[n-1]/2`
/// through the clamped value and slope.
fn strong_fourth_difference(grid: &BeamGrid) -> DMatrix<f64> {
    let n = grid.dof_count();
    let h4 = grid.h.powi(4);
    // p maps dofs to the extended node vector, index 0 = node -2
    let mut p = DMatrix::zeros(n + 4, n);
    for i in 0..n {
        p[(i + 2, i)] = 1.0;
    }
    p[(1, 0)] = 2.0;
    p[(1, 1)] = -1.0;
    p[(0, 0)] = 4.0;
    p[(0, 1)] = -4.0;
    p[(0, 2)] = 1.0;
    // row n + 2 is the clamped node (zero), row n + 3 the ghost
    p[(n + 3, n - 1)] = 3.0;
    p[(n + 3, n - 2)] = -0.5;
    let stencil = [1.0, -4.0, 6.0, -4.0, 1.0];
    DMatrix::from_fn(n, n, |i, j| {
        (0..5).map(|k| stencil[k] * p[(i + k, j)]).sum::<f64>() / h4
    })
}

fn displacement_dofs(u: &GridFunction, g: &GramSet) -> Result<DMatrix<f64>> {
    check_grid(u.grid(), &g.grid)?;
    let n = g.dof_count();
    Ok(DMatrix::from_fn(n, 3, |i, c| u.values[i][c]))
}

fn check_clamped(u: &GridFunction, g: &GramSet, scale: f64) -> Result<()> {
    let last = u.values.len() - 1;
    let worst = u.values[last].iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    if worst > BC_TOL * scale {
        return Err(Error::Precondition(format!(
            "displacement at s={} is {worst:e}, clamped condition requires 0",
            g.grid.l
        )));
    }
    Ok(())
}

/// `b ∫ ⟨∂ss u1, ∂ss u2⟩ ds` summed over channels.
pub fn h2bc_inner(u1: &GridFunction, u2: &GridFunction, g: &GramSet) -> Result<f64> {
    let a = displacement_dofs(u1, g)?;
    let b = displacement_dofs(u2, g)?;
    check_clamped(u1, g, g.h2bc_dofs(&a, &a).max(0.0).sqrt())?;
    check_clamped(u2, g, g.h2bc_dofs(&b, &b).max(0.0).sqrt())?;
    Ok(g.h2bc_dofs(&a, &b))
}

pub fn h_inner(x1: &BeamState, x2: &BeamState, g: &GramSet) -> Result<f64> {
    let a = x1.dofs_checked(g)?;
    let b = x2.dofs_checked(g)?;
    Ok(g.h_inner_dofs(&a, &b))
}

pub fn h_norm(x: &BeamState, g: &GramSet) -> Result<f64> {
    Ok(g.h_norm_dofs(&x.dofs_checked(g)?))
}

/// Allowance for the free-end check in [`d_norm_sq`]: the one-sided
/// differences are second order, so smooth conforming data show a residue of
/// order `(h/l)²`.
const FREE_END_ALLOWANCE: f64 = 10.0;

/// Largest scale-free free-end residue `l²|∂ss u(0)| + l³|∂sss u(0)|` over
/// the channels, relative to `max |u|`, from one-sided differences.
pub fn free_end_residue(u: &GridFunction) -> f64 {
    let g = u.grid();
    let (h, l) = (g.h, g.l);
    let x = u.values();
    let mut worst: f64 = 0.0;
    let mut size: f64 = 0.0;
    for c in 0..3 {
        let m = (2.0 * x[0][c] - 5.0 * x[1][c] + 4.0 * x[2][c] - x[3][c]) / (h * h);
        let q = (-5.0 * x[0][c] + 18.0 * x[1][c] - 24.0 * x[2][c] + 14.0 * x[3][c] - 3.0 * x[4][c])
            / (2.0 * h * h * h);
        worst = worst.max(l * l * m.abs() + l * l * l * q.abs());
        size = x.iter().fold(size, |a, v| a.max(v[c].abs()));
    }
    if size == 0.0 {
        0.0
    } else {
        worst / size
    }
}

pub fn d_norm_sq(x: &BeamState, g: &GramSet) -> Result<f64> {
    let dofs = x.dofs_checked(g)?;
    let res = free_end_residue(&x.u);
    let tol = BC_TOL + FREE_END_ALLOWANCE * (g.grid.h / g.grid.l).powi(2);
    if res > tol {
        return Err(Error::Precondition(format!(
            "free-end conditions at s=0 violated: residue {res:e} exceeds {tol:e}"
        )));
    }
    Ok(g.d_norm_sq_dofs(&dofs))
}
