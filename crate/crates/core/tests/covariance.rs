//! Itô-isometry quadrature against a closed form for the untensioned beam,
//! and the covariance command end to end.

use std::fs;

use fibersim::cli::cmd_covariance;
use fibersim::config::{ModeSpec, SimulationConfig};
use fibersim::noise::ito_variance_curve;
use fibersim::solver::{observable_dofs, Simulator};

fn cfg(extra: &str) -> SimulationConfig {
    SimulationConfig::parse(&format!(
        "beam.l=1\nbeam.b=1\ngrid.n=12\ntime.T=0.1\ntime.dt=0.001\nbeam.lambda=zero\n{extra}"
    ))
    .unwrap()
}

/// With λ = 0 each Cayley step rotates the modal pair `(a_j, b_j)` of
/// `(φ_j/ω_j, 0)` and `(0, φ_j)` by `θ_j = 2 atan(ω_j dt / 2)`. The velocity
/// kick `σ √q_k e_k` enters as `b_j = σ √q_k φ_jᵀ M e_k`, so after `p` steps
/// its pairing with `(ψ, 0)` is `Σ_j (φ_jᵀ B ψ / ω_j) b_j sin(p θ_j)` and with
/// `(0, ψ)` it is `Σ_j (φ_jᵀ M ψ) b_j cos(p θ_j)`.
fn closed_form(sim: &Simulator, spec: &ModeSpec) -> Vec<f64> {
    let g = sim.gram();
    let model = sim.noise();
    let cfg = sim.config();
    let n = g.dof_count();
    let (omega, phi) = g.modes();
    let h = observable_dofs(&g.grid, spec);
    let ch = spec.channel - 1;
    let psi_u = h.view((0, ch), (n, 1)).into_owned();
    let psi_v = h.view((n, ch), (n, 1)).into_owned();
    let basis = model.basis();
    let steps = cfg.steps();
    let dt = cfg.dt;
    let theta: Vec<f64> = omega.iter().map(|w| 2.0 * (w * dt / 2.0).atan()).collect();
    let weight: Vec<f64> = (0..n)
        .map(|j| {
            let f = phi.column(j);
            match spec.component {
                fibersim::config::Component::U => {
                    (f.transpose() * &g.bmat * &psi_u)[(0, 0)] / omega[j]
                }
                fibersim::config::Component::V => {
                    (0..n).map(|i| f[i] * g.m[i] * psi_v[(i, 0)]).sum()
                }
            }
        })
        .collect();
    let kick: Vec<Vec<f64>> = (0..model.k())
        .map(|k| {
            (0..n)
                .map(|j| {
                    model.sigma
                        * (0..n)
                            .map(|i| phi[(i, j)] * g.m[i] * basis[(i, k)])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let term = |p: usize| -> f64 {
        (0..model.k())
            .map(|k| {
                let s: f64 = (0..n)
                    .map(|j| {
                        let r = p as f64 * theta[j];
                        let rot = match spec.component {
                            fibersim::config::Component::U => r.sin(),
                            fibersim::config::Component::V => r.cos(),
                        };
                        weight[j] * kick[k][j] * rot
                    })
                    .sum();
                model.q[k] * s * s
            })
            .sum()
    };
    let terms: Vec<f64> = (0..steps).map(term).collect();
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for m in 1..=steps {
        // increments j = 0..m-1 are propagated over m-1-j steps
        acc += terms[m - 1];
        out.push(dt * acc);
    }
    out
}

#[test]
fn quadrature_matches_modal_closed_form() {
    for (extra, spec) in [
        ("noise.sigma=0.7", "1:3:u"),
        ("noise.sigma=0.7", "2:1:v"),
        ("noise.sigma=1.3\nnoise.spectrum=k^-1.5", "3:2:u"),
    ] {
        let c = cfg(extra);
        let spec: ModeSpec = spec.parse().unwrap();
        let sim = Simulator::new(&c).unwrap();
        let h = observable_dofs(&sim.gram().grid, &spec);
        let quad = ito_variance_curve(sim.propagator(), sim.noise(), &h, 0.0, c.t_end).unwrap();
        let exact = closed_form(&sim, &spec);
        let scale = exact.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(scale > 0.0);
        for (a, b) in quad.iter().zip(&exact) {
            assert!((a - b).abs() <= 1e-8 * scale.max(1.0), "{spec}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_noise_gives_zero_columns() {
    let c = cfg("noise.sigma=0\nrun.N=3");
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_covariance(&c, &"1:3:u".parse().unwrap(), dir.path()).unwrap();
    assert_eq!(m.checks[0].status, fibersim::cli::CheckStatus::Skipped);
    let text = fs::read_to_string(dir.path().join("covariance.csv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(&cols[1..], &[0.0, 0.0, 0.0]);
        rows += 1;
    }
    assert_eq!(rows, c.steps() + 1);
}

#[test]
fn monte_carlo_tracks_quadrature() {
    let c = cfg(
        "noise.sigma=1\nrun.N=4000\nbeam.lambda_c0=1\nbeam.lambda_amp=0.5\nbeam.lambda_omega=10",
    );
    let dir = tempfile::tempdir().unwrap();
    let m = cmd_covariance(&c, &"1:3:v".parse().unwrap(), dir.path()).unwrap();
    let check = &m.checks[0];
    assert!(check.measured.unwrap() >= 0.9, "{check:?}");
}

#[test]
fn invalid_test_function_is_rejected() {
    let c = cfg("run.N=2");
    let dir = tempfile::tempdir().unwrap();
    assert!(cmd_covariance(&c, &"13:1:u".parse().unwrap(), dir.path()).is_err());
    assert!("0:1:u".parse::<ModeSpec>().is_err());
    assert!("1:4:u".parse::<ModeSpec>().is_err());
    assert!("1:1:w".parse::<ModeSpec>().is_err());
}
