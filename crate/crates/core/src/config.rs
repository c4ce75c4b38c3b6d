//! Flat `key=value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Keys are grouped by prefix
//! (`beam.`, `grid.`, `time.`, `noise.`, `init.`, `run.`, `picard.`); every key
//! except the five required ones has a default, and unknown keys are rejected.
//! [`SimulationConfig::serialize`] writes every key with its resolved value,
//! so a serialized config parses back to an identical struct.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::noise::Spectrum;
use crate::operators::{Modulation, Profile, TractiveForce};
use crate::propagator::Scheme;
use crate::space::{BcKind, BeamGrid};

/// Upper bound on the default noise truncation.
pub const DEFAULT_K_MAX: usize = 64;

/// Relative tolerance for "dt divides the window".
const DIVIDE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaSpec {
    Zero,
    Bump,
    /// Profile values on `m` equispaced knots spanning `[0, l]`.
    Tabulated(Vec<f64>),
}

/// Deterministic body force `f^det(s, t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ForceSpec {
    Zero,
    /// `g e3`, cancelling gravity.
    Gravity,
    /// `(g - ∂s λ) e3`, the static load of the shifted nonhomogeneous problem.
    Shift,
    /// `e3` component on equispaced knots spanning `[0, l]`, constant in time.
    Tabulated(Vec<f64>),
    /// One expression per channel in the variables `s`, `t`, `l`, `g`.
    Expr([String; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    U,
    V,
}

/// A sine mode `e_j` placed in one channel of one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeSpec {
    /// Mode index, from 1.
    pub mode: usize,
    /// Channel, from 1.
    pub channel: usize,
    pub component: Component,
}

impl std::str::FromStr for ModeSpec {
    type Err = Error;

    /// `mode:channel:u|v`, e.g. `1:3:u`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::invalid(format!("test-function spec `{s}` is not mode:channel:u|v"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mode: usize = parts[0].trim().parse().map_err(|_| bad())?;
        let channel: usize = parts[1].trim().parse().map_err(|_| bad())?;
        let component = match parts[2].trim() {
            "u" => Component::U,
            "v" => Component::V,
            _ => return Err(bad()),
        };
        if mode == 0 || !(1..=3).contains(&channel) {
            return Err(bad());
        }
        Ok(Self {
            mode,
            channel,
            component,
        })
    }
}

impl std::fmt::Display for ModeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = match self.component {
            Component::U => "u",
            Component::V => "v",
        };
        write!(f, "{}:{}:{}", self.mode, self.channel, c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Zero,
    /// Lowest-but-`mode` free vibration shape of the discrete beam, scaled to
    /// the given amplitude in displacement or velocity.
    Mode {
        mode: usize,
        channel: usize,
        component: Component,
        amplitude: f64,
    },
    /// `x = (s - l) e3`, zero velocity; the only nonhomogeneous initial datum.
    Shift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub l: f64,
    pub b: f64,
    pub g_const: f64,
    pub lambda: LambdaSpec,
    pub lambda_mod: Modulation,
    pub bc: BcKind,
    pub f_det: ForceSpec,
    pub n: usize,
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub sigma: f64,
    pub k: usize,
    pub spectrum: Spectrum,
    pub seed: u64,
    pub init: InitSpec,
    pub n_paths: usize,
    pub observables: Vec<ModeSpec>,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Weight of the Picard norm; `None` picks `2 C5 + 1`.
    pub picard_alpha: Option<f64>,
}

const KEYS: &[&str] = &[
    "beam.l",
    "beam.b",
    "beam.g",
    "beam.lambda",
    "beam.lambda_table",
    "beam.lambda_c0",
    "beam.lambda_amp",
    "beam.lambda_omega",
    "beam.bc",
    "beam.fdet",
    "beam.fdet_table",
    "beam.fdet_x",
    "beam.fdet_y",
    "beam.fdet_z",
    "grid.n",
    "time.t0",
    "time.T",
    "time.dt",
    "time.scheme",
    "noise.sigma",
    "noise.K",
    "noise.spectrum",
    "noise.q_table",
    "noise.seed",
    "init.kind",
    "init.mode",
    "init.channel",
    "init.component",
    "init.amplitude",
    "run.N",
    "run.observables",
    "picard.tol",
    "picard.max_iter",
    "picard.alpha",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn line(&self, key: &str) -> usize {
        self.map.get(key).map(|(l, _)| *l).unwrap_or(0)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::config(line, key, format!("expected {what}, got `{v}`"))),
        }
    }

    fn required<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.parse(key, what)?
            .ok_or_else(|| Error::config(0, key, "missing required key"))
    }

    fn or<T: std::str::FromStr>(&self, key: &str, what: &str, default: T) -> Result<T> {
        Ok(self.parse(key, what)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| {
                    Error::config(
                        line,
                        key,
                        format!("expected comma-separated reals, got `{v}`"),
                    )
                }),
        }
    }

    fn fail(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::config(self.line(key), key, msg)
    }
}

fn lex(text: &str) -> Result<Entries> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| Error::config(line, body, "expected key=value"))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::config(line, k, "unknown key"));
        }
        if map.insert(k.to_string(), (line, v.to_string())).is_some() {
            return Err(Error::config(line, k, "duplicate key"));
        }
    }
    Ok(Entries { map })
}

fn positive(e: &Entries, key: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(e.fail(key, format!("must be positive and finite, got {x}")))
    }
}

impl SimulationConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let e = lex(text)?;

        let l: f64 = e.required("beam.l", "a real")?;
        positive(&e, "beam.l", l)?;
        let b: f64 = e.required("beam.b", "a real")?;
        positive(&e, "beam.b", b)?;
        let g_const: f64 = e.or("beam.g", "a real", 9.81)?;
        if !g_const.is_finite() {
            return Err(e.fail("beam.g", "must be finite"));
        }

        let lambda = match e.or("beam.lambda", "a word", "bump".to_string())?.as_str() {
            "zero" => LambdaSpec::Zero,
            "bump" => LambdaSpec::Bump,
            "tabulated" => {
                LambdaSpec::Tabulated(e.list("beam.lambda_table")?.ok_or_else(|| {
                    e.fail("beam.lambda_table", "required when beam.lambda=tabulated")
                })?)
            }
            other => {
                return Err(e.fail(
                    "beam.lambda",
                    format!("expected zero|bump|tabulated, got `{other}`"),
                ))
            }
        };
        let lambda_mod = Modulation {
            c0: e.or("beam.lambda_c0", "a real", 1.0)?,
            amp: e.or("beam.lambda_amp", "a real", 0.0)?,
            omega: e.or("beam.lambda_omega", "a real", 0.0)?,
        };
        if !(lambda_mod.c0.is_finite()
            && lambda_mod.amp.is_finite()
            && lambda_mod.omega.is_finite())
        {
            return Err(e.fail("beam.lambda_c0", "modulation parameters must be finite"));
        }
        if lambda_mod.c0 < 0.0 {
            return Err(e.fail("beam.lambda_c0", "c0 must be non-negative"));
        }
        if lambda_mod.amp.abs() > 1.0 {
            return Err(e.fail(
                "beam.lambda_amp",
                "c(t) = c0 (1 + amp sin(omega t)) must stay non-negative: need |amp| <= 1",
            ));
        }

        let bc = match e
            .or("beam.bc", "a word", "homogeneous".to_string())?
            .as_str()
        {
            "homogeneous" => BcKind::Homogeneous,
            "nonhomogeneous" => BcKind::Nonhomogeneous,
            other => {
                return Err(e.fail(
                    "beam.bc",
                    format!("expected homogeneous|nonhomogeneous, got `{other}`"),
                ))
            }
        };

        let f_det = match e.or("beam.fdet", "a word", "zero".to_string())?.as_str() {
            "zero" => ForceSpec::Zero,
            "gravity" => ForceSpec::Gravity,
            "shift" => ForceSpec::Shift,
            "tabulated" => {
                ForceSpec::Tabulated(e.list("beam.fdet_table")?.ok_or_else(|| {
                    e.fail("beam.fdet_table", "required when beam.fdet=tabulated")
                })?)
            }
            "expr" => {
                let get = |k: &str| -> Result<String> {
                    let s = e
                        .raw(k)
                        .map(|(_, v)| v.to_string())
                        .unwrap_or_else(|| "0".into());
                    evalexpr::build_operator_tree::<evalexpr::DefaultNumericTypes>(&s)
                        .map_err(|err| e.fail(k, format!("bad expression: {err}")))?;
                    Ok(s)
                };
                ForceSpec::Expr([
                    get("beam.fdet_x")?,
                    get("beam.fdet_y")?,
                    get("beam.fdet_z")?,
                ])
            }
            other => {
                return Err(e.fail(
                    "beam.fdet",
                    format!("expected zero|gravity|shift|tabulated|expr, got `{other}`"),
                ))
            }
        };
        if let ForceSpec::Tabulated(v) = &f_det {
            if v.len() < 2 || v.iter().any(|x| !x.is_finite()) {
                return Err(e.fail("beam.fdet_table", "need at least two finite values"));
            }
        }

        let n: usize = e.required("grid.n", "a node count")?;
        BeamGrid::new(l, n).map_err(|err| e.fail("grid.n", err.to_string()))?;

        let t0: f64 = e.or("time.t0", "a real", 0.0)?;
        let t_end: f64 = e.required("time.T", "a real")?;
        if !(t0.is_finite() && t_end.is_finite() && t_end > t0) {
            return Err(e.fail("time.T", format!("need T > t0, got T={t_end}, t0={t0}")));
        }
        let dt: f64 = e.required("time.dt", "a real")?;
        positive(&e, "time.dt", dt)?;
        let steps = (t_end - t0) / dt;
        if (steps - steps.round()).abs() > DIVIDE_TOL * steps.max(1.0) || steps.round() < 1.0 {
            return Err(e.fail("time.dt", format!("dt must divide T - t0 (ratio {steps})")));
        }
        let scheme: Scheme = match e.raw("time.scheme") {
            None => Scheme::CayleyMidpoint,
            Some((line, v)) => v
                .parse()
                .map_err(|err: Error| Error::config(line, "time.scheme", err.to_string()))?,
        };

        let sigma: f64 = e.or("noise.sigma", "a real", 1.0)?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(e.fail("noise.sigma", "must be non-negative"));
        }
        let k: usize = e.or("noise.K", "a mode count", DEFAULT_K_MAX.min(n))?;
        if k == 0 || k > n {
            return Err(e.fail(
                "noise.K",
                format!("need 1 <= K <= n = {n} (sine modes representable on the grid)"),
            ));
        }
        let spectrum = match e
            .or("noise.spectrum", "a word", "k^-2".to_string())?
            .as_str()
        {
            "tabulated" => Spectrum::Table(e.list("noise.q_table")?.ok_or_else(|| {
                e.fail("noise.q_table", "required when noise.spectrum=tabulated")
            })?),
            s => match s.strip_prefix("k^-").and_then(|p| p.parse::<f64>().ok()) {
                Some(p) if p > 1.0 => Spectrum::PowerLaw(p),
                _ => {
                    return Err(e.fail(
                        "noise.spectrum",
                        format!("expected k^-p with p > 1 or tabulated, got `{s}`"),
                    ))
                }
            },
        };
        if let Spectrum::Table(q) = &spectrum {
            if q.len() < k {
                return Err(e.fail("noise.q_table", format!("needs at least K = {k} entries")));
            }
            if q.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || q.windows(2).any(|w| w[1] > w[0])
            {
                return Err(e.fail(
                    "noise.q_table",
                    "entries must be non-negative, non-increasing",
                ));
            }
        }
        let seed: u64 = e.or("noise.seed", "an unsigned integer", 0)?;

        let default_init = match bc {
            BcKind::Homogeneous => "zero",
            BcKind::Nonhomogeneous => "shift",
        };
        let init = match e
            .or("init.kind", "a word", default_init.to_string())?
            .as_str()
        {
            "zero" => InitSpec::Zero,
            "shift" => InitSpec::Shift,
            "mode" => {
                let mode: usize = e.or("init.mode", "a mode index", 1)?;
                if mode == 0 || mode > n + 1 {
                    return Err(e.fail("init.mode", format!("need 1 <= mode <= {}", n + 1)));
                }
                let channel: usize = e.or("init.channel", "a channel", 3)?;
                if !(1..=3).contains(&channel) {
                    return Err(e.fail("init.channel", "channel must be 1, 2 or 3"));
                }
                let component = match e.or("init.component", "u|v", "u".to_string())?.as_str() {
                    "u" => Component::U,
                    "v" => Component::V,
                    other => {
                        return Err(e.fail("init.component", format!("expected u|v, got `{other}`")))
                    }
                };
                let amplitude: f64 = e.or("init.amplitude", "a real", 1.0)?;
                if !amplitude.is_finite() {
                    return Err(e.fail("init.amplitude", "must be finite"));
                }
                InitSpec::Mode {
                    mode,
                    channel,
                    component,
                    amplitude,
                }
            }
            other => {
                return Err(e.fail(
                    "init.kind",
                    format!("expected zero|mode|shift, got `{other}`"),
                ))
            }
        };
        match (bc, &init) {
            (BcKind::Homogeneous, InitSpec::Shift) => {
                return Err(e.fail(
                    "init.kind",
                    "shift initial data requires beam.bc=nonhomogeneous",
                ))
            }
            (BcKind::Nonhomogeneous, InitSpec::Zero | InitSpec::Mode { .. }) => {
                return Err(e.fail(
                    "init.kind",
                    "nonhomogeneous problems support only the shift initial datum",
                ))
            }
            _ => {}
        }

        let n_paths: usize = e.or("run.N", "a path count", 1)?;
        if n_paths == 0 {
            return Err(e.fail("run.N", "need at least one path"));
        }
        let observables = match e.raw("run.observables") {
            None => vec!["1:3:u".parse()?],
            Some((line, v)) => v
                .split(',')
                .map(|s| s.parse::<ModeSpec>())
                .collect::<Result<Vec<_>>>()
                .map_err(|err| Error::config(line, "run.observables", err.to_string()))?,
        };
        if let Some(o) = observables.iter().find(|o| o.mode > n) {
            return Err(e.fail(
                "run.observables",
                format!("mode {} exceeds n = {n}", o.mode),
            ));
        }

        let picard_tol: f64 = e.or("picard.tol", "a real", 1e-10)?;
        positive(&e, "picard.tol", picard_tol)?;
        let picard_max_iter: usize = e.or("picard.max_iter", "an iteration count", 200)?;
        let picard_alpha: Option<f64> = e.parse("picard.alpha", "a real")?;
        if let Some(a) = picard_alpha {
            positive(&e, "picard.alpha", a)?;
        }

        let cfg = Self {
            l,
            b,
            g_const,
            lambda,
            lambda_mod,
            bc,
            f_det,
            n,
            t0,
            t_end,
            dt,
            scheme,
            sigma,
            k,
            spectrum,
            seed,
            init,
            n_paths,
            observables,
            picard_tol,
            picard_max_iter,
            picard_alpha,
        };
        cfg.tractive_force()
            .map_err(|err| e.fail("beam.lambda", err.to_string()))?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<BeamGrid> {
        BeamGrid::new(self.l, self.n)
    }

    pub fn steps(&self) -> usize {
        ((self.t_end - self.t0) / self.dt).round() as usize
    }

    pub fn tractive_force(&self) -> Result<TractiveForce> {
        let profile = match &self.lambda {
            LambdaSpec::Zero => Profile::Zero,
            LambdaSpec::Bump => Profile::Bump,
            LambdaSpec::Tabulated(v) => Profile::Tabulated(v.clone()),
        };
        TractiveForce::new(profile, self.lambda_mod, self.l, self.t0, self.t_end)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        put("beam.l", format!("{:?}", self.l));
        put("beam.b", format!("{:?}", self.b));
        put("beam.g", format!("{:?}", self.g_const));
        match &self.lambda {
            LambdaSpec::Zero => put("beam.lambda", "zero".into()),
            LambdaSpec::Bump => put("beam.lambda", "bump".into()),
            LambdaSpec::Tabulated(v) => {
                put("beam.lambda", "tabulated".into());
                put("beam.lambda_table", list(v));
            }
        }
        put("beam.lambda_c0", format!("{:?}", self.lambda_mod.c0));
        put("beam.lambda_amp", format!("{:?}", self.lambda_mod.amp));
        put("beam.lambda_omega", format!("{:?}", self.lambda_mod.omega));
        put(
            "beam.bc",
            match self.bc {
                BcKind::Homogeneous => "homogeneous",
                BcKind::Nonhomogeneous => "nonhomogeneous",
            }
            .into(),
        );
        match &self.f_det {
            ForceSpec::Zero => put("beam.fdet", "zero".into()),
            ForceSpec::Gravity => put("beam.fdet", "gravity".into()),
            ForceSpec::Shift => put("beam.fdet", "shift".into()),
            ForceSpec::Tabulated(v) => {
                put("beam.fdet", "tabulated".into());
                put("beam.fdet_table", list(v));
            }
            ForceSpec::Expr([x, y, z]) => {
                put("beam.fdet", "expr".into());
                put("beam.fdet_x", x.clone());
                put("beam.fdet_y", y.clone());
                put("beam.fdet_z", z.clone());
            }
        }
        put("grid.n", self.n.to_string());
        put("time.t0", format!("{:?}", self.t0));
        put("time.T", format!("{:?}", self.t_end));
        put("time.dt", format!("{:?}", self.dt));
        put("time.scheme", self.scheme.to_string());
        put("noise.sigma", format!("{:?}", self.sigma));
        put("noise.K", self.k.to_string());
        match &self.spectrum {
            Spectrum::PowerLaw(p) => put("noise.spectrum", format!("k^-{p:?}")),
            Spectrum::Table(q) => {
                put("noise.spectrum", "tabulated".into());
                put("noise.q_table", list(q));
            }
        }
        put("noise.seed", self.seed.to_string());
        match &self.init {
            InitSpec::Zero => put("init.kind", "zero".into()),
            InitSpec::Shift => put("init.kind", "shift".into()),
            InitSpec::Mode {
                mode,
                channel,
                component,
                amplitude,
            } => {
                put("init.kind", "mode".into());
                put("init.mode", mode.to_string());
                put("init.channel", channel.to_string());
                put(
                    "init.component",
                    match component {
                        Component::U => "u",
                        Component::V => "v",
                    }
                    .into(),
                );
                put("init.amplitude", format!("{amplitude:?}"));
            }
        }
        put("run.N", self.n_paths.to_string());
        put(
            "run.observables",
            self.observables
                .iter()
                .map(|o| o.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("picard.tol", format!("{:?}", self.picard_tol));
        put("picard.max_iter", self.picard_max_iter.to_string());
        if let Some(a) = self.picard_alpha {
            put("picard.alpha", format!("{a:?}"));
        }
        s
    }
}
