//! Rate dynamics of one column in the diffusion approximation.
//!
//! Each population relaxes toward its stationary transfer function,
//! `dnu/dt = (phi(mu, sigma^2) - nu) / tau`, and excitatory populations
//! carry a fatigue variable `dc/dt = -c / tau_c + alpha_c nu`. The
//! transfer function is the first-passage-time rate of a LIF neuron driven
//! by white noise; fatigue enters as a subtractive drift.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::Matrix5;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ColumnSizes, NeuronParams, PopulationKind, StatePreset};
use crate::connectivity::INDEGREE_FRACTION;

/// Scaled complementary error function `exp(x^2) erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        if x < -26.7 {
            return f64::INFINITY;
        }
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < 4.0 {
        return (x * x).exp() * libm::erfc(x);
    }
    // Continued fraction, evaluated bottom-up.
    let mut f = x;
    for k in (1..=60).rev() {
        f = x + (k as f64 / 2.0) / f;
    }
    1.0 / (PI.sqrt() * f)
}

fn quad_piecewise(a: f64, b: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
    let mut total = 0.0;
    let mut lo = a;
    while lo < b {
        let width = if lo < 2.0 { 1.0 } else { 0.25 };
        let hi = (lo + width).min(b);
        let floor = f(lo).min(f(hi)).max(f64::MIN_POSITIVE);
        let out = quadrature::double_exponential::integrate(&f, lo, hi, 1e-11 * (hi - lo) * floor);
        if !out.integral.is_finite() || out.error_estimate > 1e-8 * out.integral.abs().max(f64::MIN_POSITIVE) {
            return Err(Error::Numerical(format!(
                "quadrature on [{lo}, {hi}] did not converge: integral {} error {} after {} evaluations",
                out.integral, out.error_estimate, out.num_function_evaluations
            )));
        }
        total += out.integral;
        lo = hi;
    }
    Ok(total)
}

/// Stationary rate (Hz) of a LIF neuron receiving input of mean drift `mu`
/// (mV/ms) and diffusion `sigma2` (mV^2/ms). `mu` already includes any
/// fatigue current. With `sigma2 = 0` the deterministic rate is returned.
pub fn gain_phi(mu: f64, sigma2: f64, p: &NeuronParams) -> Result<f64> {
    if !(sigma2 >= 0.0) || !mu.is_finite() {
        return Err(Error::Numerical(format!("invalid input moments mu={mu} sigma2={sigma2}")));
    }
    let tau = p.tau_m;
    let v_inf = p.e_rest + mu * tau;
    if sigma2 == 0.0 {
        if v_inf <= p.v_theta {
            return Ok(0.0);
        }
        return Ok(1000.0 / (p.tau_arp + tau * ((v_inf - p.v_reset) / (v_inf - p.v_theta)).ln()));
    }
    let s = (sigma2 * tau).sqrt();
    let x_theta = (p.v_theta - v_inf) / s;
    let x_reset = (p.v_reset - v_inf) / s;
    if x_theta > 26.0 {
        return Ok(0.0);
    }
    let integral = quad_piecewise(x_reset, x_theta, |u| erfcx(-u))?;
    Ok(1000.0 / (p.tau_arp + tau * PI.sqrt() * integral))
}

/// Mean-field model of one column.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanFieldSystem {
    pub preset: StatePreset,
    /// Synapses each neuron receives from population s: `0.9 K_s`.
    pub in_degree: [f64; 3],
    pub tau_e: f64,
    pub tau_i: f64,
}

/// State vector: rates of F, B, I (Hz) then fatigue of F and B.
pub type MfState = [f64; 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stability {
    Stable,
    Unstable,
    Saddle,
}

impl Stability {
    pub fn as_str(self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::Saddle => "saddle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub state: MfState,
    pub stability: Stability,
    /// Jacobian eigenvalues as (real, imaginary) in 1/ms.
    pub eigenvalues: Vec<(f64, f64)>,
    /// Largest |rhs| component at the point, in rate units per tau.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullclineSample {
    pub c: f64,
    /// F rates (Hz) where the rate equation is stationary, ascending.
    pub nu: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t_ms: Vec<f64>,
    pub states: Vec<MfState>,
}

fn brent(mut f: impl FnMut(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Numerical(format!("root not bracketed in [{a}, {b}]")));
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol1 || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q) = if a == c {
                (2.0 * m * s, 1.0 - s)
            } else {
                let q = fa / fc;
                let r = fb / fc;
                (s * (2.0 * m * q * (q - r) - (b - a) * (r - 1.0)), (q - 1.0) * (r - 1.0) * (s - 1.0))
            };
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(m) };
        fb = f(b)?;
    }
    Ok(b)
}

/// Scan points for rate roots: 0 and a geometric ladder up to `max`.
fn rate_ladder(max: f64) -> Vec<f64> {
    let mut v = vec![0.0];
    let mut x = 0.01;
    while x < max {
        v.push(x);
        x *= 1.15;
    }
    v.push(max);
    v
}

impl MeanFieldSystem {
    pub fn new(preset: StatePreset, sizes: ColumnSizes) -> Self {
        let in_degree = PopulationKind::ALL.map(|k| INDEGREE_FRACTION * f64::from(sizes.of(k)));
        MeanFieldSystem { preset, in_degree, tau_e: 20.0, tau_i: 10.0 }
    }

    fn tau(&self, t: PopulationKind) -> f64 {
        if t.is_excitatory() {
            self.tau_e
        } else {
            self.tau_i
        }
    }

    /// Mean drift (mV/ms) and diffusion (mV^2/ms) of the input to population
    /// `t` given rates in Hz and its fatigue `c_t`.
    pub fn input_moments(&self, nu: [f64; 3], c_t: f64, t: PopulationKind) -> Result<(f64, f64)> {
        if let Some(bad) = nu.iter().find(|&&x| !(x >= 0.0)) {
            return Err(Error::Numerical(format!("negative or undefined rate {bad} Hz")));
        }
        let syn = &self.preset.synaptic;
        let (mut mu, mut s2) = (0.0, 0.0);
        for s in PopulationKind::ALL {
            let j = syn.effective_j(t, s);
            let dj = syn.delta_j(t, s);
            let r = self.in_degree[s.index()] * nu[s.index()] / 1000.0;
            mu += r * j;
            s2 += r * (j * j + dj * dj);
        }
        let ext = syn.external(t);
        let r_ext = f64::from(ext.n_ext) * ext.nu_ext_hz / 1000.0;
        let dj = syn.delta_j_ext(t);
        mu += r_ext * ext.j_ext;
        s2 += r_ext * (ext.j_ext * ext.j_ext + dj * dj);
        mu -= self.preset.neuron(t).adaptation_drift() * c_t;
        Ok((mu, s2))
    }

    pub fn phi(&self, nu: [f64; 3], c_t: f64, t: PopulationKind) -> Result<f64> {
        let (mu, s2) = self.input_moments(nu, c_t, t)?;
        gain_phi(mu, s2, self.preset.neuron(t))
    }

    fn fatigue_nullcline(&self, t: PopulationKind, nu: f64) -> f64 {
        self.preset.neuron(t).adaptation.map_or(0.0, |a| a.alpha_c * a.tau_c * nu / 1000.0)
    }

    /// Right-hand side of the rate and fatigue equations (per ms).
    pub fn rhs(&self, x: &MfState) -> Result<MfState> {
        let nu = [x[0].max(0.0), x[1].max(0.0), x[2].max(0.0)];
        let c = [x[3], x[4], 0.0];
        let mut out = [0.0; 5];
        for t in PopulationKind::ALL {
            let i = t.index();
            let phi = self.phi(nu, c[i], t)?;
            out[i] = (phi - x[i]) / self.tau(t);
        }
        for (k, t) in [PopulationKind::F, PopulationKind::B].into_iter().enumerate() {
            if let Some(a) = self.preset.neuron(t).adaptation {
                out[3 + k] = -x[3 + k] / a.tau_c + a.alpha_c * x[k] / 1000.0;
            }
        }
        Ok(out)
    }

    fn max_rate(&self, t: PopulationKind) -> f64 {
        let arp = self.preset.neuron(t).tau_arp;
        if arp > 0.0 {
            1000.0 / arp
        } else {
            2000.0
        }
    }

    /// I rate at self-consistency given the F and B rates.
    fn slaved_i(&self, nu_f: f64, nu_b: f64) -> Result<f64> {
        let g = |x: f64| Ok(self.phi([nu_f, nu_b, x], 0.0, PopulationKind::I)? - x);
        let hi = self.max_rate(PopulationKind::I);
        if g(0.0)? <= 0.0 {
            return Ok(0.0);
        }
        brent(g, 0.0, hi, 1e-10)
    }

    /// Lowest stable B rate (with I slaved and B fatigue on its nullcline).
    fn slaved_b(&self, nu_f: f64) -> Result<(f64, f64)> {
        let h = |x: f64| -> Result<f64> {
            let nu_i = self.slaved_i(nu_f, x)?;
            let c_b = self.fatigue_nullcline(PopulationKind::B, x);
            Ok(self.phi([nu_f, x, nu_i], c_b, PopulationKind::B)? - x)
        };
        let ladder = rate_ladder(self.max_rate(PopulationKind::B));
        let mut prev = (ladder[0], h(ladder[0])?);
        if prev.1 <= 0.0 {
            return Ok((0.0, self.slaved_i(nu_f, 0.0)?));
        }
        for &x in &ladder[1..] {
            let hx = h(x)?;
            if hx < 0.0 {
                let root = brent(h, prev.0, x, 1e-10)?;
                return Ok((root, self.slaved_i(nu_f, root)?));
            }
            prev = (x, hx);
        }
        Err(Error::Numerical(format!("no B rate found for nu_F={nu_f}")))
    }

    /// Full state with B and I slaved to a given F rate and F fatigue.
    pub fn slaved_state(&self, nu_f: f64, c_f: f64) -> Result<MfState> {
        let (nu_b, nu_i) = self.slaved_b(nu_f)?;
        Ok([nu_f, nu_b, nu_i, c_f, self.fatigue_nullcline(PopulationKind::B, nu_b)])
    }

    /// `phi_F - nu_F` in the reduced (nu_F, c_F) plane.
    pub fn reduced_residual(&self, nu_f: f64, c_f: f64) -> Result<f64> {
        let x = self.slaved_state(nu_f, c_f)?;
        Ok(self.phi([x[0], x[1], x[2]], c_f, PopulationKind::F)? - nu_f)
    }

    /// Fatigue nullcline of F: `c = alpha_c tau_c nu / 1000`.
    pub fn c_nullcline(&self, nu: f64) -> f64 {
        self.fatigue_nullcline(PopulationKind::F, nu)
    }

    /// Rate nullcline of F sampled over `c_values`: every root of
    /// `phi_F(nu, c) = nu` found on a rate ladder.
    pub fn nullclines(&self, c_values: &[f64]) -> Result<Vec<NullclineSample>> {
        let ladder = rate_ladder(self.max_rate(PopulationKind::F));
        let mut out = Vec::with_capacity(c_values.len());
        for &c in c_values {
            let mut roots = Vec::new();
            let mut prev = (ladder[0], self.reduced_residual(ladder[0], c)?);
            if prev.1 == 0.0 {
                roots.push(0.0);
            }
            for &x in &ladder[1..] {
                let r = self.reduced_residual(x, c)?;
                if r == 0.0 {
                    roots.push(x);
                } else if prev.1 != 0.0 && r.signum() != prev.1.signum() {
                    roots.push(brent(|v| self.reduced_residual(v, c), prev.0, x, 1e-9)?);
                }
                prev = (x, r);
            }
            out.push(NullclineSample { c, nu: roots });
        }
        Ok(out)
    }

    /// Jacobian of `rhs` by central differences with step 1e-4.
    pub fn jacobian(&self, x: &MfState) -> Result<Matrix5<f64>> {
        let h = 1e-4;
        let mut j = Matrix5::zeros();
        for k in 0..5 {
            let mut up = *x;
            let mut down = *x;
            up[k] += h;
            down[k] -= h;
            let fu = self.rhs(&up)?;
            let fd = self.rhs(&down)?;
            for i in 0..5 {
                j[(i, k)] = (fu[i] - fd[i]) / (2.0 * h);
            }
        }
        Ok(j)
    }

    pub fn classify(&self, x: &MfState) -> Result<FixedPoint> {
        let jac = self.jacobian(x)?;
        let eig: Vec<(f64, f64)> = jac.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
        // Neutral directions (frozen fatigue) do not decide stability.
        let decisive: Vec<f64> = eig.iter().map(|e| e.0).filter(|re| re.abs() > 1e-9).collect();
        let stability = if decisive.iter().all(|&re| re < 0.0) {
            Stability::Stable
        } else if decisive.iter().all(|&re| re > 0.0) {
            Stability::Unstable
        } else {
            Stability::Saddle
        };
        let f = self.rhs(x)?;
        let scale = [self.tau_e, self.tau_e, self.tau_i, 1.0, 1.0];
        let residual = f.iter().zip(scale).map(|(v, s)| (v * s).abs()).fold(0.0, f64::max);
        Ok(FixedPoint { state: *x, stability, eigenvalues: eig, residual })
    }

    /// Intersections of the F rate nullcline with the fatigue nullcline,
    /// refined by Brent's method and classified by the full Jacobian.
    pub fn fixed_points(&self) -> Result<Vec<FixedPoint>> {
        let r = |nu: f64| self.reduced_residual(nu, self.c_nullcline(nu));
        let ladder = rate_ladder(self.max_rate(PopulationKind::F));
        let mut roots = Vec::new();
        let mut prev = (ladder[0], r(ladder[0])?);
        if prev.1 == 0.0 {
            roots.push(0.0);
        }
        for &x in &ladder[1..] {
            let v = r(x)?;
            if v == 0.0 {
                roots.push(x);
            } else if prev.1 != 0.0 && v.signum() != prev.1.signum() {
                roots.push(brent(r, prev.0, x, 1e-11)?);
            }
            prev = (x, v);
        }
        roots
            .into_iter()
            .map(|nu| {
                let x = self.slaved_state(nu, self.c_nullcline(nu))?;
                self.classify(&x)
            })
            .collect()
    }

    /// Fourth-order Runge-Kutta integration; rates and fatigue clamped at 0.
    /// Every `record_every`-th state is kept.
    pub fn integrate(&self, init: MfState, duration_ms: f64, dt: f64, record_every: usize) -> Result<Trajectory> {
        let limit = self.tau_e.min(self.tau_i) / 10.0;
        if !(dt > 0.0 && dt <= limit) {
            return Err(Error::Config(format!("mean-field step {dt} ms must be in (0, {limit}] ms")));
        }
        let steps = (duration_ms / dt).round() as usize;
        let every = record_every.max(1);
        let mut traj = Trajectory { t_ms: vec![0.0], states: vec![init] };
        let mut x = init;
        let add = |a: &MfState, b: &MfState, h: f64| {
            let mut o = *a;
            for i in 0..5 {
                o[i] += h * b[i];
            }
            o
        };
        for n in 1..=steps {
            let k1 = self.rhs(&x)?;
            let k2 = self.rhs(&add(&x, &k1, dt / 2.0))?;
            let k3 = self.rhs(&add(&x, &k2, dt / 2.0))?;
            let k4 = self.rhs(&add(&x, &k3, dt))?;
            for i in 0..5 {
                x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                x[i] = x[i].max(0.0);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite mean-field state at t={} ms: {x:?}", n as f64 * dt)));
            }
            if n % every == 0 {
                traj.t_ms.push(n as f64 * dt);
                traj.states.push(x);
            }
        }
        Ok(traj)
    }
}

pub fn nullclines_csv(samples: &[NullclineSample], sys: &MeanFieldSystem) -> String {
    let mut s = String::from("curve,c,nu_hz\n");
    for n in samples {
        for nu in &n.nu {
            let _ = writeln!(s, "rate,{},{}", n.c, nu);
        }
    }
    for n in samples {
        let nu = n.c * 1000.0 / sys.c_nullcline(1000.0).max(f64::MIN_POSITIVE);
        let _ = writeln!(s, "fatigue,{},{}", n.c, nu);
    }
    s
}

pub fn fixed_points_csv(points: &[FixedPoint]) -> String {
    let mut s = String::from("nu_f,nu_b,nu_i,c_f,c_b,stability,max_real_eigenvalue,residual\n");
    for p in points {
        let x = p.state;
        let lead = p.eigenvalues.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            x[0], x[1], x[2], x[3], x[4], p.stability.as_str(), lead, p.residual
        );
    }
    s
}

pub fn trajectory_csv(t: &Trajectory) -> String {
    let mut s = String::from("t_ms,nu_f,nu_b,nu_i,c_f,c_b\n");
    for (time, x) in t.t_ms.iter().zip(&t.states) {
        let _ = writeln!(s, "{time},{},{},{},{},{}", x[0], x[1], x[2], x[3], x[4]);
    }
    s
}
