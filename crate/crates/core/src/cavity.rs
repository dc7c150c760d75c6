//! Lid-driven cavity in stream function/vorticity form and its
//! time-segmented Galerkin reduced model.
//!
//! Grid fields are stored row by row over all `nx × ny` nodes (`j·nx + i`,
//! `x = i·h_x`, `y = j·h_y`), the lid being the row `j = ny − 1`. The
//! dynamic state is the interior vorticity, stored over the
//! `(nx−2) × (ny−2)` interior nodes in the same order. The stream function
//! follows from a Poisson solve and the wall vorticity from Thom's formula,
//! so both are functions of the interior vorticity.
//!
//! Time stepping: Crank–Nicolson for the interior Dirichlet Laplacian,
//! second-order Adams–Bashforth (forward Euler on the first step) for the
//! advection term and the wall contribution to the diffusion term.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::basis::{information_matrix, ReducedBasis, TimeSegments, TrajectoryEnsemble, Provenance};
use crate::error::{Error, Result};
use crate::numerics::{norm2, svd_with, DenseMatrix, LuFactor, NumericsConfig};
use crate::sampling::{weights_about, ParameterDomain, ParameterPoint, WeightingKernel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavityProblem {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub re: f64,
    pub dt: f64,
    pub lid_speed: f64,
}

impl CavityProblem {
    /// Unit-width cavity of height `ly` with a unit lid speed.
    pub fn new(nx: usize, ny: usize, ly: f64, re: f64, dt: f64) -> Result<Self> {
        let p = CavityProblem {
            nx,
            ny,
            lx: 1.0,
            ly,
            re,
            dt,
            lid_speed: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    /// Problem at parameter `(Re, L_y)`.
    pub fn at(&self, mu: &ParameterPoint) -> Result<Self> {
        if mu.dim() != 2 {
            return Err(Error::invalid("cavity parameter must be (Re, L_y)"));
        }
        let p = CavityProblem {
            re: mu.0[0],
            ly: mu.0[1],
            ..self.clone()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 3 || self.ny < 3 {
            return Err(Error::invalid("cavity grid needs at least 3×3 nodes"));
        }
        for (name, v) in [("lx", self.lx), ("ly", self.ly), ("re", self.re), ("dt", self.dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite")));
            }
        }
        if !self.lid_speed.is_finite() {
            return Err(Error::invalid("lid speed must be finite"));
        }
        Ok(())
    }

    pub fn param(&self) -> ParameterPoint {
        ParameterPoint(vec![self.re, self.ly])
    }

    pub fn hx(&self) -> f64 {
        self.lx / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / (self.ny - 1) as f64
    }

    pub fn nix(&self) -> usize {
        self.nx - 2
    }

    pub fn niy(&self) -> usize {
        self.ny - 2
    }

    /// Number of interior nodes (the reduced-model state length).
    pub fn n_interior(&self) -> usize {
        self.nix() * self.niy()
    }

    pub fn n_grid(&self) -> usize {
        self.nx * self.ny
    }

    /// Interior values of a grid field.
    pub fn interior(&self, field: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_interior());
        for j in 1..self.ny - 1 {
            out.extend_from_slice(&field[j * self.nx + 1..j * self.nx + self.nx - 1]);
        }
        out
    }

    /// Grid field with the given interior values and zero walls.
    pub fn embed(&self, interior: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_grid()];
        let nix = self.nix();
        for j in 1..self.ny - 1 {
            out[j * self.nx + 1..j * self.nx + self.nx - 1]
                .copy_from_slice(&interior[(j - 1) * nix..j * nix]);
        }
        out
    }
}

/// Stream function and vorticity on the full grid at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CavityState {
    pub psi: Vec<f64>,
    pub omega: Vec<f64>,
    pub t: f64,
}

impl CavityState {
    /// Consistent state from interior vorticity: Poisson solve for `ψ`,
    /// Thom's formula on the walls.
    pub fn from_interior(p: &CavityProblem, omega_int: &[f64], t: f64) -> Self {
        let mut sine = SineSolver::new(p);
        let psi_int = sine.poisson(omega_int);
        let wall = thom_interior(p, &psi_int, p.lid_speed);
        let mut omega = p.embed(omega_int);
        wall.write_into(p, &mut omega);
        CavityState {
            psi: p.embed(&psi_int),
            omega,
            t,
        }
    }

    pub fn zero(p: &CavityProblem) -> Self {
        Self::from_interior(p, &vec![0.0; p.n_interior()], 0.0)
    }

    pub fn interior_omega(&self, p: &CavityProblem) -> Vec<f64> {
        p.interior(&self.omega)
    }
}

/// Fast solver for the interior Dirichlet Laplacian through 2-D type-I sine
/// transforms.
pub struct SineSolver {
    nix: usize,
    niy: usize,
    fft_x: Arc<dyn Fft<f64>>,
    fft_y: Arc<dyn Fft<f64>>,
    /// Eigenvalues of the 5-point Laplacian, x-mode fastest.
    eig: Vec<f64>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
    work: Vec<f64>,
}

impl std::fmt::Debug for SineSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SineSolver")
            .field("nix", &self.nix)
            .field("niy", &self.niy)
            .finish()
    }
}

impl SineSolver {
    pub fn new(p: &CavityProblem) -> Self {
        let (nix, niy) = (p.nix(), p.niy());
        let mut planner = FftPlanner::new();
        let fft_x = planner.plan_fft_forward(2 * (nix + 1));
        let fft_y = planner.plan_fft_forward(2 * (niy + 1));
        let scratch_len = fft_x
            .get_inplace_scratch_len()
            .max(fft_y.get_inplace_scratch_len());
        let ex: Vec<f64> = (1..=nix)
            .map(|k| {
                let s = (std::f64::consts::PI * k as f64 / (2 * (nix + 1)) as f64).sin();
                -4.0 * s * s / (p.hx() * p.hx())
            })
            .collect();
        let ey: Vec<f64> = (1..=niy)
            .map(|k| {
                let s = (std::f64::consts::PI * k as f64 / (2 * (niy + 1)) as f64).sin();
                -4.0 * s * s / (p.hy() * p.hy())
            })
            .collect();
        let mut eig = Vec::with_capacity(nix * niy);
        for b in &ey {
            for a in &ex {
                eig.push(a + b);
            }
        }
        let blen = (2 * (nix + 1) * niy).max(2 * (niy + 1) * nix);
        SineSolver {
            nix,
            niy,
            fft_x,
            fft_y,
            eig,
            buf: vec![Complex::default(); blen],
            scratch: vec![Complex::default(); scratch_len],
            work: vec![0.0; nix * niy],
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eig
    }

    /// Unnormalised DST-I of each of `count` contiguous rows of length `len`.
    fn dst_rows(
        fft: &Arc<dyn Fft<f64>>,
        buf: &mut [Complex<f64>],
        scratch: &mut [Complex<f64>],
        data: &mut [f64],
        len: usize,
        count: usize,
    ) {
        let m = 2 * (len + 1);
        let buf = &mut buf[..m * count];
        for r in 0..count {
            let row = &data[r * len..(r + 1) * len];
            let chunk = &mut buf[r * m..(r + 1) * m];
            chunk[0] = Complex::default();
            chunk[len + 1] = Complex::default();
            for (n, &x) in row.iter().enumerate() {
                chunk[n + 1] = Complex::new(x, 0.0);
                chunk[m - 1 - n] = Complex::new(-x, 0.0);
            }
        }
        fft.process_with_scratch(buf, scratch);
        for r in 0..count {
            let chunk = &buf[r * m..(r + 1) * m];
            for k in 0..len {
                data[r * len + k] = -0.5 * chunk[k + 1].im;
            }
        }
    }

    fn transpose(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }

    /// Unnormalised 2-D transform in place.
    fn dst2(&mut self, data: &mut [f64]) {
        let (nix, niy) = (self.nix, self.niy);
        Self::dst_rows(&self.fft_x, &mut self.buf, &mut self.scratch, data, nix, niy);
        Self::transpose(data, &mut self.work, niy, nix);
        let mut work = std::mem::take(&mut self.work);
        Self::dst_rows(&self.fft_y, &mut self.buf, &mut self.scratch, &mut work, niy, nix);
        Self::transpose(&work, data, nix, niy);
        self.work = work;
    }

    /// Sine coefficients of an interior field.
    pub fn forward(&mut self, data: &mut [f64]) {
        self.dst2(data);
    }

    /// Interior field from its sine coefficients.
    pub fn inverse(&mut self, data: &mut [f64]) {
        self.dst2(data);
        let s = 4.0 / ((self.nix + 1) * (self.niy + 1)) as f64;
        data.iter_mut().for_each(|x| *x *= s);
    }

    /// Interior `ψ` with `Δ_h ψ = −ω` and zero walls.
    pub fn poisson(&mut self, omega_int: &[f64]) -> Vec<f64> {
        let mut d = omega_int.to_vec();
        self.forward(&mut d);
        for (x, l) in d.iter_mut().zip(&self.eig) {
            *x = -*x / l;
        }
        self.inverse(&mut d);
        d
    }
}

/// `ψ` on the full grid solving the 5-point Poisson problem `Δ_h ψ = −ω`
/// with `ψ = 0` on the walls. Only interior values of `omega` are used.
pub fn poisson_solve(p: &CavityProblem, omega: &[f64]) -> Result<Vec<f64>> {
    if omega.len() != p.n_grid() {
        return Err(Error::invalid("vorticity field has the wrong size"));
    }
    if omega.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("vorticity must be finite"));
    }
    Ok(p.embed(&SineSolver::new(p).poisson(&p.interior(omega))))
}

/// `Δ_h x` on the interior with zero walls.
pub fn dirichlet_laplacian(p: &CavityProblem, x: &[f64], out: &mut [f64]) {
    let (nix, niy) = (p.nix(), p.niy());
    let (cx, cy) = (1.0 / (p.hx() * p.hx()), 1.0 / (p.hy() * p.hy()));
    for j in 0..niy {
        for i in 0..nix {
            let q = j * nix + i;
            let c = x[q];
            let l = if i > 0 { x[q - 1] } else { 0.0 };
            let r = if i + 1 < nix { x[q + 1] } else { 0.0 };
            let b = if j > 0 { x[q - nix] } else { 0.0 };
            let t = if j + 1 < niy { x[q + nix] } else { 0.0 };
            out[q] = cx * (l - 2.0 * c + r) + cy * (b - 2.0 * c + t);
        }
    }
}

/// Vorticity on the four walls, corners excluded. `bottom`/`top` are indexed
/// by `i − 1`, `left`/`right` by `j − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WallVorticity {
    pub bottom: Vec<f64>,
    pub top: Vec<f64>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl WallVorticity {
    pub fn zeros(p: &CavityProblem) -> Self {
        WallVorticity {
            bottom: vec![0.0; p.nix()],
            top: vec![0.0; p.nix()],
            left: vec![0.0; p.niy()],
            right: vec![0.0; p.niy()],
        }
    }

    pub fn write_into(&self, p: &CavityProblem, field: &mut [f64]) {
        let (nx, ny) = (p.nx, p.ny);
        for i in 1..nx - 1 {
            field[i] = self.bottom[i - 1];
            field[(ny - 1) * nx + i] = self.top[i - 1];
        }
        for j in 1..ny - 1 {
            field[j * nx] = self.left[j - 1];
            field[j * nx + nx - 1] = self.right[j - 1];
        }
    }
}

/// Thom's formula from interior `ψ`: `ω_B = −2ψ_{B−1}/h² − 2U_B/h`, with
/// `U_B` the tangential wall speed (the lid speed on top, zero elsewhere).
fn thom_interior(p: &CavityProblem, psi_int: &[f64], lid: f64) -> WallVorticity {
    let (nix, niy) = (p.nix(), p.niy());
    let (hx2, hy2) = (p.hx() * p.hx(), p.hy() * p.hy());
    WallVorticity {
        bottom: (0..nix).map(|i| -2.0 * psi_int[i] / hy2).collect(),
        top: (0..nix)
            .map(|i| -2.0 * psi_int[(niy - 1) * nix + i] / hy2 - 2.0 * lid / p.hy())
            .collect(),
        left: (0..niy).map(|j| -2.0 * psi_int[j * nix] / hx2).collect(),
        right: (0..niy).map(|j| -2.0 * psi_int[j * nix + nix - 1] / hx2).collect(),
    }
}

/// Wall vorticity for a full-grid stream function with `ψ = 0` on the walls.
pub fn thom_boundary(p: &CavityProblem, psi: &[f64]) -> Result<WallVorticity> {
    if psi.len() != p.n_grid() {
        return Err(Error::invalid("stream function field has the wrong size"));
    }
    Ok(thom_interior(p, &p.interior(psi), p.lid_speed))
}

/// `out += (1/Re)·(wall terms of the 5-point Laplacian)`.
fn wall_diffusion(p: &CavityProblem, wall: &WallVorticity, out: &mut [f64]) {
    let (nix, niy) = (p.nix(), p.niy());
    let (cx, cy) = (1.0 / (p.re * p.hx() * p.hx()), 1.0 / (p.re * p.hy() * p.hy()));
    for i in 0..nix {
        out[i] += cy * wall.bottom[i];
        out[(niy - 1) * nix + i] += cy * wall.top[i];
    }
    for j in 0..niy {
        out[j * nix] += cx * wall.left[j];
        out[j * nix + nix - 1] += cx * wall.right[j];
    }
}

/// Velocities `u = ψ_y`, `v = −ψ_x` at interior nodes by central
/// differences, `ψ = 0` on the walls.
pub fn velocities(p: &CavityProblem, psi_int: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nix, niy) = (p.nix(), p.niy());
    let (ax, ay) = (0.5 / p.hx(), 0.5 / p.hy());
    let mut u = vec![0.0; nix * niy];
    let mut v = vec![0.0; nix * niy];
    for j in 0..niy {
        for i in 0..nix {
            let q = j * nix + i;
            let l = if i > 0 { psi_int[q - 1] } else { 0.0 };
            let r = if i + 1 < nix { psi_int[q + 1] } else { 0.0 };
            let b = if j > 0 { psi_int[q - nix] } else { 0.0 };
            let t = if j + 1 < niy { psi_int[q + nix] } else { 0.0 };
            u[q] = ay * (t - b);
            v[q] = -ax * (r - l);
        }
    }
    (u, v)
}

/// Per-node choice of one-sided differences for the vorticity gradient:
/// `true` selects the backward difference.
#[derive(Debug, Clone, PartialEq)]
pub struct UpwindSigns {
    pub backward_x: Vec<bool>,
    pub backward_y: Vec<bool>,
}

impl UpwindSigns {
    pub fn from_velocities(u: &[f64], v: &[f64]) -> Self {
        UpwindSigns {
            backward_x: u.iter().map(|&x| x >= 0.0).collect(),
            backward_y: v.iter().map(|&x| x >= 0.0).collect(),
        }
    }

    pub fn from_vorticity(p: &CavityProblem, omega_int: &[f64]) -> Self {
        let psi = SineSolver::new(p).poisson(omega_int);
        let (u, v) = velocities(p, &psi);
        Self::from_velocities(&u, &v)
    }
}

/// How the upwind direction is chosen.
#[derive(Debug, Clone, Copy)]
pub enum Upwind<'a> {
    /// From the sign of the current velocity.
    Adaptive,
    /// Fixed directions, as used by the reduced model.
    Frozen(&'a UpwindSigns),
}

/// `out += −(u ω_x + v ω_y)` with one-sided `ω` differences; `ω` takes wall
/// values from `wall`. Bilinear in `(u, v)` and `(ω, wall)`.
fn advection_into(
    p: &CavityProblem,
    u: &[f64],
    v: &[f64],
    omega_int: &[f64],
    wall: &WallVorticity,
    signs: &UpwindSigns,
    out: &mut [f64],
) {
    let (nix, niy) = (p.nix(), p.niy());
    let (ix, iy) = (1.0 / p.hx(), 1.0 / p.hy());
    for j in 0..niy {
        for i in 0..nix {
            let q = j * nix + i;
            let c = omega_int[q];
            let dx = if signs.backward_x[q] {
                let l = if i > 0 { omega_int[q - 1] } else { wall.left[j] };
                (c - l) * ix
            } else {
                let r = if i + 1 < nix { omega_int[q + 1] } else { wall.right[j] };
                (r - c) * ix
            };
            let dy = if signs.backward_y[q] {
                let b = if j > 0 { omega_int[q - nix] } else { wall.bottom[i] };
                (c - b) * iy
            } else {
                let t = if j + 1 < niy { omega_int[q + nix] } else { wall.top[i] };
                (t - c) * iy
            };
            out[q] -= u[q] * dx + v[q] * dy;
        }
    }
}

/// Explicit part of the vorticity tendency: advection plus the wall
/// contribution to the diffusion term.
fn explicit_part(p: &CavityProblem, omega_int: &[f64], psi_int: &[f64], upwind: Upwind<'_>) -> Vec<f64> {
    let wall = thom_interior(p, psi_int, p.lid_speed);
    let mut out = vec![0.0; omega_int.len()];
    wall_diffusion(p, &wall, &mut out);
    let (u, v) = velocities(p, psi_int);
    let adaptive;
    let signs = match upwind {
        Upwind::Adaptive => {
            adaptive = UpwindSigns::from_velocities(&u, &v);
            &adaptive
        }
        Upwind::Frozen(s) => s,
    };
    advection_into(p, &u, &v, omega_int, &wall, signs, &mut out);
    out
}

/// Semi-discrete right side `dω_int/dt` at interior vorticity `omega_int`.
pub fn tendency(p: &CavityProblem, omega_int: &[f64], upwind: Upwind<'_>) -> Result<Vec<f64>> {
    if omega_int.len() != p.n_interior() {
        return Err(Error::invalid("interior vorticity has the wrong size"));
    }
    let psi = SineSolver::new(p).poisson(omega_int);
    let mut out = explicit_part(p, omega_int, &psi, upwind);
    let mut lap = vec![0.0; omega_int.len()];
    dirichlet_laplacian(p, omega_int, &mut lap);
    for (o, l) in out.iter_mut().zip(&lap) {
        *o += l / p.re;
    }
    Ok(out)
}

/// Time integrator for the full model.
#[derive(Debug)]
pub struct CavitySimulator {
    p: CavityProblem,
    sine: SineSolver,
    omega: Vec<f64>,
    prev_explicit: Option<Vec<f64>>,
    t0: f64,
    steps: usize,
}

impl CavitySimulator {
    /// Fluid at rest at `t = 0`.
    pub fn new(p: &CavityProblem) -> Result<Self> {
        p.validate()?;
        Ok(CavitySimulator {
            p: p.clone(),
            sine: SineSolver::new(p),
            omega: vec![0.0; p.n_interior()],
            prev_explicit: None,
            t0: 0.0,
            steps: 0,
        })
    }

    pub fn from_state(p: &CavityProblem, state: &CavityState, prev_explicit: Option<Vec<f64>>) -> Result<Self> {
        let mut s = Self::new(p)?;
        if state.omega.len() != p.n_grid() {
            return Err(Error::invalid("state does not match the grid"));
        }
        s.omega = state.interior_omega(p);
        s.t0 = state.t;
        s.prev_explicit = prev_explicit;
        Ok(s)
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.steps as f64 * self.p.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn omega_interior(&self) -> &[f64] {
        &self.omega
    }

    pub fn state(&self) -> CavityState {
        CavityState::from_interior(&self.p, &self.omega, self.time())
    }

    /// Explicit term evaluated at the start of the most recent step.
    pub fn last_explicit(&self) -> Option<&[f64]> {
        self.prev_explicit.as_deref()
    }

    pub fn step(&mut self) -> Result<()> {
        let p = &self.p;
        let mut hat = self.omega.clone();
        self.sine.forward(&mut hat);
        let mut psi: Vec<f64> = hat
            .iter()
            .zip(self.sine.eigenvalues())
            .map(|(w, l)| -w / l)
            .collect();
        self.sine.inverse(&mut psi);
        let e = explicit_part(p, &self.omega, &psi, Upwind::Adaptive);
        let mut rhs: Vec<f64> = match &self.prev_explicit {
            Some(prev) => e.iter().zip(prev).map(|(a, b)| 1.5 * a - 0.5 * b).collect(),
            None => e.clone(),
        };
        self.sine.forward(&mut rhs);
        let a = 0.5 * p.dt / p.re;
        for ((w, r), l) in hat.iter_mut().zip(&rhs).zip(self.sine.eigenvalues()) {
            *w = ((1.0 + a * l) * *w + p.dt * r) / (1.0 - a * l);
        }
        self.sine.inverse(&mut hat);
        self.steps += 1;
        if hat.iter().any(|x| !x.is_finite()) {
            return Err(Error::DivergedSimulation(self.time()));
        }
        self.omega = hat;
        self.prev_explicit = Some(e);
        Ok(())
    }
}

/// One step from `state`. `prev_advection` is the explicit term of the
/// previous step (absent on the first step, which falls back to forward
/// Euler). Returns the new state and the explicit term evaluated at `state`.
pub fn step_full(
    p: &CavityProblem,
    state: &CavityState,
    prev_advection: Option<&[f64]>,
) -> Result<(CavityState, Vec<f64>)> {
    let mut sim = CavitySimulator::from_state(p, state, prev_advection.map(|x| x.to_vec()))?;
    sim.step()?;
    let e = sim.prev_explicit.clone().expect("explicit term recorded");
    Ok((sim.state(), e))
}

/// Interior-vorticity snapshots of one full-model run.
#[derive(Debug, Clone)]
pub struct CavityTrajectory {
    pub param: ParameterPoint,
    pub times: Vec<f64>,
    pub snapshots: DenseMatrix,
    pub final_state: CavityState,
}

/// Runs the full model from rest to `t_end`, recording the interior
/// vorticity every `snapshot_every` steps (the initial state included).
pub fn simulate(p: &CavityProblem, t_end: f64, snapshot_every: usize) -> Result<CavityTrajectory> {
    if snapshot_every == 0 || !(t_end >= 0.0) {
        return Err(Error::invalid("need a positive snapshot cadence and t_end ≥ 0"));
    }
    let steps = (t_end / p.dt).round() as usize;
    let mut sim = CavitySimulator::new(p)?;
    let mut times = vec![0.0];
    let mut cols = vec![sim.omega.clone()];
    for s in 1..=steps {
        sim.step()?;
        if s % snapshot_every == 0 || s == steps {
            times.push(sim.time());
            cols.push(sim.omega.clone());
        }
    }
    Ok(CavityTrajectory {
        param: p.param(),
        times,
        snapshots: DenseMatrix::from_columns(p.n_interior(), &cols)?,
        final_state: sim.state(),
    })
}

/// Galerkin reduced model on one time segment:
/// `dv/dt = D̂v + affine + linear·v + Σ_{b,c} Q[·,b,c] v_b v_c`.
#[derive(Debug, Clone)]
pub struct CavityRom {
    pub basis: ReducedBasis,
    /// Stream-function modes: Poisson solves of the vorticity modes.
    pub lift: DenseMatrix,
    /// `Φᵀ (1/Re) Δ_h Φ`, integrated implicitly.
    pub diffusion: DenseMatrix,
    pub affine: Vec<f64>,
    pub linear: DenseMatrix,
    /// `quadratic[(b·k + c)·k + a]`.
    pub quadratic: Vec<f64>,
    /// Nominal time window in which this model is active.
    pub segment: (f64, f64),
    pub signs: UpwindSigns,
}

impl CavityRom {
    pub fn k(&self) -> usize {
        self.basis.dim()
    }

    /// Explicit reduced term `affine + linear·v + Q(v, v)`.
    pub fn explicit_into(&self, v: &[f64], out: &mut [f64]) {
        let k = self.k();
        self.linear.matvec_into(v, out);
        for (o, a) in out.iter_mut().zip(&self.affine) {
            *o += a;
        }
        for b in 0..k {
            for c in 0..k {
                let w = v[b] * v[c];
                if w == 0.0 {
                    continue;
                }
                let q = &self.quadratic[(b * k + c) * k..(b * k + c + 1) * k];
                for (o, x) in out.iter_mut().zip(q) {
                    *o += w * x;
                }
            }
        }
    }

    /// Full reduced right side `D̂v + explicit(v)`.
    pub fn rhs(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        self.explicit_into(v, &mut out);
        let d = self.diffusion.matvec(v);
        out.iter_mut().zip(&d).for_each(|(o, x)| *o += x);
        out
    }
}

/// Assembles the Galerkin tensors for an orthonormal vorticity basis.
pub fn assemble_rom(
    p: &CavityProblem,
    basis: ReducedBasis,
    signs: UpwindSigns,
    segment: (f64, f64),
) -> Result<CavityRom> {
    let n = p.n_interior();
    let phi = &basis.phi;
    if phi.rows() != n {
        return Err(Error::invalid("basis length does not match the interior grid"));
    }
    if signs.backward_x.len() != n || signs.backward_y.len() != n {
        return Err(Error::invalid("upwind signs do not match the interior grid"));
    }
    let k = phi.cols();
    let mut sine = SineSolver::new(p);
    let mut lift = DenseMatrix::zeros(n, k);
    for c in 0..k {
        let psi = sine.poisson(phi.col(c));
        lift.col_mut(c).copy_from_slice(&psi);
    }
    let mut lap = DenseMatrix::zeros(n, k);
    for c in 0..k {
        dirichlet_laplacian(p, phi.col(c), lap.col_mut(c));
    }
    let mut diffusion = phi.t_matmul(&lap);
    diffusion.scale(1.0 / p.re);

    let walls: Vec<WallVorticity> = (0..k).map(|c| thom_interior(p, lift.col(c), 0.0)).collect();
    let vel: Vec<(Vec<f64>, Vec<f64>)> = (0..k).map(|c| velocities(p, lift.col(c))).collect();
    let lid_wall = thom_interior(p, &vec![0.0; n], p.lid_speed);
    let zero = vec![0.0; n];

    let mut f = vec![0.0; n];
    wall_diffusion(p, &lid_wall, &mut f);
    let affine = phi.t_matvec(&f);

    let mut lin_fields = DenseMatrix::zeros(n, k);
    for c in 0..k {
        let col = lin_fields.col_mut(c);
        wall_diffusion(p, &walls[c], col);
        advection_into(p, &vel[c].0, &vel[c].1, &zero, &lid_wall, &signs, col);
    }
    let linear = phi.t_matmul(&lin_fields);

    let mut quadratic = vec![0.0; k * k * k];
    let mut fields = DenseMatrix::zeros(n, k);
    for b in 0..k {
        for c in 0..k {
            let col = fields.col_mut(c);
            col.iter_mut().for_each(|x| *x = 0.0);
            advection_into(p, &vel[b].0, &vel[b].1, phi.col(c), &walls[c], &signs, col);
        }
        let proj = phi.t_matmul(&fields);
        for c in 0..k {
            quadratic[(b * k + c) * k..(b * k + c + 1) * k].copy_from_slice(proj.col(c));
        }
    }
    Ok(CavityRom {
        basis,
        lift,
        diffusion,
        affine,
        linear,
        quadratic,
        segment,
        signs,
    })
}

/// Reduced model for problem `p` on one segment, from trajectories already
/// restricted to that segment's data window. The basis is the leading `k`
/// left singular vectors of the information matrix about `params[center]`;
/// upwind directions are frozen from the kernel-weighted mean of the
/// segment snapshots.
pub fn build_rom(
    traj: &TrajectoryEnsemble,
    segment: (f64, f64),
    center: usize,
    kernel: WeightingKernel,
    k: usize,
    p: &CavityProblem,
    domain: &ParameterDomain,
) -> Result<CavityRom> {
    let info = information_matrix(traj, center, kernel, domain)?;
    if info.rows() != p.n_interior() {
        return Err(Error::invalid("trajectory data does not match the interior grid"));
    }
    let cfg = NumericsConfig::default();
    let s = svd_with(&info, &cfg)?;
    let rank = s.rank(cfg.rank_tol);
    if k == 0 || k > rank {
        return Err(Error::InvalidRank {
            requested: k,
            available: rank,
        });
    }
    let weights = weights_about(&traj.params[center], &traj.params, &kernel, domain)?;
    let reference = weighted_mean_snapshot(traj, &weights)?;
    let signs = UpwindSigns::from_vorticity(p, &reference);
    let basis = ReducedBasis {
        phi: s.u.leading_columns(k),
        provenance: Provenance::Arm { kernel },
        subdomain: Some(center),
        singular_values: s.sigma,
    };
    assemble_rom(p, basis, signs, segment)
}

fn weighted_mean_snapshot(traj: &TrajectoryEnsemble, weights: &[f64]) -> Result<Vec<f64>> {
    if traj.trajectories.len() != weights.len() {
        return Err(Error::invalid("raw trajectories are required for the reference flow"));
    }
    let n = traj.trajectories[0].rows();
    let mut mean = vec![0.0; n];
    let mut total = 0.0;
    for (x, &a) in traj.trajectories.iter().zip(weights) {
        if a == 0.0 {
            continue;
        }
        let s = a / x.cols() as f64;
        for j in 0..x.cols() {
            for (m, v) in mean.iter_mut().zip(x.col(j)) {
                *m += s * v;
            }
        }
        total += a;
    }
    if total > 0.0 {
        mean.iter_mut().for_each(|m| *m /= total);
    }
    Ok(mean)
}

/// Reduced states recorded along an integration.
#[derive(Debug, Clone)]
pub struct RomTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Index of the active model for each record.
    pub active: Vec<usize>,
}

impl RomTrajectory {
    /// Interior vorticity of the last record.
    pub fn final_vorticity(&self, roms: &[CavityRom]) -> Vec<f64> {
        let last = self.states.len() - 1;
        roms[self.active[last]].basis.lift(&self.states[last])
    }
}

fn active_rom(roms: &[CavityRom], t: f64, slack: f64) -> Result<usize> {
    let last = roms.len() - 1;
    roms.iter()
        .position(|r| t >= r.segment.0 - slack && t < r.segment.1 - slack)
        .or_else(|| {
            let r = &roms[last];
            (t >= r.segment.0 - slack && t <= r.segment.1 + slack).then_some(last)
        })
        .ok_or(Error::SegmentGap(t))
}

/// Integrates the reduced models over `t_span` with the same splitting as
/// the full model: `D̂` by Crank–Nicolson, the explicit term by AB2. When
/// the active segment changes, the state and the AB2 history are mapped by
/// `Φ_newᵀ Φ_old`. `v0` is in the coordinates of the model active at the
/// start. States are recorded every `record_every` steps and at the end.
pub fn integrate_rom(
    roms: &[CavityRom],
    v0: &[f64],
    t_span: (f64, f64),
    dt: f64,
    record_every: usize,
) -> Result<RomTrajectory> {
    if roms.is_empty() {
        return Err(Error::SegmentGap(t_span.0));
    }
    if !(dt > 0.0) || record_every == 0 || !(t_span.1 >= t_span.0) {
        return Err(Error::invalid("invalid integration window or step"));
    }
    if roms.windows(2).any(|w| w[1].segment.0 < w[0].segment.0) {
        return Err(Error::invalid("models must be ordered by segment"));
    }
    let slack = 1e-9 * dt;
    let steps = ((t_span.1 - t_span.0) / dt).round() as usize;
    let mut cur = active_rom(roms, t_span.0, slack)?;
    if v0.len() != roms[cur].k() {
        return Err(Error::invalid("initial state does not match the first model"));
    }
    let factor = |r: &CavityRom| -> Result<LuFactor> {
        let k = r.k();
        let mut a = r.diffusion.clone();
        a.scale(-0.5 * dt);
        LuFactor::new(&a.add(&DenseMatrix::identity(k)))
    };
    let mut lu = factor(&roms[cur])?;
    let mut v = v0.to_vec();
    let mut v_prev: Option<Vec<f64>> = None;
    let mut g_prev: Option<Vec<f64>> = None;
    let mut out = RomTrajectory {
        times: vec![t_span.0],
        states: vec![v.clone()],
        active: vec![cur],
    };
    for s in 0..steps {
        let t = t_span.0 + s as f64 * dt;
        let next = active_rom(roms, t, slack)?;
        if next != cur {
            let m = roms[next].basis.phi.t_matmul(&roms[cur].basis.phi);
            v = m.matvec(&v);
            if let Some(vp) = v_prev.as_mut() {
                *vp = m.matvec(vp);
                let mut g = vec![0.0; roms[next].k()];
                roms[next].explicit_into(vp, &mut g);
                g_prev = Some(g);
            }
            cur = next;
            lu = factor(&roms[cur])?;
        }
        let rom = &roms[cur];
        let k = rom.k();
        let mut g = vec![0.0; k];
        rom.explicit_into(&v, &mut g);
        let dv = rom.diffusion.matvec(&v);
        let rhs: Vec<f64> = (0..k)
            .map(|i| {
                let ab = match &g_prev {
                    Some(gp) => 1.5 * g[i] - 0.5 * gp[i],
                    None => g[i],
                };
                v[i] + 0.5 * dt * dv[i] + dt * ab
            })
            .collect();
        let mut vn = vec![0.0; k];
        lu.solve_into(&rhs, &mut vn);
        if vn.iter().any(|x| !x.is_finite()) {
            return Err(Error::DivergedSimulation(t + dt));
        }
        v_prev = Some(std::mem::replace(&mut v, vn));
        g_prev = Some(g);
        if (s + 1) % record_every == 0 || s + 1 == steps {
            out.times.push(t + dt);
            out.states.push(v.clone());
            out.active.push(cur);
        }
    }
    Ok(out)
}

/// Reduced models for every segment of a test problem, from full training
/// trajectories. The subdomain centre is the training parameter nearest the
/// test parameter.
#[allow(clippy::too_many_arguments)]
pub fn build_segment_roms(
    p: &CavityProblem,
    training: &[CavityTrajectory],
    segments: &TimeSegments,
    kernel: WeightingKernel,
    k: usize,
    rule: &crate::basis::ModeTruncation,
    domain: &ParameterDomain,
    exec: crate::parallel::Exec,
) -> Result<Vec<CavityRom>> {
    if training.is_empty() {
        return Err(Error::invalid("no training trajectories"));
    }
    let params: Vec<ParameterPoint> = training.iter().map(|t| t.param.clone()).collect();
    let center = crate::sampling::nearest_reference(&p.param(), &params, &Default::default(), domain)?;
    exec.map(segments.len(), |s| -> Result<CavityRom> {
        let (lo, hi) = segments.data[s];
        let pieces = training
            .iter()
            .map(|t| {
                crate::basis::segment_trajectories(&t.snapshots, &t.times, &[(lo, hi)])
                    .map(|mut v| v.remove(0))
            })
            .collect::<Result<Vec<_>>>()?;
        let ens = TrajectoryEnsemble::new(params.clone(), pieces, rule)?;
        build_rom(&ens, segments.nominal[s], center, kernel, k, p, domain)
    })
    .into_iter()
    .collect()
}

/// `‖a − b‖ / ‖a‖`.
pub fn relative_error(reference: &[f64], approx: &[f64]) -> f64 {
    let d: Vec<f64> = reference.iter().zip(approx).map(|(a, b)| a - b).collect();
    norm2(&d) / norm2(reference)
}

/// `u(x = L_x/2, y)` along the vertical centre line, walls included, as
/// `(y, u)` pairs. `ψ` is a full-grid field; the lid row carries the lid speed.
pub fn centerline_u(p: &CavityProblem, psi: &[f64]) -> Vec<(f64, f64)> {
    let (nx, ny, hy) = (p.nx, p.ny, p.hy());
    let x = p.lx / 2.0;
    let i0 = ((x / p.hx()).floor() as usize).min(nx - 2);
    let wx = x / p.hx() - i0 as f64;
    let u_at = |i: usize, j: usize| -> f64 {
        if j == 0 {
            0.0
        } else if j == ny - 1 {
            if i == 0 || i == nx - 1 {
                0.0
            } else {
                p.lid_speed
            }
        } else {
            (psi[(j + 1) * nx + i] - psi[(j - 1) * nx + i]) / (2.0 * hy)
        }
    };
    (0..ny)
        .map(|j| (j as f64 * hy, (1.0 - wx) * u_at(i0, j) + wx * u_at(i0 + 1, j)))
        .collect()
}

/// `v(x, y = L_y/2)` along the horizontal centre line as `(x, v)` pairs.
pub fn centerline_v(p: &CavityProblem, psi: &[f64]) -> Vec<(f64, f64)> {
    let (nx, ny, hx) = (p.nx, p.ny, p.hx());
    let y = p.ly / 2.0;
    let j0 = ((y / p.hy()).floor() as usize).min(ny - 2);
    let wy = y / p.hy() - j0 as f64;
    let v_at = |i: usize, j: usize| -> f64 {
        if i == 0 || i == nx - 1 || j == 0 || j == ny - 1 {
            0.0
        } else {
            -(psi[j * nx + i + 1] - psi[j * nx + i - 1]) / (2.0 * hx)
        }
    };
    (0..nx)
        .map(|i| (i as f64 * hx, (1.0 - wy) * v_at(i, j0) + wy * v_at(i, j0 + 1)))
        .collect()
}
