//! Unknown Input Observer (UIO) monitoring of a neighbour's communicated
//! measurements.
//!
//! DGU `i` runs one observer per neighbour `j`:
//!
//! ```text
//! z'    = F z + K_hat y_hat
//! x_hat = z + H y_hat
//! r     = y_hat - x_hat
//! ```
//!
//! Everything DGU `i` does not know about `j` (load, voltage reference,
//! secondary input, neighbour voltages) enters `j`'s dynamics through the
//! columns of `E_bar`, and `S E_bar = 0` removes it from the estimation error.
//! Noise bounds give a time-varying envelope `e_bar(t)` on the estimation
//! error; an alarm is raised when `|r| > e_bar + rho_bar` in any component.
//!
//! With `C = I` the observer is built from the orthogonal projector onto
//! `span(E_bar)`: `H = E_bar E_bar^T`, `S = I - H`, `F = -lambda I`,
//! `K1 = S A_K - F`, `K_hat = K1 + F H`. Then `||exp(F t)|| = exp(-lambda t)`
//! exactly, i.e. `kappa = 1`, `mu = lambda`.

use nalgebra::{Dyn, Matrix3, Matrix3xX, OMatrix, Vector3, U3};

use crate::comm::{delta_profile, PiecewiseConstant, ReplayAttackConfig, WatermarkConfig};
use crate::error::{Error, Result};
use crate::grid::{DguMatrices, NoiseBounds};
use crate::num::Real;
use crate::stability::{abs, is_hurwitz};

/// Observer matrices for one (owner, observed neighbour) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct UioBundle<T: Real> {
    pub f: Matrix3<T>,
    pub s: Matrix3<T>,
    pub h: Matrix3<T>,
    pub k_hat: Matrix3<T>,
    pub k1: Matrix3<T>,
    pub e_bar: Matrix3xX<T>,
    /// `||exp(F t)|| <= kappa exp(-mu t)`.
    pub kappa: T,
    pub mu: T,
}

impl<T: Real> UioBundle<T> {
    /// Largest violation among the structural identities `S E_bar = 0` and
    /// `K_hat = K1 + F H`.
    pub fn algebra_residual(&self) -> T {
        let se = (self.s * &self.e_bar).amax();
        let kh = (self.k_hat - self.k1 - self.f * self.h).amax();
        se.max(kh)
    }

    pub fn f_is_hurwitz(&self) -> bool {
        is_hurwitz(&self.f)
    }

    /// `int_0^s exp(F sigma) d sigma`.
    pub fn integrated_exp(&self, s: T) -> Matrix3<T> {
        integrated_exp(&self.f, s)
    }
}

fn is_diagonal<T: Real>(m: &Matrix3<T>) -> bool {
    (0..3).all(|r| (0..3).all(|c| r == c || m[(r, c)] == T::zero()))
}

/// `exp(F s)`, with a closed form for diagonal `F`.
pub fn exp_f<T: Real>(f: &Matrix3<T>, s: T) -> Matrix3<T> {
    if is_diagonal(f) {
        Matrix3::from_diagonal(&f.diagonal().map(|l| (l * s).exp()))
    } else {
        (f * s).exp()
    }
}

/// `int_0^s exp(F sigma) d sigma = F^-1 (exp(F s) - I)` for invertible `F`.
pub fn integrated_exp<T: Real>(f: &Matrix3<T>, s: T) -> Matrix3<T> {
    if is_diagonal(f) {
        return Matrix3::from_diagonal(&f.diagonal().map(|l| {
            if l == T::zero() {
                s
            } else {
                ((l * s).exp() - T::one()) / l
            }
        }));
    }
    let inv = f.try_inverse().expect("Hurwitz F is invertible");
    inv * ((f * s).exp() - Matrix3::identity())
}

/// Orthonormal basis of the column space of `[M | G | A_jk for k in N_j]`,
/// the directions through which unknown inputs enter DGU `j`.
pub fn build_unknown_input_matrix<T: Real>(mats: &DguMatrices<T>) -> Matrix3xX<T> {
    let cols = 3 + 3 * mats.a_ij.len();
    let mut stacked = OMatrix::<T, U3, Dyn>::zeros(cols);
    stacked.columns_mut(0, 2).copy_from(&mats.m);
    stacked.column_mut(2).copy_from(&mats.g);
    for (k, (_, a)) in mats.a_ij.iter().enumerate() {
        stacked.columns_mut(3 + 3 * k, 3).copy_from(a);
    }

    let svd = stacked.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma_max = svd.singular_values.max();
    let tol = sigma_max * T::of(1e-10);
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > tol)
        .map(|(k, _)| k)
        .collect();
    let mut basis = Matrix3xX::zeros(keep.len());
    for (dst, src) in keep.iter().enumerate() {
        basis.column_mut(dst).copy_from(&u.column(*src));
    }
    basis
}

/// Projector-based UIO for `C = I` with `F = -lambda I`.
pub fn synthesize_uio<T: Real>(
    a_k: &Matrix3<T>,
    e_bar: &Matrix3xX<T>,
    lambda: T,
) -> Result<UioBundle<T>> {
    if !(lambda > T::zero() && lambda.is_finite()) {
        return Err(Error::Config(
            "observer decay rate lambda must be positive".into(),
        ));
    }
    let h: Matrix3<T> = e_bar * e_bar.transpose();
    let s = Matrix3::identity() - h;
    let f = Matrix3::from_diagonal_element(-lambda);
    let k1 = s * a_k - f;
    let k_hat = k1 + f * h;
    Ok(UioBundle {
        f,
        s,
        h,
        k_hat,
        k1,
        e_bar: e_bar.clone(),
        kappa: T::one(),
        mu: lambda,
    })
}

/// Constants of the closed-form error envelope for one observer.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdModel<T: Real> {
    pub kappa: T,
    pub mu: T,
    /// `|H| rho_bar`.
    pub h_rho: Vector3<T>,
    /// `|S| w_bar + |S B K - K_hat| rho_bar`.
    pub drive: Vector3<T>,
    pub rho_bar: Vector3<T>,
}

impl<T: Real> ThresholdModel<T> {
    /// `b_k` is `B K` of the observed DGU.
    pub fn new(uio: &UioBundle<T>, b_k: &Matrix3<T>, bounds: &NoiseBounds<T>) -> Self {
        let noise_gain = uio.s * b_k - uio.k_hat;
        Self {
            kappa: uio.kappa,
            mu: uio.mu,
            h_rho: abs(&uio.h) * bounds.rho_bar,
            drive: abs(&uio.s) * bounds.w_bar + abs(&noise_gain) * bounds.rho_bar,
            rho_bar: bounds.rho_bar,
        }
    }

    /// Limit of `e_bar(t)` as `t -> inf`.
    pub fn asymptote(&self) -> Vector3<T> {
        self.h_rho + self.drive * (self.kappa / self.mu)
    }
}

/// `e_bar(t)` and `r_bar(t) = e_bar(t) + rho_bar`, with `t` measured from the
/// observer's start.
///
/// Closed form of
/// `kappa e^{-mu t} [e_bar(0) + |H| rho_bar] + |H| rho_bar
///  + int_0^t kappa e^{-mu (t - tau)} drive d tau`.
pub fn threshold_value<T: Real>(
    t: T,
    model: &ThresholdModel<T>,
    e_bar0: &Vector3<T>,
) -> (Vector3<T>, Vector3<T>) {
    let decay = (-model.mu * t).exp();
    let e_bar = (e_bar0 + model.h_rho) * (model.kappa * decay)
        + model.h_rho
        + model.drive * (model.kappa / model.mu * (T::one() - decay));
    let r_bar = e_bar + model.rho_bar;
    (e_bar, r_bar)
}

/// First threshold crossing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alarm {
    pub t: f64,
    pub component: usize,
}

/// Running state of one observer.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorState<T: Real> {
    pub z: Vector3<T>,
    pub x_hat: Vector3<T>,
    pub e_bar: Vector3<T>,
    pub e_bar0: Vector3<T>,
    /// Time the observer was started.
    pub t_start: f64,
    /// Input held over the next integration step.
    pub held_input: Option<Vector3<T>>,
    /// Latched on first crossing.
    pub alarm: Option<Alarm>,
}

impl<T: Real> Default for DetectorState<T> {
    fn default() -> Self {
        Self {
            z: Vector3::zeros(),
            x_hat: Vector3::zeros(),
            e_bar: Vector3::zeros(),
            e_bar0: Vector3::zeros(),
            t_start: 0.0,
            held_input: None,
            alarm: None,
        }
    }
}

impl<T: Real> DetectorState<T> {
    pub fn is_started(&self) -> bool {
        self.held_input.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualRecord<T: Real> {
    pub t: f64,
    pub r: Vector3<T>,
    pub r_bar: Vector3<T>,
    pub alarm: bool,
}

fn rk4_linear<T: Real>(f: &Matrix3<T>, forcing: &Vector3<T>, z: &Vector3<T>, dt: T) -> Vector3<T> {
    let half = T::of(0.5);
    let deriv = |z: &Vector3<T>| f * z + forcing;
    let k1 = deriv(z);
    let k2 = deriv(&(z + k1 * (dt * half)));
    let k3 = deriv(&(z + k2 * (dt * half)));
    let k4 = deriv(&(z + k3 * dt));
    z + (k1 + k2 * T::of(2.0) + k3 * T::of(2.0) + k4) * (dt / T::of(6.0))
}

fn rk4_staged<T: Real>(
    f: &Matrix3<T>,
    k_hat: &Matrix3<T>,
    inputs: &[Vector3<T>; 4],
    z: &Vector3<T>,
    dt: T,
) -> Vector3<T> {
    let half = T::of(0.5);
    let k1 = f * z + k_hat * inputs[0];
    let k2 = f * (z + k1 * (dt * half)) + k_hat * inputs[1];
    let k3 = f * (z + k2 * (dt * half)) + k_hat * inputs[2];
    let k4 = f * (z + k3 * dt) + k_hat * inputs[3];
    z + (k1 + k2 * T::of(2.0) + k3 * T::of(2.0) + k4) * (dt / T::of(6.0))
}

/// Advances the observer to time `t` and evaluates it against the decoded
/// measurement `y_hat` received at `t`.
///
/// `segment` is the decoded signal over `[t - dt, t)` at the RK4 stage points.
/// With it, `z` is integrated on the same scheme as the plant; without it, the
/// previous sample is held over the step.
///
/// The first call starts the observer at `z = S y_hat`, which makes
/// `x_hat = y_hat` and `e_bar(0) = |y_hat - x_hat| + rho_bar = rho_bar`.
pub fn detector_step<T: Real>(
    state: &DetectorState<T>,
    uio: &UioBundle<T>,
    threshold: &ThresholdModel<T>,
    y_hat: &Vector3<T>,
    segment: Option<&[Vector3<T>; 4]>,
    t: f64,
    dt: f64,
) -> (DetectorState<T>, ResidualRecord<T>) {
    let mut next = state.clone();
    match state.held_input {
        None => {
            next.t_start = t;
            next.z = uio.s * y_hat;
            let x_hat = next.z + uio.h * y_hat;
            next.e_bar0 = (y_hat - x_hat).abs() + threshold.rho_bar;
        }
        Some(prev) => {
            next.z = match segment {
                Some(seg) => rk4_staged(&uio.f, &uio.k_hat, seg, &state.z, T::of(dt)),
                None => rk4_linear(&uio.f, &(uio.k_hat * prev), &state.z, T::of(dt)),
            };
        }
    }
    next.x_hat = next.z + uio.h * y_hat;
    next.held_input = Some(*y_hat);

    let r = y_hat - next.x_hat;
    let (e_bar, r_bar) = threshold_value(T::of(t - next.t_start), threshold, &next.e_bar0);
    next.e_bar = e_bar;

    let crossing = (0..3).find(|&k| r[k].abs() > r_bar[k]);
    if next.alarm.is_none() {
        if let Some(component) = crossing {
            next.alarm = Some(Alarm { t, component });
        }
    }
    let record = ResidualRecord {
        t,
        r,
        r_bar,
        alarm: next.alarm.is_some(),
    };
    (next, record)
}

/// An observer together with its state.
#[derive(Clone, Debug)]
pub struct Detector<T: Real> {
    /// Index of the DGU running this observer.
    pub owner: usize,
    /// Index of the neighbour being estimated.
    pub observed: usize,
    pub uio: UioBundle<T>,
    pub threshold: ThresholdModel<T>,
    pub state: DetectorState<T>,
}

impl<T: Real> Detector<T> {
    pub fn new(
        owner: usize,
        observed: usize,
        uio: UioBundle<T>,
        threshold: ThresholdModel<T>,
    ) -> Self {
        Self {
            owner,
            observed,
            uio,
            threshold,
            state: DetectorState::default(),
        }
    }

    pub fn step(
        &mut self,
        y_hat: &Vector3<T>,
        segment: Option<&[Vector3<T>; 4]>,
        t: f64,
        dt: f64,
    ) -> ResidualRecord<T> {
        let (next, rec) = detector_step(
            &self.state,
            &self.uio,
            &self.threshold,
            y_hat,
            segment,
            t,
            dt,
        );
        self.state = next;
        rec
    }

    /// `r_bar` at absolute time `t`.
    pub fn r_bar_at(&self, t: f64) -> Vector3<T> {
        threshold_value(
            T::of(t - self.state.t_start),
            &self.threshold,
            &self.state.e_bar0,
        )
        .1
    }

    pub fn e_bar_at(&self, t: f64) -> Vector3<T> {
        threshold_value(
            T::of(t - self.state.t_start),
            &self.threshold,
            &self.state.e_bar0,
        )
        .0
    }
}

/// Sufficient condition for a replay to stay hidden over its first period
/// without a watermark: `|e_a(Ta)| <= e_bar(Ta)` component-wise, with
/// `e_a(Ta) = x(Ta - T) - x_hat(Ta)`.
pub fn stealth_check<T: Real>(e_a: &Vector3<T>, e_bar: &Vector3<T>) -> bool {
    e_a.iter().zip(e_bar.iter()).all(|(e, b)| e.abs() <= *b)
}

/// Watermark-induced residual term
/// `|S delta(t) - int_{Ta}^t exp(F (t - tau)) K_hat delta(tau) d tau|`,
/// integrated exactly over the constant pieces of `delta`. `Ta` is the start
/// of the profile.
pub fn detectability_lhs<T: Real>(
    t: f64,
    uio: &UioBundle<T>,
    delta: &PiecewiseConstant<T>,
) -> Vector3<T> {
    let mut integral = Vector3::zeros();
    for (a, b, d) in delta.segments() {
        if a >= t {
            break;
        }
        let b = b.min(t);
        let weight = uio.integrated_exp(T::of(t - a)) - uio.integrated_exp(T::of(t - b));
        integral += weight * (uio.k_hat * d);
    }
    (uio.s * delta.value_at(t) - integral).abs()
}

/// Smallest grid time `t = Ta + k dt <= t_end` at which some component of the
/// watermark-induced term exceeds `2 r_bar(t)`. `None` means detection is not
/// guaranteed on the horizon.
pub fn guaranteed_detection_time<T: Real>(
    uio: &UioBundle<T>,
    wm: &WatermarkConfig<T>,
    attack: &ReplayAttackConfig,
    t_end: f64,
    dt: f64,
    r_bar: impl Fn(f64) -> Vector3<T>,
) -> Option<f64> {
    if wm.c == T::zero() || !(dt > 0.0) {
        return None;
    }
    let profile = delta_profile(attack, wm, t_end + dt);
    let ta = attack.t_attack;
    let two = T::of(2.0);
    let step_prop = exp_f(&uio.f, T::of(dt));

    // Propagate the convolution integral along the grid instead of
    // re-integrating from Ta at every point.
    let mut integral = Vector3::<T>::zeros();
    let mut k = 0usize;
    loop {
        let t = ta + k as f64 * dt;
        if t > t_end + 1e-12 {
            return None;
        }
        let lhs = (uio.s * profile.value_at(t) - integral).abs();
        let rb = r_bar(t);
        if (0..3).any(|c| lhs[c] > two * rb[c]) {
            return Some(t);
        }
        let t_next = ta + (k + 1) as f64 * dt;
        let mut inc = Vector3::zeros();
        for (a, b, d) in profile.segments() {
            let (lo, hi) = (a.max(t), b.min(t_next));
            if lo >= hi {
                continue;
            }
            let w = uio.integrated_exp(T::of(t_next - lo)) - uio.integrated_exp(T::of(t_next - hi));
            inc += w * (uio.k_hat * d);
        }
        integral = step_prop * integral + inc;
        k += 1;
    }
}
