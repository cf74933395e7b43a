//! Electrical model of the DGU network.
//!
//! Each DGU is an averaged buck converter feeding its point of common
//! coupling (PCC) through an RLC filter, plus an integrator state for the
//! primary voltage loop. State `x = [V, I_t, v]`, known input `d = [I_L, V_ref]`.
//! Lines are purely resistive and couple neighbouring PCC voltages.

use nalgebra::{Matrix3, Matrix3x2, RowVector3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::stability;

/// RLC filter parameters, voltage reference, current rating and primary gains
/// of one DGU.
#[derive(Clone, Debug, PartialEq)]
pub struct DguParams<T: Real> {
    pub r_t: T,
    pub l_t: T,
    pub c_t: T,
    pub v_ref: T,
    /// Current-sharing rating `I_t^s`.
    pub i_t_s: T,
    /// Primary state-feedback gain, `u = K y`.
    pub k: RowVector3<T>,
}

impl<T: Real> DguParams<T> {
    pub fn check(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !(pos(self.r_t) && pos(self.l_t) && pos(self.c_t)) {
            return Err(Error::Config("R_t, L_t and C_t must be positive".into()));
        }
        if !pos(self.i_t_s) {
            return Err(Error::Config("I_t_s must be positive".into()));
        }
        if !self.k.iter().all(|k| k.is_finite()) || !self.v_ref.is_finite() {
            return Err(Error::Config("gains and V_ref must be finite".into()));
        }
        Ok(())
    }
}

/// Physical state of one DGU plus its secondary-control integrator `alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DguState<T: Real> {
    /// PCC voltage `V`.
    pub voltage: T,
    /// Converter terminal current `I_t`.
    pub current: T,
    /// Primary-loop integrator `v`.
    pub integrator: T,
    pub alpha: T,
}

impl<T: Real> DguState<T> {
    pub fn zero() -> Self {
        Self {
            voltage: T::zero(),
            current: T::zero(),
            integrator: T::zero(),
            alpha: T::zero(),
        }
    }

    pub fn x(&self) -> Vector3<T> {
        Vector3::new(self.voltage, self.current, self.integrator)
    }

    pub fn with_x(x: Vector3<T>, alpha: T) -> Self {
        Self {
            voltage: x[0],
            current: x[1],
            integrator: x[2],
            alpha,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.voltage.is_finite()
            && self.current.is_finite()
            && self.integrator.is_finite()
            && self.alpha.is_finite()
    }
}

/// Undirected resistive power line between DGUs `a` and `b` (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct Line<T: Real> {
    pub a: usize,
    pub b: usize,
    pub resistance: T,
    /// Time (s) at which the breaker closes; the communication link between
    /// the two DGUs comes up at the same instant.
    pub t_on: f64,
}

/// Electrical graph. The communication graph has the same edges.
#[derive(Clone, Debug, PartialEq)]
pub struct MicrogridTopology<T: Real> {
    pub n_dgus: usize,
    pub lines: Vec<Line<T>>,
}

impl<T: Real> MicrogridTopology<T> {
    pub fn new(n_dgus: usize, lines: Vec<Line<T>>) -> Result<Self> {
        let topo = Self { n_dgus, lines };
        topo.check()?;
        Ok(topo)
    }

    pub fn check(&self) -> Result<()> {
        for (k, l) in self.lines.iter().enumerate() {
            if l.a >= self.n_dgus || l.b >= self.n_dgus {
                return Err(Error::Config(format!("line {k} references an unknown DGU")));
            }
            if l.a == l.b {
                return Err(Error::Config(format!("line {k} is a self-loop")));
            }
            if !(l.resistance > T::zero() && l.resistance.is_finite()) {
                return Err(Error::Config(format!(
                    "line {k} ({}-{}) has no valid resistance",
                    l.a, l.b
                )));
            }
            if self.lines[..k]
                .iter()
                .any(|o| (o.a, o.b) == (l.a, l.b) || (o.a, o.b) == (l.b, l.a))
            {
                return Err(Error::Config(format!(
                    "line {k} duplicates an earlier edge"
                )));
            }
        }
        Ok(())
    }

    /// Neighbours of `dgu` with line resistance, restricted to lines closed at
    /// time `t` (`None` means all lines).
    pub fn neighbors(&self, dgu: usize, t: Option<f64>) -> Vec<(usize, T)> {
        let mut out: Vec<(usize, T)> = self
            .lines
            .iter()
            .filter(|l| t.is_none_or(|t| l.t_on <= t))
            .filter_map(|l| {
                if l.a == dgu {
                    Some((l.b, l.resistance))
                } else if l.b == dgu {
                    Some((l.a, l.resistance))
                } else {
                    None
                }
            })
            .collect();
        out.sort_by_key(|(j, _)| *j);
        out
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.lines
            .iter()
            .any(|l| (l.a, l.b) == (a, b) || (l.a, l.b) == (b, a))
    }

    pub fn line(&self, a: usize, b: usize) -> Option<&Line<T>> {
        self.lines
            .iter()
            .find(|l| (l.a, l.b) == (a, b) || (l.a, l.b) == (b, a))
    }
}

/// Component-wise bounds on process noise `w` and measurement noise `rho`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseBounds<T: Real> {
    pub w_bar: Vector3<T>,
    pub rho_bar: Vector3<T>,
}

impl<T: Real> NoiseBounds<T> {
    pub fn zero() -> Self {
        Self {
            w_bar: Vector3::zeros(),
            rho_bar: Vector3::zeros(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self
            .w_bar
            .iter()
            .chain(self.rho_bar.iter())
            .all(|b| *b >= T::zero() && b.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Config("noise bounds must be finite and >= 0".into()))
        }
    }
}

/// Piecewise-constant load current `t -> I_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSchedule {
    /// `(time, value)` pairs, strictly increasing in time, first at `t = 0`.
    pub breakpoints: Vec<(f64, f64)>,
}

impl LoadSchedule {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        let s = Self { breakpoints };
        s.check()?;
        Ok(s)
    }

    pub fn constant(value: f64) -> Self {
        Self {
            breakpoints: vec![(0.0, value)],
        }
    }

    /// Starts at `low`, flips to `high` at `first_switch`, and keeps flipping
    /// every `period` seconds until `until`.
    pub fn toggle(low: f64, high: f64, first_switch: f64, period: f64, until: f64) -> Result<Self> {
        if !(period > 0.0) || !(first_switch > 0.0) {
            return Err(Error::Config(
                "toggle period and first switch time must be positive".into(),
            ));
        }
        let mut bps = vec![(0.0, low)];
        let mut t = first_switch;
        let mut hi = true;
        let mut k = 0u32;
        while t <= until {
            bps.push((t, if hi { high } else { low }));
            hi = !hi;
            k += 1;
            t = first_switch + f64::from(k) * period;
        }
        Self::new(bps)
    }

    pub fn check(&self) -> Result<()> {
        match self.breakpoints.first() {
            Some((t0, _)) if *t0 == 0.0 => {}
            _ => return Err(Error::Config("load schedule must start at t = 0".into())),
        }
        if self.breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config(
                "load breakpoints must be strictly increasing".into(),
            ));
        }
        if self
            .breakpoints
            .iter()
            .any(|(t, v)| !t.is_finite() || !v.is_finite())
        {
            return Err(Error::Config("load breakpoints must be finite".into()));
        }
        Ok(())
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|(bt, _)| *bt <= t);
        self.breakpoints[idx.saturating_sub(1)].1
    }
}

/// Model matrices of one DGU for a given set of closed lines.
#[derive(Clone, Debug, PartialEq)]
pub struct DguMatrices<T: Real> {
    pub a_ii: Matrix3<T>,
    pub b: Vector3<T>,
    /// Secondary-input direction, the second column of `M`.
    pub g: Vector3<T>,
    pub m: Matrix3x2<T>,
    pub c: Matrix3<T>,
    /// Coupling matrices `A_ij`, sorted by neighbour index.
    pub a_ij: Vec<(usize, Matrix3<T>)>,
}

impl<T: Real> DguMatrices<T> {
    /// `A_K = A_ii + B K`.
    pub fn closed_loop(&self, k: &RowVector3<T>) -> Matrix3<T> {
        self.a_ii + self.b * k
    }
}

/// Model matrices of `dgu` with every line of the topology closed.
pub fn build_matrices<T: Real>(
    params: &DguParams<T>,
    topology: &MicrogridTopology<T>,
    dgu: usize,
) -> Result<DguMatrices<T>> {
    build_matrices_at(params, topology, dgu, None)
}

/// Model matrices of `dgu` counting only lines closed at time `t`.
pub fn build_matrices_at<T: Real>(
    params: &DguParams<T>,
    topology: &MicrogridTopology<T>,
    dgu: usize,
    t: Option<f64>,
) -> Result<DguMatrices<T>> {
    if dgu >= topology.n_dgus {
        return Err(Error::Config(format!("DGU index {dgu} out of range")));
    }
    params.check()?;
    topology.check()?;

    let (r, l, c) = (params.r_t, params.l_t, params.c_t);
    let one = T::one();
    let zero = T::zero();

    let mut a_ij = Vec::new();
    let mut conductance = zero;
    for (j, r_ij) in topology.neighbors(dgu, t) {
        let g = one / (r_ij * c);
        conductance += g;
        let mut a = Matrix3::zeros();
        a[(0, 0)] = g;
        a_ij.push((j, a));
    }

    #[rustfmt::skip]
    let a_ii = Matrix3::new(
        -conductance, one / c,  zero,
        -one / l,     -r / l,   zero,
        -one,         zero,     zero,
    );
    #[rustfmt::skip]
    let m = Matrix3x2::new(
        -one / c, zero,
        zero,     zero,
        zero,     one,
    );

    Ok(DguMatrices {
        a_ii,
        b: Vector3::new(zero, one / l, zero),
        g: m.column(1).into_owned(),
        m,
        c: Matrix3::identity(),
        a_ij,
    })
}

/// Inputs seen by one DGU during a derivative evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DguInputs<'a, T: Real> {
    /// Primary input (converter voltage command).
    pub u: T,
    pub alpha: T,
    pub load: T,
    pub v_ref: T,
    /// Neighbour states, aligned with `DguMatrices::a_ij`.
    pub neighbors: &'a [Vector3<T>],
}

/// `x' = A_ii x + B u + G alpha + M d + sum_j A_ij x_j + w`.
pub fn dgu_vector_field<T: Real>(
    x: &Vector3<T>,
    inputs: &DguInputs<'_, T>,
    mats: &DguMatrices<T>,
    w: &Vector3<T>,
) -> Vector3<T> {
    debug_assert_eq!(inputs.neighbors.len(), mats.a_ij.len());
    let d = Vector2::new(inputs.load, inputs.v_ref);
    let xi = mats
        .a_ij
        .iter()
        .zip(inputs.neighbors)
        .fold(Vector3::zeros(), |acc, ((_, a), xj)| acc + a * xj);
    mats.a_ii * x + mats.b * inputs.u + mats.g * inputs.alpha + mats.m * d + xi + w
}

/// Draws `(w, rho)`, each component uniform on `[-bound, bound]`.
pub fn sample_noise<T: Real, R: Rng + ?Sized>(
    bounds: &NoiseBounds<T>,
    rng: &mut R,
) -> (Vector3<T>, Vector3<T>) {
    let mut draw = |b: T| {
        let u: f64 = rng.gen();
        b * T::of(2.0 * u - 1.0)
    };
    let w = Vector3::new(
        draw(bounds.w_bar[0]),
        draw(bounds.w_bar[1]),
        draw(bounds.w_bar[2]),
    );
    let rho = Vector3::new(
        draw(bounds.rho_bar[0]),
        draw(bounds.rho_bar[1]),
        draw(bounds.rho_bar[2]),
    );
    (w, rho)
}

/// `y = C x + rho` with `C = I`.
pub fn measure<T: Real>(x: &Vector3<T>, rho: &Vector3<T>) -> Vector3<T> {
    x + rho
}

/// Checks that `A_K` is Hurwitz both for the isolated DGU and with every line
/// of the topology closed.
pub fn check_primary_stability<T: Real>(
    params: &DguParams<T>,
    topology: &MicrogridTopology<T>,
    dgu: usize,
) -> Result<()> {
    let isolated = MicrogridTopology {
        n_dgus: topology.n_dgus,
        lines: Vec::new(),
    };
    for (label, topo) in [("isolated", &isolated), ("connected", topology)] {
        let a_k = build_matrices(params, topo, dgu)?.closed_loop(&params.k);
        let re = stability::max_real_eigenvalue(&a_k);
        if !(re < T::zero()) {
            return Err(Error::Config(format!(
                "closed-loop matrix of DGU {dgu} ({label}) is not Hurwitz: max Re(lambda) = {}",
                re.to_f64_lossy()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(c_t: f64) -> DguParams<f64> {
        DguParams {
            r_t: 0.2,
            l_t: 1.8e-3,
            c_t,
            v_ref: 48.0,
            i_t_s: 5.0,
            k: RowVector3::new(-0.8612, -1.96, 237.6),
        }
    }

    fn line(a: usize, b: usize, r: f64) -> Line<f64> {
        Line {
            a,
            b,
            resistance: r,
            t_on: 0.0,
        }
    }

    #[test]
    fn isolated_dgu_has_no_line_term() {
        let topo = MicrogridTopology::new(1, vec![]).unwrap();
        let m = build_matrices(&params(2.2e-3), &topo, 0).unwrap();
        assert_eq!(m.a_ii[(0, 0)], 0.0);
        assert!(m.a_ij.is_empty());
        assert_eq!(m.c, Matrix3::identity());
        assert_eq!(m.g, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn coupling_matrix_two_dgus() {
        let topo = MicrogridTopology::new(2, vec![line(0, 1, 2.0)]).unwrap();
        let m = build_matrices(&params(1.0), &topo, 0).unwrap();
        let (j, a) = &m.a_ij[0];
        assert_eq!(*j, 1);
        let mut expected = Matrix3::zeros();
        expected[(0, 0)] = 0.5;
        assert_eq!(*a, expected);
    }

    #[test]
    fn line_conductance_sum() {
        let topo = MicrogridTopology::new(3, vec![line(0, 1, 0.05), line(0, 2, 0.05)]).unwrap();
        let m = build_matrices(&params(2.2e-3), &topo, 0).unwrap();
        assert_relative_eq!(m.a_ii[(0, 0)], -18181.818181818184, max_relative = 1e-12);
    }

    #[test]
    fn activation_time_filters_lines() {
        let mut l = line(0, 1, 1.0);
        l.t_on = 1.0;
        let topo = MicrogridTopology::new(2, vec![l]).unwrap();
        let before = build_matrices_at(&params(2.2e-3), &topo, 0, Some(0.5)).unwrap();
        let after = build_matrices_at(&params(2.2e-3), &topo, 0, Some(1.0)).unwrap();
        assert!(before.a_ij.is_empty());
        assert_eq!(after.a_ij.len(), 1);
    }

    #[test]
    fn bad_resistance_is_config_error() {
        let topo = MicrogridTopology {
            n_dgus: 2,
            lines: vec![line(0, 1, 0.0)],
        };
        assert!(matches!(
            build_matrices(&params(1.0), &topo, 0),
            Err(Error::Config(_))
        ));
        assert!(MicrogridTopology::new(2, vec![line(1, 1, 1.0)]).is_err());
    }

    #[test]
    fn zero_everything_gives_zero_derivative() {
        let topo = MicrogridTopology::new(1, vec![]).unwrap();
        let m = build_matrices(&params(2.2e-3), &topo, 0).unwrap();
        let inputs = DguInputs {
            u: 0.0,
            alpha: 0.0,
            load: 0.0,
            v_ref: 0.0,
            neighbors: &[],
        };
        let dx = dgu_vector_field(&Vector3::zeros(), &inputs, &m, &Vector3::zeros());
        assert_eq!(dx, Vector3::zeros());
    }

    #[test]
    fn isolated_equilibrium_is_stationary() {
        // Steady state solved from A_K x + M d + G alpha = 0 by hand:
        // V = V_ref + alpha, I_t = I_L, k3 v = (1 - k1) V + (R_t - k2) I_t.
        let p = params(2.2e-3);
        let topo = MicrogridTopology::new(1, vec![]).unwrap();
        let m = build_matrices(&p, &topo, 0).unwrap();
        let (alpha, load) = (0.3, 6.0);
        let v = p.v_ref + alpha;
        let i = load;
        let integ = ((1.0 - p.k[0]) * v + (p.r_t - p.k[1]) * i) / p.k[2];
        let x = Vector3::new(v, i, integ);
        let inputs = DguInputs {
            u: (p.k * x)[0],
            alpha,
            load,
            v_ref: p.v_ref,
            neighbors: &[],
        };
        let dx = dgu_vector_field(&x, &inputs, &m, &Vector3::zeros());
        assert!(dx.norm() < 1e-9, "{dx}");
    }

    #[test]
    fn neighbour_voltage_drives_line_current() {
        let p = params(2.2e-3);
        let topo = MicrogridTopology::new(2, vec![line(0, 1, 1.5)]).unwrap();
        let m = build_matrices(&p, &topo, 0).unwrap();
        let x = Vector3::new(48.0, 0.0, 0.0);
        let xj = [Vector3::new(49.0, 0.0, 0.0)];
        let inputs = DguInputs {
            u: 0.0,
            alpha: 0.0,
            load: 0.0,
            v_ref: 0.0,
            neighbors: &xj,
        };
        let dx = dgu_vector_field(&x, &inputs, &m, &Vector3::zeros());
        assert_relative_eq!(dx[0], (49.0 - 48.0) / (1.5 * 2.2e-3), max_relative = 1e-12);
    }

    #[test]
    fn noise_zero_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (w, rho) = sample_noise(&NoiseBounds::<f64>::zero(), &mut rng);
        assert_eq!(w, Vector3::zeros());
        assert_eq!(rho, Vector3::zeros());

        let b = NoiseBounds {
            w_bar: Vector3::repeat(0.1),
            rho_bar: Vector3::repeat(0.01),
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            assert_eq!(sample_noise(&b, &mut r1), sample_noise(&b, &mut r2));
        }
    }

    #[test]
    fn noise_within_bounds_and_centered() {
        let b = NoiseBounds::<f64> {
            w_bar: Vector3::repeat(0.1),
            rho_bar: Vector3::repeat(0.01),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mut sum_w = Vector3::<f64>::zeros();
        let mut sum_r = Vector3::<f64>::zeros();
        for _ in 0..n {
            let (w, rho) = sample_noise(&b, &mut rng);
            for k in 0..3 {
                assert!(w[k].abs() <= 0.1 && rho[k].abs() <= 0.01);
            }
            sum_w += w;
            sum_r += rho;
        }
        // Uniform on [-b, b]: sigma of the mean is b / sqrt(3 n).
        let nf = n as f64;
        for k in 0..3 {
            assert!((sum_w[k] / nf).abs() < 3.0 * 0.1 / (3.0 * nf).sqrt());
            assert!((sum_r[k] / nf).abs() < 3.0 * 0.01 / (3.0 * nf).sqrt());
        }
    }

    #[test]
    fn measurement_is_state_plus_noise() {
        let x = Vector3::new(48.0, 5.0, 0.1);
        let rho = Vector3::new(0.01, -0.005, 0.0);
        assert_eq!(measure(&x, &Vector3::zeros()), x);
        assert_eq!(measure(&Vector3::zeros(), &rho), rho);
    }

    #[test]
    fn load_schedule_lookup_and_toggle() {
        let s = LoadSchedule::toggle(6.0, 6.2, 2.0, 3.6, 12.0).unwrap();
        assert_eq!(s.value_at(0.0), 6.0);
        assert_eq!(s.value_at(1.99), 6.0);
        assert_eq!(s.value_at(2.0), 6.2);
        assert_eq!(s.value_at(5.6), 6.0);
        assert_eq!(s.value_at(9.3), 6.2);
        assert!(LoadSchedule::new(vec![(0.5, 1.0)]).is_err());
        assert!(LoadSchedule::new(vec![(0.0, 1.0), (0.0, 2.0)]).is_err());
    }

    #[test]
    fn unstable_gains_rejected() {
        let mut p = params(2.2e-3);
        let topo = MicrogridTopology::new(1, vec![]).unwrap();
        assert!(check_primary_stability(&p, &topo, 0).is_ok());
        p.k[2] = -1.0;
        assert!(check_primary_stability(&p, &topo, 0).is_err());
    }
}
