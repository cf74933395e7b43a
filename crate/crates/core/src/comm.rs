//! Point-to-point links between neighbouring DGUs: sawtooth watermark
//! encoding/decoding and a man-in-the-middle replay attacker.
//!
//! Links are ideal, so sender and receiver evaluate the watermark on the same
//! clock. The attacker sits on the wire and records *watermarked* frames; after
//! decoding, a replayed frame carries the offset
//! `delta(t) = Delta(t - nT) - Delta(t)`, which is what the detectors see.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::num::Real;

/// Sawtooth watermark of one link: slope `c`, period `2 * t_bar`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WatermarkConfig<T: Real> {
    pub c: T,
    /// Upper bound on the attacker's replay period.
    pub t_bar: T,
}

impl<T: Real> WatermarkConfig<T> {
    pub fn new(c: T, t_bar: T) -> Result<Self> {
        if !(c >= T::zero() && c.is_finite()) {
            return Err(Error::Config(
                "watermark slope must be finite and >= 0".into(),
            ));
        }
        if !(t_bar > T::zero() && t_bar.is_finite()) {
            return Err(Error::Config("watermark T_bar must be positive".into()));
        }
        Ok(Self { c, t_bar })
    }

    pub fn disabled(t_bar: T) -> Self {
        Self {
            c: T::zero(),
            t_bar,
        }
    }

    /// Largest value the sawtooth reaches, `2 c T_bar` (not attained).
    pub fn amplitude(&self) -> T {
        T::of(2.0) * self.c * self.t_bar
    }

    pub fn fundamental_hz(&self) -> T {
        T::one() / (T::of(2.0) * self.t_bar)
    }
}

/// A frame on the wire.
///
/// Besides the sample at `t`, a frame carries the signal over the step that
/// ends at `t`, at the integrator's stage points, so the receiver can
/// integrate its observer on the same scheme as the plant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkFrame<T: Real> {
    /// Send time of the sample (s).
    pub t: f64,
    pub payload: Vector3<T>,
    pub segment: Option<[Vector3<T>; 4]>,
}

// Grid times carry float error of a few ulps; snap to the wrap point so that
// sender, receiver and attacker agree on which side of a wrap a time lies.
const WRAP_SNAP: f64 = 1e-9;

fn sawtooth<T: Real>(t: f64, wm: &WatermarkConfig<T>) -> T {
    let period = 2.0 * wm.t_bar.to_f64_lossy();
    let nu = (t / period + WRAP_SNAP).floor();
    (wm.c * T::of(t - nu * period)).max(T::zero())
}

/// Left limit of the sawtooth: at a wrap point this is the peak, not zero.
fn sawtooth_left<T: Real>(t: f64, wm: &WatermarkConfig<T>) -> T {
    let period = 2.0 * wm.t_bar.to_f64_lossy();
    let nu = (t / period - WRAP_SNAP).ceil() - 1.0;
    (wm.c * T::of(t - nu * period)).max(T::zero())
}

/// `Delta(t) = c (t - 2 nu T_bar)` on every component, `nu = floor(t / 2 T_bar)`.
pub fn watermark_value<T: Real>(t: f64, wm: &WatermarkConfig<T>) -> Vector3<T> {
    Vector3::repeat(sawtooth(t, wm))
}

/// Watermark at the four RK4 stage points of the step `[t_end - dt, t_end)`:
/// start, midpoint twice, and the left limit at `t_end`.
pub fn segment_watermark<T: Real>(t_end: f64, dt: f64, wm: &WatermarkConfig<T>) -> [Vector3<T>; 4] {
    let mid = Vector3::repeat(sawtooth(t_end - 0.5 * dt, wm));
    [
        watermark_value(t_end - dt, wm),
        mid,
        mid,
        Vector3::repeat(sawtooth_left(t_end, wm)),
    ]
}

pub fn encode<T: Real>(y: &Vector3<T>, t: f64, wm: &WatermarkConfig<T>) -> LinkFrame<T> {
    LinkFrame {
        t,
        payload: y + watermark_value(t, wm),
        segment: None,
    }
}

/// Encodes the sample at `t` together with the signal over the preceding
/// step, given at its RK4 stage points.
pub fn encode_frame<T: Real>(
    y: &Vector3<T>,
    segment: Option<&[Vector3<T>; 4]>,
    t: f64,
    dt: f64,
    wm: &WatermarkConfig<T>,
) -> LinkFrame<T> {
    let mut frame = encode(y, t, wm);
    frame.segment = segment.map(|seg| {
        let marks = segment_watermark(t, dt, wm);
        [0, 1, 2, 3].map(|s| seg[s] + marks[s])
    });
    frame
}

/// Subtracts the watermark expected at reception time `t`.
pub fn decode<T: Real>(frame: &LinkFrame<T>, t: f64, wm: &WatermarkConfig<T>) -> Vector3<T> {
    frame.payload - watermark_value(t, wm)
}

/// Decoded segment of a frame received at `t`.
pub fn decode_segment<T: Real>(
    frame: &LinkFrame<T>,
    t: f64,
    dt: f64,
    wm: &WatermarkConfig<T>,
) -> Option<[Vector3<T>; 4]> {
    frame.segment.map(|seg| {
        let marks = segment_watermark(t, dt, wm);
        [0, 1, 2, 3].map(|s| seg[s] - marks[s])
    })
}

/// `delta(t) = Delta(t - nT) - Delta(t)`.
pub fn delta_offset<T: Real>(t: f64, n: u32, period: f64, wm: &WatermarkConfig<T>) -> Vector3<T> {
    watermark_value(t - f64::from(n) * period, wm) - watermark_value(t, wm)
}

/// Replay attack on the directed link `from -> to` (0-based DGU indices).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplayAttackConfig {
    pub from: usize,
    pub to: usize,
    /// Recording starts (s).
    pub t_record: f64,
    /// Replay starts (s).
    pub t_attack: f64,
    /// Replay period `T` (s).
    pub period: f64,
}

impl ReplayAttackConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.t_record < self.t_attack) {
            return Err(Error::Config(
                "attack must start after recording starts".into(),
            ));
        }
        if !(self.period > 0.0 && self.period <= self.t_attack - self.t_record + 1e-12) {
            return Err(Error::Config(
                "replay period must satisfy 0 < T <= t_attack - t_record".into(),
            ));
        }
        Ok(())
    }

    /// Replay multiplicity `n = floor((t - Ta) / T) + 1` for `t >= Ta`.
    pub fn replay_index(&self, t: f64) -> Option<u32> {
        (t >= self.t_attack).then(|| ((t - self.t_attack) / self.period).floor() as u32 + 1)
    }

    /// Send time of the frame replayed at `t`, `t - nT`.
    pub fn source_time(&self, t: f64) -> Option<f64> {
        self.replay_index(t).map(|n| t - f64::from(n) * self.period)
    }
}

/// Stateful attacker on one link, driven on the simulation step grid.
///
/// All timing is done in whole steps so that the replayed frame is always one
/// that was actually recorded.
#[derive(Clone, Debug)]
pub struct ReplayAttacker<T: Real> {
    cfg: ReplayAttackConfig,
    record_step: usize,
    attack_step: usize,
    period_steps: usize,
    buffer: Vec<LinkFrame<T>>,
}

impl<T: Real> ReplayAttacker<T> {
    pub fn new(cfg: ReplayAttackConfig, dt: f64) -> Result<Self> {
        cfg.check()?;
        let steps = |t: f64| -> Result<usize> {
            let s = t / dt;
            let r = s.round();
            if (s - r).abs() > 1e-6 * r.max(1.0) || r < 0.0 {
                return Err(Error::Config(format!(
                    "attack time {t} s is not a multiple of dt = {dt} s"
                )));
            }
            Ok(r as usize)
        };
        let record_step = steps(cfg.t_record)?;
        let attack_step = steps(cfg.t_attack)?;
        let period_steps = steps(cfg.period)?;
        if period_steps == 0 || period_steps > attack_step - record_step {
            return Err(Error::Config(
                "replay window does not fit in the recording".into(),
            ));
        }
        Ok(Self {
            cfg,
            record_step,
            attack_step,
            period_steps,
            buffer: Vec::with_capacity(attack_step - record_step + 1),
        })
    }

    pub fn config(&self) -> &ReplayAttackConfig {
        &self.cfg
    }

    pub fn attack_step(&self) -> usize {
        self.attack_step
    }

    pub fn period_steps(&self) -> usize {
        self.period_steps
    }

    pub fn is_active(&self, step: usize) -> bool {
        step >= self.attack_step
    }

    fn replay_source(&self, step: usize) -> usize {
        let n = (step - self.attack_step) / self.period_steps + 1;
        step - n * self.period_steps
    }

    fn recorded(&self, step: usize) -> Result<&LinkFrame<T>> {
        step.checked_sub(self.record_step)
            .and_then(|i| self.buffer.get(i))
            .ok_or_else(|| Error::Simulation(format!("replay buffer has no frame for step {step}")))
    }

    /// Segment that the frame of grid step `step` will carry in place of the
    /// genuine one, or `None` if that frame's segment is passed through.
    /// Valid once every frame before `step` has been offered.
    pub fn forged_segment(&self, step: usize) -> Result<Option<[Vector3<T>; 4]>> {
        if step <= self.attack_step {
            return Ok(None);
        }
        Ok(self.recorded(self.replay_source(step - 1) + 1)?.segment)
    }

    /// Passes `frame` (sent at grid step `step`) through the attacker. Frames
    /// must be offered once per step, in order.
    ///
    /// From `Ta` on, the sample at step `k` is the one recorded at
    /// `k - n(k) T`; the segment covering `[t_{k-1}, t_k)` is replayed with the
    /// multiplicity of its left end, so the receiver sees exactly the
    /// recorded signal shifted by `n T`.
    pub fn transform(&mut self, step: usize, frame: LinkFrame<T>) -> Result<LinkFrame<T>> {
        if step <= self.attack_step && step >= self.record_step {
            self.buffer.push(frame);
        }
        if step < self.attack_step {
            return Ok(frame);
        }
        let sample = *self.recorded(self.replay_source(step))?;
        let segment = match self.forged_segment(step)? {
            Some(seg) => Some(seg),
            None => frame.segment,
        };
        Ok(LinkFrame { segment, ..sample })
    }
}

/// Piecewise-constant vector signal on `[breaks[0], breaks[last])`; segment `k`
/// is `[breaks[k], breaks[k + 1])` with value `values[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstant<T: Real> {
    pub breaks: Vec<f64>,
    pub values: Vec<Vector3<T>>,
}

impl<T: Real> PiecewiseConstant<T> {
    pub fn value_at(&self, t: f64) -> Vector3<T> {
        if self.values.is_empty() || t < self.breaks[0] {
            return Vector3::zeros();
        }
        let idx = self.breaks.partition_point(|b| *b <= t).saturating_sub(1);
        self.values[idx.min(self.values.len() - 1)]
    }

    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, Vector3<T>)> + '_ {
        self.breaks
            .windows(2)
            .zip(&self.values)
            .map(|(w, v)| (w[0], w[1], *v))
    }

    pub fn is_identically_zero(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.iter().all(|x| *x == T::zero()))
    }
}

/// The offset `delta` seen after decoding a replayed frame, for
/// `t in [t_attack, t_end]`.
///
/// Both sawtooth ramps rise at the same slope, so `delta` only changes where
/// `n` changes or either ramp wraps.
pub fn delta_profile<T: Real>(
    attack: &ReplayAttackConfig,
    wm: &WatermarkConfig<T>,
    t_end: f64,
) -> PiecewiseConstant<T> {
    let ta = attack.t_attack;
    if !(t_end > ta) {
        return PiecewiseConstant {
            breaks: Vec::new(),
            values: Vec::new(),
        };
    }
    let wrap = 2.0 * wm.t_bar.to_f64_lossy();
    let n_max = attack.replay_index(t_end).unwrap_or(1);

    let mut cuts = vec![ta, t_end];
    let mut m = 1u32;
    while ta + f64::from(m) * attack.period < t_end {
        cuts.push(ta + f64::from(m) * attack.period);
        m += 1;
    }
    for n in 0..=n_max {
        let shift = f64::from(n) * attack.period;
        let mut q = ((ta - shift) / wrap).floor().max(0.0);
        loop {
            let c = q * wrap + shift;
            if c >= t_end {
                break;
            }
            if c > ta {
                cuts.push(c);
            }
            q += 1.0;
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let values = cuts
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let n = attack.replay_index(mid).unwrap_or(1);
            delta_offset(mid, n, attack.period, wm)
        })
        .collect();
    PiecewiseConstant {
        breaks: cuts,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn wm(c: f64) -> WatermarkConfig<f64> {
        WatermarkConfig::new(c, 1.8).unwrap()
    }

    fn attack() -> ReplayAttackConfig {
        ReplayAttackConfig {
            from: 1,
            to: 3,
            t_record: 7.4,
            t_attack: 9.2,
            period: 1.8,
        }
    }

    #[test]
    fn sawtooth_values() {
        let w = wm(10f64.powf(-3.2));
        assert_eq!(watermark_value(0.0, &w), Vector3::zeros());
        assert_eq!(watermark_value(3.6, &w), Vector3::zeros());
        assert_relative_eq!(
            watermark_value(1.8, &w)[0],
            1.8 * 10f64.powf(-3.2),
            max_relative = 1e-12
        );
        assert_relative_eq!(watermark_value(1.8, &w)[0], 1.1358e-3, max_relative = 1e-4);
    }

    #[test]
    fn zero_slope_is_transparent() {
        let y = Vector3::new(48.0, 5.0, 0.4);
        assert_eq!(encode(&y, 2.3, &wm(0.0)).payload, y);
    }

    #[test]
    fn attacker_passthrough_before_attack() {
        let mut a = ReplayAttacker::<f64>::new(attack(), 0.1).unwrap();
        for k in 0..92 {
            let f = LinkFrame {
                t: k as f64 * 0.1,
                payload: Vector3::repeat(k as f64),
                segment: None,
            };
            assert_eq!(a.transform(k, f).unwrap(), f);
        }
    }

    #[test]
    fn attacker_replays_recorded_frames() {
        let dt = 0.1;
        let mut a = ReplayAttacker::<f64>::new(attack(), dt).unwrap();
        let mut out = Vec::new();
        for k in 0..=130 {
            let f = LinkFrame {
                t: k as f64 * dt,
                payload: Vector3::repeat(k as f64),
                segment: None,
            };
            out.push(a.transform(k, f).unwrap());
        }
        // t = 9.3 replays the frame sent at 7.5.
        assert!((out[93].t - 7.5).abs() < 1e-9);
        // t = Ta + T + 0.1 = 11.1 -> n = 2 -> frame from 7.5.
        assert!((out[111].t - 7.5).abs() < 1e-9);
        assert_eq!(attack().replay_index(11.1), Some(2));
        assert!((attack().source_time(9.3).unwrap() - 7.5).abs() < 1e-12);
        for (k, f) in out.iter().enumerate() {
            assert!(
                f.t <= k as f64 * dt + 1e-12,
                "frame consumed before it was sent"
            );
            assert!(f.t >= 7.4 - 1e-9 || k < 92);
        }
    }

    #[test]
    fn segment_roundtrip() {
        let w = wm(10f64.powf(-3.3));
        let seg = [0.0, 1.0, 2.0, 3.0].map(|s| Vector3::new(48.0 + s, 5.0, s));
        let f = encode_frame(&seg[3], Some(&seg), 2.5, 1e-4, &w);
        let back = decode_segment(&f, 2.5, 1e-4, &w).unwrap();
        for s in 0..4 {
            assert_relative_eq!(back[s], seg[s], epsilon = 1e-12);
        }
        assert!(decode_segment(&encode(&seg[0], 2.5, &w), 2.5, 1e-4, &w).is_none());
    }

    #[test]
    fn segment_ends_on_left_limit_at_wrap() {
        let c = 1e-3;
        let w = wm(c);
        let marks = segment_watermark(3.6, 1e-4, &w);
        assert_relative_eq!(marks[3][0], 3.6 * c, max_relative = 1e-9);
        assert_relative_eq!(marks[0][0], (3.6 - 1e-4) * c, max_relative = 1e-9);
        assert_eq!(watermark_value(3.6, &w)[0], 0.0);
        // Away from a wrap the left limit is the value itself.
        let m = segment_watermark(1.0, 1e-4, &w);
        assert_relative_eq!(m[3][0], watermark_value(1.0, &w)[0], epsilon = 1e-15);
    }

    #[test]
    fn replayed_segments_follow_replayed_samples() {
        let dt = 0.1;
        let mut a = ReplayAttacker::<f64>::new(attack(), dt).unwrap();
        let mut out = Vec::new();
        for k in 0..=130 {
            let v = k as f64;
            let f = LinkFrame {
                t: v * dt,
                payload: Vector3::repeat(v),
                segment: Some([v - 1.0, v - 0.5, v - 0.5, v].map(Vector3::repeat)),
            };
            out.push(a.transform(k, f).unwrap());
        }
        // The first forged frame keeps the genuine segment. After that each
        // segment bridges consecutive replayed samples.
        assert_eq!(out[92].segment.unwrap()[0][0], 91.0);
        for k in 93..=130 {
            let seg = out[k].segment.unwrap();
            assert_eq!(seg[0][0], out[k - 1].payload[0], "step {k}");
            assert_eq!(seg[3][0] - seg[0][0], 1.0);
        }
    }

    #[test]
    fn attack_config_invariants() {
        let mut c = attack();
        c.period = 2.0;
        assert!(c.check().is_err());
        c.period = 1.8;
        c.t_record = 9.5;
        assert!(c.check().is_err());
        assert!(ReplayAttacker::<f64>::new(attack(), 0.07).is_err());
    }

    #[test]
    fn delta_special_cases() {
        let w = wm(1e-3);
        assert_eq!(delta_offset(5.0, 1, 0.0, &w), Vector3::zeros());
        assert!(delta_offset(5.0, 2, 1.8, &w).norm() < 1e-15);
        assert!(delta_offset(5.0, 1, 3.6, &w).norm() < 1e-15);
    }

    #[test]
    fn delta_square_wave_for_full_bound_period() {
        // n = 1, T = T_bar: |delta| = c T_bar, sign flips every T_bar.
        let c = 1e-3;
        let w = wm(c);
        let mut prev_sign = 0.0;
        let mut flips = 0;
        for k in 0..720 {
            let t = 1.8 + 0.005 * k as f64 + 0.0025;
            let d = delta_offset(t, 1, 1.8, &w)[0];
            assert_relative_eq!(d.abs(), c * 1.8, max_relative = 1e-9);
            if prev_sign != 0.0 && d.signum() != prev_sign {
                flips += 1;
            }
            prev_sign = d.signum();
        }
        assert_eq!(flips, 1);
    }

    #[test]
    fn profile_matches_pointwise_delta() {
        let w = wm(10f64.powf(-3.3));
        let atk = attack();
        let p = delta_profile(&atk, &w, 14.0);
        for k in 0..4800 {
            let t = 9.2 + k as f64 * 1e-3 + 3.7e-4;
            let n = atk.replay_index(t).unwrap();
            let direct = delta_offset(t, n, atk.period, &w);
            assert!((p.value_at(t) - direct).norm() < 1e-12, "t = {t}");
        }
        // First period nonzero, second (nT = 2 T_bar) vanishes.
        assert!(p.value_at(9.5).norm() > 0.0);
        assert!(p.value_at(11.5).norm() < 1e-15);
    }

    #[test]
    fn delta_never_identically_zero_in_first_wrap() {
        let w = wm(1e-3);
        for period in [0.1, 0.45, 0.9, 1.3, 1.8] {
            let atk = ReplayAttackConfig {
                from: 0,
                to: 1,
                t_record: 3.0,
                t_attack: 5.0,
                period,
            };
            let p = delta_profile(&atk, &w, 5.0 + 3.6);
            assert!(!p.is_identically_zero(), "T = {period}");
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            y in proptest::array::uniform3(-100.0f64..100.0),
            t in 0.0f64..50.0,
            c_exp in -6.0f64..-1.0,
        ) {
            let w = wm(10f64.powf(c_exp));
            let y = Vector3::from(y);
            let back = decode(&encode(&y, t, &w), t, &w);
            for k in 0..3 {
                prop_assert!((back[k] - y[k]).abs() <= 4.0 * f64::EPSILON * y[k].abs().max(1.0));
            }
        }

        #[test]
        fn watermark_in_range(t in 0.0f64..100.0, c_exp in -6.0f64..0.0) {
            let w = wm(10f64.powf(c_exp));
            let d = watermark_value(t, &w)[0];
            prop_assert!(d >= 0.0 && d <= w.amplitude());
            let payload = encode(&Vector3::repeat(1.0), t, &w).payload;
            prop_assert!((payload[0] - 1.0) <= w.amplitude() + 1e-15);
        }
    }
}
