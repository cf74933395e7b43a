//! Fixed-step closed-loop simulation of plant, controllers, links, attackers
//! and detectors.
//!
//! Every step at `t_k = k dt` runs, in order:
//!
//! 1. draw process and measurement noise, held over the step;
//! 2. measure `y = x + rho`;
//! 3. encode, pass through the attacker (if any), and decode every active
//!    frame;
//! 4. advance every active observer with its decoded input;
//! 5. compute `u = K y` and the consensus rate from decoded data;
//! 6. integrate the plant and `alpha` with one RK4 step;
//! 7. append the step to the traces.
//!
//! Loads and breaker states are evaluated at the step midpoint and held over
//! the step. A link carries frames from the first grid step at or after its
//! `t_on`.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{
    decode, decode_segment, encode_frame, segment_watermark, watermark_value, LinkFrame,
    ReplayAttacker,
};
use crate::control::{consensus_rate, primary_input, NeighborReport};
use crate::error::{Error, Result};
use crate::grid::{
    build_matrices, build_matrices_at, dgu_vector_field, measure, sample_noise, DguInputs,
    DguMatrices, DguState,
};
use crate::num::Real;
use crate::scenario::{Model, Scenario};
use crate::uio::{
    build_unknown_input_matrix, guaranteed_detection_time, stealth_check, synthesize_uio, Detector,
    ResidualRecord, ThresholdModel,
};

/// Switches that are not part of the scenario itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    /// When false, `w` and `rho` are identically zero. Detector thresholds
    /// still use the scenario's bounds.
    pub noise: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { noise: true }
    }
}

/// Row-major table of `f64` samples on the shared time grid, starting at grid
/// step `start_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub start_step: usize,
    pub data: Vec<f64>,
}

impl Table {
    pub fn new(columns: Vec<String>, start_step: usize) -> Self {
        Self {
            columns,
            start_step,
            data: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn n_rows(&self) -> usize {
        if self.columns.is_empty() {
            0
        } else {
            self.data.len() / self.columns.len()
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.width());
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, idx: usize) -> impl Iterator<Item = f64> + '_ {
        self.data
            .iter()
            .skip(idx)
            .step_by(self.width().max(1))
            .copied()
    }

    /// Value at absolute grid step `step`, if recorded.
    pub fn at_step(&self, step: usize, col: usize) -> Option<f64> {
        let i = step.checked_sub(self.start_step)?;
        (i < self.n_rows()).then(|| self.row(i)[col])
    }
}

/// Entry of the chronological event log. DGUs are named by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    LineClosed {
        t: f64,
        a: u32,
        b: u32,
    },
    LoadStep {
        t: f64,
        dgu: u32,
        value: f64,
    },
    RecordingStart {
        t: f64,
        from: u32,
        to: u32,
    },
    AttackStart {
        t: f64,
        from: u32,
        to: u32,
    },
    Alarm {
        t: f64,
        from: u32,
        to: u32,
        component: usize,
    },
}

impl Event {
    pub fn t(&self) -> f64 {
        match self {
            Event::LineClosed { t, .. }
            | Event::LoadStep { t, .. }
            | Event::RecordingStart { t, .. }
            | Event::AttackStart { t, .. }
            | Event::Alarm { t, .. } => *t,
        }
    }
}

/// Frames and observer output of the directed link `from -> to`, observed by
/// `to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkTrace {
    pub from: u32,
    pub to: u32,
    pub attacked: bool,
    /// `received_*` (on the wire) and `decoded_*` columns.
    pub frames: Table,
    /// `r0..r2`, `r_bar0..r_bar2`, `alarm` (0/1, latched).
    pub residuals: Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkAlarm {
    pub from: u32,
    pub to: u32,
    pub t: f64,
    pub component: usize,
}

/// Predictions for one attack next to what the run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOracle {
    pub from: u32,
    pub to: u32,
    pub t_attack: f64,
    pub period: f64,
    /// Watermark slope of the attacked link.
    pub slope: f64,
    /// `x_from(Ta - T) - x_hat(Ta)`; absent if the horizon ends before `Ta`.
    pub e_a: Option<[f64; 3]>,
    pub e_bar_at_attack: Option<[f64; 3]>,
    pub stealthy: Option<bool>,
    /// Time by which an alarm is guaranteed, if any on the horizon.
    pub guaranteed_detection_time: Option<f64>,
    pub alarm_time: Option<f64>,
    /// `alarm_time - t_attack`.
    pub latency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub steps: usize,
    pub alarms: Vec<LinkAlarm>,
    /// `max - min` of `I_t / I_t^s` over DGUs at the last step.
    pub final_ratio_spread: Option<f64>,
    /// `[V, I_t, v, alpha]` per DGU at the last step.
    pub final_states: Vec<[f64; 4]>,
    pub attacks: Vec<AttackOracle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub scenario: Scenario,
    pub ids: Vec<u32>,
    pub dt: f64,
    pub times: Vec<f64>,
    /// `V_<id>, I_t_<id>, v_<id>, alpha_<id>`.
    pub states: Table,
    /// Measured outputs `y = x + rho`.
    pub outputs: Table,
    /// Communicated outputs `y + Delta` as sent by each DGU.
    pub sent: Table,
    pub links: Vec<LinkTrace>,
    pub events: Vec<Event>,
    pub summary: RunSummary,
}

impl RunArtifact {
    pub fn link(&self, from: u32, to: u32) -> Option<&LinkTrace> {
        self.links.iter().find(|l| l.from == from && l.to == to)
    }

    pub fn dgu_index(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|i| *i == id)
    }
}

/// What one link produced at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkSample<T: Real> {
    pub received: LinkFrame<T>,
    pub decoded: Vector3<T>,
    pub residual: ResidualRecord<T>,
}

/// Everything observed at grid step `step`, before integrating over it.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord<T: Real> {
    pub step: usize,
    pub t: f64,
    pub states: Vec<DguState<T>>,
    pub outputs: Vec<Vector3<T>>,
    pub sent: Vec<Vector3<T>>,
    /// Aligned with [`World::links`]; `None` while the link is down.
    pub links: Vec<Option<LinkSample<T>>>,
    pub alpha_dot: Vec<T>,
}

/// Runtime of one directed link.
#[derive(Clone, Debug)]
pub struct LinkRuntime<T: Real> {
    pub from: usize,
    pub to: usize,
    /// First grid step carrying frames.
    pub active_step: usize,
    pub attacker: Option<ReplayAttacker<T>>,
    /// Observer run by `to` on `from`.
    pub detector: Detector<T>,
}

struct Pending<T: Real> {
    w: Vec<Vector3<T>>,
    rho: Vec<Vector3<T>>,
}

/// Where DGU `to` takes a neighbour's current from while integrating a step.
struct ConsensusSource<T: Real> {
    from: usize,
    rating: T,
    frozen: bool,
    forged: Option<[Vector3<T>; 4]>,
}

/// Simulation state between steps.
pub struct World<T: Real> {
    model: Model<T>,
    step: usize,
    states: Vec<DguState<T>>,
    mats: Vec<DguMatrices<T>>,
    line_mask: Vec<bool>,
    links: Vec<LinkRuntime<T>>,
    rng: ChaCha8Rng,
    noise: bool,
    pending: Option<Pending<T>>,
    /// Measured signal of every DGU over the last integrated step, at the RK4
    /// stage points.
    segments: Option<Vec<[Vector3<T>; 4]>>,
    alarms: Vec<LinkAlarm>,
}

fn first_step_at_or_after(t: f64, dt: f64) -> usize {
    let s = t / dt;
    let r = s.round();
    if (s - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        s.ceil() as usize
    }
}

impl<T: Real> World<T> {
    pub fn new(model: Model<T>, opts: &RunOptions) -> Result<Self> {
        let n = model.params.len();
        let dt = model.dt;

        // Start every DGU at its isolated, noise-free equilibrium.
        let mut mats = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n);
        for i in 0..n {
            let m = build_matrices_at(&model.params[i], &model.topology, i, Some(0.5 * dt))?;
            let a_k = m.closed_loop(&model.params[i].k);
            let d =
                nalgebra::Vector2::new(T::of(model.loads[i].value_at(0.0)), model.params[i].v_ref);
            let rhs = -(m.m * d);
            let x = a_k.lu().solve(&rhs).ok_or_else(|| {
                Error::Config(format!("closed loop of DGU {} is singular", model.ids[i]))
            })?;
            states.push(DguState::with_x(x, T::zero()));
            mats.push(m);
        }
        let line_mask = model
            .topology
            .lines
            .iter()
            .map(|l| l.t_on <= 0.5 * dt)
            .collect();

        let mut links = Vec::new();
        for to in 0..n {
            for (from, _) in model.topology.neighbors(to, None) {
                let line = model.topology.line(from, to).expect("neighbour has a line");
                let observed = build_matrices(&model.params[from], &model.topology, from)?;
                let a_k = observed.closed_loop(&model.params[from].k);
                let e_bar = build_unknown_input_matrix(&observed);
                let uio = synthesize_uio(&a_k, &e_bar, model.lambdas[to])?;
                let b_k: Matrix3<T> = observed.b * model.params[from].k;
                let threshold = ThresholdModel::new(&uio, &b_k, &model.noise);
                let attacker = model
                    .attacks
                    .iter()
                    .find(|a| a.from == from && a.to == to)
                    .map(|a| ReplayAttacker::new(*a, dt))
                    .transpose()?;
                links.push(LinkRuntime {
                    from,
                    to,
                    active_step: first_step_at_or_after(line.t_on, dt),
                    attacker,
                    detector: Detector::new(to, from, uio, threshold),
                });
            }
        }
        links.sort_by_key(|l| (l.from, l.to));

        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        Ok(Self {
            model,
            step: 0,
            states,
            mats,
            line_mask,
            links,
            rng,
            noise: opts.noise,
            pending: None,
            segments: None,
            alarms: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.model.dt
    }

    pub fn states(&self) -> &[DguState<T>] {
        &self.states
    }

    pub fn links(&self) -> &[LinkRuntime<T>] {
        &self.links
    }

    pub fn alarms(&self) -> &[LinkAlarm] {
        &self.alarms
    }

    /// Steps 1 to 5 at the current grid time. Must be followed by
    /// [`World::advance`] to move on.
    pub fn exchange(&mut self) -> Result<StepRecord<T>> {
        let n = self.states.len();
        let k = self.step;
        let t = self.time();
        let dt = self.model.dt;

        let mut w = Vec::with_capacity(n);
        let mut rho = Vec::with_capacity(n);
        for _ in 0..n {
            let (wi, ri) = if self.noise {
                sample_noise(&self.model.noise, &mut self.rng)
            } else {
                (Vector3::zeros(), Vector3::zeros())
            };
            w.push(wi);
            rho.push(ri);
        }

        let outputs: Vec<Vector3<T>> = self
            .states
            .iter()
            .zip(&rho)
            .map(|(s, r)| measure(&s.x(), r))
            .collect();
        let sent: Vec<Vector3<T>> = outputs
            .iter()
            .zip(&self.model.watermarks)
            .map(|(y, wm)| y + watermark_value(t, wm))
            .collect();

        let mut samples = Vec::with_capacity(self.links.len());
        for link in &mut self.links {
            if k < link.active_step {
                samples.push(None);
                continue;
            }
            let wm = &self.model.watermarks[link.from];
            let segment = self.segments.as_ref().map(|s| &s[link.from]);
            let mut frame = encode_frame(&outputs[link.from], segment, t, dt, wm);
            if let Some(att) = link.attacker.as_mut() {
                frame = att.transform(k, frame)?;
            }
            if frame.t > t {
                return Err(Error::Simulation(format!(
                    "frame sent at {} s consumed at {t} s",
                    frame.t
                )));
            }
            let decoded = decode(&frame, t, wm);
            let decoded_segment = decode_segment(&frame, t, dt, wm);
            let had_alarm = link.detector.state.alarm.is_some();
            let residual = link
                .detector
                .step(&decoded, decoded_segment.as_ref(), t, dt);
            if let (false, Some(a)) = (had_alarm, link.detector.state.alarm) {
                self.alarms.push(LinkAlarm {
                    from: self.model.ids[link.from],
                    to: self.model.ids[link.to],
                    t: a.t,
                    component: a.component,
                });
            }
            samples.push(Some(LinkSample {
                received: frame,
                decoded,
                residual,
            }));
        }

        let mut alpha_dot = Vec::with_capacity(n);
        for (j, own) in outputs.iter().enumerate() {
            let reports: Vec<NeighborReport<T>> = self
                .links
                .iter()
                .zip(&samples)
                .filter(|(l, s)| l.to == j && s.is_some())
                .map(|(l, s)| NeighborReport {
                    y: s.map(|s| s.decoded),
                    rating: self.model.params[l.from].i_t_s,
                    frozen: l.detector.state.alarm.is_some(),
                })
                .collect();
            alpha_dot.push(consensus_rate(
                own,
                self.model.params[j].i_t_s,
                &reports,
                &self.model.consensus,
            )?);
        }

        self.pending = Some(Pending { w, rho });
        Ok(StepRecord {
            step: k,
            t,
            states: self.states.clone(),
            outputs,
            sent,
            links: samples,
            alpha_dot,
        })
    }

    /// Step 6: one RK4 step of every DGU and `alpha` over `[t_k, t_k + dt]`.
    pub fn advance(&mut self) -> Result<()> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::Simulation("advance called without exchange".into()))?;
        let dt = self.model.dt;
        let t_mid = self.time() + 0.5 * dt;

        let mask: Vec<bool> = self
            .model
            .topology
            .lines
            .iter()
            .map(|l| l.t_on <= t_mid)
            .collect();
        if mask != self.line_mask {
            for i in 0..self.states.len() {
                self.mats[i] =
                    build_matrices_at(&self.model.params[i], &self.model.topology, i, Some(t_mid))?;
            }
            self.line_mask = mask;
        }

        let loads: Vec<T> = self
            .model
            .loads
            .iter()
            .map(|l| T::of(l.value_at(t_mid)))
            .collect();
        let x0: Vec<Vector3<T>> = self.states.iter().map(DguState::x).collect();
        let alpha0: Vec<T> = self.states.iter().map(|s| s.alpha).collect();
        let n = x0.len();

        // Consensus inputs over the step, at the RK4 stage points. A genuine
        // link delivers the sender's stage outputs through encode and decode;
        // a replayed one delivers the decoded forged segment of the next frame.
        let k = self.step;
        let t_next = (k + 1) as f64 * dt;
        let marks: Vec<[Vector3<T>; 4]> = self
            .model
            .watermarks
            .iter()
            .map(|wm| segment_watermark(t_next, dt, wm))
            .collect();
        let mut sources: Vec<Vec<ConsensusSource<T>>> = (0..n).map(|_| Vec::new()).collect();
        for link in &self.links {
            if k < link.active_step {
                continue;
            }
            let forged = match &link.attacker {
                Some(att) => att.forged_segment(k + 1)?,
                None => None,
            };
            let m = &marks[link.from];
            let forged = forged.map(|seg| [0, 1, 2, 3].map(|s| seg[s] - m[s]));
            sources[link.to].push(ConsensusSource {
                from: link.from,
                rating: self.model.params[link.from].i_t_s,
                frozen: link.detector.state.alarm.is_some(),
                forged,
            });
        }

        let consensus = &self.model.consensus;
        let params = &self.model.params;
        let mats = &self.mats;
        let mut nb: Vec<Vector3<T>> = Vec::with_capacity(4);
        let mut reports: Vec<NeighborReport<T>> = Vec::with_capacity(4);
        let mut field =
            |xs: &[Vector3<T>], alphas: &[T], stage: usize| -> Result<(Vec<Vector3<T>>, Vec<T>)> {
                let ys: Vec<Vector3<T>> = xs.iter().zip(&pending.rho).map(|(x, r)| x + r).collect();
                let mut dx = Vec::with_capacity(n);
                let mut da = Vec::with_capacity(n);
                for i in 0..n {
                    nb.clear();
                    nb.extend(mats[i].a_ij.iter().map(|(j, _)| xs[*j]));
                    let p = &params[i];
                    let inputs = DguInputs {
                        u: primary_input(&ys[i], &p.k),
                        alpha: alphas[i],
                        load: loads[i],
                        v_ref: p.v_ref,
                        neighbors: &nb,
                    };
                    dx.push(dgu_vector_field(&xs[i], &inputs, &mats[i], &pending.w[i]));

                    reports.clear();
                    reports.extend(sources[i].iter().map(|src| NeighborReport {
                        y: Some(match &src.forged {
                            Some(seg) => seg[stage],
                            None => {
                                let m = marks[src.from][stage];
                                (ys[src.from] + m) - m
                            }
                        }),
                        rating: src.rating,
                        frozen: src.frozen,
                    }));
                    da.push(consensus_rate(&ys[i], p.i_t_s, &reports, consensus)?);
                }
                Ok((dx, da))
            };

        let h = T::of(dt);
        let half = T::of(0.5);
        let shift = |xs: &[Vector3<T>], ks: &[Vector3<T>], a: T| -> Vec<Vector3<T>> {
            xs.iter().zip(ks).map(|(x, k)| x + k * a).collect()
        };
        let shift_a = |xs: &[T], ks: &[T], a: T| -> Vec<T> {
            xs.iter().zip(ks).map(|(x, k)| *x + *k * a).collect()
        };
        let (k1, a1) = field(&x0, &alpha0, 0)?;
        let (k2, a2) = field(
            &shift(&x0, &k1, h * half),
            &shift_a(&alpha0, &a1, h * half),
            1,
        )?;
        let (k3, a3) = field(
            &shift(&x0, &k2, h * half),
            &shift_a(&alpha0, &a2, h * half),
            2,
        )?;
        let (k4, a4) = field(&shift(&x0, &k3, h), &shift_a(&alpha0, &a3, h), 3)?;

        self.segments = Some(
            (0..x0.len())
                .map(|i| {
                    let rho = pending.rho[i];
                    [
                        x0[i] + rho,
                        x0[i] + k1[i] * (h * half) + rho,
                        x0[i] + k2[i] * (h * half) + rho,
                        x0[i] + k3[i] * h + rho,
                    ]
                })
                .collect(),
        );

        let sixth = h / T::of(6.0);
        let two = T::of(2.0);
        for i in 0..n {
            let x = x0[i] + (k1[i] + k2[i] * two + k3[i] * two + k4[i]) * sixth;
            let alpha = alpha0[i] + (a1[i] + a2[i] * two + a3[i] * two + a4[i]) * sixth;
            let next = DguState::with_x(x, alpha);
            if !next.is_finite() {
                return Err(Error::NumericalAbort {
                    t: t_next,
                    dgu: self.model.ids[i],
                    detail: format!(
                        "non-finite state [{:e}, {:e}, {:e}], alpha = {:e}",
                        x[0].to_f64_lossy(),
                        x[1].to_f64_lossy(),
                        x[2].to_f64_lossy(),
                        alpha.to_f64_lossy()
                    ),
                });
            }
            self.states[i] = next;
        }
        self.step += 1;
        Ok(())
    }

    /// One full step: exchange, then integrate.
    pub fn step(&mut self) -> Result<StepRecord<T>> {
        let rec = self.exchange()?;
        self.advance()?;
        Ok(rec)
    }
}

fn v3<T: Real>(v: &Vector3<T>) -> [f64; 3] {
    [
        v[0].to_f64_lossy(),
        v[1].to_f64_lossy(),
        v[2].to_f64_lossy(),
    ]
}

const COMPONENTS: [&str; 3] = ["V", "I_t", "v"];

fn dgu_columns(ids: &[u32], with_alpha: bool) -> Vec<String> {
    let mut cols = Vec::new();
    for id in ids {
        for c in COMPONENTS {
            cols.push(format!("{c}_{id}"));
        }
        if with_alpha {
            cols.push(format!("alpha_{id}"));
        }
    }
    cols
}

fn static_events(sc: &Scenario) -> Vec<Event> {
    let mut events = Vec::new();
    for l in &sc.lines {
        events.push(Event::LineClosed {
            t: l.t_on,
            a: l.a,
            b: l.b,
        });
    }
    for load in &sc.loads {
        if let Ok(s) = load.schedule(sc.horizon) {
            for (t, v) in s.breakpoints.iter().skip(1) {
                events.push(Event::LoadStep {
                    t: *t,
                    dgu: load.dgu,
                    value: *v,
                });
            }
        }
    }
    for a in &sc.attacks {
        events.push(Event::RecordingStart {
            t: a.t_record,
            from: a.from,
            to: a.to,
        });
        events.push(Event::AttackStart {
            t: a.t_attack,
            from: a.from,
            to: a.to,
        });
    }
    events.retain(|e| e.t() <= sc.horizon);
    events
}

/// Simulates `sc` over its horizon with default options.
pub fn run<T: Real>(sc: &Scenario) -> Result<RunArtifact> {
    run_with::<T>(sc, &RunOptions::default())
}

pub fn run_with<T: Real>(sc: &Scenario, opts: &RunOptions) -> Result<RunArtifact> {
    let model = sc.build::<T>()?;
    let n_steps = model.n_steps;
    let dt = model.dt;
    let ids = model.ids.clone();
    let mut world = World::new(model, opts)?;

    let mut states = Table::new(dgu_columns(&ids, true), 0);
    let mut outputs = Table::new(dgu_columns(&ids, false), 0);
    let mut sent = Table::new(dgu_columns(&ids, false), 0);
    let mut links: Vec<LinkTrace> = world
        .links()
        .iter()
        .map(|l| {
            let frames = ["received", "decoded"]
                .iter()
                .flat_map(|p| COMPONENTS.iter().map(move |c| format!("{p}_{c}")))
                .collect();
            let residuals = ["r0", "r1", "r2", "r_bar0", "r_bar1", "r_bar2", "alarm"]
                .map(String::from)
                .to_vec();
            LinkTrace {
                from: ids[l.from],
                to: ids[l.to],
                attacked: l.attacker.is_some(),
                frames: Table::new(frames, l.active_step),
                residuals: Table::new(residuals, l.active_step),
            }
        })
        .collect();
    let mut times = Vec::new();

    let mut oracles: Vec<AttackOracle> = sc
        .attacks
        .iter()
        .enumerate()
        .map(|(i, a)| AttackOracle {
            from: a.from,
            to: a.to,
            t_attack: a.t_attack,
            period: a.period,
            slope: world.model().watermarks[world.model().attacks[i].from]
                .c
                .to_f64_lossy(),
            e_a: None,
            e_bar_at_attack: None,
            stealthy: None,
            guaranteed_detection_time: None,
            alarm_time: None,
            latency: None,
        })
        .collect();

    if n_steps > 0 {
        let mut row = Vec::with_capacity(states.width());
        for k in 0..=n_steps {
            let rec = world.exchange()?;
            times.push(rec.t);

            row.clear();
            for s in &rec.states {
                row.extend([s.voltage, s.current, s.integrator, s.alpha].map(|v| v.to_f64_lossy()));
            }
            states.push(&row);
            row.clear();
            rec.outputs.iter().for_each(|y| row.extend(v3(y)));
            outputs.push(&row);
            row.clear();
            rec.sent.iter().for_each(|y| row.extend(v3(y)));
            sent.push(&row);

            for (trace, sample) in links.iter_mut().zip(&rec.links) {
                if let Some(s) = sample {
                    row.clear();
                    row.extend(v3(&s.received.payload));
                    row.extend(v3(&s.decoded));
                    trace.frames.push(&row);
                    row.clear();
                    row.extend(v3(&s.residual.r));
                    row.extend(v3(&s.residual.r_bar));
                    row.push(if s.residual.alarm { 1.0 } else { 0.0 });
                    trace.residuals.push(&row);
                }
            }

            for (oracle, cfg) in oracles.iter_mut().zip(&world.model().attacks) {
                let rt = world
                    .links()
                    .iter()
                    .find(|l| l.from == cfg.from && l.to == cfg.to)
                    .expect("attacked link exists");
                let att = rt.attacker.as_ref().expect("attacked link has an attacker");
                if k != att.attack_step() {
                    continue;
                }
                let src = k - att.period_steps();
                let base = cfg.from * 4;
                let x_src = Vector3::new(
                    T::of(states.at_step(src, base).expect("recorded")),
                    T::of(states.at_step(src, base + 1).expect("recorded")),
                    T::of(states.at_step(src, base + 2).expect("recorded")),
                );
                let e_a = x_src - rt.detector.state.x_hat;
                let e_bar = rt.detector.state.e_bar;
                oracle.e_a = Some(v3(&e_a));
                oracle.e_bar_at_attack = Some(v3(&e_bar));
                oracle.stealthy = Some(stealth_check(&e_a, &e_bar));
            }

            if k < n_steps {
                world.advance()?;
            }
        }
    }

    let horizon = n_steps as f64 * dt;
    for (oracle, cfg) in oracles.iter_mut().zip(world.model().attacks.iter()) {
        let rt = world
            .links()
            .iter()
            .find(|l| l.from == cfg.from && l.to == cfg.to)
            .expect("attacked link exists");
        if rt.detector.state.is_started() {
            let wm = &world.model().watermarks[cfg.from];
            oracle.guaranteed_detection_time =
                guaranteed_detection_time(&rt.detector.uio, wm, cfg, horizon, dt, |t| {
                    rt.detector.r_bar_at(t)
                });
        }
        oracle.alarm_time = rt.detector.state.alarm.map(|a| a.t);
        oracle.latency = oracle.alarm_time.map(|t| t - cfg.t_attack);
    }

    let alarms = world.alarms().to_vec();
    let mut events = static_events(sc);
    events.extend(alarms.iter().map(|a| Event::Alarm {
        t: a.t,
        from: a.from,
        to: a.to,
        component: a.component,
    }));
    events.sort_by(|a, b| a.t().total_cmp(&b.t()));

    let (final_states, final_ratio_spread) = if n_steps > 0 {
        let last = states.row(states.n_rows() - 1);
        let fs: Vec<[f64; 4]> = last.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let ratios: Vec<f64> = fs
            .iter()
            .zip(&sc.dgus)
            .map(|(s, d)| s[1] / d.I_t_s)
            .collect();
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        (fs, Some(hi - lo))
    } else {
        (Vec::new(), None)
    };

    Ok(RunArtifact {
        scenario: sc.clone(),
        ids,
        dt,
        times,
        states,
        outputs,
        sent,
        links,
        events,
        summary: RunSummary {
            name: sc.name.clone(),
            seed: sc.seed,
            dt,
            horizon: sc.horizon,
            steps: n_steps,
            alarms,
            final_ratio_spread,
            final_states,
            attacks: oracles,
        },
    })
}
