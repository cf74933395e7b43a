//! Scenario files: serde schema, structural validation, and conversion into
//! typed model objects.
//!
//! DGUs are referred to by their `id` in the file; internally they are
//! 0-based indices in file order.

use std::fmt;
use std::path::Path;

use nalgebra::{RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::comm::{ReplayAttackConfig, WatermarkConfig};
use crate::control::ConsensusConfig;
use crate::error::{Error, Result};
use crate::grid::{
    check_primary_stability, DguParams, Line, LoadSchedule, MicrogridTopology, NoiseBounds,
};
use crate::num::Real;

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DguConfig {
    pub id: u32,
    pub R_t: f64,
    pub L_t: f64,
    pub C_t: f64,
    pub V_ref: f64,
    pub I_t_s: f64,
    pub K: [f64; 3],
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfig {
    pub a: u32,
    pub b: u32,
    pub R: f64,
    #[serde(default)]
    pub t_on: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub w_bar: [f64; 3],
    pub rho_bar: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleConfig {
    pub low: f64,
    pub high: f64,
    pub first_switch: f64,
    pub period: f64,
}

/// Exactly one of `breakpoints` or `toggle` must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    pub dgu: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakpoints: Option<Vec<(f64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toggle: Option<ToggleConfig>,
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusSection {
    pub k_I: f64,
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkSection {
    /// When false every slope is zero and frames go out unmarked.
    #[serde(default = "yes")]
    pub enabled: bool,
    pub T_bar: f64,
    /// `log10` of the sawtooth slope used on every outgoing link of each DGU,
    /// in DGU file order.
    pub slope_exponent_per_dgu: Vec<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub from: u32,
    pub to: u32,
    pub t_record: f64,
    pub t_attack: f64,
    pub period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaOverride {
    pub dgu: u32,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    /// Observer decay rate (1/s) used by every DGU's observers.
    pub lambda: f64,
    /// Per-observer-owner overrides.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_dgu: Vec<LambdaOverride>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            per_dgu: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    pub dgus: Vec<DguConfig>,
    pub lines: Vec<LineConfig>,
    pub noise: NoiseConfig,
    pub loads: Vec<LoadConfig>,
    pub consensus: ConsensusSection,
    pub watermark: WatermarkSection,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub detector: DetectorSection,
}

/// Scenario files shipped with the crate.
pub mod bundled {
    pub const NOMINAL: &str = include_str!("../scenarios/nominal.scenario");
    pub const PAPER_FIG2: &str = include_str!("../scenarios/paper_fig2.scenario");
    pub const PAPER_FIG4: &str = include_str!("../scenarios/paper_fig4.scenario");

    pub fn by_name(name: &str) -> Option<&'static str> {
        match name.trim_end_matches(".scenario") {
            "nominal" => Some(NOMINAL),
            "paper_fig2" => Some(PAPER_FIG2),
            "paper_fig4" => Some(PAPER_FIG4),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// One failed check, naming the offending field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
    pub severity: Severity,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}: {}", self.path, self.message)
    }
}

struct Checker(Vec<Violation>);

impl Checker {
    fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation {
            path: path.into(),
            message: message.into(),
            severity: Severity::Error,
        });
    }

    fn warn(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Violation {
            path: path.into(),
            message: message.into(),
            severity: Severity::Warning,
        });
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.dgus.iter().position(|d| d.id == id)
    }

    pub fn n_steps(&self) -> usize {
        if self.horizon <= 0.0 {
            0
        } else {
            (self.horizon / self.dt).round() as usize
        }
    }

    /// Slope of DGU `index`'s watermark.
    pub fn slope(&self, index: usize) -> f64 {
        if !self.watermark.enabled {
            return 0.0;
        }
        self.watermark
            .slope_exponent_per_dgu
            .get(index)
            .map_or(0.0, |e| 10f64.powf(*e))
    }

    pub fn lambda_for(&self, index: usize) -> f64 {
        let id = self.dgus[index].id;
        self.detector
            .per_dgu
            .iter()
            .find(|o| o.dgu == id)
            .map_or(self.detector.lambda, |o| o.lambda)
    }

    /// Every violation, errors and warnings alike.
    pub fn validate(&self) -> Vec<Violation> {
        let mut c = Checker(Vec::new());

        if !positive(self.dt) {
            c.error("dt", "must be positive");
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            c.error("horizon", "must be finite and >= 0");
        }
        if self.dgus.is_empty() {
            c.error("dgus", "at least one DGU is required");
        }

        for (k, d) in self.dgus.iter().enumerate() {
            let p = format!("dgus[{k}]");
            if self.dgus[..k].iter().any(|o| o.id == d.id) {
                c.error(format!("{p}.id"), format!("duplicate DGU id {}", d.id));
            }
            for (name, v) in [
                ("R_t", d.R_t),
                ("L_t", d.L_t),
                ("C_t", d.C_t),
                ("I_t_s", d.I_t_s),
            ] {
                if !positive(v) {
                    c.error(format!("{p}.{name}"), "must be positive");
                }
            }
            if !d.V_ref.is_finite() || d.K.iter().any(|k| !k.is_finite()) {
                c.error(p.to_string(), "V_ref and K must be finite");
            }
        }

        let n = self.dgus.len();
        let mut line_ok = true;
        for (k, l) in self.lines.iter().enumerate() {
            let p = format!("lines[{k}]");
            let (a, b) = (self.index_of(l.a), self.index_of(l.b));
            if a.is_none() || b.is_none() {
                c.error(&p, format!("references unknown DGU id ({} - {})", l.a, l.b));
                line_ok = false;
            }
            if l.a == l.b {
                c.error(&p, "self-loop");
                line_ok = false;
            }
            if !positive(l.R) {
                c.error(format!("{p}.R"), "line resistance must be positive");
                line_ok = false;
            }
            if !(l.t_on >= 0.0 && l.t_on.is_finite()) {
                c.error(format!("{p}.t_on"), "must be finite and >= 0");
            }
            if self.lines[..k]
                .iter()
                .any(|o| (o.a, o.b) == (l.a, l.b) || (o.a, o.b) == (l.b, l.a))
            {
                c.error(&p, "duplicate line");
                line_ok = false;
            }
        }

        for (name, arr) in [
            ("noise.w_bar", self.noise.w_bar),
            ("noise.rho_bar", self.noise.rho_bar),
        ] {
            if arr.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                c.error(name, "bounds must be finite and >= 0");
            }
        }

        for d in &self.dgus {
            let count = self.loads.iter().filter(|l| l.dgu == d.id).count();
            if count != 1 {
                c.error(
                    "loads",
                    format!("DGU {} needs exactly one load entry, found {count}", d.id),
                );
            }
        }
        for (k, l) in self.loads.iter().enumerate() {
            let p = format!("loads[{k}]");
            if self.index_of(l.dgu).is_none() {
                c.error(&p, format!("unknown DGU id {}", l.dgu));
            }
            if let Err(e) = l.schedule(self.horizon) {
                c.error(&p, e.to_string());
            }
        }

        if !positive(self.consensus.k_I) {
            c.error("consensus.k_I", "must be positive");
        }

        let wm = &self.watermark;
        if !positive(wm.T_bar) {
            c.error("watermark.T_bar", "must be positive");
        }
        if wm.slope_exponent_per_dgu.len() != n {
            c.error(
                "watermark.slope_exponent_per_dgu",
                format!(
                    "expected {n} entries, found {}",
                    wm.slope_exponent_per_dgu.len()
                ),
            );
        }
        if wm.slope_exponent_per_dgu.iter().any(|e| !e.is_finite()) {
            c.error(
                "watermark.slope_exponent_per_dgu",
                "exponents must be finite",
            );
        }

        for (k, a) in self.attacks.iter().enumerate() {
            let p = format!("attacks[{k}]");
            let (from, to) = (self.index_of(a.from), self.index_of(a.to));
            if from.is_none() || to.is_none() {
                c.error(
                    &p,
                    format!("references unknown DGU id ({} -> {})", a.from, a.to),
                );
            } else if !self
                .lines
                .iter()
                .any(|l| (l.a, l.b) == (a.from, a.to) || (l.a, l.b) == (a.to, a.from))
            {
                c.error(
                    &p,
                    format!("no link between DGU {} and DGU {}", a.from, a.to),
                );
            } else if let Some(l) = self
                .lines
                .iter()
                .find(|l| (l.a, l.b) == (a.from, a.to) || (l.a, l.b) == (a.to, a.from))
            {
                if l.t_on > a.t_record {
                    c.error(&p, "recording starts before the link is up");
                }
            }
            if !(a.t_record >= 0.0 && a.t_record < a.t_attack) {
                c.error(&p, "need 0 <= t_record < t_attack");
            }
            if !(a.period > 0.0) {
                c.error(format!("{p}.period"), "must be positive");
            } else if a.period > a.t_attack - a.t_record + 1e-12 {
                c.error(
                    format!("{p}.period"),
                    format!(
                        "replay period {} exceeds the recorded window {}",
                        a.period,
                        a.t_attack - a.t_record
                    ),
                );
            }
            if a.period > wm.T_bar + 1e-12 {
                c.error(
                    format!("{p}.period"),
                    format!("replay period {} exceeds T_bar = {}", a.period, wm.T_bar),
                );
            }
            if positive(self.dt) {
                for (name, t) in [
                    ("t_record", a.t_record),
                    ("t_attack", a.t_attack),
                    ("period", a.period),
                ] {
                    let s = t / self.dt;
                    if (s - s.round()).abs() > 1e-6 * s.round().max(1.0) {
                        c.error(
                            format!("{p}.{name}"),
                            "must be a whole number of time steps",
                        );
                    }
                }
            }
            if self.attacks[..k]
                .iter()
                .any(|o| (o.from, o.to) == (a.from, a.to))
            {
                c.error(&p, "more than one attack on the same link");
            }
        }

        if !positive(self.detector.lambda) {
            c.error("detector.lambda", "must be positive");
        }
        for (k, o) in self.detector.per_dgu.iter().enumerate() {
            if self.index_of(o.dgu).is_none() {
                c.error(
                    format!("detector.per_dgu[{k}]"),
                    format!("unknown DGU id {}", o.dgu),
                );
            }
            if !positive(o.lambda) {
                c.error(format!("detector.per_dgu[{k}].lambda"), "must be positive");
            }
        }

        // Closed-loop stability, only meaningful once the pieces are sane.
        if c.0.iter().all(|v| v.severity == Severity::Warning) && line_ok {
            if let Ok(topo) = self.topology::<f64>() {
                for (k, d) in self.dgus.iter().enumerate() {
                    if let Err(e) = check_primary_stability(&d.params(), &topo, k) {
                        c.error(format!("dgus[{k}].K"), e.to_string());
                    }
                }
            }
        }

        // Stiffness: the step must resolve the fastest electrical time constant.
        if positive(self.dt) {
            let mut fastest = f64::INFINITY;
            for d in &self.dgus {
                if positive(d.R_t) && positive(d.L_t) {
                    fastest = fastest.min(d.L_t / d.R_t);
                }
            }
            for l in &self.lines {
                for id in [l.a, l.b] {
                    if let Some(d) = self.index_of(id).map(|i| &self.dgus[i]) {
                        if positive(l.R) && positive(d.C_t) {
                            fastest = fastest.min(l.R * d.C_t);
                        }
                    }
                }
            }
            if fastest.is_finite() && self.dt > fastest / 20.0 {
                c.warn(
                    "dt",
                    format!(
                        "step {} s does not resolve the fastest time constant {fastest:.3e} s (need dt <= {:.3e} s)",
                        self.dt,
                        fastest / 20.0
                    ),
                );
            }
        }

        let last_event = self
            .lines
            .iter()
            .map(|l| l.t_on)
            .chain(self.attacks.iter().map(|a| a.t_attack))
            .fold(0.0, f64::max);
        if self.horizon > 0.0 && self.horizon <= last_event {
            c.warn(
                "horizon",
                format!("ends before the last event at {last_event} s"),
            );
        }

        c.0
    }

    pub fn errors(&self) -> Vec<Violation> {
        self.validate()
            .into_iter()
            .filter(|v| v.severity == Severity::Error)
            .collect()
    }

    pub fn topology<T: Real>(&self) -> Result<MicrogridTopology<T>> {
        let lines = self
            .lines
            .iter()
            .map(|l| {
                let idx = |id| {
                    self.index_of(id)
                        .ok_or_else(|| Error::Config(format!("line references unknown DGU {id}")))
                };
                Ok(Line {
                    a: idx(l.a)?,
                    b: idx(l.b)?,
                    resistance: T::of(l.R),
                    t_on: l.t_on,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MicrogridTopology::new(self.dgus.len(), lines)
    }

    /// Typed model in scalar `T`. Fails on any validation error.
    pub fn build<T: Real>(&self) -> Result<Model<T>> {
        let errors = self.errors();
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        let topology = self.topology()?;
        let params = self.dgus.iter().map(DguConfig::params).collect();
        let loads = self
            .dgus
            .iter()
            .map(|d| {
                self.loads
                    .iter()
                    .find(|l| l.dgu == d.id)
                    .expect("validated")
                    .schedule(self.horizon)
            })
            .collect::<Result<Vec<_>>>()?;
        let t_bar = T::of(self.watermark.T_bar);
        let watermarks = (0..self.dgus.len())
            .map(|i| WatermarkConfig::new(T::of(self.slope(i)), t_bar))
            .collect::<Result<Vec<_>>>()?;
        let attacks = self
            .attacks
            .iter()
            .map(|a| ReplayAttackConfig {
                from: self.index_of(a.from).expect("validated"),
                to: self.index_of(a.to).expect("validated"),
                t_record: a.t_record,
                t_attack: a.t_attack,
                period: a.period,
            })
            .collect();
        Ok(Model {
            ids: self.dgus.iter().map(|d| d.id).collect(),
            params,
            topology,
            noise: NoiseBounds {
                w_bar: Vector3::from(self.noise.w_bar.map(T::of)),
                rho_bar: Vector3::from(self.noise.rho_bar.map(T::of)),
            },
            loads,
            consensus: ConsensusConfig::new(T::of(self.consensus.k_I))?,
            watermarks,
            attacks,
            lambdas: (0..self.dgus.len())
                .map(|i| T::of(self.lambda_for(i)))
                .collect(),
            dt: self.dt,
            n_steps: self.n_steps(),
            seed: self.seed,
        })
    }
}

impl DguConfig {
    pub fn params<T: Real>(&self) -> DguParams<T> {
        DguParams {
            r_t: T::of(self.R_t),
            l_t: T::of(self.L_t),
            c_t: T::of(self.C_t),
            v_ref: T::of(self.V_ref),
            i_t_s: T::of(self.I_t_s),
            k: RowVector3::new(T::of(self.K[0]), T::of(self.K[1]), T::of(self.K[2])),
        }
    }
}

impl LoadConfig {
    pub fn schedule(&self, horizon: f64) -> Result<LoadSchedule> {
        match (&self.breakpoints, &self.toggle) {
            (Some(bps), None) => LoadSchedule::new(bps.clone()),
            (None, Some(t)) => {
                LoadSchedule::toggle(t.low, t.high, t.first_switch, t.period, horizon)
            }
            _ => Err(Error::Config(
                "load entry needs exactly one of `breakpoints` or `toggle`".into(),
            )),
        }
    }
}

/// Typed, validated model ready for simulation.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub ids: Vec<u32>,
    pub params: Vec<DguParams<T>>,
    pub topology: MicrogridTopology<T>,
    pub noise: NoiseBounds<T>,
    pub loads: Vec<LoadSchedule>,
    pub consensus: ConsensusConfig<T>,
    /// Watermark used on every outgoing link of each DGU.
    pub watermarks: Vec<WatermarkConfig<T>>,
    pub attacks: Vec<ReplayAttackConfig>,
    /// Observer decay rate of each observer owner.
    pub lambdas: Vec<T>,
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
}

/// Sets a dotted path (`watermark.T_bar`, `dgus.0.K.2`, `seed`) in a scenario
/// given as JSON.
pub fn set_json_path(
    root: &mut serde_json::Value,
    path: &str,
    value: serde_json::Value,
) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let last = k + 1 == parts.len();
        let next = match cur {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert((*part).to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part)
            }
            serde_json::Value::Array(arr) => {
                let idx: usize = part.parse().map_err(|_| {
                    Error::Config(format!("`{part}` is not an array index in `{path}`"))
                })?;
                if last {
                    let slot = arr.get_mut(idx).ok_or_else(|| {
                        Error::Config(format!("index {idx} out of range in `{path}`"))
                    })?;
                    *slot = value;
                    return Ok(());
                }
                arr.get_mut(idx)
            }
            _ => None,
        };
        cur = next.ok_or_else(|| Error::Config(format!("path `{path}` not found at `{part}`")))?;
    }
    Err(Error::Config("empty parameter path".into()))
}
