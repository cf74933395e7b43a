//! Post-processing of run artifacts: how visible the watermark is in the
//! communicated outputs, and when the detectors fired.
//!
//! Everything here works on `f64` traces of a finished [`RunArtifact`].

use std::fs;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::comm::{watermark_value, WatermarkConfig};
use crate::engine::{Event, RunArtifact, Table};
use crate::error::{Error, Result};

/// Steady-state window used for the watermark comparison.
pub const DEFAULT_WINDOW: (f64, f64) = (5.0, 9.0);

/// Spectral grid spacing must not exceed `f_delta / RESOLUTION_FACTOR`.
pub const RESOLUTION_FACTOR: f64 = 5.0;

pub const COMPONENT_NAMES: [&str; 3] = ["V", "I_t", "v"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Histogram {
    /// Upper bound on bins, so a tiny IQR cannot explode the output.
    pub const MAX_BINS: usize = 4096;

    /// Bin width `2 IQR / n^(1/3)` over `[lo, hi]`. A zero spread gives one
    /// bin.
    pub fn freedman_diaconis_edges(samples: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        let n = samples.len();
        if n == 0 || hi <= lo {
            return vec![lo, hi];
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
        let width = 2.0 * iqr / (n as f64).cbrt();
        let bins = if width > 0.0 {
            (((hi - lo) / width).ceil() as usize).clamp(1, Self::MAX_BINS)
        } else {
            1
        };
        (0..=bins)
            .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
            .collect()
    }

    pub fn with_edges(samples: &[f64], edges: Vec<f64>) -> Self {
        let bins = edges.len() - 1;
        let mut counts = vec![0; bins];
        let (lo, hi) = (edges[0], edges[bins]);
        for &x in samples {
            let i = if hi > lo {
                (((x - lo) / (hi - lo)) * bins as f64).floor()
            } else {
                0.0
            };
            counts[(i.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { edges, counts }
    }

    pub fn freedman_diaconis(samples: &[f64]) -> Self {
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if samples.is_empty() {
            return Self {
                edges: vec![0.0, 0.0],
                counts: vec![0],
            };
        }
        Self::with_edges(samples, Self::freedman_diaconis_edges(samples, lo, hi))
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Per-component statistics of a windowed multi-component signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalStats {
    pub samples: usize,
    pub mean: Vec<f64>,
    /// Population variance.
    pub variance: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub histograms: Vec<Histogram>,
}

impl SignalStats {
    pub fn from_components(components: &[Vec<f64>]) -> Self {
        let samples = components.first().map_or(0, Vec::len);
        let mut s = Self {
            samples,
            mean: Vec::new(),
            variance: Vec::new(),
            min: Vec::new(),
            max: Vec::new(),
            histograms: Vec::new(),
        };
        for xs in components {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            s.mean.push(mean);
            s.variance.push(var);
            s.min.push(xs.iter().copied().fold(f64::INFINITY, f64::min));
            s.max
                .push(xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            s.histograms.push(Histogram::freedman_diaconis(xs));
        }
        s
    }
}

/// `100 (new - reference) / |reference|`; zero when both are zero.
pub fn relative_shift_pct(new: f64, reference: f64) -> f64 {
    if new == reference {
        0.0
    } else {
        100.0 * (new - reference) / reference.abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsComparison {
    pub dgu: u32,
    pub window: (f64, f64),
    pub communicated: SignalStats,
    pub actual: SignalStats,
    pub mean_shift_pct: Vec<f64>,
    pub variance_shift_pct: Vec<f64>,
}

/// Grid steps with `t0 <= k dt <= t1`.
fn window_steps(run: &RunArtifact, window: (f64, f64)) -> Result<RangeInclusive<usize>> {
    let (t0, t1) = window;
    let horizon = run.times.last().copied().unwrap_or(0.0);
    if !(t0 <= t1) || t0 < 0.0 || t1 > horizon + 1e-9 * run.dt.max(1.0) {
        return Err(Error::Analysis(format!(
            "window [{t0}, {t1}] s is not inside the run [0, {horizon}] s"
        )));
    }
    let first = (t0 / run.dt - 1e-9).ceil() as usize;
    let last = ((t1 / run.dt + 1e-9).floor() as usize).min(run.times.len().saturating_sub(1));
    if run.times.is_empty() || first > last {
        return Err(Error::Analysis(format!(
            "window [{t0}, {t1}] s holds no samples"
        )));
    }
    Ok(first..=last)
}

fn dgu_columns(table: &Table, dgu: u32, steps: &RangeInclusive<usize>) -> Result<Vec<Vec<f64>>> {
    COMPONENT_NAMES
        .iter()
        .map(|c| {
            let name = format!("{c}_{dgu}");
            let col = table
                .column_index(&name)
                .ok_or_else(|| Error::Analysis(format!("run has no column {name}")))?;
            steps
                .clone()
                .map(|k| {
                    table
                        .at_step(k, col)
                        .ok_or_else(|| Error::Analysis(format!("step {k} missing from {name}")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

/// Statistics of communicated (`y + Delta`) against actual (`y`) outputs of
/// every DGU over `window`.
pub fn compare_stats(run: &RunArtifact, window: (f64, f64)) -> Result<Vec<StatsComparison>> {
    let steps = window_steps(run, window)?;
    run.ids
        .iter()
        .map(|&id| {
            let comm = SignalStats::from_components(&dgu_columns(&run.sent, id, &steps)?);
            let act = SignalStats::from_components(&dgu_columns(&run.outputs, id, &steps)?);
            let mean_shift_pct = comm
                .mean
                .iter()
                .zip(&act.mean)
                .map(|(c, a)| relative_shift_pct(*c, *a))
                .collect();
            let variance_shift_pct = comm
                .variance
                .iter()
                .zip(&act.variance)
                .map(|(c, a)| relative_shift_pct(*c, *a))
                .collect();
            Ok(StatsComparison {
                dgu: id,
                window,
                communicated: comm,
                actual: act,
                mean_shift_pct,
                variance_shift_pct,
            })
        })
        .collect()
}

/// Largest `|sent - y|` of one DGU over `window`, all components.
pub fn watermark_amplitude(run: &RunArtifact, dgu: u32, window: (f64, f64)) -> Result<f64> {
    let steps = window_steps(run, window)?;
    let sent = dgu_columns(&run.sent, dgu, &steps)?;
    let out = dgu_columns(&run.outputs, dgu, &steps)?;
    Ok(sent
        .iter()
        .zip(&out)
        .flat_map(|(s, o)| s.iter().zip(o).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max))
}

fn watermark_of(run: &RunArtifact, dgu: u32) -> Result<WatermarkConfig<f64>> {
    let sc = &run.scenario;
    let i = sc
        .index_of(dgu)
        .ok_or_else(|| Error::Analysis(format!("unknown DGU {dgu}")))?;
    WatermarkConfig::new(sc.slope(i), sc.watermark.T_bar)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalSelector {
    pub dgu: u32,
    /// 0 = `V`, 1 = `I_t`, 2 = `v`.
    pub component: usize,
}

/// One-sided DFT magnitudes `|X_k|` (unnormalized) of mean-removed,
/// zero-padded samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub selector: SignalSelector,
    pub window: (f64, f64),
    pub samples: usize,
    pub n_fft: usize,
    pub dt: f64,
    /// `1 / (2 T_bar)`.
    pub f_delta: f64,
    pub freqs: Vec<f64>,
    pub communicated: Vec<f64>,
    pub actual: Vec<f64>,
    pub watermark: Vec<f64>,
    /// Energy of the detrended windows, `sum x^2`, in the order
    /// communicated, actual, watermark.
    pub time_energy: [f64; 3],
}

impl SpectrumReport {
    pub fn resolution(&self) -> f64 {
        self.freqs.get(1).copied().unwrap_or(f64::INFINITY)
    }

    pub fn bin_of(&self, f: f64) -> usize {
        ((f * self.n_fft as f64 * self.dt).round() as usize).min(self.freqs.len() - 1)
    }

    pub fn magnitude_at(&self, mags: &[f64], f: f64) -> f64 {
        mags[self.bin_of(f)]
    }

    /// Largest magnitude over `(0, f_max]`, excluding DC.
    pub fn peak_below(&self, mags: &[f64], f_max: f64) -> f64 {
        let last = self.bin_of(f_max);
        mags[1..=last.max(1)].iter().copied().fold(0.0, f64::max)
    }

    /// Energy recovered from the one-sided magnitudes. Equals the matching
    /// entry of `time_energy` by Parseval's theorem.
    pub fn spectral_energy(&self, mags: &[f64]) -> f64 {
        let nyquist = self.n_fft / 2;
        mags.iter()
            .enumerate()
            .map(|(k, m)| {
                if k == 0 || k == nyquist {
                    m * m
                } else {
                    2.0 * m * m
                }
            })
            .sum::<f64>()
            / self.n_fft as f64
    }
}

fn detrend(xs: &mut [f64]) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter_mut().for_each(|x| *x -= mean);
}

fn one_sided_magnitude(xs: &[f64], n_fft: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = xs.iter().map(|&x| Complex::new(x, 0.0)).collect();
    buf.resize(n_fft, Complex::new(0.0, 0.0));
    planner.plan_fft_forward(n_fft).process(&mut buf);
    buf[..=n_fft / 2].iter().map(|c| c.norm()).collect()
}

/// FFT length: a power of two covering the window and fine enough that the
/// grid spacing is at most `f_delta / RESOLUTION_FACTOR`.
pub fn fft_len(samples: usize, dt: f64, f_delta: f64) -> usize {
    let needed = (RESOLUTION_FACTOR / (f_delta * dt)).ceil() as usize;
    samples.max(needed).next_power_of_two()
}

/// Spectra of the communicated signal, the actual signal and the isolated
/// watermark over `window`. The window must span at least one watermark
/// period `1 / f_delta`.
pub fn spectrum(
    run: &RunArtifact,
    sel: SignalSelector,
    window: (f64, f64),
) -> Result<SpectrumReport> {
    if sel.component >= COMPONENT_NAMES.len() {
        return Err(Error::Analysis(format!(
            "component {} out of range",
            sel.component
        )));
    }
    let wm = watermark_of(run, sel.dgu)?;
    let t_bar = wm.t_bar;
    let f_delta = 1.0 / (2.0 * t_bar);
    let span = window.1 - window.0;
    if span + 1e-9 < 1.0 / f_delta {
        return Err(Error::Analysis(format!(
            "window of {span} s is shorter than one watermark period ({} s)",
            1.0 / f_delta
        )));
    }
    let steps = window_steps(run, window)?;
    let mut comm = dgu_columns(&run.sent, sel.dgu, &steps)?.swap_remove(sel.component);
    let mut act = dgu_columns(&run.outputs, sel.dgu, &steps)?.swap_remove(sel.component);
    let mut mark: Vec<f64> = steps
        .clone()
        .map(|k| watermark_value(k as f64 * run.dt, &wm)[sel.component])
        .collect();
    for xs in [&mut comm, &mut act, &mut mark] {
        detrend(xs);
    }
    let energy = |xs: &[f64]| xs.iter().map(|x| x * x).sum::<f64>();
    let time_energy = [energy(&comm), energy(&act), energy(&mark)];

    let n_fft = fft_len(comm.len(), run.dt, f_delta);
    let mut planner = FftPlanner::new();
    let df = 1.0 / (n_fft as f64 * run.dt);
    Ok(SpectrumReport {
        selector: sel,
        window,
        samples: comm.len(),
        n_fft,
        dt: run.dt,
        f_delta,
        freqs: (0..=n_fft / 2).map(|k| k as f64 * df).collect(),
        communicated: one_sided_magnitude(&comm, n_fft, &mut planner),
        actual: one_sided_magnitude(&act, n_fft, &mut planner),
        watermark: one_sided_magnitude(&mark, n_fft, &mut planner),
        time_energy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkDetection {
    pub from: u32,
    pub to: u32,
    pub attacked: bool,
    pub t_attack: Option<f64>,
    pub alarmed: bool,
    pub first_alarm: Option<f64>,
    /// `first_alarm - t_attack`, for attacked links only.
    pub latency: Option<f64>,
    pub component: Option<usize>,
}

/// Alarm outcome of every link in the run, read from the event log.
pub fn detection_report(run: &RunArtifact) -> Vec<LinkDetection> {
    run.links
        .iter()
        .map(|l| {
            let t_attack = run
                .scenario
                .attacks
                .iter()
                .find(|a| a.from == l.from && a.to == l.to)
                .map(|a| a.t_attack);
            let first = run.events.iter().find_map(|e| match e {
                Event::Alarm {
                    t,
                    from,
                    to,
                    component,
                } if *from == l.from && *to == l.to => Some((*t, *component)),
                _ => None,
            });
            LinkDetection {
                from: l.from,
                to: l.to,
                attacked: t_attack.is_some(),
                t_attack,
                alarmed: first.is_some(),
                first_alarm: first.map(|f| f.0),
                latency: t_attack.zip(first).map(|(ta, (t, _))| t - ta),
                component: first.map(|f| f.1),
            }
        })
        .collect()
}

/// Options of [`write_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportOptions {
    pub window: (f64, f64),
    /// Signal whose spectrum goes to `spectrum.csv`.
    pub spectrum: Option<SignalSelector>,
    /// Keep every `stride`-th step in time-series plot files.
    pub stride: usize,
}

impl ReportOptions {
    pub fn for_run(run: &RunArtifact) -> Self {
        let stride = (run.times.len() / 12_000).max(1);
        Self {
            window: DEFAULT_WINDOW,
            spectrum: run
                .ids
                .first()
                .map(|&dgu| SignalSelector { dgu, component: 2 }),
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub window: (f64, f64),
    pub dgus: Vec<StatsComparison>,
    /// `max |sent - y|` per DGU over the window.
    pub watermark_amplitude: Vec<(u32, f64)>,
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    Ok(std::io::BufWriter::new(f))
}

fn write_dat(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# {}", header.join(" "))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `stats.json`, `spectrum.csv`, `detections.json` and gnuplot data
/// files into `dir`:
///
/// - `states.dat`: voltages and currents of every DGU;
/// - `residuals_<from>_<to>.dat`: residual and threshold per component;
/// - `histogram_<id>.dat`: voltage histograms of actual and communicated
///   outputs on shared bins;
/// - `spectrum.dat`: same content as `spectrum.csv`.
pub fn write_report(run: &RunArtifact, opts: &ReportOptions, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let dgus = compare_stats(run, opts.window)?;
    let watermark_amplitude = run
        .ids
        .iter()
        .map(|&id| watermark_amplitude(run, id, opts.window).map(|a| (id, a)))
        .collect::<Result<_>>()?;
    let stats = StatsFile {
        window: opts.window,
        dgus,
        watermark_amplitude,
    };
    let p = dir.join("stats.json");
    let mut w = create(&p)?;
    serde_json::to_writer_pretty(&mut w, &stats)?;
    writeln!(w)?;
    w.flush()?;
    written.push(p);

    let p = dir.join("detections.json");
    let mut w = create(&p)?;
    serde_json::to_writer_pretty(&mut w, &detection_report(run))?;
    writeln!(w)?;
    w.flush()?;
    written.push(p);

    if let Some(sel) = opts.spectrum {
        let s = spectrum(run, sel, opts.window)?;
        let p = dir.join("spectrum.csv");
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(["freq_hz", "communicated", "actual", "watermark"])?;
        for k in 0..s.freqs.len() {
            w.write_record(
                [s.freqs[k], s.communicated[k], s.actual[k], s.watermark[k]]
                    .map(|v| format!("{v}")),
            )?;
        }
        w.flush()?;
        written.push(p);
        let p = dir.join("spectrum.dat");
        write_dat(
            &p,
            &["freq_hz", "communicated", "actual", "watermark"].map(String::from),
            (0..s.freqs.len())
                .map(|k| vec![s.freqs[k], s.communicated[k], s.actual[k], s.watermark[k]]),
        )?;
        written.push(p);
    }

    let stride = opts.stride.max(1);
    let mut header = vec!["t".to_string()];
    let mut cols = Vec::new();
    for id in &run.ids {
        for c in ["V", "I_t"] {
            let name = format!("{c}_{id}");
            if let Some(i) = run.states.column_index(&name) {
                cols.push(i);
                header.push(name);
            }
        }
    }
    let p = dir.join("states.dat");
    write_dat(
        &p,
        &header,
        (0..run.states.n_rows()).step_by(stride).map(|i| {
            let row = run.states.row(i);
            std::iter::once(run.times[i])
                .chain(cols.iter().map(|&c| row[c]))
                .collect()
        }),
    )?;
    written.push(p);

    for l in &run.links {
        let p = dir.join(format!("residuals_{}_{}.dat", l.from, l.to));
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain(l.residuals.columns.iter().cloned())
            .collect();
        let r = &l.residuals;
        write_dat(
            &p,
            &header,
            (0..r.n_rows()).step_by(stride).map(|i| {
                std::iter::once((r.start_step + i) as f64 * run.dt)
                    .chain(r.row(i).iter().copied())
                    .collect()
            }),
        )?;
        written.push(p);
    }

    let steps = window_steps(run, opts.window)?;
    for &id in &run.ids {
        let act = dgu_columns(&run.outputs, id, &steps)?.swap_remove(0);
        let comm = dgu_columns(&run.sent, id, &steps)?.swap_remove(0);
        let lo = act
            .iter()
            .chain(&comm)
            .copied()
            .fold(f64::INFINITY, f64::min);
        let hi = act
            .iter()
            .chain(&comm)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let edges = Histogram::freedman_diaconis_edges(&act, lo, hi);
        let ha = Histogram::with_edges(&act, edges.clone());
        let hc = Histogram::with_edges(&comm, edges);
        let p = dir.join(format!("histogram_{id}.dat"));
        write_dat(
            &p,
            &["bin_lo", "bin_hi", "actual", "communicated"].map(String::from),
            (0..ha.counts.len()).map(|b| {
                vec![
                    ha.edges[b],
                    ha.edges[b + 1],
                    ha.counts[b] as f64,
                    hc.counts[b] as f64,
                ]
            }),
        )?;
        written.push(p);
    }
    Ok(written)
}
