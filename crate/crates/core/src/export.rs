//! Writing run artifacts to a directory and reading them back.
//!
//! CSV layout (`Format::Csv`):
//!
//! | file                      | columns                                                    |
//! |---------------------------|------------------------------------------------------------|
//! | `states.csv`              | `t, V_<id>, I_t_<id>, v_<id>, alpha_<id>, ...`             |
//! | `outputs.csv`             | `t, V_<id>, I_t_<id>, v_<id>, ...` (measured `y`)          |
//! | `sent.csv`                | same as `outputs.csv`, watermark added                     |
//! | `link_<from>_<to>.csv`    | `t, received_*, decoded_*, r0..r2, r_bar0..r_bar2, alarm`  |
//! | `events.json`             | chronological event log                                    |
//! | `summary.json`            | [`RunSummary`]                                             |
//! | `scenario.json`           | the scenario that produced the run                         |
//!
//! `Format::Json` writes the whole artifact to `run.json` next to
//! `summary.json`. Floats use Rust's shortest round-trip formatting, so
//! re-importing yields bit-identical values.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::engine::{Event, LinkTrace, RunArtifact, RunSummary, Table};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!(
                "unknown format '{other}' (csv|json)"
            ))),
        }
    }
}

const FRAME_COLUMNS: usize = 6;

pub fn link_file_name(from: u32, to: u32) -> String {
    format!("link_{from}_{to}.csv")
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

fn write_json<V: serde::Serialize>(path: &Path, value: &V) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `tables` side by side with a leading `t` column. All tables must
/// share `start_step` and row count.
fn write_tables(path: &Path, dt: f64, tables: &[&Table]) -> Result<()> {
    let first = tables[0];
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    for t in tables {
        header.extend(t.columns.iter().cloned());
    }
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..first.n_rows() {
        rec.clear();
        rec.push(format!("{}", (first.start_step + i) as f64 * dt));
        for t in tables {
            rec.extend(t.row(i).iter().map(|v| format!("{v}")));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_table(path: &Path, dt: f64) -> Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("t") {
        return Err(Error::Analysis(format!(
            "{}: first column must be 't'",
            path.display()
        )));
    }
    let mut table = Table::new(header.iter().skip(1).map(String::from).collect(), 0);
    let mut first = true;
    let mut row = Vec::with_capacity(table.width());
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Analysis(format!("{}: '{s}': {e}", path.display())))
        };
        if first {
            table.start_step = (parse(&rec[0])? / dt).round() as usize;
            first = false;
        }
        row.clear();
        for s in rec.iter().skip(1) {
            row.push(parse(s)?);
        }
        table.push(&row);
    }
    Ok(table)
}

/// Writes `artifact` into `dir` (created if missing) and returns the files
/// written.
pub fn export(artifact: &RunArtifact, format: Format, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    match format {
        Format::Json => {
            write_json(&out("run.json"), artifact)?;
        }
        Format::Csv => {
            let dt = artifact.dt;
            write_tables(&out("states.csv"), dt, &[&artifact.states])?;
            write_tables(&out("outputs.csv"), dt, &[&artifact.outputs])?;
            write_tables(&out("sent.csv"), dt, &[&artifact.sent])?;
            for l in &artifact.links {
                write_tables(
                    &out(&link_file_name(l.from, l.to)),
                    dt,
                    &[&l.frames, &l.residuals],
                )?;
            }
            write_json(&out("events.json"), &artifact.events)?;
            write_json(&out("scenario.json"), &artifact.scenario)?;
        }
    }
    write_json(&out("summary.json"), &artifact.summary)?;
    Ok(written)
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    read_json(&dir.join("summary.json"))
}

/// Reads a run directory written by [`export`] in either format.
pub fn load_run_dir(dir: &Path) -> Result<RunArtifact> {
    let run_json = dir.join("run.json");
    if run_json.exists() {
        return read_json(&run_json);
    }
    let scenario: Scenario = read_json(&dir.join("scenario.json"))?;
    let summary = load_summary(dir)?;
    let events: Vec<Event> = read_json(&dir.join("events.json"))?;
    let dt = summary.dt;
    let states = read_table(&dir.join("states.csv"), dt)?;
    let outputs = read_table(&dir.join("outputs.csv"), dt)?;
    let sent = read_table(&dir.join("sent.csv"), dt)?;
    let times = (0..states.n_rows()).map(|k| k as f64 * dt).collect();
    let ids: Vec<u32> = scenario.dgus.iter().map(|d| d.id).collect();

    let mut pairs = Vec::new();
    for l in &scenario.lines {
        pairs.push((l.a, l.b));
        pairs.push((l.b, l.a));
    }
    pairs.sort_unstable();
    let mut links = Vec::new();
    for (from, to) in pairs {
        let path = dir.join(link_file_name(from, to));
        if !path.exists() {
            continue;
        }
        let joined = read_table(&path, dt)?;
        if joined.width() < FRAME_COLUMNS {
            return Err(Error::Analysis(format!(
                "{}: too few columns",
                path.display()
            )));
        }
        let (fc, rc) = joined.columns.split_at(FRAME_COLUMNS);
        let mut frames = Table::new(fc.to_vec(), joined.start_step);
        let mut residuals = Table::new(rc.to_vec(), joined.start_step);
        for i in 0..joined.n_rows() {
            let (f, r) = joined.row(i).split_at(FRAME_COLUMNS);
            frames.push(f);
            residuals.push(r);
        }
        let attacked = scenario
            .attacks
            .iter()
            .any(|a| a.from == from && a.to == to);
        links.push(LinkTrace {
            from,
            to,
            attacked,
            frames,
            residuals,
        });
    }

    Ok(RunArtifact {
        scenario,
        ids,
        dt,
        times,
        states,
        outputs,
        sent,
        links,
        events,
        summary,
    })
}
