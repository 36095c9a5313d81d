//! Trial simulation under the joint model.
//!
//! Event times come from the inverse-transform of the cumulative hazard of
//! `h(t) = h0 exp(gamma (b0 + b1 t) + eta z)`, which is available in closed
//! form for a linear latent trajectory; a draw whose exponential deviate
//! exceeds the total cumulative hazard never fails (`event_time = inf`, which
//! happens with positive probability when `gamma * b1 < 0`).  Measurements
//! are taken on the design's visit schedule while the patient is alive, on
//! study and inside the follow-up cap; a visit scheduled exactly at the
//! event, dropout or cap instant is not observed.
//!
//! An [`AnalysisSnapshot`] freezes the trial as seen at one analysis calendar
//! time: per-patient observed time (event/dropout/cap/administrative
//! censoring, whichever comes first), event indicator, and the number of
//! measurements visible by then.  Snapshot views are monotone across
//! analyses; the estimator modules consume them together with the shared
//! per-patient [`LongitudinalTrack`]s.

use crate::config::{Design, ModelParams};
use crate::trajectory::LongitudinalTrack;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Everything drawn for one patient except the measurement-noise scale, so a
/// harness can re-materialize the same patient under several `sigma_sq`
/// settings on common random numbers.
#[derive(Debug, Clone)]
pub struct PatientCore {
    pub z: u8,
    pub entry: f64,
    pub b0: f64,
    pub b1: f64,
    pub event_time: f64,
    pub dropout_time: f64,
    pub visit_times: Vec<f64>,
    pub visit_noise: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Patient {
    pub z: u8,
    pub entry: f64,
    pub b0: f64,
    pub b1: f64,
    /// Latent failure time (patient clock); `inf` when the cumulative hazard
    /// stays below the exponential draw.
    pub event_time: f64,
    /// Loss-to-follow-up time; `inf` when the dropout rate is zero.
    pub dropout_time: f64,
    pub visit_times: Vec<f64>,
    pub visit_values: Vec<f64>,
}

impl PatientCore {
    /// Materialize measurement values at a given error variance.
    pub fn with_noise_scale(&self, sigma_sq: f64) -> Patient {
        let sd = sigma_sq.sqrt();
        let values = self
            .visit_times
            .iter()
            .zip(&self.visit_noise)
            .map(|(&t, &xi)| self.b0 + self.b1 * t + sd * xi)
            .collect();
        Patient {
            z: self.z,
            entry: self.entry,
            b0: self.b0,
            b1: self.b1,
            event_time: self.event_time,
            dropout_time: self.dropout_time,
            visit_times: self.visit_times.clone(),
            visit_values: values,
        }
    }
}

/// Invert the cumulative hazard of `h0 exp(gamma(b0 + b1 t) + eta z)` at an
/// `Exp(1)` deviate `e`.  Returns `inf` when the total hazard is bounded
/// below `e`.
pub fn simulate_event_time(params: &ModelParams, b0: f64, b1: f64, z: u8, e: f64) -> f64 {
    let rate = params.h0 * (params.gamma * b0 + params.eta * f64::from(z)).exp();
    let gb1 = params.gamma * b1;
    if gb1 == 0.0 {
        return e / rate;
    }
    // H(t) = rate * (exp(gb1 t) - 1) / gb1; solve H(t) = e.
    let arg = 1.0 + e * gb1 / rate;
    if arg <= 0.0 {
        return f64::INFINITY;
    }
    arg.ln() / gb1
}

/// Draw one patient.  The draw order is fixed (entry, intercept, slope, event
/// deviate, dropout deviate, then one noise deviate per realized visit) so a
/// seeded stream reproduces patients bit for bit.
pub fn draw_patient_core<R: Rng>(
    params: &ModelParams,
    design: &Design,
    z: u8,
    rng: &mut R,
) -> PatientCore {
    let entry = design.accrual * rng.random::<f64>();
    let n0: f64 = StandardNormal.sample(rng);
    let n1: f64 = StandardNormal.sample(rng);
    let b0 = params.mu0 + params.phi0_sq.sqrt() * n0;
    let b1 = params.mu1 + params.phi1_sq.sqrt() * n1;
    let e: f64 = Exp1.sample(rng);
    let event_time = simulate_event_time(params, b0, b1, z, e);
    let d: f64 = Exp1.sample(rng);
    let dropout_time = if params.dropout_rate > 0.0 { d / params.dropout_rate } else { f64::INFINITY };
    // Visits stop strictly before the first of event, dropout and the cap.
    let horizon = event_time.min(dropout_time).min(design.max_followup);
    let visit_times: Vec<f64> =
        design.visit_times.iter().copied().take_while(|&v| v < horizon).collect();
    let visit_noise: Vec<f64> =
        visit_times.iter().map(|_| StandardNormal.sample(rng)).collect();
    PatientCore { z, entry, b0, b1, event_time, dropout_time, visit_times, visit_noise }
}

pub fn draw_patient<R: Rng>(params: &ModelParams, design: &Design, z: u8, rng: &mut R) -> Patient {
    draw_patient_core(params, design, z, rng).with_noise_scale(params.sigma_sq)
}

/// A drawn trial plus the shared prefix-OLS tracks.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub patients: Vec<Patient>,
    pub tracks: Vec<LongitudinalTrack>,
}

impl TrialData {
    pub fn new(patients: Vec<Patient>) -> Self {
        let tracks = patients
            .iter()
            .map(|p| LongitudinalTrack::new(&p.visit_times, &p.visit_values))
            .collect();
        TrialData { patients, tracks }
    }

    pub fn n(&self) -> usize {
        self.patients.len()
    }
}

/// Draw a full trial with alternating arm assignment (exact 1:1 balance).
pub fn draw_trial<R: Rng>(
    params: &ModelParams,
    design: &Design,
    n: usize,
    rng: &mut R,
) -> TrialData {
    let patients = (0..n)
        .map(|i| draw_patient(params, design, (i % 2) as u8, rng))
        .collect();
    TrialData::new(patients)
}

/// One patient as seen at an analysis.
#[derive(Debug, Clone, Copy)]
pub struct PatientView {
    /// Entered the study by the analysis calendar time.
    pub entered: bool,
    /// Observed time on the patient clock: min(event, dropout, cap,
    /// calendar - entry).  Zero and meaningless when `entered` is false.
    pub time: f64,
    /// True when the observed time is the event.
    pub event: bool,
    /// Measurements visible at this analysis (strictly before `time`).
    pub m: usize,
    /// Time of the second visible measurement (`inf` when `m < 2`); a patient
    /// joins risk sets only from `v2` on.
    pub v2: f64,
}

/// The trial frozen at one analysis calendar time.
#[derive(Debug, Clone)]
pub struct AnalysisSnapshot {
    pub calendar: f64,
    pub views: Vec<PatientView>,
}

/// Freeze the trial at analysis `k` (zero-based).
pub fn snapshot(trial: &TrialData, design: &Design, k: usize) -> AnalysisSnapshot {
    let calendar = design.analysis_times[k];
    let views = trial
        .patients
        .iter()
        .zip(&trial.tracks)
        .map(|(p, track)| {
            if p.entry > calendar {
                return PatientView { entered: false, time: 0.0, event: false, m: 0, v2: f64::INFINITY };
            }
            let admin = calendar - p.entry;
            let time = p
                .event_time
                .min(p.dropout_time)
                .min(design.max_followup)
                .min(admin);
            let event = p.event_time <= time;
            let m = track.count_before(time);
            let v2 = if m >= 2 { p.visit_times[1] } else { f64::INFINITY };
            PatientView { entered: true, time, event, m, v2 }
        })
        .collect();
    AnalysisSnapshot { calendar, views }
}

fn fmt_f64(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else {
        format!("{x}")
    }
}

/// Write a trial as two CSV files, `patients.csv` and `visits.csv`, each
/// starting with a `#` comment line carrying the config hash and seed.
/// Column layout is documented in the README.
pub fn write_trial_csv(
    trial: &TrialData,
    dir: &Path,
    config_hash: &str,
    seed: u64,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let note = format!("# jmgst trial dump config_sha256={config_hash} seed={seed}\n");
    let mut pf = std::io::BufWriter::new(std::fs::File::create(dir.join("patients.csv"))?);
    pf.write_all(note.as_bytes())?;
    writeln!(pf, "patient,z,entry,b0,b1,event_time,dropout_time")?;
    for (i, p) in trial.patients.iter().enumerate() {
        writeln!(
            pf,
            "{},{},{},{},{},{},{}",
            i,
            p.z,
            fmt_f64(p.entry),
            fmt_f64(p.b0),
            fmt_f64(p.b1),
            fmt_f64(p.event_time),
            fmt_f64(p.dropout_time)
        )?;
    }
    pf.flush()?;
    let mut vf = std::io::BufWriter::new(std::fs::File::create(dir.join("visits.csv"))?);
    vf.write_all(note.as_bytes())?;
    writeln!(vf, "patient,time,value")?;
    for (i, p) in trial.patients.iter().enumerate() {
        for (t, w) in p.visit_times.iter().zip(&p.visit_values) {
            writeln!(vf, "{},{},{}", i, fmt_f64(*t), fmt_f64(*w))?;
        }
    }
    vf.flush()
}

fn bad_row(file: &str, line_no: usize, what: impl std::fmt::Display) -> std::io::Error {
    std::io::Error::new(
        std::io::ErrorKind::InvalidData,
        format!("{file} line {line_no}: {what}"),
    )
}

/// Read a trial back from [`write_trial_csv`] output.  Parse errors name the
/// offending file and line.
pub fn read_trial_csv(dir: &Path) -> std::io::Result<TrialData> {
    let mut patients: Vec<Patient> = Vec::new();
    let pf = BufReader::new(std::fs::File::open(dir.join("patients.csv"))?);
    for (no, line) in pf.lines().enumerate() {
        let line_no = no + 1;
        let line = line?;
        if line.starts_with('#') || line.starts_with("patient,") || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad_row("patients.csv", line_no, "expected 7 columns"));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| bad_row("patients.csv", line_no, format!("bad number {s:?}: {e}")))
        };
        let idx: usize = f[0]
            .parse()
            .map_err(|_| bad_row("patients.csv", line_no, format!("bad patient id {:?}", f[0])))?;
        if idx != patients.len() {
            return Err(bad_row("patients.csv", line_no, "patient ids must be dense and ordered"));
        }
        let z = match f[1] {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(bad_row("patients.csv", line_no, format!("bad arm {other:?}"))),
        };
        patients.push(Patient {
            z,
            entry: num(f[2])?,
            b0: num(f[3])?,
            b1: num(f[4])?,
            event_time: num(f[5])?,
            dropout_time: num(f[6])?,
            visit_times: Vec::new(),
            visit_values: Vec::new(),
        });
    }
    let vf = BufReader::new(std::fs::File::open(dir.join("visits.csv"))?);
    for (no, line) in vf.lines().enumerate() {
        let line_no = no + 1;
        let line = line?;
        if line.starts_with('#') || line.starts_with("patient,") || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad_row("visits.csv", line_no, "expected 3 columns"));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| bad_row("visits.csv", line_no, format!("bad number {s:?}: {e}")))
        };
        let idx: usize = f[0]
            .parse()
            .map_err(|_| bad_row("visits.csv", line_no, format!("bad patient id {:?}", f[0])))?;
        let p = patients
            .get_mut(idx)
            .ok_or_else(|| bad_row("visits.csv", line_no, "unknown patient id"))?;
        p.visit_times.push(num(f[1])?);
        p.visit_values.push(num(f[2])?);
    }
    Ok(TrialData::new(patients))
}
