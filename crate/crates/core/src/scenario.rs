//! Scenario files and the command implementations behind the CLI.
//!
//! A scenario is a TOML document. Every key is optional; missing keys take
//! the built-in defaults, unknown keys are rejected. All physical quantities
//! carry a unit suffix (`_hz`, `_s`, `_v`, `_m`, ...).
//!
//! The free-running and error-signal noise seeds of every channel, and the
//! counter seed, are derived from the scenario `seed`; seeds written inside
//! noise blocks are replaced.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allan::{cross_correlation, detrend, octave_multiples, overlapping_adev, transfer_factor, AllanCurve, TransferFit};
use crate::atomic::{scan_lineshape, Axis, Detunings, LadderScheme, RydbergTarget, Series};
use crate::counter::{count_chain, CounterSeries, CounterSettings};
use crate::error::{invalid, positive, Error, Result};
use crate::lockin::{calibrate_slope, static_error_curve};
use crate::noise::split_seed;
use crate::servo::{run_with_discriminators, ChainDiscriminators, FidelityMode, RunSummary, ServoChainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub n: u32,
    pub series: Series,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantum_defect: Option<f64>,
}

impl TargetConfig {
    pub fn build(&self) -> Result<RydbergTarget> {
        match self.quantum_defect {
            Some(q) => RydbergTarget::with_defect(self.n, self.series, q),
            None => RydbergTarget::new(self.n, self.series),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    #[serde(rename = "half_range_hz")]
    pub half_range: f64,
    /// Points of the lineshape scan.
    pub points: usize,
    /// Points of the error-curve grid.
    pub error_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub adev: bool,
    /// Largest Allan tau; defaults to a tenth of the run.
    #[serde(rename = "adev_max_tau_s", default, skip_serializing_if = "Option::is_none")]
    pub adev_max_tau: Option<f64>,
    pub detrend: bool,
    pub correlation: bool,
    pub transfer_channel: u8,
    #[serde(rename = "transfer_levels_hz")]
    pub transfer_levels: Vec<f64>,
    /// Length of each transfer-sweep run; lock points average its second half.
    #[serde(rename = "transfer_duration_s")]
    pub transfer_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub strict: bool,
    pub scheme: LadderScheme,
    pub target: TargetConfig,
    pub servo: ServoChainConfig,
    pub counter: CounterSettings,
    pub scan: ScanConfig,
    pub analysis: AnalysisConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "default".into(),
            seed: 1,
            output_dir: None,
            strict: false,
            scheme: LadderScheme::rb85_default(),
            target: TargetConfig {
                n: 50,
                series: Series::F7_2,
                quantum_defect: None,
            },
            servo: ServoChainConfig::default_chain(),
            counter: CounterSettings::default(),
            scan: ScanConfig {
                half_range: 40e6,
                points: 401,
                error_points: 161,
            },
            analysis: AnalysisConfig {
                adev: true,
                adev_max_tau: None,
                detrend: false,
                correlation: true,
                transfer_channel: 1,
                transfer_levels: vec![-2e6, -1e6, 0.0, 1e6, 2e6],
                transfer_duration: 0.5,
            },
        }
    }
}

/// Keys whose default value is taken from the experiment being modeled.
const MEASURED_KEYS: &[&str] = &[
    "scheme.lambda1_m",
    "scheme.lambda2_m",
    "scheme.lambda3_m",
    "scheme.gamma1_hz",
    "target.n",
    "target.series",
    "servo.ch3.dither.depth_hz",
    "servo.ch3.dither.f_mod_hz",
    "servo.target_slope_v_per_hz",
    "counter.beat_offset_hz",
    "counter.fm_flags",
];

/// A validated scenario together with the keys the user set.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    user_keys: BTreeSet<String>,
}

/// Child seeds stay below 2^63 so they survive a round trip through TOML
/// integers.
fn child_seed(seed: u64, label: u64) -> u64 {
    split_seed(seed, label) >> 1
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&path, t, out),
            other => out.push((path, other.clone())),
        }
    }
}

impl LoadedScenario {
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(config_error)?;
        let mut merged = toml::Table::try_from(Scenario::default()).map_err(config_error)?;
        merge(&mut merged, &user);
        let scenario: Scenario = merged.try_into().map_err(config_error)?;
        let mut leaves = Vec::new();
        flatten("", &user, &mut leaves);
        let mut loaded = LoadedScenario {
            scenario,
            user_keys: leaves.into_iter().map(|(k, _)| k).collect(),
        };
        loaded.derive_seeds();
        loaded.scenario.validate()?;
        Ok(loaded)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Replaces the scenario seed, as `--seed` does.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenario.seed = seed;
        self.user_keys.insert("seed".into());
        self.derive_seeds();
        self
    }

    /// Switches fidelity mode, as `--mode` does.
    pub fn with_mode(mut self, mode: FidelityMode) -> Result<Self> {
        if mode != self.scenario.servo.mode {
            let servo = &mut self.scenario.servo;
            servo.mode = mode;
            servo.dt = match mode {
                FidelityMode::Waveform => 0.5e-6,
                FidelityMode::Envelope => 100e-6,
            };
            self.user_keys.insert("servo.mode".into());
            self.scenario.validate()?;
        }
        Ok(self)
    }

    fn derive_seeds(&mut self) {
        let seed = self.scenario.seed;
        for i in 0..3 {
            let ch = self.scenario.servo.channel_mut(i);
            ch.noise.seed = child_seed(seed, 10 + i as u64);
            ch.error_noise.seed = child_seed(seed, 20 + i as u64);
        }
    }

    pub fn counter_seed(&self) -> u64 {
        child_seed(self.scenario.seed, 30)
    }

    fn provenance(&self, path: &str) -> &'static str {
        let user = self.user_keys.iter().any(|k| {
            path == k || path.starts_with(&format!("{k}.")) || k.starts_with(&format!("{path}."))
        });
        if user {
            "user"
        } else if MEASURED_KEYS.contains(&path) {
            "paper"
        } else {
            "default"
        }
    }

    /// Every effective parameter as `key = value  # provenance: tag`.
    pub fn echo(&self) -> Result<String> {
        let table = toml::Table::try_from(&self.scenario).map_err(config_error)?;
        let mut leaves = Vec::new();
        flatten("", &table, &mut leaves);
        let mut out = String::new();
        for (k, v) in leaves {
            let _ = writeln!(out, "{k} = {v}  # provenance: {}", self.provenance(&k));
        }
        Ok(out)
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        self.target.build()?;
        self.servo.validate()?;
        self.counter.validate()?;
        positive("scan.half_range_hz", self.scan.half_range)?;
        if self.scan.points < 51 {
            return Err(invalid("scan.points", "need at least 51"));
        }
        if self.scan.error_points < 11 {
            return Err(invalid("scan.error_points", "need at least 11"));
        }
        let per = self.counter.gate / self.servo.record_dt;
        if (per - per.round()).abs() > 1e-9 * per || per.round() < 1.0 {
            return Err(invalid(
                "counter.gate_s",
                "must be a whole multiple of servo.record_dt_s",
            ));
        }
        if let Some(t) = self.analysis.adev_max_tau {
            positive("analysis.adev_max_tau_s", t)?;
        }
        if !matches!(self.analysis.transfer_channel, 1 | 2) {
            return Err(invalid("analysis.transfer_channel", "must be 1 or 2"));
        }
        positive("analysis.transfer_duration_s", self.analysis.transfer_duration)?;
        if self.analysis.transfer_levels.iter().any(|v| !v.is_finite()) {
            return Err(invalid("analysis.transfer_levels_hz", "must be finite"));
        }
        Ok(())
    }

    fn output_dir(&self, out: Option<&Path>) -> PathBuf {
        match (out, &self.output_dir) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(d)) => PathBuf::from(d),
            (None, None) => PathBuf::from("out").join(&self.name),
        }
    }
}

/// Files assembled in memory and written together, so a failure part-way
/// through a command leaves nothing behind.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Self {
        Outputs {
            dir,
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn add_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        for (name, bytes) in &self.files {
            fs::write(self.dir.join(name), bytes)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct ScanReport {
    pub zero_crossing: f64,
    pub raw_slope: f64,
    pub calibration_gain: f64,
    pub calibrated_slope: f64,
    pub warnings: Vec<String>,
    pub outputs: Outputs,
}

/// Axis-3 lineshape and calibrated error curve for the configured target.
pub fn cmd_scan(loaded: &LoadedScenario, out: Option<&Path>) -> Result<ScanReport> {
    let s = &loaded.scenario;
    let target = s.target.build()?;
    let mut warnings = target.warnings();
    let dither = s.servo.ch3.dither.clone().ok_or_else(|| invalid("servo.ch3.dither", "required"))?;
    warnings.extend(dither.warnings());
    let line = scan_lineshape(&s.scheme, &target, Axis::Three, s.scan.half_range, s.scan.points, Detunings::ZERO)?;
    let reach = (1.5 * dither.depth).max(10.0 * s.scheme.gamma3);
    let grid = crate::atomic::symmetric_grid(reach, s.scan.error_points);
    let curve = static_error_curve(&s.scheme, &target, &dither, Axis::Three, &grid, Detunings::ZERO)?;
    let gain = calibrate_slope(&curve, s.servo.target_slope)?;
    let calibrated = curve.scaled(gain);

    let mut outputs = Outputs::new(s.output_dir(out));
    outputs.add("config_echo.txt", loaded.echo()?.into_bytes());
    outputs.add_with("lineshape_axis3.csv", |b| line.write_csv(b))?;
    outputs.add_with("error_curve_axis3.csv", |b| calibrated.write_csv(b))?;
    let mut summary = String::new();
    let _ = writeln!(summary, "target = {target}");
    let _ = writeln!(summary, "zero_crossing_hz = {:e}", calibrated.zero_crossing);
    let _ = writeln!(summary, "raw_slope_v_per_hz = {:e}", curve.slope_at_zero);
    let _ = writeln!(summary, "calibration_gain = {:e}", gain);
    let _ = writeln!(summary, "calibrated_slope_v_per_hz = {:e}", calibrated.slope_at_zero);
    if let Some(w) = line.fwhm() {
        let _ = writeln!(summary, "lineshape_fwhm_hz = {w:e}");
    }
    for w in &warnings {
        let _ = writeln!(summary, "warning = {w:?}");
    }
    outputs.add("scan_summary.txt", summary.into_bytes());
    outputs.add("plot_scan.gp", scan_plot(&target).into_bytes());
    Ok(ScanReport {
        zero_crossing: calibrated.zero_crossing,
        raw_slope: curve.slope_at_zero,
        calibration_gain: gain,
        calibrated_slope: calibrated.slope_at_zero,
        warnings,
        outputs,
    })
}

fn scan_plot(target: &RydbergTarget) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set multiplot layout 2,1 title 'Third-step scan, {target}'\n\
         set xlabel 'detuning (MHz)'\n\
         set ylabel 'signal (V)'\n\
         plot 'lineshape_axis3.csv' using ($1/1e6):2 with lines\n\
         set ylabel 'error (V)'\n\
         plot 'error_curve_axis3.csv' using ($1/1e6):2 with lines\n\
         unset multiplot\n"
    )
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: RunSummary,
    pub counter: CounterSeries,
    pub adev: Vec<AllanCurve>,
    pub sigma_1s: [Option<f64>; 3],
    pub max_sigma_1e3: [Option<f64>; 3],
    pub correlations: Vec<(String, f64)>,
    pub warnings: Vec<String>,
    pub lock_lost: bool,
    pub outputs: Outputs,
}

/// Noise, closed-loop chain, counter and Allan analysis.
pub fn cmd_run(loaded: &LoadedScenario, out: Option<&Path>) -> Result<RunReport> {
    let s = &loaded.scenario;
    let target = s.target.build()?;
    let mut warnings = target.warnings();
    if s.analysis.adev && s.servo.duration < 100.0 * s.counter.gate {
        return Err(invalid(
            "servo.duration_s",
            "Allan output needs a run of at least 100 counter gates",
        ));
    }
    let disc = ChainDiscriminators::new(&s.servo, &s.scheme, &target)?;
    let run = run_with_discriminators(&s.servo, &disc)?;
    let counter = count_chain(&run.traces, &s.counter, loaded.counter_seed())?;

    let mut adev = Vec::new();
    let mut sigma_1s = [None; 3];
    let mut max_sigma = [None; 3];
    if s.analysis.adev {
        let max_tau = s.analysis.adev_max_tau.unwrap_or(s.servo.duration / 10.0);
        let max_m = ((max_tau / s.counter.gate) + 1e-9).floor().max(1.0) as usize;
        let multiples = octave_multiples(max_m);
        for (i, r) in counter.readings.iter().enumerate() {
            let series = if s.analysis.detrend { detrend(r) } else { r.clone() };
            let (curve, w) = overlapping_adev(&series, s.counter.gate, &multiples)?;
            warnings.extend(w.into_iter().map(|w| format!("ch{}: {w}", i + 1)));
            sigma_1s[i] = curve.at(1.0);
            max_sigma[i] = curve.max_up_to(1e3);
            adev.push(curve);
        }
    }
    let mut correlations = Vec::new();
    if s.analysis.correlation && counter.len() >= 10 {
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if let Ok(r) = cross_correlation(&counter.readings[a], &counter.readings[b]) {
                correlations.push((format!("ch{}_ch{}", a + 1, b + 1), r));
            }
        }
    }
    let lock_lost = run.summary.any_lock_lost();
    if lock_lost {
        warnings.push("lock lost on at least one channel; see summary".into());
    }

    let mut outputs = Outputs::new(s.output_dir(out));
    outputs.add("config_echo.txt", loaded.echo()?.into_bytes());
    for (i, t) in run.traces.iter().enumerate() {
        outputs.add_with(&format!("trace_ch{}.csv", i + 1), |b| t.write_csv(b))?;
    }
    outputs.add_with("counter.csv", |b| counter.write_csv(b))?;
    for (i, c) in adev.iter().enumerate() {
        outputs.add_with(&format!("adev_ch{}.csv", i + 1), |b| c.write_csv(b))?;
    }
    let mut text = run.summary.to_text();
    let _ = writeln!(text, "target = {target}");
    for i in 0..3 {
        if let Some(v) = sigma_1s[i] {
            let _ = writeln!(text, "ch{}.adev_1s_hz = {v:e}", i + 1);
        }
        if let Some(v) = max_sigma[i] {
            let _ = writeln!(text, "ch{}.adev_max_tau_le_1e3s_hz = {v:e}", i + 1);
        }
    }
    for (k, r) in &correlations {
        let _ = writeln!(text, "correlation.{k} = {r}");
    }
    for w in &warnings {
        let _ = writeln!(text, "warning = {w:?}");
    }
    outputs.add("summary.txt", text.into_bytes());
    outputs.add("plot_run.gp", RUN_PLOT.as_bytes().to_vec());

    Ok(RunReport {
        summary: run.summary,
        counter,
        adev,
        sigma_1s,
        max_sigma_1e3: max_sigma,
        correlations,
        warnings,
        lock_lost,
        outputs,
    })
}

const RUN_PLOT: &str = "set datafile separator ','\n\
set key autotitle columnhead\n\
set logscale xy\n\
set xlabel 'tau (s)'\n\
set ylabel 'Allan deviation (kHz)'\n\
plot 'adev_ch1.csv' using 1:($2/1e3) with linespoints title 'step 1', \\\n\
     'adev_ch2.csv' using 1:($2/1e3) with linespoints title 'step 2', \\\n\
     'adev_ch3.csv' using 1:($2/1e3) with linespoints title 'step 3'\n";

/// Measured downstream lock points at each sweep level.
#[derive(Debug, Clone)]
pub struct TransferReport {
    pub channel: u8,
    pub levels: Vec<f64>,
    /// `points[level][channel]`, Hz.
    pub points: Vec<[f64; 3]>,
    pub excluded: Vec<f64>,
    /// Named fits such as `ch1->ch3`.
    pub fits: Vec<(String, TransferFit)>,
    pub notes: Vec<String>,
    pub outputs: Outputs,
}

impl TransferReport {
    pub fn fit(&self, name: &str) -> Option<&TransferFit> {
        self.fits.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }
}

/// Sweeps the lock offset of `channel` and regresses the downstream lock
/// points against it.
pub fn cmd_transfer(
    loaded: &LoadedScenario,
    channel: Option<u8>,
    levels: Option<&[f64]>,
    out: Option<&Path>,
) -> Result<TransferReport> {
    let s = &loaded.scenario;
    let channel = channel.unwrap_or(s.analysis.transfer_channel);
    if !matches!(channel, 1 | 2) {
        return Err(invalid("channel", "transfer sweeps drive channel 1 or 2"));
    }
    let levels: Vec<f64> = levels.map_or_else(|| s.analysis.transfer_levels.clone(), <[f64]>::to_vec);
    let mut distinct = levels.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(invalid("levels", "a transfer sweep needs at least 3 distinct levels"));
    }
    let target = s.target.build()?;
    let mut base = s.servo.clone();
    base.duration = s.analysis.transfer_duration;
    base.validate()?;
    let disc = ChainDiscriminators::new(&base, &s.scheme, &target)?;

    let mut kept = Vec::new();
    let mut points = Vec::new();
    let mut excluded = Vec::new();
    for &level in &levels {
        let mut cfg = base.clone();
        cfg.channel_mut(channel as usize - 1).lock_offset = level;
        let run = run_with_discriminators(&cfg, &disc)?;
        if run.summary.any_lock_lost() {
            excluded.push(level);
            continue;
        }
        let mut p = [0.0; 3];
        for (i, t) in run.traces.iter().enumerate() {
            let x = t.samples();
            let tail = &x[x.len() / 2..];
            p[i] = tail.iter().sum::<f64>() / tail.len() as f64;
        }
        kept.push(level);
        points.push(p);
    }

    let mut fits = Vec::new();
    let mut notes = Vec::new();
    let downstream: &[usize] = if channel == 1 { &[1, 2] } else { &[2] };
    for &d in downstream {
        let effect: Vec<f64> = points.iter().map(|p| p[d]).collect();
        match transfer_factor(&kept, &effect) {
            Ok(f) => fits.push((format!("ch{channel}->ch{}", d + 1), f)),
            Err(e) => notes.push(format!("ch{channel}->ch{}: {e}", d + 1)),
        }
    }
    let (l1, l2, l3) = (s.scheme.lambda1, s.scheme.lambda2, s.scheme.lambda3);
    if channel == 1 {
        notes.push(format!(
            "wavelength ratios: lambda1/lambda2 = {:.5}, lambda1/lambda3 = {:.5}",
            l1 / l2,
            l1 / l3
        ));
    } else {
        notes.push(format!(
            "model slope compared with lambda2/lambda3 = {:.5}; the measured second-step to third-step transfer was about 0.1x, which this velocity-selection model does not reproduce",
            l2 / l3
        ));
    }
    for l in &excluded {
        notes.push(format!("level {l:e} Hz excluded: lock lost"));
    }

    let mut outputs = Outputs::new(s.output_dir(out));
    outputs.add("config_echo.txt", loaded.echo()?.into_bytes());
    let mut csv = String::from("level_hz,ch1_hz,ch2_hz,ch3_hz\n");
    for (l, p) in kept.iter().zip(&points) {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            crate::noise::fmt17(*l),
            crate::noise::fmt17(p[0]),
            crate::noise::fmt17(p[1]),
            crate::noise::fmt17(p[2])
        );
    }
    outputs.add("transfer.csv", csv.into_bytes());
    let mut text = format!("swept_channel = {channel}\n");
    for (name, f) in &fits {
        let _ = writeln!(
            text,
            "{name}.slope = {:.6}\n{name}.ci95 = [{:.6}, {:.6}]\n{name}.points = {}",
            f.slope,
            f.ci().0,
            f.ci().1,
            f.points
        );
    }
    for n in &notes {
        let _ = writeln!(text, "note = {n:?}");
    }
    outputs.add("transfer_report.txt", text.into_bytes());

    Ok(TransferReport {
        channel,
        levels: kept,
        points,
        excluded,
        fits,
        notes,
        outputs,
    })
}

#[derive(Debug, Clone)]
pub struct AdevReport {
    pub curves: Vec<(String, AllanCurve)>,
    pub warnings: Vec<String>,
    pub outputs: Outputs,
}

/// Allan deviation of every column of an existing counter CSV.
pub fn cmd_adev(input: &Path, max_tau: Option<f64>, detrend_first: bool, out: &Path) -> Result<AdevReport> {
    let file = fs::File::open(input)?;
    let series = CounterSeries::read_csv(std::io::BufReader::new(file))?;
    let span = series.len() as f64 * series.gate;
    let max_tau = max_tau.unwrap_or(span / 10.0);
    positive("max_tau", max_tau)?;
    let max_m = ((max_tau / series.gate) + 1e-9).floor().max(1.0) as usize;
    let multiples = octave_multiples(max_m);
    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    let mut outputs = Outputs::new(out.to_path_buf());
    let mut text = String::new();
    for (label, r) in series.labels.iter().zip(&series.readings) {
        let data = if detrend_first { detrend(r) } else { r.clone() };
        let (curve, w) = overlapping_adev(&data, series.gate, &multiples)?;
        warnings.extend(w.into_iter().map(|w| format!("{label}: {w}")));
        outputs.add_with(&format!("adev_{label}.csv"), |b| curve.write_csv(b))?;
        if let Some(v) = curve.at(series.gate) {
            let _ = writeln!(text, "{label}.adev_gate_hz = {v:e}");
        }
        if let Some(v) = curve.max_up_to(1e3) {
            let _ = writeln!(text, "{label}.adev_max_tau_le_1e3s_hz = {v:e}");
        }
        curves.push((label.clone(), curve));
    }
    for w in &warnings {
        let _ = writeln!(text, "warning = {w:?}");
    }
    outputs.add("adev_summary.txt", text.into_bytes());
    Ok(AdevReport {
        curves,
        warnings,
        outputs,
    })
}
