//! Turns saved benchmark runs into CSV tables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::corpus::Histogram;
use super::stats::{welch_t_test, SampleSet, StatsError, WelchResult, ALPHA};
use crate::dbm::OptLevel;
use crate::native::{BenchResult, RepResult, Scenario};

/// First line of every CSV this module writes.
pub const CSV_HEADER_COMMENT: &str = "# icdbm-report v1";
pub const INSUFFICIENT_N: &str = "insufficient-n";
const BASELINE: &str = "baseline";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("no run files (*.json) in {0}")]
    NoRuns(String),
    #[error("scenario {0} has no level 0 run to compare against")]
    MissingBaseline(Scenario),
    #[error("scenario {scenario} has two runs at level {level}")]
    DuplicateRun { scenario: Scenario, level: OptLevel },
    #[error("scenario {scenario} ran {a} iterations at one level and {b} at another")]
    IterationMismatch { scenario: Scenario, a: u64, b: u64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Instructions,
    L1dLoads,
    L1dMisses,
    WallTimeNs,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Instructions, Metric::L1dLoads, Metric::L1dMisses, Metric::WallTimeNs];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Instructions => "instructions",
            Metric::L1dLoads => "l1d_loads",
            Metric::L1dMisses => "l1d_misses",
            Metric::WallTimeNs => "wall_time_ns",
        }
    }

    pub fn of(self, rep: &RepResult) -> Option<u64> {
        let c = &rep.counters;
        match self {
            Metric::Instructions => c.instructions,
            Metric::L1dLoads => c.l1d_loads,
            Metric::L1dMisses => c.l1d_misses,
            Metric::WallTimeNs => Some(c.wall_time_ns),
        }
    }

    /// Every rep's value, or `None` if any rep lacks the metric.
    pub fn samples(self, run: &BenchResult) -> Option<SampleSet> {
        let values = run
            .reps
            .iter()
            .map(|r| self.of(r).map(|v| v as f64))
            .collect::<Option<Vec<_>>>()?;
        let label = format!("{} {} {}", run.scenario, run.level, self.name());
        SampleSet::new(label, values).ok()
    }
}

/// One metric of one run compared with the level 0 run of its scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub sample: SampleSet,
    pub baseline: SampleSet,
    /// Mean over baseline mean.
    pub ratio: f64,
    pub welch: Result<WelchResult, StatsError>,
}

pub fn compare(run: &BenchResult, baseline: &BenchResult, metric: Metric) -> Option<Comparison> {
    let sample = metric.samples(run)?;
    let base = metric.samples(baseline)?;
    if sample.n() == 0 || base.n() == 0 {
        return None;
    }
    Some(Comparison {
        ratio: sample.mean() / base.mean(),
        welch: welch_t_test(&sample, &base, ALPHA),
        sample,
        baseline: base,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: Scenario,
    pub level: OptLevel,
    pub metric: String,
    pub n: usize,
    pub mean: Option<f64>,
    pub stddev: Option<f64>,
    pub ratio_vs_o0: Option<f64>,
    /// The remaining columns hold numbers, `baseline` on the level 0 row,
    /// or `insufficient-n`.
    pub welch_t: String,
    pub welch_df: String,
    pub welch_p: String,
    pub significant: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub scenario: Scenario,
    pub level: OptLevel,
    pub o0: u64,
    pub o1: u64,
    pub o2: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub scenario: Scenario,
    pub level: OptLevel,
    pub rep: usize,
    pub at_ns: u64,
    pub cumulative: u64,
}

/// Runs keyed by scenario, then level.
pub type RunSet = BTreeMap<Scenario, BTreeMap<OptLevel, BenchResult>>;

pub fn group_runs(runs: Vec<BenchResult>) -> Result<RunSet, ReportError> {
    let mut set = RunSet::new();
    for run in runs {
        let (scenario, level) = (run.scenario, run.level);
        if set.entry(scenario).or_default().insert(level, run).is_some() {
            return Err(ReportError::DuplicateRun { scenario, level });
        }
    }
    for (scenario, levels) in &set {
        let Some(base) = levels.get(&OptLevel::O0) else {
            return Err(ReportError::MissingBaseline(*scenario));
        };
        if let Some(other) = levels.values().find(|r| r.iterations != base.iterations) {
            return Err(ReportError::IterationMismatch {
                scenario: *scenario,
                a: base.iterations,
                b: other.iterations,
            });
        }
    }
    Ok(set)
}

fn metric_row(run: &BenchResult, baseline: &BenchResult, metric: Metric) -> MetricRow {
    let samples = metric.samples(run);
    let n = samples.as_ref().map_or(0, SampleSet::n);
    let mut row = MetricRow {
        scenario: run.scenario,
        level: run.level,
        metric: metric.name().to_string(),
        n,
        mean: samples.as_ref().filter(|s| s.n() > 0).map(SampleSet::mean),
        stddev: samples.as_ref().filter(|s| s.n() > 1).map(SampleSet::stddev),
        ratio_vs_o0: None,
        welch_t: INSUFFICIENT_N.into(),
        welch_df: INSUFFICIENT_N.into(),
        welch_p: INSUFFICIENT_N.into(),
        significant: INSUFFICIENT_N.into(),
    };
    if run.level == OptLevel::O0 {
        row.ratio_vs_o0 = row.mean.map(|_| 1.0);
        for cell in [&mut row.welch_t, &mut row.welch_df, &mut row.welch_p, &mut row.significant] {
            *cell = BASELINE.into();
        }
        return row;
    }
    if let Some(c) = compare(run, baseline, metric) {
        row.ratio_vs_o0 = Some(c.ratio);
        if let Ok(w) = c.welch {
            row.welch_t = w.t_statistic.to_string();
            row.welch_df = w.degrees_of_freedom.to_string();
            row.welch_p = w.p_value.to_string();
            row.significant = w.significant.to_string();
        }
    }
    row
}

pub fn metric_rows(set: &RunSet, metrics: &[Metric]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for levels in set.values() {
        let baseline = &levels[&OptLevel::O0];
        for &metric in metrics {
            for run in levels.values() {
                rows.push(metric_row(run, baseline, metric));
            }
        }
    }
    rows
}

/// Site levels at the end of the highest-level run of each scenario.
pub fn histogram_rows(set: &RunSet) -> Vec<HistogramRow> {
    set.values()
        .filter_map(|levels| levels.values().next_back())
        .map(|run| {
            let h: Histogram = run
                .reps
                .last()
                .map(|r| r.site_levels.iter().copied().collect())
                .unwrap_or_default();
            HistogramRow {
                scenario: run.scenario,
                level: run.level,
                o0: h.o0,
                o1: h.o1,
                o2: h.o2,
                total: h.total(),
            }
        })
        .collect()
}

pub fn timeline_rows(set: &RunSet) -> Vec<TimelineRow> {
    let mut rows = Vec::new();
    for run in set.values().flat_map(BTreeMap::values) {
        for (rep, r) in run.reps.iter().enumerate() {
            for e in &r.events {
                rows.push(TimelineRow {
                    scenario: run.scenario,
                    level: run.level,
                    rep,
                    at_ns: e.at_ns,
                    cumulative: e.cumulative,
                });
            }
        }
    }
    rows
}

/// File name a run is saved under.
pub fn run_file_name(scenario: Scenario, level: OptLevel) -> String {
    format!("{scenario}-{level}.json")
}

pub fn save_run(dir: &Path, run: &BenchResult) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(run_file_name(run.scenario, run.level));
    let text = serde_json::to_string_pretty(run).map_err(|source| ReportError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn load_runs(dir: &Path) -> Result<Vec<BenchResult>, ReportError> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(ReportError::NoRuns(dir.display().to_string()));
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|source| ReportError::Json {
                path: p.display().to_string(),
                source,
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut file = File::create(path).map_err(io_err(path))?;
    writeln!(file, "{CSV_HEADER_COMMENT}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Names of the files [`write_report`] produces.
pub const REPORT_FILES: [&str; 5] = [
    "rq1_histogram.csv",
    "rq2_instructions.csv",
    "rq3_loads.csv",
    "rq4_time.csv",
    "timeline.csv",
];

/// Reads every run in `run_dir` and writes the report tables next to them.
pub fn write_report(run_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let set = group_runs(load_runs(run_dir)?)?;
    let paths: Vec<PathBuf> = REPORT_FILES.iter().map(|f| run_dir.join(f)).collect();
    write_csv(&paths[0], &histogram_rows(&set))?;
    write_csv(&paths[1], &metric_rows(&set, &[Metric::Instructions]))?;
    write_csv(&paths[2], &metric_rows(&set, &[Metric::L1dLoads, Metric::L1dMisses]))?;
    write_csv(&paths[3], &metric_rows(&set, &[Metric::WallTimeNs]))?;
    write_csv(&paths[4], &timeline_rows(&set))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbm::{EngineStats, RewriteEvent};
    use crate::native::{CounterAvailability, PerfCounters};

    fn run(scenario: Scenario, level: OptLevel, walls: &[u64], sites: Vec<OptLevel>) -> BenchResult {
        BenchResult {
            scenario,
            level,
            iterations: 10,
            availability: CounterAvailability::default(),
            counter_errors: vec![],
            reps: walls
                .iter()
                .map(|&w| RepResult {
                    counters: PerfCounters {
                        wall_time_ns: w,
                        ..Default::default()
                    },
                    checksum: 0,
                    misses: 1,
                    stats: EngineStats::default(),
                    events: vec![RewriteEvent { at_ns: 5, cumulative: 1 }],
                    site_levels: sites.clone(),
                    unprotect_calls: 0,
                    patched_pages: 0,
                })
                .collect(),
        }
    }

    fn scratch(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("icdbm-report-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn writes_all_tables_with_header() {
        let dir = scratch("all");
        save_run(&dir, &run(Scenario::Mono, OptLevel::O0, &[100, 110, 105], vec![OptLevel::O0])).unwrap();
        save_run(&dir, &run(Scenario::Mono, OptLevel::O2, &[90, 95, 93], vec![OptLevel::O2])).unwrap();
        save_run(&dir, &run(Scenario::Array, OptLevel::O0, &[7, 8], vec![])).unwrap();
        let files = write_report(&dir).unwrap();
        for f in &files {
            let text = fs::read_to_string(f).unwrap();
            assert!(text.starts_with(CSV_HEADER_COMMENT), "{}", f.display());
        }
        let hist: Vec<HistogramRow> = read_csv(&files[0]).unwrap();
        assert_eq!(hist.len(), 2);
        let array = hist.iter().find(|h| h.scenario == Scenario::Array).unwrap();
        assert_eq!(array.total, 0);
        let mono = hist.iter().find(|h| h.scenario == Scenario::Mono).unwrap();
        assert_eq!((mono.level, mono.o2, mono.total), (OptLevel::O2, 1, 1));

        let time: Vec<MetricRow> = read_csv(&files[3]).unwrap();
        let o2 = time.iter().find(|r| r.level == OptLevel::O2).unwrap();
        assert!(o2.welch_p.parse::<f64>().is_ok());
        assert!(o2.ratio_vs_o0.unwrap() < 1.0);
        // no hardware counters in these runs
        let insns: Vec<MetricRow> = read_csv(&files[1]).unwrap();
        assert!(insns.iter().all(|r| r.n == 0 && r.mean.is_none()));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn single_rep_is_insufficient() {
        let set = group_runs(vec![
            run(Scenario::Mono, OptLevel::O0, &[1], vec![]),
            run(Scenario::Mono, OptLevel::O1, &[2], vec![]),
        ])
        .unwrap();
        let rows = metric_rows(&set, &[Metric::WallTimeNs]);
        assert_eq!(rows[1].welch_p, INSUFFICIENT_N);
        assert_eq!(rows[1].ratio_vs_o0, Some(2.0));
    }

    #[test]
    fn levels_must_share_iterations() {
        let mut other = run(Scenario::Mono, OptLevel::O2, &[1, 2], vec![]);
        other.iterations = 11;
        let err = group_runs(vec![run(Scenario::Mono, OptLevel::O0, &[1, 2], vec![]), other]).unwrap_err();
        assert!(matches!(err, ReportError::IterationMismatch { a: 10, b: 11, .. }));
    }

    #[test]
    fn baseline_is_required() {
        let err = group_runs(vec![run(Scenario::Kshape, OptLevel::O2, &[1, 2], vec![])]).unwrap_err();
        assert!(matches!(err, ReportError::MissingBaseline(Scenario::Kshape)));
        let dir = scratch("empty");
        assert!(matches!(write_report(&dir), Err(ReportError::NoRuns(_))));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn floats_round_trip_exactly() {
        let dir = scratch("float");
        let values = [0.1 + 0.2, 1.0 / 3.0, 1e-300, 123_456_789.123_456_79, f64::MIN_POSITIVE];
        let rows: Vec<MetricRow> = values
            .iter()
            .map(|&v| MetricRow {
                scenario: Scenario::Mono,
                level: OptLevel::O1,
                metric: "x".into(),
                n: 2,
                mean: Some(v),
                stddev: Some(v * 7.0),
                ratio_vs_o0: Some(-v),
                welch_t: v.to_string(),
                welch_df: String::new(),
                welch_p: String::new(),
                significant: String::new(),
            })
            .collect();
        let path = dir.join("x.csv");
        write_csv(&path, &rows).unwrap();
        let back: Vec<MetricRow> = read_csv(&path).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.mean.unwrap().to_bits(), b.mean.unwrap().to_bits());
            assert_eq!(a.stddev.unwrap().to_bits(), b.stddev.unwrap().to_bits());
            assert_eq!(a.welch_t.parse::<f64>().unwrap().to_bits(), a.mean.unwrap().to_bits());
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
