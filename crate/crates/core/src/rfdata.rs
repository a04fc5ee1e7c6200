//! Receptive-field count data: grids, ingestion, simulation and export of
//! fit bundles.
//!
//! Dataset files are comma-separated with header `r,c,t,count,n`, one row per
//! grid cell. `r` and `c` are 1-based, `t` is the pre-spike time in
//! milliseconds, and `n` (presentations) must not vary with `t`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{FitResult, SmootherConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: negative {field} {value}")]
    NegativeValue { line: u64, field: &'static str, value: i64 },
    #[error("duplicate cell (r={r}, c={c}, t={t})")]
    DuplicateCell { r: usize, c: usize, t: i64 },
    #[error("missing cell (r={r}, c={c}, t={t})")]
    MissingCell { r: usize, c: usize, t: i64 },
    #[error("presentations for (r={r}, c={c}) vary across time ({first} vs {other})")]
    OffsetVaries { r: usize, c: usize, first: u64, other: u64 },
    #[error("grid inconsistency: {0}")]
    Grid(String),
    #[error("invalid truth specification: {0}")]
    Truth(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Spatial extents and the pre-spike times of the third axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_r: usize,
    pub n_c: usize,
    pub times: Vec<i64>,
}

impl Default for GridSpec {
    /// 16 × 16 cells at −20, −40, …, −320 ms.
    fn default() -> Self {
        Self {
            n_r: 16,
            n_c: 16,
            times: (1..=16).map(|k| -20 * k).collect(),
        }
    }
}

impl GridSpec {
    pub fn new(n_r: usize, n_c: usize, times: Vec<i64>) -> Result<Self, DataError> {
        if n_r < 2 || n_c < 2 {
            return Err(DataError::Grid(format!(
                "spatial extents must be at least 2, got {n_r}x{n_c}"
            )));
        }
        if times.len() < 2 {
            return Err(DataError::Grid("at least two time points are required".into()));
        }
        let increasing = times.windows(2).all(|w| w[1] > w[0]);
        let decreasing = times.windows(2).all(|w| w[1] < w[0]);
        if !increasing && !decreasing {
            return Err(DataError::Grid("times must be strictly monotone".into()));
        }
        Ok(Self { n_r, n_c, times })
    }

    /// `n_t` times starting at `t0` with spacing `step`.
    pub fn regular(n_r: usize, n_c: usize, n_t: usize, t0: i64, step: i64) -> Result<Self, DataError> {
        Self::new(n_r, n_c, (0..n_t as i64).map(|k| t0 + k * step).collect())
    }

    pub fn n_t(&self) -> usize {
        self.times.len()
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.n_r, self.n_c, self.times.len()]
    }

    pub fn cell_count(&self) -> usize {
        self.n_r * self.n_c * self.times.len()
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize, t: usize) -> usize {
        (t * self.n_c + c) * self.n_r + r
    }
}

/// Observed counts `y[r, c, t]` (0-based indices), row index fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountCube {
    pub grid: GridSpec,
    counts: Vec<u64>,
}

impl CountCube {
    pub fn new(grid: GridSpec, counts: Vec<u64>) -> Result<Self, DataError> {
        if counts.len() != grid.cell_count() {
            return Err(DataError::Grid(format!(
                "{} counts for {} cells",
                counts.len(),
                grid.cell_count()
            )));
        }
        Ok(Self { grid, counts })
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> u64) -> Self {
        let mut counts = Vec::with_capacity(grid.cell_count());
        for t in 0..grid.n_t() {
            for c in 0..grid.n_c {
                for r in 0..grid.n_r {
                    counts.push(f(r, c, t));
                }
            }
        }
        Self { grid, counts }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, t: usize) -> u64 {
        self.counts[self.grid.index(r, c, t)]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Stimulus presentations `n_rc`, shared across time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetGrid {
    pub n_r: usize,
    pub n_c: usize,
    values: Vec<u64>,
}

impl OffsetGrid {
    pub fn new(n_r: usize, n_c: usize, values: Vec<u64>) -> Result<Self, DataError> {
        if values.len() != n_r * n_c {
            return Err(DataError::Grid(format!(
                "{} offsets for {n_r}x{n_c} cells",
                values.len()
            )));
        }
        if values.iter().all(|&v| v == 0) {
            return Err(DataError::Grid(
                "at least one cell needs a positive presentation count".into(),
            ));
        }
        Ok(Self { n_r, n_c, values })
    }

    pub fn constant(n_r: usize, n_c: usize, n: u64) -> Self {
        Self {
            n_r,
            n_c,
            values: vec![n; n_r * n_c],
        }
    }

    pub fn from_fn(n_r: usize, n_c: usize, mut f: impl FnMut(usize, usize) -> u64) -> Self {
        let mut values = Vec::with_capacity(n_r * n_c);
        for c in 0..n_c {
            for r in 0..n_r {
                values.push(f(r, c));
            }
        }
        Self { n_r, n_c, values }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.values[c * self.n_r + r]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.values
    }
}

/// Counts and offsets on a shared grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfDataset {
    pub counts: CountCube,
    pub offsets: OffsetGrid,
}

impl RfDataset {
    pub fn new(counts: CountCube, offsets: OffsetGrid) -> Result<Self, DataError> {
        if counts.grid.n_r != offsets.n_r || counts.grid.n_c != offsets.n_c {
            return Err(DataError::Grid(format!(
                "count grid {}x{} does not match offset grid {}x{}",
                counts.grid.n_r, counts.grid.n_c, offsets.n_r, offsets.n_c
            )));
        }
        if offsets.values.iter().all(|&v| v == 0) {
            return Err(DataError::Grid(
                "at least one cell needs a positive presentation count".into(),
            ));
        }
        Ok(Self { counts, offsets })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.counts.grid
    }
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    line: u64,
) -> Result<T, DataError> {
    let raw = record.get(idx).ok_or_else(|| DataError::Parse {
        line,
        message: format!("missing field `{name}`"),
    })?;
    raw.trim().parse().map_err(|_| DataError::Parse {
        line,
        message: format!("field `{name}` is not an integer: {raw:?}"),
    })
}

/// Parses a dataset from any reader; see the module docs for the format.
pub fn parse_dataset<R: Read>(reader: R) -> Result<RfDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let expected = ["r", "c", "t", "count", "n"];
    if headers.len() != expected.len() || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(DataError::Parse {
            line: 1,
            message: format!(
                "expected header `r,c,t,count,n`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    struct Row {
        r: usize,
        c: usize,
        t: i64,
        count: u64,
        n: u64,
    }
    let mut rows = Vec::new();
    let mut times: Vec<i64> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let fallback_line = i as u64 + 2;
        let rec = rec.map_err(|e| DataError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(fallback_line),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(fallback_line);
        if rec.len() != 5 {
            return Err(DataError::Parse {
                line,
                message: format!("expected 5 fields, found {}", rec.len()),
            });
        }
        let r: i64 = parse_field(&rec, 0, "r", line)?;
        let c: i64 = parse_field(&rec, 1, "c", line)?;
        let t: i64 = parse_field(&rec, 2, "t", line)?;
        let count: i64 = parse_field(&rec, 3, "count", line)?;
        let n: i64 = parse_field(&rec, 4, "n", line)?;
        if r < 1 || c < 1 {
            return Err(DataError::Parse {
                line,
                message: format!("row/column indices are 1-based, got r={r}, c={c}"),
            });
        }
        if count < 0 {
            return Err(DataError::NegativeValue {
                line,
                field: "count",
                value: count,
            });
        }
        if n < 0 {
            return Err(DataError::NegativeValue {
                line,
                field: "n",
                value: n,
            });
        }
        if !times.contains(&t) {
            times.push(t);
        }
        rows.push(Row {
            r: r as usize,
            c: c as usize,
            t,
            count: count as u64,
            n: n as u64,
        });
    }
    if rows.is_empty() {
        return Err(DataError::Grid("dataset has no rows".into()));
    }
    let n_r = rows.iter().map(|row| row.r).max().unwrap_or(0);
    let n_c = rows.iter().map(|row| row.c).max().unwrap_or(0);
    times.sort_unstable_by_key(|t| (t.abs(), *t));
    let grid = GridSpec::new(n_r, n_c, times)?;
    let time_index: HashMap<i64, usize> = grid.times.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let mut counts: Vec<Option<u64>> = vec![None; grid.cell_count()];
    let mut offsets: Vec<Option<u64>> = vec![None; n_r * n_c];
    for row in &rows {
        let idx = grid.index(row.r - 1, row.c - 1, time_index[&row.t]);
        if counts[idx].is_some() {
            return Err(DataError::DuplicateCell {
                r: row.r,
                c: row.c,
                t: row.t,
            });
        }
        counts[idx] = Some(row.count);
        let o = &mut offsets[(row.c - 1) * n_r + row.r - 1];
        match *o {
            None => *o = Some(row.n),
            Some(first) if first != row.n => {
                return Err(DataError::OffsetVaries {
                    r: row.r,
                    c: row.c,
                    first,
                    other: row.n,
                })
            }
            Some(_) => {}
        }
    }
    let mut dense = Vec::with_capacity(counts.len());
    for t in 0..grid.n_t() {
        for c in 0..n_c {
            for r in 0..n_r {
                match counts[grid.index(r, c, t)] {
                    Some(v) => dense.push(v),
                    None => {
                        return Err(DataError::MissingCell {
                            r: r + 1,
                            c: c + 1,
                            t: grid.times[t],
                        })
                    }
                }
            }
        }
    }
    let offsets = OffsetGrid::new(n_r, n_c, offsets.into_iter().map(|o| o.unwrap_or(0)).collect())?;
    RfDataset::new(CountCube::new(grid, dense)?, offsets)
}

/// Reads and validates a dataset file.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<RfDataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    parse_dataset(file)
}

/// Writes rows ordered by time, then row, then column.
pub fn write_dataset_to<W: Write>(data: &RfDataset, out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "r,c,t,count,n")?;
    let grid = data.grid();
    for (ti, &t) in grid.times.iter().enumerate() {
        for r in 0..grid.n_r {
            for c in 0..grid.n_c {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    r + 1,
                    c + 1,
                    t,
                    data.counts.get(r, c, ti),
                    data.offsets.get(r, c)
                )?;
            }
        }
    }
    out.flush()
}

pub fn write_dataset(data: &RfDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    write_dataset_to(data, file).map_err(io_err(path))
}

/// Ground-truth rate field: a Gaussian receptive field modulated by a
/// temporal response window, on top of a baseline rate.
///
/// ```text
/// λ(r, c, t) = baseline + amplitude · g(r, c) · h(|t|)
/// g(r, c)    = exp(−½((r − r0)/σ_r)² − ½((c − c0)/σ_c)²)
/// h(lag)     = L(s(lag − onset)) · L(s(offset − lag)) / [L(s(peak − onset)) · L(s(offset − peak))]
/// ```
///
/// with `L` the logistic function and `s` the sharpness per millisecond, so
/// `h(peak) = 1` and `s = 0` makes the window flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpec {
    pub baseline: f64,
    pub amplitude: f64,
    /// 1-based grid coordinates of the receptive-field centre.
    pub center_r: f64,
    pub center_c: f64,
    pub width_r: f64,
    pub width_c: f64,
    pub onset_ms: f64,
    pub peak_ms: f64,
    pub offset_ms: f64,
    pub sharpness: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        Self {
            baseline: 0.02,
            amplitude: 0.3,
            center_r: 8.5,
            center_c: 8.5,
            width_r: 2.0,
            width_c: 2.0,
            onset_ms: 40.0,
            peak_ms: 70.0,
            offset_ms: 100.0,
            sharpness: 0.25,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TruthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fields = [
            ("baseline", self.baseline),
            ("amplitude", self.amplitude),
            ("center_r", self.center_r),
            ("center_c", self.center_c),
            ("width_r", self.width_r),
            ("width_c", self.width_c),
            ("onset_ms", self.onset_ms),
            ("peak_ms", self.peak_ms),
            ("offset_ms", self.offset_ms),
            ("sharpness", self.sharpness),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::Truth(format!("{name} must be finite, got {v}")));
        }
        if self.baseline <= 0.0 {
            return Err(DataError::Truth(format!(
                "baseline must be positive, got {}",
                self.baseline
            )));
        }
        if self.amplitude < 0.0 {
            return Err(DataError::Truth(format!(
                "amplitude must be non-negative, got {}",
                self.amplitude
            )));
        }
        if !(self.width_r > 0.0 && self.width_c > 0.0) {
            return Err(DataError::Truth("receptive-field widths must be positive".into()));
        }
        if self.sharpness < 0.0 {
            return Err(DataError::Truth(format!(
                "sharpness must be non-negative, got {}",
                self.sharpness
            )));
        }
        if !(self.onset_ms <= self.peak_ms && self.peak_ms <= self.offset_ms) {
            return Err(DataError::Truth(format!(
                "need onset <= peak <= offset, got {} / {} / {}",
                self.onset_ms, self.peak_ms, self.offset_ms
            )));
        }
        Ok(())
    }

    /// Temporal window at lag `|t|`, equal to 1 at the peak.
    pub fn temporal(&self, t_ms: f64) -> f64 {
        let s = self.sharpness;
        let window = |lag: f64| logistic(s * (lag - self.onset_ms)) * logistic(s * (self.offset_ms - lag));
        window(t_ms.abs()) / window(self.peak_ms)
    }

    /// Rate at 1-based spatial coordinates and time in ms.
    pub fn rate(&self, r: f64, c: f64, t_ms: f64) -> f64 {
        let dr = (r - self.center_r) / self.width_r;
        let dc = (c - self.center_c) / self.width_c;
        let spatial = (-0.5 * (dr * dr + dc * dc)).exp();
        self.baseline + self.amplitude * spatial * self.temporal(t_ms)
    }

    /// True rates on every grid cell, row index fastest.
    pub fn rate_cube(&self, grid: &GridSpec) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.cell_count());
        for &t in &grid.times {
            for c in 0..grid.n_c {
                for r in 0..grid.n_r {
                    out.push(self.rate(r as f64 + 1.0, c as f64 + 1.0, t as f64));
                }
            }
        }
        out
    }
}

/// Draws `y ~ Poisson(n_rc λ(r, c, t))` cell by cell in storage order.
pub fn simulate_rfmap(
    truth: &TruthSpec,
    grid: &GridSpec,
    offsets: &OffsetGrid,
    seed: u64,
) -> Result<CountCube, DataError> {
    truth.validate()?;
    if offsets.n_r != grid.n_r || offsets.n_c != grid.n_c {
        return Err(DataError::Grid("offset grid does not match the count grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rates = truth.rate_cube(grid);
    let mut counts = Vec::with_capacity(rates.len());
    for t in 0..grid.n_t() {
        for c in 0..grid.n_c {
            for r in 0..grid.n_r {
                let mean = offsets.get(r, c) as f64 * rates[grid.index(r, c, t)];
                let y = if mean > 0.0 {
                    let dist = Poisson::new(mean).map_err(|e| DataError::Truth(e.to_string()))?;
                    dist.sample(&mut rng) as u64
                } else {
                    0
                };
                counts.push(y);
            }
        }
    }
    CountCube::new(grid.clone(), counts)
}

/// Writes `r,c,t,rate` for every cell.
pub fn write_truth(truth: &TruthSpec, grid: &GridSpec, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let rates = truth.rate_cube(grid);
    write_cell_table(path, grid, "rate", |i| vec![rates[i]])
}

/// Reads a truth table back into a row-fastest vector on `grid`.
pub fn read_truth(path: impl AsRef<Path>, grid: &GridSpec) -> Result<Vec<f64>, DataError> {
    let table = read_cell_table(path.as_ref(), grid, &["rate"])?;
    Ok(table.into_iter().map(|v| v[0]).collect())
}

/// Formats with 17 significant digits, which round-trips every `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_cell_table(
    path: &Path,
    grid: &GridSpec,
    columns: &str,
    values: impl Fn(usize) -> Vec<f64>,
) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(out, "r,c,t,{columns}")?;
        for (ti, &t) in grid.times.iter().enumerate() {
            for r in 0..grid.n_r {
                for c in 0..grid.n_c {
                    let vals: Vec<String> = values(grid.index(r, c, ti)).into_iter().map(fmt17).collect();
                    writeln!(out, "{},{},{},{}", r + 1, c + 1, t, vals.join(","))?;
                }
            }
        }
        out.flush()
    };
    write(&mut out).map_err(io_err(path))
}

fn read_cell_table(path: &Path, grid: &GridSpec, columns: &[&str]) -> Result<Vec<Vec<f64>>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut expected = vec!["r", "c", "t"];
    expected.extend_from_slice(columns);
    if headers.iter().map(str::trim).collect::<Vec<_>>() != expected {
        return Err(DataError::Parse {
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    let time_index: HashMap<i64, usize> = grid.times.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut out: Vec<Option<Vec<f64>>> = vec![None; grid.cell_count()];
    for (i, rec) in rdr.records().enumerate() {
        let fallback = i as u64 + 2;
        let rec = rec.map_err(|e| DataError::Parse {
            line: fallback,
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(fallback);
        let r: usize = parse_field(&rec, 0, "r", line)?;
        let c: usize = parse_field(&rec, 1, "c", line)?;
        let t: i64 = parse_field(&rec, 2, "t", line)?;
        let ti = *time_index
            .get(&t)
            .ok_or_else(|| DataError::Grid(format!("line {line}: time {t} not on the grid")))?;
        if r < 1 || r > grid.n_r || c < 1 || c > grid.n_c {
            return Err(DataError::Grid(format!(
                "line {line}: cell ({r}, {c}) outside the grid"
            )));
        }
        let mut vals = Vec::with_capacity(columns.len());
        for (k, name) in columns.iter().enumerate() {
            let raw = rec.get(3 + k).ok_or_else(|| DataError::Parse {
                line,
                message: format!("missing field `{name}`"),
            })?;
            vals.push(raw.trim().parse::<f64>().map_err(|_| DataError::Parse {
                line,
                message: format!("field `{name}` is not a number: {raw:?}"),
            })?);
        }
        let idx = grid.index(r - 1, c - 1, ti);
        if out[idx].replace(vals).is_some() {
            return Err(DataError::DuplicateCell { r, c, t });
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(idx, v)| {
            v.ok_or_else(|| {
                let r = idx % grid.n_r;
                let c = (idx / grid.n_r) % grid.n_c;
                let t = idx / (grid.n_r * grid.n_c);
                DataError::MissingCell {
                    r: r + 1,
                    c: c + 1,
                    t: grid.times[t],
                }
            })
        })
        .collect()
}

/// `summary.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub config: SmootherConfig,
    pub grid: GridSpec,
    pub coefficients: usize,
    pub parameters: usize,
    pub phi: Vec<f64>,
    pub ed_total: f64,
    pub ed_blocks_sum: f64,
    pub null_dim: usize,
    pub deviance: f64,
    pub reml: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub pinned_blocks: Vec<usize>,
    pub wall_seconds: f64,
}

impl FitSummary {
    pub fn from_result(result: &FitResult, grid: &GridSpec) -> Self {
        Self {
            config: result.config.clone(),
            grid: grid.clone(),
            coefficients: result.coefficient_count(),
            parameters: result.parameter_count(),
            phi: result.phi.clone(),
            ed_total: result.total_ed,
            ed_blocks_sum: result.ed_sum(),
            null_dim: result.null_dim,
            deviance: result.deviance,
            reml: result.reml,
            converged: result.converged,
            outer_iterations: result.trace.len(),
            pinned_blocks: result.pinned.clone(),
            wall_seconds: result.wall_seconds,
        }
    }
}

/// Writes `summary.json`, `fitted.csv`, `ed_blocks.csv` and `trace.csv` into `dir`.
pub fn export_fit(result: &FitResult, grid: &GridSpec, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    if grid.extents() != result.extents {
        return Err(DataError::Grid(format!(
            "grid {:?} does not match fitted extents {:?}",
            grid.extents(),
            result.extents
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let summary_path = dir.join("summary.json");
    let summary = FitSummary::from_result(result, grid);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| DataError::Io {
        path: summary_path.clone(),
        source: std::io::Error::other(e),
    })?;
    fs::write(&summary_path, json + "\n").map_err(io_err(&summary_path))?;

    let rate = result.fitted_rate.as_slice();
    let lin = result.linear_predictor.as_slice();
    write_cell_table(&dir.join("fitted.csv"), grid, "rate,linpred", |i| vec![rate[i], lin[i]])?;

    let ed_path = dir.join("ed_blocks.csv");
    let mut text = String::from("direction,block,phi,ed\n");
    for b in &result.blocks {
        text.push_str(&format!(
            "{},{},{},{}\n",
            b.direction,
            b.block,
            fmt17(b.phi),
            fmt17(b.ed)
        ));
    }
    fs::write(&ed_path, text).map_err(io_err(&ed_path))?;

    let trace_path = dir.join("trace.csv");
    let mut text = String::from("outer_iter,reml,max_dlogphi,inner_iters\n");
    for rec in &result.trace {
        text.push_str(&format!(
            "{},{},{},{}\n",
            rec.outer_iter,
            fmt17(rec.reml),
            fmt17(rec.max_dlogphi),
            rec.inner_iters
        ));
    }
    fs::write(&trace_path, text).map_err(io_err(&trace_path))?;
    Ok(())
}

/// Fitted rates and linear predictors from a bundle's `fitted.csv`.
pub fn read_fitted(path: impl AsRef<Path>, grid: &GridSpec) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    let table = read_cell_table(path.as_ref(), grid, &["rate", "linpred"])?;
    Ok(table.into_iter().map(|v| (v[0], v[1])).unzip())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<FitSummary, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RfDataset {
        let grid = GridSpec::regular(3, 2, 4, -20, -20).unwrap();
        let offsets = OffsetGrid::from_fn(3, 2, |r, c| (r + 2 * c) as u64);
        let counts = CountCube::from_fn(grid, |r, c, t| (r * 100 + c * 10 + t) as u64);
        RfDataset::new(counts, offsets).unwrap()
    }

    fn to_text(data: &RfDataset) -> String {
        let mut buf = Vec::new();
        write_dataset_to(data, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn default_grid_matches_recording_layout() {
        let g = GridSpec::default();
        assert_eq!(g.extents(), [16, 16, 16]);
        assert_eq!(g.times.first(), Some(&-20));
        assert_eq!(g.times.last(), Some(&-320));
    }

    #[test]
    fn text_round_trip() {
        let data = tiny();
        let back = parse_dataset(to_text(&data).as_bytes()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn duplicate_cell_is_named() {
        let mut text = to_text(&tiny());
        text.push_str("2,1,-40,5,2\n");
        match parse_dataset(text.as_bytes()) {
            Err(DataError::DuplicateCell { r, c, t }) => assert_eq!((r, c, t), (2, 1, -40)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_cell_is_named() {
        let text = to_text(&tiny());
        let filtered: String = text
            .lines()
            .filter(|l| *l != "1,2,-60,12,2")
            .map(|l| format!("{l}\n"))
            .collect();
        match parse_dataset(filtered.as_bytes()) {
            Err(DataError::MissingCell { r, c, t }) => assert_eq!((r, c, t), (1, 2, -60)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distinct_error_classes() {
        let neg = "r,c,t,count,n\n1,1,-20,-3,4\n";
        assert!(matches!(
            parse_dataset(neg.as_bytes()),
            Err(DataError::NegativeValue {
                line: 2,
                field: "count",
                ..
            })
        ));
        let bad = "r,c,t,count,n\n1,1,-20,3,4\n1,2,-20,x,4\n";
        assert!(matches!(
            parse_dataset(bad.as_bytes()),
            Err(DataError::Parse { line: 3, .. })
        ));
        let header = "r,c,time,count,n\n";
        assert!(matches!(
            parse_dataset(header.as_bytes()),
            Err(DataError::Parse { line: 1, .. })
        ));
        let varying = "r,c,t,count,n\n1,1,-20,1,4\n2,1,-20,1,4\n1,2,-20,1,4\n2,2,-20,1,4\n\
                       1,1,-40,1,5\n2,1,-40,1,4\n1,2,-40,1,4\n2,2,-40,1,4\n";
        assert!(matches!(
            parse_dataset(varying.as_bytes()),
            Err(DataError::OffsetVaries { r: 1, c: 1, .. })
        ));
        let no_exposure = "r,c,t,count,n\n1,1,-20,1,0\n2,1,-20,1,0\n1,2,-20,1,0\n2,2,-20,1,0\n\
                       1,1,-40,1,0\n2,1,-40,1,0\n1,2,-40,1,0\n2,2,-40,1,0\n";
        assert!(matches!(parse_dataset(no_exposure.as_bytes()), Err(DataError::Grid(_))));
    }

    #[test]
    fn grid_rejects_non_monotone_times() {
        assert!(GridSpec::new(4, 4, vec![-20, -60, -40]).is_err());
        assert!(GridSpec::new(1, 4, vec![-20, -40]).is_err());
        assert!(GridSpec::new(4, 4, vec![20, 40, 60]).is_ok());
    }

    #[test]
    fn simulation_mean_is_close_to_expected() {
        let grid = GridSpec::default();
        let offsets = OffsetGrid::constant(16, 16, 1000);
        let truth = TruthSpec {
            baseline: 0.001,
            amplitude: 0.0,
            ..TruthSpec::default()
        };
        let y = simulate_rfmap(&truth, &grid, &offsets, 42).unwrap();
        let mean = y.total() as f64 / 4096.0;
        // Poisson(1) per cell, standard error 1/sqrt(4096)
        let se = 1.0 / 64.0;
        assert!((mean - 1.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn simulation_is_seeded() {
        let grid = GridSpec::default();
        let offsets = OffsetGrid::constant(16, 16, 50);
        let a = simulate_rfmap(&TruthSpec::default(), &grid, &offsets, 7).unwrap();
        let b = simulate_rfmap(&TruthSpec::default(), &grid, &offsets, 7).unwrap();
        let c = simulate_rfmap(&TruthSpec::default(), &grid, &offsets, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_offset_cells_stay_empty() {
        let grid = GridSpec::default();
        let offsets = OffsetGrid::from_fn(16, 16, |r, c| if (r, c) == (3, 5) { 0 } else { 200 });
        let y = simulate_rfmap(&TruthSpec::default(), &grid, &offsets, 1).unwrap();
        for t in 0..16 {
            assert_eq!(y.get(3, 5, t), 0);
        }
        assert!(y.total() > 0);
    }

    #[test]
    fn flat_window_is_constant_in_time() {
        let truth = TruthSpec {
            sharpness: 0.0,
            ..TruthSpec::default()
        };
        let grid = GridSpec::default();
        for t in &grid.times {
            assert_eq!(truth.rate(8.0, 8.0, *t as f64), truth.rate(8.0, 8.0, -20.0));
        }
        let sharp = TruthSpec::default();
        assert!((sharp.temporal(-70.0) - 1.0).abs() < 1e-15);
        assert!(sharp.temporal(-20.0) < 0.05);
    }

    #[test]
    fn invalid_truth_rejected() {
        let bad = TruthSpec {
            baseline: 0.0,
            ..TruthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = TruthSpec {
            onset_ms: 200.0,
            ..TruthSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn truth_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::regular(4, 5, 3, -20, -20).unwrap();
        let truth = TruthSpec::default();
        let path = dir.path().join("truth.csv");
        write_truth(&truth, &grid, &path).unwrap();
        assert_eq!(read_truth(&path, &grid).unwrap(), truth.rate_cube(&grid));
    }

    proptest::proptest! {
        #[test]
        fn fmt17_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            proptest::prop_assert_eq!(fmt17(v).parse::<f64>().unwrap(), v);
        }

        #[test]
        fn dataset_round_trip(nr in 2usize..5, nc in 2usize..5, nt in 2usize..5, seed in 0u64..1000) {
            let grid = GridSpec::regular(nr, nc, nt, -20, -20).unwrap();
            let offsets = OffsetGrid::from_fn(nr, nc, |r, c| ((r * 31 + c * 17 + seed as usize) % 7) as u64 + 1);
            let counts = simulate_rfmap(&TruthSpec::default(), &grid, &offsets, seed).unwrap();
            let data = RfDataset::new(counts, offsets).unwrap();
            proptest::prop_assert_eq!(parse_dataset(to_text(&data).as_bytes()).unwrap(), data);
        }
    }
}
