//! Flight recordings: CSV ingestion, min-max normalization, cross-correlation
//! ranking, sliding windows and a synthetic corpus generator.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::lstm::N_INPUTS;

/// Name of the prediction target channel in the FDR exports.
pub const DEFAULT_TARGET: &str = "Vib";

/// Number of parameter slots in a window row; the remaining slot is the bias.
pub const N_PARAMS: usize = N_INPUTS - 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("parse error at data row {row}, column {column:?}")]
    ParseError { row: usize, column: String },
    #[error("empty file")]
    EmptyFile,
    #[error("degenerate range for channel {0:?} (max == min)")]
    DegenerateRange(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no flights")]
    NoFlights,
    #[error("flight {0:?} is too short for the requested window and horizon")]
    FlightTooShort(String),
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub name: String,
    pub values: Vec<f64>,
}

/// One flight: equally long per-second channels, one of which is the target.
#[derive(Clone, Debug, PartialEq)]
pub struct FlightSeries {
    pub id: String,
    pub channels: Vec<Channel>,
    /// Index into `channels` of the vibration target.
    pub target: usize,
}

impl FlightSeries {
    pub fn new(id: impl Into<String>, channels: Vec<Channel>, target: &str) -> Result<Self> {
        let id = id.into();
        let target = channels
            .iter()
            .position(|c| c.name == target)
            .ok_or_else(|| DataError::MissingColumn(target.to_string()))?;
        if let Some(first) = channels.first() {
            for c in &channels[1..] {
                if c.values.len() != first.values.len() {
                    return Err(DataError::LengthMismatch(first.values.len(), c.values.len()));
                }
            }
        }
        Ok(Self { id, channels, target })
    }

    pub fn length_s(&self) -> usize {
        self.channels.first().map_or(0, |c| c.values.len())
    }

    pub fn target_name(&self) -> &str {
        &self.channels[self.target].name
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.name.as_str())
    }
}

/// Reads one flight from a CSV export, keeping only `schema` columns in
/// schema order. `target` must be one of them.
pub fn load_flight_csv(path: &Path, schema: &[String], target: &str) -> Result<FlightSeries> {
    if !schema.iter().any(|s| s == target) {
        return Err(DataError::MissingColumn(target.to_string()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(DataError::EmptyFile);
    }
    let columns = schema
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| DataError::MissingColumn(name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); schema.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (k, &col) in columns.iter().enumerate() {
            let v = record
                .get(col)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::ParseError { row: row + 1, column: schema[k].clone() })?;
            values[k].push(v);
        }
    }
    if values[0].is_empty() {
        return Err(DataError::EmptyFile);
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let channels = schema
        .iter()
        .zip(values)
        .map(|(name, values)| Channel { name: name.clone(), values })
        .collect();
    FlightSeries::new(id, channels, target)
}

/// Header row of a CSV file, trimmed.
pub fn read_csv_header(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(DataError::EmptyFile);
    }
    Ok(headers)
}

/// Writes a flight as CSV. Values use the shortest round-trip float format,
/// so reading the file back is exact.
pub fn write_flight_csv(path: &Path, flight: &FlightSeries) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(flight.channel_names())?;
    let mut row = Vec::with_capacity(flight.channels.len());
    for t in 0..flight.length_s() {
        row.clear();
        row.extend(flight.channels.iter().map(|c| c.values[t].to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Loads every `*.csv` file in `dir` (sorted by file name). When `schema` is
/// `None`, the header of the first file defines it.
pub fn load_flight_dir(dir: &Path, schema: Option<&[String]>, target: &str) -> Result<Vec<FlightSeries>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::NoFlights);
    }
    let schema = match schema {
        Some(s) => s.to_vec(),
        None => read_csv_header(&paths[0])?,
    };
    paths.iter().map(|p| load_flight_csv(p, &schema, target)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Per-channel min/max taken from the training flights and reused verbatim
/// for every other flight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormRanges {
    pub ranges: Vec<ChannelRange>,
}

impl NormRanges {
    pub fn from_flights(flights: &[FlightSeries]) -> Result<Self> {
        let first = flights.first().ok_or(DataError::NoFlights)?;
        let mut ranges: Vec<ChannelRange> = first
            .channels
            .iter()
            .map(|c| ChannelRange { name: c.name.clone(), min: f64::INFINITY, max: f64::NEG_INFINITY })
            .collect();
        for flight in flights {
            for r in &mut ranges {
                let ch = flight.channel(&r.name).ok_or_else(|| DataError::UnknownChannel(r.name.clone()))?;
                for &v in &ch.values {
                    r.min = r.min.min(v);
                    r.max = r.max.max(v);
                }
            }
        }
        Ok(Self { ranges })
    }

    /// The identity range (0, 1) for every channel of `flight`.
    pub fn unit(flight: &FlightSeries) -> Self {
        Self {
            ranges: flight
                .channels
                .iter()
                .map(|c| ChannelRange { name: c.name.clone(), min: 0.0, max: 1.0 })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ChannelRange> {
        self.ranges.iter().find(|r| r.name == name)
    }
}

/// Min-max scales every channel into [0, 1]; values outside the range clamp.
pub fn normalize(series: &FlightSeries, ranges: &NormRanges) -> Result<FlightSeries> {
    let mut out = series.clone();
    for ch in &mut out.channels {
        let r = ranges.get(&ch.name).ok_or_else(|| DataError::UnknownChannel(ch.name.clone()))?;
        if !(r.max > r.min) {
            return Err(DataError::DegenerateRange(ch.name.clone()));
        }
        let span = r.max - r.min;
        for v in &mut ch.values {
            *v = ((*v - r.min) / span).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Zero-padded cross-correlation summarized as the total absolute
/// correlation over every overlapping lag, divided by the signal length.
pub fn cross_correlate(x: &[f64], vib: &[f64]) -> Result<f64> {
    if x.len() != vib.len() {
        return Err(DataError::LengthMismatch(x.len(), vib.len()));
    }
    let n = x.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut area = 0.0;
    // lag k pairs x[a] with vib[a + k]
    for k in -(n as isize - 1)..=(n as isize - 1) {
        let (xs, vs) = if k >= 0 {
            (&x[..n - k as usize], &vib[k as usize..])
        } else {
            (&x[(-k) as usize..], &vib[..n - (-k) as usize])
        };
        let r: f64 = xs.iter().zip(vs).map(|(a, b)| a * b).sum();
        area += r.abs();
    }
    Ok(area / n as f64)
}

/// Parameters sorted by descending correlation score, ties by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterRanking {
    pub entries: Vec<(String, f64)>,
}

impl ParameterRanking {
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "score"])?;
        for (name, score) in &self.entries {
            w.write_record([name.as_str(), &score.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ranks every non-target channel by its mean [`cross_correlate`] score
/// against the target over all flights.
pub fn rank_parameters(flights: &[FlightSeries]) -> Result<ParameterRanking> {
    let first = flights.first().ok_or(DataError::NoFlights)?;
    let target = first.target_name().to_string();
    let params: Vec<String> = first
        .channel_names()
        .filter(|n| *n != target)
        .map(str::to_string)
        .collect();
    let mut totals = vec![0.0; params.len()];
    for flight in flights {
        let vib = &flight
            .channel(&target)
            .ok_or_else(|| DataError::MissingColumn(target.clone()))?
            .values;
        for (total, name) in totals.iter_mut().zip(&params) {
            let ch = flight.channel(name).ok_or_else(|| DataError::UnknownChannel(name.clone()))?;
            *total += cross_correlate(&ch.values, vib)?;
        }
    }
    let n = flights.len() as f64;
    let mut entries: Vec<(String, f64)> = params.into_iter().zip(totals.into_iter().map(|t| t / n)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ParameterRanking { entries })
}

/// One training example: `window_len` rows of [`N_INPUTS`] values (the last
/// column is the constant bias) and the target `horizon` seconds past the
/// final row.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
    /// Index into [`WindowedDataset::flight_ids`].
    pub flight: usize,
    pub start: usize,
}

impl Sample {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.x[t * N_INPUTS..(t + 1) * N_INPUTS]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub window_len: usize,
    pub horizon: usize,
    /// Input channel order; slots past `channels.len()` are zero padding.
    pub channels: Vec<String>,
    pub flight_ids: Vec<String>,
    pub samples: Vec<Sample>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.y).collect()
    }

    /// A dataset holding only the first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.samples.truncate(n);
        out
    }
}

/// Number of windows a flight of `length` seconds yields.
pub fn window_count(length: usize, window_len: usize, horizon: usize) -> usize {
    (length + 1).saturating_sub(window_len + horizon)
}

/// Cuts normalized flights into windows. `channel_order` names up to 15 input
/// channels (the target may be among them); unused slots stay zero and the
/// last column is the bias, fixed at 1.
pub fn make_windows(
    flights: &[FlightSeries],
    window_len: usize,
    horizon: usize,
    channel_order: &[String],
) -> Result<WindowedDataset> {
    if window_len == 0 {
        return Err(DataError::InvalidArgument("window length must be positive".into()));
    }
    if channel_order.is_empty() || channel_order.len() > N_PARAMS {
        return Err(DataError::InvalidArgument(format!(
            "expected 1..={N_PARAMS} input channels, got {}",
            channel_order.len()
        )));
    }
    let mut order: Vec<&FlightSeries> = flights.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let mut data = WindowedDataset {
        window_len,
        horizon,
        channels: channel_order.to_vec(),
        flight_ids: Vec::with_capacity(order.len()),
        samples: Vec::new(),
    };
    for (fi, flight) in order.into_iter().enumerate() {
        let len = flight.length_s();
        if len < window_len + horizon {
            return Err(DataError::FlightTooShort(flight.id.clone()));
        }
        let inputs = channel_order
            .iter()
            .map(|n| flight.channel(n).map(|c| &c.values[..]).ok_or_else(|| DataError::UnknownChannel(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        let vib = &flight.channels[flight.target].values;
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !vib.iter().copied().all(in_unit) || !inputs.iter().all(|c| c.iter().copied().all(in_unit)) {
            return Err(DataError::InvalidArgument(format!(
                "flight {:?} has values outside [0, 1]; normalize first",
                flight.id
            )));
        }
        data.flight_ids.push(flight.id.clone());
        for s in 0..window_count(len, window_len, horizon) {
            let mut x = vec![0.0; window_len * N_INPUTS];
            for t in 0..window_len {
                let row = &mut x[t * N_INPUTS..(t + 1) * N_INPUTS];
                for (slot, ch) in row.iter_mut().zip(&inputs) {
                    *slot = ch[s + t];
                }
                row[N_INPUTS - 1] = 1.0;
            }
            data.samples.push(Sample { x, y: vib[s + window_len - 1 + horizon], flight: fi, start: s });
        }
    }
    Ok(data)
}

/// Ground truth of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthMeta {
    pub seed: u64,
    /// Channels the target is built from, with mixing weight and lag (s).
    pub drivers: Vec<(String, f64, usize)>,
    /// Channels that do not influence the target.
    pub decoys: Vec<String>,
    pub formula: String,
}

impl SynthMeta {
    pub fn driver_names(&self) -> Vec<&str> {
        self.drivers.iter().map(|(n, _, _)| n.as_str()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub flights: Vec<FlightSeries>,
    pub meta: SynthMeta,
}

const SYNTH_GAIN: f64 = 8.0;

/// Deterministic synthetic flights with `n_channels` channels, the last of
/// which is the target `Vib`.
///
/// Driver channels are smooth sums of three slow sinusoids around 0.5; decoy
/// channels are intermittent plateaus over a low baseline (configuration-like
/// signals). The target is a logistic function of a lagged weighted sum of
/// the drivers, see [`SynthMeta::formula`].
pub fn synth_flights(seed: u64, n_flights: usize, length_s: usize, n_channels: usize) -> Result<SynthCorpus> {
    if n_channels < 2 {
        return Err(DataError::InvalidArgument("need at least 2 channels".into()));
    }
    if length_s < 40 {
        return Err(DataError::InvalidArgument("flights must be at least 40 s long".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_params = n_channels - 1;
    let names: Vec<String> = (1..=n_params).map(|k| format!("P{k:02}")).collect();

    let mut idx: Vec<usize> = (0..n_params).collect();
    idx.shuffle(&mut rng);
    let n_drivers = n_params.div_ceil(2);
    let mut driver_idx = idx[..n_drivers].to_vec();
    driver_idx.sort_unstable();

    let raw: Vec<f64> = (0..n_drivers).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let drivers: Vec<(usize, f64, usize)> = driver_idx
        .iter()
        .zip(&raw)
        .enumerate()
        .map(|(k, (&i, w))| (i, w / total, 2 + 3 * k))
        .collect();
    // periods in seconds of the three sinusoids of every channel
    let periods: Vec<[f64; 3]> = (0..n_params)
        .map(|_| [rng.random_range(40.0..90.0), rng.random_range(90.0..160.0), rng.random_range(160.0..300.0)])
        .collect();

    let noise = Normal::new(0.0, 0.01).expect("valid sigma");
    let target_noise = Normal::new(0.0, 0.005).expect("valid sigma");
    let mut flights = Vec::with_capacity(n_flights);
    for f in 0..n_flights {
        let mut channels: Vec<Channel> = Vec::with_capacity(n_channels);
        for (p, name) in names.iter().enumerate() {
            let values = if driver_idx.contains(&p) {
                let amps: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.13)).collect();
                let phases: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
                (0..length_s)
                    .map(|t| {
                        let s: f64 = (0..3)
                            .map(|m| amps[m] * (2.0 * PI * t as f64 / periods[p][m] + phases[m]).sin())
                            .sum();
                        (0.5 + s + noise.sample(&mut rng)).clamp(0.0, 1.0)
                    })
                    .collect()
            } else {
                let base = rng.random_range(0.0..0.1);
                let mut v = vec![base; length_s];
                for _ in 0..(length_s / 200).max(1) {
                    let dur = rng.random_range(10..=30).min(length_s);
                    let start = rng.random_range(0..=length_s - dur);
                    let level = rng.random_range(0.6..1.0);
                    v[start..start + dur].iter_mut().for_each(|x| *x = level);
                }
                v.into_iter().map(|x| (x + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect()
            };
            channels.push(Channel { name: name.clone(), values });
        }
        let vib: Vec<f64> = (0..length_s)
            .map(|t| {
                let s: f64 = drivers
                    .iter()
                    .map(|&(i, w, lag)| w * channels[i].values[t.saturating_sub(lag)])
                    .sum();
                let v = 1.0 / (1.0 + (-SYNTH_GAIN * (s - 0.5)).exp());
                (v + target_noise.sample(&mut rng)).clamp(0.0, 1.0)
            })
            .collect();
        channels.push(Channel { name: DEFAULT_TARGET.to_string(), values: vib });
        flights.push(FlightSeries::new(format!("flight_{f:04}"), channels, DEFAULT_TARGET)?);
    }

    let mut formula = format!(
        "{DEFAULT_TARGET}[t] = clamp(1 / (1 + exp(-{SYNTH_GAIN} * (s[t] - 0.5))) + N(0, 0.005^2), 0, 1); s[t] ="
    );
    for (k, &(i, w, lag)) in drivers.iter().enumerate() {
        let sep = if k == 0 { " " } else { " + " };
        let _ = write!(formula, "{sep}{w:.6} * {}[t - {lag}]", names[i]);
    }
    formula.push_str(" (indices before 0 clamp to 0)");

    let meta = SynthMeta {
        seed,
        drivers: drivers.iter().map(|&(i, w, lag)| (names[i].clone(), w, lag)).collect(),
        decoys: (0..n_params).filter(|p| !driver_idx.contains(p)).map(|p| names[p].clone()).collect(),
        formula,
    };
    Ok(SynthCorpus { flights, meta })
}

/// Splits a corpus into training and test flights and normalizes both with
/// ranges computed on the training flights only.
pub fn normalize_split(train: &[FlightSeries], test: &[FlightSeries]) -> Result<(Vec<FlightSeries>, Vec<FlightSeries>, NormRanges)> {
    let ranges = NormRanges::from_flights(train)?;
    let norm = |fs: &[FlightSeries]| fs.iter().map(|f| normalize(f, &ranges)).collect::<Result<Vec<_>>>();
    Ok((norm(train)?, norm(test)?, ranges))
}

/// Flight ids of `a` that also appear in `b`.
pub fn shared_flights(a: &WindowedDataset, b: &WindowedDataset) -> Vec<String> {
    let ids: HashSet<&str> = b.flight_ids.iter().map(String::as_str).collect();
    a.flight_ids.iter().filter(|id| ids.contains(id.as_str())).cloned().collect()
}
