//! Check-in and taxi ingestion: delimiter-separated parsing with explicit
//! column mappings, uniform lat/lon gridding, and per-time-window traffic
//! context matrices (inner / in-flow / out-flow counts per grid cell).

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckinEvent {
    pub user_id: String,
    pub poi_id: String,
    pub category_id: String,
    pub category_name: String,
    pub lat: f64,
    pub lon: f64,
    /// UTC seconds.
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxiTrip {
    pub trip_id: String,
    pub pickup_lat: f64,
    pub pickup_lon: f64,
    pub dropoff_lat: f64,
    pub dropoff_lon: f64,
    pub pickup_time: i64,
    pub dropoff_time: i64,
}

/// Uniform lat/lon grid over a bounding box, row-major cell indexing
/// (rows segment latitude, columns segment longitude).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows < 1 || self.cols < 1 {
            return Err(Error::Config("grid rows/cols must be >= 1".into()));
        }
        if !(self.lat_max > self.lat_min) || !(self.lon_max > self.lon_min) {
            return Err(Error::Config("grid bbox is degenerate".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max
    }

    /// Clamp a point into the bbox (used to assign out-of-bbox POIs to the
    /// nearest boundary cell).
    pub fn clamp(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            lat.clamp(self.lat_min, self.lat_max),
            lon.clamp(self.lon_min, self.lon_max),
        )
    }
}

/// Row-major cell index for a point, or `None` when the point lies outside
/// the bbox. Cells are half-open `[lo, hi)` in both axes; the global max
/// edges belong to the last row/column.
pub fn cell_of(lat: f64, lon: f64, grid: &GridSpec) -> Option<usize> {
    if !grid.contains(lat, lon) {
        return None;
    }
    let lat_step = (grid.lat_max - grid.lat_min) / grid.rows as f64;
    let lon_step = (grid.lon_max - grid.lon_min) / grid.cols as f64;
    let row = (((lat - grid.lat_min) / lat_step) as usize).min(grid.rows - 1);
    let col = (((lon - grid.lon_min) / lon_step) as usize).min(grid.cols - 1);
    Some(row * grid.cols + col)
}

/// Traffic counts for one time window: one row per grid cell, columns are
/// (inner, in-flow, out-flow).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalContext {
    pub window_id: i64,
    /// `[start, end)` in UTC seconds.
    pub start: i64,
    pub end: i64,
    /// Flattened m x 3 matrix, row-major.
    pub counts: Vec<f64>,
}

impl TemporalContext {
    pub fn zeros(window_id: i64, start: i64, end: i64, m: usize) -> Self {
        TemporalContext {
            window_id,
            start,
            end,
            counts: vec![0.0; m * 3],
        }
    }

    pub fn cells(&self) -> usize {
        self.counts.len() / 3
    }

    pub fn inner(&self, cell: usize) -> f64 {
        self.counts[cell * 3]
    }

    pub fn inflow(&self, cell: usize) -> f64 {
        self.counts[cell * 3 + 1]
    }

    pub fn outflow(&self, cell: usize) -> f64 {
        self.counts[cell * 3 + 2]
    }
}

/// How to read a delimiter-separated file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvFormat {
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for CsvFormat {
    fn default() -> Self {
        CsvFormat {
            delimiter: b',',
            has_header: true,
        }
    }
}

/// Column indices for check-in files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckinColumns {
    pub user_id: usize,
    pub poi_id: usize,
    pub category_id: usize,
    pub category_name: usize,
    pub lat: usize,
    pub lon: usize,
    pub timestamp: usize,
}

impl Default for CheckinColumns {
    fn default() -> Self {
        CheckinColumns {
            user_id: 0,
            poi_id: 1,
            category_id: 2,
            category_name: 3,
            lat: 4,
            lon: 5,
            timestamp: 6,
        }
    }
}

/// Column indices for taxi trip files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxiColumns {
    pub trip_id: usize,
    pub pickup_lat: usize,
    pub pickup_lon: usize,
    pub dropoff_lat: usize,
    pub dropoff_lon: usize,
    pub pickup_time: usize,
    pub dropoff_time: usize,
}

impl Default for TaxiColumns {
    fn default() -> Self {
        TaxiColumns {
            trip_id: 0,
            pickup_lat: 1,
            pickup_lon: 2,
            dropoff_lat: 3,
            dropoff_lon: 4,
            pickup_time: 5,
            dropoff_time: 6,
        }
    }
}

/// Tally of rows seen / kept / skipped while parsing one file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows: usize,
    pub kept: usize,
    pub skipped: usize,
    pub skipped_by_reason: BTreeMap<String, usize>,
}

impl ParseReport {
    fn skip(&mut self, reason: &str) {
        self.skipped += 1;
        *self.skipped_by_reason.entry(reason.to_string()).or_insert(0) += 1;
    }
}

/// Accepts epoch seconds or ISO-8601 (`2012-04-03T18:00:00Z` or the same
/// without an offset, taken as UTC).
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(epoch) = s.parse::<i64>() {
        return Some(epoch);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    if let Ok(naive) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
        return Some(naive.and_utc().timestamp());
    }
    if let Ok(naive) = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
        return Some(naive.and_utc().timestamp());
    }
    None
}

fn field<'r>(rec: &'r csv::StringRecord, idx: usize) -> Option<&'r str> {
    rec.get(idx).map(str::trim)
}

fn parse_coord(s: &str, lo: f64, hi: f64) -> Option<f64> {
    let v: f64 = s.parse().ok()?;
    if v.is_finite() && v >= lo && v <= hi {
        Some(v)
    } else {
        None
    }
}

fn open_reader(path: &Path, format: &CsvFormat) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(format.has_header)
        .flexible(true)
        .from_reader(file))
}

/// Parse a check-in file. Malformed rows are skipped and tallied; the
/// returned events are sorted ascending by timestamp (stable on ties).
pub fn parse_checkins(
    path: &Path,
    format: &CsvFormat,
    cols: &CheckinColumns,
) -> Result<(Vec<CheckinEvent>, ParseReport)> {
    let mut reader = open_reader(path, format)?;
    let mut events = Vec::new();
    let mut report = ParseReport::default();

    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        report.rows += 1;

        let Some(user_id) = field(&rec, cols.user_id).filter(|s| !s.is_empty()) else {
            report.skip("missing_user_id");
            continue;
        };
        let Some(poi_id) = field(&rec, cols.poi_id).filter(|s| !s.is_empty()) else {
            report.skip("missing_poi_id");
            continue;
        };
        let Some(category_id) = field(&rec, cols.category_id).filter(|s| !s.is_empty()) else {
            report.skip("missing_category_id");
            continue;
        };
        let Some(category_name) = field(&rec, cols.category_name).filter(|s| !s.is_empty()) else {
            report.skip("missing_category_name");
            continue;
        };
        let Some(lat) = field(&rec, cols.lat).and_then(|s| parse_coord(s, -90.0, 90.0)) else {
            report.skip("bad_lat");
            continue;
        };
        let Some(lon) = field(&rec, cols.lon).and_then(|s| parse_coord(s, -180.0, 180.0)) else {
            report.skip("bad_lon");
            continue;
        };
        let Some(timestamp) = field(&rec, cols.timestamp).and_then(parse_timestamp) else {
            report.skip("bad_timestamp");
            continue;
        };

        report.kept += 1;
        events.push(CheckinEvent {
            user_id: user_id.to_string(),
            poi_id: poi_id.to_string(),
            category_id: category_id.to_string(),
            category_name: category_name.to_string(),
            lat,
            lon,
            timestamp,
        });
    }

    if events.is_empty() {
        return Err(Error::parse(path, "no valid check-in rows"));
    }
    events.sort_by_key(|e| e.timestamp);
    Ok((events, report))
}

/// Parse a taxi trip file; rows with invalid coordinates or
/// `dropoff_time < pickup_time` are skipped and tallied. Output sorted by
/// pickup time.
pub fn parse_taxi(
    path: &Path,
    format: &CsvFormat,
    cols: &TaxiColumns,
) -> Result<(Vec<TaxiTrip>, ParseReport)> {
    let mut reader = open_reader(path, format)?;
    let mut trips = Vec::new();
    let mut report = ParseReport::default();

    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        report.rows += 1;

        let Some(trip_id) = field(&rec, cols.trip_id).filter(|s| !s.is_empty()) else {
            report.skip("missing_trip_id");
            continue;
        };
        let pickup_lat = field(&rec, cols.pickup_lat).and_then(|s| parse_coord(s, -90.0, 90.0));
        let pickup_lon = field(&rec, cols.pickup_lon).and_then(|s| parse_coord(s, -180.0, 180.0));
        let dropoff_lat = field(&rec, cols.dropoff_lat).and_then(|s| parse_coord(s, -90.0, 90.0));
        let dropoff_lon = field(&rec, cols.dropoff_lon).and_then(|s| parse_coord(s, -180.0, 180.0));
        let (Some(pickup_lat), Some(pickup_lon), Some(dropoff_lat), Some(dropoff_lon)) =
            (pickup_lat, pickup_lon, dropoff_lat, dropoff_lon)
        else {
            report.skip("bad_coordinates");
            continue;
        };
        let pickup_time = field(&rec, cols.pickup_time).and_then(parse_timestamp);
        let dropoff_time = field(&rec, cols.dropoff_time).and_then(parse_timestamp);
        let (Some(pickup_time), Some(dropoff_time)) = (pickup_time, dropoff_time) else {
            report.skip("bad_timestamp");
            continue;
        };
        if dropoff_time < pickup_time {
            report.skip("dropoff_before_pickup");
            continue;
        }

        report.kept += 1;
        trips.push(TaxiTrip {
            trip_id: trip_id.to_string(),
            pickup_lat,
            pickup_lon,
            dropoff_lat,
            dropoff_lon,
            pickup_time,
            dropoff_time,
        });
    }

    if trips.is_empty() {
        return Err(Error::parse(path, "no valid taxi rows"));
    }
    trips.sort_by_key(|t| t.pickup_time);
    Ok((trips, report))
}

/// One traffic matrix per `window_len`-second window covering the span of
/// pickup times. Windows are aligned to epoch multiples of `window_len`
/// (`window_id = floor(t / window_len)`), so hour-long windows sit on hour
/// boundaries. A trip belongs to the window containing its pickup time; a
/// same-cell trip counts as inner traffic, a cross-cell trip as out-flow at
/// the pickup cell and in-flow at the dropoff cell, and endpoints outside
/// the bbox contribute nothing on their side.
pub fn compute_temporal_contexts(
    trips: &[TaxiTrip],
    grid: &GridSpec,
    window_len: i64,
) -> Result<Vec<TemporalContext>> {
    grid.validate()?;
    if window_len <= 0 {
        return Err(Error::Config("window_len must be > 0".into()));
    }
    if trips.is_empty() {
        return Ok(Vec::new());
    }

    let m = grid.cell_count();
    let first = trips.iter().map(|t| t.pickup_time).min().unwrap();
    let last = trips.iter().map(|t| t.pickup_time).max().unwrap();
    let first_id = first.div_euclid(window_len);
    let last_id = last.div_euclid(window_len);

    let mut contexts: Vec<TemporalContext> = (first_id..=last_id)
        .map(|id| TemporalContext::zeros(id, id * window_len, (id + 1) * window_len, m))
        .collect();

    for trip in trips {
        let id = trip.pickup_time.div_euclid(window_len);
        let ctx = &mut contexts[(id - first_id) as usize];
        let pickup = cell_of(trip.pickup_lat, trip.pickup_lon, grid);
        let dropoff = cell_of(trip.dropoff_lat, trip.dropoff_lon, grid);
        match (pickup, dropoff) {
            (Some(a), Some(b)) if a == b => ctx.counts[a * 3] += 1.0,
            (pickup, dropoff) => {
                if let Some(a) = pickup {
                    ctx.counts[a * 3 + 2] += 1.0;
                }
                if let Some(b) = dropoff {
                    ctx.counts[b * 3 + 1] += 1.0;
                }
            }
        }
    }

    Ok(contexts)
}

/// Contiguous windows with time lookup. Queries before the first window get
/// the all-zeros context; queries after the last window get the last window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextTimeline {
    contexts: Vec<TemporalContext>,
    zero: TemporalContext,
}

impl ContextTimeline {
    pub fn new(contexts: Vec<TemporalContext>, m: usize) -> Self {
        let zero = TemporalContext::zeros(i64::MIN, 0, 0, m);
        ContextTimeline { contexts, zero }
    }

    pub fn windows(&self) -> &[TemporalContext] {
        &self.contexts
    }

    pub fn cells(&self) -> usize {
        self.zero.cells()
    }

    /// The context whose window contains `time`; the latest window starting
    /// at or before `time` otherwise; the zero context before all windows.
    pub fn at(&self, time: i64) -> &TemporalContext {
        if self.contexts.is_empty() || time < self.contexts[0].start {
            return &self.zero;
        }
        let idx = self
            .contexts
            .partition_point(|c| c.start <= time)
            .saturating_sub(1);
        &self.contexts[idx]
    }
}
