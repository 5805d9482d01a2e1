//! Event ingestion, magnitude/target transforms, dense timelines and splits.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One PRIO-grid style cell with its centroid in decimal degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub cell_id: i64,
    pub lat: f64,
    pub lon: f64,
}

/// One cell × month observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMonthRecord {
    pub cell_id: i64,
    pub month_index: i64,
    pub fatalities: u64,
    pub magnitude: f64,
    pub target: u8,
}

impl CellMonthRecord {
    pub fn new(cell_id: i64, month_index: i64, fatalities: u64) -> Self {
        Self {
            cell_id,
            month_index,
            fatalities,
            magnitude: magnitude_transform(fatalities),
            target: binary_target(fatalities),
        }
    }
}

/// Conflict magnitude `ln(1 + fatalities)`.
pub fn magnitude_transform(fatalities: u64) -> f64 {
    (fatalities as f64).ln_1p()
}

/// 1 when any fatality was recorded.
pub fn binary_target(fatalities: u64) -> u8 {
    u8::from(fatalities > 0)
}

/// Inclusive month-index interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MonthRange {
    pub start: i64,
    pub end: i64,
}

impl MonthRange {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidData(format!("empty month range {start}..{end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, month: i64) -> bool {
        (self.start..=self.end).contains(&month)
    }

    pub fn months(&self) -> impl Iterator<Item = i64> {
        self.start..=self.end
    }
}

impl std::fmt::Display for MonthRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl std::str::FromStr for MonthRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| format!("expected `start..end`, got `{s}`"))?;
        let a: i64 = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
        let b: i64 = b.trim().parse().map_err(|_| format!("bad range end `{b}`"))?;
        MonthRange::new(a, b).map_err(|e| e.to_string())
    }
}

/// Train / validation / test month ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: MonthRange,
    pub validation: MonthRange,
    pub test: MonthRange,
    /// Calendar month of index 0 (`YYYY-MM`), informational only.
    pub start_month: Option<String>,
}

impl SplitSpec {
    pub fn new(train: MonthRange, validation: MonthRange, test: MonthRange) -> Result<Self> {
        let s = Self {
            train,
            validation,
            test,
            start_month: None,
        };
        s.validate()?;
        Ok(s)
    }

    /// The 300 + 36 + 36 month layout.
    pub fn replication() -> Self {
        Self {
            train: MonthRange { start: 0, end: 299 },
            validation: MonthRange { start: 300, end: 335 },
            test: MonthRange { start: 336, end: 371 },
            start_month: Some("1990-01".into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.start < 0 || self.train.end >= self.validation.start || self.validation.end >= self.test.start {
            return Err(Error::InvalidData(format!(
                "splits must be disjoint and ordered train < validation < test, got {} / {} / {}",
                self.train, self.validation, self.test
            )));
        }
        Ok(())
    }

    /// Months the final model is fitted on (train and validation combined).
    pub fn fit_range(&self) -> MonthRange {
        MonthRange {
            start: self.train.start,
            end: self.validation.end,
        }
    }

    /// Every month from the start of training to the end of the test range.
    pub fn window(&self) -> MonthRange {
        MonthRange {
            start: self.train.start,
            end: self.test.end,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut train = None;
        let mut validation = None;
        let mut test = None;
        let mut start_month = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cfg_err = |message: String| Error::Config { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("expected `key=value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let range = || v.parse::<MonthRange>().map_err(cfg_err);
            match k {
                "train" => train = Some(range()?),
                "validation" => validation = Some(range()?),
                "test" => test = Some(range()?),
                "start_month" => start_month = Some(v.to_string()),
                other => return Err(cfg_err(format!("unknown key `{other}`"))),
            }
        }
        let missing = |name: &str| Error::Config {
            line: 0,
            message: format!("split file lacks `{name}`"),
        };
        let spec = SplitSpec {
            train: train.ok_or_else(|| missing("train"))?,
            validation: validation.ok_or_else(|| missing("validation"))?,
            test: test.ok_or_else(|| missing("test"))?,
            start_month,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(m) = &self.start_month {
            s.push_str(&format!("start_month={m}\n"));
        }
        s.push_str(&format!(
            "train={}\nvalidation={}\ntest={}\n",
            self.train, self.validation, self.test
        ));
        s
    }
}

/// Dense per-cell series over a month window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub cell_id: i64,
    pub months: Vec<i64>,
    pub values: Vec<f64>,
}

impl Timeline {
    pub fn months_f64(&self) -> Vec<f64> {
        self.months.iter().map(|&m| m as f64).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Restriction to the months inside `range`.
    pub fn restrict(&self, range: MonthRange) -> Timeline {
        let (months, values) = self
            .months
            .iter()
            .zip(&self.values)
            .filter(|(m, _)| range.contains(**m))
            .map(|(&m, &v)| (m, v))
            .unzip();
        Timeline {
            cell_id: self.cell_id,
            months,
            values,
        }
    }
}

/// Parsed contents of an event file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventData {
    pub records: Vec<CellMonthRecord>,
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Deserialize)]
struct EventRow {
    cell_id: String,
    month_index: String,
    lat: String,
    lon: String,
    fatalities: String,
}

pub const EVENT_HEADER: [&str; 5] = ["cell_id", "month_index", "lat", "lon", "fatalities"];

/// Reads an event CSV (`cell_id,month_index,lat,lon,fatalities`).
///
/// Rows are numbered from 1 for the header line. Months outside `window`
/// are rejected when a window is given.
pub fn ingest_events(path: &Path, window: Option<MonthRange>) -> Result<EventData> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events(&text, path, window)
}

pub fn parse_events(text: &str, path: &Path, window: Option<MonthRange>) -> Result<EventData> {
    if text.trim().is_empty() {
        return Ok(EventData::default());
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let bad = |row: usize, message: String| Error::MalformedRow {
        path: path.to_path_buf(),
        row,
        message,
    };
    let header = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != EVENT_HEADER {
        return Err(bad(1, format!("expected header `{}`", EVENT_HEADER.join(","))));
    }

    let mut records = Vec::new();
    let mut cells: BTreeMap<i64, (GridCell, usize)> = BTreeMap::new();
    let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
    for (i, row) in reader.deserialize::<EventRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| bad(line, e.to_string()))?;
        let int = |name: &str, v: &str| {
            v.parse::<i64>()
                .map_err(|_| bad(line, format!("{name} `{v}` is not an integer")))
        };
        let real = |name: &str, v: &str| match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(bad(line, format!("{name} `{v}` is not a finite number"))),
        };
        let cell_id = int("cell_id", &row.cell_id)?;
        let month = int("month_index", &row.month_index)?;
        let lat = real("lat", &row.lat)?;
        let lon = real("lon", &row.lon)?;
        let fat = int("fatalities", &row.fatalities)?;
        if fat < 0 {
            return Err(bad(line, format!("negative fatalities {fat}")));
        }
        if month < 0 {
            return Err(bad(line, format!("negative month index {month}")));
        }
        if let Some(w) = window {
            if !w.contains(month) {
                return Err(bad(line, format!("month {month} outside window {w}")));
            }
        }
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(bad(line, format!("centroid ({lat}, {lon}) out of range")));
        }
        if let Some(&first) = seen.get(&(cell_id, month)) {
            return Err(Error::DuplicateRecord {
                cell_id,
                month_index: month,
                first_row: first,
                second_row: line,
            });
        }
        seen.insert((cell_id, month), line);
        match cells.get(&cell_id) {
            Some((c, first)) if c.lat != lat || c.lon != lon => {
                return Err(bad(line, format!("cell {cell_id} centroid differs from row {first}")));
            }
            Some(_) => {}
            None => {
                cells.insert(cell_id, (GridCell { cell_id, lat, lon }, line));
            }
        }
        records.push(CellMonthRecord::new(cell_id, month, fat as u64));
    }
    Ok(EventData {
        records,
        cells: cells.into_values().map(|(c, _)| c).collect(),
    })
}

/// Writes records back to the event CSV format.
pub fn write_events(path: &Path, data: &EventData) -> Result<()> {
    let cells: HashMap<i64, &GridCell> = data.cells.iter().map(|c| (c.cell_id, c)).collect();
    let mut out = String::from("cell_id,month_index,lat,lon,fatalities\n");
    for r in &data.records {
        let c = cells.get(&r.cell_id).ok_or(Error::UnknownCell(r.cell_id))?;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.cell_id, r.month_index, c.lat, c.lon, r.fatalities
        ));
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Which per-record value a timeline carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimelineValue {
    Magnitude,
    Fatalities,
}

/// One zero-filled timeline per cell over `window`, in cell order.
pub fn build_timelines(
    records: &[CellMonthRecord],
    cells: &[GridCell],
    window: MonthRange,
    value: TimelineValue,
) -> Result<Vec<Timeline>> {
    let index: HashMap<i64, usize> = cells.iter().enumerate().map(|(i, c)| (c.cell_id, i)).collect();
    let months: Vec<i64> = window.months().collect();
    let mut timelines: Vec<Timeline> = cells
        .iter()
        .map(|c| Timeline {
            cell_id: c.cell_id,
            months: months.clone(),
            values: vec![0.0; months.len()],
        })
        .collect();
    for r in records {
        let &ci = index.get(&r.cell_id).ok_or(Error::UnknownCell(r.cell_id))?;
        if !window.contains(r.month_index) {
            return Err(Error::InvalidData(format!(
                "record month {} outside window {window}",
                r.month_index
            )));
        }
        timelines[ci].values[(r.month_index - window.start) as usize] = match value {
            TimelineValue::Magnitude => r.magnitude,
            TimelineValue::Fatalities => r.fatalities as f64,
        };
    }
    Ok(timelines)
}

/// True when some run of `window_months` consecutive months holds at least
/// `min_conflict_months` months with a positive value.
pub fn has_conflict_run(values: &[f64], min_conflict_months: usize, window_months: usize) -> bool {
    if min_conflict_months == 0 {
        return true;
    }
    let w = window_months.min(values.len());
    if w == 0 {
        return false;
    }
    let mut count = values[..w].iter().filter(|&&v| v > 0.0).count();
    if count >= min_conflict_months {
        return true;
    }
    for i in w..values.len() {
        count += usize::from(values[i] > 0.0);
        count -= usize::from(values[i - w] > 0.0);
        if count >= min_conflict_months {
            return true;
        }
    }
    false
}

/// Timelines with at least `min_conflict_months` conflict months inside some
/// `window_months`-long stretch of `training` months.
pub fn select_training_timelines<'a>(
    timelines: &'a [Timeline],
    training: MonthRange,
    min_conflict_months: usize,
    window_months: usize,
) -> Vec<&'a Timeline> {
    timelines
        .iter()
        .filter(|t| {
            let train = t.restrict(training);
            has_conflict_run(&train.values, min_conflict_months, window_months)
        })
        .collect()
}

/// The `n` records with the highest magnitude; ties go to the lower cell id.
pub fn select_spatial_subset(records: &[CellMonthRecord], n: usize) -> Vec<CellMonthRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then(a.cell_id.cmp(&b.cell_id)));
    sorted.truncate(n.max(1));
    sorted
}

/// Records for every cell in one month, taken from fatality timelines.
pub fn dense_month(fatality_timelines: &[Timeline], month: i64) -> Vec<CellMonthRecord> {
    fatality_timelines
        .iter()
        .filter_map(|t| {
            let first = *t.months.first()?;
            let idx = match usize::try_from(month - first) {
                Ok(i) if t.months.get(i) == Some(&month) => i,
                _ => t.months.iter().position(|&m| m == month)?,
            };
            let fat = t.values[idx].round().max(0.0) as u64;
            Some(CellMonthRecord::new(t.cell_id, month, fat))
        })
        .collect()
}

/// Row/column layout of cell centroids for raster exports. Rows run from
/// north to south, columns from west to east.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLayout {
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    positions: HashMap<i64, (usize, usize)>,
}

impl GridLayout {
    pub fn new(cells: &[GridCell]) -> Self {
        let mut lats: Vec<f64> = cells.iter().map(|c| c.lat).collect();
        let mut lons: Vec<f64> = cells.iter().map(|c| c.lon).collect();
        lats.sort_by(|a, b| b.total_cmp(a));
        lats.dedup();
        lons.sort_by(f64::total_cmp);
        lons.dedup();
        let positions = cells
            .iter()
            .map(|c| {
                let r = lats.iter().position(|&l| l == c.lat).expect("lat present");
                let col = lons.iter().position(|&l| l == c.lon).expect("lon present");
                (c.cell_id, (r, col))
            })
            .collect();
        Self { lats, lons, positions }
    }

    /// `(lat_row, lon_col)` of a cell.
    pub fn position(&self, cell_id: i64) -> Option<(usize, usize)> {
        self.positions.get(&cell_id).copied()
    }

    /// Renders per-cell strings as a CSV matrix; cells without a value are empty.
    pub fn render<F>(&self, value: F) -> String
    where
        F: Fn(i64) -> Option<String>,
    {
        let mut grid = vec![vec![String::new(); self.lons.len()]; self.lats.len()];
        for (&cell, &(r, c)) in &self.positions {
            if let Some(v) = value(cell) {
                grid[r][c] = v;
            }
        }
        let mut out = String::from("lat\\lon");
        for lon in &self.lons {
            out.push_str(&format!(",{lon}"));
        }
        out.push('\n');
        for (r, row) in grid.iter().enumerate() {
            out.push_str(&self.lats[r].to_string());
            for v in row {
                out.push(',');
                out.push_str(v);
            }
            out.push('\n');
        }
        out
    }
}
