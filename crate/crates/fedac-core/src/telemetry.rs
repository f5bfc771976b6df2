//! Network-telemetry preprocessing: CSV ingestion with column-type inference,
//! nanosecond-to-civil-time conversion, zero-variance pruning, fault labeling
//! from event windows, balancing, train/test splitting, and text-query
//! rendering.

use crate::rng::derive_rng;
use chrono::{Duration, FixedOffset, NaiveDateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: {message}")]
    Cell { row: usize, column: String, message: String },
    #[error("timestamp `{0}` not in `YYYY-MM-DD HH:MM:SS.ffffff` form")]
    BadTimestamp(String),
    #[error("event row {row}: {message}")]
    Event { row: usize, message: String },
    #[error("not enough no-fault records: need {need}, have {have}")]
    InsufficientNoFault { need: usize, have: usize },
    #[error("dataset has no fault records")]
    NoFaults,
}

/// One telemetry row. Numeric cells that failed to parse are absent from
/// `numeric` (missing); `raw` preserves the original cells in column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub name: String,
    pub time_ns: u64,
    pub encoding_path: String,
    pub producer: String,
    pub numeric: BTreeMap<String, f64>,
    pub text: BTreeMap<String, String>,
    pub raw: Vec<String>,
}

/// Parsed telemetry file: schema plus records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryTable {
    /// Header names in file order.
    pub columns: Vec<String>,
    pub numeric_columns: Vec<String>,
    pub text_columns: Vec<String>,
    pub records: Vec<TelemetryRecord>,
    /// Unparseable cells in numeric columns, kept as missing.
    pub missing_cells: usize,
}

const TIME_COLUMN: &str = "time";
const PRODUCER_COLUMN: &str = "Producer";
const NAME_COLUMN: &str = "name";
const ENCODING_COLUMN: &str = "EncodingPath";

fn reserved(column: &str) -> bool {
    matches!(column, TIME_COLUMN | PRODUCER_COLUMN | NAME_COLUMN | ENCODING_COLUMN)
}

/// Parse a telemetry CSV.
///
/// A non-reserved column is treated as numeric when at least one non-empty
/// cell parses as a float and at least half of its non-empty cells do;
/// unparseable cells in numeric columns are recorded as missing.
pub fn parse_telemetry_csv(path: &Path) -> Result<TelemetryTable, TelemetryError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| TelemetryError::Io { path: path.display().to_string(), source })?;
    parse_telemetry_csv_str(&text)
}

/// [`parse_telemetry_csv`] over an in-memory string.
pub fn parse_telemetry_csv_str(text: &str) -> Result<TelemetryTable, TelemetryError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(TelemetryError::Empty("no header row".into()));
    }
    for required in [TIME_COLUMN, PRODUCER_COLUMN] {
        if !headers.iter().any(|h| h == required) {
            return Err(TelemetryError::MissingColumn(required.into()));
        }
    }
    let rows: Vec<Vec<String>> = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(|c| c.to_string()).collect()))
        .collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(TelemetryError::Empty("no data rows".into()));
    }

    // Column-type inference over non-reserved columns.
    let mut numeric_columns = Vec::new();
    let mut text_columns = Vec::new();
    for (idx, column) in headers.iter().enumerate() {
        if reserved(column) {
            continue;
        }
        let mut ok = 0usize;
        let mut bad = 0usize;
        for row in &rows {
            let cell = row[idx].trim();
            if cell.is_empty() {
                continue;
            }
            if cell.parse::<f64>().is_ok() {
                ok += 1;
            } else {
                bad += 1;
            }
        }
        if ok >= 1 && ok >= bad {
            numeric_columns.push(column.clone());
        } else {
            text_columns.push(column.clone());
        }
    }

    let index_of = |name: &str| headers.iter().position(|h| h == name);
    let time_idx = index_of(TIME_COLUMN).unwrap();
    let producer_idx = index_of(PRODUCER_COLUMN).unwrap();
    let name_idx = index_of(NAME_COLUMN);
    let encoding_idx = index_of(ENCODING_COLUMN);

    let mut records = Vec::with_capacity(rows.len());
    let mut missing_cells = 0usize;
    for (row_no, row) in rows.iter().enumerate() {
        let time_ns: u64 = row[time_idx].trim().parse().map_err(|_| TelemetryError::Cell {
            row: row_no + 2, // 1-based, counting the header
            column: TIME_COLUMN.into(),
            message: format!("`{}` is not an unsigned nanosecond timestamp", row[time_idx]),
        })?;
        let producer = row[producer_idx].trim().to_string();
        if producer.is_empty() {
            return Err(TelemetryError::Cell {
                row: row_no + 2,
                column: PRODUCER_COLUMN.into(),
                message: "producer must be non-empty".into(),
            });
        }
        let mut numeric = BTreeMap::new();
        let mut text = BTreeMap::new();
        for (idx, column) in headers.iter().enumerate() {
            if reserved(column) {
                continue;
            }
            let cell = row[idx].trim();
            if numeric_columns.contains(column) {
                match cell.parse::<f64>() {
                    Ok(v) if !cell.is_empty() => {
                        numeric.insert(column.clone(), v);
                    }
                    _ => {
                        missing_cells += 1;
                    }
                }
            } else {
                text.insert(column.clone(), cell.to_string());
            }
        }
        records.push(TelemetryRecord {
            name: name_idx.map(|i| row[i].clone()).unwrap_or_default(),
            time_ns,
            encoding_path: encoding_idx.map(|i| row[i].clone()).unwrap_or_default(),
            producer,
            numeric,
            text,
            raw: row.clone(),
        });
    }
    Ok(TelemetryTable { columns: headers, numeric_columns, text_columns, records, missing_cells })
}

const PDT_OFFSET_SECONDS: i32 = -7 * 3600;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.6f";

/// Render Unix nanoseconds as civil time at fixed UTC-07:00, microsecond
/// precision (nanoseconds truncated).
pub fn ns_to_pdt(time_ns: u64) -> String {
    let offset = FixedOffset::east_opt(PDT_OFFSET_SECONDS).unwrap();
    let secs = (time_ns / 1_000_000_000) as i64;
    let micros = (time_ns % 1_000_000_000) / 1000;
    let utc = Utc.timestamp_opt(secs, (micros * 1000) as u32).unwrap();
    utc.with_timezone(&offset).format(TIMESTAMP_FORMAT).to_string()
}

/// Parse the [`ns_to_pdt`] format back to Unix nanoseconds.
pub fn pdt_to_ns(text: &str) -> Result<u64, TelemetryError> {
    let naive = NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S%.f")
        .map_err(|_| TelemetryError::BadTimestamp(text.into()))?;
    let utc = naive - Duration::seconds(PDT_OFFSET_SECONDS as i64);
    let ns = utc.and_utc().timestamp_nanos_opt().ok_or_else(|| TelemetryError::BadTimestamp(text.into()))?;
    u64::try_from(ns).map_err(|_| TelemetryError::BadTimestamp(text.into()))
}

/// Drop numeric columns whose present values are all identical (or all
/// missing); returns the pruned table and the dropped column names.
pub fn drop_zero_variance_columns(table: &TelemetryTable) -> (TelemetryTable, Vec<String>) {
    let mut dropped = Vec::new();
    for column in &table.numeric_columns {
        let mut values = table.records.iter().filter_map(|r| r.numeric.get(column));
        let keep = match values.next() {
            None => false,
            Some(first) => values.any(|v| v != first),
        };
        if !keep {
            dropped.push(column.clone());
        }
    }
    let mut pruned = table.clone();
    pruned.numeric_columns.retain(|c| !dropped.contains(c));
    let dropped_indices: Vec<usize> = table
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| dropped.contains(c))
        .map(|(i, _)| i)
        .collect();
    pruned.columns = table.columns.iter().filter(|c| !dropped.contains(c)).cloned().collect();
    for record in &mut pruned.records {
        for column in &dropped {
            record.numeric.remove(column);
        }
        record.raw = record
            .raw
            .iter()
            .enumerate()
            .filter(|(i, _)| !dropped_indices.contains(i))
            .map(|(_, c)| c.clone())
            .collect();
    }
    (pruned, dropped)
}

/// Port state changes recorded in the dataset's event logs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventType {
    TransceiverPullReinsert,
    AdminStateChange,
    LinkStateChange,
}

impl std::fmt::Display for EventType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::TransceiverPullReinsert => write!(f, "transceiver_pull_reinsert"),
            Self::AdminStateChange => write!(f, "admin_state_change"),
            Self::LinkStateChange => write!(f, "link_state_change"),
        }
    }
}

impl std::str::FromStr for EventType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "transceiver_pull_reinsert" => Ok(Self::TransceiverPullReinsert),
            "admin_state_change" => Ok(Self::AdminStateChange),
            "link_state_change" => Ok(Self::LinkStateChange),
            other => Err(format!("unknown event type `{other}`")),
        }
    }
}

/// One fault window, scoped to a producer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub producer: String,
    pub event_type: EventType,
    pub start_ns: u64,
    pub end_ns: u64,
}

/// Parse the event CSV `producer,event_type,start_pdt,end_pdt` with
/// timestamps in the [`ns_to_pdt`] format.
pub fn parse_event_csv_str(text: &str) -> Result<Vec<FaultEvent>, TelemetryError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut events = Vec::new();
    for (row_no, row) in reader.records().enumerate() {
        let row = row?;
        let fail = |message: String| TelemetryError::Event { row: row_no + 2, message };
        if row.len() != 4 {
            return Err(fail(format!("expected 4 fields, got {}", row.len())));
        }
        let event_type: EventType = row[1].parse().map_err(fail)?;
        let start_ns = pdt_to_ns(&row[2])?;
        let end_ns = pdt_to_ns(&row[3])?;
        if start_ns > end_ns {
            return Err(fail(format!("window start {} after end {}", &row[2], &row[3])));
        }
        events.push(FaultEvent { producer: row[0].to_string(), event_type, start_ns, end_ns });
    }
    Ok(events)
}

pub fn parse_event_csv(path: &Path) -> Result<Vec<FaultEvent>, TelemetryError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| TelemetryError::Io { path: path.display().to_string(), source })?;
    parse_event_csv_str(&text)
}

/// Labeled telemetry records; `labels[i]` covers `table.records[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub table: TelemetryTable,
    pub labels: Vec<bool>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn fault_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            table: TelemetryTable {
                columns: self.table.columns.clone(),
                numeric_columns: self.table.numeric_columns.clone(),
                text_columns: self.table.text_columns.clone(),
                records: indices.iter().map(|&i| self.table.records[i].clone()).collect(),
                missing_cells: self.table.missing_cells,
            },
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Label a record 1 when its producer matches an event's producer and its
/// timestamp falls inside the (inclusive, optionally padded) window.
pub fn label_faults(table: &TelemetryTable, events: &[FaultEvent], padding_ns: u64) -> LabeledDataset {
    let labels = table
        .records
        .iter()
        .map(|record| {
            events.iter().any(|event| {
                event.producer == record.producer
                    && record.time_ns >= event.start_ns.saturating_sub(padding_ns)
                    && record.time_ns <= event.end_ns.saturating_add(padding_ns)
            })
        })
        .collect();
    LabeledDataset { table: table.clone(), labels }
}

/// Keep every fault record and a seeded uniform sample (without replacement)
/// of equally many no-fault records; shuffle the result.
pub fn balance_dataset(dataset: &LabeledDataset, seed: u64) -> Result<LabeledDataset, TelemetryError> {
    let fault: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i]).collect();
    let mut clean: Vec<usize> = (0..dataset.len()).filter(|&i| !dataset.labels[i]).collect();
    if fault.is_empty() {
        return Err(TelemetryError::NoFaults);
    }
    if clean.len() < fault.len() {
        return Err(TelemetryError::InsufficientNoFault { need: fault.len(), have: clean.len() });
    }
    let mut stream = derive_rng(seed, "balance");
    clean.shuffle(&mut stream);
    let mut chosen: Vec<usize> = fault.iter().chain(clean.iter().take(fault.len())).copied().collect();
    chosen.shuffle(&mut stream);
    Ok(dataset.select(&chosen))
}

/// Seeded shuffle then split; the train side gets `floor(n * fraction)`.
pub fn split_train_test(dataset: &LabeledDataset, train_fraction: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
    assert!(train_fraction > 0.0 && train_fraction < 1.0, "fraction must lie in (0, 1)");
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut stream = derive_rng(seed, "split");
    indices.shuffle(&mut stream);
    let cut = (dataset.len() as f64 * train_fraction).floor() as usize;
    (dataset.select(&indices[..cut]), dataset.select(&indices[cut..]))
}

/// Which question the rendered query asks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    FaultDetection,
    Severity,
}

fn render_value(record: &TelemetryRecord, column: &str) -> Option<String> {
    match column {
        NAME_COLUMN => (!record.name.is_empty()).then(|| record.name.clone()),
        TIME_COLUMN => Some(ns_to_pdt(record.time_ns)),
        ENCODING_COLUMN => (!record.encoding_path.is_empty()).then(|| record.encoding_path.clone()),
        PRODUCER_COLUMN => Some(record.producer.clone()),
        _ => {
            if let Some(&v) = record.numeric.get(column) {
                Some(if v == v.trunc() && v.is_finite() { format!("{v:.1}") } else { v.to_string() })
            } else {
                record.text.get(column).cloned()
            }
        }
    }
}

/// Render one record as a text query over `columns` (in order; missing
/// columns are omitted).
pub fn render_query(record: &TelemetryRecord, columns: &[String], mode: QueryMode) -> String {
    let mut parts = Vec::new();
    for column in columns {
        if let Some(value) = render_value(record, column) {
            parts.push(format!("'{column}': '{value}'"));
        }
    }
    let suffix = match mode {
        QueryMode::FaultDetection => "has fault or not.",
        QueryMode::Severity => "has a Critical fault or Non-critical fault.",
    };
    format!("Predict whether Device with {} {}", parts.join(", "), suffix)
}

/// Render every record of a dataset; returns `(id, query, label)` rows.
pub fn render_queries(dataset: &LabeledDataset, columns: &[String], mode: QueryMode) -> Vec<(usize, String, bool)> {
    dataset
        .table
        .records
        .iter()
        .zip(&dataset.labels)
        .enumerate()
        .map(|(id, (record, &label))| (id, render_query(record, columns, mode), label))
        .collect()
}

/// Write the labeled CSV: original columns plus a trailing `fault` column.
pub fn write_labeled_csv(dataset: &LabeledDataset, path: &Path) -> Result<(), TelemetryError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| TelemetryError::Io { path: path.display().to_string(), source: std::io::Error::other(e) })?;
    let mut header = dataset.table.columns.clone();
    header.push("fault".into());
    writer.write_record(&header)?;
    for (record, &label) in dataset.table.records.iter().zip(&dataset.labels) {
        let mut row = record.raw.clone();
        row.push(if label { "1".into() } else { "0".into() });
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|source| TelemetryError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

/// Read back a labeled CSV written by [`write_labeled_csv`].
pub fn read_labeled_csv(path: &Path) -> Result<LabeledDataset, TelemetryError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| TelemetryError::Io { path: path.display().to_string(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    if headers.last().map(String::as_str) != Some("fault") {
        return Err(TelemetryError::MissingColumn("fault".into()));
    }
    let mut labels = Vec::new();
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&headers[..headers.len() - 1])?;
    for row in reader.records() {
        let row = row?;
        let cells: Vec<&str> = row.iter().collect();
        labels.push(cells[cells.len() - 1] == "1");
        writer.write_record(&cells[..cells.len() - 1])?;
    }
    let stripped = String::from_utf8(writer.into_inner().map_err(|e| TelemetryError::Empty(e.to_string()))?)
        .map_err(|e| TelemetryError::Empty(e.to_string()))?;
    let table = parse_telemetry_csv_str(&stripped)?;
    Ok(LabeledDataset { table, labels })
}

/// Write the query CSV `id,query,label`.
pub fn write_query_csv(queries: &[(usize, String, bool)], path: &Path) -> Result<(), TelemetryError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| TelemetryError::Io { path: path.display().to_string(), source: std::io::Error::other(e) })?;
    writer.write_record(["id", "query", "label"])?;
    for (id, query, label) in queries {
        writer.write_record([id.to_string().as_str(), query, if *label { "1" } else { "0" }])?;
    }
    writer.flush().map_err(|source| TelemetryError::Io { path: path.display().to_string(), source })?;
    Ok(())
}
