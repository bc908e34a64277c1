//! Telemetry parsing and log-key vocabulary construction.
//!
//! Two input schemas are supported: OpTC eCAR records, where the log key is
//! the (object, action) pair, and LANL host logs, where the key is the
//! eventID and filiation comes from the process name/id fields. Records are
//! re-ordered by (timestamp, ingest ordinal) before tree construction; equal
//! timestamps tie-break by input order. Malformed lines are skipped and
//! counted, never fatal.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// One parsed telemetry line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub record_id: String,
    pub object: String,
    pub action: String,
    pub pid: i64,
    pub ppid: i64,
    pub actor_id: String,
    pub object_id: String,
    pub principal: Option<String>,
    pub file_path: Option<String>,
    pub image_path: Option<String>,
    pub parent_image_path: Option<String>,
    /// Microseconds since the Unix epoch, UTC assumed.
    pub timestamp_us: i64,
    pub malicious: bool,
    /// Assigned at parse time, strictly increasing within one stream.
    pub ingest_ordinal: u64,
}

/// Input schema selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Optc,
    Lanl,
}

impl std::str::FromStr for Schema {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optc" => Ok(Schema::Optc),
            "lanl" => Ok(Schema::Lanl),
            other => Err(Error::InvalidConfig(format!("unknown schema '{other}'"))),
        }
    }
}

const TS_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.f";

/// Parse "YYYY-MM-DD HH:MM:SS.ffffff" (UTC) into epoch microseconds.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let dt = NaiveDateTime::parse_from_str(s.trim(), TS_FORMAT).ok()?;
    Some(dt.and_utc().timestamp_micros())
}

/// Format epoch microseconds back to the on-disk timestamp form.
pub fn format_timestamp(us: i64) -> String {
    let dt = chrono::DateTime::from_timestamp_micros(us).expect("timestamp in range");
    dt.format("%Y-%m-%d %H:%M:%S%.6f").to_string()
}

fn opt_field(v: Option<&str>) -> Option<String> {
    match v {
        None => None,
        Some(s) => {
            let s = s.trim();
            if s.is_empty() || s == "nan" || s == "NaN" || s == "null" {
                None
            } else {
                Some(s.to_string())
            }
        }
    }
}

fn malicious_flag(v: Option<&str>) -> bool {
    matches!(v.map(str::trim), Some("1") | Some("true") | Some("True"))
}

/// Column positions extracted from a CSV header row.
#[derive(Debug, Clone)]
pub struct CsvHeader {
    index: HashMap<String, usize>,
}

impl CsvHeader {
    pub fn parse(header_line: &str) -> Self {
        let index = split_csv(header_line)
            .into_iter()
            .enumerate()
            .map(|(i, name)| (name.trim().to_string(), i))
            .collect();
        CsvHeader { index }
    }

    fn get<'a>(&self, fields: &'a [String], names: &[&str]) -> Option<&'a str> {
        for name in names {
            if let Some(&i) = self.index.get(*name) {
                return fields.get(i).map(String::as_str);
            }
        }
        None
    }
}

/// Minimal CSV field splitter honoring double quotes.
fn split_csv(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

fn csv_quote(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedLine { line, reason: reason.into() }
}

/// Parse one OpTC CSV data line against `header`.
pub fn parse_optc_csv_line(
    header: &CsvHeader,
    line: &str,
    line_no: usize,
    ordinal: u64,
) -> Result<EventRecord> {
    if line.trim().is_empty() {
        return Err(malformed(line_no, "empty line"));
    }
    let fields = split_csv(line);
    let req = |names: &[&str]| -> Result<String> {
        match opt_field(header.get(&fields, names)) {
            Some(v) => Ok(v),
            None => Err(malformed(line_no, format!("missing {}", names[0]))),
        }
    };
    let int = |names: &[&str]| -> Result<i64> {
        let raw = req(names)?;
        raw.parse::<i64>()
            .map_err(|_| malformed(line_no, format!("bad integer '{}' for {}", raw, names[0])))
    };
    let ts_raw = req(&["timestamp"])?;
    let timestamp_us = parse_timestamp(&ts_raw)
        .ok_or_else(|| malformed(line_no, format!("unparseable timestamp '{ts_raw}'")))?;
    Ok(EventRecord {
        record_id: opt_field(header.get(&fields, &["id"])).unwrap_or_default(),
        object: req(&["object"])?,
        action: req(&["action"])?,
        pid: int(&["pid"])?,
        ppid: int(&["ppid"])?,
        actor_id: req(&["actorid", "actorID", "actor_id"])?,
        object_id: req(&["objectid", "objectID", "object_id"])?,
        principal: opt_field(header.get(&fields, &["principal"])),
        file_path: opt_field(header.get(&fields, &["file_path"])),
        image_path: opt_field(header.get(&fields, &["image_path"])),
        parent_image_path: opt_field(header.get(&fields, &["parent_image_path"])),
        timestamp_us,
        malicious: malicious_flag(header.get(&fields, &["malicious"])),
        ingest_ordinal: ordinal,
    })
}

fn json_str(v: &Value, keys: &[&str]) -> Option<String> {
    for k in keys {
        match v.get(*k) {
            Some(Value::String(s)) => return opt_field(Some(s)),
            Some(Value::Number(n)) => return Some(n.to_string()),
            Some(Value::Bool(b)) => return Some(b.to_string()),
            _ => continue,
        }
    }
    None
}

/// Parse one OpTC JSON-lines record.
pub fn parse_optc_json_line(line: &str, line_no: usize, ordinal: u64) -> Result<EventRecord> {
    if line.trim().is_empty() {
        return Err(malformed(line_no, "empty line"));
    }
    let v: Value = serde_json::from_str(line)
        .map_err(|e| malformed(line_no, format!("invalid JSON: {e}")))?;
    let req = |keys: &[&str]| -> Result<String> {
        json_str(&v, keys).ok_or_else(|| malformed(line_no, format!("missing {}", keys[0])))
    };
    let int = |keys: &[&str]| -> Result<i64> {
        let raw = req(keys)?;
        raw.parse::<i64>()
            .map_err(|_| malformed(line_no, format!("bad integer '{}' for {}", raw, keys[0])))
    };
    let ts_raw = req(&["timestamp"])?;
    let timestamp_us = parse_timestamp(&ts_raw)
        .ok_or_else(|| malformed(line_no, format!("unparseable timestamp '{ts_raw}'")))?;
    let malicious = match v.get("malicious") {
        Some(Value::Bool(b)) => *b,
        Some(Value::Number(n)) => n.as_i64() == Some(1),
        Some(Value::String(s)) => s == "1" || s == "true",
        _ => false,
    };
    Ok(EventRecord {
        record_id: json_str(&v, &["id"]).unwrap_or_default(),
        object: req(&["object"])?,
        action: req(&["action"])?,
        pid: int(&["pid"])?,
        ppid: int(&["ppid"])?,
        actor_id: req(&["actorid", "actor_id"])?,
        object_id: req(&["objectid", "object_id"])?,
        principal: json_str(&v, &["principal"]),
        file_path: json_str(&v, &["file_path"]),
        image_path: json_str(&v, &["image_path"]),
        parent_image_path: json_str(&v, &["parent_image_path"]),
        timestamp_us,
        malicious,
        ingest_ordinal: ordinal,
    })
}

fn lanl_timestamp(raw: &str, line_no: usize) -> Result<i64> {
    if let Ok(secs) = raw.trim().parse::<i64>() {
        return Ok(secs * 1_000_000);
    }
    parse_timestamp(raw).ok_or_else(|| malformed(line_no, format!("unparseable timestamp '{raw}'")))
}

/// Parse one LANL CSV data line against `header`.
///
/// The node identity fields absent from LANL are synthesized from the
/// process name/id pairs so tree construction applies unchanged:
/// `object_id = ProcessName#ProcessID`, `actor_id = ParentProcessName#ParentProcessID`.
/// Records without filiation fields are rejected as unsupported.
/// Process ids appear both as decimal and as `0x`-prefixed hex.
fn parse_process_id(raw: &str) -> Option<i64> {
    if let Some(hex) = raw.strip_prefix("0x") {
        i64::from_str_radix(hex, 16).ok()
    } else {
        raw.parse::<i64>().ok()
    }
}

pub fn parse_lanl_csv_line(
    header: &CsvHeader,
    line: &str,
    line_no: usize,
    ordinal: u64,
) -> Result<EventRecord> {
    if line.trim().is_empty() {
        return Err(malformed(line_no, "empty line"));
    }
    let fields = split_csv(line);
    let event_id = opt_field(header.get(&fields, &["EventID", "eventid"]))
        .ok_or_else(|| malformed(line_no, "missing EventID"))?;
    let ts_raw = opt_field(header.get(&fields, &["Time", "timestamp", "time"]))
        .ok_or_else(|| malformed(line_no, "missing timestamp"))?;
    let timestamp_us = lanl_timestamp(&ts_raw, line_no)?;
    let pid_raw = opt_field(header.get(&fields, &["ProcessID", "processid"]));
    let ppid_raw = opt_field(header.get(&fields, &["ParentProcessID", "parentprocessid"]));
    let pname = opt_field(header.get(&fields, &["ProcessName", "processname"]));
    let ppname = opt_field(header.get(&fields, &["ParentProcessName", "parentprocessname"]));
    let (pid_raw, ppid_raw, pname, ppname) = match (pid_raw, ppid_raw, pname, ppname) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => return Err(Error::UnsupportedEventId { line: line_no, event_id }),
    };
    let pid = parse_process_id(&pid_raw)
        .ok_or_else(|| malformed(line_no, format!("bad ProcessID '{pid_raw}'")))?;
    let ppid = parse_process_id(&ppid_raw)
        .ok_or_else(|| malformed(line_no, format!("bad ParentProcessID '{ppid_raw}'")))?;
    Ok(EventRecord {
        record_id: String::new(),
        object: event_id,
        action: "EVENT".to_string(),
        pid,
        ppid,
        actor_id: format!("{ppname}#{ppid_raw}"),
        object_id: format!("{pname}#{pid_raw}"),
        principal: opt_field(header.get(&fields, &["UserName", "user", "User"])),
        file_path: None,
        image_path: Some(pname),
        parent_image_path: Some(ppname),
        timestamp_us,
        // LANL carries no malicious labels.
        malicious: false,
        ingest_ordinal: ordinal,
    })
}

/// Counters for one parsing pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub parsed: u64,
    pub malformed: u64,
    pub unsupported: u64,
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let gz = flate2::read::GzDecoder::new(file);
        Ok(Box::new(BufReader::new(gz)))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn is_jsonl(path: &Path, first_line: &str) -> bool {
    let stem = path.with_extension("");
    let ext = |p: &Path| p.extension().map(|e| e.to_string_lossy().to_string());
    let effective = if ext(path).as_deref() == Some("gz") { ext(&stem) } else { ext(path) };
    match effective.as_deref() {
        Some("jsonl") | Some("json") | Some("ndjson") => true,
        Some("csv") => false,
        _ => first_line.trim_start().starts_with('{'),
    }
}

/// Read a telemetry file (CSV with header or JSON-lines, optionally
/// gzip-compressed) and return records sorted by (timestamp, ingest ordinal).
///
/// Malformed lines are skipped and counted.
pub fn read_events(path: &Path, schema: Schema) -> Result<(Vec<EventRecord>, ParseStats)> {
    let reader = open_reader(path)?;
    let mut stats = ParseStats::default();
    let mut records = Vec::new();
    let mut ordinal: u64 = 0;
    let mut header: Option<CsvHeader> = None;
    let mut jsonl = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if idx == 0 {
            jsonl = is_jsonl(path, &line);
            if !jsonl {
                header = Some(CsvHeader::parse(&line));
                continue;
            }
        }
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match (schema, jsonl) {
            (Schema::Optc, true) => parse_optc_json_line(&line, line_no, ordinal),
            (Schema::Optc, false) => {
                parse_optc_csv_line(header.as_ref().unwrap(), &line, line_no, ordinal)
            }
            (Schema::Lanl, false) => {
                parse_lanl_csv_line(header.as_ref().unwrap(), &line, line_no, ordinal)
            }
            (Schema::Lanl, true) => {
                return Err(Error::InvalidConfig(
                    "LANL input is expected as CSV with a header row".into(),
                ))
            }
        };
        match parsed {
            Ok(rec) => {
                records.push(rec);
                ordinal += 1;
            }
            Err(Error::UnsupportedEventId { .. }) => stats.unsupported += 1,
            Err(Error::MalformedLine { .. }) => stats.malformed += 1,
            Err(e) => return Err(e),
        }
    }
    records.sort_by_key(|r| (r.timestamp_us, r.ingest_ordinal));
    stats.parsed = records.len() as u64;
    Ok((records, stats))
}

const OPTC_COLUMNS: [&str; 13] = [
    "id", "object", "action", "pid", "ppid", "actorid", "objectid", "principal", "file_path",
    "image_path", "parent_image_path", "timestamp", "malicious",
];

/// Write records as OpTC-schema CSV with a header row.
pub fn write_events_csv<W: Write>(mut w: W, records: &[EventRecord]) -> Result<()> {
    writeln!(w, "{}", OPTC_COLUMNS.join(","))?;
    for r in records {
        let opt = |v: &Option<String>| v.as_deref().unwrap_or("nan").to_string();
        let fields = [
            csv_quote(&r.record_id),
            csv_quote(&r.object),
            csv_quote(&r.action),
            r.pid.to_string(),
            r.ppid.to_string(),
            csv_quote(&r.actor_id),
            csv_quote(&r.object_id),
            csv_quote(&opt(&r.principal)),
            csv_quote(&opt(&r.file_path)),
            csv_quote(&opt(&r.image_path)),
            csv_quote(&opt(&r.parent_image_path)),
            format_timestamp(r.timestamp_us),
            if r.malicious { "1" } else { "0" }.to_string(),
        ];
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Write records as OpTC-schema JSON-lines.
pub fn write_events_jsonl<W: Write>(mut w: W, records: &[EventRecord]) -> Result<()> {
    for r in records {
        let v = json!({
            "id": r.record_id,
            "object": r.object,
            "action": r.action,
            "pid": r.pid,
            "ppid": r.ppid,
            "actorid": r.actor_id,
            "objectid": r.object_id,
            "principal": r.principal,
            "file_path": r.file_path,
            "image_path": r.image_path,
            "parent_image_path": r.parent_image_path,
            "timestamp": format_timestamp(r.timestamp_us),
            "malicious": if r.malicious { 1 } else { 0 },
        });
        writeln!(w, "{}", serde_json::to_string(&v)?)?;
    }
    Ok(())
}

/// Integer log key. Values in `[0, n)` are base keys; `n` is the
/// out-of-vocabulary sentinel.
pub type LogKey = u32;

/// Bidirectional map between (object, action) pairs and integer log keys.
///
/// Keys are assigned densely `0..n` in first-seen order over the training
/// stream. Pairs unseen at build time map to the sentinel value `n` and are
/// treated as immediately anomalous downstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyVocabulary {
    key_of: HashMap<(String, String), u32>,
    names: Vec<(String, String)>,
}

impl KeyVocabulary {
    /// Build from the training stream in first-seen order.
    pub fn build<'a, I: IntoIterator<Item = &'a EventRecord>>(records: I) -> Result<Self> {
        let mut vocab = KeyVocabulary { key_of: HashMap::new(), names: Vec::new() };
        let mut any = false;
        for r in records {
            any = true;
            vocab.insert_pair(&r.object, &r.action);
        }
        if !any {
            return Err(Error::EmptyStream);
        }
        Ok(vocab)
    }

    fn insert_pair(&mut self, object: &str, action: &str) {
        let pair = (object.to_string(), action.to_string());
        if !self.key_of.contains_key(&pair) {
            let idx = self.names.len() as u32;
            self.key_of.insert(pair.clone(), idx);
            self.names.push(pair);
        }
    }

    /// Number of distinct base keys.
    pub fn n(&self) -> u32 {
        self.names.len() as u32
    }

    /// Out-of-vocabulary sentinel, equal to `n`.
    pub fn unknown_key(&self) -> LogKey {
        self.n()
    }

    /// Key for a record's (object, action) pair; unseen pairs return the sentinel.
    pub fn key_of(&self, record: &EventRecord) -> LogKey {
        self.key_of_pair(&record.object, &record.action)
    }

    pub fn key_of_pair(&self, object: &str, action: &str) -> LogKey {
        self.key_of
            .get(&(object.to_string(), action.to_string()))
            .copied()
            .unwrap_or_else(|| self.unknown_key())
    }

    pub fn name_of(&self, key: LogKey) -> Option<&(String, String)> {
        self.names.get(key as usize)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "n": self.n(),
            "keys": self.names.iter().map(|(o, a)| json!([o, a])).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let keys = v
            .get("keys")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::InvalidConfig("vocabulary JSON lacks 'keys'".into()))?;
        let mut vocab = KeyVocabulary { key_of: HashMap::new(), names: Vec::new() };
        for entry in keys {
            let pair = entry
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| Error::InvalidConfig("vocabulary key is not a pair".into()))?;
            let object = pair[0].as_str().unwrap_or_default();
            let action = pair[1].as_str().unwrap_or_default();
            vocab.insert_pair(object, action);
        }
        let n = v.get("n").and_then(Value::as_u64).unwrap_or(vocab.n() as u64);
        if n != vocab.n() as u64 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary count mismatch: n={} but {} keys listed",
                n,
                vocab.n()
            )));
        }
        Ok(vocab)
    }
}
