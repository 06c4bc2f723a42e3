//! Report emission: JSON and CSV records, the delta table, and long-format
//! plot data.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::BackendInfo;
use crate::metrics::{DeltaRow, EvalRecord};
use crate::protocol::Variant;
use crate::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CSV_COLUMNS: [&str; 16] = [
    "model_id",
    "protocol",
    "seq_len",
    "window_size",
    "stride",
    "ppl",
    "acc_pct",
    "scored_tokens",
    "nll_sum",
    "cost_tokens",
    "latency_total_s",
    "latency_mean_s",
    "latency_p50_s",
    "latency_p95_s",
    "makespan_s",
    "peak_mem_bytes",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
    /// SHA-256 of the corpus file, hex.
    pub corpus_fingerprint: Option<String>,
    pub backend: BackendInfo,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(
        config: serde_json::Value,
        corpus_fingerprint: Option<String>,
        backend: BackendInfo,
    ) -> Self {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            tool_version: TOOL_VERSION.to_string(),
            config,
            corpus_fingerprint,
            backend,
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub manifest: RunManifest,
    pub records: Vec<EvalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<DeltaRow>>,
}

impl Report {
    /// Records and deltas without timing or memory, as canonical JSON.
    pub fn data_section(&self) -> String {
        data_section(&self.records, self.deltas.as_deref())
    }
}

pub fn data_section(records: &[EvalRecord], deltas: Option<&[DeltaRow]>) -> String {
    let value = serde_json::json!({
        "records": records.iter().map(EvalRecord::data_view).collect::<Vec<_>>(),
        "deltas": deltas.map(|d| serde_json::to_value(d).expect("delta rows serialize")),
    });
    serde_json::to_string(&value).expect("data section serializes")
}

pub fn fingerprint_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn emit_json(report: &Report, path: &Path) -> Result<()> {
    if report.records.is_empty() {
        return Err(Error::data("emit_json: no records"));
    }
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, report)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    out.write_all(b"\n")
        .and_then(|()| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_json(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("{}: malformed report: {e}", path.display())))
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other:?}", path.display())),
    }
}

pub fn emit_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::data("emit_csv: no records"));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    w.write_record(CSV_COLUMNS)
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        let lat = &r.system.latency;
        let row = [
            r.model_id.clone(),
            r.protocol.name().to_string(),
            r.seq_len.to_string(),
            opt(r.window_size()),
            opt(r.stride()),
            f6(r.ppl),
            f6(r.accuracy_pct),
            r.scored_tokens.to_string(),
            f6(r.nll_sum_nats),
            r.cost_tokens.to_string(),
            f6(lat.total_s),
            f6(lat.mean_s),
            f6(lat.p50_s),
            f6(lat.p95_s),
            f6(r.system.makespan_s),
            opt(r.system.peak_mem_bytes),
        ];
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One parsed row of a records CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub model_id: String,
    pub protocol: String,
    pub seq_len: usize,
    pub window_size: Option<usize>,
    pub stride: Option<usize>,
    pub ppl: f64,
    pub acc_pct: f64,
    pub scored_tokens: usize,
    pub nll_sum: f64,
    pub cost_tokens: u64,
    pub latency_total_s: f64,
    pub latency_mean_s: f64,
    pub latency_p50_s: f64,
    pub latency_p95_s: f64,
    pub makespan_s: f64,
    pub peak_mem_bytes: Option<u64>,
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?;
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::data(format!(
            "{}: unexpected CSV header",
            path.display()
        )));
    }
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))
}

fn signed4(x: f64) -> String {
    // a value that rounds to zero is shown unsigned-positive
    let s = format!("{x:+.4}");
    if s == "-0.0000" {
        "+0.0000".to_string()
    } else {
        s
    }
}

/// Plain-text table with one line per row and arrows on both deltas.
pub fn emit_delta_table(rows: &[DeltaRow]) -> String {
    let header = [
        "model",
        "seq_len",
        "ppl_ns",
        "ppl_s",
        "delta_ppl",
        "acc_ns",
        "acc_s",
        "delta_acc",
    ];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.model_id.clone(),
                r.seq_len.to_string(),
                format!("{:.4}", r.ppl_ns),
                format!("{:.4}", r.ppl_s),
                format!("{} {}", signed4(r.delta_ppl), r.ppl_better.arrow()),
                format!("{:.4}", r.acc_ns),
                format!("{:.4}", r.acc_s),
                format!("{} {}", signed4(r.delta_acc), r.acc_better.arrow()),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                let pad = " ".repeat(w - c.chars().count());
                if i == 0 {
                    format!("{c}{pad}")
                } else {
                    format!("{pad}{c}")
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

pub const PLOT_COLUMNS: [&str; 6] = [
    "model_id",
    "ppl",
    "acc_pct",
    "latency_mean_s",
    "peak_mem_bytes",
    "cost_tokens",
];

/// One parsed row of a plot-data file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub x: usize,
    pub model_id: String,
    pub ppl: f64,
    pub acc_pct: f64,
    pub latency_mean_s: f64,
    pub peak_mem_bytes: Option<u64>,
    pub cost_tokens: u64,
}

/// Long-format plot data, one row per (x, model), sorted by (model_id, x).
/// Floats use the shortest representation that parses back to the same value.
pub fn emit_plotdata(sweep: &[(usize, EvalRecord)], x_name: &str, path: &Path) -> Result<()> {
    if sweep.is_empty() {
        return Err(Error::data("emit_plotdata: empty sweep"));
    }
    if x_name.is_empty() || PLOT_COLUMNS.contains(&x_name) {
        return Err(Error::config(format!("invalid x column name {x_name:?}")));
    }
    let mut rows: Vec<&(usize, EvalRecord)> = sweep.iter().collect();
    rows.sort_by(|a, b| a.1.model_id.cmp(&b.1.model_id).then(a.0.cmp(&b.0)));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    let mut header = vec![x_name];
    header.extend(PLOT_COLUMNS);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (x, r) in rows {
        w.write_record([
            x.to_string(),
            r.model_id.clone(),
            r.ppl.to_string(),
            r.accuracy_pct.to_string(),
            r.system.latency.mean_s.to_string(),
            opt(r.system.peak_mem_bytes),
            r.cost_tokens.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Returns the x column name and the rows in file order.
pub fn read_plotdata(path: &Path) -> Result<(String, Vec<PlotRow>)> {
    let bad = |msg: String| Error::data(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 7 || headers.iter().skip(1).ne(PLOT_COLUMNS) {
        return Err(bad("unexpected plot-data header".into()));
    }
    let x_name = headers[0].to_string();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> Result<f64> {
            field(j)
                .parse()
                .map_err(|_| bad(format!("row {}: bad {}", i + 1, &headers[j])))
        };
        let int = |j: usize| -> Result<u64> {
            field(j)
                .parse()
                .map_err(|_| bad(format!("row {}: bad {}", i + 1, &headers[j])))
        };
        rows.push(PlotRow {
            x: int(0)? as usize,
            model_id: field(1).to_string(),
            ppl: num(2)?,
            acc_pct: num(3)?,
            latency_mean_s: num(4)?,
            peak_mem_bytes: if field(5).is_empty() {
                None
            } else {
                Some(int(5)?)
            },
            cost_tokens: int(6)?,
        });
    }
    Ok((x_name, rows))
}

/// Short human-readable summary of one record.
pub fn summary_line(r: &EvalRecord) -> String {
    let proto = match &r.protocol.variant {
        Variant::NonSliding => "non_sliding".to_string(),
        Variant::Sliding(p) => format!("sliding w={} s={}", p.window_size, p.stride),
    };
    let mem = r
        .system
        .peak_mem_bytes
        .map_or_else(|| "n/a".to_string(), |b| format!("{b} B"));
    format!(
        "{} seq_len={} {}: ppl={:.4} acc={:.4}% tokens={} cost={} latency_mean={:.6}s peak_mem={}",
        r.model_id,
        r.seq_len,
        proto,
        r.ppl,
        r.accuracy_pct,
        r.scored_tokens,
        r.cost_tokens,
        r.system.latency.mean_s,
        mem
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{ProtocolConfig, WindowPlan};
    use crate::sysmetrics::{LatencyStats, SystemMetrics};

    pub(crate) fn record(model: &str, seq_len: usize, ppl: f64, acc: f64) -> EvalRecord {
        EvalRecord {
            model_id: model.to_string(),
            protocol: ProtocolConfig::sliding(WindowPlan::chunked(1024)),
            seq_len,
            n_sequences: 2,
            n_windows: 4,
            scored_tokens: 4096,
            correct_tokens: 1000,
            nll_sum_nats: 4096.0 * ppl.ln(),
            mean_nll_nats: ppl.ln(),
            ppl,
            accuracy_pct: acc,
            cost_tokens: 4096,
            n_calls: 4,
            skip_first_token: false,
            system: SystemMetrics {
                latency: LatencyStats {
                    total_s: 0.4,
                    mean_s: 0.1,
                    p50_s: 0.1,
                    p95_s: 0.1,
                },
                makespan_s: 0.4,
                peak_mem_bytes: None,
            },
        }
    }

    fn info() -> BackendInfo {
        BackendInfo {
            model_id: "m".into(),
            vocab_size: 4,
            bos_id: None,
            deterministic: true,
            scores_empty_context: true,
            reported_peak_mem_bytes: None,
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let mut rec = record("m", 2048, 1.0 / 3.0 + 10.0, 43.096_6);
        rec.system.peak_mem_bytes = Some(123);
        let report = Report {
            manifest: RunManifest::new(serde_json::json!({"k": 1}), None, info()),
            records: vec![rec, record("m", 1024, 15.714, 42.5)],
            deltas: None,
        };
        emit_json(&report, &path).unwrap();
        let back = read_json(&path).unwrap();
        assert_eq!(back, report);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"ppl\": 1.0333333333333334e1"));
        assert!(text.contains("\"peak_mem_bytes\": null"));
    }

    #[test]
    fn csv_layout_and_absence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        emit_csv(&[record("m", 2048, 15.714, 43.0966)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert!(lines[1].starts_with("m,sliding,2048,1024,1024,15.714000,43.096600,"));
        assert!(lines[1].ends_with(','));
        let rows = read_csv(&path).unwrap();
        assert_eq!(rows[0].peak_mem_bytes, None);
        assert_eq!(rows[0].ppl, 15.714);
        assert!(emit_csv(&[], &path).is_err());
    }

    #[test]
    fn delta_table_rows() {
        let rows = [
            DeltaRow::from_values("LLaMA-3.2-3B", 8192, 12.9255, 15.7140, 47.1186, 43.0966),
            DeltaRow::from_values("LLaMA-3.2-3B", 1024, 15.7299, 15.7140, 43.6972, 43.0966),
            DeltaRow::from_values("tie", 64, 2.0, 2.0, 50.0, 50.0),
        ];
        let table = emit_delta_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(
            lines[2].contains("+2.7885 ↑") && lines[2].contains("+4.0220 ↑"),
            "{table}"
        );
        assert!(
            lines[3].contains("-0.0159 ↓") && lines[3].contains("+0.6006 ↑"),
            "{table}"
        );
        assert_eq!(lines[4].matches('↓').count(), 2);
        assert!(lines[4].contains("+0.0000 ↓"));
    }

    #[test]
    fn plotdata_sorted_and_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let sweep = vec![
            (8192, record("awq-4bit", 8192, 12.6, 40.0)),
            (1024, record("gptq-4bit", 1024, 15.9, 39.0)),
            (1024, record("awq-4bit", 1024, 15.2, 41.0)),
        ];
        emit_plotdata(&sweep, "seq_len", &path).unwrap();
        let (x, rows) = read_plotdata(&path).unwrap();
        assert_eq!(x, "seq_len");
        let keys: Vec<_> = rows.iter().map(|r| (r.model_id.as_str(), r.x)).collect();
        assert_eq!(
            keys,
            vec![("awq-4bit", 1024), ("awq-4bit", 8192), ("gptq-4bit", 1024)]
        );
        assert_eq!(rows[0].ppl, 15.2);
        assert_eq!(rows[1].ppl, 12.6);
        assert!(emit_plotdata(&[], "x", &path).is_err());
    }

    #[test]
    fn data_section_ignores_timing() {
        let a = record("m", 64, 3.0, 10.0);
        let mut b = a.clone();
        b.system.latency.total_s = 99.0;
        b.system.peak_mem_bytes = Some(1);
        assert_eq!(data_section(std::slice::from_ref(&a), None), data_section(&[b], None));
        let mut c = a.clone();
        c.ppl = 3.000_000_000_000_001;
        assert_ne!(data_section(&[a], None), data_section(&[c], None));
    }

    #[test]
    fn fingerprint_is_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            fingerprint_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
