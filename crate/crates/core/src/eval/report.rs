//! Report files: per-run CSV, JSON summary and aligned text tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::protocol::{AggregateRow, Direction, RetrievalReport, RunRow};
use super::routing::ConfusionMatrix;
use super::zero_shot::ZeroShotRow;
use super::EvalError;
use crate::debias::ScoreMode;

pub const REPORT_FORMAT: &str = "report-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTable {
    pub mode: String,
    pub rows: Vec<ZeroShotRow>,
}

/// JSON summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub format: String,
    pub seed: u64,
    pub rows: Vec<RunRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slices: Vec<super::protocol::SliceRow>,
    pub aggregates: Vec<AggregateRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slice_aggregates: Vec<AggregateRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_shot: Vec<ZeroShotTable>,
}

impl ReportFile {
    pub fn new(report: RetrievalReport, seed: u64) -> Self {
        let aggregates = report.aggregates();
        let slice_aggregates = report.slice_aggregates();
        Self {
            format: REPORT_FORMAT.into(),
            seed,
            rows: report.rows,
            slices: report.slices,
            aggregates,
            slice_aggregates,
            confusion: None,
            zero_shot: Vec::new(),
        }
    }

    pub fn report(&self) -> RetrievalReport {
        RetrievalReport {
            rows: self.rows.clone(),
            slices: self.slices.clone(),
        }
    }

    pub fn write_json(&self, mut w: impl Write) -> Result<(), EvalError> {
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| EvalError::Format(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    /// Reads a summary and checks that its aggregates match its rows.
    pub fn read_json(r: impl Read) -> Result<Self, EvalError> {
        let file: ReportFile = serde_json::from_reader(r).map_err(|e| EvalError::Format(e.to_string()))?;
        if file.format != REPORT_FORMAT {
            return Err(EvalError::Format(format!(
                "unsupported report format `{}`, expected `{REPORT_FORMAT}`",
                file.format
            )));
        }
        let expect = file.report().aggregates();
        if expect.len() != file.aggregates.len()
            || expect
                .iter()
                .zip(&file.aggregates)
                .any(|(a, b)| a.size != b.size || a.mode != b.mode || (a.r1 - b.r1).abs() > 1e-9 || (a.med_r - b.med_r).abs() > 1e-9)
        {
            return Err(EvalError::Format("aggregates disagree with run rows".into()));
        }
        Ok(file)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), EvalError> {
        write_csv(&self.rows, w)
    }
}

pub fn write_csv(rows: &[RunRow], w: impl Write) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| EvalError::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv(r: impl Read) -> Result<Vec<RunRow>, EvalError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| EvalError::Format(e.to_string())))
        .collect()
}

fn mode_rank(mode: &str) -> (u8, String) {
    match mode.parse::<ScoreMode>() {
        Ok(m) => (m as u8, String::new()),
        Err(_) => (u8::MAX, mode.to_string()),
    }
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

fn table(out: &mut String, title: &str, header: &[String], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let _ = writeln!(out, "== {title} ==");
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for row in rows {
        let _ = writeln!(out, "{}", line(row));
    }
}

const METRICS: [&str; 4] = ["medR", "R@1", "R@5", "R@10"];

fn metric_cells(a: &AggregateRow) -> [f64; 4] {
    [a.med_r, a.r1, a.r5, a.r10]
}

/// Aligned tables: one per (protocol, direction) with a row per gallery
/// size and a column block per mode, a delta block when a baseline and a
/// debiased mode are both present, then per-slice tables, confusion
/// matrices and zero-shot tables.
pub fn render(files: &[ReportFile]) -> String {
    let mut report = RetrievalReport::default();
    for f in files {
        report.extend(f.report());
    }
    let runs = report.max_runs();
    let mut out = String::new();
    render_blocks(&mut out, &report.aggregates(), None);
    let slice_aggs = report.slice_aggregates();
    let sizes: BTreeSet<usize> = slice_aggs.iter().map(|a| a.size).collect();
    for size in sizes {
        let subset: Vec<AggregateRow> = slice_aggs.iter().filter(|a| a.size == size).cloned().collect();
        render_blocks(&mut out, &subset, Some(size));
    }
    for f in files {
        if let Some(cm) = &f.confusion {
            let mut header = vec!["true \\ predicted".to_string()];
            header.extend(cm.cultures.iter().map(|c| c.to_string()));
            let rows: Vec<Vec<String>> = cm
                .cultures
                .iter()
                .zip(&cm.rates)
                .map(|(c, r)| std::iter::once(c.to_string()).chain(r.iter().map(|&x| fmt2(x))).collect())
                .collect();
            out.push('\n');
            table(&mut out, "culture router confusion", &header, &rows);
        }
    }
    let zs: Vec<&ZeroShotTable> = files.iter().flat_map(|f| &f.zero_shot).collect();
    if !zs.is_empty() {
        let keywords: BTreeSet<&str> = zs.iter().flat_map(|t| t.rows.iter().map(|r| r.keyword.as_str())).collect();
        let mut header = vec!["category".to_string(), "queries".to_string()];
        header.extend(zs.iter().map(|t| format!("{} medR", t.mode)));
        let rows: Vec<Vec<String>> = keywords
            .iter()
            .map(|k| {
                let count = zs
                    .iter()
                    .flat_map(|t| &t.rows)
                    .find(|r| r.keyword == *k)
                    .map_or(0, |r| r.queries);
                let mut row = vec![k.to_string(), count.to_string()];
                for t in &zs {
                    let v = t.rows.iter().find(|r| r.keyword == *k).and_then(|r| r.med_r);
                    row.push(v.map_or("-".into(), fmt2));
                }
                row
            })
            .collect();
        out.push('\n');
        table(&mut out, "zero-shot median rank", &header, &rows);
    }
    if runs > 1 {
        let _ = writeln!(out, "\n* retrieval values are means over {runs} sampling runs");
    }
    out
}

fn render_blocks(out: &mut String, aggs: &[AggregateRow], slice_size: Option<usize>) {
    let mut groups: BTreeMap<(String, Direction), Vec<&AggregateRow>> = BTreeMap::new();
    for a in aggs {
        groups.entry((a.protocol.clone(), a.direction)).or_default().push(a);
    }
    for ((protocol, direction), rows) in groups {
        let mut modes: Vec<String> = rows.iter().map(|a| a.mode.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        modes.sort_by_key(|m| mode_rank(m));
        let delta_mode = modes.iter().rev().find(|m| m.as_str() != "baseline" && modes.iter().any(|b| b == "baseline"));
        let key_name = if slice_size.is_some() { "slice" } else { "size" };
        let mut header = vec![key_name.to_string()];
        for m in &modes {
            header.extend(METRICS.iter().map(|x| format!("{m} {x}")));
        }
        if let Some(d) = delta_mode {
            header.push(format!("delta medR ({d}-baseline)"));
            header.push(format!("delta R@1 ({d}-baseline)"));
        }
        let keys: BTreeSet<String> = rows
            .iter()
            .map(|a| match slice_size {
                Some(_) => a.slice.clone().unwrap_or_default(),
                None => format!("{:>12}", a.size),
            })
            .collect();
        let body: Vec<Vec<String>> = keys
            .iter()
            .map(|k| {
                let find = |m: &str| {
                    rows.iter().find(|a| {
                        a.mode == m
                            && match slice_size {
                                Some(_) => a.slice.as_deref() == Some(k.as_str()),
                                None => format!("{:>12}", a.size) == *k,
                            }
                    })
                };
                let mut cells = vec![k.trim().to_string()];
                for m in &modes {
                    match find(m) {
                        Some(a) => cells.extend(metric_cells(a).iter().map(|&x| fmt2(x))),
                        None => cells.extend(std::iter::repeat_n("-".to_string(), 4)),
                    }
                }
                if let Some(d) = delta_mode {
                    match (find(d), find("baseline")) {
                        (Some(a), Some(b)) => {
                            cells.push(fmt2(a.med_r - b.med_r));
                            cells.push(fmt2(a.r1 - b.r1));
                        }
                        _ => cells.extend(["-".to_string(), "-".to_string()]),
                    }
                }
                cells
            })
            .collect();
        let title = match slice_size {
            Some(s) => format!("{protocol} / {direction} / per culture, size {s}"),
            None => format!("{protocol} / {direction}"),
        };
        if !out.is_empty() {
            out.push('\n');
        }
        table(out, &title, &header, &body);
    }
}

/// A table read back from [`render`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTable {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ParsedTable {
    /// Numeric value of `column` in the row keyed `key`.
    pub fn value(&self, key: &str, column: &str) -> Option<f64> {
        let c = self.header.iter().position(|h| h == column)?;
        let row = self.rows.iter().find(|r| r[0] == key)?;
        row[c].parse().ok()
    }
}

/// Parses the tables of a rendered report.
pub fn parse_rendered(text: &str) -> Result<Vec<ParsedTable>, EvalError> {
    let mut tables = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        let Some(title) = line.strip_prefix("== ").and_then(|l| l.strip_suffix(" ==")) else {
            continue;
        };
        let split = |l: &str| l.split(" | ").map(|c| c.trim().to_string()).collect::<Vec<_>>();
        let header = split(lines.next().ok_or_else(|| EvalError::Format(format!("table `{title}` has no header")))?);
        lines.next();
        let mut rows = Vec::new();
        while let Some(l) = lines.peek() {
            if l.trim().is_empty() {
                break;
            }
            let row = split(lines.next().expect("peeked"));
            if row.len() != header.len() {
                return Err(EvalError::Format(format!("ragged row in table `{title}`")));
            }
            rows.push(row);
        }
        tables.push(ParsedTable {
            title: title.to_string(),
            header,
            rows,
        });
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::protocol::{evaluate, EvalSpec, PairScorer};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Noisy(usize, f64, u64);
    impl PairScorer for Noisy {
        fn len(&self) -> usize {
            self.0
        }
        fn scores(&self, rows: &[usize]) -> Array2<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.2 + rows[0] as u64);
            Array2::from_shape_fn((rows.len(), rows.len()), |(i, j)| {
                rng.random_range(0.0..1.0) + if i == j { self.1 } else { 0.0 }
            })
        }
    }

    fn report(mode: &str, boost: f64, runs: usize) -> ReportFile {
        let spec = EvalSpec {
            protocol: "standard".into(),
            mode: mode.into(),
            sizes: vec![50, 100],
            runs,
            seed: 3,
        };
        ReportFile::new(evaluate(&Noisy(200, boost, 1), &spec, None).unwrap(), 3)
    }

    #[test]
    fn render_parse_round_trip() {
        let files = [report("baseline", 0.5, 3), report("both", 0.8, 3)];
        let text = render(&files);
        let tables = parse_rendered(&text).unwrap();
        assert_eq!(tables.len(), 2);
        let round = |x: f64| (x * 100.0).round() / 100.0;
        for f in &files {
            for a in &f.aggregates {
                let t = tables.iter().find(|t| t.title == format!("standard / {}", a.direction)).unwrap();
                let key = a.size.to_string();
                for (name, v) in METRICS.iter().zip(metric_cells(a)) {
                    let got = t.value(&key, &format!("{} {name}", a.mode)).unwrap();
                    assert!((got - round(v)).abs() < 1e-9, "{name}: {got} vs {v}");
                }
            }
        }
        let t = &tables[0];
        for size in ["50", "100"] {
            let d = t.value(size, "delta R@1 (both-baseline)").unwrap();
            let diff = t.value(size, "both R@1").unwrap() - t.value(size, "baseline R@1").unwrap();
            assert!((d - diff).abs() <= 0.01 + 1e-9);
        }
        assert!(text.contains("means over 3 sampling runs"));
    }

    #[test]
    fn single_run_has_no_footnote() {
        let text = render(&[report("baseline", 0.5, 1)]);
        assert!(!text.contains("sampling runs"));
        assert!(!text.contains("delta"));
    }

    #[test]
    fn json_and_csv_round_trip() {
        let f = report("baseline", 0.5, 2);
        let mut buf = Vec::new();
        f.write_json(&mut buf).unwrap();
        assert_eq!(ReportFile::read_json(buf.as_slice()).unwrap(), f);
        let mut csv_buf = Vec::new();
        f.write_csv(&mut csv_buf).unwrap();
        let header = String::from_utf8(csv_buf.clone()).unwrap();
        assert!(header.starts_with("protocol,mode,direction,size,run,med_r,r1,r5,r10\n"));
        assert_eq!(read_csv(csv_buf.as_slice()).unwrap(), f.rows);
    }

    #[test]
    fn tampered_summary_is_rejected() {
        let mut f = report("baseline", 0.5, 2);
        f.aggregates[0].r1 += 1.0;
        let mut buf = Vec::new();
        f.write_json(&mut buf).unwrap();
        assert!(matches!(ReportFile::read_json(buf.as_slice()), Err(EvalError::Format(_))));
        let bad = br#"{"format":"report-v0","seed":1,"rows":[],"aggregates":[]}"#;
        assert!(ReportFile::read_json(&bad[..]).is_err());
    }
}
