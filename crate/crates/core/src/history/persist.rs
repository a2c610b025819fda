//! Tab-separated history dump with a JSON sidecar.
//!
//! Layout: one header line naming the columns, then one row per record.
//! `x` is spread over columns `x0..x{n-1}`. NaN is written `nan`, absent
//! timestamps and absent worker ids `-`, booleans `0`/`1`. Floats use the
//! shortest representation that parses back to the same bits.
//!
//! The sidecar `<file>.meta.json` holds the format version, the dimension,
//! the start time and the record count (the count catches truncation at a
//! row boundary).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EnsembleRecord, History, HistoryError};

pub const FORMAT_VERSION: u32 = 1;

const TAIL_COLUMNS: [&str; 12] = [
    "f",
    "priority",
    "num_procs",
    "num_gpus",
    "gen_worker",
    "sim_worker",
    "given",
    "returned",
    "cancel_requested",
    "kill_sent",
    "given_time",
    "returned_time",
];

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    dim: usize,
    start_time: f64,
    records: usize,
}

/// Path of the metadata sidecar belonging to a dump file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn header(dim: usize) -> Vec<String> {
    let mut cols = vec!["sim_id".to_string()];
    cols.extend((0..dim).map(|i| format!("x{i}")));
    cols.extend(TAIL_COLUMNS.iter().map(|c| c.to_string()));
    cols
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "-".into())
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HistoryError + '_ {
    move |source| HistoryError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(super) fn dump(h: &History, path: &Path) -> Result<(), HistoryError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", header(h.dim()).join("\t")).map_err(io_err(path))?;
    for r in h.records() {
        let mut row = vec![r.sim_id.to_string()];
        row.extend(r.x.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(r.f));
        row.push(fmt_f64(r.priority));
        row.push(r.num_procs.to_string());
        row.push(r.num_gpus.to_string());
        row.push(r.gen_worker.to_string());
        row.push(r.sim_worker.map(|w| w.to_string()).unwrap_or_else(|| "-".into()));
        row.push(fmt_bool(r.given).into());
        row.push(fmt_bool(r.returned).into());
        row.push(fmt_bool(r.cancel_requested).into());
        row.push(fmt_bool(r.kill_sent).into());
        row.push(fmt_opt_f64(r.given_time));
        row.push(fmt_opt_f64(r.returned_time));
        writeln!(w, "{}", row.join("\t")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;

    let meta = Meta {
        format_version: FORMAT_VERSION,
        dim: h.dim(),
        start_time: h.start_time(),
        records: h.len(),
    };
    let mpath = meta_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok(())
}

struct RowParser<'a> {
    path: &'a str,
    line: usize,
}

impl RowParser<'_> {
    fn err(&self, msg: impl Into<String>) -> HistoryError {
        HistoryError::Parse {
            path: self.path.to_string(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn f64(&self, col: &str, s: &str) -> Result<f64, HistoryError> {
        match s {
            "nan" => Ok(f64::NAN),
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            _ => s
                .parse::<f64>()
                .map_err(|_| self.err(format!("column {col}: bad number {s:?}"))),
        }
    }

    fn opt_f64(&self, col: &str, s: &str) -> Result<Option<f64>, HistoryError> {
        if s == "-" {
            Ok(None)
        } else {
            self.f64(col, s).map(Some)
        }
    }

    fn uint<T: std::str::FromStr>(&self, col: &str, s: &str) -> Result<T, HistoryError> {
        s.parse::<T>()
            .map_err(|_| self.err(format!("column {col}: bad integer {s:?}")))
    }

    fn boolean(&self, col: &str, s: &str) -> Result<bool, HistoryError> {
        match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(self.err(format!("column {col}: expected 0 or 1, got {s:?}"))),
        }
    }
}

/// Reads a history written by [`History::dump`].
pub fn load(path: impl AsRef<Path>) -> Result<History, HistoryError> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let mpath = meta_path(path);
    let meta_text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| HistoryError::Parse {
        path: mpath.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(HistoryError::Parse {
            path: mpath.display().to_string(),
            line: 1,
            msg: format!("unsupported format version {}", meta.format_version),
        });
    }

    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.split('\n');
    let expected_header = header(meta.dim).join("\t");
    let mut p = RowParser {
        path: &pstr,
        line: 1,
    };
    match lines.next() {
        Some(h) if h == expected_header => {}
        Some(_) => return Err(p.err("header does not match metadata dimension")),
        None => return Err(p.err("missing header")),
    }
    let ncols = 1 + meta.dim + TAIL_COLUMNS.len();
    let mut records = Vec::with_capacity(meta.records);
    for raw in lines {
        p.line += 1;
        if raw.is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != ncols {
            return Err(p.err(format!("expected {ncols} columns, found {}", cols.len())));
        }
        let sim_id: usize = p.uint("sim_id", cols[0])?;
        if sim_id != records.len() {
            return Err(p.err(format!(
                "sim_id {sim_id} out of sequence (expected {})",
                records.len()
            )));
        }
        let x = (0..meta.dim)
            .map(|i| p.f64(&format!("x{i}"), cols[1 + i]))
            .collect::<Result<Vec<_>, _>>()?;
        let t = &cols[1 + meta.dim..];
        let rec = EnsembleRecord {
            sim_id,
            x,
            f: p.f64("f", t[0])?,
            priority: p.f64("priority", t[1])?,
            num_procs: p.uint("num_procs", t[2])?,
            num_gpus: p.uint("num_gpus", t[3])?,
            gen_worker: p.uint("gen_worker", t[4])?,
            sim_worker: if t[5] == "-" {
                None
            } else {
                Some(p.uint("sim_worker", t[5])?)
            },
            given: p.boolean("given", t[6])?,
            returned: p.boolean("returned", t[7])?,
            cancel_requested: p.boolean("cancel_requested", t[8])?,
            kill_sent: p.boolean("kill_sent", t[9])?,
            given_time: p.opt_f64("given_time", t[10])?,
            returned_time: p.opt_f64("returned_time", t[11])?,
        };
        records.push(rec);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(p.err("file ends mid-row (truncated)"));
    }
    if records.len() != meta.records {
        return Err(p.err(format!(
            "metadata lists {} records but file has {}",
            meta.records,
            records.len()
        )));
    }
    Ok(History::from_parts(meta.dim, meta.start_time, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{CalcStatus, NewPoint, SimReturn};
    use proptest::prelude::*;

    #[test]
    fn roundtrip_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.tsv");
        let h = History::new(3);
        h.dump(&p).unwrap();
        let back = load(&p).unwrap();
        assert!(back.is_empty());
        assert!(h.same_as(&back));
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.tsv");
        let mut h = History::new(2);
        h.submit_points(&[NewPoint::new(vec![1.0, 2.0]), NewPoint::new(vec![3.0, 4.0])], 0)
            .unwrap();
        h.dump(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() - 7]).unwrap();
        match load(&p) {
            Err(HistoryError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        // cut at a row boundary: caught by the record count
        let first_two: String = text.split_inclusive('\n').take(2).collect();
        fs::write(&p, first_two).unwrap();
        assert!(matches!(load(&p), Err(HistoryError::Parse { .. })));
    }

    #[test]
    fn bad_cell_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.tsv");
        let mut h = History::new(1);
        h.submit_points(&[NewPoint::new(vec![1.0]), NewPoint::new(vec![2.0])], 0)
            .unwrap();
        h.dump(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap().replace("2.0\tnan", "zz\tnan");
        fs::write(&p, text).unwrap();
        match load(&p) {
            Err(HistoryError::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("x0"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    fn arb_f64() -> impl Strategy<Value = f64> {
        prop_oneof![
            4 => proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO,
            1 => Just(f64::NAN),
            1 => Just(f64::INFINITY),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn roundtrip_mixed_records(
            xs in proptest::collection::vec(proptest::collection::vec(arb_f64(), 2), 100),
            fs_ in proptest::collection::vec(arb_f64(), 100),
            state in proptest::collection::vec(0u8..5, 100),
            start in 0.0..2e9f64,
        ) {
            let mut h = History::with_start_time(2, start);
            let pts: Vec<NewPoint> = xs.iter().enumerate()
                .map(|(i, x)| NewPoint::new(x.clone()).with_priority(i as f64 * 0.37 - 3.0)
                    .with_gpus((i % 4) as u32).with_procs((i % 7) as u32))
                .collect();
            h.submit_points(&pts, 1).unwrap();
            for (i, s) in state.iter().enumerate() {
                match s {
                    0 => {}
                    1 => { h.mark_cancel(&[i]).unwrap(); }
                    _ => {
                        h.mark_given(&[i], 2 + i % 3, i as f64 * 0.1).unwrap();
                        if *s >= 3 {
                            let status = if *s == 4 { CalcStatus::Killed } else { CalcStatus::Completed };
                            h.update_with_results(&[SimReturn {
                                sim_id: i, f: fs_[i], sim_worker: 2 + i % 3,
                                returned_time: i as f64 * 0.1 + 1.0 / 3.0, status,
                            }]).unwrap();
                        }
                    }
                }
            }
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("h.tsv");
            h.dump(&p).unwrap();
            let back = load(&p).unwrap();
            prop_assert!(h.same_as(&back));
        }
    }
}
