//! Signal files: TSB1 tensors, or CSV with a `channel_0,...` header and one
//! row per timestep. A directory of CSV files holds one sample per file, read
//! in name order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor_core::{tsb1, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalFormat {
    Csv,
    Tsb1,
}

impl SignalFormat {
    /// CSV for `.csv` files and directories, TSB1 otherwise.
    pub fn from_path(path: &Path) -> Self {
        if path.is_dir() || path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            SignalFormat::Csv
        } else {
            SignalFormat::Tsb1
        }
    }
}

fn format_error(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        location: format!("line {line}"),
        detail: detail.into(),
    }
}

/// One sample from CSV text, as [C, T].
pub fn parse_csv(text: &str, path: &Path) -> Result<Tensor> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| format_error(path, 1, "empty file, expected a header"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    for (i, name) in names.iter().enumerate() {
        if *name != format!("channel_{i}") {
            return Err(format_error(
                path,
                1,
                format!("malformed header: column {i} is {name:?}, expected \"channel_{i}\""),
            ));
        }
    }
    let c = names.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != c {
            return Err(format_error(
                path,
                i + 1,
                format!("ragged row: {} fields, header has {c}", fields.len()),
            ));
        }
        let row = fields
            .iter()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>()
                    .map_err(|_| format_error(path, i + 1, format!("column {j}: {f:?} is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format_error(path, 2, "no data rows"));
    }
    let len = rows.len();
    let mut data = vec![0.0; c * len];
    for (t, row) in rows.iter().enumerate() {
        for (ch, v) in row.iter().enumerate() {
            data[ch * len + t] = *v;
        }
    }
    Tensor::from_vec(vec![c, len], data)
}

/// CSV text for one [C, T] sample.
pub fn to_csv(sample: &[f64], c: usize, len: usize) -> String {
    let mut out = (0..c).map(|i| format!("channel_{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for t in 0..len {
        for ch in 0..c {
            if ch > 0 {
                out.push(',');
            }
            write!(out, "{}", sample[ch * len + t]).unwrap();
        }
        out.push('\n');
    }
    out
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format {
            path: dir.display().to_string(),
            location: "directory".into(),
            detail: "no .csv files".into(),
        });
    }
    Ok(files)
}

/// Signals as [B, C, T]. A single CSV file gives B = 1; a rank-2 TSB1
/// tensor is read as one sample.
pub fn load_signals(path: &Path, format: SignalFormat) -> Result<Tensor> {
    match format {
        SignalFormat::Tsb1 => {
            let t = tsb1::load(path)?;
            match t.rank() {
                3 => Ok(t),
                2 => t.reshape(&[1, t.dim(0), t.dim(1)]),
                _ => Err(Error::Format {
                    path: path.display().to_string(),
                    location: "byte offset 4".into(),
                    detail: format!("signals must have rank 2 or 3, got shape {:?}", t.shape()),
                }),
            }
        }
        SignalFormat::Csv => {
            let files = if path.is_dir() { csv_files(path)? } else { vec![path.to_path_buf()] };
            let mut samples = Vec::with_capacity(files.len());
            for f in &files {
                let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                let s = parse_csv(&text, f)?;
                if let Some(first) = samples.first() {
                    let first: &Tensor = first;
                    if first.shape() != s.shape() {
                        return Err(Error::Format {
                            path: f.display().to_string(),
                            location: "line 1".into(),
                            detail: format!("sample shape {:?} differs from {:?}", s.shape(), first.shape()),
                        });
                    }
                }
                samples.push(s);
            }
            let (c, len) = (samples[0].dim(0), samples[0].dim(1));
            let data = samples.into_iter().flat_map(Tensor::into_data).collect();
            Tensor::from_vec(vec![files.len(), c, len], data)
        }
    }
}

/// Writes [B, C, T] signals. CSV output to a `.csv` path needs B = 1; any
/// other CSV path becomes a directory of `sample_NNNN.csv` files.
pub fn save_signals(signals: &Tensor, path: &Path, format: SignalFormat) -> Result<()> {
    signals.expect_rank(3, "save_signals", "signals [B, C, T]")?;
    match format {
        SignalFormat::Tsb1 => tsb1::save(signals, path),
        SignalFormat::Csv => {
            let (b, c, len) = (signals.dim(0), signals.dim(1), signals.dim(2));
            let is_file = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
            if is_file {
                if b != 1 {
                    return Err(Error::invalid(
                        "save_signals",
                        format!("{b} samples cannot go in the single file {}", path.display()),
                    ));
                }
                return fs::write(path, to_csv(signals.row(0), c, len)).map_err(|e| Error::io(path, e));
            }
            fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            for n in 0..b {
                let f = path.join(format!("sample_{n:04}.csv"));
                fs::write(&f, to_csv(signals.row(n), c, len)).map_err(|e| Error::io(&f, e))?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn hand_written_csv() {
        let t = parse_csv("channel_0,channel_1,channel_2\n1,2,3\n4,5,6.5\n", Path::new("x.csv")).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.5]);
    }

    #[test]
    fn csv_diagnostics() {
        let p = Path::new("bad.csv");
        let header = parse_csv("channel_0,chan_1\n1,2\n", p).unwrap_err().to_string();
        assert!(header.contains("line 1") && header.contains("malformed header"), "{header}");
        let ragged = parse_csv("channel_0,channel_1\n1,2\n3\n", p).unwrap_err().to_string();
        assert!(ragged.contains("line 3") && ragged.contains("ragged"), "{ragged}");
        let num = parse_csv("channel_0\nabc\n", p).unwrap_err().to_string();
        assert!(num.contains("line 2") && num.contains("not a number"), "{num}");
    }

    #[test]
    fn round_trips_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let x = rng::standard_normal(&[3, 2, 17], &mut rng::seeded(1)).map(|v| v * 1e-3 + 1.0 / 3.0);
        for (name, fmt) in [("s.tsb1", SignalFormat::Tsb1), ("csvdir", SignalFormat::Csv)] {
            let p = dir.path().join(name);
            save_signals(&x, &p, fmt).unwrap();
            assert_eq!(SignalFormat::from_path(&p), fmt);
            assert_eq!(load_signals(&p, fmt).unwrap(), x);
        }
        let one = x.row(0).to_vec();
        let one = Tensor::from_vec(vec![1, 2, 17], one).unwrap();
        let p = dir.path().join("one.csv");
        save_signals(&one, &p, SignalFormat::Csv).unwrap();
        assert_eq!(load_signals(&p, SignalFormat::Csv).unwrap(), one);
        assert!(save_signals(&x, &p, SignalFormat::Csv).is_err());
    }

    #[test]
    fn wrong_magic_names_the_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsb1");
        fs::write(&p, b"XYZ1\x00\x00\x00\x00").unwrap();
        let err = load_signals(&p, SignalFormat::Tsb1).unwrap_err().to_string();
        assert!(err.contains("58, 59, 5a, 31"), "{err}");
    }
}
